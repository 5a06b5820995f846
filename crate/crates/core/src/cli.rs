use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use scarcekit::config::{RunConfig, TtaMode};
use scarcekit::data::io::{read_image, read_mask, read_seg_dataset, read_tabular, write_image, write_mask, write_seg_dataset, write_tabular};
use scarcekit::data::{OrdinalLabel, SegDataset, TabularDataset, Task};
use scarcekit::ensemble::{Ensemble, MANIFEST_NAME};
use scarcekit::metrics::{seg_summary, MetricsReport};
use scarcekit::pipeline::{
    self, companion_image, companion_train_config, predict_tabular, score_tabular, seg_train_config, train_seed, SegModels, Stages,
    TabularOutput,
};
use scarcekit::ssl::{audit_csv, rpl_train, supervised_train};
use scarcekit::Error;

#[derive(Parser)]
#[command(name = "scarcekit", version, about = "Small-data grading and lesion segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (CSV tables or PGM images and masks).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of rows (tabular) or images (segmentation) to generate.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the supervised model, or the segmenters for the segmentation task.
    Train(Common),
    /// Train with reliable pseudo labels and write the round audit.
    Rpl(Common),
    /// Run ensemble, TTA, decision and post-processing on the dev set.
    Predict(Common),
    /// Score predictions against the dev labels.
    Evaluate(Common),
    /// Run the stage-by-stage ablation over a seed list.
    Ablate(Common),
}

#[derive(Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task when no config file is given.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.task) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(task)) => RunConfig::new(task),
            (None, None) => return Err(Error::Config("either --config or --task is required".into()).into()),
        };
        if let Some(task) = self.task {
            if task != cfg.task {
                return Err(Error::Config(format!("--task {task} contradicts the config task {}", cfg.task)).into());
            }
        }
        if let Some(out) = &self.out {
            cfg.output.dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &RunConfig) -> Result<u64> {
        if self.seeds.is_some() {
            return Err(Error::Config("this command takes a single --seed".into()).into());
        }
        Ok(cfg.resolve_seed(self.seed)?)
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone().ok_or_else(|| Error::Config("an output directory is required (--out or [output] dir)".into()))?;
    fs::create_dir_all(&dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n } => synth(&common, n),
        Command::Train(c) => train(&c),
        Command::Rpl(c) => rpl(&c),
        Command::Predict(c) => predict(&c),
        Command::Evaluate(c) => evaluate(&c),
        Command::Ablate(c) => ablate(&c),
    }
}

fn synth(common: &Common, n: Option<usize>) -> Result<()> {
    let mut cfg = common.load()?;
    let seed = common.seed(&cfg)?;
    let out = out_dir(&cfg)?;
    if cfg.task == Task::Segmentation {
        if let Some(n) = n {
            cfg.synth.seg_dev = (n / 5).max(1);
            cfg.synth.seg_train = n.saturating_sub(cfg.synth.seg_dev);
            cfg.validate()?;
        }
        let (train, dev) = pipeline::synth_seg(&cfg, seed)?;
        write_seg_dataset(&out.join("train"), &train)?;
        write_seg_dataset(&out.join("dev"), &dev)?;
        println!("images {} {}", train.len(), dev.len());
        return Ok(());
    }
    if let Some(n) = n {
        cfg.synth.n = n;
        cfg.validate()?;
    }
    let splits = pipeline::synth_tabular(&cfg, seed)?;
    write_tabular(&out.join("labeled.csv"), &splits.labeled)?;
    write_tabular(&out.join("unlabeled.csv"), &splits.unlabeled)?;
    write_tabular(&out.join("dev.csv"), &splits.dev)?;
    if cfg.task == Task::Grading {
        let dir = out.join("companions");
        fs::create_dir_all(&dir)?;
        for s in splits.dev.samples() {
            let label = s.label.expect("dev rows are labeled");
            let (image, _) = companion_image(label, s.id, seed, cfg.synth.size)?;
            write_image(&dir.join(format!("{}.pgm", s.id)), &image)?;
        }
    }
    let c = splits.counts;
    println!("counts {} {} {}", c[0], c[1], c[2]);
    Ok(())
}

struct TabularData {
    labeled: TabularDataset,
    unlabeled: Option<TabularDataset>,
    dev: TabularDataset,
    /// Seed of the synthetic split, when the data was generated rather than read.
    synth_seed: Option<u64>,
}

fn tabular_data(cfg: &RunConfig, seed: u64) -> Result<TabularData> {
    let d = &cfg.data;
    match (&d.train, &d.dev) {
        (Some(train), Some(dev)) => Ok(TabularData {
            labeled: read_tabular(train, cfg.task)?,
            unlabeled: d.unlabeled.as_deref().map(|p| read_tabular(p, cfg.task)).transpose()?,
            dev: read_tabular(dev, cfg.task)?,
            synth_seed: None,
        }),
        (None, None) => {
            let s = pipeline::synth_tabular(cfg, seed)?;
            Ok(TabularData { labeled: s.labeled, unlabeled: Some(s.unlabeled), dev: s.dev, synth_seed: Some(seed) })
        }
        _ => Err(Error::Config("[data] needs both train and dev, or neither".into()).into()),
    }
}

fn seg_data(cfg: &RunConfig, seed: u64) -> Result<(SegDataset, SegDataset)> {
    let d = &cfg.data;
    match (&d.train, &d.dev) {
        (Some(train), Some(dev)) => Ok((read_seg_dataset(train)?, read_seg_dataset(dev)?)),
        (None, None) => Ok(pipeline::synth_seg(cfg, seed)?),
        _ => Err(Error::Config("[data] needs both train and dev, or neither".into()).into()),
    }
}

fn model_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.model.path.clone().unwrap_or_else(|| out.join("model"))
}

fn companion_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.post.seg_model.clone().unwrap_or_else(|| out.join("companion"))
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.seed(&cfg)?;
    let out = out_dir(&cfg)?;
    let tseed = train_seed(seed);
    if cfg.task == Task::Segmentation {
        let (train, _) = seg_data(&cfg, seed)?;
        let models = SegModels::train(&train, &cfg, &seg_train_config(&cfg, tseed), cfg.members(), tseed)?;
        models.save(&model_dir(&cfg, &out))?;
        eprintln!("trained {} + {} segmenters on {} images", models.np.len(), models.small.len(), train.len());
        return Ok(());
    }
    let data = tabular_data(&cfg, seed)?;
    let model = supervised_train(&data.labeled, &cfg.rpl_config(tseed))?;
    model.save(&model_dir(&cfg, &out))?;
    eprintln!("trained {} member(s) on {} rows", model.len(), data.labeled.len());
    train_companion(&cfg, seed, &out)
}

/// Grade post-editing reads lesion masks; train their segmenter alongside the grader.
fn train_companion(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    if cfg.task != Task::Grading || !cfg.post.enabled || cfg.post.seg_model.is_some() {
        return Ok(());
    }
    let tseed = train_seed(seed);
    let data = pipeline::companion_train_set(cfg, seed)?;
    let models = SegModels::train(&data, cfg, &companion_train_config(cfg, tseed), cfg.members(), tseed)?;
    models.save(&companion_dir(cfg, out))?;
    Ok(())
}

fn rpl(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    if cfg.task == Task::Segmentation {
        return Err(Error::Config("rpl applies to the tabular tasks".into()).into());
    }
    let seed = common.seed(&cfg)?;
    let out = out_dir(&cfg)?;
    let data = tabular_data(&cfg, seed)?;
    let unlabeled = data.unlabeled.ok_or_else(|| Error::Config("rpl needs [data] unlabeled".into()))?;
    let outcome = rpl_train(&data.labeled, &unlabeled, &cfg.rpl_config(train_seed(seed)))?;
    outcome.model.save(&model_dir(&cfg, &out))?;
    write(&out.join("audit.csv"), &audit_csv(&outcome.audit))?;
    eprintln!("rpl: {} rounds, {} audit rows", cfg.rpl.rounds, outcome.audit.len());
    train_companion(&cfg, seed, &out)
}

fn stage_log(cfg: &RunConfig, stages: Stages) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    let tta = if stages.tta { cfg.tta_mode() } else { TtaMode::None };
    let decide = if cfg.task == Task::Segmentation {
        format!("binarize@{}", cfg.post.threshold)
    } else {
        "rounding".to_string()
    };
    format!("pipeline: ensemble({}) -> tta({tta}) -> {decide} -> post({})", on(stages.ensemble), on(stages.post))
}

fn predict(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.seed(&cfg)?;
    let out = out_dir(&cfg)?;
    let stages = Stages::from_config(&cfg);
    eprintln!("{}", stage_log(&cfg, stages));
    if cfg.task == Task::Segmentation {
        let (_, dev) = seg_data(&cfg, seed)?;
        let models = SegModels::load(&model_dir(&cfg, &out))?;
        let dir = out.join("predictions");
        fs::create_dir_all(&dir)?;
        for s in dev.samples() {
            let masks = models.predict(&s.image, stages, &cfg)?;
            write_mask(&dir.join(s.id.to_string()), &masks)?;
        }
        eprintln!("wrote {} mask sets", dev.len());
        return Ok(());
    }
    let data = tabular_data(&cfg, seed)?;
    let model = Ensemble::load(&model_dir(&cfg, &out).join(MANIFEST_NAME))?;
    let masks = if stages.post && cfg.task == Task::Grading {
        Some(companion_masks(&cfg, &data, &out)?)
    } else {
        None
    };
    let mut text = String::from("id,grade,score_0,score_1,score_2\n");
    for (i, s) in data.dev.samples().iter().enumerate() {
        let TabularOutput { grade, scores } = predict_tabular(&model, &s.features, stages, &cfg, masks.as_ref().map(|m| &m[i]))?;
        text.push_str(&format!("{},{}", s.id, grade.value()));
        for v in scores {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write(&out.join("predictions.csv"), &text)?;
    eprintln!("wrote {} predictions", data.dev.len());
    Ok(())
}

fn companion_masks(cfg: &RunConfig, data: &TabularData, out: &Path) -> Result<Vec<scarcekit::data::MaskSet>> {
    let dir = companion_dir(cfg, out);
    let models = SegModels::load(&dir).with_context(|| format!("loading companion segmenters from {}", dir.display()))?;
    let stages = Stages { ensemble: cfg.ensemble.enabled, tta: true, post: true };
    data.dev
        .samples()
        .iter()
        .map(|s| {
            let image = match (&cfg.data.companions, data.synth_seed) {
                (Some(dir), _) => read_image(&dir.join(format!("{}.pgm", s.id)))?,
                (None, Some(seed)) => {
                    let label = s.label.ok_or(Error::Empty("dev labels"))?;
                    companion_image(label, s.id, seed, cfg.synth.size)?.0
                }
                (None, None) => return Err(Error::Config("grade post-editing needs [data] companions".into()).into()),
            };
            Ok(models.predict(&image, stages, cfg)?)
        })
        .collect()
}

fn read_predictions(path: &Path) -> Result<Vec<(u64, TabularOutput)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::Format { kind: "predictions", path: path.to_path_buf(), reason: format!("bad row {rec:?}") };
        let id: u64 = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let grade: u8 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let scores = rec.iter().skip(2).map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
        rows.push((id, TabularOutput { grade: OrdinalLabel::new(grade)?, scores }));
    }
    Ok(rows)
}

fn evaluate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.seed(&cfg)?;
    let out = out_dir(&cfg)?;
    let mut report = MetricsReport::new(cfg.task, seed, cfg.digest());
    if cfg.task == Task::Segmentation {
        let (_, dev) = seg_data(&cfg, seed)?;
        let dir = cfg.data.predictions.clone().unwrap_or_else(|| out.join("predictions"));
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for s in dev.samples() {
            preds.push(read_mask(&dir.join(s.id.to_string()))?);
            gts.push(s.mask.clone().ok_or(Error::Empty("dev masks"))?);
        }
        let summary = seg_summary(&preds, &gts)?;
        for l in scarcekit::data::Lesion::ALL {
            report.push("dsc", Some(l.suffix()), summary.dsc[l.index()]);
            report.push("iou", Some(l.suffix()), summary.iou[l.index()]);
        }
        report.push("mean_dsc", None, summary.mean_dsc);
        report.push("mean_iou", None, summary.mean_iou);
    } else {
        let data = tabular_data(&cfg, seed)?;
        let path = cfg.data.predictions.clone().unwrap_or_else(|| out.join("predictions.csv"));
        let preds = read_predictions(&path)?;
        let by_id: std::collections::HashMap<u64, TabularOutput> = preds.into_iter().collect();
        let mut truth = Vec::new();
        let mut outputs = Vec::new();
        for s in data.dev.samples() {
            let p = by_id.get(&s.id).ok_or_else(|| Error::Format {
                kind: "predictions",
                path: path.clone(),
                reason: format!("no prediction for id {}", s.id),
            })?;
            truth.push(s.label.ok_or(Error::Empty("dev labels"))?);
            outputs.push(p.clone());
        }
        let sc = score_tabular(&truth, &outputs)?;
        report.push("qwk", None, sc.qwk);
        report.push("accuracy", None, sc.accuracy);
        report.push("auc", None, sc.auc.macro_auc);
        for (c, a) in sc.auc.per_class.iter().enumerate() {
            if let Some(a) = a {
                report.push("auc", Some(&c.to_string()), *a);
            }
        }
    }
    report.write(&out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let seeds = cfg.resolve_seeds(common.seeds.clone().or(common.seed.map(|s| vec![s])))?;
    let out = out_dir(&cfg)?;
    let table = pipeline::ablate(&cfg, &seeds)?;
    let csv = table.to_csv();
    write(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
