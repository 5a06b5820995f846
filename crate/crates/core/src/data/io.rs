//! On-disk formats.
//!
//! * Images: binary PGM (`P5`), maxval 255.
//! * Masks: one binary PGM per channel, `<stem>_irma.pgm`, `<stem>_np.pgm`, `<stem>_nv.pgm`.
//!   0 is written as 0 and 1 as 255; on read a pixel is positive when `v * 255 / maxval >= 128`.
//! * Tabular datasets: CSV, header `id,feat_0,..,feat_{D-1},label`, empty label for unlabeled rows.
//! * Segmentation datasets: a directory with `images/<id>.pgm` and `masks/<id>_<lesion>.pgm`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Image, Lesion, MaskSet, OrdinalLabel, Raster, SegDataset, SegSample, TabularDataset, TabularSample, Task};
use crate::error::{Error, Result};

const MASK_THRESHOLD: u32 = 128;

pub fn write_pgm(path: &Path, raster: &Raster<u8>) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    buf.extend_from_slice(raster.as_slice());
    fs::write(path, buf)?;
    Ok(())
}

/// Parsed PGM: pixel values and the declared maxval.
pub fn read_pgm(path: &Path) -> Result<(Raster<u8>, u32)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::format("PGM", path, reason);

    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let parse = |t: &str, what: &str| t.parse::<usize>().map_err(|_| bad(&format!("invalid {what} {t:?}")));
    let width = parse(tokens[1], "width")?;
    let height = parse(tokens[2], "height")?;
    let maxval = parse(tokens[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != width * height {
        return Err(bad(&format!("expected {} pixel bytes, found {}", width * height, data.len())));
    }
    if let Some(v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(bad(&format!("pixel {v} exceeds maxval {maxval}")));
    }
    Ok((Raster::new(width, height, data.to_vec())?, maxval as u32))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_pgm(path, &image.raster().map(|v| (v * 255.0).round() as u8))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (raw, maxval) = read_pgm(path)?;
    let scale = maxval as f64;
    Image::new(raw.map(|v| v as f64 / scale))
}

pub fn mask_path(stem: &Path, lesion: Lesion) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!("_{}.pgm", lesion.suffix()));
    stem.with_file_name(name)
}

pub fn write_mask(stem: &Path, mask: &MaskSet) -> Result<()> {
    for lesion in Lesion::ALL {
        write_pgm(&mask_path(stem, lesion), &mask.channel(lesion).map(|v| v * 255))?;
    }
    Ok(())
}

pub fn read_mask(stem: &Path) -> Result<MaskSet> {
    let channels = Lesion::ALL.map(|lesion| -> Result<Raster<u8>> {
        let (raw, maxval) = read_pgm(&mask_path(stem, lesion))?;
        Ok(raw.map(|v| u8::from(v as u32 * 255 / maxval >= MASK_THRESHOLD)))
    });
    let [a, b, c] = channels;
    let (a, b, c) = (a?, b?, c?);
    if !a.same_shape(&b) || !a.same_shape(&c) {
        return Err(Error::format("mask", stem, "channel dimensions differ"));
    }
    MaskSet::new([a, b, c])
}

pub fn write_tabular(path: &Path, d: &TabularDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..d.dim()).map(|i| format!("feat_{i}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in d.samples() {
        let mut row = Vec::with_capacity(d.dim() + 2);
        row.push(s.id.to_string());
        // `{}` on f64 prints the shortest string that parses back to the same bits
        row.extend(s.features.iter().map(|v| format!("{v}")));
        row.push(s.label.map(|l| l.value().to_string()).unwrap_or_default());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tabular(path: &Path, task: Task) -> Result<TabularDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = header.len();
    if n < 2 || &header[0] != "id" || &header[n - 1] != "label" {
        return Err(Error::format("CSV", path, "header must be id,feat_0..,label"));
    }
    let dim = n - 2;
    for (i, h) in header.iter().skip(1).take(dim).enumerate() {
        if h != format!("feat_{i}") {
            return Err(Error::format("CSV", path, format!("column {} should be feat_{i}, found {h:?}", i + 1)));
        }
    }
    let mut samples = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let at = |what: &str| Error::format("CSV", path, format!("row {}: bad {what}", line + 2));
        let id = record[0].parse::<u64>().map_err(|_| at("id"))?;
        let features = (1..=dim)
            .map(|j| record[j].parse::<f64>().map_err(|_| at("feature")))
            .collect::<Result<Vec<_>>>()?;
        let label = match record[n - 1].trim() {
            "" => None,
            v => Some(OrdinalLabel::new(v.parse::<u8>().map_err(|_| at("label"))?).map_err(|_| at("label"))?),
        };
        samples.push(TabularSample { id, features, label });
    }
    TabularDataset::new(task, dim, samples)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("CSV", path, format!("{other:?}")),
    }
}

pub fn write_seg_dataset(dir: &Path, d: &SegDataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in d.samples() {
        write_image(&dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            write_mask(&dir.join("masks").join(s.id.to_string()), m)?;
        }
    }
    Ok(())
}

/// Reads every `images/<id>.pgm`, attaching masks where all three channel files exist.
pub fn read_seg_dataset(dir: &Path) -> Result<SegDataset> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let id = stem
                .parse::<u64>()
                .map_err(|_| Error::format("dataset", &path, "image name is not <id>.pgm"))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    let samples = ids
        .into_iter()
        .map(|id| {
            let image = read_image(&dir.join("images").join(format!("{id}.pgm")))?;
            let stem = dir.join("masks").join(id.to_string());
            let mask = if mask_path(&stem, Lesion::Irma).exists() {
                Some(read_mask(&stem)?)
            } else {
                None
            };
            Ok(SegSample { id, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    SegDataset::new(samples)
}

/// Write text atomically enough for our purposes: create parents, then write.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
