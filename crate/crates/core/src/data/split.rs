use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{SegDataset, TabularDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream};

/// Stratified train/dev partition of a tabular dataset.
///
/// Per class, `floor(ratio * n_c)` samples go to train; the shortfall against
/// `round(ratio * n)` is handed out one sample at a time in class-index order
/// (unlabeled rows form their own stratum, placed last). Output keeps the
/// original sample order.
pub fn split_train_dev(d: &TabularDataset, ratio: f64, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
    let keys: Vec<Option<u8>> = d.samples().iter().map(|s| s.label.map(|l| l.value())).collect();
    let (train_idx, dev_idx) = split_indices(&keys, ratio, seed)?;
    let pick = |idx: &[usize]| {
        TabularDataset::from_parts_unchecked(
            d.task(),
            d.dim(),
            idx.iter().map(|&i| d.samples()[i].clone()).collect(),
        )
    };
    Ok((pick(&train_idx), pick(&dev_idx)))
}

/// Unstratified seeded split for segmentation data.
pub fn split_seg(d: &SegDataset, ratio: f64, seed: u64) -> Result<(SegDataset, SegDataset)> {
    let keys = vec![None; d.len()];
    let (train_idx, dev_idx) = split_indices(&keys, ratio, seed)?;
    let pick = |idx: &[usize]| SegDataset::new(idx.iter().map(|&i| d.samples()[i].clone()).collect());
    Ok((pick(&train_idx)?, pick(&dev_idx)?))
}

pub(crate) fn split_indices(keys: &[Option<u8>], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InputDomain(format!("split ratio {ratio} not in (0,1)")));
    }
    // None sorts first in Option's Ord; unlabeled stratum should come last.
    let mut strata: BTreeMap<(bool, u8), Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let key = match k {
            Some(c) => (false, *c),
            None => (true, 0),
        };
        strata.entry(key).or_default().push(i);
    }
    for (&(unlabeled, class), members) in &strata {
        if !unlabeled && members.len() < 2 {
            return Err(Error::Stratification { class, count: members.len() });
        }
    }

    let target = (ratio * keys.len() as f64).round() as usize;
    let mut take: Vec<usize> = strata
        .values()
        .map(|m| (ratio * m.len() as f64 + 1e-9).floor() as usize)
        .collect();
    let mut remaining = target.saturating_sub(take.iter().sum());
    while remaining > 0 {
        let mut progressed = false;
        for (slot, (&(unlabeled, _), members)) in take.iter_mut().zip(&strata) {
            if remaining == 0 {
                break;
            }
            let cap = if unlabeled { members.len() } else { members.len() - 1 };
            if *slot < cap {
                *slot += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut rng = seeded(derive_seed(seed, stream::SPLIT));
    let mut train = Vec::with_capacity(target);
    let mut dev = Vec::with_capacity(keys.len() - target);
    for (members, &n_train) in strata.values().zip(&take) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train.extend_from_slice(&shuffled[..n_train]);
        dev.extend_from_slice(&shuffled[n_train..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    Ok((train, dev))
}
