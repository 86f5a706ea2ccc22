use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{ClipRecord, Label};
use crate::rng::Rng;

const KFOLD_STREAM: u64 = 0x006b_666f_6c64;
const SPLIT_STREAM: u64 = 0x0073_706c_6974;
const CALIB_STREAM: u64 = 0x0063_616c_6962;

/// Shuffles `0..n` and cuts it into `k` folds; the first `n % k` folds
/// get one extra element.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {n} available items"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, KFOLD_STREAM).shuffle(&mut order);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// Folds that never split a group (speaker). Groups are shuffled, then
/// placed largest first into the fold with the fewest items.
pub fn kfold_grouped(groups: &[String], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > members.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} available groups",
            members.len()
        )));
    }
    let mut order: Vec<Vec<usize>> = members.into_values().collect();
    Rng::derived(seed, KFOLD_STREAM).shuffle(&mut order);
    // stable sort keeps the shuffled order among equal sizes
    order.sort_by(|a, b| b.len().cmp(&a.len()));
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for group in order {
        let target = (0..k).min_by_key(|&f| (folds[f].len(), f)).expect("k > 0");
        folds[target].extend(group);
    }
    Ok(folds)
}

/// Shuffled split with `round(n * test_fraction)` test items.
pub fn train_test_split(
    n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must be in [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, SPLIT_STREAM).shuffle(&mut order);
    let test = (n as f64 * test_fraction).round() as usize;
    let train = order.split_off(test);
    Ok((train, order))
}

/// Held-out individuals (`S_L`), training clips (`S_R`) and the test split
/// of the remainder (`S_T`), as indices into the clip list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSplit {
    pub held_out: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn calibration_split(
    clips: &[ClipRecord],
    held_out_speakers: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<CalibrationSplit> {
    let (held_out, rest): (Vec<usize>, Vec<usize>) =
        (0..clips.len()).partition(|&i| held_out_speakers.contains(&clips[i].speaker_id));
    if held_out.is_empty() {
        return Err(Error::Data(
            "none of the held-out speakers appear in the dataset".into(),
        ));
    }
    let (train, test) = train_test_split(rest.len(), test_fraction, seed)?;
    Ok(CalibrationSplit {
        held_out,
        train: train.into_iter().map(|i| rest[i]).collect(),
        test: test.into_iter().map(|i| rest[i]).collect(),
    })
}

/// Picks `per_label` clips of each label for calibration; returns the
/// chosen indices and the remaining ones, both in ascending order.
pub fn select_calibration_clips(
    clips: &[ClipRecord],
    per_label: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = Rng::derived(seed, CALIB_STREAM);
    let mut chosen = Vec::new();
    for label in [Label::Deceptive, Label::Truthful] {
        let mut pool: Vec<usize> = (0..clips.len())
            .filter(|&i| clips[i].label == label)
            .collect();
        if pool.len() < per_label {
            return Err(Error::Data(format!(
                "need {per_label} {} clips for calibration, found {}",
                label.name(),
                pool.len()
            )));
        }
        rng.shuffle(&mut pool);
        chosen.extend_from_slice(&pool[..per_label]);
    }
    chosen.sort_unstable();
    let rest = (0..clips.len()).filter(|i| !chosen.contains(i)).collect();
    Ok((chosen, rest))
}
