//! Per-timestep attention profiles, top-k moments and padding mass.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{AttentionKind, AttentionTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub clip_id: String,
    pub scores: Vec<f64>,
    pub step_seconds: f64,
    pub valid_length: usize,
}

impl AttentionProfile {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn time_seconds(&self, step: usize) -> f64 {
        step as f64 * self.step_seconds
    }

    pub fn total_mass(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Simple traces pass through; dot-product score matrices are averaged over
/// the query axis.
pub fn attention_profile(
    trace: &AttentionTrace,
    step_seconds: f64,
    valid_length: usize,
) -> AttentionProfile {
    let s = &trace.scores;
    let scores = match trace.kind {
        AttentionKind::Simple if s.rows() == 1 => s.data().to_vec(),
        _ => {
            let n = s.rows() as f64;
            (0..s.cols())
                .map(|c| (0..s.rows()).map(|r| s.get(r, c)).sum::<f64>() / n)
                .collect()
        }
    };
    AttentionProfile {
        clip_id: trace.clip_id.clone(),
        valid_length: valid_length.min(scores.len()),
        scores,
        step_seconds,
    }
}

/// `k` highest-scoring steps, descending, ties to the lower index.
pub fn top_k_frames(profile: &AttentionProfile, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > profile.len() {
        return Err(Error::Config(format!(
            "k = {k} must be between 1 and the profile length {}",
            profile.len()
        )));
    }
    let mut idx: Vec<usize> = (0..profile.len()).collect();
    idx.sort_by(|&a, &b| {
        profile.scores[b]
            .total_cmp(&profile.scores[a])
            .then(a.cmp(&b))
    });
    Ok(idx
        .into_iter()
        .take(k)
        .map(|i| (i, profile.scores[i]))
        .collect())
}

/// Attention mass on padded steps (index >= valid_length).
pub fn padding_mass(profile: &AttentionProfile) -> f64 {
    profile.scores[profile.valid_length.min(profile.len())..]
        .iter()
        .sum()
}

const HEADER: &str = "clip_id\tstep_index\ttime_s\tscore\tis_padding";

/// Writes one row per (clip, step), sorted by clip id then step, with
/// scores to 9 significant digits.
pub fn export_profiles(profiles: &[AttentionProfile], path: &Path) -> Result<()> {
    let mut sorted: Vec<&AttentionProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in sorted {
        for (i, s) in p.scores.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3}\t{:.8e}\t{}",
                p.clip_id,
                i,
                p.time_seconds(i),
                s,
                u8::from(i >= p.valid_length)
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_profiles`].
pub fn read_profiles(path: &Path) -> Result<Vec<AttentionProfile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Data(format!(
            "{}: missing profile header",
            path.display()
        )));
    }
    let mut out: Vec<AttentionProfile> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: String| Error::Data(format!("{}:{}: {what}", path.display(), n + 2));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 columns".into()));
        }
        let step: usize = cols[1].parse().map_err(|e| bad(format!("{e}")))?;
        let time: f64 = cols[2].parse().map_err(|e| bad(format!("{e}")))?;
        let score: f64 = cols[3].parse().map_err(|e| bad(format!("{e}")))?;
        let padding = cols[4] == "1";
        let fresh = out.last().is_none_or(|p| p.clip_id != cols[0]);
        if fresh {
            out.push(AttentionProfile {
                clip_id: cols[0].to_owned(),
                scores: Vec::new(),
                step_seconds: 0.0,
                valid_length: 0,
            });
        }
        let p = out.last_mut().expect("pushed above");
        if step != p.scores.len() {
            return Err(bad(format!("step {step} out of order")));
        }
        if step == 1 {
            p.step_seconds = time;
        }
        p.scores.push(score);
        if !padding {
            p.valid_length = step + 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use proptest::prelude::*;

    fn profile(scores: Vec<f64>, valid: usize) -> AttentionProfile {
        AttentionProfile {
            clip_id: "c".into(),
            scores,
            step_seconds: 0.2,
            valid_length: valid,
        }
    }

    fn trace(kind: AttentionKind, scores: Tensor) -> AttentionTrace {
        AttentionTrace {
            kind,
            scores,
            clip_id: "c".into(),
        }
    }

    #[test]
    fn profile_reduction() {
        let simple = trace(
            AttentionKind::Simple,
            Tensor::row_vector(vec![0.2, 0.3, 0.5]).unwrap(),
        );
        assert_eq!(
            attention_profile(&simple, 0.2, 3).scores,
            vec![0.2, 0.3, 0.5]
        );
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let dot = trace(AttentionKind::DotProduct, eye);
        assert_eq!(attention_profile(&dot, 0.2, 2).scores, vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            top_k_frames(&profile(vec![0.1, 0.6, 0.3], 3), 1).unwrap(),
            vec![(1, 0.6)]
        );
        assert_eq!(
            top_k_frames(&profile(vec![0.1, 0.6, 0.3], 3), 3).unwrap(),
            vec![(1, 0.6), (2, 0.3), (0, 0.1)]
        );
        assert_eq!(
            top_k_frames(&profile(vec![0.4, 0.4, 0.2], 3), 1).unwrap(),
            vec![(0, 0.4)]
        );
        assert!(top_k_frames(&profile(vec![1.0], 1), 0).is_err());
        assert!(top_k_frames(&profile(vec![1.0], 1), 2).is_err());
    }

    #[test]
    fn padding_mass_examples() {
        assert_eq!(padding_mass(&profile(vec![0.5, 0.5], 2)), 0.0);
        assert!((padding_mass(&profile(vec![0.5, 0.4, 0.1], 2)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn export_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.tsv");
        let mut b = profile(vec![0.123456789123, 0.5, 1.0 - 0.623456789123], 2);
        b.clip_id = "b".into();
        let mut a = profile(vec![0.25, 0.75], 2);
        a.clip_id = "a".into();
        export_profiles(&[b.clone(), a.clone()], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert!(text.lines().nth(1).unwrap().starts_with("a\t0\t"));
        let back = read_profiles(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].valid_length, 2);
        for (x, y) in back[1].scores.iter().zip(&b.scores) {
            assert!(((x - y) / y).abs() < 5e-9);
        }
    }

    proptest! {
        #[test]
        fn dot_profile_keeps_unit_mass(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let logits = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            let scores = crate::numeric::softmax(&logits).unwrap();
            let p = attention_profile(&trace(AttentionKind::DotProduct, scores), 0.2, cols / 2);
            prop_assert!((p.total_mass() - 1.0).abs() < 1e-6);
            prop_assert!(p.scores.iter().all(|&s| s >= 0.0));
            let valid: f64 = p.scores[..p.valid_length].iter().sum();
            prop_assert!((padding_mass(&p) + valid - 1.0).abs() < 1e-6);
            let top = top_k_frames(&p, cols).unwrap();
            prop_assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }
}
