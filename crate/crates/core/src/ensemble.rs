//! Late fusion: each unimodal model casts one hard vote per clip and the
//! label with at least two of three votes wins.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{Label, Modality};
use crate::numeric::Tensor;
use crate::training::predict_label;

pub const VOTERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub modality: Modality,
    pub probs: [f64; 2],
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteRecord {
    pub clip_id: String,
    pub votes: Vec<Vote>,
    pub final_label: Label,
}

fn check_pair(p: &[f64; 2]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p[0] + p[1] - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!("invalid probability pair {p:?}")));
    }
    Ok(())
}

/// Majority label of exactly three hard votes.
pub fn majority_label(labels: &[Label]) -> Result<Label> {
    if labels.len() != VOTERS {
        return Err(Error::Data(format!(
            "voting needs {VOTERS} votes, got {}",
            labels.len()
        )));
    }
    let deceptive = labels.iter().filter(|&&l| l == Label::Deceptive).count();
    Ok(if 2 * deceptive > VOTERS {
        Label::Deceptive
    } else {
        Label::Truthful
    })
}

/// Each model votes the arg-max of its pair (an exact tie votes deceptive).
pub fn majority_vote(clip_id: &str, preds: &[(Modality, [f64; 2])]) -> Result<VoteRecord> {
    if preds.len() != VOTERS {
        return Err(Error::Data(format!(
            "clip `{clip_id}`: voting needs {VOTERS} predictions, got {}",
            preds.len()
        )));
    }
    let mut votes = Vec::with_capacity(VOTERS);
    for &(modality, probs) in preds {
        check_pair(&probs)
            .map_err(|e| Error::Data(format!("clip `{clip_id}`, {modality}: {e}")))?;
        votes.push(Vote {
            modality,
            probs,
            label: Label::from_index(predict_label(&probs))?,
        });
    }
    let labels: Vec<Label> = votes.iter().map(|v| v.label).collect();
    Ok(VoteRecord {
        clip_id: clip_id.to_owned(),
        final_label: majority_label(&labels)?,
        votes,
    })
}

/// Per-clip probabilities produced by `evaluate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub clip_id: String,
    pub probs: [f64; 2],
    pub truth: Option<Label>,
}

impl Prediction {
    pub fn label(&self) -> Label {
        Label::from_index(predict_label(&self.probs)).expect("index 0 or 1")
    }
}

pub fn predictions_from_probs(
    clip_ids: &[String],
    probs: &Tensor,
    truth: &[usize],
) -> Result<Vec<Prediction>> {
    (0..probs.rows())
        .map(|r| {
            Ok(Prediction {
                clip_id: clip_ids.get(r).cloned().unwrap_or_default(),
                probs: [probs.get(r, 0), probs.get(r, 1)],
                truth: truth.get(r).map(|&t| Label::from_index(t)).transpose()?,
            })
        })
        .collect()
}

const PREDICTION_HEADER: &str = "clip_id\tp_deceptive\tp_truthful\tpredicted\tlabel";

/// Tab-separated predictions; probabilities use shortest round-trip
/// formatting so they read back exactly.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for p in preds {
        let truth = p.truth.map(Label::name).unwrap_or("");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.clip_id,
            p.probs[0],
            p.probs[1],
            p.label().name(),
            truth
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTION_HEADER) {
        return Err(Error::Data(format!(
            "{}: missing prediction header",
            path.display()
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), n + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| bad(&e.to_string()));
            let probs = [p(cols[1])?, p(cols[2])?];
            check_pair(&probs).map_err(|e| bad(&e.to_string()))?;
            let truth = if cols[4].is_empty() {
                None
            } else {
                Some(cols[4].parse()?)
            };
            Ok(Prediction {
                clip_id: cols[0].to_owned(),
                probs,
                truth,
            })
        })
        .collect()
}

/// Votes clip by clip over three prediction sets. Every set must cover the
/// same clips; the output follows clip id order.
pub fn vote_files(
    sets: &[(Modality, Vec<Prediction>)],
) -> Result<Vec<(VoteRecord, Option<Label>)>> {
    if sets.len() != VOTERS {
        return Err(Error::Data(format!(
            "voting needs {VOTERS} prediction sets, got {}",
            sets.len()
        )));
    }
    let mut by_clip: BTreeMap<&str, Vec<(Modality, &Prediction)>> = BTreeMap::new();
    for (m, preds) in sets {
        for p in preds {
            by_clip.entry(&p.clip_id).or_default().push((*m, p));
        }
    }
    by_clip
        .into_iter()
        .map(|(id, entries)| {
            if entries.len() != VOTERS {
                let have: Vec<String> = entries.iter().map(|(m, _)| m.to_string()).collect();
                return Err(Error::Data(format!(
                    "clip `{id}` has predictions only from {}",
                    have.join(", ")
                )));
            }
            let truth = entries.iter().find_map(|(_, p)| p.truth);
            let preds: Vec<(Modality, [f64; 2])> =
                entries.iter().map(|(m, p)| (*m, p.probs)).collect();
            Ok((majority_vote(id, &preds)?, truth))
        })
        .collect()
}

pub fn write_votes(path: &Path, records: &[(VoteRecord, Option<Label>)]) -> Result<()> {
    let mut out = String::from("clip_id");
    if let Some((first, _)) = records.first() {
        for v in &first.votes {
            let _ = write!(out, "\t{}", v.modality);
        }
    }
    out.push_str("\tfinal\tlabel\n");
    for (r, truth) in records {
        out.push_str(&r.clip_id);
        for v in &r.votes {
            let _ = write!(out, "\t{}", v.label.name());
        }
        let _ = writeln!(
            out,
            "\t{}\t{}",
            r.final_label.name(),
            truth.map(Label::name).unwrap_or("")
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Deceptive as D, Truthful as T};

    fn pair(l: Label) -> [f64; 2] {
        match l {
            D => [0.7, 0.3],
            T => [0.2, 0.8],
        }
    }

    #[test]
    fn examples() {
        assert_eq!(majority_label(&[D, D, T]).unwrap(), D);
        assert_eq!(majority_label(&[T, T, T]).unwrap(), T);
        let r = majority_vote(
            "c",
            &[
                (Modality::Visual, [0.6, 0.4]),
                (Modality::Audio, [0.4, 0.6]),
                (Modality::Text, [0.55, 0.45]),
            ],
        )
        .unwrap();
        let labels: Vec<Label> = r.votes.iter().map(|v| v.label).collect();
        assert_eq!(labels, vec![D, T, D]);
        assert_eq!(r.final_label, D);
    }

    #[test]
    fn truth_table_and_permutations() {
        for mask in 0u8..8 {
            let labels: Vec<Label> = (0..3)
                .map(|i| if mask >> i & 1 == 1 { D } else { T })
                .collect();
            let expected = if mask.count_ones() >= 2 { D } else { T };
            let preds: Vec<(Modality, [f64; 2])> = Modality::ALL
                .iter()
                .zip(&labels)
                .map(|(&m, &l)| (m, pair(l)))
                .collect();
            for perm in [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ] {
                let shuffled: Vec<_> = perm.iter().map(|&i| preds[i]).collect();
                assert_eq!(majority_vote("c", &shuffled).unwrap().final_label, expected);
            }
        }
    }

    #[test]
    fn monotone_under_single_flip() {
        for mask in 0u8..8 {
            let labels: Vec<Label> = (0..3)
                .map(|i| if mask >> i & 1 == 1 { D } else { T })
                .collect();
            let before = majority_label(&labels).unwrap();
            for i in 0..3 {
                for target in [D, T] {
                    let mut flipped = labels.clone();
                    flipped[i] = target;
                    if before == target {
                        assert_eq!(majority_label(&flipped).unwrap(), target);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_count_and_bad_pairs() {
        assert!(majority_vote("c", &[(Modality::Visual, [0.5, 0.5])]).is_err());
        assert!(majority_label(&[D, T]).is_err());
        let bad = [(Modality::Visual, [0.9, 0.9]); 3];
        assert!(majority_vote("c", &bad).is_err());
        let tie = [(Modality::Visual, [0.5, 0.5]); 3];
        assert_eq!(majority_vote("c", &tie).unwrap().final_label, D);
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let preds = vec![
            Prediction {
                clip_id: "a".into(),
                probs: [0.1234567890123, 1.0 - 0.1234567890123],
                truth: Some(T),
            },
            Prediction {
                clip_id: "b".into(),
                probs: [0.5, 0.5],
                truth: None,
            },
        ];
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    #[test]
    fn missing_modality_is_named() {
        let p = |id: &str| Prediction {
            clip_id: id.into(),
            probs: [0.6, 0.4],
            truth: None,
        };
        let sets = vec![
            (Modality::Visual, vec![p("a"), p("b")]),
            (Modality::Audio, vec![p("a"), p("b")]),
            (Modality::Text, vec![p("a")]),
        ];
        let err = vote_files(&sets).unwrap_err().to_string();
        assert!(err.contains('b') && err.contains("visual, audio"), "{err}");
        assert!(vote_files(&sets[..2]).is_err());
    }
}
