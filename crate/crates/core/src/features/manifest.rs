//! Dataset manifest (JSON Lines, one clip per line) and per-modality CSV
//! feature files.
//!
//! ```text
//! {"clip_id":"c0001","speaker_id":"s03","label":"deceptive","visual":"features/c0001.visual.csv"}
//! ```
//!
//! Feature paths are relative to the manifest's directory. A feature file
//! holds one timestep per line as comma-separated decimals.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, FeatureSequence, Label, Modality};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    clip_id: String,
    speaker_id: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl ManifestEntry {
    fn paths(&self) -> Vec<(Modality, &str)> {
        [
            (Modality::Visual, &self.visual),
            (Modality::Audio, &self.audio),
            (Modality::Text, &self.text),
        ]
        .into_iter()
        .filter_map(|(m, p)| p.as_deref().map(|p| (m, p)))
        .collect()
    }
}

/// Allowed feature widths per modality; `None` accepts any width. Widths
/// must also agree across the whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DimRules {
    pub visual: Option<Vec<usize>>,
    pub audio: Option<Vec<usize>>,
    pub text: Option<Vec<usize>>,
}

impl Default for DimRules {
    /// 128-d face embeddings, any MFCC count, 100-d sentence or 768-d token
    /// vectors.
    fn default() -> Self {
        Self {
            visual: Some(vec![128]),
            audio: None,
            text: Some(vec![100, 768]),
        }
    }
}

impl DimRules {
    pub fn any() -> Self {
        Self {
            visual: None,
            audio: None,
            text: None,
        }
    }

    fn allowed(&self, m: Modality) -> Option<&[usize]> {
        match m {
            Modality::Visual => self.visual.as_deref(),
            Modality::Audio => self.audio.as_deref(),
            Modality::Text => self.text.as_deref(),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    load_manifest_with(path, &DimRules::default())
}

pub fn load_manifest_with(path: &Path, rules: &DimRules) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(entry.clip_id.clone()) {
            return Err(Error::Data(format!(
                "duplicate clip_id `{}`",
                entry.clip_id
            )));
        }
        if entry.paths().is_empty() {
            return Err(Error::Data(format!(
                "clip `{}` lists no feature files",
                entry.clip_id
            )));
        }
        entries.push(entry);
    }

    let records = entries
        .par_iter()
        .map(|e| load_entry(e, base, rules))
        .collect::<Result<Vec<_>>>()?;

    let mut widths: BTreeMap<Modality, (usize, &str)> = BTreeMap::new();
    for r in &records {
        for f in &r.features {
            let (w, first) = *widths.entry(f.modality).or_insert((f.dim(), &r.clip_id));
            if w != f.dim() {
                return Err(Error::Data(format!(
                    "clip `{}`: {} features have {} columns but clip `{first}` has {w}",
                    r.clip_id,
                    f.modality,
                    f.dim()
                )));
            }
        }
    }
    Ok(records)
}

fn load_entry(entry: &ManifestEntry, base: &Path, rules: &DimRules) -> Result<ClipRecord> {
    let mut features = Vec::new();
    for (modality, rel) in entry.paths() {
        let file = base.join(rel);
        let data = read_feature_csv(&file).map_err(|e| match e {
            Error::Io { source, .. } => Error::Data(format!(
                "clip `{}`: cannot read {modality} file {}: {source}",
                entry.clip_id,
                file.display()
            )),
            other => Error::Data(format!("clip `{}`: {other}", entry.clip_id)),
        })?;
        if let Some(allowed) = rules.allowed(modality) {
            if !allowed.contains(&data.cols()) {
                return Err(Error::Data(format!(
                    "clip `{}`: {modality} file {} has {} columns, expected one of {allowed:?}",
                    entry.clip_id,
                    file.display(),
                    data.cols()
                )));
            }
        }
        features.push(FeatureSequence::new(modality, data)?);
    }
    Ok(ClipRecord {
        clip_id: entry.clip_id.clone(),
        speaker_id: entry.speaker_id.clone(),
        label: entry.label,
        features,
    })
}

pub fn read_feature_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "{}:{}: {} columns, expected {}",
                    path.display(),
                    n + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes the valid rows of `data` with shortest round-trip formatting.
pub fn write_feature_csv(path: &Path, data: &Tensor, rows: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for r in 0..rows {
        line.clear();
        for (i, v) in data.row(r).iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `dir/manifest.jsonl` and `dir/features/<clip>.<modality>.csv`.
/// Returns the manifest path.
pub fn write_dataset(records: &[ClipRecord], dir: &Path) -> Result<PathBuf> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    records.par_iter().try_for_each(|r| {
        r.features.iter().try_for_each(|f| {
            let name = format!("{}.{}.csv", r.clip_id, f.modality);
            write_feature_csv(&feature_dir.join(name), &f.data, f.valid_length)
        })
    })?;

    let manifest = dir.join(MANIFEST_FILE);
    let mut out = String::new();
    for r in records {
        let rel = |m: Modality| {
            r.feature(m)
                .map(|_| format!("features/{}.{}.csv", r.clip_id, m))
        };
        let entry = ManifestEntry {
            clip_id: r.clip_id.clone(),
            speaker_id: r.speaker_id.clone(),
            label: r.label,
            visual: rel(Modality::Visual),
            audio: rel(Modality::Audio),
            text: rel(Modality::Text),
        };
        out.push_str(&serde_json::to_string(&entry).expect("manifest entries serialize"));
        out.push('\n');
    }
    fs::write(&manifest, out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
