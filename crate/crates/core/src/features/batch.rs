use super::{ClipRecord, FeatureSequence, Modality};
use crate::error::{shape_err, Result};
use crate::numeric::Tensor;

/// Zero-padded `B x T x D` block with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub data: Tensor,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<String>,
    pub step_seconds: f64,
}

/// Pads every sequence with zero rows to `pad_to` steps, or to the longest
/// sequence when `pad_to` is `None`.
pub fn pad_and_mask(seqs: &[FeatureSequence], pad_to: Option<usize>) -> Result<PaddedBatch> {
    let first = seqs
        .first()
        .ok_or_else(|| shape_err!("cannot pad an empty list"))?;
    let dim = first.dim();
    if let Some(bad) = seqs.iter().find(|s| s.dim() != dim) {
        return Err(shape_err!(
            "mixed feature widths {dim} and {} in one batch",
            bad.dim()
        ));
    }
    let longest = seqs.iter().map(|s| s.valid_length).max().unwrap_or(0);
    let t_max = pad_to.unwrap_or(longest);
    if longest > t_max {
        return Err(shape_err!(
            "sequence of {longest} steps exceeds padding length {t_max}"
        ));
    }
    if t_max == 0 {
        return Err(shape_err!("all sequences are empty"));
    }
    let mut data = vec![0.0; seqs.len() * t_max * dim];
    let mut mask = Vec::with_capacity(seqs.len());
    for (b, s) in seqs.iter().enumerate() {
        let n = s.valid_length * dim;
        let offset = b * t_max * dim;
        data[offset..offset + n].copy_from_slice(&s.data.data()[..n]);
        mask.push((0..t_max).map(|t| t < s.valid_length).collect());
    }
    Ok(PaddedBatch {
        data: Tensor::new(vec![seqs.len(), t_max, dim], data)?,
        mask,
        labels: Vec::new(),
        clip_ids: Vec::new(),
        step_seconds: first.step_seconds,
    })
}

impl PaddedBatch {
    /// Batch of one modality across `clips`, carrying ids and labels.
    pub fn from_clips(
        clips: &[ClipRecord],
        modality: Modality,
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let seqs = clips
            .iter()
            .map(|c| c.require(modality).cloned())
            .collect::<Result<Vec<_>>>()?;
        let mut batch = pad_and_mask(&seqs, pad_to)?;
        batch.labels = clips.iter().map(|c| c.label.index()).collect();
        batch.clip_ids = clips.iter().map(|c| c.clip_id.clone()).collect();
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn valid_length(&self, b: usize) -> usize {
        self.mask[b].iter().filter(|&&m| m).count()
    }

    /// `T x D` matrix for clip `b`, padding included.
    pub fn clip(&self, b: usize) -> Tensor {
        let block = self.max_len() * self.dim();
        Tensor::from_parts(
            vec![self.max_len(), self.dim()],
            self.data.data()[b * block..(b + 1) * block].to_vec(),
        )
    }

    pub fn clip_id(&self, b: usize) -> &str {
        self.clip_ids.get(b).map(String::as_str).unwrap_or("")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let block = self.max_len() * self.dim();
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * block..(i + 1) * block]);
        }
        Self {
            data: Tensor::from_parts(vec![indices.len(), self.max_len(), self.dim()], data),
            mask: indices.iter().map(|&i| self.mask[i].clone()).collect(),
            labels: indices
                .iter()
                .filter_map(|&i| self.labels.get(i).copied())
                .collect(),
            clip_ids: indices
                .iter()
                .filter_map(|&i| self.clip_ids.get(i).cloned())
                .collect(),
            step_seconds: self.step_seconds,
        }
    }
}
