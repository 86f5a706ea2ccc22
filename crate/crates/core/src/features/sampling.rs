use log::warn;

use crate::error::{shape_err, Error, Result};
use crate::numeric::Tensor;

/// Target visual sampling rate in frames per second.
pub const TARGET_FPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSampling {
    pub indices: Vec<usize>,
    /// Frame interval `k`.
    pub interval: usize,
    pub warning: Option<String>,
}

/// Indices `0, k, 2k, ...` below `frame_count` with `k = fps / 5`. Frame
/// rates that are not a multiple of 5 use `k = round(fps / 5)` and carry a
/// warning.
pub fn sample_visual_frames(frame_count: usize, fps: usize) -> Result<FrameSampling> {
    if fps == 0 {
        return Err(Error::Data("frame rate must be positive".into()));
    }
    let mut warning = None;
    let interval = if fps.is_multiple_of(TARGET_FPS) {
        fps / TARGET_FPS
    } else {
        let k = ((fps as f64 / TARGET_FPS as f64).round() as usize).max(1);
        let msg = format!("{fps} fps is not a multiple of {TARGET_FPS}; sampling every {k} frames");
        warn!("{msg}");
        warning = Some(msg);
        k
    };
    Ok(FrameSampling {
        indices: (0..frame_count).step_by(interval).collect(),
        interval,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledFrames {
    pub data: Tensor,
    pub warning: Option<String>,
}

/// Replaces missing rows (undetected faces) with the most recent present
/// row. Rows missing before the first detection become zero vectors.
pub fn carry_forward_fill(rows: &[Option<Vec<f64>>], dim: usize) -> Result<FilledFrames> {
    if rows.is_empty() {
        return Err(shape_err!("no frames to fill"));
    }
    if dim == 0 {
        return Err(shape_err!("feature dimension must be positive"));
    }
    let mut out = Vec::with_capacity(rows.len() * dim);
    let mut last: Option<&Vec<f64>> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(r) = row {
            if r.len() != dim {
                return Err(shape_err!(
                    "frame {i} has {} values, expected {dim}",
                    r.len()
                ));
            }
            last = Some(r);
        }
        match last {
            Some(r) => out.extend_from_slice(r),
            None => out.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    let warning = if rows.iter().all(Option::is_none) {
        let msg = format!("all {} frames are missing; filled with zeros", rows.len());
        warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(FilledFrames {
        data: Tensor::new(vec![rows.len(), dim], out)?,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampling_examples() {
        assert_eq!(
            sample_visual_frames(30, 30).unwrap().indices,
            vec![0, 6, 12, 18, 24]
        );
        assert_eq!(
            sample_visual_frames(10, 10).unwrap().indices,
            vec![0, 2, 4, 6, 8]
        );
        assert_eq!(sample_visual_frames(4, 30).unwrap().indices, vec![0]);
    }

    #[test]
    fn odd_frame_rate_rounds_and_warns() {
        let s = sample_visual_frames(20, 24).unwrap();
        assert_eq!(s.interval, 5);
        assert!(s.warning.is_some());
        assert!(sample_visual_frames(20, 25).unwrap().warning.is_none());
        assert!(sample_visual_frames(20, 0).is_err());
    }

    #[test]
    fn fill_examples() {
        let f1 = vec![1.0, 2.0];
        let f4 = vec![4.0, 5.0];
        let filled =
            carry_forward_fill(&[Some(f1.clone()), None, None, Some(f4.clone())], 2).unwrap();
        assert_eq!(
            filled.data.to_rows(),
            vec![f1.clone(), f1.clone(), f1.clone(), f4]
        );

        let filled = carry_forward_fill(&[None, Some(f1.clone())], 2).unwrap();
        assert_eq!(filled.data.to_rows(), vec![vec![0.0, 0.0], f1.clone()]);

        let filled = carry_forward_fill(&[Some(f1.clone())], 2).unwrap();
        assert_eq!(filled.data.to_rows(), vec![f1]);
    }

    #[test]
    fn all_missing_is_zero_with_warning() {
        let filled = carry_forward_fill(&[None, None], 3).unwrap();
        assert!(filled.data.data().iter().all(|&v| v == 0.0));
        assert!(filled.warning.is_some());
    }

    #[test]
    fn fill_rejects_wrong_width() {
        assert!(carry_forward_fill(&[Some(vec![1.0])], 2).is_err());
        assert!(carry_forward_fill(&[], 2).is_err());
    }

    proptest! {
        #[test]
        fn sampling_count_and_order(frames in 0usize..500, fps in 5usize..121) {
            let s = sample_visual_frames(frames, fps).unwrap();
            prop_assert_eq!(s.indices.len(), frames.div_ceil(s.interval));
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.indices.iter().all(|&i| i < frames));
        }

        #[test]
        fn fill_is_identity_on_complete_input(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20)) {
            let present: Vec<Option<Vec<f64>>> = rows.iter().cloned().map(Some).collect();
            let once = carry_forward_fill(&present, 3).unwrap();
            prop_assert_eq!(once.data.to_rows(), rows);
            let again: Vec<Option<Vec<f64>>> = once.data.to_rows().into_iter().map(Some).collect();
            prop_assert_eq!(carry_forward_fill(&again, 3).unwrap().data, once.data);
        }
    }
}
