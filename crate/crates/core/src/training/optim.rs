use indexmap::IndexMap;

use crate::error::{shape_err, Result};
use crate::numeric::{GradientMap, ParameterStore};

/// Per-epoch decay factor applied from epoch `N` on.
pub const LR_DECAY: f64 = -0.1;

/// `lr_old` while `n < N`, afterwards `lr_old * e^-0.1`.
pub fn lr_schedule(lr_old: f64, n: usize, hold_epoch: usize) -> f64 {
    if n < hold_epoch {
        lr_old
    } else {
        lr_old * LR_DECAY.exp()
    }
}

/// Learning rates used for epochs `0..epochs`, each derived from the
/// previous one through [`lr_schedule`].
pub fn lr_trajectory(base_lr: f64, epochs: usize, hold_epoch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(epochs);
    let mut lr = base_lr;
    for n in 0..epochs {
        out.push(lr);
        lr = lr_schedule(lr, n + 1, hold_epoch);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam step. Gradients for frozen parameters are
/// ignored, so frozen tensors are never written.
pub fn adam_update(
    params: &mut ParameterStore,
    grads: &GradientMap,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| shape_err!("gradient for unknown parameter `{name}`"))?;
        if p.tensor.shape() != g.shape() {
            return Err(shape_err!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.tensor.shape()
            ));
        }
        if let Some(m) = state.m.get(name) {
            if m.len() != g.len() {
                return Err(shape_err!(
                    "optimizer state for `{name}` has {} entries, gradient {}",
                    m.len(),
                    g.len()
                ));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads.iter() {
        if params.get(name).is_some_and(|p| p.frozen) {
            continue;
        }
        let m = state
            .m
            .entry(name.to_owned())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.to_owned())
            .or_insert_with(|| vec![0.0; g.len()]);
        let theta = params.data_mut(name).expect("checked above");
        for i in 0..g.len() {
            let gi = g.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0.001, 5, 10), 0.001);
        assert!((lr_schedule(0.001, 10, 10) - 9.04837e-4).abs() < 1e-9);
        let three = lr_schedule(lr_schedule(lr_schedule(1.0, 10, 10), 11, 10), 12, 10);
        assert!((three - 0.740818).abs() < 1e-6);
    }

    #[test]
    fn trajectory_holds_then_decays() {
        let lrs = lr_trajectory(1e-3, 20, 10);
        assert!(lrs[..10].iter().all(|&lr| lr == 1e-3));
        for n in 10..20 {
            let expected = 1e-3 * (LR_DECAY * (n - 9) as f64).exp();
            assert!(((lrs[n] - expected) / expected).abs() < 1e-12);
        }
    }

    fn single(value: f64, frozen: bool) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert_param("w", Tensor::scalar(value), frozen).unwrap();
        s
    }

    fn grad(value: f64) -> GradientMap {
        let mut g = GradientMap::new();
        g.insert("w", Tensor::scalar(value));
        g
    }

    #[test]
    fn first_step_example() {
        let mut p = single(0.0, false);
        let mut state = AdamState::default();
        adam_update(&mut p, &grad(1.0), &mut state, 0.1).unwrap();
        let delta = p.tensor("w").unwrap().data()[0];
        assert!((delta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta + 0.0999999).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = single(0.25, true);
        let mut state = AdamState::default();
        adam_update(&mut p, &grad(3.0), &mut state, 0.1).unwrap();
        assert_eq!(
            p.tensor("w").unwrap().data()[0].to_bits(),
            0.25f64.to_bits()
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single(0.0, false);
        let mut g = GradientMap::new();
        g.insert("w", Tensor::zeros(&[2, 1]));
        assert!(adam_update(&mut p, &g, &mut AdamState::default(), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..8), steps in 1usize..5) {
            let mut p = ParameterStore::new();
            p.insert("w", Tensor::row_vector(values.clone()).unwrap()).unwrap();
            let mut g = GradientMap::new();
            g.insert("w", Tensor::zeros(&[1, values.len()]));
            let mut state = AdamState::default();
            for _ in 0..steps {
                adam_update(&mut p, &g, &mut state, 0.01).unwrap();
            }
            prop_assert_eq!(p.tensor("w").unwrap().data(), values.as_slice());
            prop_assert_eq!(state.step, steps as u64);
        }

        #[test]
        fn schedule_ratio_law(base in 1e-6f64..1.0, hold in 0usize..30, epochs in 1usize..60) {
            let lrs = lr_trajectory(base, epochs, hold);
            for n in 1..epochs {
                let ratio = lrs[n] / lrs[n - 1];
                let expected = if n < hold { 1.0 } else { LR_DECAY.exp() };
                prop_assert!(((ratio - expected) / expected).abs() <= 1e-12);
            }
        }
    }
}
