use indexmap::IndexMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::models::Architecture;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named model parameters in insertion order, each with a frozen flag, plus
/// the architecture they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
    pub architecture: Option<Architecture>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_param(name, tensor, false)
    }

    pub fn insert_param(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        frozen: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Replaces a tensor's values, keeping its shape and frozen flag.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(shape_err!(
                "`{name}` has shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(|p| p.tensor.data_mut())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }
}

/// Gradients keyed by parameter name. Only non-frozen parameters appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: IndexMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero gradients for every trainable parameter of `store`.
    pub fn zeros_like(store: &ParameterStore) -> Self {
        let mut map = Self::new();
        for (name, p) in store.iter().filter(|(_, p)| !p.frozen) {
            map.insert(name, Tensor::zeros(p.tensor.shape()));
        }
        map
    }

    /// `self += scale * other` for matching keys.
    pub fn accumulate(&mut self, other: &GradientMap, scale: f64) -> Result<()> {
        for (name, g) in other.iter() {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown `{name}`")))?;
            if dst.shape() != g.shape() {
                return Err(shape_err!("gradient shape mismatch for `{name}`"));
            }
            for (a, b) in dst.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Exact reverse-mode gradients of the scalar `loss` with respect to every
/// non-frozen parameter of `params`. Parameters the loss does not depend on
/// get zero gradients.
pub fn compute_gradients(graph: &Graph, loss: Var, params: &ParameterStore) -> Result<GradientMap> {
    let grads = graph.backward(loss)?;
    let bound: IndexMap<&str, Var> = graph.bound_params().collect();
    let mut map = GradientMap::new();
    for (name, p) in params.iter().filter(|(_, p)| !p.frozen) {
        let grad = bound
            .get(name)
            .and_then(|v| grads[v.index()].clone())
            .map(|data| Tensor::from_parts(p.tensor.shape().to_vec(), data))
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
        map.insert(name, grad);
    }
    Ok(map)
}

/// Central-difference estimate `(f(theta + eps) - f(theta - eps)) / 2 eps`
/// for every coordinate of every non-frozen parameter.
pub fn finite_diff_gradient<F>(f: F, params: &ParameterStore, eps: f64) -> Result<GradientMap>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut map = GradientMap::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_owned())
        .collect();
    for name in names {
        let shape = params.tensor(&name)?.shape().to_vec();
        let n = params.tensor(&name)?.len();
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = work.tensor(&name)?.data()[i];
            work.data_mut(&name).expect("present")[i] = orig + eps;
            let plus = f(&work)?;
            work.data_mut(&name).expect("present")[i] = orig - eps;
            let minus = f(&work)?;
            work.data_mut(&name).expect("present")[i] = orig;
            *g = (plus - minus) / (2.0 * eps);
        }
        map.insert(name, Tensor::from_parts(shape, grad));
    }
    Ok(map)
}

/// Largest relative discrepancy between two gradient maps, using
/// `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &GradientMap, b: &GradientMap, floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "gradient maps have {} and {} entries",
            a.len(),
            b.len()
        ));
    }
    let mut worst: f64 = 0.0;
    for (name, ga) in a.iter() {
        let gb = b
            .get(name)
            .ok_or_else(|| shape_err!("`{name}` missing from second gradient map"))?;
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
