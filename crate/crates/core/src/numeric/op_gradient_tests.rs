//! Every graph primitive checked against central finite differences.

use super::*;
use crate::error::Result;
use crate::rng::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Random weighted sum of every entry, so the loss depends on all outputs.
fn reduce(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(v).rows(), g.value(v).cols());
    let mut rng = Rng::new(seed ^ 0xABCD);
    let weights = g.constant(random(&mut rng, r, c))?;
    let weighted = g.mul(v, weights)?;
    let ones_c = g.constant(Tensor::filled(&[c, 1], 1.0))?;
    let col = g.matmul(weighted, ones_c)?;
    let row = g.transpose(col)?;
    let ones_r = g.constant(Tensor::filled(&[r, 1], 1.0))?;
    g.matmul(row, ones_r)
}

fn check<F>(store: &ParameterStore, build: F)
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store).unwrap();
    let exact = compute_gradients(&g, loss, store).unwrap();
    let numeric = finite_diff_gradient(
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s)?;
            Ok(g.value(l).data()[0])
        },
        store,
        EPS,
    )
    .unwrap();
    let err = max_relative_error(&exact, &numeric, FLOOR).unwrap();
    assert!(err <= TOL, "relative error {err}");
}

fn store(seed: u64, shapes: &[(&str, usize, usize)]) -> ParameterStore {
    let mut rng = Rng::new(seed);
    let mut s = ParameterStore::new();
    for &(name, r, c) in shapes {
        s.insert(name, random(&mut rng, r, c)).unwrap();
    }
    s
}

#[test]
fn matmul_add_mul() {
    for seed in 0..5 {
        let s = store(seed, &[("a", 3, 4), ("b", 4, 2), ("c", 3, 2)]);
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.param(s, "c")?;
            let ab = g.matmul(a, b)?;
            let sum = g.add(ab, c)?;
            let prod = g.mul(sum, c)?;
            reduce(g, prod, seed)
        });
    }
}

#[test]
fn row_broadcasts() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 4, 3), ("r", 1, 3), ("q", 1, 3)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let r = g.param(s, "r")?;
            let q = g.param(s, "q")?;
            let y = g.add_row(x, r)?;
            let z = g.mul_row(y, q)?;
            let z = g.scale(z, 0.7);
            reduce(g, z, seed)
        });
    }
}

#[test]
fn activations() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 3, 5)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let c = g.relu(x);
            let ab = g.mul(a, b)?;
            let abc = g.add(ab, c)?;
            reduce(g, abc, seed)
        });
    }
}

#[test]
fn softmax_plain_and_masked() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 3, 5)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.softmax(x, None)?;
            reduce(g, y, seed)
        });
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.softmax(x, Some(&[true, true, false, true, false]))?;
            reduce(g, y, seed)
        });
    }
}

#[test]
fn structural_ops() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 4, 6), ("y", 4, 2)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.param(s, "y")?;
            let t = g.transpose(x)?;
            let tt = g.transpose(t)?;
            let sl = g.slice_cols(tt, 1, 3)?;
            let cat = g.concat_cols(&[sl, y, sl])?;
            let r0 = g.row(cat, 2)?;
            let r1 = g.row(cat, 0)?;
            let st = g.stack_rows(&[r0, r1, r0])?;
            reduce(g, st, seed)
        });
    }
}

#[test]
fn max_pool_and_layer_norm() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 5, 4)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let ln = g.layer_norm(x, 1e-5);
            let mx = g.max_rows(ln, None)?;
            let partial = g.max_rows(x, Some(3))?;
            let both = g.concat_cols(&[mx, partial])?;
            reduce(g, both, seed)
        });
    }
}

#[test]
fn nll_and_mean() {
    for seed in 0..5 {
        let s = store(seed, &[("x", 1, 2), ("y", 1, 2)]);
        check(&s, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.param(s, "y")?;
            let px = g.softmax(x, None)?;
            let py = g.softmax(y, None)?;
            let lx = g.nll(px, 0)?;
            let ly = g.nll(py, 1)?;
            g.mean(&[lx, ly])
        });
    }
}

#[test]
fn shared_parameter_accumulates() {
    let s = store(9, &[("w", 3, 3)]);
    check(&s, |g, s| {
        let w = g.param(s, "w")?;
        let w2 = g.param(s, "w")?;
        let p = g.matmul(w, w2)?;
        reduce(g, p, 9)
    });
}
