//! Small building blocks shared by the learned modules: affine layers and
//! two-layer perceptrons recorded on a tape, plus their initializers.

use rand::Rng;

use crate::diffcore::{Bound, DiffArray, ParamStore, Tape};
use crate::error::Result;
use crate::Scalar;

/// `x · W + b` for `x: [R, in]`, parameters `{key}.w: [in, out]` and
/// `{key}.b: [out]`.
pub fn linear<S: Scalar>(t: &mut Tape<S>, p: &Bound<S>, key: &str, x: &DiffArray<S>) -> Result<DiffArray<S>> {
    let y = t.matmul(x, p.get(&format!("{key}.w"))?)?;
    t.add(&y, p.get(&format!("{key}.b"))?)
}

/// Bias-free projection `x · W` with parameter `{key}.w`.
pub fn project<S: Scalar>(t: &mut Tape<S>, p: &Bound<S>, key: &str, x: &DiffArray<S>) -> Result<DiffArray<S>> {
    t.matmul(x, p.get(&format!("{key}.w"))?)
}

/// `linear(relu(linear(x)))` with layers `{key}.l1` and `{key}.l2`.
pub fn mlp<S: Scalar>(t: &mut Tape<S>, p: &Bound<S>, key: &str, x: &DiffArray<S>) -> Result<DiffArray<S>> {
    let h = linear(t, p, &format!("{key}.l1"), x)?;
    let h = t.relu(&h)?;
    linear(t, p, &format!("{key}.l2"), &h)
}

pub fn init_linear<S: Scalar>(store: &mut ParamStore<S>, key: &str, fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) {
    store.init_weight(&format!("{key}.w"), fan_in, fan_out, scale, rng);
    store.init_const(&format!("{key}.b"), &[fan_out], 0.0);
}

pub fn init_project<S: Scalar>(store: &mut ParamStore<S>, key: &str, fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) {
    store.init_weight(&format!("{key}.w"), fan_in, fan_out, scale, rng);
}

/// Hidden layer uses He-style scale; the output layer uses `out_scale`.
pub fn init_mlp<S: Scalar>(
    store: &mut ParamStore<S>,
    key: &str,
    fan_in: usize,
    hidden: usize,
    fan_out: usize,
    out_scale: f64,
    rng: &mut impl Rng,
) {
    init_linear(store, &format!("{key}.l1"), fan_in, hidden, std::f64::consts::SQRT_2, rng);
    init_linear(store, &format!("{key}.l2"), hidden, fan_out, out_scale, rng);
}

/// Sets the output bias of an MLP initialized with [`init_mlp`].
pub fn set_mlp_out_bias<S: Scalar>(store: &mut ParamStore<S>, key: &str, bias: &[f64]) -> Result<()> {
    store.set_values(&format!("{key}.l2.b"), bias.iter().map(|&b| S::lit(b)).collect())
}

/// Fixed sinusoidal encoding of normalized 2-D positions into `dim`
/// channels (`dim / 2` per axis), frequencies spaced geometrically from π
/// to 32π.
pub fn sinusoid_2d(points: &[[f64; 2]], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; points.len() * dim];
    for (i, p) in points.iter().enumerate() {
        for (axis, &v) in p.iter().enumerate() {
            for k in 0..pairs {
                let freq = std::f64::consts::PI * 32f64.powf(k as f64 / pairs.max(1) as f64);
                let base = i * dim + axis * half + 2 * k;
                out[base] = (freq * v).sin();
                out[base + 1] = (freq * v).cos();
            }
        }
    }
    out
}
