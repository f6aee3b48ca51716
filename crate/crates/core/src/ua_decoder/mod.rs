//! Uncertainty-aware query decoder shared by the image-space and BEV
//! branches.
//!
//! Each layer runs self-attention over the queries, a sampling attention
//! whose per-sample weights are Gaussian (`α = μ + σ·ε`), a feed-forward
//! block and a head emitting points with Laplace scales and class scores.
//! Reference points follow the centroid of the previous layer's prediction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffArray, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_mlp, init_project, linear, mlp, project, set_mlp_out_bias, sinusoid_2d};
use crate::scenegen::{BevLayout, RANGE_X, RANGE_Y};

/// Clamp applied to attention-weight standard deviations.
pub const ATTN_SIGMA_CLAMP: [f64; 2] = [1e-4, 10.0];
/// Clamp applied to head scales, in output units.
pub const HEAD_SIGMA_CLAMP: [f64; 2] = [1e-3, 20.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Draw `α = μ + σ·ε`.
    Sample,
    /// Use `α = μ`.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub points: usize,
    pub samples: usize,
    /// Gaussian attention weights; deterministic `α = μ` otherwise.
    pub ua_attention: bool,
    /// Emit Laplace scales next to the points.
    pub ua_head: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            queries: 20,
            dim: 64,
            layers: 3,
            points: 20,
            samples: 4,
            ua_attention: true,
            ua_head: true,
        }
    }
}

/// Output coordinate space of a decoder and its feature grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Space {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub grid_h: usize,
    pub grid_w: usize,
    /// The first coordinate indexes grid rows (BEV) instead of columns
    /// (images).
    pub rows_from_first: bool,
    /// Size of one loss unit in output coordinates.
    pub unit: f64,
}

impl Space {
    pub fn bev(layout: BevLayout) -> Self {
        Self {
            lo: [RANGE_X[0], RANGE_Y[0]],
            hi: [RANGE_X[1], RANGE_Y[1]],
            grid_h: layout.h,
            grid_w: layout.w,
            rows_from_first: true,
            unit: 1.0,
        }
    }

    pub fn image(width: f64, height: f64, grid_h: usize, grid_w: usize, unit: f64) -> Self {
        Self {
            lo: [0.0, 0.0],
            hi: [width, height],
            grid_h,
            grid_w,
            rows_from_first: false,
            unit,
        }
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (p[i] - self.lo[i]) / (self.hi[i] - self.lo[i]))
    }

    pub fn denormalize(&self, n: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| self.lo[i] + n[i] * (self.hi[i] - self.lo[i]))
    }

    /// Normalized point → `(col, row)` grid coordinates.
    pub fn to_grid(&self, n: [f64; 2]) -> [f64; 2] {
        let (h, w) = (self.grid_h as f64, self.grid_w as f64);
        if self.rows_from_first {
            [n[1] * w - 0.5, n[0] * h - 0.5]
        } else {
            [n[0] * w - 0.5, n[1] * h - 0.5]
        }
    }

    /// Normalized coordinates of the center of grid cell `(r, c)`.
    pub fn cell_normalized(&self, r: usize, c: usize) -> [f64; 2] {
        let (h, w) = (self.grid_h as f64, self.grid_w as f64);
        let (u, v) = ((c as f64 + 0.5) / w, (r as f64 + 0.5) / h);
        if self.rows_from_first {
            [v, u]
        } else {
            [u, v]
        }
    }
}

/// One decoded element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementPrediction {
    pub query: usize,
    pub scores: [f64; 3],
    pub points: Vec<[f64; 2]>,
    pub sigmas: Option<Vec<[f64; 2]>>,
}

impl ElementPrediction {
    /// Index and value of the largest class score.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, self.scores[0]);
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }
}

/// Head outputs of one layer, still on the tape.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `[M, 2N]`, interleaved `x, y` per point in output coordinates.
    pub points: DiffArray<f64>,
    /// `[M, 2N]` scales, present with the uncertainty head.
    pub sigmas: Option<DiffArray<f64>>,
    /// `[M, 3]` sigmoid scores.
    pub scores: DiffArray<f64>,
    /// Normalized points, `[M, 2N]` values.
    pub normalized: Vec<f64>,
}

impl LayerOutput {
    pub fn predictions(&self) -> Vec<ElementPrediction> {
        let m = self.scores.shape()[0];
        let n2 = self.points.shape()[1];
        (0..m)
            .map(|i| {
                let row = self.points.row(i);
                let pairs = |r: &[f64]| (0..n2 / 2).map(|j| [r[2 * j], r[2 * j + 1]]).collect::<Vec<_>>();
                let s = self.scores.row(i);
                ElementPrediction {
                    query: i,
                    scores: [s[0], s[1], s[2]],
                    points: pairs(row),
                    sigmas: self.sigmas.as_ref().map(|sg| pairs(sg.row(i))),
                }
            })
            .collect()
    }

    /// Per-query centroid of the normalized points.
    pub fn centroids(&self) -> Vec<[f64; 2]> {
        let n2 = self.points.shape()[1];
        self.normalized
            .chunks(n2)
            .map(|r| {
                let n = (n2 / 2) as f64;
                let sx: f64 = r.iter().step_by(2).sum();
                let sy: f64 = r.iter().skip(1).step_by(2).sum();
                [sx / n, sy / n]
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-3, 1.0 - 1e-3);
    (p / (1.0 - p)).ln()
}

/// Gaussian-weighted sampling attention for a block of queries.
///
/// `query` and `pos` are `[M, D]`, `ref_grid` holds each query's reference
/// in grid coordinates and `grid` is `[H, W, D]`. Parameters live under
/// `key`: `mu_mlp`, `sigma_mlp`, `offset`, `value_proj`, `output_proj`.
/// With `stochastic` false the weights are `α = μ` in every mode.
#[allow(clippy::too_many_arguments)]
pub fn ua_attention(
    t: &mut Tape<f64>,
    p: &Bound<f64>,
    key: &str,
    query: &DiffArray<f64>,
    pos: &DiffArray<f64>,
    ref_grid: &[[f64; 2]],
    grid: &DiffArray<f64>,
    samples: usize,
    stochastic: bool,
    mode: AttentionMode,
    rng: &mut ChaCha8Rng,
) -> Result<DiffArray<f64>> {
    if !query.all_finite() {
        return Err(Error::NonFinite(format!("{key}: query")));
    }
    let m = query.shape()[0];
    let d = query.shape()[1];
    let k = samples;
    if ref_grid.len() != m {
        return Err(Error::ShapeMismatch {
            op: "ua_attention",
            lhs: vec![m],
            rhs: vec![ref_grid.len()],
        });
    }
    let qp = t.add(query, pos)?;
    let mu = mlp(t, p, &format!("{key}.mu_mlp"), &qp)?;
    let alpha = if stochastic && mode == AttentionMode::Sample {
        let raw = mlp(t, p, &format!("{key}.sigma_mlp"), &qp)?;
        let sigma = t.exp(&raw)?;
        let sigma = t.clamp(&sigma, ATTN_SIGMA_CLAMP[0], ATTN_SIGMA_CLAMP[1])?;
        let eps: Vec<f64> = (0..m * k).map(|_| rng.sample(StandardNormal)).collect();
        let eps = t.constant(&DiffArray::new(vec![m, k], eps)?);
        let noise = t.mul(&sigma, &eps)?;
        t.add(&mu, &noise)?
    } else {
        mu
    };
    let offsets = linear(t, p, &format!("{key}.offset"), &qp)?;
    let offsets = t.reshape(&offsets, &[m * k, 2])?;
    let base: Vec<f64> = ref_grid
        .iter()
        .flat_map(|r| std::iter::repeat_n([r[0], r[1]], k).flatten())
        .collect();
    let base = t.constant(&DiffArray::new(vec![m * k, 2], base)?);
    let coords = t.add(&base, &offsets)?;
    let sampled = t.grid_sample(grid, &coords)?;
    let values = linear(t, p, &format!("{key}.value_proj"), &sampled)?;
    let alpha = t.reshape(&alpha, &[m * k])?;
    let alpha = t.expand(&alpha, d)?;
    let weighted = t.mul(&alpha, &values)?;
    let weighted = t.reshape(&weighted, &[m, k, d])?;
    let agg = t.sum_axis(&weighted, 1)?;
    let out = linear(t, p, &format!("{key}.output_proj"), &agg)?;
    t.add(query, &out)
}

/// Head forward for `q: [M, D]` under `key` (`point_mlp`, `scale_mlp`,
/// `class`). `anchor` holds per-query logits added to every point before the
/// sigmoid; without it points are `sigmoid(point_mlp(q))`.
pub fn ua_head_forward(
    t: &mut Tape<f64>,
    p: &Bound<f64>,
    key: &str,
    q: &DiffArray<f64>,
    anchor: Option<&DiffArray<f64>>,
    space: &Space,
    n_points: usize,
    with_scales: bool,
) -> Result<LayerOutput> {
    let mut raw = mlp(t, p, &format!("{key}.point_mlp"), q)?;
    if let Some(a) = anchor {
        let mut tile = vec![0.0; 2 * 2 * n_points];
        for j in 0..n_points {
            tile[2 * j] = 1.0;
            tile[2 * n_points + 2 * j + 1] = 1.0;
        }
        let tile = t.constant(&DiffArray::new(vec![2, 2 * n_points], tile)?);
        let spread = t.matmul(a, &tile)?;
        raw = t.add(&raw, &spread)?;
    }
    let norm = t.sigmoid(&raw)?;
    let span: Vec<f64> = (0..2 * n_points).map(|j| space.hi[j % 2] - space.lo[j % 2]).collect();
    let lo: Vec<f64> = (0..2 * n_points).map(|j| space.lo[j % 2]).collect();
    let span = t.constant(&DiffArray::new(vec![2 * n_points], span)?);
    let lo = t.constant(&DiffArray::new(vec![2 * n_points], lo)?);
    let points = t.mul(&norm, &span)?;
    let points = t.add(&points, &lo)?;
    let sigmas = if with_scales {
        let s = mlp(t, p, &format!("{key}.scale_mlp"), q)?;
        let s = t.exp(&s)?;
        let s = t.clamp(&s, HEAD_SIGMA_CLAMP[0], HEAD_SIGMA_CLAMP[1])?;
        Some(t.scale(&s, space.unit)?)
    } else {
        None
    };
    let logits = linear(t, p, &format!("{key}.class"), q)?;
    let scores = t.sigmoid(&logits)?;
    Ok(LayerOutput {
        points,
        sigmas,
        scores,
        normalized: norm.to_vec(),
    })
}

/// Parameter layout and forward pass of one decoder stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDecoder {
    pub prefix: String,
    pub cfg: DecoderConfig,
}

impl MapDecoder {
    pub fn new(prefix: impl Into<String>, cfg: DecoderConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    pub fn key(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    /// Inserts freshly initialized parameters for a decoder reading
    /// `channels`-wide feature grids.
    pub fn init(&self, store: &mut ParamStore<f64>, channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &self.cfg;
        let (d, k, n) = (c.dim, c.samples, c.points);
        init_linear(store, &self.key("in_proj"), channels, d, 1.0, rng);
        store.init_normal(&self.key("query"), &[c.queries, d], 1.0, rng);
        let refs: Vec<f64> = (0..c.queries)
            .flat_map(|i| [logit(0.08 + 0.84 * halton(i + 1, 2)), logit(0.08 + 0.84 * halton(i + 1, 3))])
            .collect();
        store.insert(self.key("ref"), DiffArray::new(vec![c.queries, 2], refs)?);
        init_mlp(store, &self.key("qpos"), 2, d, d, 1.0, rng);
        let spread: Vec<f64> = (0..n)
            .flat_map(|j| [0.0, -1.5 + 3.0 * j as f64 / (n.max(2) - 1) as f64])
            .collect();
        let ring: Vec<f64> = (0..k)
            .flat_map(|j| {
                let a = std::f64::consts::TAU * j as f64 / k as f64;
                [1.5 * a.cos(), 1.5 * a.sin()]
            })
            .collect();
        for l in 0..c.layers {
            let lk = |s: &str| self.key(&format!("layer{l}.{s}"));
            for w in ["q", "k", "v"] {
                init_project(store, &lk(&format!("self.{w}")), d, d, 1.0, rng);
            }
            init_project(store, &lk("self.o"), d, d, 0.5, rng);
            init_mlp(store, &lk("attn.mu_mlp"), d, d, k, 0.1, rng);
            set_mlp_out_bias(store, &lk("attn.mu_mlp"), &vec![1.0 / k as f64; k])?;
            init_mlp(store, &lk("attn.sigma_mlp"), d, d, k, 0.1, rng);
            set_mlp_out_bias(store, &lk("attn.sigma_mlp"), &vec![0.1f64.ln(); k])?;
            init_linear(store, &lk("attn.offset"), d, 2 * k, 0.1, rng);
            store.set_values(&lk("attn.offset.b"), ring.clone())?;
            init_linear(store, &lk("attn.value_proj"), d, d, 1.0, rng);
            init_linear(store, &lk("attn.output_proj"), d, d, 0.5, rng);
            init_mlp(store, &lk("ffn"), d, 2 * d, d, 0.5, rng);
            init_mlp(store, &lk("head.point_mlp"), d, d, 2 * n, 0.1, rng);
            set_mlp_out_bias(store, &lk("head.point_mlp"), &spread)?;
            init_mlp(store, &lk("head.scale_mlp"), d, d, 2 * n, 0.1, rng);
            init_linear(store, &lk("head.class"), d, 3, 0.1, rng);
            store.set_values(&lk("head.class.b"), vec![-2.0; 3])?;
        }
        Ok(())
    }

    /// Projects a `[H·W, C]` feature array to `[H, W, D]` and adds the fixed
    /// positional encoding of each cell.
    pub fn encode_grid(&self, t: &mut Tape<f64>, p: &Bound<f64>, features: &DiffArray<f64>, space: &Space) -> Result<DiffArray<f64>> {
        let f = linear(t, p, &self.key("in_proj"), features)?;
        let f = t.add(&f, &self.grid_positions(space)?)?;
        Ok(f)
    }

    /// Positional encoding of every grid cell, `[H·W, D]`.
    pub fn grid_positions(&self, space: &Space) -> Result<DiffArray<f64>> {
        let cells: Vec<[f64; 2]> = (0..space.grid_h)
            .flat_map(|r| (0..space.grid_w).map(move |c| (r, c)))
            .map(|(r, c)| space.cell_normalized(r, c))
            .collect();
        DiffArray::new(vec![cells.len(), self.cfg.dim], sinusoid_2d(&cells, self.cfg.dim))
    }

    /// Learned initial queries and reference logits.
    pub fn initial_queries(&self, p: &Bound<f64>) -> Result<(DiffArray<f64>, DiffArray<f64>)> {
        Ok((p.get(&self.key("query"))?.clone(), p.get(&self.key("ref"))?.clone()))
    }

    /// Runs every layer; `grid` is `[H, W, D]` in `space`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape<f64>,
        p: &Bound<f64>,
        queries: &DiffArray<f64>,
        ref_logits: &DiffArray<f64>,
        grid: &DiffArray<f64>,
        space: &Space,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LayerOutput>> {
        let c = &self.cfg;
        let m = queries.shape()[0];
        let scale = 1.0 / (c.dim as f64).sqrt();
        let mut q = queries.clone();
        let mut outputs = Vec::with_capacity(c.layers);
        let mut refs: Vec<[f64; 2]> = ref_logits
            .values()
            .chunks(2)
            .map(|r| [sigmoid(r[0]), sigmoid(r[1])])
            .collect();
        for l in 0..c.layers {
            let lk = |s: &str| self.key(&format!("layer{l}.{s}"));
            let (ref_arr, anchor) = if l == 0 {
                (t.sigmoid(ref_logits)?, ref_logits.clone())
            } else {
                let r: Vec<f64> = refs.iter().flatten().copied().collect();
                let a: Vec<f64> = r.iter().map(|&v| logit(v)).collect();
                (
                    t.constant(&DiffArray::new(vec![m, 2], r)?),
                    t.constant(&DiffArray::new(vec![m, 2], a)?),
                )
            };
            let pos = mlp(t, p, &self.key("qpos"), &ref_arr)?;

            let qp = t.add(&q, &pos)?;
            let qq = project(t, p, &lk("self.q"), &qp)?;
            let kk = project(t, p, &lk("self.k"), &qp)?;
            let vv = project(t, p, &lk("self.v"), &q)?;
            let kt = t.transpose(&kk)?;
            let logits = t.matmul(&qq, &kt)?;
            let logits = t.scale(&logits, scale)?;
            let att = t.softmax(&logits, 1)?;
            let mixed = t.matmul(&att, &vv)?;
            let mixed = project(t, p, &lk("self.o"), &mixed)?;
            q = t.add(&q, &mixed)?;

            let ref_grid: Vec<[f64; 2]> = refs.iter().map(|&r| space.to_grid(r)).collect();
            q = ua_attention(t, p, &lk("attn"), &q, &pos, &ref_grid, grid, c.samples, c.ua_attention, mode, rng)?;

            let ff = mlp(t, p, &lk("ffn"), &q)?;
            q = t.add(&q, &ff)?;

            let out = ua_head_forward(t, p, &lk("head"), &q, Some(&anchor), space, c.points, c.ua_head)?;
            refs = out.centroids();
            outputs.push(out);
        }
        Ok(outputs)
    }
}

/// Runs a decoder from its learned initial queries.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    t: &mut Tape<f64>,
    p: &Bound<f64>,
    decoder: &MapDecoder,
    queries: &DiffArray<f64>,
    ref_logits: &DiffArray<f64>,
    grid: &DiffArray<f64>,
    space: &Space,
    mode: AttentionMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LayerOutput>> {
    decoder.forward(t, p, queries, ref_logits, grid, space, mode, rng)
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}
