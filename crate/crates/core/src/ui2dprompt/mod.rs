//! Image-space detections turned into uncertainty-weighted prompts and
//! injected into BEV features and map queries.
//!
//! Each selected instance is lifted to the ground by IPM. Every surviving
//! point gets an embedding of its ground position and pixel scale, scaled by
//! `ω = exp(share)` where `share` is the point's normalized inverse scale
//! norm. Point prompts feed the BEV cross-attention; per-instance pooled
//! prompts feed the query cross-attention.

use log::debug;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffArray, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::mq_distill::MimicPool;
use crate::nn::{init_mlp, init_project, mlp, project};
use crate::scenegen::{normalize_ego, RANGE_X, RANGE_Y};
use crate::ua_decoder::ElementPrediction;


/// IPM points farther than this multiple of the perception range are
/// dropped along with horizon failures.
pub const PROMPT_RANGE_FACTOR: f64 = 2.0;

/// Default selection threshold on the best class score.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.4;

/// One image-space detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvInstance {
    pub camera: String,
    pub scores: [f64; 3],
    /// Pixels.
    pub points: Vec<[f64; 2]>,
    /// Pixel scales.
    pub sigmas: Vec<[f64; 2]>,
}

impl PvInstance {
    pub fn from_prediction(camera: &str, pred: &ElementPrediction) -> Result<Self> {
        let sigmas = pred
            .sigmas
            .clone()
            .ok_or_else(|| Error::Invalid("image-space prediction without scales".into()))?;
        Ok(Self {
            camera: camera.to_string(),
            scores: pred.scores,
            points: pred.points.clone(),
            sigmas,
        })
    }

    pub fn score(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Instances whose best class score exceeds `c_thr`, in input order.
pub fn select_candidates(instances: &[PvInstance], c_thr: f64) -> Vec<PvInstance> {
    instances.iter().filter(|i| i.score() > c_thr).cloned().collect()
}

/// Which points share the normalizing sum of the inverse scale norms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaScope {
    #[default]
    Instance,
    Global,
}

/// `(share, ω)` per point from the scale norms `‖σ‖₂`.
pub fn omega_weights(norms: &[f64]) -> Vec<(f64, f64)> {
    let inv: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
    let total: f64 = inv.iter().sum();
    inv.iter()
        .map(|v| {
            let share = v / total;
            (share, share.exp())
        })
        .collect()
}

/// Provenance and constant inputs of one prompt row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    /// Index into the selected instances.
    pub instance: usize,
    /// Index within the instance's points.
    pub point: usize,
    pub p_trans: [f64; 2],
    pub sigma: [f64; 2],
    pub share: f64,
    pub omega: f64,
    /// Diagonal of the source image, pixels.
    pub diagonal: f64,
}

/// Debug dump row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDumpRow {
    pub scene: String,
    pub instance: usize,
    pub point: usize,
    pub p_trans: [f64; 2],
    pub sigma: [f64; 2],
    pub omega: f64,
}

/// Lifted, weighted points of the selected instances, before any learned
/// embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptLayout {
    pub rows: Vec<PromptPoint>,
    /// Instances with at least one surviving point, in order.
    pub instances: Vec<usize>,
    pub dropped_instances: usize,
    pub dropped_points: usize,
}

impl PromptLayout {
    pub fn dump(&self, scene: &str) -> Vec<PromptDumpRow> {
        self.rows
            .iter()
            .map(|r| PromptDumpRow {
                scene: scene.to_string(),
                instance: r.instance,
                point: r.point,
                p_trans: r.p_trans,
                sigma: r.sigma,
                omega: r.omega,
            })
            .collect()
    }
}

fn usable(p: [f64; 2]) -> bool {
    let (hx, hy) = (PROMPT_RANGE_FACTOR * RANGE_X[1], PROMPT_RANGE_FACTOR * RANGE_Y[1]);
    p[0].abs() <= hx && p[1].abs() <= hy
}

/// IPM of every point, dropping horizon failures and far-away points, then
/// ω over the survivors.
pub fn prepare_prompts(selected: &[PvInstance], rig: &[CameraModel<f64>], scope: OmegaScope) -> Result<PromptLayout> {
    let mut out = PromptLayout::default();
    for (i, inst) in selected.iter().enumerate() {
        let cam = rig
            .iter()
            .find(|c| c.name == inst.camera)
            .ok_or_else(|| Error::Invalid(format!("camera {} not in rig", inst.camera)))?;
        if inst.points.len() != inst.sigmas.len() {
            return Err(Error::Invalid(format!("instance {i}: {} points but {} scales", inst.points.len(), inst.sigmas.len())));
        }
        let before = out.rows.len();
        for (j, (&px, &s)) in inst.points.iter().zip(&inst.sigmas).enumerate() {
            match cam.ipm_point(px) {
                Ok(g) if usable(g) => out.rows.push(PromptPoint {
                    instance: i,
                    point: j,
                    p_trans: g,
                    sigma: s,
                    share: 0.0,
                    omega: 0.0,
                    diagonal: cam.diagonal(),
                }),
                _ => out.dropped_points += 1,
            }
        }
        if out.rows.len() == before {
            out.dropped_instances += 1;
        } else {
            out.instances.push(i);
        }
    }
    if out.dropped_instances > 0 {
        debug!("{} instances lost every point to IPM", out.dropped_instances);
    }
    let norm = |r: &PromptPoint| r.sigma[0].hypot(r.sigma[1]);
    match scope {
        OmegaScope::Instance => {
            let mut start = 0;
            while start < out.rows.len() {
                let inst = out.rows[start].instance;
                let end = start + out.rows[start..].iter().take_while(|r| r.instance == inst).count();
                let norms: Vec<f64> = out.rows[start..end].iter().map(norm).collect();
                for (r, (s, w)) in out.rows[start..end].iter_mut().zip(omega_weights(&norms)) {
                    r.share = s;
                    r.omega = w;
                }
                start = end;
            }
        }
        OmegaScope::Global => {
            let norms: Vec<f64> = out.rows.iter().map(norm).collect();
            for (r, (s, w)) in out.rows.iter_mut().zip(omega_weights(&norms)) {
                r.share = s;
                r.omega = w;
            }
        }
    }
    Ok(out)
}

/// Where a prompt set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Empty,
    Detections,
    Mimic,
}

/// Point prompts `[P, D]` and instance prompts `[S, D]`.
#[derive(Clone, Debug)]
pub struct PvPromptSet {
    pub points: DiffArray<f64>,
    pub instances: DiffArray<f64>,
    pub rows: Vec<PromptPoint>,
    pub source: PromptSource,
}

impl PvPromptSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            points: DiffArray::zeros(&[0, dim]),
            instances: DiffArray::zeros(&[0, dim]),
            rows: Vec::new(),
            source: PromptSource::Empty,
        }
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter layout of the prompt embeddings and both cross-attentions.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionBlock {
    pub prefix: String,
    pub dim: usize,
}

impl InjectionBlock {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim }
    }

    pub fn key(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.dim;
        if d % 2 != 0 {
            return Err(Error::Config(format!("prompt dim {d} must be even")));
        }
        init_mlp(store, &self.key("phi_p"), 2, d, d / 2, 1.0, rng);
        init_mlp(store, &self.key("phi_sigma"), 2, d, d / 2, 1.0, rng);
        init_mlp(store, &self.key("phi_e"), d, d, d, 1.0, rng);
        for site in ["p2bev", "p2q"] {
            init_project(store, &self.key(&format!("{site}.q")), d, d, 1.0, rng);
            init_project(store, &self.key(&format!("{site}.k")), d, d, 1.0, rng);
            init_project(store, &self.key(&format!("{site}.v")), d, d, 0.1, rng);
        }
        Ok(())
    }

    /// Point embeddings `[P, D]`, ω-scaled, plus the aligned mimic queries
    /// when a pool is given.
    pub fn build_prompts(&self, t: &mut Tape<f64>, p: &Bound<f64>, layout: &PromptLayout, pool: Option<&MimicPool>) -> Result<PvPromptSet> {
        if layout.rows.is_empty() {
            return Ok(PvPromptSet::empty(self.dim));
        }
        let n = layout.rows.len();
        let pos: Vec<f64> = layout.rows.iter().flat_map(|r| normalize_ego(r.p_trans)).collect();
        let sig: Vec<f64> = layout
            .rows
            .iter()
            .flat_map(|r| [r.sigma[0] / r.diagonal, r.sigma[1] / r.diagonal])
            .collect();
        let pos = t.constant(&DiffArray::new(vec![n, 2], pos)?);
        let sig = t.constant(&DiffArray::new(vec![n, 2], sig)?);
        let ep = mlp(t, p, &self.key("phi_p"), &pos)?;
        let es = mlp(t, p, &self.key("phi_sigma"), &sig)?;
        let e = t.concat(&[&ep, &es], 1)?;
        let omega: Vec<f64> = layout
            .rows
            .iter()
            .flat_map(|r| std::iter::repeat_n(r.omega, self.dim))
            .collect();
        let omega = t.constant(&DiffArray::new(vec![n, self.dim], omega)?);
        let mut prompts = t.mul(&e, &omega)?;
        if let Some(pool) = pool {
            let em = pool.aligned(t, p, n)?;
            prompts = t.add(&prompts, &em)?;
        }

        let groups = &layout.instances;
        let mut pool_mat = vec![0.0; groups.len() * n];
        for (g, &inst) in groups.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| layout.rows[i].instance == inst).collect();
            for &i in &members {
                pool_mat[g * n + i] = 1.0 / members.len() as f64;
            }
        }
        let pool_mat = t.constant(&DiffArray::new(vec![groups.len(), n], pool_mat)?);
        let pooled = t.matmul(&pool_mat, &prompts)?;
        let instances = mlp(t, p, &self.key("phi_e"), &pooled)?;
        Ok(PvPromptSet {
            points: prompts,
            instances,
            rows: layout.rows.clone(),
            source: PromptSource::Detections,
        })
    }

    /// Instance prompt `[1, D]` aggregating the given point prompts.
    pub fn aggregate(&self, t: &mut Tape<f64>, p: &Bound<f64>, points: &DiffArray<f64>) -> Result<DiffArray<f64>> {
        let n = points.shape()[0];
        let avg = t.constant(&DiffArray::full(&[1, n], 1.0 / n as f64));
        let pooled = t.matmul(&avg, points)?;
        mlp(t, p, &self.key("phi_e"), &pooled)
    }

    /// BEV cells `[H·W, D]` attend over the point prompts.
    pub fn p2bev_inject(&self, t: &mut Tape<f64>, p: &Bound<f64>, bev: &DiffArray<f64>, prompts: &PvPromptSet) -> Result<DiffArray<f64>> {
        if prompts.is_empty() {
            return Ok(bev.clone());
        }
        self.attend(t, p, "p2bev", bev, &prompts.points)
    }

    /// Map queries `[M, D]` attend over the instance prompts.
    pub fn p2q_inject(&self, t: &mut Tape<f64>, p: &Bound<f64>, queries: &DiffArray<f64>, prompts: &PvPromptSet) -> Result<DiffArray<f64>> {
        if prompts.is_empty() || prompts.instances.shape()[0] == 0 {
            return Ok(queries.clone());
        }
        self.attend(t, p, "p2q", queries, &prompts.instances)
    }

    /// Single-head softmax attention added residually.
    fn attend(&self, t: &mut Tape<f64>, p: &Bound<f64>, site: &str, x: &DiffArray<f64>, ctx: &DiffArray<f64>) -> Result<DiffArray<f64>> {
        let q = project(t, p, &self.key(&format!("{site}.q")), x)?;
        let k = project(t, p, &self.key(&format!("{site}.k")), ctx)?;
        let v = project(t, p, &self.key(&format!("{site}.v")), ctx)?;
        let kt = t.transpose(&k)?;
        let logits = t.matmul(&q, &kt)?;
        let logits = t.scale(&logits, 1.0 / (self.dim as f64).sqrt())?;
        let att = t.softmax(&logits, 1)?;
        let mixed = t.matmul(&att, &v)?;
        t.add(x, &mixed)
    }
}
