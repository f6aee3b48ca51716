//! Learned mimic queries that stand in for image-space prompts at inference.
//!
//! A pool of `N_m` query vectors passes through a small MLP `h`; during
//! training `h(e_m)` regresses the detached prompts row by row (prompt row
//! `i` against pool row `i mod N_m`). In mimic mode `h(e_m)` replaces the
//! prompts outright and the image branch is never run.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffArray, ParamStore, Tape};
use crate::error::Result;
use crate::nn::{init_mlp, mlp};
use crate::ui2dprompt::{InjectionBlock, PromptSource, PvPromptSet};

#[cfg(test)]
mod tests;

/// Source of prompts at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Run the image branch and build prompts from its detections.
    #[default]
    Full,
    /// Use the distilled pool; the image branch is skipped.
    Mimic,
}

impl std::str::FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "mimic" => Ok(Self::Mimic),
            other => Err(format!("unknown mode {other:?} (expected full or mimic)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MimicPool {
    pub prefix: String,
    pub size: usize,
    pub dim: usize,
}

impl MimicPool {
    pub fn new(prefix: impl Into<String>, size: usize, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            size,
            dim,
        }
    }

    pub fn key(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        store.init_normal(&self.key("queries"), &[self.size, self.dim], 0.1, rng);
        init_mlp(store, &self.key("h"), self.dim, self.dim, self.dim, 1.0, rng);
    }

    /// Pool row for prompt row `i`.
    pub fn row_for(&self, i: usize) -> usize {
        i % self.size
    }

    /// Raw pool rows aligned to `n` prompt rows, `[n, D]`.
    pub fn aligned(&self, t: &mut Tape<f64>, p: &Bound<f64>, n: usize) -> Result<DiffArray<f64>> {
        let rows: Vec<usize> = (0..n).map(|i| self.row_for(i)).collect();
        t.gather_rows(p.get(&self.key("queries"))?, &rows)
    }

    /// `h(e_m)` for every pool row, `[N_m, D]`.
    pub fn mimic(&self, t: &mut Tape<f64>, p: &Bound<f64>) -> Result<DiffArray<f64>> {
        mlp(t, p, &self.key("h"), p.get(&self.key("queries"))?)
    }

    /// `λ · mean((ẽ − h(e_m))²)` over rows and channels with the prompts
    /// treated as constants; zero for an empty set.
    pub fn distill_loss(&self, t: &mut Tape<f64>, p: &Bound<f64>, prompts: &PvPromptSet, weight: f64) -> Result<DiffArray<f64>> {
        if prompts.is_empty() {
            return Ok(t.constant(&DiffArray::scalar(0.0)));
        }
        let teacher = t.constant(&prompts.points.detach());
        let n = prompts.len();
        let aligned = self.aligned(t, p, n)?;
        let student = mlp(t, p, &self.key("h"), &aligned)?;
        let diff = t.sub(&teacher, &student)?;
        let sq = t.mul(&diff, &diff)?;
        let m = t.mean(&sq)?;
        t.scale(&m, weight)
    }

    /// Prompt set built from the pool alone: `h(e_m)` as point prompts and
    /// their aggregate as a single instance prompt.
    pub fn prompts(&self, t: &mut Tape<f64>, p: &Bound<f64>, block: &InjectionBlock) -> Result<PvPromptSet> {
        let points = self.mimic(t, p)?;
        let instances = block.aggregate(t, p, &points)?;
        Ok(PvPromptSet {
            points,
            instances,
            rows: Vec::new(),
            source: PromptSource::Mimic,
        })
    }
}
