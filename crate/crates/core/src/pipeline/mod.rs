//! End-to-end training and inference on synthetic scenes.
//!
//! The image-space branch is pretrained per camera and then frozen. Its
//! detections on each training scene are computed once and cached as prompt
//! layouts; the BEV model, prompt embeddings and mimic pool are trained
//! jointly on top.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Flags, RunConfig};
use crate::diffcore::{Adam, Bound, Checkpoint, DiffArray, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::eval::{map_metric, ApResult, Detection, GroundTruth};
use crate::instrument::{self, Stage};
use crate::losses::{decoder_loss, total_loss, LossRecord, Target};
use crate::mq_distill::{InferenceMode, MimicPool};
use crate::scenegen::{
    generate_dataset, pv_ground_truth, rasterize_features, split_geo, BevLayout, Degradation, MapClass, Scene, SplitManifest,
};
use crate::ua_decoder::{AttentionMode, DecoderConfig, ElementPrediction, LayerOutput, MapDecoder, Space};
use crate::ui2dprompt::{prepare_prompts, select_candidates, InjectionBlock, PromptDumpRow, PromptLayout, PvInstance, PvPromptSet};

pub mod svg;


/// A scene with its rasterized inputs and targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    /// `[H·W, C]`.
    pub bev: DiffArray<f64>,
    /// Per camera `[h·w, C]` with the grid size.
    pub pv: Vec<(DiffArray<f64>, usize, usize)>,
    pub targets: Vec<Target>,
    pub pv_targets: Vec<Vec<Target>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub manifest: SplitManifest,
}

/// Feature-noise seed of a scene, stable across runs.
pub fn noise_seed(seed: u64, scene_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn prepare_sample(scene: Scene, cfg: &RunConfig, degradation: &Degradation) -> Result<Sample> {
    let mut raster = cfg.data.raster.clone();
    raster.degradation = degradation.clone();
    let grids = rasterize_features(&scene, noise_seed(cfg.seed, &scene.scene_id), &raster);
    let c = grids.channels;
    let hw = grids.layout.h * grids.layout.w;
    let bev = DiffArray::new(vec![hw, c], grids.bev)?;
    let pv = grids
        .pv
        .into_iter()
        .map(|g| Ok((DiffArray::new(vec![g.h * g.w, c], g.values)?, g.h, g.w)))
        .collect::<Result<Vec<_>>>()?;
    let targets = scene.elements.iter().map(Target::from).collect();
    let pv_targets = (0..scene.cameras.len())
        .map(|k| Ok(pv_ground_truth(&scene, k, cfg.model.pv_points, cfg.data.pv_min_pixels)?.iter().map(Target::from).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        scene,
        bev,
        pv,
        targets,
        pv_targets,
    })
}

pub fn generate_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    generate_dataset(cfg.seed, cfg.data.scenes, &cfg.data.gen)
}

pub fn split_scenes(cfg: &RunConfig, scenes: &[Scene]) -> Result<SplitManifest> {
    split_geo(scenes, cfg.data.strategy, cfg.data.val_ratio, cfg.data.gen.tile, cfg.seed)
}

/// Rasterizes the scenes named in `manifest`; validation scenes get the
/// validation degradation.
pub fn build_dataset(cfg: &RunConfig, scenes: Vec<Scene>, manifest: SplitManifest) -> Result<Dataset> {
    let mut by_id: BTreeMap<String, Scene> = scenes.into_iter().map(|s| (s.scene_id.clone(), s)).collect();
    let mut take = |ids: &[String], deg: &Degradation| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let scene = by_id.remove(id).ok_or_else(|| Error::Split(format!("scene {id} missing")))?;
                prepare_sample(scene, cfg, deg)
            })
            .collect()
    };
    let train = take(&manifest.train, &cfg.data.train_degradation)?;
    let val = take(&manifest.val, &cfg.data.val_degradation)?;
    Ok(Dataset { train, val, manifest })
}

/// Generation, split and rasterization in one go.
pub fn synthesize(cfg: &RunConfig) -> Result<Dataset> {
    let scenes = generate_scenes(cfg)?;
    let manifest = split_scenes(cfg, &scenes)?;
    build_dataset(cfg, scenes, manifest)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_PV_INIT: u64 = 1;
const STREAM_MAIN_INIT: u64 = 2;
const STREAM_PV_ORDER: u64 = 3;
const STREAM_MAIN_ORDER: u64 = 4;
const STREAM_PV_NOISE: u64 = 5;
const STREAM_MAIN_NOISE: u64 = 6;
const STREAM_MIX: u64 = 7;
const STREAM_EVAL: u64 = 1 << 20;

/// Parameter layout of every learned block plus the flags that wire them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub pv: MapDecoder,
    pub bev: MapDecoder,
    pub block: InjectionBlock,
    pub pool: MimicPool,
    pub bev_space: Space,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let m = &cfg.model;
        let pv = MapDecoder::new(
            "pv",
            DecoderConfig {
                queries: m.pv_queries,
                dim: m.dim,
                layers: m.pv_layers,
                points: m.pv_points,
                samples: m.samples,
                ua_attention: true,
                ua_head: true,
            },
        );
        let bev = MapDecoder::new(
            "bev",
            DecoderConfig {
                queries: m.queries,
                dim: m.dim,
                layers: m.layers,
                points: m.points,
                samples: m.samples,
                ua_attention: cfg.flags.ua_attention,
                ua_head: cfg.flags.ua_head,
            },
        );
        let layout = BevLayout {
            h: cfg.data.raster.bev_h,
            w: cfg.data.raster.bev_w,
        };
        Self {
            cfg: cfg.clone(),
            pv,
            bev,
            block: InjectionBlock::new("inj", m.dim),
            pool: MimicPool::new("mq", m.mimic_pool, m.dim),
            bev_space: Space::bev(layout),
        }
    }

    fn flags(&self) -> &Flags {
        &self.cfg.flags
    }

    fn channels(&self) -> usize {
        self.cfg.data.raster.channels.max(3)
    }

    pub fn init_pv(&self) -> Result<ParamStore<f64>> {
        let mut store = ParamStore::new();
        self.pv.init(&mut store, self.channels(), &mut rng_for(self.cfg.seed, STREAM_PV_INIT))?;
        Ok(store)
    }

    /// BEV decoder, prompt blocks and mimic pool. Every group is created
    /// whatever the flags, so runs that differ only in flags start from the
    /// same values.
    pub fn init_main(&self) -> Result<ParamStore<f64>> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(self.cfg.seed, STREAM_MAIN_INIT);
        self.bev.init(&mut store, self.channels(), &mut rng)?;
        self.block.init(&mut store, &mut rng)?;
        self.pool.init(&mut store, &mut rng);
        Ok(store)
    }

    fn pv_space(&self, cam_w: f64, cam_h: f64, h: usize, w: usize) -> Space {
        Space::image(cam_w, cam_h, h, w, self.cfg.model.pv_unit)
    }

    /// Image-branch decoder on one camera.
    #[allow(clippy::too_many_arguments)]
    pub fn pv_forward(
        &self,
        t: &mut Tape<f64>,
        p: &Bound<f64>,
        sample: &Sample,
        camera: usize,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LayerOutput>> {
        instrument::record(Stage::PvDecoder);
        let cam = &sample.scene.cameras[camera];
        let (input, h, w) = &sample.pv[camera];
        let space = self.pv_space(cam.width, cam.height, *h, *w);
        let g = self.pv.encode_grid(t, p, input, &space)?;
        let g = t.reshape(&g, &[*h, *w, self.cfg.model.dim])?;
        let (q, r) = self.pv.initial_queries(p)?;
        self.pv.forward(t, p, &q, &r, &g, &space, mode, rng)
    }

    /// Final-layer detections of every camera, mean-mode attention.
    pub fn pv_instances(&self, pv_store: &ParamStore<f64>, sample: &Sample) -> Result<Vec<PvInstance>> {
        let p = pv_store.view();
        let mut rng = rng_for(0, 0);
        let mut out = Vec::new();
        for (k, cam) in sample.scene.cameras.iter().enumerate() {
            let mut t = Tape::new();
            let layers = self.pv_forward(&mut t, &p, sample, k, AttentionMode::Mean, &mut rng)?;
            let last = layers.last().ok_or_else(|| Error::Invalid("decoder without layers".into()))?;
            for pred in last.predictions() {
                out.push(PvInstance::from_prediction(&cam.name, &pred)?);
            }
        }
        Ok(out)
    }

    /// Selection, IPM and ω for one scene.
    pub fn prompt_layout(&self, pv_store: &ParamStore<f64>, sample: &Sample) -> Result<PromptLayout> {
        let instances = self.pv_instances(pv_store, sample)?;
        let selected = select_candidates(&instances, self.cfg.c_thr);
        prepare_prompts(&selected, &sample.scene.cameras, self.cfg.omega_scope)
    }

    /// Prompts from a cached layout; empty when prompting is disabled.
    pub fn layout_prompts(&self, t: &mut Tape<f64>, p: &Bound<f64>, layout: Option<&PromptLayout>) -> Result<PvPromptSet> {
        match layout {
            Some(l) if self.flags().ui2dprompt => {
                let pool = self.flags().mimic.then_some(&self.pool);
                self.block.build_prompts(t, p, l, pool)
            }
            _ => Ok(PvPromptSet::empty(self.cfg.model.dim)),
        }
    }

    /// BEV decoding with whichever injections are enabled.
    pub fn bev_forward(
        &self,
        t: &mut Tape<f64>,
        p: &Bound<f64>,
        sample: &Sample,
        prompts: &PvPromptSet,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LayerOutput>> {
        let s = &self.bev_space;
        let f = self.bev.encode_grid(t, p, &sample.bev, s)?;
        let f = if self.flags().p2bev { self.block.p2bev_inject(t, p, &f, prompts)? } else { f };
        let grid = t.reshape(&f, &[s.grid_h, s.grid_w, self.cfg.model.dim])?;
        let (q, r) = self.bev.initial_queries(p)?;
        let q = if self.flags().p2q { self.block.p2q_inject(t, p, &q, prompts)? } else { q };
        self.bev.forward(t, p, &q, &r, &grid, s, mode, rng)
    }
}

fn check_finite(rec: &LossRecord, what: &str) -> Result<()> {
    if rec.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} loss became non-finite at step {}", rec.step)))
    }
}

/// Image-branch pretraining over every (train scene, camera) pair.
pub fn pretrain_pv(model: &Model, data: &Dataset, pv_store: &mut ParamStore<f64>) -> Result<Vec<LossRecord>> {
    let cfg = &model.cfg;
    let items: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.scene.cameras.len()).map(move |k| (i, k)))
        .collect();
    if items.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut order_rng = rng_for(cfg.seed, STREAM_PV_ORDER);
    let mut noise = rng_for(cfg.seed, STREAM_PV_NOISE);
    let mut order = items.clone();
    let mut adam = Adam::new(cfg.optim.pv_lr, cfg.optim.pv_steps);
    adam.clip_norm = Some(cfg.optim.clip);
    let mut log = Vec::with_capacity(cfg.optim.pv_steps);
    for step in 0..cfg.optim.pv_steps {
        if step % order.len() == 0 {
            order.shuffle(&mut order_rng);
        }
        let (i, k) = order[step % order.len()];
        let sample = &data.train[i];
        let mut t = Tape::new();
        let p = pv_store.bind(&mut t);
        let layers = model.pv_forward(&mut t, &p, sample, k, AttentionMode::Sample, &mut noise)?;
        let losses = decoder_loss(&mut t, &layers, &sample.pv_targets[k], &cfg.loss, cfg.model.pv_unit)?;
        let (total, mut rec) = total_loss(&mut t, &losses, None)?;
        rec.step = step;
        check_finite(&rec, "image-branch")?;
        let g = t.backward(&total)?;
        adam.step(pv_store, &p.gradients(&g));
        log.push(rec);
    }
    Ok(log)
}

/// Copies the image-branch input projection into the BEV one.
pub fn share_backbone(pv_store: &ParamStore<f64>, store: &mut ParamStore<f64>) -> Result<()> {
    for part in ["w", "b"] {
        let v = pv_store
            .get(&format!("pv.in_proj.{part}"))
            .ok_or_else(|| Error::Config("image-branch checkpoint lacks pv.in_proj".into()))?;
        store.set_values(&format!("bev.in_proj.{part}"), v.to_vec())?;
    }
    Ok(())
}

/// Prompt layouts of the training scenes when prompting is on.
pub fn training_layouts(model: &Model, data: &Dataset, pv_store: &ParamStore<f64>) -> Result<Vec<Option<PromptLayout>>> {
    data.train
        .iter()
        .map(|s| {
            if model.cfg.flags.ui2dprompt {
                model.prompt_layout(pv_store, s).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Joint training of the BEV model, prompt blocks and mimic pool.
pub fn train_main(
    model: &Model,
    data: &Dataset,
    layouts: &[Option<PromptLayout>],
    store: &mut ParamStore<f64>,
) -> Result<Vec<LossRecord>> {
    let cfg = &model.cfg;
    if data.train.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut order_rng = rng_for(cfg.seed, STREAM_MAIN_ORDER);
    let mut noise = rng_for(cfg.seed, STREAM_MAIN_NOISE);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut adam = Adam::new(cfg.optim.lr, cfg.optim.steps);
    adam.clip_norm = Some(cfg.optim.clip);
    let distill = cfg.flags.ui2dprompt && cfg.flags.mimic;
    let mut mix = rng_for(cfg.seed, STREAM_MIX);
    let mut log = Vec::with_capacity(cfg.optim.steps);
    for step in 0..cfg.optim.steps {
        if step % order.len() == 0 {
            order.shuffle(&mut order_rng);
        }
        let i = order[step % order.len()];
        let sample = &data.train[i];
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let prompts = model.layout_prompts(&mut t, &p, layouts[i].as_ref())?;
        let swap = distill && !prompts.is_empty() && cfg.optim.mimic_mix > 0.0 && mix.random::<f64>() < cfg.optim.mimic_mix;
        let layers = if swap {
            let mimic = model.pool.prompts(&mut t, &p, &model.block)?;
            model.bev_forward(&mut t, &p, sample, &mimic, AttentionMode::Sample, &mut noise)?
        } else {
            model.bev_forward(&mut t, &p, sample, &prompts, AttentionMode::Sample, &mut noise)?
        };
        let losses = decoder_loss(&mut t, &layers, &sample.targets, &cfg.loss, 1.0)?;
        let d = if distill {
            Some(model.pool.distill_loss(&mut t, &p, &prompts, cfg.loss.distill)?)
        } else {
            None
        };
        let (total, mut rec) = total_loss(&mut t, &losses, d.as_ref())?;
        rec.step = step;
        check_finite(&rec, "map")?;
        let g = t.backward(&total)?;
        adam.step(store, &p.gradients(&g));
        log.push(rec);
    }
    Ok(log)
}

/// Decoded elements of one scene plus the prompts that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: String,
    pub elements: Vec<ElementPrediction>,
    pub prompts: Vec<PromptDumpRow>,
}

/// Inference on one scene. Full mode runs the image branch; mimic mode
/// substitutes the distilled pool and never touches it.
pub fn predict(
    model: &Model,
    pv_store: &ParamStore<f64>,
    store: &ParamStore<f64>,
    sample: &Sample,
    mode: InferenceMode,
    attention: AttentionMode,
    rng: &mut ChaCha8Rng,
) -> Result<ScenePrediction> {
    let flags = &model.cfg.flags;
    let mut t = Tape::new();
    let p = store.view();
    let mut dump = Vec::new();
    let prompts = if !flags.ui2dprompt {
        PvPromptSet::empty(model.cfg.model.dim)
    } else {
        match mode {
            InferenceMode::Full => {
                let layout = model.prompt_layout(pv_store, sample)?;
                dump = layout.dump(&sample.scene.scene_id);
                model.layout_prompts(&mut t, &p, Some(&layout))?
            }
            InferenceMode::Mimic => {
                if !flags.mimic {
                    warn!("mimic mode with an untrained pool");
                }
                model.pool.prompts(&mut t, &p, &model.block)?
            }
        }
    };
    let layers = model.bev_forward(&mut t, &p, sample, &prompts, attention, rng)?;
    let last = layers.last().ok_or_else(|| Error::Invalid("decoder without layers".into()))?;
    let elements = last.predictions();
    if elements.iter().any(|e| e.points.iter().flatten().any(|v| !v.is_finite())) {
        return Err(Error::Numerical(format!("non-finite prediction on {}", sample.scene.scene_id)));
    }
    Ok(ScenePrediction {
        scene_id: sample.scene.scene_id.clone(),
        elements,
        prompts: dump,
    })
}

/// One detection per (query, class), scored by that class.
pub fn detections(preds: &[ScenePrediction]) -> Vec<Detection<f64>> {
    let mut out = Vec::new();
    let mut id = 0;
    for (s, p) in preds.iter().enumerate() {
        for e in &p.elements {
            for c in 0..MapClass::ALL.len() {
                out.push(Detection {
                    scene: s,
                    id,
                    class: c,
                    score: e.scores[c],
                    points: e.points.clone(),
                });
                id += 1;
            }
        }
    }
    out
}

pub fn ground_truths(samples: &[Sample]) -> Vec<GroundTruth<f64>> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(s, x)| {
            x.scene.elements.iter().map(move |e| GroundTruth {
                scene: s,
                class: e.class.index(),
                points: e.points.points().to_vec(),
            })
        })
        .collect()
}

/// Predictions equal to the ground truth, every score 1.
pub fn oracle_detections(samples: &[Sample]) -> Vec<Detection<f64>> {
    ground_truths(samples)
        .into_iter()
        .enumerate()
        .map(|(id, g)| Detection {
            scene: g.scene,
            id,
            class: g.class,
            score: 1.0,
            points: g.points,
        })
        .collect()
}

/// Sampling RNG for inference on the `i`-th scene of a split.
pub fn eval_rng(seed: u64, i: usize) -> ChaCha8Rng {
    rng_for(seed, STREAM_EVAL + i as u64)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub result: ApResult,
    pub predictions: Vec<ScenePrediction>,
    /// Inference wall time over all scenes.
    pub seconds: f64,
}

pub fn evaluate(
    model: &Model,
    pv_store: &ParamStore<f64>,
    store: &ParamStore<f64>,
    samples: &[Sample],
    mode: InferenceMode,
    attention: AttentionMode,
) -> Result<Evaluation> {
    let start = Instant::now();
    let predictions = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = eval_rng(model.cfg.seed, i);
            predict(model, pv_store, store, s, mode, attention, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let mut result = map_metric(&detections(&predictions), &ground_truths(samples));
    result.config_hash = Some(model.cfg.hash());
    Ok(Evaluation {
        result,
        predictions,
        seconds,
    })
}

/// Trained parameters of both branches.
#[derive(Clone, Debug)]
pub struct Trained {
    pub pv_store: ParamStore<f64>,
    pub store: ParamStore<f64>,
    pub pv_log: Vec<LossRecord>,
    pub log: Vec<LossRecord>,
}

/// Pretraining, backbone sharing and main training from scratch.
pub fn train_all(cfg: &RunConfig, data: &Dataset) -> Result<Trained> {
    let model = Model::new(cfg);
    let mut pv_store = model.init_pv()?;
    let pv_log = pretrain_pv(&model, data, &mut pv_store)?;
    let (store, log) = train_from_pv(cfg, data, &pv_store)?;
    Ok(Trained {
        pv_store,
        store,
        pv_log,
        log,
    })
}

/// Main training on top of a pretrained image branch.
pub fn train_from_pv(cfg: &RunConfig, data: &Dataset, pv_store: &ParamStore<f64>) -> Result<(ParamStore<f64>, Vec<LossRecord>)> {
    let model = Model::new(cfg);
    let mut store = model.init_main()?;
    if cfg.flags.pretrained_pv_backbone_share {
        share_backbone(pv_store, &mut store)?;
    }
    let layouts = training_layouts(&model, data, pv_store)?;
    let t0 = Instant::now();
    let log = train_main(&model, data, &layouts, &mut store)?;
    info!("trained {} steps in {:.1}s", log.len(), t0.elapsed().as_secs_f64());
    Ok((store, log))
}

/// Writes both branches into one checkpoint tagged with the config hash.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, pv_store: &ParamStore<f64>, store: &ParamStore<f64>) -> Result<()> {
    let mut all = store.clone();
    for (k, v) in pv_store.iter() {
        all.insert(k, v.clone());
    }
    let mut ckpt = all.to_checkpoint();
    ckpt.meta.insert("config_hash".into(), cfg.hash());
    ckpt.meta.insert("flags".into(), cfg.flags.describe());
    ckpt.save(path)
}

/// Splits a checkpoint into `(image branch, rest, meta)`.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f64>, ParamStore<f64>, BTreeMap<String, String>)> {
    let ckpt = Checkpoint::load(path)?;
    let all: ParamStore<f64> = ParamStore::from_checkpoint(&ckpt)?;
    let mut pv = ParamStore::new();
    let mut rest = ParamStore::new();
    for (k, v) in all.iter() {
        if k.starts_with("pv.") {
            pv.insert(k, v.clone());
        } else {
            rest.insert(k, v.clone());
        }
    }
    Ok((pv, rest, ckpt.meta))
}

/// JSON-lines training log, one record per step, each tagged with the
/// config hash.
pub fn write_log(path: &Path, records: &[LossRecord], config_hash: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        #[serde(flatten)]
        rec: &'a LossRecord,
        config_hash: &'a str,
    }
    let mut text = String::new();
    for rec in records {
        text.push_str(&serde_json::to_string(&Line { rec, config_hash })?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: Flags,
    pub seed: u64,
    pub config_hash: String,
    pub map: f64,
    pub per_class: BTreeMap<String, f64>,
    pub train_seconds: f64,
    /// Inference wall time over the validation split.
    pub infer_seconds: f64,
    /// Mimic-mode mAP and wall time, for rows trained with a mimic pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mimic_map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mimic_seconds: Option<f64>,
}

/// The four rows of the component ablation.
pub fn ablation_grid() -> Vec<(String, Flags)> {
    vec![
        ("baseline".into(), Flags::baseline()),
        ("+ua_decoder".into(), Flags::ua_decoder()),
        ("+ui2dprompt".into(), Flags::prompts_only()),
        ("+both".into(), Flags::full()),
    ]
}

/// Trains and evaluates every row for every seed. The image branch is
/// pretrained once per seed and shared by all rows of that seed.
pub fn ablate(base: &RunConfig, rows: &[(String, Flags)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = synthesize(&cfg)?;
        let pv_model = Model::new(&cfg);
        let mut pv_store = pv_model.init_pv()?;
        pretrain_pv(&pv_model, &data, &mut pv_store)?;
        for (label, flags) in rows {
            let mut rc = cfg.clone();
            rc.flags = flags.clone();
            let t0 = Instant::now();
            let (store, _) = train_from_pv(&rc, &data, &pv_store)?;
            let train_seconds = t0.elapsed().as_secs_f64();
            let model = Model::new(&rc);
            let ev = evaluate(&model, &pv_store, &store, &data.val, InferenceMode::Full, rc.inference.attention)?;
            info!("seed {seed} {label}: mAP {:.4}", ev.result.map);
            let mimic = if rc.flags.ui2dprompt && rc.flags.mimic {
                let m = evaluate(&model, &pv_store, &store, &data.val, InferenceMode::Mimic, rc.inference.attention)?;
                info!("seed {seed} {label}: mimic mAP {:.4}", m.result.map);
                Some(m)
            } else {
                None
            };
            out.push(AblationRow {
                label: label.clone(),
                flags: flags.clone(),
                seed,
                config_hash: rc.hash(),
                map: ev.result.map,
                per_class: MapClass::ALL.iter().map(|&c| (c.name().to_string(), ev.result.class_mean(c))).collect(),
                train_seconds,
                infer_seconds: ev.seconds,
                mimic_map: mimic.as_ref().map(|m| m.result.map),
                mimic_seconds: mimic.as_ref().map(|m| m.seconds),
            });
        }
    }
    Ok(out)
}

/// Table with one row per label: per-class AP and mAP in percent, averaged
/// over seeds.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut text = ApResult::csv_header() + ",seeds\n";
    for label in labels {
        let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.label == label).collect();
        let n = rs.len() as f64;
        let mut cols = vec![label.to_string()];
        for c in MapClass::ALL {
            let v: f64 = rs.iter().map(|r| r.per_class[c.name()]).sum::<f64>() / n;
            cols.push(format!("{:.2}", 100.0 * v));
        }
        cols.push(format!("{:.2}", 100.0 * rs.iter().map(|r| r.map).sum::<f64>() / n));
        cols.push(rs.len().to_string());
        text.push_str(&cols.join(","));
        text.push('\n');
    }
    text
}
