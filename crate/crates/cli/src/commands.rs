use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdmap::config::RunConfig;
use hdmap::diffcore::ParamStore;
use hdmap::eval::{map_metric, ApResult};
use hdmap::mq_distill::InferenceMode;
use hdmap::pipeline::{self, svg, AblationRow, Model};
use hdmap::{Error, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::output::{with_hash_column, Outputs};
use crate::Common;

/// Config file (or defaults) with command-line overrides applied.
pub fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = &c.flags {
        cfg.flags.apply_list(f)?;
    }
    if let Some(m) = &c.mode {
        cfg.inference.mode = m.parse().map_err(Error::Config)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn start(c: &Common) -> Result<(RunConfig, Outputs)> {
    let cfg = load_config(c)?;
    let mut out = Outputs::new(&c.out, &cfg.hash())?;
    out.write("config.json", (cfg.to_json() + "\n").as_bytes())?;
    info!("config {}", cfg.hash());
    Ok((cfg, out))
}

pub fn gen(c: &Common) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let scenes = pipeline::generate_scenes(&cfg)?;
    for s in &scenes {
        let v: Value = serde_json::from_str(&s.to_json()?)?;
        out.write_json(&format!("scenes/{}.json", s.scene_id), &v)?;
    }
    info!("wrote {} scenes", scenes.len());
    out.finish("gen")
}

pub fn split(c: &Common) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let scenes = pipeline::generate_scenes(&cfg)?;
    let manifest = pipeline::split_scenes(&cfg, &scenes)?;
    info!(
        "{} train / {} val, overlap {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.overlap_ratio
    );
    out.write_json("split.json", &manifest)?;
    out.finish("split")
}

pub fn pretrain_pv(c: &Common) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let data = pipeline::synthesize(&cfg)?;
    let model = Model::new(&cfg);
    let mut pv = model.init_pv()?;
    let log = pipeline::pretrain_pv(&model, &data, &mut pv)?;
    pipeline::save_checkpoint(&out.path("pv_checkpoint.json"), &cfg, &pv, &ParamStore::new())?;
    out.record("pv_checkpoint.json")?;
    pipeline::write_log(&out.path("pv_train_log.jsonl"), &log, out.config_hash())?;
    out.record("pv_train_log.jsonl")?;
    out.finish("pretrain-pv")
}

fn load_pv(path: &Path) -> Result<ParamStore<f64>> {
    let (pv, _, _) = pipeline::load_checkpoint(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if pv.is_empty() {
        return Err(Error::Config(format!("{} holds no image-branch parameters", path.display())));
    }
    Ok(pv)
}

pub fn train(c: &Common, pv_ckpt: Option<&Path>) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let needs_pv = cfg.flags.ui2dprompt || cfg.flags.pretrained_pv_backbone_share;
    let pv = match pv_ckpt {
        Some(p) => load_pv(p)?,
        None if needs_pv => {
            return Err(Error::Config(
                "prompting is enabled but no image-branch checkpoint was given (--pv-ckpt)".into(),
            ))
        }
        None => ParamStore::new(),
    };
    let data = pipeline::synthesize(&cfg)?;
    let (store, log) = pipeline::train_from_pv(&cfg, &data, &pv)?;
    pipeline::save_checkpoint(&out.path("checkpoint.json"), &cfg, &pv, &store)?;
    out.record("checkpoint.json")?;
    pipeline::write_log(&out.path("train_log.jsonl"), &log, out.config_hash())?;
    out.record("train_log.jsonl")?;
    out.finish("train")
}

/// Loads a trained checkpoint and checks it can serve the requested mode.
fn load_trained(cfg: &RunConfig, path: &Path) -> Result<(ParamStore<f64>, ParamStore<f64>)> {
    let (pv, store, meta) = pipeline::load_checkpoint(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if store.is_empty() {
        return Err(Error::Config(format!("{} holds no map-model parameters", path.display())));
    }
    if let Some(h) = meta.get("config_hash") {
        if h != &cfg.hash() {
            warn!("checkpoint was trained under config {h}, evaluating under {}", cfg.hash());
        }
    }
    if cfg.flags.ui2dprompt && cfg.inference.mode == InferenceMode::Full && pv.is_empty() {
        return Err(Error::Config(
            "full-mode prompting needs image-branch parameters, but the checkpoint has none".into(),
        ));
    }
    Ok((pv, store))
}

pub fn eval(c: &Common, ckpt: Option<&Path>, split: &str, oracle: bool) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let data = pipeline::synthesize(&cfg)?;
    let samples = if split == "train" { &data.train } else { &data.val };
    let mut result = if oracle {
        map_metric(&pipeline::oracle_detections(samples), &pipeline::ground_truths(samples))
    } else {
        let ckpt = ckpt.ok_or_else(|| Error::Config("--ckpt is required unless --oracle is set".into()))?;
        let (pv, store) = load_trained(&cfg, ckpt)?;
        let model = Model::new(&cfg);
        let ev = pipeline::evaluate(&model, &pv, &store, samples, cfg.inference.mode, cfg.inference.attention)?;
        info!("inference {:.2}s over {} scenes", ev.seconds, samples.len());
        ev.result
    };
    result.config_hash = Some(cfg.hash());
    info!("mAP {:.4}", result.map);
    out.write_json("metrics.json", &result)?;
    let label = if oracle { "oracle".to_string() } else { cfg.flags.describe() };
    let csv = format!("{}\n{}\n", ApResult::csv_header(), result.csv_row(&label));
    out.write("metrics.csv", with_hash_column(&csv, &cfg.hash()).as_bytes())?;
    out.finish("eval")
}

#[derive(Serialize)]
struct InferOutput<'a> {
    mode: InferenceMode,
    #[serde(flatten)]
    prediction: &'a pipeline::ScenePrediction,
}

pub fn infer(c: &Common, ckpt: &Path, scene: Option<&str>) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let data = pipeline::synthesize(&cfg)?;
    let sample = match scene {
        None => data.val.first().ok_or_else(|| Error::Config("validation split is empty".into()))?,
        Some(id) => data
            .val
            .iter()
            .chain(&data.train)
            .find(|s| s.scene.scene_id == id)
            .ok_or_else(|| Error::Config(format!("unknown scene {id}")))?,
    };
    let (pv, store) = load_trained(&cfg, ckpt)?;
    let model = Model::new(&cfg);
    let mut rng = pipeline::eval_rng(cfg.seed, 0);
    let pred = pipeline::predict(&model, &pv, &store, sample, cfg.inference.mode, cfg.inference.attention, &mut rng)?;
    let id = &sample.scene.scene_id;
    out.write_json(
        &format!("predictions_{id}.json"),
        &InferOutput {
            mode: cfg.inference.mode,
            prediction: &pred,
        },
    )?;
    out.write_json(&format!("prompts_{id}.json"), &serde_json::json!({ "rows": pred.prompts }))?;
    let body = svg::render(&pred, Some(&sample.scene), cfg.c_thr);
    let svg = body.replacen('>', &format!(">\n<!-- config_hash {} -->", cfg.hash()), 1);
    out.write(&format!("{id}.svg"), svg.as_bytes())?;
    out.finish("infer")
}

#[derive(Serialize, Deserialize)]
struct AblationOutput {
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
}

pub fn ablate(c: &Common, seeds: &str) -> Result<()> {
    let (cfg, mut out) = start(c)?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let rows = pipeline::ablate(&cfg, &pipeline::ablation_grid(), &seeds)?;
    out.write("ablation.csv", with_hash_column(&pipeline::ablation_csv(&rows), &cfg.hash()).as_bytes())?;
    out.write_json("ablation.json", &AblationOutput { seeds, rows })?;
    out.finish("ablate")
}

/// One table row of the merged report.
struct ReportRow {
    label: String,
    csv: String,
    map: f64,
    hash: String,
}

fn report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)?;
    let hash = v
        .get("config_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config(format!("{} carries no config_hash", path.display())))?
        .to_string();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if v.get("rows").is_some() {
        let a: AblationOutput = serde_json::from_value(v)?;
        let table = pipeline::ablation_csv(&a.rows);
        Ok(table
            .lines()
            .skip(1)
            .map(|line| {
                let label = line.split(',').next().unwrap_or_default().to_string();
                let map = a.rows.iter().filter(|r| r.label == label).map(|r| r.map).sum::<f64>()
                    / a.rows.iter().filter(|r| r.label == label).count().max(1) as f64;
                let csv = line.rsplit_once(',').map_or(line, |(head, _)| head).to_string();
                ReportRow {
                    label,
                    csv,
                    map,
                    hash: hash.clone(),
                }
            })
            .collect())
    } else if v.get("mAP").is_some() {
        let r: ApResult = serde_json::from_value(v)?;
        Ok(vec![ReportRow {
            csv: r.csv_row(&stem),
            label: stem,
            map: r.map,
            hash,
        }])
    } else {
        Err(Error::Config(format!("{} is neither a metrics nor an ablation file", path.display())))
    }
}

fn bar_chart(rows: &[ReportRow]) -> String {
    let bar_h = 24.0;
    let width = 520.0;
    let height = bar_h * rows.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#);
    for (i, r) in rows.iter().enumerate() {
        let y = 10.0 + i as f64 * bar_h;
        let w = 300.0 * r.map.clamp(0.0, 1.0);
        let _ = writeln!(s, r##"<text x="5" y="{:.1}" font-size="12">{}</text>"##, y + 16.0, r.label);
        let _ = writeln!(s, r##"<rect x="150" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="#2a9d8f"/>"##, bar_h - 6.0);
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" font-size="12">{:.2}</text>"##, 155.0 + w, y + 16.0, 100.0 * r.map);
    }
    s.push_str("</svg>\n");
    s
}

pub fn report(c: &Common, inputs: &[PathBuf], allow_mixed: bool) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input file".into()));
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(report_rows(p)?);
    }
    let hashes: BTreeSet<&str> = rows.iter().map(|r| r.hash.as_str()).collect();
    if hashes.len() > 1 && !allow_mixed {
        return Err(Error::Config(format!(
            "inputs come from different configurations ({}); pass --allow-mixed to combine them",
            hashes.iter().copied().collect::<Vec<_>>().join(", ")
        )));
    }
    let joint = hashes.iter().copied().collect::<Vec<_>>().join("+");
    let mut out = Outputs::new(&c.out, &joint)?;
    let mut csv = ApResult::csv_header() + ",config_hash\n";
    for r in &rows {
        let _ = writeln!(csv, "{},{}", r.csv, r.hash);
    }
    out.write("report.csv", csv.as_bytes())?;
    let svg = bar_chart(&rows).replacen('>', &format!(">\n<!-- config_hash {joint} -->"), 1);
    out.write("report.svg", svg.as_bytes())?;
    out.finish("report")
}
