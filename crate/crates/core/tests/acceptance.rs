//! Acceptance criteria, each run at its stated tolerance. Every criterion
//! prints one PASS/FAIL line; the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use hdmap::config::{Flags, RunConfig};
use hdmap::diffcore::{grad_check_params, Adam, DiffArray, ParamStore, Tape};
use hdmap::eval::{ap_at_threshold, chamfer_points, Detection, GroundTruth, RECALL_SAMPLES, THRESHOLDS};
use hdmap::losses::{assignment_cost, decoder_loss, hungarian, hungarian_match, nll_loss, total_loss, MatchResult, Target};
use hdmap::mq_distill::InferenceMode;
use hdmap::pipeline::{self, Model, Sample};
use hdmap::ua_decoder::{ua_attention, AttentionMode};
use hdmap::ui2dprompt::{omega_weights, prepare_prompts, PromptLayout, PvInstance, PvPromptSet};
use hdmap::{Camera, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Bypasses the test harness capture so the lines land in the log.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ---------------------------------------------------------------- 1

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::quick();
    c.model.dim = 8;
    c.model.queries = 4;
    c.model.samples = 2;
    c.model.pv_queries = 3;
    c.model.mimic_pool = 4;
    c.data.scenes = 4;
    c.data.raster.channels = 4;
    c.model.layers = 1;
    c.model.pv_layers = 1;
    c
}

/// Parameter keys under `prefixes`, minus the reference logits. Sampling
/// locations treat reference points as constants, so finite differences
/// through them measure a path the gradient deliberately omits.
fn checked_keys<'a>(store: &'a ParamStore<f64>, prefixes: &[&str]) -> Vec<&'a str> {
    store
        .keys()
        .filter(|k| prefixes.iter().any(|p| k.starts_with(p)) && !k.ends_with(".ref"))
        .collect()
}

/// Hand-placed image detections of ground points seen by the front camera.
fn front_layout(rig: &[Camera]) -> PromptLayout {
    let cam = &rig[0];
    let lines = [[[-2.0, 6.0], [-1.5, 9.0], [-1.0, 12.0]], [[2.0, 7.0], [2.5, 10.0], [3.0, 14.0]]];
    let instances: Vec<PvInstance> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| PvInstance {
            camera: cam.name.clone(),
            scores: [0.1, 0.9, 0.2],
            points: l.iter().map(|&g| cam.project_ground_point(g).0).collect(),
            sigmas: vec![[1.0 + i as f64, 2.0], [0.5, 0.7], [3.0, 1.5]],
        })
        .collect();
    prepare_prompts(&instances, rig, Default::default()).expect("layout")
}

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = tiny_config();
    let data = pipeline::synthesize(&cfg)?;
    let sample: &Sample = &data.train[0];
    let model = Model::new(&cfg);
    let mut store = model.init_main()?;
    for (k, v) in model.init_pv()?.iter() {
        store.insert(k, v.clone());
    }
    let layout = front_layout(&sample.scene.cameras);
    let w = cfg.loss.clone();
    let mut errors: BTreeMap<&str, f64> = BTreeMap::new();
    let eps = 1e-6;
    let probe = Some(4);

    // image branch: UA attention and UA head under the full loss
    errors.insert(
        "image-branch decoder",
        grad_check_params(
            &store,
            &checked_keys(&store, &["pv."]),
            |t, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let layers = model.pv_forward(t, p, sample, 0, AttentionMode::Sample, &mut rng)?;
                let losses = decoder_loss(t, &layers, &sample.pv_targets[0], &w, cfg.model.pv_unit)?;
                Ok(total_loss(t, &losses, None)?.0)
            },
            eps,
            probe,
            1,
        )?,
    );

    // BEV decoder with prompts, one loss component at a time
    for (name, pick) in [("point loss", 0usize), ("classification loss", 1), ("laplace nll", 2)] {
        errors.insert(
            name,
            grad_check_params(
                &store,
                &checked_keys(&store, &["bev.", "inj.", "mq.queries"]),
                |t, p| {
                    let mut rng = ChaCha8Rng::seed_from_u64(11);
                    let prompts = model.layout_prompts(t, p, Some(&layout))?;
                    let layers = model.bev_forward(t, p, sample, &prompts, AttentionMode::Sample, &mut rng)?;
                    let losses = decoder_loss(t, &layers, &sample.targets, &w, 1.0)?;
                    let mut acc = t.constant(&DiffArray::scalar(0.0));
                    for l in &losses {
                        let term = match pick {
                            0 => Some(l.pts.clone()),
                            1 => Some(l.cls.clone()),
                            _ => l.nll.clone(),
                        };
                        if let Some(term) = term {
                            acc = t.add(&acc, &term)?;
                        }
                    }
                    Ok(acc)
                },
                eps,
                probe,
                2,
            )?,
        );
    }

    // whole objective through P2BEV, P2Q, phi_p / phi_sigma / phi_e
    errors.insert(
        "total objective",
        grad_check_params(
            &store,
            &checked_keys(&store, &["bev.", "inj.", "mq.queries"]),
            |t, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(13);
                let prompts = model.layout_prompts(t, p, Some(&layout))?;
                let layers = model.bev_forward(t, p, sample, &prompts, AttentionMode::Sample, &mut rng)?;
                let losses = decoder_loss(t, &layers, &sample.targets, &w, 1.0)?;
                Ok(total_loss(t, &losses, None)?.0)
            },
            eps,
            probe,
            3,
        )?,
    );

    // distillation into the mimic learner against a captured teacher
    let teacher = {
        let mut t = Tape::new();
        model.layout_prompts(&mut t, &store.view(), Some(&layout))?
    };
    errors.insert(
        "distillation",
        grad_check_params(&store, &["mq."], |t, p| model.pool.distill_loss(t, p, &teacher, w.distill), eps, None, 4)?,
    );

    let secs = start.elapsed().as_secs_f64();
    let worst = errors.values().cloned().fold(0.0, f64::max);
    let names: Vec<String> = errors.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(outcome(
        worst < 1e-5 && secs < 30.0,
        format!("max rel err {worst:.2e} in {secs:.1}s ({})", names.join(", ")),
    ))
}

// ---------------------------------------------------------------- 2

fn single_pair() -> MatchResult {
    MatchResult {
        pairs: vec![(0, 0)],
        reversed: vec![false],
        unmatched: vec![],
        cost: 0.0,
    }
}

fn sigma_descent() -> Result<(usize, f64)> {
    let residuals = [0.02, 0.3, 1.0, 2.5, 7.0, 12.0];
    let target = Target {
        class: 0,
        points: vec![[0.0, 0.0]; residuals.len()],
    };
    let pts = DiffArray::new(vec![1, 2 * residuals.len()], residuals.iter().flat_map(|&r| [r, -r]).collect())?;
    let mut store = ParamStore::new();
    store.insert("log_sigma", DiffArray::zeros(&[1, 2 * residuals.len()]));
    let mut adam = Adam::new(0.05, 0);
    let m = single_pair();
    for step in 0..500 {
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let sig = t.exp(p.get("log_sigma")?)?;
        let l = nll_loss(&mut t, &pts, &sig, &m, std::slice::from_ref(&target), 0.05, 1.0)?;
        let g = t.backward(&l)?;
        adam.step(&mut store, &p.gradients(&g));
        let s = store.get("log_sigma").expect("param").values();
        let worst = s
            .iter()
            .enumerate()
            .map(|(k, v)| (v.exp() / residuals[k / 2] - 1.0).abs())
            .fold(0.0, f64::max);
        if worst < 0.02 {
            return Ok((step + 1, worst));
        }
    }
    Ok((500, f64::NAN))
}

/// Mean predicted scale and mean absolute residual per coordinate over the
/// matched elements of `samples`.
fn calibration(model: &Model, store: &ParamStore<f64>, samples: &[Sample]) -> Result<[[f64; 2]; 2]> {
    let mut sum_sigma = [0.0; 2];
    let mut sum_res = [0.0; 2];
    let mut n = 0usize;
    let empty = PvPromptSet::empty(model.cfg.model.dim);
    for s in samples {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = model.bev_forward(&mut t, &store.view(), s, &empty, AttentionMode::Mean, &mut rng)?;
        let last = layers.last().expect("layers");
        let preds = last.predictions();
        let m = hungarian_match(&preds, &s.targets, &model.cfg.loss, 1.0);
        for (&(i, j), &rev) in m.pairs.iter().zip(&m.reversed) {
            let mut gt = s.targets[j].points.clone();
            if rev {
                gt.reverse();
            }
            let sig = preds[i].sigmas.as_ref().expect("uncertainty head");
            for ((p, g), sg) in preds[i].points.iter().zip(&gt).zip(sig) {
                for c in 0..2 {
                    sum_res[c] += (p[c] - g[c]).abs();
                    sum_sigma[c] += sg[c];
                }
                n += 1;
            }
        }
    }
    let n = n.max(1) as f64;
    Ok([[sum_sigma[0] / n, sum_sigma[1] / n], [sum_res[0] / n, sum_res[1] / n]])
}

fn criterion_laplace() -> Result<Outcome> {
    let (steps, worst) = sigma_descent()?;
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.data.scenes = 10;
    cfg.data.val_ratio = 0.2;
    cfg.data.train_degradation = hdmap::scenegen::Degradation::none();
    cfg.flags = Flags::ua_decoder();
    cfg.optim.lr = 2e-3;
    cfg.optim.steps = 3000;
    let data = pipeline::synthesize(&cfg)?;
    let (store, _) = pipeline::train_from_pv(&cfg, &data, &ParamStore::new())?;
    let model = Model::new(&cfg);
    let [sigma, res] = calibration(&model, &store, &data.train)?;
    let ratios = [sigma[0] / res[0], sigma[1] / res[1]];
    let calibrated = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    Ok(outcome(
        steps < 500 && calibrated,
        format!(
            "sigma within 2% after {steps} steps (worst {worst:.4}); toy model mean sigma/|residual| x {:.3}/{:.3} = {:.2}, y {:.3}/{:.3} = {:.2}",
            sigma[0], res[0], ratios[0], sigma[1], res[1], ratios[1]
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn random_rig(rng: &mut ChaCha8Rng, k: usize) -> Result<Camera> {
    let yaw = rng.random_range(-3.1..3.1);
    let pitch = rng.random_range(0.1..0.8);
    let hfov = rng.random_range(60f64..120.0).to_radians();
    let center = [rng.random_range(-1.5..1.5), rng.random_range(-2.0..2.0), rng.random_range(1.2..2.5)];
    let (w, h) = (rng.random_range(96.0..1600.0), rng.random_range(64.0..900.0));
    Camera::looking(format!("cam{k}"), center, yaw, pitch, hfov, w, h)
}

fn criterion_geometry() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let rigs: Vec<Camera> = (0..10).map(|k| random_rig(&mut rng, k)).collect::<Result<_>>()?;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for cam in &rigs {
        let mut n = 0;
        while n < 1000 {
            // a ground point seen by the camera, from a pixel below the horizon
            let px = [rng.random_range(0.0..cam.width), rng.random_range(0.0..cam.height)];
            let Ok(g) = cam.ipm_point(px) else { continue };
            if g[0].abs() > 60.0 || g[1].abs() > 60.0 {
                continue;
            }
            let (pixel, depth) = cam.project_ground_point(g);
            assert!(depth > 0.0);
            let back = cam.ipm_point(pixel)?;
            worst = worst.max(((back[0] - g[0]).powi(2) + (back[1] - g[1]).powi(2)).sqrt());
            n += 1;
        }
        checked += n;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < 1e-9 && secs < 1.0,
        format!("{checked} points over {} rigs, max error {worst:.2e} m in {secs:.3}s", rigs.len()),
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_omega() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for n in 1..=40 {
        for s in [0.01, 1.0, 3.7, 250.0] {
            for (_, w) in omega_weights(&vec![s; n]) {
                worst = worst.max((w - (1.0 / n as f64).exp()).abs());
            }
        }
    }
    let pair = omega_weights(&[1.0, 2.0]);
    let want = [(2.0f64 / 3.0).exp(), (1.0f64 / 3.0).exp()];
    for (got, want) in pair.iter().zip(want) {
        worst = worst.max((got.1 - want).abs());
    }
    Ok(outcome(worst < 1e-12, format!("max deviation {worst:.2e}")))
}

// ---------------------------------------------------------------- 5

/// Greedy matching and the PR envelope worked out step by step.
fn oracle_ap(preds: &[Detection<f64>], gts: &[GroundTruth<f64>], class: usize, tau: f64) -> f64 {
    let mut order: Vec<&Detection<f64>> = preds.iter().filter(|d| d.class == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    let pool: Vec<&GroundTruth<f64>> = gts.iter().filter(|g| g.class == class).collect();
    if pool.is_empty() {
        return if order.is_empty() { 1.0 } else { 0.0 };
    }
    let mut taken = vec![false; pool.len()];
    let mut hits = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (rank, d) in order.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut at = None;
        for (j, g) in pool.iter().enumerate() {
            if taken[j] || g.scene != d.scene {
                continue;
            }
            let c = brute_chamfer(&d.points, &g.points);
            if c < best {
                best = c;
                at = Some(j);
            }
        }
        if let Some(j) = at {
            if best < tau {
                taken[j] = true;
                hits += 1;
            }
        }
        curve.push((hits as f64 / pool.len() as f64, hits as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..RECALL_SAMPLES {
        let level = r as f64 / 100.0;
        let best = curve.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(0.0, f64::max);
        total += best;
    }
    total / RECALL_SAMPLES as f64
}

fn brute_chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let dist = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let side = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (side(a, b) + side(b, a))
}

fn small_line(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let o = [rng.random_range(0..4) as f64 * 0.6, rng.random_range(0..3) as f64 * 0.6];
    let n = rng.random_range(2..5);
    (0..n)
        .map(|i| [o[0] + i as f64 * 0.5 + rng.random_range(-0.3..0.3), o[1] + rng.random_range(-0.3..0.3)])
        .collect()
}

fn criterion_metric() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for np in 0..=5 {
        for ng in 0..=5 {
            for _ in 0..60 {
                let scenes = rng.random_range(1..3);
                let preds: Vec<Detection<f64>> = (0..np)
                    .map(|id| Detection {
                        scene: rng.random_range(0..scenes),
                        id,
                        class: rng.random_range(0..2),
                        // coarse scores so ties occur
                        score: rng.random_range(0..4) as f64 / 4.0,
                        points: small_line(&mut rng),
                    })
                    .collect();
                let gts: Vec<GroundTruth<f64>> = (0..ng)
                    .map(|_| GroundTruth {
                        scene: rng.random_range(0..scenes),
                        class: rng.random_range(0..2),
                        points: small_line(&mut rng),
                    })
                    .collect();
                for class in 0..2 {
                    for tau in THRESHOLDS {
                        cases += 1;
                        if ap_at_threshold(&preds, &gts, class, tau).ap != oracle_ap(&preds, &gts, class, tau) {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let a: Vec<[f64; 2]> = (0..rng.random_range(1..25)).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]).collect();
        let b: Vec<[f64; 2]> = (0..rng.random_range(1..25)).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]).collect();
        worst = worst.max((chamfer_points(&a, &b) - brute_chamfer(&a, &b)).abs());
    }
    Ok(outcome(
        mismatches == 0 && worst < 1e-12,
        format!("{mismatches} AP mismatches over {cases} cases; chamfer max deviation {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------- 6

fn best_by_enumeration(cost: &[Vec<f64>]) -> f64 {
    let (rows, cols) = (cost.len(), cost[0].len());
    fn go(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if r == cost.len() || cost.len() - r < left {
            return;
        }
        // row r unassigned
        go(cost, r + 1, used, left, acc, best);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, r + 1, used, left - 1, acc + cost[r][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cols], rows.min(cols), 0.0, &mut best);
    best
}

fn criterion_matching() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut cases = 0usize;
    let mut bad = 0usize;
    for rows in 1..=5 {
        for cols in 1..=5 {
            for k in 0..100 {
                let cost: Vec<Vec<f64>> = (0..rows)
                    .map(|_| {
                        (0..cols)
                            .map(|_| if k % 3 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..10.0) })
                            .collect()
                    })
                    .collect();
                let pairs = hungarian(&cost);
                let distinct_rows: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
                let distinct_cols: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
                let valid = pairs.len() == rows.min(cols) && distinct_rows.len() == pairs.len() && distinct_cols.len() == pairs.len();
                cases += 1;
                if !valid || (assignment_cost(&cost, &pairs) - best_by_enumeration(&cost)).abs() > 1e-12 {
                    bad += 1;
                }
            }
        }
    }
    Ok(outcome(bad == 0, format!("{bad} of {cases} instances differ from enumeration (all shapes up to 5x5, 100 each)")))
}

// ---------------------------------------------------------------- 7 and 8

struct Ablation {
    rows: Vec<pipeline::AblationRow>,
    secs: f64,
}

fn run_ablation() -> Result<Ablation> {
    let start = Instant::now();
    let rows = pipeline::ablate(&RunConfig::default(), &pipeline::ablation_grid(), &[0, 1, 2])?;
    Ok(Ablation {
        rows,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_ablation(a: &Ablation) -> Outcome {
    let get = |label: &str, seed: u64| {
        a.rows
            .iter()
            .find(|r| r.label == label && r.seed == seed)
            .map_or(f64::NAN, |r| r.map)
    };
    let seeds = [0u64, 1, 2];
    let count = |f: &dyn Fn(u64) -> bool| seeds.iter().filter(|&&s| f(s)).count();
    let ua = count(&|s| get("baseline", s) < get("+ua_decoder", s));
    let pr = count(&|s| get("baseline", s) < get("+ui2dprompt", s));
    let both = count(&|s| get("+both", s) >= get("+ua_decoder", s).max(get("+ui2dprompt", s)));
    let table: Vec<String> = seeds
        .iter()
        .map(|&s| {
            format!(
                "seed {s}: {:.4}/{:.4}/{:.4}/{:.4}",
                get("baseline", s),
                get("+ua_decoder", s),
                get("+ui2dprompt", s),
                get("+both", s)
            )
        })
        .collect();
    outcome(
        ua >= 2 && pr >= 2 && both >= 2 && a.secs < 1800.0,
        format!(
            "baseline<+ua {ua}/3, baseline<+prompt {pr}/3, both>=max {both}/3, {:.0}s; mAP base/ua/prompt/both {}",
            a.secs,
            table.join("; ")
        ),
    )
}

fn criterion_distillation(a: &Ablation) -> Outcome {
    let rows: Vec<&pipeline::AblationRow> = a.rows.iter().filter(|r| r.label == "+both").collect();
    let n = rows.len() as f64;
    let full = rows.iter().map(|r| r.map).sum::<f64>() / n;
    let mimic = rows.iter().map(|r| r.mimic_map.unwrap_or(f64::NAN)).sum::<f64>() / n;
    let full_t: f64 = rows.iter().map(|r| r.infer_seconds).sum();
    let mimic_t: f64 = rows.iter().map(|r| r.mimic_seconds.unwrap_or(f64::NAN)).sum();
    let per_seed: Vec<String> = rows
        .iter()
        .map(|r| format!("seed {} {:.4}/{:.4}", r.seed, r.map, r.mimic_map.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        (full - mimic).abs() <= 0.02 && mimic_t < full_t,
        format!(
            "mean mAP full {full:.4} vs mimic {mimic:.4} (gap {:.2} points); wall {full_t:.2}s vs {mimic_t:.2}s; {}",
            100.0 * (full - mimic).abs(),
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_noop() -> Result<Outcome> {
    let cfg = tiny_config();
    let model = Model::new(&cfg);
    let mut store = model.init_main()?;
    for (k, v) in model.init_pv()?.iter() {
        store.insert(k, v.clone());
    }
    let p = store.view();
    let mut t = Tape::new();
    let empty = PvPromptSet::empty(cfg.model.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bev = DiffArray::new(vec![30, cfg.model.dim], (0..30 * cfg.model.dim).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let q = DiffArray::new(vec![5, cfg.model.dim], (0..5 * cfg.model.dim).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let b2 = model.block.p2bev_inject(&mut t, &p, &bev, &empty)?;
    let q2 = model.block.p2q_inject(&mut t, &p, &q, &empty)?;
    let inject_identity = b2.values() == bev.values() && q2.values() == q.values();

    // disabled prompting versus prompting that never produces a prompt
    let data = pipeline::synthesize(&cfg)?;
    let off = RunConfig {
        flags: Flags::ua_decoder(),
        ..cfg.clone()
    };
    let on = RunConfig {
        flags: Flags::full(),
        ..cfg.clone()
    };
    let off_model = Model::new(&off);
    let on_model = Model::new(&on);
    let mut off_store = off_model.init_main()?;
    let mut on_store = on_model.init_main()?;
    let off_layouts = pipeline::training_layouts(&off_model, &data, &ParamStore::new())?;
    let on_layouts: Vec<Option<PromptLayout>> = data.train.iter().map(|_| Some(PromptLayout::default())).collect();
    let off_log = pipeline::train_main(&off_model, &data, &off_layouts, &mut off_store)?;
    let on_log = pipeline::train_main(&on_model, &data, &on_layouts, &mut on_store)?;
    let same_training = off_store.to_checkpoint() == on_store.to_checkpoint()
        && off_log.iter().zip(&on_log).all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    let mut same_outputs = true;
    for (i, s) in data.val.iter().enumerate() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = off_model.bev_forward(&mut t1, &off_store.view(), s, &empty, AttentionMode::Sample, &mut pipeline::eval_rng(0, i))?;
        let b = on_model.bev_forward(&mut t2, &on_store.view(), s, &empty, AttentionMode::Sample, &mut pipeline::eval_rng(0, i))?;
        let pa = pipeline::predict(&off_model, &ParamStore::new(), &off_store, s, InferenceMode::Full, AttentionMode::Sample, &mut pipeline::eval_rng(0, i))?;
        same_outputs &= a.last().map(|l| l.points.values().to_vec()) == b.last().map(|l| l.points.values().to_vec());
        same_outputs &= pa.elements == a.last().expect("layers").predictions();
    }
    Ok(outcome(
        inject_identity && same_training && same_outputs,
        format!("injection identity {inject_identity}, identical training {same_training}, identical predictions {same_outputs}"),
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_sampling_statistics() -> Result<Outcome> {
    let cfg = tiny_config();
    let model = Model::new(&cfg);
    let store = model.init_main()?;
    let p = store.view();
    let data = pipeline::synthesize(&cfg)?;
    let s = &data.train[0];
    let space = &model.bev_space;
    let mut t = Tape::new();
    let g = model.bev.encode_grid(&mut t, &p, &s.bev, space)?;
    let grid = t.reshape(&g, &[space.grid_h, space.grid_w, cfg.model.dim])?.detach();
    let (q, r) = model.bev.initial_queries(&p)?;
    let m = q.shape()[0];
    let refs: Vec<[f64; 2]> = (0..m)
        .map(|i| {
            let n = [1.0 / (1.0 + (-r.values()[2 * i]).exp()), 1.0 / (1.0 + (-r.values()[2 * i + 1]).exp())];
            space.to_grid(n)
        })
        .collect();
    let pos = DiffArray::zeros(q.shape());
    let key = "bev.layer0.attn";
    let k = cfg.model.samples;
    let run = |mode, rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        let mut t = Tape::new();
        Ok(ua_attention(&mut t, &p, key, &q, &pos, &refs, &grid, k, true, mode, rng)?.values().to_vec())
    };
    let mean_mode = run(AttentionMode::Mean, &mut ChaCha8Rng::seed_from_u64(0))?;
    let dim = mean_mode.len();
    let n = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        draws.push(run(AttentionMode::Sample, &mut rng)?);
    }
    let mut worst_z: f64 = 0.0;
    for c in 0..dim {
        let mean = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        if se > 0.0 {
            worst_z = worst_z.max((mean - mean_mode[c]).abs() / se);
        } else {
            worst_z = worst_z.max(if mean == mean_mode[c] { 0.0 } else { f64::INFINITY });
        }
    }
    // RMS error of the batch mean over disjoint batches of size b
    let sizes = [100usize, 1_000, 10_000, 100_000];
    let mut pts = Vec::new();
    for &b in &sizes {
        let mut sq = 0.0;
        let mut cnt = 0usize;
        for chunk in draws.chunks(b) {
            for c in 0..dim {
                let mean = chunk.iter().map(|d| d[c]).sum::<f64>() / b as f64;
                sq += (mean - mean_mode[c]).powi(2);
                cnt += 1;
            }
        }
        pts.push(((b as f64).ln(), (sq / cnt as f64).sqrt().ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Ok(outcome(
        worst_z < 4.0 && (-0.6..=-0.4).contains(&slope),
        format!("max |mean - mean mode| = {worst_z:.2} SE over {dim} outputs at n = {n}; log RMS error vs log n slope {slope:.3}"),
    ))
}

// ---------------------------------------------------------------- 11

fn criterion_determinism() -> Result<Outcome> {
    let mut cfg = RunConfig::quick();
    cfg.optim.steps = 40;
    cfg.optim.pv_steps = 40;
    let dir = tempfile::tempdir()?;
    let mut artifacts: Vec<[Vec<u8>; 3]> = Vec::new();
    for run in 0..2 {
        let data = pipeline::synthesize(&cfg)?;
        let tr = pipeline::train_all(&cfg, &data)?;
        let ckpt = dir.path().join(format!("ckpt{run}.json"));
        pipeline::save_checkpoint(&ckpt, &cfg, &tr.pv_store, &tr.store)?;
        let model = Model::new(&cfg);
        let ev = pipeline::evaluate(&model, &tr.pv_store, &tr.store, &data.val, InferenceMode::Full, AttentionMode::Sample)?;
        artifacts.push([
            std::fs::read(&ckpt)?,
            serde_json::to_vec(&ev.predictions)?,
            ev.result.to_json()?.into_bytes(),
        ]);
    }
    let same: Vec<bool> = (0..3).map(|k| artifacts[0][k] == artifacts[1][k]).collect();
    Ok(outcome(
        same.iter().all(|&b| b),
        format!("checkpoint {}, predictions {}, metrics {}", same[0], same[1], same[2]),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, r: Result<Outcome>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        say(&format!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((id, name, o));
    };
    record(1, "gradient integrity", criterion_gradients());
    record(2, "laplace calibration", criterion_laplace());
    record(3, "geometry round trip", criterion_geometry());
    record(4, "omega closed forms", criterion_omega());
    record(5, "metric oracle", criterion_metric());
    record(6, "matching oracle", criterion_matching());
    match run_ablation() {
        Ok(a) => {
            record(7, "directional ablation", Ok(criterion_ablation(&a)));
            record(8, "distillation fidelity", Ok(criterion_distillation(&a)));
        }
        Err(e) => {
            record(7, "directional ablation", Err(hdmap::Error::Invalid(e.to_string())));
            record(8, "distillation fidelity", Err(e));
        }
    }
    record(9, "injection no-op identity", criterion_noop());
    record(10, "sampling statistics", criterion_sampling_statistics());
    record(11, "determinism", criterion_determinism());
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    say(&format!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
