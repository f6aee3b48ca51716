use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MapClass, Scene, RANGE_X, RANGE_Y};
use crate::error::Result;
use crate::geometry::{point_segment_distance, resample_polyline, CameraModel, Image, Polyline2D, DEPTH_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    /// Zero every channel of a random subset of cells.
    Cells,
    /// Zero every channel inside random square patches until the fraction is
    /// covered.
    Patches,
    /// Add Gaussian noise of `strength` meters to the distance channels of a
    /// random subset of cells.
    Perturb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub fraction: f64,
    pub mode: DegradationMode,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
}

fn default_patch() -> usize {
    5
}

fn default_strength() -> f64 {
    3.0
}

impl Degradation {
    pub fn none() -> Self {
        Self::cells(0.0)
    }

    pub fn patches(fraction: f64) -> Self {
        Self {
            mode: DegradationMode::Patches,
            ..Self::cells(fraction)
        }
    }

    pub fn cells(fraction: f64) -> Self {
        Self {
            fraction,
            mode: DegradationMode::Cells,
            patch: default_patch(),
            strength: default_strength(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// BEV rows along x.
    pub bev_h: usize,
    /// BEV columns along y.
    pub bev_w: usize,
    pub channels: usize,
    /// Distances saturate at this value, meters.
    pub bev_clamp: f64,
    pub pv_stride: usize,
    pub pv_clamp: f64,
    pub noise_std: f64,
    pub degradation: Degradation,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            bev_h: 25,
            bev_w: 50,
            channels: 32,
            bev_clamp: 5.0,
            pv_stride: 8,
            pv_clamp: 24.0,
            noise_std: 1.0,
            degradation: Degradation::none(),
        }
    }
}

/// Metric layout of the BEV grid. Row index runs along x, column index along
/// y, and the grid covers the perception range exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevLayout {
    pub h: usize,
    pub w: usize,
}

impl BevLayout {
    pub fn cell_size(&self) -> [f64; 2] {
        [
            (RANGE_X[1] - RANGE_X[0]) / self.h as f64,
            (RANGE_Y[1] - RANGE_Y[0]) / self.w as f64,
        ]
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        let [dx, dy] = self.cell_size();
        [RANGE_X[0] + (r as f64 + 0.5) * dx, RANGE_Y[0] + (c as f64 + 0.5) * dy]
    }

    /// Ego point → fractional `(col, row)` grid coordinates, integer values at
    /// cell centers.
    pub fn grid_coords(&self, p: [f64; 2]) -> [f64; 2] {
        let [dx, dy] = self.cell_size();
        [(p[1] - RANGE_Y[0]) / dy - 0.5, (p[0] - RANGE_X[0]) / dx - 0.5]
    }

    /// Normalized `[0, 1]²` point → grid coordinates.
    pub fn normalized_to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        [p[1] * self.w as f64 - 0.5, p[0] * self.h as f64 - 0.5]
    }

    pub fn extent(&self) -> [[f64; 2]; 2] {
        [RANGE_X, RANGE_Y]
    }
}

/// Feature grid for one camera. Cell `(r, c)` covers pixels centered at
/// `((c + 0.5)·stride, (r + 0.5)·stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PvGrid {
    pub camera: String,
    pub h: usize,
    pub w: usize,
    pub stride: f64,
    /// Row-major `h × w × channels`.
    pub values: Vec<f64>,
}

impl PvGrid {
    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [(c as f64 + 0.5) * self.stride, (r as f64 + 0.5) * self.stride]
    }

    /// Pixel → fractional `(col, row)` grid coordinates.
    pub fn grid_coords(&self, px: [f64; 2]) -> [f64; 2] {
        [px[0] / self.stride - 0.5, px[1] / self.stride - 0.5]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrids {
    pub layout: BevLayout,
    pub channels: usize,
    /// Row-major `h × w × channels`.
    pub bev: Vec<f64>,
    pub pv: Vec<PvGrid>,
    /// Cells touched by degradation, row-major `h × w`.
    pub degraded: Vec<bool>,
}

impl FeatureGrids {
    pub fn bev_at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.bev[(r * self.layout.w + c) * self.channels + ch]
    }

    pub fn all_finite(&self) -> bool {
        self.bev.iter().all(|v| v.is_finite()) && self.pv.iter().all(|g| g.values.iter().all(|v| v.is_finite()))
    }
}

/// Element as seen by one camera, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PvElement {
    pub element_id: usize,
    pub class: MapClass,
    pub points: Polyline2D<f64, Image>,
}

/// Signed distance from `p` to the nearest segment of a polyline set, the
/// sign telling which side of that segment the point lies on.
fn signed_nearest(p: [f64; 2], lines: &[&[[f64; 2]]]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for pts in lines {
        for w in pts.windows(2) {
            let d = point_segment_distance(p, w[0], w[1]);
            if best.is_none_or(|(bd, _)| d < bd) {
                let cross = (w[1][0] - w[0][0]) * (p[1] - w[0][1]) - (w[1][1] - w[0][1]) * (p[0] - w[0][0]);
                best = Some((d, if cross < 0.0 { -1.0 } else { 1.0 }));
            }
        }
    }
    best.map(|(d, s)| s * d)
}

fn nearest(p: [f64; 2], lines: &[Vec<[f64; 2]>]) -> Option<f64> {
    lines
        .iter()
        .flat_map(|pts| pts.windows(2).map(move |w| point_segment_distance(p, w[0], w[1])))
        .reduce(f64::min)
}

/// Projects a densified ego polyline and splits it into runs of points in
/// front of the camera and inside the image.
fn visible_runs(points: &[[f64; 2]], cam: &CameraModel<f64>) -> Vec<Vec<[f64; 2]>> {
    let mut runs = Vec::new();
    let mut cur = Vec::new();
    let sub = 8;
    for (i, w) in points.windows(2).enumerate() {
        let last = i + 2 == points.len();
        for k in 0..=sub {
            if k == sub && !last {
                continue;
            }
            let t = k as f64 / sub as f64;
            let p = [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
            let (px, depth) = cam.project_ground_point(p);
            if depth > DEPTH_MIN && px[0].is_finite() && px[1].is_finite() && cam.contains_pixel(px) {
                cur.push(px);
            } else if !cur.is_empty() {
                runs.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs.retain(|r| r.len() >= 2);
    runs
}

/// Ground-truth elements of one camera: the longest visible run of each
/// element, resampled to `n_points` in pixel space. Runs shorter than
/// `min_pixels` are dropped.
pub fn pv_ground_truth(scene: &Scene, camera: usize, n_points: usize, min_pixels: f64) -> Result<Vec<PvElement>> {
    let cam = &scene.cameras[camera];
    let mut out = Vec::new();
    for e in &scene.elements {
        let runs = visible_runs(e.points.points(), cam);
        let best = runs.into_iter().max_by(|a, b| run_length(a).total_cmp(&run_length(b)));
        let Some(run) = best else { continue };
        if run_length(&run) < min_pixels {
            continue;
        }
        let line = Polyline2D::<f64, Image>::new(run)?;
        out.push(PvElement {
            element_id: e.id,
            class: e.class,
            points: resample_polyline(&line, n_points)?,
        });
    }
    Ok(out)
}

fn run_length(r: &[[f64; 2]]) -> f64 {
    r.windows(2).map(|w| crate::geometry::dist(w[0], w[1])).sum()
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

fn degrade(bev: &mut [f64], degraded: &mut [bool], layout: BevLayout, channels: usize, cfg: &Degradation, rng: &mut ChaCha8Rng) {
    let cells = layout.h * layout.w;
    let target = (cfg.fraction.clamp(0.0, 1.0) * cells as f64).round() as usize;
    if target == 0 {
        return;
    }
    match cfg.mode {
        DegradationMode::Cells | DegradationMode::Perturb => {
            let mut order: Vec<usize> = (0..cells).collect();
            for i in 0..target {
                let j = rng.random_range(i..cells);
                order.swap(i, j);
            }
            for &cell in &order[..target] {
                degraded[cell] = true;
                let v = &mut bev[cell * channels..(cell + 1) * channels];
                if cfg.mode == DegradationMode::Cells {
                    v.fill(0.0);
                } else {
                    for x in v.iter_mut().take(3) {
                        *x += gaussian(rng, cfg.strength);
                    }
                }
            }
        }
        DegradationMode::Patches => {
            let p = cfg.patch.max(1);
            let mut covered = 0;
            while covered < target {
                let r0 = rng.random_range(0..layout.h.saturating_sub(p - 1).max(1));
                let c0 = rng.random_range(0..layout.w.saturating_sub(p - 1).max(1));
                for r in r0..(r0 + p).min(layout.h) {
                    for c in c0..(c0 + p).min(layout.w) {
                        let cell = r * layout.w + c;
                        if !degraded[cell] && covered < target {
                            degraded[cell] = true;
                            covered += 1;
                            bev[cell * channels..(cell + 1) * channels].fill(0.0);
                        }
                    }
                }
            }
        }
    }
}

/// BEV and per-camera feature grids for a scene. Pure in
/// `(scene, noise_seed, cfg)`.
pub fn rasterize_features(scene: &Scene, noise_seed: u64, cfg: &RasterConfig) -> FeatureGrids {
    let layout = BevLayout {
        h: cfg.bev_h,
        w: cfg.bev_w,
    };
    let channels = cfg.channels.max(3);
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        r.set_stream(k);
        r
    };
    let mut rng = stream(0);

    let by_class: Vec<Vec<&[[f64; 2]]>> = MapClass::ALL
        .iter()
        .map(|&c| {
            scene
                .elements
                .iter()
                .filter(|e| e.class == c)
                .map(|e| e.points.points())
                .collect()
        })
        .collect();
    let mut bev = vec![0.0; layout.h * layout.w * channels];
    for r in 0..layout.h {
        for c in 0..layout.w {
            let p = layout.cell_center(r, c);
            let base = (r * layout.w + c) * channels;
            for (k, lines) in by_class.iter().enumerate() {
                bev[base + k] = signed_nearest(p, lines).map_or(cfg.bev_clamp, |d| d.clamp(-cfg.bev_clamp, cfg.bev_clamp));
            }
            for v in &mut bev[base + 3..base + channels] {
                *v = gaussian(&mut rng, cfg.noise_std);
            }
        }
    }
    let mut degraded = vec![false; layout.h * layout.w];
    degrade(&mut bev, &mut degraded, layout, channels, &cfg.degradation, &mut stream(1));
    let mut rng = stream(2);

    let stride = cfg.pv_stride.max(1) as f64;
    let pv = scene
        .cameras
        .iter()
        .map(|cam| {
            let h = (cam.height / stride).floor() as usize;
            let w = (cam.width / stride).floor() as usize;
            let runs: Vec<Vec<Vec<[f64; 2]>>> = MapClass::ALL
                .iter()
                .map(|&cls| {
                    scene
                        .elements
                        .iter()
                        .filter(|e| e.class == cls)
                        .flat_map(|e| visible_runs(e.points.points(), cam))
                        .collect()
                })
                .collect();
            let mut values = vec![0.0; h * w * channels];
            for r in 0..h {
                for c in 0..w {
                    let px = [(c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride];
                    let base = (r * w + c) * channels;
                    for (k, lines) in runs.iter().enumerate() {
                        values[base + k] = nearest(px, lines).map_or(cfg.pv_clamp, |d| d.min(cfg.pv_clamp));
                    }
                    for v in &mut values[base + 3..base + channels] {
                        *v = gaussian(&mut rng, cfg.noise_std);
                    }
                }
            }
            PvGrid {
                camera: cam.name.clone(),
                h,
                w,
                stride,
                values,
            }
        })
        .collect();

    FeatureGrids {
        layout,
        channels,
        bev,
        pv,
        degraded,
    }
}
