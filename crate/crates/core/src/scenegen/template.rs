use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{in_range, region_of, MapClass, MapElement, Scene, DEFAULT_POINTS, DEFAULT_TILE, RANGE_Y};
use crate::error::{Error, Result};
use crate::geometry::{dist, resample_polyline, CameraModel, Ego, Polyline2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoadTemplate {
    /// Two boundaries and two dividers along a straight road, with an
    /// optional crossing.
    #[serde(rename = "straight-2-lane")]
    Straight2Lane,
    /// Same layout following a circular arc.
    Curved,
    /// Four-way junction with broken boundaries and crossings on the main road.
    Intersection,
}

/// Scene-generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub n_points: usize,
    /// Sampling weights for straight, curved and intersection templates.
    pub template_weights: [f64; 3],
    /// Forces one template regardless of the weights.
    pub template: Option<RoadTemplate>,
    pub lane_width: [f64; 2],
    pub lateral_offset: f64,
    pub heading_jitter_deg: f64,
    pub curve_radius: [f64; 2],
    /// Probability of a crossing on straight roads.
    pub crossing_prob: f64,
    /// Amplitude of the smooth lateral wobble added to every line, meters.
    pub wobble: f64,
    pub min_length: f64,
    pub tile: f64,
    /// World tiling is `world_tiles × world_tiles` tiles.
    pub world_tiles: usize,
    /// Ego positions stay this far inside their tile.
    pub tile_margin: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_points: DEFAULT_POINTS,
            template_weights: [0.4, 0.3, 0.3],
            template: None,
            lane_width: [3.0, 3.8],
            lateral_offset: 2.0,
            heading_jitter_deg: 5.0,
            curve_radius: [100.0, 250.0],
            crossing_prob: 0.3,
            wobble: 0.15,
            min_length: 3.0,
            tile: DEFAULT_TILE,
            world_tiles: 4,
            tile_margin: 20.0,
        }
    }
}

impl GenParams {
    /// Expected fraction of elements per class implied by the template
    /// weights (ped, divider, boundary).
    pub fn expected_class_mixture(&self) -> [f64; 3] {
        let w = self.normalized_weights();
        let per_template = [
            [self.crossing_prob, 2.0, 2.0],
            [0.0, 2.0, 2.0],
            [4.0, 4.0, 8.0],
        ];
        let mut expected = [0.0; 3];
        for (t, counts) in per_template.iter().enumerate() {
            for c in 0..3 {
                expected[c] += w[t] * counts[c];
            }
        }
        let total: f64 = expected.iter().sum();
        expected.map(|v| v / total)
    }

    fn normalized_weights(&self) -> [f64; 3] {
        match self.template {
            Some(RoadTemplate::Straight2Lane) => [1.0, 0.0, 0.0],
            Some(RoadTemplate::Curved) => [0.0, 1.0, 0.0],
            Some(RoadTemplate::Intersection) => [0.0, 0.0, 1.0],
            None => {
                let s: f64 = self.template_weights.iter().sum();
                self.template_weights.map(|v| v / s)
            }
        }
    }
}

/// Four ground-looking cameras (front, rear, left, right) on a 1.8 m mast.
pub fn standard_rig() -> Vec<CameraModel<f64>> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let (w, h) = (128.0, 96.0);
    let pitch = 0.4;
    let hfov = 100f64.to_radians();
    [
        ("front", [0.0, 1.0, 1.8], FRAC_PI_2),
        ("rear", [0.0, -1.0, 1.8], -FRAC_PI_2),
        ("left", [-0.8, 0.0, 1.8], PI),
        ("right", [0.8, 0.0, 1.8], 0.0),
    ]
    .into_iter()
    .map(|(name, c, yaw)| CameraModel::looking(name, c, yaw, pitch, hfov, w, h).expect("valid rig"))
    .collect()
}

struct Road {
    center_x: f64,
    heading: f64,
}

impl Road {
    /// Point at lateral offset `lat` and longitudinal position `s` along a
    /// straight road.
    fn at(&self, lat: f64, s: f64) -> [f64; 2] {
        let (sin, cos) = self.heading.sin_cos();
        [self.center_x + lat * cos + s * sin, lat * -sin + s * cos]
    }
}

struct Wobble {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wobble {
    fn sample(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        Self {
            amp: rng.random_range(0.0..=amp.max(0.0)),
            freq: rng.random_range(0.02..0.06),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, s: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * self.freq * s + self.phase).sin()
    }
}

fn dense_line(from: f64, to: f64, f: impl Fn(f64) -> [f64; 2]) -> Vec<[f64; 2]> {
    let steps = ((to - from).abs() / 0.25).ceil().max(2.0) as usize;
    (0..=steps)
        .map(|i| f(from + (to - from) * i as f64 / steps as f64))
        .collect()
}

/// Clips a dense polyline to the perception range, keeping the longest
/// inside run.
fn clip_to_range(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut best: Vec<[f64; 2]> = Vec::new();
    let mut cur: Vec<[f64; 2]> = Vec::new();
    let length = |v: &[[f64; 2]]| v.windows(2).map(|w| dist(w[0], w[1])).sum::<f64>();
    for &p in pts {
        if in_range(p) {
            cur.push(p);
        } else if !cur.is_empty() {
            if length(&cur) > length(&best) {
                best = std::mem::take(&mut cur);
            } else {
                cur.clear();
            }
        }
    }
    if length(&cur) > length(&best) {
        best = cur;
    }
    best
}

/// Resamples until the spacing is uniform along the polyline itself, so the
/// element is a fixed point of [`resample_polyline`].
fn settle(line: Polyline2D<f64, Ego>, n: usize) -> Result<Polyline2D<f64, Ego>> {
    let mut cur = resample_polyline(&line, n)?;
    for _ in 0..200 {
        let next = resample_polyline(&cur, n)?;
        let moved = cur
            .points()
            .iter()
            .zip(next.points())
            .map(|(a, b)| dist(*a, *b))
            .fold(0.0, f64::max);
        cur = next;
        if moved < 1e-14 {
            break;
        }
    }
    Ok(cur)
}

struct Builder {
    n: usize,
    min_length: f64,
    elements: Vec<MapElement>,
}

impl Builder {
    fn push(&mut self, class: MapClass, dense: Vec<[f64; 2]>) -> Result<()> {
        let clipped = clip_to_range(&dense);
        if clipped.len() < 2 {
            return Ok(());
        }
        let line = Polyline2D::new(clipped)?;
        if line.arc_length() < self.min_length {
            return Ok(());
        }
        let points = settle(line, self.n)?;
        self.elements.push(MapElement {
            id: self.elements.len(),
            class,
            points,
        });
        Ok(())
    }
}

fn pick_template(rng: &mut ChaCha8Rng, params: &GenParams) -> RoadTemplate {
    let w = params.normalized_weights();
    let u: f64 = rng.random();
    if u < w[0] {
        RoadTemplate::Straight2Lane
    } else if u < w[0] + w[1] {
        RoadTemplate::Curved
    } else {
        RoadTemplate::Intersection
    }
}

fn build_elements(rng: &mut ChaCha8Rng, params: &GenParams, template: RoadTemplate) -> Result<Vec<MapElement>> {
    let mut b = Builder {
        n: params.n_points,
        min_length: params.min_length,
        elements: Vec::new(),
    };
    let lane = rng.random_range(params.lane_width[0]..=params.lane_width[1]);
    let road = Road {
        center_x: rng.random_range(-params.lateral_offset..=params.lateral_offset),
        heading: rng
            .random_range(-params.heading_jitter_deg..=params.heading_jitter_deg)
            .to_radians(),
    };
    let span = RANGE_Y[1] - RANGE_Y[0];
    match template {
        RoadTemplate::Straight2Lane | RoadTemplate::Curved => {
            let offsets = [
                (-1.5 * lane, MapClass::Boundary),
                (-0.5 * lane, MapClass::Divider),
                (0.5 * lane, MapClass::Divider),
                (1.5 * lane, MapClass::Boundary),
            ];
            let curvature = if template == RoadTemplate::Curved {
                let r = rng.random_range(params.curve_radius[0]..=params.curve_radius[1]);
                if rng.random_bool(0.5) {
                    1.0 / r
                } else {
                    -1.0 / r
                }
            } else {
                0.0
            };
            for (lat, class) in offsets {
                let wob = Wobble::sample(rng, params.wobble);
                let f = |s: f64| {
                    // concentric circles around (r, 0) in road coordinates
                    let (bend_lat, bend_s) = if curvature == 0.0 {
                        (lat, s)
                    } else {
                        let r = 1.0 / curvature;
                        let ang = s * curvature;
                        let rad = r - lat;
                        (r - rad * ang.cos(), rad * ang.sin())
                    };
                    road.at(bend_lat + wob.at(s), bend_s)
                };
                b.push(class, dense_line(-span, span, f))?;
            }
            if template == RoadTemplate::Straight2Lane && rng.random_bool(params.crossing_prob) {
                let y = rng.random_range(-20.0..=20.0);
                b.push(MapClass::PedCrossing, dense_line(-1.5 * lane, 1.5 * lane, |l| road.at(l, y)))?;
            }
        }
        RoadTemplate::Intersection => {
            let half = lane;
            let cross_y = rng.random_range(-12.0..=12.0);
            let cross_half = rng.random_range(params.lane_width[0]..=params.lane_width[1]);
            let gap = [cross_y - cross_half, cross_y + cross_half];
            let far = span;
            for lat in [-half, half] {
                let wob = Wobble::sample(rng, params.wobble);
                b.push(MapClass::Boundary, dense_line(-far, gap[0], |s| road.at(lat + wob.at(s), s)))?;
                b.push(MapClass::Boundary, dense_line(gap[1], far, |s| road.at(lat + wob.at(s), s)))?;
            }
            let wob = Wobble::sample(rng, params.wobble);
            b.push(MapClass::Divider, dense_line(-far, gap[0] - 2.0, |s| road.at(wob.at(s), s)))?;
            b.push(MapClass::Divider, dense_line(gap[1] + 2.0, far, |s| road.at(wob.at(s), s)))?;
            // cross road, running across the main road
            for side in [-1.0, 1.0] {
                for edge in [gap[0], gap[1]] {
                    let wob = Wobble::sample(rng, params.wobble);
                    b.push(MapClass::Boundary, dense_line(side * half, side * far, |l| road.at(l, edge + wob.at(l))))?;
                }
                b.push(
                    MapClass::Divider,
                    dense_line(side * (half + 2.0), side * far, |l| road.at(l, cross_y)),
                )?;
            }
            for y in [gap[0] - 1.5, gap[1] + 1.5] {
                b.push(MapClass::PedCrossing, dense_line(-half, half, |l| road.at(l, y)))?;
            }
            for side in [-1.0, 1.0] {
                let l = side * (half + 1.5);
                b.push(MapClass::PedCrossing, dense_line(gap[0], gap[1], |s| road.at(l, s)))?;
            }
        }
    }
    Ok(b.elements)
}

/// Deterministic scene from a seed. Templates, geometry, world position and
/// region id all derive from `seed`.
pub fn generate_scene(seed: u64, params: &GenParams) -> Result<Scene> {
    if params.n_points < 2 {
        return Err(Error::Generation(format!("n_points {} < 2", params.n_points)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = match params.template {
        Some(t) => t,
        None => pick_template(&mut rng, params),
    };
    let elements = build_elements(&mut rng, params, template)?;
    if elements.is_empty() {
        return Err(Error::Generation(format!("seed {seed}: no element survived clipping")));
    }
    let tiles = params.world_tiles.max(1);
    let (ti, tj) = (rng.random_range(0..tiles), rng.random_range(0..tiles));
    let margin = params.tile_margin.min(params.tile / 2.0 - 1e-6);
    let world_offset = [
        ti as f64 * params.tile + rng.random_range(margin..params.tile - margin),
        tj as f64 * params.tile + rng.random_range(margin..params.tile - margin),
    ];
    Ok(Scene {
        scene_id: format!("scene_{seed:08}"),
        region_id: region_of(world_offset, params.tile),
        world_offset,
        cameras: standard_rig(),
        elements,
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn generate_dataset(seed: u64, count: usize, params: &GenParams) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), params))
        .collect()
}
