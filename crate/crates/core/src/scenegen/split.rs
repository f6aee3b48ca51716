use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::dist;

/// Val ego locations closer than this to any train location count as
/// overlapping, meters.
pub const OVERLAP_RADIUS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    #[serde(rename = "region-based")]
    Region,
    #[serde(rename = "city-based")]
    City,
    #[serde(rename = "random")]
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub overlap_ratio: f64,
    pub strategy: SplitStrategy,
}

/// City label: a `group × group` block of tiles.
pub fn city_of(world: [f64; 2], tile: f64, group: usize) -> String {
    let span = tile * group.max(1) as f64;
    format!("city_{}_{}", (world[0] / span).floor() as i64, (world[1] / span).floor() as i64)
}

/// Fraction of `val` locations with some `train` location within
/// [`OVERLAP_RADIUS`]. Uses a spatial hash with radius-sized buckets.
pub fn overlap_ratio(train: &[[f64; 2]], val: &[[f64; 2]]) -> f64 {
    if val.is_empty() {
        return 0.0;
    }
    let key = |p: [f64; 2]| ((p[0] / OVERLAP_RADIUS).floor() as i64, (p[1] / OVERLAP_RADIUS).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<[f64; 2]>> = HashMap::new();
    for &p in train {
        buckets.entry(key(p)).or_default().push(p);
    }
    let hits = val
        .iter()
        .filter(|&&v| {
            let (i, j) = key(v);
            (-1..=1).any(|di| {
                (-1..=1).any(|dj| {
                    buckets
                        .get(&(i + di, j + dj))
                        .is_some_and(|b| b.iter().any(|&t| dist(t, v) <= OVERLAP_RADIUS))
                })
            })
        })
        .count();
    hits as f64 / val.len() as f64
}

/// Splits scenes into train and val. `val_ratio` is the target fraction of
/// val scenes; geo strategies assign whole groups, so the realized fraction
/// is the closest reachable one with both sides non-empty.
pub fn split_geo(scenes: &[Scene], strategy: SplitStrategy, val_ratio: f64, tile: f64, seed: u64) -> Result<SplitManifest> {
    if scenes.len() < 2 {
        return Err(Error::Split(format!("need at least 2 scenes, got {}", scenes.len())));
    }
    if !(0.0..1.0).contains(&val_ratio) || val_ratio <= 0.0 {
        return Err(Error::Split(format!("val ratio {val_ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val_target = ((val_ratio * scenes.len() as f64).round() as usize).clamp(1, scenes.len() - 1);
    let mut is_val = vec![false; scenes.len()];
    match strategy {
        SplitStrategy::Random => {
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            order.shuffle(&mut rng);
            for &i in &order[..n_val_target] {
                is_val[i] = true;
            }
        }
        SplitStrategy::Region | SplitStrategy::City => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, s) in scenes.iter().enumerate() {
                let g = match strategy {
                    SplitStrategy::Region => s.region_id.clone(),
                    _ => city_of(s.world_offset, tile, 2),
                };
                groups.entry(g).or_default().push(i);
            }
            if groups.len() < 2 {
                return Err(Error::Split(format!(
                    "{strategy:?} split needs at least 2 distinct groups, found {}",
                    groups.len()
                )));
            }
            let mut order: Vec<Vec<usize>> = groups.into_values().collect();
            order.shuffle(&mut rng);
            let mut taken = 0;
            for g in &order[..order.len() - 1] {
                if taken >= n_val_target {
                    break;
                }
                taken += g.len();
                for &i in g {
                    is_val[i] = true;
                }
            }
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut train_pos = Vec::new();
    let mut val_pos = Vec::new();
    for (s, &v) in scenes.iter().zip(&is_val) {
        if v {
            val.push(s.scene_id.clone());
            val_pos.push(s.world_offset);
        } else {
            train.push(s.scene_id.clone());
            train_pos.push(s.world_offset);
        }
    }
    Ok(SplitManifest {
        train,
        val,
        overlap_ratio: overlap_ratio(&train_pos, &val_pos),
        strategy,
    })
}
