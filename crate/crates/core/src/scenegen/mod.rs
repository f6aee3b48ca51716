//! Synthetic vectorized road scenes: map elements, camera rigs, rasterized
//! proxy features in BEV and image space, and geographically disjoint splits.

mod raster;
mod split;
mod template;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample_polyline, CameraModel, Ego, Polyline2D};

pub use raster::{
    pv_ground_truth, rasterize_features, BevLayout, Degradation, DegradationMode, FeatureGrids, PvElement, PvGrid,
    RasterConfig,
};
pub use split::{city_of, overlap_ratio, split_geo, SplitManifest, SplitStrategy, OVERLAP_RADIUS};
pub use template::{generate_dataset, generate_scene, standard_rig, GenParams, RoadTemplate};

/// Perception range in the ego frame, meters: x ∈ [-15, 15], y ∈ [-30, 30].
pub const RANGE_X: [f64; 2] = [-15.0, 15.0];
pub const RANGE_Y: [f64; 2] = [-30.0, 30.0];

/// Default number of points per element.
pub const DEFAULT_POINTS: usize = 20;

/// Tile edge used to derive region ids from world offsets.
pub const DEFAULT_TILE: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    PedCrossing,
    Divider,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::PedCrossing, MapClass::Divider, MapClass::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }
}

/// Classed polyline in the ego frame with a fixed point count.
#[derive(Clone, Debug, PartialEq)]
pub struct MapElement {
    pub id: usize,
    pub class: MapClass,
    pub points: Polyline2D<f64, Ego>,
}

pub fn in_range(p: [f64; 2]) -> bool {
    let eps = 1e-9;
    p[0] >= RANGE_X[0] - eps && p[0] <= RANGE_X[1] + eps && p[1] >= RANGE_Y[0] - eps && p[1] <= RANGE_Y[1] + eps
}

/// Ego point → normalized `[0, 1]²` over the perception range.
pub fn normalize_ego(p: [f64; 2]) -> [f64; 2] {
    [
        (p[0] - RANGE_X[0]) / (RANGE_X[1] - RANGE_X[0]),
        (p[1] - RANGE_Y[0]) / (RANGE_Y[1] - RANGE_Y[0]),
    ]
}

pub fn denormalize_ego(p: [f64; 2]) -> [f64; 2] {
    [
        RANGE_X[0] + p[0] * (RANGE_X[1] - RANGE_X[0]),
        RANGE_Y[0] + p[1] * (RANGE_Y[1] - RANGE_Y[0]),
    ]
}

/// Region id of a world position under a square tiling.
pub fn region_of(world: [f64; 2], tile: f64) -> String {
    let i = (world[0] / tile).floor() as i64;
    let j = (world[1] / tile).floor() as i64;
    format!("tile_{i}_{j}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub region_id: String,
    pub world_offset: [f64; 2],
    pub cameras: Vec<CameraModel<f64>>,
    pub elements: Vec<MapElement>,
}

#[derive(Serialize, Deserialize)]
struct ElementJson {
    class: MapClass,
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    scene_id: String,
    region_id: String,
    world_offset: [f64; 2],
    cameras: Vec<CameraModel<f64>>,
    elements: Vec<ElementJson>,
}

impl Scene {
    /// Checks the scene-level invariants.
    pub fn validate(&self, tile: f64) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Invalid(format!("scene {} has no cameras", self.scene_id)));
        }
        if self.elements.is_empty() {
            return Err(Error::Invalid(format!("scene {} has no elements", self.scene_id)));
        }
        if region_of(self.world_offset, tile) != self.region_id {
            return Err(Error::Invalid(format!(
                "scene {}: region {} does not match world offset {:?}",
                self.scene_id, self.region_id, self.world_offset
            )));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn count_of(&self, class: MapClass) -> usize {
        self.elements.iter().filter(|e| e.class == class).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let js = SceneJson {
            scene_id: self.scene_id.clone(),
            region_id: self.region_id.clone(),
            world_offset: self.world_offset,
            cameras: self.cameras.clone(),
            elements: self
                .elements
                .iter()
                .map(|e| ElementJson {
                    class: e.class,
                    points: e.points.points().to_vec(),
                    id: Some(e.id),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&js)?)
    }

    /// Parses the scene schema. Elements with a different point count are
    /// resampled to `n_points`.
    pub fn from_json(text: &str, n_points: usize) -> Result<Self> {
        let js: SceneJson = serde_json::from_str(text)?;
        let mut elements = Vec::with_capacity(js.elements.len());
        for (i, e) in js.elements.into_iter().enumerate() {
            let line = Polyline2D::<f64, Ego>::new(e.points)?;
            let line = if line.len() == n_points {
                line
            } else {
                resample_polyline(&line, n_points)?
            };
            elements.push(MapElement {
                id: e.id.unwrap_or(i),
                class: e.class,
                points: line,
            });
        }
        for cam in &js.cameras {
            cam.validate()?;
        }
        Ok(Self {
            scene_id: js.scene_id,
            region_id: js.region_id,
            world_offset: js.world_offset,
            cameras: js.cameras,
            elements,
        })
    }
}
