//! Camera models, ego ↔ image transfer on a flat ground plane, and polyline
//! utilities.

mod camera;
mod polyline;

pub use camera::{ipm_pv_to_ego, project_ego_to_pv, CameraModel, Projection, DEPTH_MIN};
pub use polyline::{point_segment_distance, resample_polyline, Ego, Frame, Image, Polyline2D};

pub(crate) use polyline::dist;
