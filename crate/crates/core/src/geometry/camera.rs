use serde::{Deserialize, Serialize};

use super::polyline::{Ego, Image, Polyline2D};
use crate::error::{Error, Result};
use crate::instrument::{self, Stage};
use crate::scalar::Scalar;

/// Points closer than this to the camera plane are never considered visible.
pub const DEPTH_MIN: f64 = 0.1;

/// Pinhole camera: intrinsics `k`, rigid ego→camera transform, image size.
///
/// Camera axes follow the usual vision convention: `x` right, `y` down, `z`
/// along the optical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<S> {
    pub name: String,
    #[serde(rename = "K")]
    pub k: [[S; 3]; 3],
    #[serde(rename = "T_ego2cam")]
    pub t_ego2cam: [[S; 4]; 4],
    pub width: S,
    pub height: S,
}

/// Result of projecting ego ground points into an image.
#[derive(Clone, Debug)]
pub struct Projection<S> {
    /// Pixel coordinates in input order; meaningless where `valid` is false.
    pub pixels: Vec<[S; 2]>,
    /// Positive depth beyond [`DEPTH_MIN`] and inside the image bounds.
    pub valid: Vec<bool>,
    pub depths: Vec<S>,
}

impl<S: Scalar> CameraModel<S> {
    /// Builds and validates a camera from its parts.
    pub fn new(name: impl Into<String>, k: [[S; 3]; 3], t_ego2cam: [[S; 4]; 4], width: S, height: S) -> Result<Self> {
        let cam = Self {
            name: name.into(),
            k,
            t_ego2cam,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at ego position `center`, heading `yaw` (radians from ego +x
    /// toward +y), tilted down by `pitch`, with horizontal field of view `hfov`.
    pub fn looking(name: impl Into<String>, center: [S; 3], yaw: S, pitch: S, hfov: S, width: S, height: S) -> Result<Self> {
        let two = S::lit(2.0);
        let f = width / two / (hfov / two).tan();
        let k = [
            [f, S::zero(), width / two],
            [S::zero(), f, height / two],
            [S::zero(), S::zero(), S::one()],
        ];
        let forward = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
        let right = [yaw.sin(), -yaw.cos(), S::zero()];
        let down = cross(forward, right);
        let rot = [right, down, forward];
        let mut t = [[S::zero(); 4]; 4];
        for r in 0..3 {
            t[r][..3].copy_from_slice(&rot[r]);
            t[r][3] = -(rot[r][0] * center[0] + rot[r][1] * center[1] + rot[r][2] * center[2]);
        }
        t[3][3] = S::one();
        Self::new(name, k, t, width, height)
    }

    /// Checks the intrinsics shape and that the rotation block is proper
    /// orthonormal.
    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        let zero = S::zero();
        if !(k[0][0] > zero && k[1][1] > zero) || k[1][0] != zero || k[2][0] != zero || k[2][1] != zero || k[2][2] != S::one() {
            return Err(Error::Invalid(format!("camera {}: K must be upper-triangular with positive focal lengths and K[2][2] = 1", self.name)));
        }
        let r = self.rotation();
        let tol = S::lit(1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let dot: S = (0..3).map(|c| r[i][c] * r[j][c]).sum();
                let want = if i == j { S::one() } else { zero };
                if (dot - want).abs() > tol {
                    return Err(Error::Invalid(format!("camera {}: rotation not orthonormal", self.name)));
                }
            }
        }
        if (det3(&r) - S::one()).abs() > tol {
            return Err(Error::Invalid(format!("camera {}: rotation determinant must be +1", self.name)));
        }
        let t = &self.t_ego2cam;
        if t[3] != [zero, zero, zero, S::one()] {
            return Err(Error::Invalid(format!("camera {}: bottom row of T_ego2cam must be [0,0,0,1]", self.name)));
        }
        if !(self.width > zero && self.height > zero) {
            return Err(Error::Invalid(format!("camera {}: empty image", self.name)));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[S; 3]; 3] {
        let t = &self.t_ego2cam;
        [
            [t[0][0], t[0][1], t[0][2]],
            [t[1][0], t[1][1], t[1][2]],
            [t[2][0], t[2][1], t[2][2]],
        ]
    }

    /// Optical center in the ego frame, `-Rᵀ t`.
    pub fn center(&self) -> [S; 3] {
        let r = self.rotation();
        let t = [self.t_ego2cam[0][3], self.t_ego2cam[1][3], self.t_ego2cam[2][3]];
        let mut c = [S::zero(); 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(0..3).map(|i| r[i][j] * t[i]).sum::<S>();
        }
        c
    }

    pub fn diagonal(&self) -> S {
        (self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn contains_pixel(&self, p: [S; 2]) -> bool {
        p[0] >= S::zero() && p[0] <= self.width && p[1] >= S::zero() && p[1] <= self.height
    }

    /// Ego point (on or off the ground) to camera coordinates.
    pub fn ego_to_cam(&self, p: [S; 3]) -> [S; 3] {
        let t = &self.t_ego2cam;
        let mut out = [S::zero(); 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = t[r][0] * p[0] + t[r][1] * p[1] + t[r][2] * p[2] + t[r][3];
        }
        out
    }

    /// Pixel and depth of one ground point.
    pub fn project_ground_point(&self, p: [S; 2]) -> ([S; 2], S) {
        instrument::record(Stage::Project);
        let c = self.ego_to_cam([p[0], p[1], S::zero()]);
        let k = &self.k;
        let z = c[2];
        let u = (k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * z) / z;
        let v = (k[1][1] * c[1] + k[1][2] * z) / z;
        ([u, v], z)
    }

    /// Back-projects a pixel onto the z = 0 ground plane. Fails when the
    /// viewing ray does not reach the ground in front of the camera.
    pub fn ipm_point(&self, pixel: [S; 2]) -> Result<[S; 2]> {
        instrument::record(Stage::Ipm);
        let k = &self.k;
        // K⁻¹ [u v 1]ᵀ for upper-triangular K (scale-agnostic).
        let w = k[2][2];
        let yc = (pixel[1] * w - k[1][2]) / k[1][1];
        let xc = (pixel[0] * w - k[0][1] * yc - k[0][2]) / k[0][0];
        let ray_cam = [xc / w, yc / w, S::one() / w];
        let r = self.rotation();
        let mut ray = [S::zero(); 3];
        for (j, rj) in ray.iter_mut().enumerate() {
            *rj = (0..3).map(|i| r[i][j] * ray_cam[i]).sum();
        }
        let c = self.center();
        if !(c[2] > S::zero()) {
            return Err(Error::DegenerateGeometry(format!("camera {} is not above the ground plane", self.name)));
        }
        let descent = -ray[2] / ray_cam.iter().map(|&v| v * v).sum::<S>().sqrt();
        if !(descent > S::lit(1e-12)) {
            return Err(Error::DegenerateGeometry(format!(
                "pixel ({}, {}) of camera {} is at or above the horizon",
                pixel[0], pixel[1], self.name
            )));
        }
        let s = -c[2] / ray[2];
        Ok([c[0] + s * ray[0], c[1] + s * ray[1]])
    }
}

/// Projects ego-frame ground points (lifted to z = 0) into the image.
pub fn project_ego_to_pv<S: Scalar>(points: &Polyline2D<S, Ego>, cam: &CameraModel<S>) -> Projection<S> {
    let depth_min = S::lit(DEPTH_MIN);
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        valid: Vec::with_capacity(points.len()),
        depths: Vec::with_capacity(points.len()),
    };
    for &p in points.points() {
        let (px, z) = cam.project_ground_point(p);
        out.valid.push(z > depth_min && px.iter().all(|v| v.is_finite()) && cam.contains_pixel(px));
        out.pixels.push(px);
        out.depths.push(z);
    }
    out
}

/// Inverse perspective mapping of each pixel onto the ground. Points whose
/// ray misses the ground are reported as errors, never fabricated.
pub fn ipm_pv_to_ego<S: Scalar>(pixels: &Polyline2D<S, Image>, cam: &CameraModel<S>) -> Vec<Result<[S; 2]>> {
    pixels.points().iter().map(|&p| cam.ipm_point(p)).collect()
}

fn cross<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn det3<S: Scalar>(m: &[[S; 3]; 3]) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera() -> CameraModel<f64> {
        // ego +x -> camera +z, ego -y -> camera +x, ego -z -> camera +y
        let t = [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let k = [[100.0, 0.0, 320.0], [0.0, 100.0, 240.0], [0.0, 0.0, 1.0]];
        CameraModel::new("axis", k, t, 640.0, 480.0).unwrap()
    }

    fn ego_line(p: &[[f64; 2]]) -> Polyline2D<f64, Ego> {
        Polyline2D::new(p.to_vec()).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = axis_camera();
        let pr = project_ego_to_pv(&ego_line(&[[5.0, 0.0], [-5.0, 0.0]]), &cam);
        assert_eq!(pr.pixels[0], [320.0, 240.0]);
        assert!(pr.valid[0]);
        assert!(!pr.valid[1]);
        assert_eq!(pr.pixels.len(), 2);
    }

    #[test]
    fn nadir_camera_principal_ray() {
        // optical axis straight down from 2 m above (3, 4)
        let t_rot = [[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]];
        let c = [3.0, 4.0, 2.0];
        let mut t = [[0.0; 4]; 4];
        for r in 0..3 {
            t[r][..3].copy_from_slice(&t_rot[r]);
            t[r][3] = -(0..3).map(|j| t_rot[r][j] * c[j]).sum::<f64>();
        }
        t[3][3] = 1.0;
        let k = [[200.0, 0.0, 100.0], [0.0, 200.0, 80.0], [0.0, 0.0, 1.0]];
        let cam = CameraModel::new("nadir", k, t, 200.0, 160.0).unwrap();
        let g = cam.ipm_point([100.0, 80.0]).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_pixel_is_rejected() {
        let pitch = 10f64.to_radians();
        let cam = CameraModel::looking("front", [0.0, 0.0, 1.5], 0.3, pitch, 1.6, 640.0, 480.0).unwrap();
        // horizon row: ray elevation zero, tan(pitch) * f above the principal row
        let f = cam.k[1][1];
        let v = cam.k[1][2] - f * pitch.tan();
        assert!(cam.ipm_point([cam.k[0][2], v]).is_err());
        assert!(cam.ipm_point([cam.k[0][2], v - 20.0]).is_err());
        assert!(cam.ipm_point([cam.k[0][2], v + 20.0]).is_ok());
    }

    /// Independent oracle: the full 3×4 homogeneous chain K·[I|0]·T.
    fn oracle_pixel(cam: &CameraModel<f64>, p: [f64; 2]) -> [f64; 2] {
        let mut kt = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                kt[r][c] = (0..3).map(|j| cam.k[r][j] * cam.t_ego2cam[j][c]).sum();
            }
        }
        let h = [p[0], p[1], 0.0, 1.0];
        let q: Vec<f64> = kt.iter().map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        [q[0] / q[2], q[1] / q[2]]
    }

    fn random_rig(rng: &mut ChaCha8Rng) -> CameraModel<f64> {
        CameraModel::looking(
            "rand",
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..3.0)],
            rng.random_range(-3.1..3.1),
            rng.random_range(0.05..0.6),
            rng.random_range(1.0..2.0),
            640.0,
            480.0,
        )
        .unwrap()
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = CameraModel::looking("pitched", [0.3, -0.2, 1.5], 0.7, 10f64.to_radians(), 1.4, 800.0, 600.0).unwrap();
        let pts: Vec<[f64; 2]> = (0..50).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]).collect();
        let pr = project_ego_to_pv(&ego_line(&pts), &cam);
        for (i, p) in pts.iter().enumerate() {
            if pr.depths[i] > DEPTH_MIN {
                let o = oracle_pixel(&cam, *p);
                assert!((o[0] - pr.pixels[i][0]).abs() < 1e-9 && (o[1] - pr.pixels[i][1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_then_ipm_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for _ in 0..10 {
            let cam = random_rig(&mut rng);
            for _ in 0..100 {
                let p = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
                let (px, z) = cam.project_ground_point(p);
                if z <= DEPTH_MIN {
                    continue;
                }
                let back = cam.ipm_point(px).unwrap();
                assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn ipm_ignores_homogeneous_scale_of_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = random_rig(&mut rng);
        let mut scaled = cam.clone();
        for row in scaled.k.iter_mut() {
            for v in row.iter_mut() {
                *v *= 3.7;
            }
        }
        for _ in 0..50 {
            let px = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
            match (cam.ipm_point(px), scaled.ipm_point(px)) {
                (Ok(a), Ok(b)) => {
                    let tol = 1e-12 * (1.0 + a[0].abs().max(a[1].abs()));
                    assert!((a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol);
                }
                (Err(_), Err(_)) => {}
                other => panic!("disagreement {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut cam = axis_camera();
        cam.t_ego2cam[0][0] = 0.5;
        assert!(cam.validate().is_err());
        let mut mirrored = axis_camera();
        for c in 0..3 {
            mirrored.t_ego2cam[0][c] = -mirrored.t_ego2cam[0][c];
        }
        assert!(mirrored.validate().is_err());
    }

    #[test]
    fn single_precision_projection() {
        let cam = CameraModel::<f32>::looking("f", [0.0, 0.0, 1.5], 0.0, 0.2, 1.5, 320.0, 240.0).unwrap();
        let (px, _) = cam.project_ground_point([10.0, 0.0]);
        let back = cam.ipm_point(px).unwrap();
        assert!((back[0] - 10.0).abs() < 1e-3);
    }
}
