use std::fmt::Debug;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Coordinate frame marker for [`Polyline2D`].
pub trait Frame: Copy + Clone + Debug + Default + PartialEq + Send + Sync + 'static {
    const NAME: &'static str;
}

/// Ego-vehicle ground frame, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ego;

/// Image plane, pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Image;

impl Frame for Ego {
    const NAME: &'static str = "ego";
}

impl Frame for Image {
    const NAME: &'static str = "image";
}

/// Ordered point sequence tagged with its coordinate frame. At least two
/// finite points.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline2D<S, F> {
    points: Vec<[S; 2]>,
    frame: PhantomData<F>,
}

impl<S: Scalar, F: Frame> Polyline2D<S, F> {
    pub fn new(points: Vec<[S; 2]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateGeometry(format!(
                "{} polyline needs at least 2 points, got {}",
                F::NAME,
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} polyline coordinate", F::NAME)));
        }
        Ok(Self {
            points,
            frame: PhantomData,
        })
    }

    pub fn points(&self) -> &[[S; 2]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[S; 2]> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame_name(&self) -> &'static str {
        F::NAME
    }

    pub fn arc_length(&self) -> S {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self {
            points,
            frame: PhantomData,
        }
    }

    pub fn centroid(&self) -> [S; 2] {
        let n = S::from_usize(self.points.len()).unwrap();
        let (sx, sy) = self
            .points
            .iter()
            .fold((S::zero(), S::zero()), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }
}

pub(crate) fn dist<S: Scalar>(a: [S; 2], b: [S; 2]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// `n` points at equal arc-length spacing from the first to the last point.
/// Endpoints are copied exactly.
pub fn resample_polyline<S: Scalar, F: Frame>(line: &Polyline2D<S, F>, n: usize) -> Result<Polyline2D<S, F>> {
    if n < 2 {
        return Err(Error::Invalid(format!("resample count {n} < 2")));
    }
    let pts = line.points();
    let mut cumulative = Vec::with_capacity(pts.len());
    cumulative.push(S::zero());
    for w in pts.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + dist(w[0], w[1]));
    }
    let total = *cumulative.last().unwrap();
    if !(total > S::zero()) {
        return Err(Error::DegenerateGeometry("zero-length polyline".into()));
    }
    let mut out = Vec::with_capacity(n);
    out.push(pts[0]);
    let mut seg = 0;
    let denom = S::from_usize(n - 1).unwrap();
    for i in 1..n - 1 {
        let target = total * S::from_usize(i).unwrap() / denom;
        while seg + 1 < pts.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > S::zero() {
            (target - cumulative[seg]) / len
        } else {
            S::zero()
        };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
    }
    out.push(*pts.last().unwrap());
    Polyline2D::new(out)
}

/// Euclidean distance from `p` to segment `ab`.
pub fn point_segment_distance<S: Scalar>(p: [S; 2], a: [S; 2], b: [S; 2]) -> S {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > S::zero() {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).max(S::zero()).min(S::one())
    } else {
        S::zero()
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}
