//! Shared domain types and elementary 2D/3D arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Homogeneous scale below which a point is treated as lying at infinity.
pub const HOMOGENEOUS_EPS: f64 = 1e-12;

/// Horizon lengths and image geometry of one forecasting problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSpec {
    pub n_past: usize,
    pub n_future: usize,
    pub n_contact: usize,
    pub fps: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            n_past: 10,
            n_future: 4,
            n_contact: 10,
            fps: 4.0,
            image_width: 128.0,
            image_height: 128.0,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_past < 2 {
            return Err(Error::validation("n_past must be at least 2"));
        }
        if self.n_future < 1 {
            return Err(Error::validation("n_future must be at least 1"));
        }
        if self.n_contact < 1 {
            return Err(Error::validation("n_contact must be at least 1"));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::validation("fps must be positive"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.n_past + self.n_future
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Right, Side::Left];

    pub fn index(self) -> usize {
        match self {
            Side::Right => 0,
            Side::Left => 1,
        }
    }
}

/// Continuous pixel position; may lie outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint<T = f64> {
    pub u: T,
    pub v: T,
}

impl<T: Real> PixelPoint<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn cast<U: Real>(self) -> PixelPoint<U> {
        PixelPoint {
            u: U::of(self.u.to_f64_lossy()),
            v: U::of(self.v.to_f64_lossy()),
        }
    }
}

/// Euclidean distance between two pixel positions.
pub fn l2_distance<T: Real>(p: PixelPoint<T>, q: PixelPoint<T>) -> Result<T> {
    if !p.is_finite() || !q.is_finite() {
        return Err(Error::validation("l2_distance on non-finite point"));
    }
    Ok((p.u - q.u).hypot(p.v - q.v))
}

pub fn to_homogeneous<T: Real>(p: PixelPoint<T>) -> [T; 3] {
    [p.u, p.v, T::one()]
}

pub fn from_homogeneous<T: Real>(x: [T; 3]) -> Result<PixelPoint<T>> {
    if !(x[2].abs() > T::of(HOMOGENEOUS_EPS)) {
        return Err(Error::Degenerate(format!(
            "homogeneous scale {} is at infinity",
            x[2]
        )));
    }
    // Exact for w == 1, which keeps the homogeneous round trip lossless.
    if x[2] == T::one() {
        return Ok(PixelPoint::new(x[0], x[1]));
    }
    Ok(PixelPoint::new(x[0] / x[2], x[1] / x[2]))
}

/// Future waypoints of one hand on the canvas frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandTrajectory<T = f64> {
    pub side: Side,
    pub waypoints: Vec<PixelPoint<T>>,
    pub valid: Vec<bool>,
}

impl<T: Real> HandTrajectory<T> {
    pub fn new(side: Side, waypoints: Vec<PixelPoint<T>>) -> Self {
        let valid = vec![true; waypoints.len()];
        Self {
            side,
            waypoints,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn check_len(&self, n_future: usize) -> Result<()> {
        if self.waypoints.len() != n_future || self.valid.len() != n_future {
            return Err(Error::validation(format!(
                "trajectory has {} waypoints, expected {n_future}",
                self.waypoints.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> HandTrajectory<U> {
        HandTrajectory {
            side: self.side,
            waypoints: self.waypoints.iter().map(|p| p.cast()).collect(),
            valid: self.valid.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPointSet<T = f64> {
    pub points: Vec<PixelPoint<T>>,
}

impl<T> ContactPointSet<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-frame, per-side visibility over a horizon (past followed by future).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidMask {
    pub right: Vec<bool>,
    pub left: Vec<bool>,
}

impl ValidMask {
    pub fn all(len: usize, value: bool) -> Self {
        Self {
            right: vec![value; len],
            left: vec![value; len],
        }
    }

    pub fn side(&self, side: Side) -> &[bool] {
        match side {
            Side::Right => &self.right,
            Side::Left => &self.left,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Vec<bool> {
        match side {
            Side::Right => &mut self.right,
            Side::Left => &mut self.left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Mat3<f64> {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn inverse(&self) -> Mat3<f64> {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Pinhole projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<PixelPoint<f64>> {
        if p[2] <= HOMOGENEOUS_EPS {
            return None;
        }
        Some(PixelPoint::new(
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }
}

pub type Mat3<T> = [[T; 3]; 3];
pub type Vec3<T> = [T; 3];

pub fn mat3_identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_vec<T: Real>(a: &Mat3<T>, x: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * x[0] + a[0][1] * x[1] + a[0][2] * x[2],
        a[1][0] * x[0] + a[1][1] * x[1] + a[1][2] * x[2],
        a[2][0] * x[0] + a[2][1] * x[1] + a[2][2] * x[2],
    ]
}

pub fn mat3_transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[j][i];
        }
    }
    out
}

pub fn mat3_det<T: Real>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn mat3_inverse<T: Real>(a: &Mat3<T>) -> Option<Mat3<T>> {
    let det = mat3_det(a);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let c = |i: usize, j: usize| {
        let r = [(i + 1) % 3, (i + 2) % 3];
        let k = [(j + 1) % 3, (j + 2) % 3];
        a[r[0]][k[0]] * a[r[1]][k[1]] - a[r[0]][k[1]] * a[r[1]][k[0]]
    };
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            // adjugate is the transposed cofactor matrix
            *cell = c(j, i) / det;
        }
    }
    Some(out)
}

pub fn vec3_sub(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_add(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_scale(a: Vec3<f64>, s: f64) -> Vec3<f64> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vec3_dot(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l2_examples() {
        let o = PixelPoint::new(0.0, 0.0);
        assert_eq!(l2_distance(o, o).unwrap(), 0.0);
        assert_eq!(l2_distance(o, PixelPoint::new(3.0, 4.0)).unwrap(), 5.0);
        let d: f64 = l2_distance(PixelPoint::new(1.5, -2.0), PixelPoint::new(-1.5, 2.0)).unwrap();
        assert!((d - 5.0).abs() < 1e-15);
        assert!(l2_distance(o, PixelPoint::new(f64::NAN, 0.0)).is_err());
        assert!(l2_distance(PixelPoint::new(f64::INFINITY, 0.0), o).is_err());
    }

    #[test]
    fn homogeneous_examples() {
        assert_eq!(to_homogeneous(PixelPoint::new(2.0, 3.0)), [2.0, 3.0, 1.0]);
        assert_eq!(
            from_homogeneous([4.0, 6.0, 2.0]).unwrap(),
            PixelPoint::new(2.0, 3.0)
        );
        assert!(matches!(
            from_homogeneous([1.0, 1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(from_homogeneous([1.0, 1.0, 1e-13]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SequenceSpec::default().validate().is_ok());
        let bad = SequenceSpec {
            n_past: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SequenceSpec {
            image_width: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mat3_inverse_roundtrip() {
        let a: Mat3<f64> = [[2.0, 0.5, 1.0], [0.1, 3.0, -1.0], [0.01, 0.02, 1.0]];
        let inv = mat3_inverse(&a).unwrap();
        let id = mat3_mul(&a, &inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i][j] - e).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in -1e3f64..1e3, b in -1e3f64..1e3, c in -1e3f64..1e3,
                               d in -1e3f64..1e3, e in -1e3f64..1e3, f in -1e3f64..1e3) {
            let (p, q, r) = (PixelPoint::new(a, b), PixelPoint::new(c, d), PixelPoint::new(e, f));
            let pq = l2_distance(p, q).unwrap();
            let qr = l2_distance(q, r).unwrap();
            let pr = l2_distance(p, r).unwrap();
            prop_assert!(pr <= pq + qr + 1e-9);
            prop_assert_eq!(pq, l2_distance(q, p).unwrap());
            prop_assert!(pq >= 0.0);
        }

        #[test]
        fn homogeneous_roundtrip(u in -1e6f64..1e6, v in -1e6f64..1e6) {
            let p = PixelPoint::new(u, v);
            prop_assert_eq!(from_homogeneous(to_homogeneous(p)).unwrap(), p);
        }
    }
}
