//! Rigid-body math, the pinhole camera model and depth image conversion.
//!
//! Twists are ordered `(v, ω)`: translational part first, rotational part
//! second. The same order is used by every Jacobian row in the tracker.

use nalgebra::{Matrix3, Matrix3x6, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("frame has no valid depth pixels")]
    EmptyCloud,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("cannot project point with non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("sample ({u:.3}, {v:.3}) outside the interior of a {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric matrix `p^∧` such that `p^∧ q = p × q`.
pub fn hat(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// `p^⊙ = [I₃, −p^∧]`: derivative of `exp(δ^∧)·p` with respect to `δ` at zero.
pub fn odot(p: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(p)));
    m
}

/// Rigid transform in SE(3). Rotation is held as a unit quaternion so that
/// trajectory files round-trip without drift; [`Pose::rotation_matrix`]
/// gives the orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from an orthonormal rotation matrix.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Quaternion components in `(x, y, z, w)` order. Inputs within 1e-12
    /// of unit norm are kept verbatim, everything else is renormalized.
    pub fn from_quaternion_xyzw(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
        let rotation = if (raw.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        Self::new(rotation, translation)
    }

    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// se(3) logarithm. Inverse of [`Twist::exp`] for rotation angles below π.
    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v = v_matrix_inverse(&omega) * self.translation;
        Twist { v, omega }
    }

    /// Translation distance and rotation angle (radians) between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        (delta.translation.norm(), delta.rotation.angle())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds a twist from a 6-vector in `(v, ω)` order.
    pub fn from_slice(xi: &[f64]) -> Self {
        Self {
            v: Vector3::new(xi[0], xi[1], xi[2]),
            omega: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.v.x,
            self.v.y,
            self.v.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.omega.norm_squared()).sqrt()
    }

    /// Closed-form exponential map: Rodrigues rotation and the left
    /// Jacobian `V` applied to the translational part.
    pub fn exp(&self) -> Pose {
        let theta = self.omega.norm();
        let rotation = if theta < SMALL_ANGLE {
            // q ≈ (1, ω/2), normalized
            UnitQuaternion::from_quaternion(Quaternion::new(
                1.0,
                0.5 * self.omega.x,
                0.5 * self.omega.y,
                0.5 * self.omega.z,
            ))
        } else {
            let half = 0.5 * theta;
            let s = half.sin() / theta;
            UnitQuaternion::new_unchecked(Quaternion::new(
                half.cos(),
                s * self.omega.x,
                s * self.omega.y,
                s * self.omega.z,
            ))
        };
        Pose {
            rotation,
            translation: v_matrix(&self.omega) * self.v,
        }
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist {
            v: -self.v,
            omega: -self.omega,
        }
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    xi.exp()
}

fn v_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let (b, c) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn v_matrix_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let c = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at integer
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Back-projects pixel `(u, v)` at depth `d` (meters along +z).
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= (self.width - 1) as f64 && uv.y <= (self.height - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub in_bounds: bool,
}

/// Projects a camera-frame point. Out-of-image results are flagged, never clamped.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<Projection, GeometryError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(point.z));
    }
    let uv = Vector2::new(k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy);
    Ok(Projection {
        uv,
        in_bounds: k.contains(&uv),
    })
}

/// Jacobian of the projection with respect to the camera-frame point.
pub fn projection_jacobian(point: &Vector3<f64>, k: &Intrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / point.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * point.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * point.y * iz2,
    )
}

/// Row-major single channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }
}

/// Bilinear value at `uv` and the exact derivative of the bilinear
/// interpolant `(∂I/∂u, ∂I/∂v)`.
pub fn bilinear_sample(image: &Image, uv: &Vector2<f64>) -> Result<(f64, Vector2<f64>), GeometryError> {
    let (u, v) = (uv.x, uv.y);
    let max_u = image.width as f64 - 1.5;
    let max_v = image.height as f64 - 1.5;
    if !(u >= 0.5 && v >= 0.5 && u <= max_u && v <= max_v) {
        return Err(GeometryError::OutOfBounds {
            u,
            v,
            width: image.width,
            height: image.height,
        });
    }
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let i00 = image.get(u0, v0) as f64;
    let i10 = image.get(u0 + 1, v0) as f64;
    let i01 = image.get(u0, v0 + 1) as f64;
    let i11 = image.get(u0 + 1, v0 + 1) as f64;
    let top = i00 + fu * (i10 - i00);
    let bottom = i01 + fu * (i11 - i01);
    let value = top + fv * (bottom - top);
    let du = (1.0 - fv) * (i10 - i00) + fv * (i11 - i01);
    let dv = bottom - top;
    Ok((value, Vector2::new(du, dv)))
}

/// One RGB-D observation. Depth is in meters, 0 marks invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub intensity: Image,
    pub depth: Image,
    /// Optional 8-bit color, row-major, used only for mesh texturing.
    pub color: Option<Vec<[u8; 3]>>,
    pub intrinsics: Intrinsics,
    pub timestamp: f64,
}

/// Valid depth window in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.1, max: 8.0 }
    }
}

impl DepthRange {
    #[inline]
    pub fn contains(&self, d: f64) -> bool {
        d.is_finite() && d >= self.min && d <= self.max
    }
}

impl RgbdFrame {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        let n = k.width * k.height;
        if self.depth.width != k.width || self.depth.height != k.height || self.depth.data.len() != n {
            return Err(GeometryError::MalformedFrame(format!(
                "depth is {}x{} but intrinsics are {}x{}",
                self.depth.width, self.depth.height, k.width, k.height
            )));
        }
        if self.intensity.width != k.width || self.intensity.height != k.height || self.intensity.data.len() != n {
            return Err(GeometryError::MalformedFrame(format!(
                "intensity is {}x{} but intrinsics are {}x{}",
                self.intensity.width, self.intensity.height, k.width, k.height
            )));
        }
        if let Some(color) = &self.color {
            if color.len() != n {
                return Err(GeometryError::MalformedFrame(format!(
                    "color has {} pixels, expected {n}",
                    color.len()
                )));
            }
        }
        Ok(())
    }

    /// Depth at `(u, v)` if it lies inside the validity window.
    #[inline]
    pub fn valid_depth(&self, u: usize, v: usize, range: &DepthRange) -> Option<f64> {
        let d = self.depth.get(u, v) as f64;
        range.contains(d).then_some(d)
    }
}

/// Points with unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vector3<f64>, normal: Vector3<f64>) {
        self.points.push(point);
        self.normals.push(normal);
    }

    pub fn transformed(&self, pose: &Pose) -> OrientedPointCloud {
        OrientedPointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self.normals.iter().map(|n| pose.transform_vector(n)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackprojectOptions {
    pub range: DepthRange,
    /// Neighbors whose depth differs by more than this fraction of the
    /// center depth are treated as invalid (occlusion edges).
    pub max_relative_jump: f64,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        Self {
            range: DepthRange::default(),
            max_relative_jump: 0.05,
        }
    }
}

/// Back-projected cloud together with the source pixel of every point.
#[derive(Clone, Debug, Default)]
pub struct PixelCloud {
    pub cloud: OrientedPointCloud,
    pub pixels: Vec<(usize, usize)>,
}

/// Back-projects every valid pixel and estimates normals from neighbor
/// cross products. Normals face the camera (`n·x < 0`).
pub fn backproject(frame: &RgbdFrame) -> Result<OrientedPointCloud, GeometryError> {
    backproject_with(frame, &BackprojectOptions::default()).map(|pc| pc.cloud)
}

pub fn backproject_with(frame: &RgbdFrame, opts: &BackprojectOptions) -> Result<PixelCloud, GeometryError> {
    frame.validate()?;
    let k = &frame.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut any_valid = false;
    let mut out = PixelCloud::default();
    let neighbor = |u: usize, v: usize, center: f64| -> Option<Vector3<f64>> {
        let d = frame.valid_depth(u, v, &opts.range)?;
        ((d - center).abs() <= opts.max_relative_jump * center).then(|| k.unproject(u as f64, v as f64, d))
    };
    for v in 0..h {
        for u in 0..w {
            let Some(d) = frame.valid_depth(u, v, &opts.range) else {
                continue;
            };
            any_valid = true;
            let p = k.unproject(u as f64, v as f64, d);
            let right = if u + 1 < w { neighbor(u + 1, v, d) } else { None };
            let left = if u > 0 { neighbor(u - 1, v, d) } else { None };
            let down = if v + 1 < h { neighbor(u, v + 1, d) } else { None };
            let up = if v > 0 { neighbor(u, v - 1, d) } else { None };
            let du = match (right, left) {
                (Some(r), Some(l)) => r - l,
                (Some(r), None) => r - p,
                (None, Some(l)) => p - l,
                (None, None) => continue,
            };
            let dv = match (down, up) {
                (Some(b), Some(t)) => b - t,
                (Some(b), None) => b - p,
                (None, Some(t)) => p - t,
                (None, None) => continue,
            };
            let mut n = du.cross(&dv);
            let norm = n.norm();
            if !(norm > 1e-12) {
                continue;
            }
            n /= norm;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            out.cloud.push(p, n);
            out.pixels.push((u, v));
        }
    }
    if !any_valid || out.cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    Ok(out)
}
