//! Pose, camera and projection primitives.
//!
//! Rotations are stored as Euler angles `(r_x, r_y, r_z)` in radians and
//! composed extrinsically X, then Y, then Z: `R = R_z(r_z) · R_y(r_y) · R_x(r_x)`.
//! Camera frame follows the usual computer-vision layout: `x` right, `y` down,
//! `z` forward along the optical axis.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid pose of one vehicle in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    /// Object center in camera coordinates, meters.
    pub translation: Vector3<f64>,
    /// Euler angles `(r_x, r_y, r_z)`, radians.
    pub rotation: Vector3<f64>,
}

impl Default for Pose6DoF {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6DoF {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        euler_to_matrix(&self.rotation)
    }

    /// Maps an object-frame point into the camera frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Same pose with every Euler angle wrapped into `[-π, π]`.
    pub fn normalized(&self) -> Self {
        Self::new(self.translation, normalize_euler(&self.rotation))
    }
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        let cam = Self { fx, fy, px, py };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.px.is_finite() || !self.py.is_finite() {
            return Err(Error::InvalidInput(format!(
                "camera focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.px, 0.0, self.fy, self.py, 0.0, 0.0, 1.0)
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(x.z > 0.0) {
            return Err(Error::NonPositiveDepth { depth: x.z });
        }
        Ok(Vector2::new(
            self.fx * x.x / x.z + self.px,
            self.fy * x.y / x.z + self.py,
        ))
    }

    /// Derivative of the pixel with respect to the camera-frame point.
    pub fn project_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }
}

/// Axis-aligned 2D detection box, center + size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub bh: f64,
}

impl BoundingBox2D {
    pub fn new(bx: f64, by: f64, bw: f64, bh: f64) -> Result<Self> {
        if !(bw > 0.0 && bh > 0.0) {
            return Err(Error::InvalidInput(format!(
                "box width and height must be positive, got {bw}x{bh}"
            )));
        }
        Ok(Self { bx, by, bw, bh })
    }
}

/// Box expressed in normalized camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub ux: f64,
    pub uy: f64,
    pub uw: f64,
    pub uh: f64,
}

/// One 2D semantic keypoint with its visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint2D {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn invisible() -> Self {
        Self::new(0.0, 0.0, false)
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Pixel and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Derivatives of a projected pixel with respect to the object-frame point,
/// the translation, and the three Euler angles (one column per angle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionJacobian {
    pub wrt_point: Matrix2x3<f64>,
    pub wrt_translation: Matrix2x3<f64>,
    pub wrt_rotation: Matrix2x3<f64>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = R_z(r_z) · R_y(r_y) · R_x(r_x)`.
pub fn euler_to_matrix(rotation: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(rotation.z) * rot_y(rotation.y) * rot_x(rotation.x)
}

/// Partial derivatives `[∂R/∂r_x, ∂R/∂r_y, ∂R/∂r_z]`.
pub fn euler_to_matrix_derivatives(rotation: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(rotation.x), rot_y(rotation.y), rot_z(rotation.z));
    [
        rz * ry * d_rot_x(rotation.x),
        rz * d_rot_y(rotation.y) * rx,
        d_rot_z(rotation.z) * ry * rx,
    ]
}

/// Wraps an angle into `[-π, π]`.
///
/// Values already inside the interval (including both endpoints) are returned
/// unchanged; anything outside is shifted by a multiple of 2π into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        return theta;
    }
    let turns = ((theta - PI) / (2.0 * PI)).ceil();
    (theta - 2.0 * PI * turns).clamp(-PI, PI)
}

pub fn normalize_euler(rotation: &Vector3<f64>) -> Vector3<f64> {
    rotation.map(normalize_angle)
}

/// Projects an object-frame point: `s · [u, v, 1]ᵀ = K · [R | T] · p`.
pub fn project_point(
    p: &Vector3<f64>,
    pose: &Pose6DoF,
    cam: &CameraIntrinsics,
) -> Result<Projection> {
    let x = pose.transform_point(p);
    let pixel = cam.project(&x)?;
    Ok(Projection { pixel, depth: x.z })
}

/// [`project_point`] together with its derivatives.
pub fn project_point_with_jacobian(
    p: &Vector3<f64>,
    pose: &Pose6DoF,
    cam: &CameraIntrinsics,
) -> Result<(Projection, ProjectionJacobian)> {
    let rot = pose.rotation_matrix();
    let x = rot * p + pose.translation;
    let pixel = cam.project(&x)?;
    let dpix = cam.project_jacobian(&x);
    let drot = euler_to_matrix_derivatives(&pose.rotation);
    let mut wrt_rotation = Matrix2x3::zeros();
    for (a, d) in drot.iter().enumerate() {
        wrt_rotation.set_column(a, &(dpix * (d * p)));
    }
    Ok((
        Projection { pixel, depth: x.z },
        ProjectionJacobian {
            wrt_point: dpix * rot,
            wrt_translation: dpix,
            wrt_rotation,
        },
    ))
}

/// Converts a pixel-space box into normalized coordinates at scale `z`.
pub fn box_to_world(bbox: &BoundingBox2D, cam: &CameraIntrinsics, z: f64) -> Result<WorldBox> {
    if !(z > 0.0) {
        return Err(Error::InvalidInput(format!("scale factor must be positive, got {z}")));
    }
    Ok(WorldBox {
        ux: (bbox.bx - cam.px) * z / cam.fx,
        uy: (bbox.by - cam.py) * z / cam.fy,
        uw: bbox.bw / cam.fx,
        uh: bbox.bh / cam.fy,
    })
}

/// Angle of the relative rotation between two Euler triples, in `[0, π]`.
pub fn rotation_geodesic_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    matrix_geodesic_distance(&euler_to_matrix(a), &euler_to_matrix(b))
}

pub fn matrix_geodesic_distance(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let cos = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}
