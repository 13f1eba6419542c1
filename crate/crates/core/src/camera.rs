//! Pinhole camera model and the distance/focal reparametrization.
//!
//! Convention: right-handed, the camera looks down `+z` in camera space and
//! pixel `y` grows downward. World to camera is `x_cam = R * x_world + t`, so
//! `t.z` is the distance from the camera to the world origin (the face).
//! Depth maps and translations share one scene unit; focal lengths are in
//! pixels.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera-space depths at or below this value are treated as behind the camera.
pub const EPS_Z: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point has non-positive camera depth ({0})")]
    NonPositiveDepth(f64),
    #[error("eyes would be behind the camera (eye depth {0})")]
    EyesBehindCamera(f64),
    #[error("camera distance must be positive (got {0})")]
    NonPositiveDistance(f64),
    #[error("invalid camera: {0}")]
    Invalid(String),
}

pub type Result<T, E = CameraError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Pinhole extrinsics and intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraParams {
    /// World to camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub resolution: Resolution,
}

impl CameraParams {
    /// Builds a camera and checks every invariant.
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: f64,
        principal_point: Vector2<f64>,
        resolution: Resolution,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            focal,
            principal_point,
            resolution,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at distance `t_z` looking at the world origin, principal point
    /// in the image center.
    pub fn frontal(t_z: f64, focal: f64, resolution: Resolution) -> Result<Self> {
        Self::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, t_z),
            focal,
            Vector2::new(resolution.width as f64 / 2.0, resolution.height as f64 / 2.0),
            resolution,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).amax();
        if !dev.is_finite() || dev >= ORTHONORMAL_TOL {
            return Err(CameraError::Invalid(format!(
                "rotation is not orthonormal (max deviation {dev:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(CameraError::Invalid("rotation has negative determinant".into()));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(CameraError::Invalid(format!("focal must be positive, got {}", self.focal)));
        }
        if self.resolution.width == 0 || self.resolution.height == 0 {
            return Err(CameraError::Invalid("resolution must be non-zero".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite())
            || !self.principal_point.iter().all(|v| v.is_finite())
        {
            return Err(CameraError::Invalid("non-finite translation or principal point".into()));
        }
        if self.translation.z <= 0.0 {
            return Err(CameraError::Invalid(format!(
                "t_z must be positive, got {}",
                self.translation.z
            )));
        }
        Ok(())
    }

    pub fn t_z(&self) -> f64 {
        self.translation.z
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project_camera(&self, cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(cam.z > EPS_Z) {
            return Err(CameraError::NonPositiveDepth(cam.z));
        }
        Ok(self.principal_point + self.focal * Vector2::new(cam.x / cam.z, cam.y / cam.z))
    }

    /// Camera-space point at `depth` (along the optical axis) behind `pixel`.
    pub fn backproject_camera(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let xy = (pixel - self.principal_point) * (depth / self.focal);
        Ok(Vector3::new(xy.x, xy.y, depth))
    }

    /// Same camera with rotation and translation replaced.
    pub fn with_pose(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            ..self.clone()
        }
    }
}

/// Projects a world point into the image. The result may lie outside the
/// image rectangle.
pub fn project(point: &Vector3<f64>, cam: &CameraParams) -> Result<Vector2<f64>> {
    cam.project_camera(&cam.to_camera(point))
}

/// Inverse of [`project`] for a known camera-space depth.
pub fn backproject(pixel: &Vector2<f64>, depth: f64, cam: &CameraParams) -> Result<Vector3<f64>> {
    Ok(cam.to_world(&cam.backproject_camera(pixel, depth)?))
}

/// Anchor for the focal reparametrization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamContext {
    /// Optical-axis depth of the eyes under the original camera.
    pub d0: f64,
    /// Original focal length in pixels.
    pub f0: f64,
    /// Original camera distance.
    #[serde(rename = "tz0")]
    pub t_z0: f64,
}

impl ReparamContext {
    pub fn new(d0: f64, f0: f64, t_z0: f64) -> Result<Self> {
        let ctx = Self { d0, f0, t_z0 };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0.is_finite() && self.d0 > 0.0) {
            return Err(CameraError::Invalid(format!("d0 must be positive, got {}", self.d0)));
        }
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(CameraError::Invalid(format!("f0 must be positive, got {}", self.f0)));
        }
        if !self.t_z0.is_finite() {
            return Err(CameraError::Invalid("t_z0 must be finite".into()));
        }
        Ok(())
    }

    /// Eye depth once the camera sits at distance `t_z`.
    pub fn eye_depth(&self, t_z: f64) -> f64 {
        self.d0 - (self.t_z0 - t_z)
    }

    /// Scale factor applied to `f0` at distance `t_z`.
    pub fn alpha(&self, t_z: f64) -> Result<f64> {
        let eye = self.eye_depth(t_z);
        if !(eye > EPS_Z) {
            return Err(CameraError::EyesBehindCamera(eye));
        }
        Ok(eye / self.d0)
    }

    /// Derivative of the reparametrized focal with respect to `t_z`.
    pub fn focal_slope(&self) -> f64 {
        self.f0 / self.d0
    }
}

/// Focal length that keeps the eye-plane magnification of `(f0, t_z0)` at
/// distance `t_z`.
pub fn reparam_focal(ctx: &ReparamContext, t_z: f64) -> Result<f64> {
    Ok(ctx.alpha(t_z)? * ctx.f0)
}

/// Starting camera distance: half of the estimated one.
pub fn halve_distance_init(t_z0: f64) -> Result<f64> {
    if !(t_z0.is_finite() && t_z0 > 0.0) {
        return Err(CameraError::NonPositiveDistance(t_z0));
    }
    Ok(t_z0 / 2.0)
}

/// Rotation matrix for an axis-angle vector (radians).
pub fn rotation_from_axis_angle(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// Angle in radians of the relative rotation `a^T b`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Re-orthonormalizes a nearly orthonormal matrix.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    Rotation3::from_matrix_eps(m, 1e-12, 100, Rotation3::identity()).into_inner()
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    focal: f64,
    principal_point: [f64; 2],
    resolution: [u32; 2],
}

impl TryFrom<CameraJson> for CameraParams {
    type Error = CameraError;

    fn try_from(j: CameraJson) -> Result<Self> {
        let r = j.rotation;
        CameraParams::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(j.translation),
            j.focal,
            Vector2::from(j.principal_point),
            Resolution::new(j.resolution[0], j.resolution[1]),
        )
    }
}

impl From<CameraParams> for CameraJson {
    fn from(c: CameraParams) -> Self {
        let r = c.rotation;
        CameraJson {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: c.translation.into(),
            focal: c.focal,
            principal_point: c.principal_point.into(),
            resolution: [c.resolution.width, c.resolution.height],
        }
    }
}
