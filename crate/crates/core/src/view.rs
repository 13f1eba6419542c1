//! Novel-camera construction from pose deltas.
//!
//! Deltas rotate the scene about a pivot (the face centroid) in the
//! original camera's frame: yaw about its `y` axis, pitch about `x`, roll
//! about `z`, applied as `Rz(roll) * Ry(yaw) * Rx(pitch)`. A distance change
//! then overrides `t_z`, and the focal length follows the reparametrization.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{halve_distance_init, reparam_focal, rotation_from_axis_angle, CameraError, CameraParams, ReparamContext};

/// Largest accepted magnitude for each pose angle, in degrees.
pub const MAX_ANGLE_DEG: f64 = 90.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("{name} = {value} is outside [-90, 90] degrees")]
    AngleOutOfRange { name: &'static str, value: f64 },
    #[error("camera distance must be positive and finite, got {0}")]
    BadDistance(f64),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum DistanceChange {
    #[default]
    Keep,
    /// Absolute camera distance.
    To(f64),
    /// Half of the original distance.
    Half,
}

impl FromStr for DistanceChange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "half" => Ok(Self::Half),
            "keep" | "" => Ok(Self::Keep),
            other => other
                .parse::<f64>()
                .map(Self::To)
                .map_err(|_| format!("expected a number or `half`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ViewDelta {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub distance: DistanceChange,
}

impl ViewDelta {
    pub fn yaw(deg: f64) -> Self {
        Self {
            yaw_deg: deg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ViewError> {
        for (name, value) in [("yaw", self.yaw_deg), ("pitch", self.pitch_deg), ("roll", self.roll_deg)] {
            if !(value.abs() <= MAX_ANGLE_DEG) {
                return Err(ViewError::AngleOutOfRange { name, value });
            }
        }
        if let DistanceChange::To(v) = self.distance {
            if !(v.is_finite() && v > 0.0) {
                return Err(ViewError::BadDistance(v));
            }
        }
        Ok(())
    }

    /// Rotation in the original camera frame.
    pub fn local_rotation(&self) -> Matrix3<f64> {
        let rx = rotation_from_axis_angle(&Vector3::new(self.pitch_deg.to_radians(), 0.0, 0.0));
        let ry = rotation_from_axis_angle(&Vector3::new(0.0, self.yaw_deg.to_radians(), 0.0));
        let rz = rotation_from_axis_angle(&Vector3::new(0.0, 0.0, self.roll_deg.to_radians()));
        rz * ry * rx
    }
}

/// Camera that sees the scene rotated by `delta` about `pivot` (world
/// coordinates). With a zero delta the original camera is returned unchanged.
pub fn novel_camera(
    original: &CameraParams,
    pivot: &Vector3<f64>,
    delta: &ViewDelta,
    ctx: &ReparamContext,
) -> Result<CameraParams, ViewError> {
    delta.validate()?;
    let local = delta.local_rotation();
    let pivot_cam = original.rotation * pivot;
    let rotation = local * original.rotation;
    let mut translation = original.translation + (pivot_cam - local * pivot_cam);
    let mut cam = original.with_pose(rotation, translation);
    let target = match delta.distance {
        DistanceChange::Keep => None,
        DistanceChange::To(v) => Some(v),
        DistanceChange::Half => Some(halve_distance_init(original.t_z())?),
    };
    if let Some(tz) = target {
        translation.z = tz;
        cam = cam.with_pose(rotation, translation);
        cam.focal = reparam_focal(ctx, tz)?;
    }
    cam.validate()?;
    Ok(cam)
}
