//! Procedural scenes with exact depth, used for end-to-end checks.
//!
//! Every fixture is a height field `z = h(x, y)` in world space seen by a
//! frontal camera at distance [`FIXTURE_DISTANCE`] with focal length equal to
//! the image size. Colors depend only on world `(x, y)`, so any view of the
//! scene can be rendered analytically by ray casting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraParams, ReparamContext, Resolution};
use crate::depth::{DepthError, DepthMap};
use crate::fit::{predict_landmarks, FitError, LandmarkSet, SceneLandmarks, LANDMARK_COUNT};
use crate::image::{GrayImage, ImageBuffer};
use crate::view::{novel_camera, ViewDelta, ViewError};

pub const MIN_FIXTURE_SIZE: usize = 16;
pub const FIXTURE_DISTANCE: f64 = 2.0;

const RIDGE_HEIGHT: f64 = 0.4;
const RIDGE_HALF_WIDTH: f64 = 0.8;
const SPHERE_CENTER_Z: f64 = 0.5;
const SPHERE_RADIUS: f64 = 0.8;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture size must be at least {MIN_FIXTURE_SIZE}, got {0}")]
    TooSmall(usize),
    #[error("ray through pixel ({0}, {1}) misses the scene")]
    Miss(usize, usize),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    Plane,
    Ridge,
    SphereCap,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 3] = [Self::Plane, Self::Ridge, Self::SphereCap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plane => "plane",
            Self::Ridge => "ridge",
            Self::SphereCap => "sphere-cap",
        }
    }

    /// World `z` of the surface above `(x, y)`.
    pub fn height(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Plane => 0.0,
            Self::Ridge => -RIDGE_HEIGHT * (1.0 - x.abs() / RIDGE_HALF_WIDTH).max(0.0),
            Self::SphereCap => {
                let r2 = SPHERE_RADIUS * SPHERE_RADIUS - x * x - y * y;
                if r2 > 0.0 {
                    (SPHERE_CENTER_Z - r2.sqrt()).min(0.0)
                } else {
                    0.0
                }
            }
        }
    }

    /// Ray parameter of the first surface hit along `origin + t * dir`.
    pub fn ray_entry(self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let ground = halfspace_entry(origin, dir, 0.0, 0.0);
        match self {
            Self::Plane => ground,
            Self::Ridge => {
                let s = RIDGE_HEIGHT / RIDGE_HALF_WIDTH;
                let left = halfspace_entry(origin, dir, s, -RIDGE_HEIGHT);
                let right = halfspace_entry(origin, dir, -s, -RIDGE_HEIGHT);
                let tent = match (left, right) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
                min_opt(ground, tent)
            }
            Self::SphereCap => min_opt(ground, ball_entry(origin, dir)),
        }
    }

    /// True where the visible surface belongs to the foreground shape.
    fn on_foreground(self, p: &Vector3<f64>) -> bool {
        match self {
            Self::Plane | Self::Ridge => true,
            Self::SphereCap => p.z < -1e-9,
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown fixture kind `{s}` (plane, ridge, sphere-cap)"))
    }
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Entry into the solid `z >= slope * x + offset`.
fn halfspace_entry(origin: &Vector3<f64>, dir: &Vector3<f64>, slope: f64, offset: f64) -> Option<f64> {
    let g0 = origin.z - slope * origin.x - offset;
    let rate = dir.z - slope * dir.x;
    if g0 >= 0.0 || rate <= 0.0 {
        return None;
    }
    Some(-g0 / rate)
}

fn ball_entry(origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let c = Vector3::new(0.0, 0.0, SPHERE_CENTER_Z);
    let oc = origin - c;
    let a = dir.norm_squared();
    let b = oc.dot(dir);
    let disc = b * b - a * (oc.norm_squared() - SPHERE_RADIUS * SPHERE_RADIUS);
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > 0.0).then_some(t)
}

/// Procedural albedo, smooth at the fixture sampling rates.
pub fn texture(x: f64, y: f64) -> [f64; 3] {
    use std::f64::consts::TAU;
    [
        0.5 + 0.3 * (TAU * (0.9 * x + 0.35 * y)).sin() + 0.1 * (TAU * 1.2 * y).cos(),
        0.5 + 0.3 * (TAU * (0.6 * x - 0.8 * y)).cos(),
        0.45 + 0.25 * (TAU * (1.4 * x + 1.1 * y) + 0.7).sin(),
    ]
}

/// Stand-in for the generator output: the same scene with shifted tones.
fn generated_texture(x: f64, y: f64) -> [f64; 3] {
    texture(x, y).map(|v| 0.9 * v + 0.04)
}

/// World point seen through pixel center `(px, py)` and its camera depth.
pub fn cast(kind: FixtureKind, cam: &CameraParams, px: f64, py: f64) -> Option<(Vector3<f64>, f64)> {
    let ray_cam = Vector3::new(
        (px - cam.principal_point.x) / cam.focal,
        (py - cam.principal_point.y) / cam.focal,
        1.0,
    );
    let origin = cam.center();
    let dir = cam.rotation.transpose() * ray_cam;
    // dir has unit camera-space z, so the ray parameter is the depth
    let t = kind.ray_entry(&origin, &dir)?;
    Some((origin + dir * t, t))
}

/// Analytic render: colors and camera depths per pixel.
pub fn render_analytic(
    kind: FixtureKind,
    cam: &CameraParams,
    albedo: impl Fn(f64, f64) -> [f64; 3],
) -> Result<(ImageBuffer, Vec<f64>), FixtureError> {
    let (w, h) = (cam.resolution.width as usize, cam.resolution.height as usize);
    let mut img = ImageBuffer::filled(w, h, [0.0; 3]);
    let mut depth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (p, z) = cast(kind, cam, x as f64 + 0.5, y as f64 + 0.5).ok_or(FixtureError::Miss(x, y))?;
            img.set_pixel(x, y, albedo(p.x, p.y));
            depth[y * w + x] = z;
        }
    }
    Ok((img, depth))
}

/// Deterministic 64-bit generator for fixture jitter.
#[derive(Debug, Clone)]
struct SplitMix(u64);

impl SplitMix {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// A face-sized point cloud (about 15 x 20 cm) with a nose bump, centered
/// near the origin and facing `-z`. Different seeds jitter the layout.
pub fn synthetic_face_landmarks(seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = SplitMix(seed ^ 0x5EED);
    let (a, b, c) = (0.075, 0.1, 0.06);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..LANDMARK_COUNT)
        .map(|i| {
            let r = ((i as f64 + 0.5) / LANDMARK_COUNT as f64).sqrt() * 0.95;
            let phi = i as f64 * golden + 0.2 * rng.next_f64();
            let u = r * phi.cos() + 0.01 * (rng.next_f64() - 0.5);
            let v = r * phi.sin() + 0.01 * (rng.next_f64() - 0.5);
            let depth = (1.0 - u * u - v * v).max(0.0).sqrt();
            let nose = 0.025 * (-(u * u + (v - 0.05).powi(2)) / 0.02).exp();
            Vector3::new(a * u, b * v, -c * depth - nose)
        })
        .collect()
}

/// 478 surface points spread over the central part of the fixture.
fn surface_landmarks(kind: FixtureKind) -> Vec<Vector3<f64>> {
    let side = (LANDMARK_COUNT as f64).sqrt().ceil() as usize;
    (0..LANDMARK_COUNT)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            let x = -0.5 + c as f64 / (side - 1) as f64;
            let y = -0.5 + r as f64 / (side - 1) as f64;
            Vector3::new(x, y, kind.height(x, y))
        })
        .collect()
}

/// A complete synthetic session plus ground truth for a second view.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub camera: CameraParams,
    pub source: ImageBuffer,
    pub depth: DepthMap,
    pub matte: GrayImage,
    pub generated: ImageBuffer,
    pub reparam: ReparamContext,
    pub scene_landmarks: SceneLandmarks,
    pub landmarks: LandmarkSet,
    /// Second camera and the scene rendered from it.
    pub truth_camera: CameraParams,
    pub truth_view: ImageBuffer,
    pub truth_depth: Vec<f64>,
}

/// Default second view: 5 degrees of yaw about the world origin.
pub fn default_truth_delta() -> ViewDelta {
    ViewDelta::yaw(5.0)
}

pub fn make_fixture(kind: FixtureKind, size: usize) -> Result<Fixture, FixtureError> {
    make_fixture_with_view(kind, size, &default_truth_delta())
}

pub fn make_fixture_with_view(kind: FixtureKind, size: usize, truth: &ViewDelta) -> Result<Fixture, FixtureError> {
    if size < MIN_FIXTURE_SIZE {
        return Err(FixtureError::TooSmall(size));
    }
    let res = Resolution::new(size as u32, size as u32);
    let focal = size as f64;
    let camera = CameraParams::frontal(FIXTURE_DISTANCE, focal, res)?;
    let (source, depth_values) = render_analytic(kind, &camera, texture)?;
    let (generated, _) = render_analytic(kind, &camera, generated_texture)?;
    let depth = DepthMap::from_raw(size, size, depth_values)?;

    let mut matte = GrayImage::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (p, _) = cast(kind, &camera, x as f64 + 0.5, y as f64 + 0.5).ok_or(FixtureError::Miss(x, y))?;
            matte.set(x, y, if kind.on_foreground(&p) { 1.0 } else { 0.0 });
        }
    }

    let apex = FIXTURE_DISTANCE + kind.height(0.0, 0.0);
    let reparam = ReparamContext::new(apex, focal, FIXTURE_DISTANCE)?;
    let scene_landmarks = SceneLandmarks::new(surface_landmarks(kind))?;
    let landmarks = predict_landmarks(&scene_landmarks, &camera)?;

    let truth_camera = novel_camera(&camera, &Vector3::zeros(), truth, &reparam)?;
    let (truth_view, truth_depth) = render_analytic(kind, &truth_camera, texture)?;
    Ok(Fixture {
        kind,
        camera,
        source,
        depth,
        matte,
        generated,
        reparam,
        scene_landmarks,
        landmarks,
        truth_camera,
        truth_view,
        truth_depth,
    })
}

/// Source-image pixel position of the plane point seen through `pixel` of
/// `novel`, for the plane fixture viewed by `original`.
pub fn plane_homography(original: &CameraParams, novel: &CameraParams, pixel: &Vector2<f64>) -> Option<Vector2<f64>> {
    let (p, _) = cast(FixtureKind::Plane, novel, pixel.x, pixel.y)?;
    crate::camera::project(&p, original).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::backproject;

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(make_fixture(FixtureKind::Plane, 8), Err(FixtureError::TooSmall(8))));
    }

    #[test]
    fn plane_depth_is_constant() {
        let f = make_fixture(FixtureKind::Plane, 32).unwrap();
        assert!(f.depth.values().iter().all(|d| (d - FIXTURE_DISTANCE).abs() < 1e-12));
        assert_eq!(f.depth.valid_count(), 32 * 32);
    }

    #[test]
    fn sphere_cap_depth_matches_sphere() {
        let f = make_fixture(FixtureKind::SphereCap, 64).unwrap();
        let center = Vector3::new(0.0, 0.0, SPHERE_CENTER_Z);
        let mut cap = 0;
        for y in 0..64 {
            for x in 0..64 {
                let d = f.depth.get(x, y).unwrap();
                let p = backproject(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5), d, &f.camera).unwrap();
                if f.matte.get(x, y) > 0.5 {
                    cap += 1;
                    assert!(((p - center).norm() - SPHERE_RADIUS).abs() < 1e-6);
                } else {
                    assert!(p.z.abs() < 1e-9);
                }
            }
        }
        assert!(cap > 500, "cap covers {cap} pixels");
    }

    #[test]
    fn ridge_depth_matches_height_field() {
        let f = make_fixture(FixtureKind::Ridge, 48).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let d = f.depth.get(x, y).unwrap();
                let p = backproject(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5), d, &f.camera).unwrap();
                assert!((p.z - FixtureKind::Ridge.height(p.x, p.y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn plane_truth_view_is_a_homography_of_the_texture() {
        let f = make_fixture(FixtureKind::Plane, 64).unwrap();
        // the truth view and the source agree where the homography lands on a pixel center
        for y in (4..60).step_by(7) {
            for x in (4..60).step_by(7) {
                let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let src = plane_homography(&f.camera, &f.truth_camera, &px).unwrap();
                let (p, _) = cast(FixtureKind::Plane, &f.camera, src.x, src.y).unwrap();
                assert_eq!(texture(p.x, p.y).map(|v| (v * 1e9).round()), f.truth_view.pixel(x, y).map(|v| (v * 1e9).round()));
            }
        }
    }

    #[test]
    fn fixtures_are_deterministic() {
        for kind in FixtureKind::ALL {
            let a = make_fixture(kind, 20).unwrap();
            let b = make_fixture(kind, 20).unwrap();
            assert_eq!(a.source, b.source);
            assert_eq!(a.truth_view, b.truth_view);
            assert_eq!(a.landmarks, b.landmarks);
        }
        assert_eq!(synthetic_face_landmarks(3), synthetic_face_landmarks(3));
        assert_ne!(synthetic_face_landmarks(3), synthetic_face_landmarks(4));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in FixtureKind::ALL {
            assert_eq!(kind.name().parse::<FixtureKind>().unwrap(), kind);
        }
        assert!("cube".parse::<FixtureKind>().is_err());
    }
}
