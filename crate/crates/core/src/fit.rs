//! Camera recovery from 3D face landmarks.
//!
//! The objective is `alpha1 * photometric + alpha2 * landmark`, where the
//! landmark term is the summed squared distance between normalized keypoint
//! sets. Keypoints predicted from a camera are `(u, v, f * z_cam / t_z)`: the
//! pixel position plus camera depth expressed in pixels at the face distance.
//! Normalization (centroid at the origin, RMS radius one) removes image
//! translation and scale, so only pose and perspective strength matter.
//!
//! Focal length is never a free parameter: it follows `t_z` through
//! [`reparam_focal`].

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{reparam_focal, rotation_from_axis_angle, CameraError, CameraParams, ReparamContext, EPS_Z};
use crate::image::ImageBuffer;
use crate::metrics::{self, MetricError};

/// Landmarks per face mesh.
pub const LANDMARK_COUNT: usize = 478;

const NORMALIZED_TOL: f64 = 1e-9;
/// Loss below which a fit counts as exact.
const LOSS_FLOOR: f64 = 1e-14;
/// Window, in iterations, of the convergence test.
const CONVERGENCE_WINDOW: usize = 10;
/// Step halvings tried before an iteration gives up.
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("expected {LANDMARK_COUNT} landmarks, got {0}")]
    WrongCount(usize),
    #[error("landmarks contain non-finite coordinates")]
    NonFinite,
    #[error("landmarks have zero spread")]
    DegenerateLandmarks,
    #[error("landmarks are not normalized")]
    NotNormalized,
    #[error("loss became non-finite")]
    DivergedFit,
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn check_points(points: &[Vector3<f64>]) -> Result<(), FitError> {
    if points.len() != LANDMARK_COUNT {
        return Err(FitError::WrongCount(points.len()));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

/// Normalized 3D keypoints: centroid at the origin, RMS radius one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LandmarkJson", into = "LandmarkJson")]
pub struct LandmarkSet {
    points: Vec<Vector3<f64>>,
}

impl LandmarkSet {
    /// Accepts points that already satisfy the normalization convention.
    pub fn from_normalized(points: Vec<Vector3<f64>>) -> Result<Self, FitError> {
        check_points(&points)?;
        let n = points.len() as f64;
        let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
        let rms = (points.iter().map(|p| p.norm_squared()).sum::<f64>() / n).sqrt();
        if centroid.amax() > NORMALIZED_TOL || (rms - 1.0).abs() > NORMALIZED_TOL {
            return Err(FitError::NotNormalized);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }
}

/// Raw landmark file contents: `{"points": [[x, y, z], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkJson {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkJson {
    pub fn to_vectors(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::from(*p)).collect()
    }
}

impl From<LandmarkSet> for LandmarkJson {
    fn from(s: LandmarkSet) -> Self {
        Self {
            points: s.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

impl TryFrom<LandmarkJson> for LandmarkSet {
    type Error = FitError;

    fn try_from(j: LandmarkJson) -> Result<Self, FitError> {
        LandmarkSet::from_normalized(j.to_vectors())
    }
}

/// Landmarks in scene coordinates, used as the 3D model being fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLandmarks(Vec<Vector3<f64>>);

impl SceneLandmarks {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, FitError> {
        check_points(&points)?;
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.0
    }
}

/// Centers the points and scales them to unit RMS radius.
pub fn normalize_landmarks(raw: &[Vector3<f64>]) -> Result<LandmarkSet, FitError> {
    check_points(raw)?;
    let n = raw.len() as f64;
    let centroid: Vector3<f64> = raw.iter().sum::<Vector3<f64>>() / n;
    let centered: Vec<Vector3<f64>> = raw.iter().map(|p| p - centroid).collect();
    let rms = (centered.iter().map(|p| p.norm_squared()).sum::<f64>() / n).sqrt();
    if !(rms > 1e-12 * (1.0 + centroid.amax())) {
        return Err(FitError::DegenerateLandmarks);
    }
    let points = centered.into_iter().map(|p| p / rms).collect();
    Ok(LandmarkSet { points })
}

/// Summed squared distance between corresponding keypoints.
pub fn landmark_loss(m: &LandmarkSet, m_hat: &LandmarkSet) -> f64 {
    m.points
        .iter()
        .zip(&m_hat.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum()
}

/// Image distance used as the photometric term.
pub trait PhotometricDistance {
    fn distance(&self, target: &ImageBuffer, rendered: &ImageBuffer) -> Result<f64, FitError>;
}

/// Mean squared error over all channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquaredError;

impl PhotometricDistance for MeanSquaredError {
    fn distance(&self, target: &ImageBuffer, rendered: &ImageBuffer) -> Result<f64, FitError> {
        if target.dims() != rendered.dims() {
            return Err(FitError::DimensionMismatch(target.dims(), rendered.dims()));
        }
        let n = target.values().len() as f64;
        Ok(target
            .values()
            .iter()
            .zip(rendered.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

/// `1 - SSIM`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SsimDistance;

impl PhotometricDistance for SsimDistance {
    fn distance(&self, target: &ImageBuffer, rendered: &ImageBuffer) -> Result<f64, FitError> {
        if target.dims() != rendered.dims() {
            return Err(FitError::DimensionMismatch(target.dims(), rendered.dims()));
        }
        Ok(1.0 - metrics::ssim(target, rendered)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Weight of the photometric term.
    pub alpha1: f64,
    /// Weight of the landmark term.
    pub alpha2: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Iterations spent on one parameter block before switching.
    pub alternation_period: usize,
    /// Relative loss change over ten iterations that counts as converged.
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            learning_rate: 1e-3,
            max_iters: 200,
            alternation_period: 1,
            convergence_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::BadConfig(m.to_string()));
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return bad("alphas must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.max_iters == 0 || self.alternation_period == 0 {
            return bad("iteration counts must be positive");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence tolerance must be non-negative");
        }
        Ok(())
    }
}

/// `alpha1 * photometric(target, rendered) + alpha2 * landmark_loss(m, m_hat)`.
pub fn combined_loss(
    target: &ImageBuffer,
    rendered: &ImageBuffer,
    m: &LandmarkSet,
    m_hat: &LandmarkSet,
    cfg: &FitConfig,
    photometric: &dyn PhotometricDistance,
) -> Result<f64, FitError> {
    if target.dims() != rendered.dims() {
        return Err(FitError::DimensionMismatch(target.dims(), rendered.dims()));
    }
    let photo = if cfg.alpha1 == 0.0 { 0.0 } else { photometric.distance(target, rendered)? };
    Ok(cfg.alpha1 * photo + cfg.alpha2 * landmark_loss(m, m_hat))
}

/// Keypoints `(u, v, f * z_cam / t_z)` of scene points seen by `cam`.
pub fn predict_keypoints(reference: &SceneLandmarks, cam: &CameraParams) -> Result<Vec<Vector3<f64>>, FitError> {
    let tz = cam.t_z();
    if !(tz > EPS_Z) {
        return Err(CameraError::NonPositiveDistance(tz).into());
    }
    reference
        .0
        .iter()
        .map(|x| {
            let pc = cam.to_camera(x);
            let px = cam.project_camera(&pc)?;
            Ok(Vector3::new(px.x, px.y, cam.focal * pc.z / tz))
        })
        .collect()
}

/// Normalized keypoints predicted from `cam`.
pub fn predict_landmarks(reference: &SceneLandmarks, cam: &CameraParams) -> Result<LandmarkSet, FitError> {
    normalize_landmarks(&predict_keypoints(reference, cam)?)
}

/// Gradient of the landmark loss with respect to a left-multiplied rotation
/// increment (axis-angle, radians) and the translation, with the focal
/// length slaved to `t_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradient {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

/// Camera with `pose` and the focal implied by `ctx`.
pub fn slaved_camera(
    template: &CameraParams,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    ctx: &ReparamContext,
) -> Result<CameraParams, FitError> {
    let mut cam = template.with_pose(rotation, translation);
    cam.focal = reparam_focal(ctx, translation.z)?;
    Ok(cam)
}

/// Landmark loss and its analytic gradient.
pub fn landmark_loss_and_gradient(
    reference: &SceneLandmarks,
    observed: &LandmarkSet,
    cam: &CameraParams,
    ctx: &ReparamContext,
) -> Result<(f64, PoseGradient), FitError> {
    let f = cam.focal;
    let tz = cam.t_z();
    let n = LANDMARK_COUNT as f64;
    let rotated: Vec<Vector3<f64>> = reference.0.iter().map(|x| cam.rotation * x).collect();
    let kp = predict_keypoints(reference, cam)?;

    let centroid: Vector3<f64> = kp.iter().sum::<Vector3<f64>>() / n;
    let d: Vec<Vector3<f64>> = kp.iter().map(|k| k - centroid).collect();
    let r = (d.iter().map(|v| v.norm_squared()).sum::<f64>() / n).sqrt();
    if !(r > 0.0) {
        return Err(FitError::DegenerateLandmarks);
    }
    let g_n: Vec<Vector3<f64>> = d
        .iter()
        .zip(&observed.points)
        .map(|(di, m)| 2.0 * (di / r - m))
        .collect();
    let loss: f64 = d
        .iter()
        .zip(&observed.points)
        .map(|(di, m)| (di / r - m).norm_squared())
        .sum();
    if !loss.is_finite() {
        return Err(FitError::DivergedFit);
    }

    // through the RMS scale, then the centering
    let dot: f64 = g_n.iter().zip(&d).map(|(g, di)| g.dot(di)).sum();
    let g_d: Vec<Vector3<f64>> = g_n
        .iter()
        .zip(&d)
        .map(|(g, di)| g / r - di * (dot / (n * r * r * r)))
        .collect();
    let mean_g: Vector3<f64> = g_d.iter().sum::<Vector3<f64>>() / n;

    let df_dtz = ctx.focal_slope();
    let mut g_rot = Vector3::zeros();
    let mut g_t = Vector3::zeros();
    let mut g_tz_extra = 0.0;
    for ((gd, y), k) in g_d.iter().zip(&rotated).zip(&kp) {
        let gk = gd - mean_g;
        let p = y + cam.translation;
        let (x_, y_, z_) = (p.x, p.y, p.z);
        let g_p = Vector3::new(
            gk.x * f / z_,
            gk.y * f / z_,
            -gk.x * f * x_ / (z_ * z_) - gk.y * f * y_ / (z_ * z_) + gk.z * f / tz,
        );
        g_rot += y.cross(&g_p);
        g_t += g_p;
        let dk_df = Vector3::new(x_ / z_, y_ / z_, z_ / tz);
        g_tz_extra += gk.dot(&dk_df) * df_dtz - gk.z * f * z_ / (tz * tz);
        let _ = k;
    }
    g_t.z += g_tz_extra;
    Ok((
        loss,
        PoseGradient {
            rotation: g_rot,
            translation: g_t,
        },
    ))
}

/// Additional camera-dependent term, typically a photometric distance
/// between the target photo and a render from the candidate camera.
pub trait CameraObjective {
    fn value(&self, cam: &CameraParams) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub camera: CameraParams,
    /// Objective after each iteration.
    pub loss_trace: Vec<f64>,
    /// Camera distance after each iteration.
    pub distance_trace: Vec<f64>,
    /// Focal length after each iteration.
    pub focal_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Rotation,
    Translation,
}

/// First and second moment state for one parameter block.
#[derive(Debug, Clone, Default)]
struct Adam {
    m: Vector3<f64>,
    v: Vector3<f64>,
    steps: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    /// Proposed step for gradient `g`; state is only committed on accept.
    fn propose(&self, g: &Vector3<f64>, lr: f64) -> (Vector3<f64>, Adam) {
        let steps = self.steps + 1;
        let m = self.m * Self::BETA1 + g * (1.0 - Self::BETA1);
        let v = self.v * Self::BETA2 + g.component_mul(g) * (1.0 - Self::BETA2);
        let m_hat = m / (1.0 - Self::BETA1.powi(steps));
        let v_hat = v / (1.0 - Self::BETA2.powi(steps));
        let step = -lr * m_hat.zip_map(&v_hat, |a, b| a / (b.sqrt() + Self::EPS));
        (step, Adam { m, v, steps })
    }
}

struct Problem<'a> {
    reference: &'a SceneLandmarks,
    observed: &'a LandmarkSet,
    template: &'a CameraParams,
    ctx: &'a ReparamContext,
    cfg: &'a FitConfig,
    extra: Option<&'a dyn CameraObjective>,
}

impl Problem<'_> {
    fn camera(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<CameraParams, FitError> {
        slaved_camera(self.template, rotation, translation, self.ctx)
    }

    fn loss(&self, cam: &CameraParams) -> Result<f64, FitError> {
        let lm = landmark_loss(&predict_landmarks(self.reference, cam)?, self.observed);
        let extra = match self.extra {
            Some(obj) if self.cfg.alpha1 != 0.0 => self.cfg.alpha1 * obj.value(cam),
            _ => 0.0,
        };
        Ok(self.cfg.alpha2 * lm + extra)
    }

    fn gradient(&self, cam: &CameraParams) -> Result<PoseGradient, FitError> {
        let (_, g) = landmark_loss_and_gradient(self.reference, self.observed, cam, self.ctx)?;
        let mut g = PoseGradient {
            rotation: g.rotation * self.cfg.alpha2,
            translation: g.translation * self.cfg.alpha2,
        };
        if let (Some(obj), true) = (self.extra, self.cfg.alpha1 != 0.0) {
            let fd = numeric_gradient(cam, self.ctx, |c| obj.value(c))?;
            g.rotation += fd.rotation * self.cfg.alpha1;
            g.translation += fd.translation * self.cfg.alpha1;
        }
        Ok(g)
    }
}

/// Central-difference gradient of `f` in the same parametrization as
/// [`landmark_loss_and_gradient`].
pub fn numeric_gradient(
    cam: &CameraParams,
    ctx: &ReparamContext,
    f: impl Fn(&CameraParams) -> f64,
) -> Result<PoseGradient, FitError> {
    const H: f64 = 1e-5;
    let mut out = PoseGradient {
        rotation: Vector3::zeros(),
        translation: Vector3::zeros(),
    };
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = H;
        let plus = slaved_camera(cam, rotation_from_axis_angle(&e) * cam.rotation, cam.translation, ctx)?;
        let minus = slaved_camera(cam, rotation_from_axis_angle(&-e) * cam.rotation, cam.translation, ctx)?;
        out.rotation[k] = (f(&plus) - f(&minus)) / (2.0 * H);
        let plus = slaved_camera(cam, cam.rotation, cam.translation + e, ctx)?;
        let minus = slaved_camera(cam, cam.rotation, cam.translation - e, ctx)?;
        out.translation[k] = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    Ok(out)
}

/// Fits rotation and translation so that `reference` projects onto
/// `observed`, with focal slaved to `t_z`.
pub fn fit_camera(
    reference: &SceneLandmarks,
    observed: &LandmarkSet,
    init: &CameraParams,
    ctx: &ReparamContext,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    fit_camera_with(reference, observed, init, ctx, cfg, None)
}

/// [`fit_camera`] with an optional extra term weighted by `alpha1`. Its
/// gradient is taken by central differences.
///
/// Rotation and translation blocks alternate every `alternation_period`
/// iterations. Each block takes Adam-scaled steps of size `learning_rate`
/// (radians for rotation, units of the initial `t_z` for translation). A
/// step that would raise the loss is halved until it does not, so the loss
/// trace never increases.
pub fn fit_camera_with(
    reference: &SceneLandmarks,
    observed: &LandmarkSet,
    init: &CameraParams,
    ctx: &ReparamContext,
    cfg: &FitConfig,
    extra: Option<&dyn CameraObjective>,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    init.validate()?;
    ctx.validate()?;
    let problem = Problem {
        reference,
        observed,
        template: init,
        ctx,
        cfg,
        extra,
    };
    let scale = init.t_z();
    let mut rotation = init.rotation;
    let mut translation = init.translation;
    let mut cam = problem.camera(rotation, translation)?;
    let mut loss = problem.loss(&cam)?;
    if !loss.is_finite() {
        return Err(FitError::DivergedFit);
    }

    let mut stalled = [false; 2];
    let mut adam = [Adam::default(), Adam::default()];
    let mut loss_trace = Vec::with_capacity(cfg.max_iters);
    let mut distance_trace = Vec::with_capacity(cfg.max_iters);
    let mut focal_trace = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;

    for it in 0..cfg.max_iters {
        if loss <= LOSS_FLOOR {
            converged = true;
            break;
        }
        let block = if (it / cfg.alternation_period).is_multiple_of(2) { Block::Rotation } else { Block::Translation };
        let b = block as usize;
        let grad = problem.gradient(&cam)?;
        if !(grad.rotation.iter().chain(grad.translation.iter()).all(|v| v.is_finite())) {
            return Err(FitError::DivergedFit);
        }
        let (g, unit) = match block {
            Block::Rotation => (grad.rotation, 1.0),
            Block::Translation => (grad.translation * scale, scale),
        };
        let (step, next_state) = adam[b].propose(&g, cfg.learning_rate);
        // backtracking: halve the step until the loss does not rise
        let mut accepted = false;
        let mut factor = 1.0;
        for _ in 0..MAX_HALVINGS {
            let s = step * factor;
            let (cand_r, cand_t) = match block {
                Block::Rotation => (rotation_from_axis_angle(&s) * rotation, translation),
                Block::Translation => (rotation, translation + s * unit),
            };
            let candidate = problem
                .camera(cand_r, cand_t)
                .and_then(|c| problem.loss(&c).map(|l| (c, l)));
            match candidate {
                Ok((c, l)) if l.is_finite() && l <= loss => {
                    rotation = cand_r;
                    translation = cand_t;
                    cam = c;
                    loss = l;
                    accepted = true;
                    break;
                }
                Ok((_, l)) if l.is_nan() => return Err(FitError::DivergedFit),
                // overshoot, or a candidate that put points behind the camera
                _ => factor *= 0.5,
            }
        }
        if accepted {
            adam[b] = next_state;
            stalled[b] = false;
        } else {
            // stale momentum can point uphill; restart from the current gradient
            stalled[b] = adam[b].steps == 0;
            adam[b] = Adam::default();
        }
        loss_trace.push(loss);
        distance_trace.push(cam.t_z());
        focal_trace.push(cam.focal);

        let k = loss_trace.len();
        if k > CONVERGENCE_WINDOW {
            let before = loss_trace[k - 1 - CONVERGENCE_WINDOW];
            if before - loss <= cfg.convergence_tol * before {
                converged = true;
                break;
            }
        }
        if stalled.iter().all(|s| *s) {
            converged = true;
            break;
        }
    }
    if loss <= LOSS_FLOOR {
        converged = true;
    }
    let iterations_run = loss_trace.len();
    Ok(FitResult {
        camera: cam,
        loss_trace,
        distance_trace,
        focal_trace,
        iterations_run,
        converged,
    })
}
