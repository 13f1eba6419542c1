//! End-to-end correction: smooth, mesh, cull, rasterize, visibility, mask,
//! blend. Camera-independent stages live in [`Prebuilt`] so that repeated
//! renders of one session only pay for the per-view work.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraParams, ReparamContext};
use crate::compositor::{build_blend_mask, dilate_and_blur, laplacian_blend, BlendMask, CompositeError};
use crate::depth::{smooth_depth_bilateral, BilateralParams, DepthError, DepthMap};
use crate::image::ImageBuffer;
use crate::io::SessionBundle;
use crate::mesh::{compute_texcoords, cull_grazing_faces, depth_to_range_grid, vertex_visibility, MeshError, RangeGridMesh, DEFAULT_CULL_DEG};
use crate::raster::{rasterize, RasterError, RasterOptions, RenderOutput};
use crate::view::{novel_camera, ViewDelta, ViewError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("blending needs the `generated` member, which the bundle lacks")]
    MissingGenerated,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("smooth: {0}")]
    Smooth(#[from] DepthError),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("camera: {0}")]
    Camera(#[from] CameraError),
    #[error("view: {0}")]
    View(#[from] ViewError),
    #[error("rasterize: {0}")]
    Raster(#[from] RasterError),
    #[error("blend: {0}")]
    Composite(#[from] CompositeError),
}

impl PipelineError {
    /// True for errors caused by inputs or parameters rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::MissingGenerated | Self::BadParameter(_) | Self::View(_) | Self::Camera(_) | Self::Smooth(DepthError::BadKernel(_)) | Self::Smooth(DepthError::BadSigma(_))
        ) || matches!(self, Self::Composite(CompositeError::BadKernel(_)) | Self::Composite(CompositeError::TooSmall { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub bilateral: BilateralParams,
    pub cull_deg: f64,
    pub erode_px: usize,
    pub blur_px: usize,
    pub levels: usize,
    #[serde(skip)]
    pub raster: RasterOptions,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            bilateral: BilateralParams::default(),
            cull_deg: DEFAULT_CULL_DEG,
            erode_px: 2,
            blur_px: 5,
            levels: 3,
            raster: RasterOptions::default(),
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.cull_deg > 0.0 && self.cull_deg <= 90.0) {
            return Err(PipelineError::BadParameter(format!("cull threshold {} is outside (0, 90]", self.cull_deg)));
        }
        if self.blur_px == 0 || self.blur_px.is_multiple_of(2) {
            return Err(PipelineError::BadParameter(format!("blur width {} must be odd", self.blur_px)));
        }
        if self.levels == 0 {
            return Err(PipelineError::BadParameter("pyramid needs at least one level".into()));
        }
        if self.raster.bands == 0 {
            return Err(PipelineError::BadParameter("raster bands must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Warped,
    Generated,
    Blended,
    Visibility,
}

impl RenderMode {
    pub const ALL: [RenderMode; 4] = [Self::Warped, Self::Generated, Self::Blended, Self::Visibility];

    pub fn name(self) -> &'static str {
        match self {
            Self::Warped => "warped",
            Self::Generated => "generated",
            Self::Blended => "blended",
            Self::Visibility => "visibility",
        }
    }

    pub fn needs_generated(self) -> bool {
        matches!(self, Self::Generated | Self::Blended)
    }
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (warped, generated, blended, visibility)"))
    }
}

/// Camera-independent products of a bundle.
#[derive(Debug, Clone)]
pub struct Prebuilt {
    pub smoothed: DepthMap,
    /// Range-grid mesh with texture coordinates from the original camera.
    pub mesh: RangeGridMesh,
    /// Mesh centroid, the pivot for pose deltas.
    pub pivot: Vector3<f64>,
    pub reparam: ReparamContext,
    pub smooth_time: Duration,
    pub mesh_time: Duration,
}

impl Prebuilt {
    pub fn new(bundle: &SessionBundle, bilateral: &BilateralParams) -> Result<Self, PipelineError> {
        let t = Instant::now();
        let smoothed = smooth_depth_bilateral(&bundle.depth, bilateral)?;
        let smooth_time = t.elapsed();
        let t = Instant::now();
        let grid = depth_to_range_grid(&smoothed, &bundle.camera)?;
        let mesh = compute_texcoords(&grid, &bundle.camera);
        let mesh_time = t.elapsed();
        let pivot = mesh.centroid();
        let reparam = match bundle.reparam {
            Some(ctx) => ctx,
            None => default_reparam(&bundle.camera, &pivot)?,
        };
        Ok(Self {
            smoothed,
            mesh,
            pivot,
            reparam,
            smooth_time,
            mesh_time,
        })
    }
}

/// Anchor used when a bundle carries none: the pivot's depth stands in for
/// the eye depth.
pub fn default_reparam(camera: &CameraParams, pivot: &Vector3<f64>) -> Result<ReparamContext, CameraError> {
    ReparamContext::new(camera.to_camera(pivot).z, camera.focal, camera.t_z())
}

/// Everything produced for one novel view.
#[derive(Debug, Clone)]
pub struct ViewResult {
    pub camera: CameraParams,
    pub render: RenderOutput,
    /// Mesh with cull flags and vertex visibility for this view.
    pub mesh: RangeGridMesh,
    /// Visibility mask times the matte, before erosion and blur.
    pub mask: BlendMask,
    pub composite_mask: BlendMask,
    pub blended: Option<ImageBuffer>,
    pub visible_fraction: f64,
    pub timings: Vec<(&'static str, Duration)>,
}

impl ViewResult {
    /// Image shown for `mode`.
    pub fn image(&self, mode: RenderMode, bundle: &SessionBundle) -> Result<ImageBuffer, PipelineError> {
        match mode {
            RenderMode::Warped => Ok(self.render.color.clone()),
            RenderMode::Generated => bundle.generated.clone().ok_or(PipelineError::MissingGenerated),
            RenderMode::Blended => self.blended.clone().ok_or(PipelineError::MissingGenerated),
            RenderMode::Visibility => {
                let m = self.mask.weights();
                Ok(ImageBuffer::from_fn(m.width(), m.height(), |x, y| [m.get(x, y); 3]))
            }
        }
    }
}

/// Renders the bundle from the camera implied by `delta`. With `blend` set,
/// the generated image is composited under the warped one.
pub fn render_view(
    bundle: &SessionBundle,
    prebuilt: &Prebuilt,
    delta: &ViewDelta,
    params: &PipelineParams,
    blend: bool,
) -> Result<ViewResult, PipelineError> {
    params.validate()?;
    if blend && bundle.generated.is_none() {
        return Err(PipelineError::MissingGenerated);
    }
    let mut timings = Vec::new();
    let camera = novel_camera(&bundle.camera, &prebuilt.pivot, delta, &prebuilt.reparam)?;

    let t = Instant::now();
    let culled = cull_grazing_faces(&prebuilt.mesh, &camera, params.cull_deg);
    timings.push(("cull", t.elapsed()));

    let t = Instant::now();
    let render = rasterize(&culled, &bundle.source, &camera, params.raster)?;
    timings.push(("rasterize", t.elapsed()));

    let t = Instant::now();
    let mesh = vertex_visibility(&culled, &render, &camera);
    timings.push(("visibility", t.elapsed()));

    let t = Instant::now();
    let mask = build_blend_mask(&render, &mesh, bundle.matte.as_ref())?;
    let composite_mask = dilate_and_blur(&mask, params.erode_px, params.blur_px)?;
    timings.push(("mask", t.elapsed()));

    let blended = if blend {
        let t = Instant::now();
        let generated = bundle.generated.as_ref().ok_or(PipelineError::MissingGenerated)?;
        let out = laplacian_blend(&render.color, generated, &composite_mask, params.levels)?;
        timings.push(("blend", t.elapsed()));
        Some(out)
    } else {
        None
    };

    let visible_fraction = visible_fraction(&mask, bundle);
    Ok(ViewResult {
        camera,
        render,
        mesh,
        mask,
        composite_mask,
        blended,
        visible_fraction,
        timings,
    })
}

/// Covered and visible face pixels over all face pixels. Without a matte
/// every pixel counts as face.
pub fn visible_fraction(mask: &BlendMask, bundle: &SessionBundle) -> f64 {
    let face = match &bundle.matte {
        Some(m) => m.values().iter().filter(|v| **v > 0.5).count(),
        None => bundle.source.width() * bundle.source.height(),
    };
    if face == 0 {
        return 0.0;
    }
    mask.selected_count() as f64 / face as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{make_fixture, FixtureKind};
    use crate::metrics::psnr;

    fn bundle(kind: FixtureKind, size: usize) -> SessionBundle {
        let f = make_fixture(kind, size).unwrap();
        SessionBundle {
            source: f.source,
            depth: f.depth,
            matte: Some(f.matte),
            generated: Some(f.generated),
            camera: f.camera,
            landmarks: Some(f.landmarks),
            reparam: Some(f.reparam),
        }
    }

    #[test]
    fn identity_view_reproduces_source() {
        let b = bundle(FixtureKind::Ridge, 32);
        let pre = Prebuilt::new(&b, &BilateralParams::default()).unwrap();
        let v = render_view(&b, &pre, &ViewDelta::default(), &PipelineParams::default(), true).unwrap();
        assert_eq!(v.camera, b.camera);
        let covered = BlendMask::new(crate::image::GrayImage::from_fn(32, 32, |x, y| {
            if v.render.coverage[y * 32 + x] { 1.0 } else { 0.0 }
        }));
        assert!(psnr(&v.render.color, &b.source, Some(&covered)).unwrap() >= 40.0);
        assert!(v.visible_fraction > 0.9);
        assert!(v.blended.is_some());
    }

    #[test]
    fn missing_generated() {
        let mut b = bundle(FixtureKind::Plane, 16);
        b.generated = None;
        let pre = Prebuilt::new(&b, &BilateralParams::default()).unwrap();
        let err = render_view(&b, &pre, &ViewDelta::default(), &PipelineParams::default(), true).unwrap_err();
        assert_eq!(err, PipelineError::MissingGenerated);
        assert!(err.is_validation());
        let v = render_view(&b, &pre, &ViewDelta::default(), &PipelineParams::default(), false).unwrap();
        assert_eq!(v.image(RenderMode::Generated, &b), Err(PipelineError::MissingGenerated));
        assert!(v.image(RenderMode::Visibility, &b).is_ok());
    }

    #[test]
    fn parameter_checks() {
        let b = bundle(FixtureKind::Plane, 16);
        let pre = Prebuilt::new(&b, &BilateralParams::default()).unwrap();
        for p in [
            PipelineParams { cull_deg: 0.0, ..Default::default() },
            PipelineParams { cull_deg: 91.0, ..Default::default() },
            PipelineParams { blur_px: 4, ..Default::default() },
        ] {
            assert!(render_view(&b, &pre, &ViewDelta::default(), &p, false).unwrap_err().is_validation());
        }
        let far = ViewDelta::yaw(120.0);
        assert!(render_view(&b, &pre, &far, &PipelineParams::default(), false).unwrap_err().is_validation());
    }

    #[test]
    fn renders_are_deterministic_across_band_counts() {
        let b = bundle(FixtureKind::SphereCap, 32);
        let pre = Prebuilt::new(&b, &BilateralParams::default()).unwrap();
        let d = ViewDelta::yaw(12.0);
        let one = render_view(&b, &pre, &d, &PipelineParams::default(), true).unwrap();
        let many = PipelineParams {
            raster: RasterOptions { bands: 5 },
            ..Default::default()
        };
        let five = render_view(&b, &pre, &d, &many, true).unwrap();
        assert_eq!(one.render, five.render);
        assert_eq!(one.blended, five.blended);
        assert_eq!(one.visible_fraction, five.visible_fraction);
    }

    #[test]
    fn mode_names() {
        for m in RenderMode::ALL {
            assert_eq!(m.name().parse::<RenderMode>().unwrap(), m);
        }
        assert!("depth".parse::<RenderMode>().is_err());
    }
}
