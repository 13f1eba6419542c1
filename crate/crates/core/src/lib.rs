//! Perspective correction for close-up portraits: a depth map is turned into
//! a range-grid mesh, re-rendered from a novel camera, and composited with a
//! generated image wherever the warped view has no reliable texture.

// `!(x > y)` comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod compositor;
pub mod depth;
pub mod fit;
pub mod fixture;
pub mod image;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod view;

pub use camera::{CameraError, CameraParams, ReparamContext, Resolution};
pub use compositor::BlendMask;
pub use depth::{BilateralParams, DepthMap};
pub use fit::{FitConfig, FitResult, LandmarkSet};
pub use image::{GrayImage, ImageBuffer};
pub use io::SessionBundle;
pub use mesh::RangeGridMesh;
pub use pipeline::{PipelineParams, Prebuilt, RenderMode};
pub use raster::{RasterOptions, RenderOutput};
pub use view::{DistanceChange, ViewDelta};
