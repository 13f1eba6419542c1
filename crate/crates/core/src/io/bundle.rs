//! Manifest-driven session directories.
//!
//! `manifest.json` names the member files; optional members that are not
//! listed load as `None`. Member names used in errors are the manifest keys:
//! `source`, `depth`, `camera`, `matte`, `generated`, `landmarks`, `reparam`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pfm::Pfm;
use super::{png, read_file, write_atomic};
use crate::camera::{CameraParams, ReparamContext};
use crate::compositor::BlendMask;
use crate::depth::DepthMap;
use crate::fit::{normalize_landmarks, LandmarkJson, LandmarkSet};
use crate::image::{GrayImage, ImageBuffer};
use crate::raster::RenderOutput;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("manifest.json not found")]
    MissingManifest,
    #[error("member `{member}` is corrupt: {reason}")]
    CorruptMember { member: String, reason: String },
    #[error("member `{member}` is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        member: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("i/o failure on {path}: {reason}")]
    IoFailure { path: PathBuf, reason: String },
}

impl BundleError {
    /// Manifest key of the offending member, if any.
    pub fn member(&self) -> Option<&str> {
        match self {
            Self::MissingManifest => Some("manifest"),
            Self::CorruptMember { member, .. } | Self::DimensionMismatch { member, .. } => Some(member),
            Self::IoFailure { .. } => None,
        }
    }

    fn corrupt(member: &str, reason: impl ToString) -> Self {
        Self::CorruptMember {
            member: member.to_string(),
            reason: reason.to_string(),
        }
    }

    fn io(path: &Path, e: impl ToString) -> Self {
        Self::IoFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub source: String,
    pub depth: String,
    pub camera: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matte: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reparam: Option<ReparamContext>,
}

impl Manifest {
    /// File names listed by the manifest.
    pub fn files(&self) -> Vec<(&'static str, &str)> {
        let mut out = vec![
            ("source", self.source.as_str()),
            ("depth", self.depth.as_str()),
            ("camera", self.camera.as_str()),
        ];
        for (k, v) in [("matte", &self.matte), ("generated", &self.generated), ("landmarks", &self.landmarks)] {
            if let Some(v) = v {
                out.push((k, v.as_str()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionBundle {
    pub source: ImageBuffer,
    pub depth: DepthMap,
    pub matte: Option<GrayImage>,
    pub generated: Option<ImageBuffer>,
    pub camera: CameraParams,
    pub landmarks: Option<LandmarkSet>,
    pub reparam: Option<ReparamContext>,
}

impl SessionBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.source.dims()
    }

    /// Checks the cross-member invariants.
    pub fn validate(&self) -> Result<(), BundleError> {
        let expected = self.source.dims();
        let check = |member: &str, got: (usize, usize)| {
            if got != expected {
                return Err(BundleError::DimensionMismatch {
                    member: member.to_string(),
                    got,
                    expected,
                });
            }
            Ok(())
        };
        check("depth", self.depth.dims())?;
        if let Some(m) = &self.matte {
            check("matte", m.dims())?;
        }
        if let Some(g) = &self.generated {
            check("generated", g.dims())?;
        }
        let r = self.camera.resolution;
        check("camera", (r.width as usize, r.height as usize))?;
        self.camera.validate().map_err(|e| BundleError::corrupt("camera", e))?;
        if let Some(ctx) = &self.reparam {
            ctx.validate().map_err(|e| BundleError::corrupt("reparam", e))?;
        }
        Ok(())
    }
}

/// A member file name must be a plain name inside the bundle directory.
fn check_file_name(member: &str, name: &str) -> Result<(), BundleError> {
    let plain = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && Path::new(name).file_name().is_some_and(|f| f == name);
    if plain {
        Ok(())
    } else {
        Err(BundleError::corrupt(member, format!("`{name}` is not a plain file name")))
    }
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, BundleError> {
    let m: Manifest = serde_json::from_slice(bytes).map_err(|e| BundleError::corrupt("manifest", e))?;
    if m.version != FORMAT_VERSION {
        return Err(BundleError::corrupt("manifest", format!("unsupported version {}", m.version)));
    }
    for (member, name) in m.files() {
        check_file_name(member, name)?;
    }
    Ok(m)
}

/// Builds a bundle from a manifest and a lookup of member bytes by file name.
pub fn load_bundle_from(
    manifest: &[u8],
    mut fetch: impl FnMut(&str) -> Option<Vec<u8>>,
) -> Result<SessionBundle, BundleError> {
    let m = parse_manifest(manifest)?;
    let mut get = |member: &str, name: &str| fetch(name).ok_or_else(|| BundleError::corrupt(member, format!("file `{name}` is missing")));

    let source = png::decode_rgb(&get("source", &m.source)?).map_err(|e| BundleError::corrupt("source", e))?;
    let pfm = Pfm::decode(&get("depth", &m.depth)?).map_err(|e| BundleError::corrupt("depth", e))?;
    if pfm.channels != 1 {
        return Err(BundleError::corrupt("depth", "expected a single-channel PFM"));
    }
    let depth = DepthMap::from_raw(pfm.width, pfm.height, pfm.to_f64()).map_err(|e| BundleError::corrupt("depth", e))?;
    let camera: CameraParams =
        serde_json::from_slice(&get("camera", &m.camera)?).map_err(|e| BundleError::corrupt("camera", e))?;
    let matte = match &m.matte {
        Some(name) => Some(png::decode_gray(&get("matte", name)?).map_err(|e| BundleError::corrupt("matte", e))?),
        None => None,
    };
    let generated = match &m.generated {
        Some(name) => Some(png::decode_rgb(&get("generated", name)?).map_err(|e| BundleError::corrupt("generated", e))?),
        None => None,
    };
    let landmarks = match &m.landmarks {
        Some(name) => {
            let raw: LandmarkJson =
                serde_json::from_slice(&get("landmarks", name)?).map_err(|e| BundleError::corrupt("landmarks", e))?;
            Some(normalize_landmarks(&raw.to_vectors()).map_err(|e| BundleError::corrupt("landmarks", e))?)
        }
        None => None,
    };
    let bundle = SessionBundle {
        source,
        depth,
        matte,
        generated,
        camera,
        landmarks,
        reparam: m.reparam,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_bundle(dir: &Path) -> Result<SessionBundle, BundleError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = match read_file(&manifest_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(BundleError::MissingManifest),
        Err(e) => return Err(BundleError::io(&manifest_path, e)),
    };
    load_bundle_from(&manifest, |name| read_file(&dir.join(name)).ok())
}

fn encode_err(member: &str, e: impl ToString) -> BundleError {
    BundleError::corrupt(member, e)
}

/// Member files of `bundle` under their default names, manifest last.
pub fn encode_bundle(bundle: &SessionBundle) -> Result<Vec<(String, Vec<u8>)>, BundleError> {
    bundle.validate()?;
    let mut files = vec![
        ("source.png".to_string(), png::encode_rgb(&bundle.source).map_err(|e| encode_err("source", e))?),
        ("depth.pfm".to_string(), encode_depth(&bundle.depth)),
        (
            "camera.json".to_string(),
            serde_json::to_vec_pretty(&bundle.camera).map_err(|e| encode_err("camera", e))?,
        ),
    ];
    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        source: "source.png".into(),
        depth: "depth.pfm".into(),
        camera: "camera.json".into(),
        matte: None,
        generated: None,
        landmarks: None,
        reparam: bundle.reparam,
    };
    if let Some(m) = &bundle.matte {
        files.push(("matte.png".into(), png::encode_gray(m).map_err(|e| encode_err("matte", e))?));
        manifest.matte = Some("matte.png".into());
    }
    if let Some(g) = &bundle.generated {
        files.push(("generated.png".into(), png::encode_rgb(g).map_err(|e| encode_err("generated", e))?));
        manifest.generated = Some("generated.png".into());
    }
    if let Some(l) = &bundle.landmarks {
        files.push((
            "landmarks.json".into(),
            serde_json::to_vec(&LandmarkJson::from(l.clone())).map_err(|e| encode_err("landmarks", e))?,
        ));
        manifest.landmarks = Some("landmarks.json".into());
    }
    files.push((
        MANIFEST_NAME.into(),
        serde_json::to_vec_pretty(&manifest).map_err(|e| encode_err("manifest", e))?,
    ));
    Ok(files)
}

/// Writes `bundle` into `dir` (created if needed).
pub fn save_bundle(dir: &Path, bundle: &SessionBundle) -> Result<(), BundleError> {
    let files = encode_bundle(bundle)?;
    fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes).map_err(|e| BundleError::io(&path, e))?;
    }
    Ok(())
}

/// Depth as a `Pf` map with holes written as zero.
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    Pfm::gray(depth.width(), depth.height(), &depth.encoded())
        .expect("depth length matches dimensions")
        .encode()
}

/// Writes `warped.png`, `blended.png`, `mask.png` and `zbuffer.pfm`.
pub fn save_outputs(
    dir: &Path,
    render: &RenderOutput,
    blended: &ImageBuffer,
    mask: &BlendMask,
) -> Result<Vec<PathBuf>, BundleError> {
    let dims = render.color.dims();
    for (member, got) in [("blended", blended.dims()), ("mask", mask.dims())] {
        if got != dims {
            return Err(BundleError::DimensionMismatch {
                member: member.into(),
                got,
                expected: dims,
            });
        }
    }
    let files = [
        ("warped.png", png::encode_rgb(&render.color).map_err(|e| encode_err("warped", e))?),
        ("blended.png", png::encode_rgb(blended).map_err(|e| encode_err("blended", e))?),
        ("mask.png", png::encode_gray(mask.weights()).map_err(|e| encode_err("mask", e))?),
        (
            "zbuffer.pfm",
            Pfm::gray(dims.0, dims.1, &render.zbuffer).expect("z-buffer length matches").encode(),
        ),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes).map_err(|e| BundleError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
