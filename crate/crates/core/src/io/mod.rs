//! Session bundle format and raster codecs.

pub mod bundle;
pub mod pfm;
pub mod png;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use bundle::{load_bundle, load_bundle_from, save_bundle, save_outputs, BundleError, Manifest, SessionBundle};

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // temp files default to 0600; outputs should be ordinary files
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> std::io::Result<Vec<u8>> {
    fs::read(path)
}
