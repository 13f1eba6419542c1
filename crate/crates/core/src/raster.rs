//! Z-buffered triangle rasterizer with perspective-correct texture lookup.
//!
//! Pixel centers sit at `(x + 0.5, y + 0.5)` and edges follow the top-left
//! fill convention, so triangles sharing an edge never both cover a pixel.
//! Rows may be split into horizontal bands rendered in parallel; each band
//! visits faces in mesh order, so the result does not depend on the split.

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraParams, EPS_Z};
use crate::image::ImageBuffer;
use crate::mesh::RangeGridMesh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("mesh has no renderable faces")]
    EmptyMesh,
    #[error("mesh has no texture coordinates")]
    MissingTexcoords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterOptions {
    /// Number of horizontal bands rendered concurrently. `1` is sequential.
    pub bands: usize,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self { bands: 1 }
    }
}

/// Result of rendering a mesh from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    /// Camera-space depth of the winning surface, `+inf` where empty.
    pub zbuffer: Vec<f64>,
    pub face_id: Vec<Option<u32>>,
    pub coverage: Vec<bool>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.zbuffer[y * self.width() + x]
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|c| **c).count()
    }
}

/// Screen-space setup for one triangle.
#[derive(Debug, Clone, Copy)]
struct ScreenTri {
    id: u32,
    pos: [Vector2<f64>; 3],
    inv_z: [f64; 3],
    /// Source-image pixel coordinates.
    tex: [Vector2<f64>; 3],
    area: f64,
    top_left: [bool; 3],
    min_row: usize,
    max_row: usize,
    min_col: usize,
    max_col: usize,
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn is_top_left(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

impl ScreenTri {
    /// Barycentric weights of pixel center `p`, or `None` when outside.
    fn weights(&self, p: &Vector2<f64>) -> Option<[f64; 3]> {
        let [a, b, c] = &self.pos;
        let w = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
        for (wi, tl) in w.iter().zip(self.top_left) {
            if *wi < 0.0 || (*wi == 0.0 && !tl) {
                return None;
            }
        }
        Some(w.map(|wi| wi / self.area))
    }

    fn depth(&self, l: &[f64; 3]) -> f64 {
        1.0 / (l[0] * self.inv_z[0] + l[1] * self.inv_z[1] + l[2] * self.inv_z[2])
    }

    fn texel(&self, l: &[f64; 3]) -> Vector2<f64> {
        let z = self.depth(l);
        let mut t = Vector2::zeros();
        for ((tex, li), iz) in self.tex.iter().zip(l).zip(&self.inv_z) {
            t += tex * (li * iz);
        }
        t * z
    }
}

fn setup(mesh: &RangeGridMesh, source: &ImageBuffer, cam: &CameraParams) -> Vec<ScreenTri> {
    let (w, h) = (cam.resolution.width as f64, cam.resolution.height as f64);
    let tex_scale = Vector2::new(source.width() as f64, source.height() as f64);
    let mut out = Vec::new();
    'faces: for (f, tri) in mesh.faces.iter().enumerate() {
        if !mesh.face_renderable(f) {
            continue;
        }
        let mut pos = [Vector2::zeros(); 3];
        let mut inv_z = [0.0; 3];
        let mut tex = [Vector2::zeros(); 3];
        for (k, &v) in tri.iter().enumerate() {
            let pc = cam.to_camera(&mesh.vertices[v as usize]);
            if pc.z <= EPS_Z {
                continue 'faces;
            }
            pos[k] = cam.project_camera(&pc).expect("depth checked");
            inv_z[k] = 1.0 / pc.z;
            tex[k] = mesh.texcoord(v).expect("renderable").component_mul(&tex_scale);
        }
        let mut area = edge(&pos[0], &pos[1], &pos[2]);
        if !area.is_finite() || area == 0.0 {
            continue;
        }
        if area < 0.0 {
            pos.swap(1, 2);
            inv_z.swap(1, 2);
            tex.swap(1, 2);
            area = -area;
        }
        let xs = pos.map(|p| p.x);
        let ys = pos.map(|p| p.y);
        let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // pixel centers within the bounding box
        let c0 = (min_x - 0.5).ceil().max(0.0);
        let c1 = (max_x - 0.5).floor().min(w - 1.0);
        let r0 = (min_y - 0.5).ceil().max(0.0);
        let r1 = (max_y - 0.5).floor().min(h - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        out.push(ScreenTri {
            id: f as u32,
            pos,
            inv_z,
            tex,
            area,
            top_left: [
                is_top_left(&pos[1], &pos[2]),
                is_top_left(&pos[2], &pos[0]),
                is_top_left(&pos[0], &pos[1]),
            ],
            min_row: r0 as usize,
            max_row: r1 as usize,
            min_col: c0 as usize,
            max_col: c1 as usize,
        });
    }
    out
}

/// Depth pass over rows `[row0, row0 + rows)`; buffers hold exactly those rows.
fn depth_pass(tris: &[ScreenTri], width: usize, row0: usize, zbuf: &mut [f64], ids: &mut [Option<u32>]) {
    let rows = zbuf.len() / width;
    let row_end = row0 + rows;
    for (k, t) in tris.iter().enumerate() {
        let r_start = t.min_row.max(row0);
        let r_end = (t.max_row + 1).min(row_end);
        for y in r_start..r_end {
            let py = y as f64 + 0.5;
            let line = (y - row0) * width;
            for x in t.min_col..=t.max_col {
                let p = Vector2::new(x as f64 + 0.5, py);
                let Some(l) = t.weights(&p) else { continue };
                let z = t.depth(&l);
                let i = line + x;
                if z < zbuf[i] {
                    zbuf[i] = z;
                    ids[i] = Some(k as u32);
                }
            }
        }
    }
}

/// Renders `mesh` from `novel_cam`, texturing from `source_image` via the
/// mesh's texture coordinates.
pub fn rasterize(
    mesh: &RangeGridMesh,
    source_image: &ImageBuffer,
    novel_cam: &CameraParams,
    opts: RasterOptions,
) -> Result<RenderOutput, RasterError> {
    if !mesh.has_texcoords() {
        return Err(RasterError::MissingTexcoords);
    }
    if !(0..mesh.face_count()).any(|f| mesh.face_renderable(f)) {
        return Err(RasterError::EmptyMesh);
    }
    let tris = setup(mesh, source_image, novel_cam);
    let width = novel_cam.resolution.width as usize;
    let height = novel_cam.resolution.height as usize;
    let n = width * height;
    let mut zbuf = vec![f64::INFINITY; n];
    // index into `tris` until the end, then remapped to face ids
    let mut slot: Vec<Option<u32>> = vec![None; n];

    let bands = opts.bands.clamp(1, height.max(1));
    if bands == 1 {
        depth_pass(&tris, width, 0, &mut zbuf, &mut slot);
    } else {
        let rows_per_band = height.div_ceil(bands);
        zbuf.par_chunks_mut(rows_per_band * width)
            .zip(slot.par_chunks_mut(rows_per_band * width))
            .enumerate()
            .for_each(|(b, (z, s))| depth_pass(&tris, width, b * rows_per_band, z, s));
    }

    let mut color = ImageBuffer::filled(width, height, [0.0; 3]);
    let mut face_id = vec![None; n];
    let mut coverage = vec![false; n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let Some(k) = slot[i] else { continue };
            let t = &tris[k as usize];
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let l = t.weights(&p).expect("winning face covers its pixel");
            let uv = t.texel(&l);
            color.set_pixel(x, y, source_image.sample_bilinear(uv.x, uv.y));
            face_id[i] = Some(t.id);
            coverage[i] = true;
        }
    }
    Ok(RenderOutput {
        color,
        zbuffer: zbuf,
        face_id,
        coverage,
    })
}
