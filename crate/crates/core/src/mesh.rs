//! Range-grid meshes built from depth maps, plus the per-view flags used for
//! compositing: grazing-face culling and z-buffer vertex visibility.

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::{CameraParams, EPS_Z};
use crate::depth::DepthMap;
use crate::raster::RenderOutput;

/// Relative depth slack for the z-buffer visibility test.
pub const VISIBILITY_EPS: f64 = 1e-3;

/// Default grazing angle, degrees.
pub const DEFAULT_CULL_DEG: f64 = 80.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("depth map has no 2x2 block of valid pixels")]
    DegenerateDepth,
    #[error("depth map is {depth:?} but camera resolution is {camera:?}")]
    ResolutionMismatch { depth: (usize, usize), camera: (u32, u32) },
}

/// Triangle mesh whose vertices are back-projected depth pixels, connected
/// by grid adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeGridMesh {
    grid_width: usize,
    grid_height: usize,
    /// World-space positions.
    pub vertices: Vec<Vector3<f64>>,
    /// `(row, col)` of the source pixel of each vertex.
    pub grid_index: Vec<(u32, u32)>,
    pub faces: Vec<[u32; 3]>,
    /// `None` until [`compute_texcoords`] runs. Per vertex, `None` marks a
    /// vertex that could not be projected into the source camera.
    pub texcoords: Option<Vec<Option<Vector2<f64>>>>,
    pub vertex_visible: Vec<bool>,
    pub face_culled: Vec<bool>,
}

impl RangeGridMesh {
    /// Assembles a mesh from explicit parts. Flags start cleared and texture
    /// coordinates unset.
    pub fn from_parts(vertices: Vec<Vector3<f64>>, grid_index: Vec<(u32, u32)>, faces: Vec<[u32; 3]>) -> Self {
        assert_eq!(vertices.len(), grid_index.len(), "one grid cell per vertex");
        assert!(
            faces.iter().flatten().all(|&v| (v as usize) < vertices.len()),
            "face index out of range"
        );
        let grid_height = grid_index.iter().map(|g| g.0 as usize + 1).max().unwrap_or(0);
        let grid_width = grid_index.iter().map(|g| g.1 as usize + 1).max().unwrap_or(0);
        let (nv, nf) = (vertices.len(), faces.len());
        Self {
            grid_width,
            grid_height,
            vertices,
            grid_index,
            faces,
            texcoords: None,
            vertex_visible: vec![true; nv],
            face_culled: vec![false; nf],
        }
    }

    /// Disjoint union; `other`'s faces come after this mesh's faces.
    pub fn merged(&self, other: &RangeGridMesh) -> RangeGridMesh {
        let offset = self.vertices.len() as u32;
        let mut out = self.clone();
        out.grid_width = self.grid_width.max(other.grid_width);
        out.grid_height = self.grid_height.max(other.grid_height);
        out.vertices.extend_from_slice(&other.vertices);
        out.grid_index.extend_from_slice(&other.grid_index);
        out.faces.extend(other.faces.iter().map(|f| f.map(|v| v + offset)));
        out.texcoords = match (&self.texcoords, &other.texcoords) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        out.vertex_visible.extend_from_slice(&other.vertex_visible);
        out.face_culled.extend_from_slice(&other.face_culled);
        out
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_width, self.grid_height)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn has_texcoords(&self) -> bool {
        self.texcoords.is_some()
    }

    pub fn texcoord(&self, v: u32) -> Option<Vector2<f64>> {
        self.texcoords.as_ref().and_then(|t| t[v as usize])
    }

    /// A face takes part in rendering when it is not culled and all of its
    /// vertices carry texture coordinates.
    pub fn face_renderable(&self, f: usize) -> bool {
        if self.face_culled[f] {
            return false;
        }
        match &self.texcoords {
            Some(t) => self.faces[f].iter().all(|&v| t[v as usize].is_some()),
            None => false,
        }
    }

    pub fn culled_count(&self) -> usize {
        self.face_culled.iter().filter(|c| **c).count()
    }

    /// Mean vertex position.
    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    /// Unit face normal, oriented toward the camera the mesh was built from.
    pub fn face_normal(&self, f: usize) -> Option<Vector3<f64>> {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a)).try_normalize(0.0)
    }

    pub fn face_centroid(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (a + b + c) / 3.0
    }

    /// Writes positions, texture coordinates and non-culled faces as ASCII OBJ.
    pub fn write_obj(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# range grid mesh {}x{}", self.grid_width, self.grid_height)?;
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
        }
        let with_uv = self.texcoords.is_some();
        if let Some(tc) = &self.texcoords {
            for t in tc {
                let t = t.unwrap_or_else(Vector2::zeros);
                writeln!(out, "vt {} {}", t.x, 1.0 - t.y)?;
            }
        }
        for (f, tri) in self.faces.iter().enumerate() {
            if self.face_culled[f] {
                continue;
            }
            let [a, b, c] = tri.map(|i| i + 1);
            if with_uv {
                writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}")?;
            } else {
                writeln!(out, "f {a} {b} {c}")?;
            }
        }
        Ok(())
    }
}

/// Back-projects every valid pixel center and triangulates each fully valid
/// 2x2 block along its top-left/bottom-right diagonal.
pub fn depth_to_range_grid(depth: &DepthMap, cam: &CameraParams) -> Result<RangeGridMesh, MeshError> {
    let (w, h) = depth.dims();
    if (w, h) != (cam.resolution.width as usize, cam.resolution.height as usize) {
        return Err(MeshError::ResolutionMismatch {
            depth: (w, h),
            camera: (cam.resolution.width, cam.resolution.height),
        });
    }
    let mut index = vec![u32::MAX; w * h];
    let mut vertices = Vec::with_capacity(depth.valid_count());
    let mut grid_index = Vec::with_capacity(depth.valid_count());
    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth.get(x, y) else { continue };
            let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let p = cam
                .backproject_camera(&pixel, d)
                .expect("valid depth is positive");
            index[y * w + x] = vertices.len() as u32;
            vertices.push(cam.to_world(&p));
            grid_index.push((y as u32, x as u32));
        }
    }

    let mut faces = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let tl = index[y * w + x];
            let tr = index[y * w + x + 1];
            let bl = index[(y + 1) * w + x];
            let br = index[(y + 1) * w + x + 1];
            if [tl, tr, bl, br].contains(&u32::MAX) {
                continue;
            }
            // winding gives normals facing the source camera
            faces.push([tl, bl, br]);
            faces.push([tl, br, tr]);
        }
    }
    if faces.is_empty() {
        return Err(MeshError::DegenerateDepth);
    }
    let nv = vertices.len();
    let nf = faces.len();
    Ok(RangeGridMesh {
        grid_width: w,
        grid_height: h,
        vertices,
        grid_index,
        faces,
        texcoords: None,
        vertex_visible: vec![true; nv],
        face_culled: vec![false; nf],
    })
}

/// Projects vertices into the original camera, normalized by its resolution.
/// Vertices that land behind the camera get no coordinate and are marked
/// invisible, which removes their faces from rendering.
pub fn compute_texcoords(mesh: &RangeGridMesh, original_cam: &CameraParams) -> RangeGridMesh {
    let size = Vector2::new(
        original_cam.resolution.width as f64,
        original_cam.resolution.height as f64,
    );
    let mut out = mesh.clone();
    let coords: Vec<Option<Vector2<f64>>> = mesh
        .vertices
        .iter()
        .map(|v| {
            crate::camera::project(v, original_cam)
                .ok()
                .map(|p| p.component_div(&size))
        })
        .collect();
    for (vis, c) in out.vertex_visible.iter_mut().zip(&coords) {
        if c.is_none() {
            *vis = false;
        }
    }
    out.texcoords = Some(coords);
    out
}

/// Flags faces whose normal makes an angle above `threshold_deg` with the
/// direction from the face centroid to the camera. Flags are recomputed from
/// scratch; degenerate faces are always culled.
pub fn cull_grazing_faces(mesh: &RangeGridMesh, novel_cam: &CameraParams, threshold_deg: f64) -> RangeGridMesh {
    let eye = novel_cam.center();
    let min_cos = threshold_deg.to_radians().cos();
    let mut out = mesh.clone();
    for f in 0..mesh.faces.len() {
        let culled = match (mesh.face_normal(f), (eye - mesh.face_centroid(f)).try_normalize(0.0)) {
            (Some(n), Some(view)) => n.dot(&view) < min_cos - 1e-12,
            _ => true,
        };
        out.face_culled[f] = culled;
    }
    out
}

/// Marks each vertex visible when it projects inside the frame and is not
/// behind the rendered surface at its exact projection. Occluders are the
/// faces that won the pixel or its neighbours and whose screen triangle
/// contains the projected vertex; their depth is taken on the face plane
/// along the ray through the vertex.
pub fn vertex_visibility(mesh: &RangeGridMesh, render: &RenderOutput, novel_cam: &CameraParams) -> RangeGridMesh {
    let mut out = mesh.clone();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let has_uv = mesh.texcoords.as_ref().is_none_or(|t| t[i].is_some());
        out.vertex_visible[i] = has_uv && visible_against(mesh, render, novel_cam, v);
    }
    out
}

fn visible_against(mesh: &RangeGridMesh, render: &RenderOutput, cam: &CameraParams, v: &Vector3<f64>) -> bool {
    let pc = cam.to_camera(v);
    if pc.z <= EPS_Z {
        return false;
    }
    let Ok(px) = cam.project_camera(&pc) else { return false };
    if !cam.resolution.contains(&px) {
        return false;
    }
    let (w, h) = (cam.resolution.width as i64, cam.resolution.height as i64);
    let (x, y) = (px.x.floor() as i64, px.y.floor() as i64);
    let mut seen: Vec<u32> = Vec::with_capacity(9);
    let mut zb = f64::INFINITY;
    for ny in (y - 1).max(0)..=(y + 1).min(h - 1) {
        for nx in (x - 1).max(0)..=(x + 1).min(w - 1) {
            let Some(f) = render.face_id[(ny * w + nx) as usize] else { continue };
            if seen.contains(&f) {
                continue;
            }
            seen.push(f);
            if let Some(z) = face_depth_through(mesh, cam, f as usize, &px, &pc) {
                zb = zb.min(z);
            }
        }
    }
    pc.z <= zb + VISIBILITY_EPS * pc.z
}

/// Depth of face `f` along the ray through `pc`, if its projection
/// contains the screen point `px`.
fn face_depth_through(mesh: &RangeGridMesh, cam: &CameraParams, f: usize, px: &Vector2<f64>, pc: &Vector3<f64>) -> Option<f64> {
    let [a, b, c] = mesh.faces.get(f)?.map(|k| cam.to_camera(&mesh.vertices[k as usize]));
    let [sa, sb, sc] = [a, b, c].map(|p| cam.project_camera(&p).ok());
    let (sa, sb, sc) = (sa?, sb?, sc?);
    let area = (sb - sa).perp(&(sc - sa));
    if area == 0.0 {
        return None;
    }
    let tol = -1e-9 * area.abs();
    let l = [(sc - sb).perp(&(px - sb)), (sa - sc).perp(&(px - sc)), (sb - sa).perp(&(px - sa))];
    if l.iter().any(|e| e * area.signum() < tol) {
        return None;
    }
    let n = (b - a).cross(&(c - a));
    // ray r(s) = s * pc / pc.z has camera depth s
    let denom = n.dot(pc) / pc.z;
    if denom == 0.0 {
        return None;
    }
    let s = n.dot(&a) / denom;
    (s.is_finite() && s > 0.0).then_some(s)
}
