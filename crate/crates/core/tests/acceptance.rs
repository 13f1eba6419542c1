//! Acceptance checks, one line per criterion. Oracles here are written
//! independently of the library code they check.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use persview::camera::{reparam_focal, rotation_angle_between, rotation_from_axis_angle, CameraError, CameraParams, ReparamContext, Resolution};
use persview::compositor::{build_blend_mask, laplacian_blend, laplacian_pyramid, reconstruct, BlendMask};
use persview::depth::{smooth_depth_bilateral, BilateralParams, DepthMap};
use persview::fit::{fit_camera, landmark_loss, landmark_loss_and_gradient, predict_landmarks, slaved_camera, FitConfig, SceneLandmarks};
use persview::fixture::{make_fixture, synthetic_face_landmarks, FixtureKind};
use persview::image::{GrayImage, ImageBuffer};
use persview::io::SessionBundle;
use persview::mesh::{compute_texcoords, cull_grazing_faces, depth_to_range_grid, vertex_visibility, RangeGridMesh};
use persview::metrics::{id_score, psnr, ssim, FeatureVector};
use persview::pipeline::{render_view, PipelineParams, Prebuilt};
use persview::raster::{rasterize, RasterOptions, RenderOutput};
use persview::view::{novel_camera, ViewDelta};

const SUITE_BUDGET: Duration = Duration::from_secs(300);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("identity-warp reconstruction", identity_warp),
        ("planar homography oracle", planar_homography),
        ("two-view consistency", two_view_consistency),
        ("reparametrization invariant", reparam_invariant),
        ("z-buffer brute-force equivalence", zbuffer_equivalence),
        ("laplacian pyramid exactness", pyramid_exactness),
        ("camera-fit recovery", camera_fit_recovery),
        ("metrics sanity", metrics_sanity),
        ("culling boundary", culling_boundary),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    let total = start.elapsed();
    let in_budget = total < SUITE_BUDGET;
    if !in_budget {
        failed += 1;
    }
    println!(
        "{} suite runtime: {:.1}s (limit {}s)",
        if in_budget { "PASS" } else { "FAIL" },
        total.as_secs_f64(),
        SUITE_BUDGET.as_secs()
    );
    println!("acceptance: {} of {} checks passed", criteria.len() + 1 - failed, criteria.len() + 1);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn covered_mask(r: &RenderOutput) -> Vec<bool> {
    r.coverage.clone()
}

/// PSNR (peak 1) over selected pixels, computed directly.
fn masked_psnr(a: &ImageBuffer, b: &ImageBuffer, keep: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, k) in keep.iter().enumerate() {
        if !k {
            continue;
        }
        for c in 0..3 {
            let d = a.values()[3 * i + c] - b.values()[3 * i + c];
            sum += d * d;
        }
        n += 1;
    }
    let mse = sum / (3 * n.max(1)) as f64;
    (if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() }, n)
}

/// Bilinear lookup at continuous pixel coordinates (centers at +0.5).
fn bilinear(img: &ImageBuffer, u: f64, v: f64) -> [f64; 3] {
    let (w, h) = img.dims();
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx: usize, yy: usize| img.values()[3 * (yy * w + xx) + c];
        *o = (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0)) + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1));
    }
    out
}

fn camera_center(cam: &CameraParams) -> Vector3<f64> {
    -(cam.rotation.transpose() * cam.translation)
}

/// World-space ray direction through a pixel, with unit camera-space z.
fn pixel_ray(cam: &CameraParams, u: f64, v: f64) -> Vector3<f64> {
    let d = Vector3::new((u - cam.principal_point.x) / cam.focal, (v - cam.principal_point.y) / cam.focal, 1.0);
    cam.rotation.transpose() * d
}

fn prepared_mesh(depth: &DepthMap, cam: &CameraParams) -> RangeGridMesh {
    let smoothed = smooth_depth_bilateral(depth, &BilateralParams::default()).unwrap();
    compute_texcoords(&depth_to_range_grid(&smoothed, cam).unwrap(), cam)
}

fn bundle_of(kind: FixtureKind, size: usize) -> (persview::fixture::Fixture, SessionBundle) {
    let f = make_fixture(kind, size).unwrap();
    let b = SessionBundle {
        source: f.source.clone(),
        depth: f.depth.clone(),
        matte: Some(f.matte.clone()),
        generated: Some(f.generated.clone()),
        camera: f.camera.clone(),
        landmarks: Some(f.landmarks.clone()),
        reparam: Some(f.reparam),
    };
    (f, b)
}

// ---------------------------------------------------------------- criteria

fn identity_warp() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in FixtureKind::ALL {
        let f = make_fixture(kind, 64).unwrap();
        let t = Instant::now();
        let mesh = cull_grazing_faces(&prepared_mesh(&f.depth, &f.camera), &f.camera, 80.0);
        let render = rasterize(&mesh, &f.source, &f.camera, RasterOptions::default()).unwrap();
        let elapsed = t.elapsed();
        let (db, n) = masked_psnr(&render.color, &f.source, &covered_mask(&render));
        let ok = db >= 40.0 && elapsed < Duration::from_secs(1) && n > 0;
        pass &= ok;
        lines.push(format!("{kind} {db:.1} dB over {n} px in {:.0} ms", elapsed.as_secs_f64() * 1e3));
    }
    outcome(pass, format!("{} (need >= 40 dB, < 1 s)", lines.join("; ")))
}

fn planar_homography() -> Outcome {
    let (f, b) = bundle_of(FixtureKind::Plane, 64);
    let pre = Prebuilt::new(&b, &BilateralParams::default()).unwrap();
    let v = render_view(&b, &pre, &ViewDelta::yaw(5.0), &PipelineParams::default(), false).unwrap();
    let (cam_a, cam_b) = (&f.camera, &v.camera);
    let center_b = camera_center(cam_b);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..64 {
        for x in 0..64 {
            if !v.render.coverage[y * 64 + x] {
                continue;
            }
            // intersect the pixel ray with the plane z = 0, then project into the source
            let d = pixel_ray(cam_b, x as f64 + 0.5, y as f64 + 0.5);
            let t = -center_b.z / d.z;
            let p = center_b + d * t;
            let pc = cam_a.rotation * p + cam_a.translation;
            let u = cam_a.principal_point.x + cam_a.focal * pc.x / pc.z;
            let w = cam_a.principal_point.y + cam_a.focal * pc.y / pc.z;
            if !(0.5..=63.5).contains(&u) || !(0.5..=63.5).contains(&w) {
                continue;
            }
            let expected = bilinear(&f.source, u, w);
            let got = v.render.color.pixel(x, y);
            for c in 0..3 {
                sum += (expected[c] - got[c]).abs();
            }
            n += 1;
        }
    }
    let mae = sum / (3 * n) as f64;
    outcome(
        mae <= 2.0 / 255.0 && n > 64 * 48,
        format!("MAE {:.3}/255 over {n} mutually covered px (need <= 2/255)", mae * 255.0),
    )
}

/// Segment from `origin` to `target` hits triangle before `t_max`.
fn segment_hits(origin: &Vector3<f64>, target: &Vector3<f64>, tri: [Vector3<f64>; 3], t_max: f64) -> bool {
    let dir = target - origin;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let t = e2.dot(&q) * inv;
    t > 1e-9 && t < t_max
}

/// Agreement between z-buffer vertex visibility and an exhaustive ray test.
fn visibility_agreement(mesh: &RangeGridMesh, source: &ImageBuffer, cam: &CameraParams) -> (usize, usize) {
    let culled = cull_grazing_faces(mesh, cam, 80.0);
    let render = rasterize(&culled, source, cam, RasterOptions::default()).unwrap();
    let vis = vertex_visibility(&culled, &render, cam);
    let center = camera_center(cam);
    let (w, h) = (cam.resolution.width as f64, cam.resolution.height as f64);
    let agree = (0..mesh.vertices.len())
        .into_par_iter()
        .filter(|&i| {
            let v = mesh.vertices[i];
            let pc = cam.rotation * v + cam.translation;
            let u = cam.principal_point.x + cam.focal * pc.x / pc.z;
            let s = cam.principal_point.y + cam.focal * pc.y / pc.z;
            let in_frame = pc.z > 0.0 && (0.0..w).contains(&u) && (0.0..h).contains(&s);
            let occluded = culled.faces.iter().enumerate().any(|(f, tri)| {
                !culled.face_culled[f]
                    && !tri.contains(&(i as u32))
                    && segment_hits(&center, &v, tri.map(|k| culled.vertices[k as usize]), 1.0 - 1e-3)
            });
            (in_frame && !occluded) == vis.vertex_visible[i]
        })
        .count();
    (agree, mesh.vertices.len())
}

fn two_view_consistency() -> Outcome {
    let f = make_fixture(FixtureKind::SphereCap, 64).unwrap();
    let cam_b = &f.truth_camera;
    let mesh = cull_grazing_faces(&prepared_mesh(&f.depth, &f.camera), cam_b, 80.0);
    let render = rasterize(&mesh, &f.source, cam_b, RasterOptions::default()).unwrap();
    let vis = vertex_visibility(&mesh, &render, cam_b);
    let mask = build_blend_mask(&render, &vis, None).unwrap();
    let keep: Vec<bool> = mask.weights().values().iter().map(|w| *w > 0.5).collect();
    let (db, n) = masked_psnr(&render.color, &f.truth_view, &keep);
    let psnr_ok = db >= 30.0 && n > 64 * 40;

    let mut worst = 1.0f64;
    let mut parts = Vec::new();
    for (kind, delta) in [
        (FixtureKind::SphereCap, ViewDelta::yaw(5.0)),
        (FixtureKind::SphereCap, ViewDelta { yaw_deg: 30.0, pitch_deg: -15.0, ..Default::default() }),
        (FixtureKind::Ridge, ViewDelta::yaw(35.0)),
    ] {
        let g = make_fixture(kind, 32).unwrap();
        let mesh = prepared_mesh(&g.depth, &g.camera);
        let cam = novel_camera(&g.camera, &Vector3::zeros(), &delta, &g.reparam).unwrap();
        let (agree, total) = visibility_agreement(&mesh, &g.source, &cam);
        let frac = agree as f64 / total as f64;
        worst = worst.min(frac);
        parts.push(format!("{kind} yaw {} pitch {}: {:.2}%", delta.yaw_deg, delta.pitch_deg, 100.0 * frac));
    }
    let vis_ok = worst >= 0.99;
    outcome(
        psnr_ok && vis_ok,
        format!(
            "sphere-cap A->B {db:.1} dB over {n} visible px (need >= 30); visibility agreement {} (need >= 99%)",
            parts.join(", ")
        ),
    )
}

fn reparam_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut worst = 0.0f64;
    let (mut checked, mut rejected, mut bad) = (0, 0, 0);
    for i in 0..10_000 {
        let d0 = rng.gen_range(0.05..3.0);
        let f0 = rng.gen_range(50.0..5000.0);
        let tz0 = rng.gen_range(0.05..5.0);
        let tz = match i % 50 {
            // exact boundary and just past it
            0 => tz0 - d0,
            1 => tz0 - d0 + 5e-7,
            _ => rng.gen_range(-1.0..6.0),
        };
        let ctx = ReparamContext::new(d0, f0, tz0).unwrap();
        let eye = d0 - (tz0 - tz);
        match reparam_focal(&ctx, tz) {
            Ok(f) if eye > 1e-6 => {
                checked += 1;
                let rhs = f0 * (d0 + tz - tz0);
                let rel = (f * d0 - rhs).abs() / rhs.abs();
                if !f.is_finite() {
                    bad += 1;
                }
                worst = worst.max(rel);
            }
            Err(CameraError::EyesBehindCamera(e)) if eye <= 1e-6 && !e.is_nan() => rejected += 1,
            _ => bad += 1,
        }
    }
    outcome(
        bad == 0 && worst <= 1e-9,
        format!("{checked} draws max rel err {worst:.1e} (need <= 1e-9); {rejected} EyesBehindCamera; {bad} violations"),
    )
}

/// Oracle rasterization: per pixel, the minimal perspective depth among
/// faces whose closed triangle contains the pixel center.
struct PixelTruth {
    min_depth: f64,
    /// Some face contains the center with margin.
    strictly_inside: bool,
}

fn zbuffer_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.gen_range(2..=32usize);
    let h = rng.gen_range(2..=32usize);
    let cam = CameraParams::frontal(rng.gen_range(1.5..4.0), rng.gen_range(0.6..2.0) * w as f64, Resolution::new(w as u32, h as u32)).unwrap();
    let base = cam.t_z();
    let (fx, fy) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
    let steps = rng.gen_range(0..4);
    let step_cols: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..w)).collect();
    let hole_rate = rng.gen_range(0.0..0.15);
    let holes: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(hole_rate)).collect();
    let depth = DepthMap::from_fn(w, h, |x, y| {
        if holes[y * w + x] {
            return None;
        }
        let mut d = base + 0.3 * (x as f64 * fx).sin() * (y as f64 * fy).cos();
        for (k, c) in step_cols.iter().enumerate() {
            if x >= *c {
                d += if k % 2 == 0 { 0.4 } else { -0.25 };
            }
        }
        Some(d)
    })
    .unwrap();
    let Ok(mesh) = depth_to_range_grid(&depth, &cam) else { return Ok(()) };
    let mut mesh = compute_texcoords(&mesh, &cam);
    for c in mesh.face_culled.iter_mut() {
        *c = rng.gen_bool(0.1);
    }
    let pivot = mesh.centroid();
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
    let local = rotation_from_axis_angle(&(axis.normalize() * rng.gen_range(0.0..0.6)));
    let pc = cam.rotation * pivot;
    let novel = cam.with_pose(local * cam.rotation, cam.translation + pc - local * pc);
    let source = ImageBuffer::from_fn(w, h, |x, y| [x as f64 / w as f64, y as f64 / h as f64, 0.5]);
    let bands = rng.gen_range(1..=8);
    let render = rasterize(&mesh, &source, &novel, RasterOptions { bands }).map_err(|e| e.to_string())?;

    // oracle over face bounding boxes
    let mut truth: Vec<PixelTruth> = (0..w * h)
        .map(|_| PixelTruth {
            min_depth: f64::INFINITY,
            strictly_inside: false,
        })
        .collect();
    let face_depth_at = |f: usize, px: f64, py: f64| -> Option<(f64, bool)> {
        let cams: Vec<Vector3<f64>> = mesh.faces[f].iter().map(|&k| novel.rotation * mesh.vertices[k as usize] + novel.translation).collect();
        if cams.iter().any(|p| p.z <= 1e-6) {
            return None;
        }
        let s: Vec<Vector2<f64>> = cams
            .iter()
            .map(|p| Vector2::new(novel.principal_point.x + novel.focal * p.x / p.z, novel.principal_point.y + novel.focal * p.y / p.z))
            .collect();
        let area = (s[1] - s[0]).perp(&(s[2] - s[0]));
        if area == 0.0 {
            return None;
        }
        let p = Vector2::new(px, py);
        let l = [
            (s[2] - s[1]).perp(&(p - s[1])) / area,
            (s[0] - s[2]).perp(&(p - s[2])) / area,
            (s[1] - s[0]).perp(&(p - s[0])) / area,
        ];
        let tol = 1e-9;
        if l.iter().any(|v| *v < -tol) {
            return None;
        }
        let inv_z = l[0] / cams[0].z + l[1] / cams[1].z + l[2] / cams[2].z;
        Some((1.0 / inv_z, l.iter().all(|v| *v > 1e-7)))
    };
    for f in 0..mesh.faces.len() {
        if mesh.face_culled[f] {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if let Some((z, strict)) = face_depth_at(f, x as f64 + 0.5, y as f64 + 0.5) {
                    let t = &mut truth[y * w + x];
                    t.min_depth = t.min_depth.min(z);
                    t.strictly_inside |= strict;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = &truth[i];
            match render.face_id[i] {
                Some(fw) => {
                    let fw = fw as usize;
                    if mesh.face_culled[fw] {
                        return Err(format!("seed {seed}: culled face {fw} won pixel ({x},{y})"));
                    }
                    let Some((z, _)) = face_depth_at(fw, x as f64 + 0.5, y as f64 + 0.5) else {
                        return Err(format!("seed {seed}: face {fw} does not contain pixel ({x},{y})"));
                    };
                    if z > t.min_depth * (1.0 + 1e-9) {
                        return Err(format!("seed {seed}: pixel ({x},{y}) depth {z} > oracle {}", t.min_depth));
                    }
                    if !render.coverage[i] || !render.zbuffer[i].is_finite() {
                        return Err(format!("seed {seed}: inconsistent buffers at ({x},{y})"));
                    }
                }
                None => {
                    if t.strictly_inside {
                        return Err(format!("seed {seed}: pixel ({x},{y}) inside a face but uncovered"));
                    }
                    if render.coverage[i] || render.zbuffer[i].is_finite() {
                        return Err(format!("seed {seed}: inconsistent buffers at ({x},{y})"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn zbuffer_equivalence() -> Outcome {
    let failures: Vec<String> = (0..200u64).into_par_iter().filter_map(|s| zbuffer_case(s).err()).collect();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "200 random meshes, every covered pixel holds the nearest covering face".to_string()
        } else {
            format!("{} of 200 meshes disagree, first: {}", failures.len(), failures[0])
        },
    )
}

fn pyramid_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_rt = 0.0f64;
    let mut worst_deg = 0.0f64;
    for _ in 0..40 {
        let w = rng.gen_range(16..72usize);
        let h = rng.gen_range(16..72usize);
        let levels = rng.gen_range(1..=4usize);
        let img = GrayImage::from_fn(w, h, |_, _| rng.gen::<f64>());
        let back = reconstruct(&laplacian_pyramid(&img, levels));
        for (a, b) in img.values().iter().zip(back.values()) {
            worst_rt = worst_rt.max((a - b).abs());
        }
        let a = ImageBuffer::from_fn(w, h, |x, y| [((x * 7 + y * 3) % 11) as f64 / 10.0, 0.25, (x as f64 / w as f64)]);
        let g = ImageBuffer::from_fn(w, h, |x, y| [((x + y * 5) % 13) as f64 / 12.0, 0.75, (y as f64 / h as f64)]);
        let ones = laplacian_blend(&a, &g, &BlendMask::constant(w, h, 1.0), levels).unwrap();
        let zeros = laplacian_blend(&a, &g, &BlendMask::constant(w, h, 0.0), levels).unwrap();
        for i in 0..a.values().len() {
            worst_deg = worst_deg.max((ones.values()[i] - a.values()[i]).abs());
            worst_deg = worst_deg.max((zeros.values()[i] - g.values()[i]).abs());
        }
    }
    outcome(
        worst_rt <= 1e-6 && worst_deg <= 1e-6,
        format!("round trip max err {worst_rt:.1e}, degenerate masks max err {worst_deg:.1e} (need <= 1e-6)"),
    )
}

struct FitTrial {
    rot_err_deg: f64,
    tz_err: f64,
    iterations: usize,
    plateau: usize,
    grad_rel_err: f64,
}

/// Central differences of the landmark loss in the fit parametrization:
/// left-multiplied rotation increments and translation, focal re-slaved.
fn fd_gradient(reference: &SceneLandmarks, observed: &persview::fit::LandmarkSet, cam: &CameraParams, ctx: &ReparamContext) -> [f64; 6] {
    let h = 1e-6;
    let loss = |r: Matrix3<f64>, t: Vector3<f64>| {
        let mut c = cam.with_pose(r, t);
        c.focal = reparam_focal(ctx, t.z).unwrap();
        landmark_loss(&predict_landmarks(reference, &c).unwrap(), observed)
    };
    let mut g = [0.0; 6];
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        g[k] = (loss(rotation_from_axis_angle(&e) * cam.rotation, cam.translation)
            - loss(rotation_from_axis_angle(&-e) * cam.rotation, cam.translation))
            / (2.0 * h);
        g[3 + k] = (loss(cam.rotation, cam.translation + e) - loss(cam.rotation, cam.translation - e)) / (2.0 * h);
    }
    g
}

fn fit_trial(seed: u64) -> FitTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let reference = SceneLandmarks::new(synthetic_face_landmarks(seed)).unwrap();
    let tz0 = rng.gen_range(0.3..0.7);
    let ctx = ReparamContext::new(tz0 - 0.03, rng.gen_range(600.0..1500.0), tz0).unwrap();
    let template = CameraParams::frontal(tz0, ctx.f0, Resolution::new(720, 960)).unwrap();
    let truth_r = rotation_from_axis_angle(&Vector3::new(
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.45..0.45),
        rng.gen_range(-0.15..0.15),
    ));
    let truth_t = Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), tz0 * rng.gen_range(0.8..1.2));
    let truth = slaved_camera(&template, truth_r, truth_t, &ctx).unwrap();
    let observed = predict_landmarks(&reference, &truth).unwrap();

    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let angle = rng.gen_range(0.1..=2.0f64).to_radians();
    let scale = 1.0 + rng.gen_range(0.005..=0.05) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut init_t = truth_t;
    init_t.z *= scale;
    let init = slaved_camera(&template, rotation_from_axis_angle(&(axis * angle)) * truth_r, init_t, &ctx).unwrap();

    let (l0, g) = landmark_loss_and_gradient(&reference, &observed, &init, &ctx).unwrap();
    let analytic = [g.rotation.x, g.rotation.y, g.rotation.z, g.translation.x, g.translation.y, g.translation.z];
    let fd = fd_gradient(&reference, &observed, &init, &ctx);
    let scale_g = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let grad_rel_err = analytic.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale_g;

    let r = fit_camera(&reference, &observed, &init, &ctx, &FitConfig::default()).unwrap();
    let last = r.loss_trace.last().copied().unwrap_or(l0);
    let plateau = r
        .loss_trace
        .iter()
        .position(|l| l - last <= 0.01 * (l0 - last))
        .map_or(0, |k| k + 1);
    FitTrial {
        rot_err_deg: rotation_angle_between(&r.camera.rotation, &truth.rotation).to_degrees(),
        tz_err: (r.camera.t_z() - truth.t_z()).abs() / truth.t_z(),
        iterations: r.iterations_run,
        plateau,
        grad_rel_err,
    }
}

fn camera_fit_recovery() -> Outcome {
    let trials: Vec<FitTrial> = (0..50u64).into_par_iter().map(fit_trial).collect();
    let recovered = trials
        .iter()
        .filter(|t| t.rot_err_deg <= 0.5 && t.tz_err <= 0.01 && t.iterations <= 200)
        .count();
    let early = trials.iter().filter(|t| t.plateau <= 100).count();
    let worst_rot = trials.iter().fold(0.0f64, |m, t| m.max(t.rot_err_deg));
    let worst_tz = trials.iter().fold(0.0f64, |m, t| m.max(t.tz_err));
    let worst_grad = trials.iter().fold(0.0f64, |m, t| m.max(t.grad_rel_err));
    outcome(
        recovered == 50 && early >= 45 && worst_grad <= 1e-4,
        format!(
            "{recovered}/50 recovered (worst {worst_rot:.3} deg, t_z {:.2}%); plateau by iteration 100 in {early}/50 (need 45); gradient rel err {worst_grad:.1e} (need <= 1e-4)",
            worst_tz * 100.0
        ),
    )
}

fn metrics_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = ImageBuffer::from_fn(32, 32, |_, _| [rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9)]);
    let shifted = ImageBuffer::new(32, 32, a.values().iter().map(|v| v + 0.1).collect()).unwrap();
    let p = psnr(&a, &shifted, None).unwrap();
    let s_same = ssim(&a, &a).unwrap();
    let (c1, c2) = (0.2, 0.5);
    let const_a = ImageBuffer::filled(24, 24, [c1; 3]);
    let const_b = ImageBuffer::filled(24, 24, [c2; 3]);
    let k1 = (0.01f64).powi(2);
    let closed = (2.0 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1);
    let s_const = ssim(&const_a, &const_b).unwrap();
    let v = FeatureVector::new(vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let orth = FeatureVector::new(vec![1.2, 0.3, 0.0, 0.0]).unwrap();
    let neg = FeatureVector::new(vec![-0.6, 2.4, -4.0, -1.0]).unwrap();
    let ids = [id_score(&v, &v).unwrap(), id_score(&v, &orth).unwrap(), id_score(&v, &neg).unwrap()];
    let pass = (p - 20.0).abs() < 1e-9
        && (s_same - 1.0).abs() < 1e-9
        && (s_const - closed).abs() < 1e-9
        && (ids[0] - 1.0).abs() < 1e-12
        && ids[1].abs() < 1e-12
        && (ids[2] + 1.0).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "PSNR {p:.9} dB; SSIM(a,a) {s_same:.12}; constant SSIM {s_const:.12} vs closed form {closed:.12}; id {:.3}/{:.3}/{:.3}",
            ids[0], ids[1], ids[2]
        ),
    )
}

/// Range-grid mesh of a plane through the origin, rotated `phi` about the
/// vertical axis, seen by a narrow-field camera.
fn tilted_plane(phi: f64) -> (RangeGridMesh, CameraParams) {
    let size = 24;
    let cam = CameraParams::frontal(2.0, 40.0 * size as f64, Resolution::new(size, size)).unwrap();
    let n = Vector3::new(phi.sin(), 0.0, -phi.cos());
    let c = camera_center(&cam);
    let depth = DepthMap::from_fn(size as usize, size as usize, |x, y| {
        let d = pixel_ray(&cam, x as f64 + 0.5, y as f64 + 0.5);
        Some(-n.dot(&c) / n.dot(&d))
    })
    .unwrap();
    (depth_to_range_grid(&depth, &cam).unwrap(), cam)
}

/// Largest angle over faces between the face normal and the ray from the
/// face centroid to the camera.
fn max_face_angle(mesh: &RangeGridMesh, cam: &CameraParams) -> f64 {
    let c = camera_center(cam);
    mesh.faces
        .iter()
        .map(|tri| {
            let [a, b, d] = tri.map(|k| mesh.vertices[k as usize]);
            let n = (b - a).cross(&(d - a)).normalize();
            let to_cam = (c - (a + b + d) / 3.0).normalize();
            n.dot(&to_cam).clamp(-1.0, 1.0).acos()
        })
        .fold(0.0, f64::max)
}

fn culling_boundary() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (tilt, expect_culled) in [(75.0f64, false), (80.0, false), (85.0, true)] {
        // tilt = the most oblique face's angle; bisect the plane rotation to hit it
        let target = tilt.to_radians();
        let (mut lo, mut hi) = (0.0f64, 89.9f64.to_radians());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (m, cam) = tilted_plane(mid);
            if max_face_angle(&m, &cam) > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (mesh, cam) = tilted_plane(lo);
        let reached = max_face_angle(&mesh, &cam).to_degrees();
        let culled = cull_grazing_faces(&mesh, &cam, 80.0);
        let n = culled.culled_count();
        let total = mesh.faces.len();
        let ok = if expect_culled { n == total } else { n == 0 };
        pass &= ok;
        parts.push(format!("{tilt} deg (max face {reached:.9}): {n}/{total} culled"));
    }
    outcome(pass, format!("{} (need none/none/all at threshold 80)", parts.join("; ")))
}
