//! Subcommand implementations. Each returns after writing its outputs, or
//! after validation alone when no output directory is given (dry run).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use persview::compositor::{laplacian_blend, BlendMask};
use persview::fit::{fit_camera as run_fit, landmark_loss, normalize_landmarks, predict_landmarks, FitConfig, LandmarkJson, LandmarkSet, SceneLandmarks};
use persview::fixture::{make_fixture_with_view, FixtureKind};
use persview::image::ImageBuffer;
use persview::io::pfm::Pfm;
use persview::io::{load_bundle, png, save_bundle, write_atomic, SessionBundle};
use persview::metrics::{aggregate_report, id_score, psnr, ssim, FeatureVector, MetricRow};
use persview::pipeline::{default_reparam, render_view, PipelineParams, Prebuilt};
use persview::view::{novel_camera, ViewDelta};
use persview::BilateralParams;

use crate::error::{CliError, CliResult};

const CONFIG_NAME: &str = "effective-config.json";

struct Timings(Vec<(&'static str, Duration)>);

impl Timings {
    fn print(&self) {
        for (stage, d) in &self.0 {
            println!("  {stage:<11}{:>9.2} ms", d.as_secs_f64() * 1e3);
        }
        let total: Duration = self.0.iter().map(|(_, d)| *d).sum();
        println!("  {:<11}{:>9.2} ms", "total", total.as_secs_f64() * 1e3);
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(format!("{}: {e}", dir.display())))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(|e| CliError::write(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::write)?;
    bytes.push(b'\n');
    write_file(dir, name, &bytes)
}

fn encode_rgb(img: &ImageBuffer, member: &str) -> CliResult<Vec<u8>> {
    png::encode_rgb(img).map_err(|e| CliError::runtime("write", format!("{member}: {e}")))
}

fn color_pfm(img: &ImageBuffer) -> Vec<u8> {
    let data = img.values().iter().map(|v| *v as f32).collect();
    Pfm::new(img.width(), img.height(), 3, data).expect("image length matches").encode()
}

fn load(path: &Path) -> CliResult<SessionBundle> {
    load_bundle(path).map_err(CliError::bundle)
}

fn missing_member(stage: &'static str, member: &str, why: &str) -> CliError {
    CliError::validation(stage, format!("member `{member}` is missing from the bundle; {why}"))
}

/// `correct` (with blending) and `warp` (without).
pub fn correct(
    bundle_path: &Path,
    delta: &ViewDelta,
    params: &PipelineParams,
    float_outputs: bool,
    out: Option<&Path>,
    blend: bool,
) -> CliResult<()> {
    params.validate().map_err(CliError::pipeline)?;
    delta.validate().map_err(|e| CliError::validation("camera", e))?;
    let mut timings = Timings(Vec::new());

    let t = Instant::now();
    let bundle = load(bundle_path)?;
    timings.0.push(("load", t.elapsed()));
    if blend && bundle.generated.is_none() {
        return Err(missing_member("config", "generated", "blending needs it (use `warp` to skip blending)"));
    }

    let pre = Prebuilt::new(&bundle, &params.bilateral).map_err(CliError::pipeline)?;
    timings.0.push(("smooth", pre.smooth_time));
    timings.0.push(("mesh", pre.mesh_time));

    let Some(out) = out else {
        novel_camera(&bundle.camera, &pre.pivot, delta, &pre.reparam).map_err(|e| CliError::validation("camera", e))?;
        println!("dry run: bundle, flags and novel camera are valid; nothing written");
        return Ok(());
    };

    let view = render_view(&bundle, &pre, delta, params, blend).map_err(CliError::pipeline)?;
    timings.0.extend(view.timings.iter().copied());

    let t = Instant::now();
    ensure_dir(out)?;
    write_file(out, "warped.png", &encode_rgb(&view.render.color, "warped")?)?;
    write_file(out, "mask.png", &png::encode_gray(view.composite_mask.weights()).map_err(CliError::write)?)?;
    write_file(out, "visibility.png", &png::encode_gray(view.mask.weights()).map_err(CliError::write)?)?;
    let (w, h) = view.render.color.dims();
    write_file(out, "zbuffer.pfm", &Pfm::gray(w, h, &view.render.zbuffer).expect("z-buffer length matches").encode())?;
    if let Some(blended) = &view.blended {
        write_file(out, "blended.png", &encode_rgb(blended, "blended")?)?;
    }
    if float_outputs {
        write_file(out, "warped.pfm", &color_pfm(&view.render.color))?;
        if let Some(blended) = &view.blended {
            write_file(out, "blended.pfm", &color_pfm(blended))?;
        }
    }
    write_json(out, "camera.json", &view.camera)?;
    write_json(
        out,
        CONFIG_NAME,
        &json!({
            "command": if blend { "correct" } else { "warp" },
            "view": delta,
            "pipeline": params,
            "reparam": pre.reparam,
            "pivot": [pre.pivot.x, pre.pivot.y, pre.pivot.z],
            "visible_fraction": view.visible_fraction,
        }),
    )?;
    timings.0.push(("write", t.elapsed()));

    println!("stage timings:");
    timings.print();
    println!("visible fraction: {:.4}", view.visible_fraction);
    println!("outputs written to {}", out.display());
    Ok(())
}

pub fn blend(bundle_path: &Path, warp_dir: &Path, levels: usize, out: Option<&Path>) -> CliResult<()> {
    if levels == 0 {
        return Err(CliError::validation("config", "pyramid needs at least one level"));
    }
    let bundle = load(bundle_path)?;
    let generated = bundle
        .generated
        .as_ref()
        .ok_or_else(|| missing_member("config", "generated", "blending needs it"))?;
    let read = |name: &str| fs::read(warp_dir.join(name)).map_err(|e| CliError::validation("load", format!("{name}: {e}")));
    let warped = png::decode_rgb(&read("warped.png")?).map_err(|e| CliError::validation("load", format!("warped.png: {e}")))?;
    let mask = png::decode_gray(&read("mask.png")?).map_err(|e| CliError::validation("load", format!("mask.png: {e}")))?;
    for (name, dims) in [("warped.png", warped.dims()), ("mask.png", mask.dims())] {
        if dims != generated.dims() {
            return Err(CliError::validation(
                "load",
                format!("{name} is {dims:?} but the generated image is {:?}", generated.dims()),
            ));
        }
    }
    let Some(out) = out else {
        println!("dry run: bundle and warp outputs are valid; nothing written");
        return Ok(());
    };
    let t = Instant::now();
    let blended = laplacian_blend(&warped, generated, &BlendMask::new(mask), levels)
        .map_err(|e| CliError::pipeline(e.into()))?;
    let blend_time = t.elapsed();
    ensure_dir(out)?;
    write_file(out, "blended.png", &encode_rgb(&blended, "blended")?)?;
    write_json(out, CONFIG_NAME, &json!({ "command": "blend", "levels": levels }))?;
    println!("stage timings:");
    Timings(vec![("blend", blend_time)]).print();
    println!("outputs written to {}", out.display());
    Ok(())
}

fn read_landmark_json(path: &Path) -> CliResult<LandmarkJson> {
    let bytes = fs::read(path).map_err(|e| CliError::validation("load", format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::validation("load", format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: &'a FitConfig,
    iterations_run: usize,
    converged: bool,
    final_loss: f64,
    loss_trace: &'a [f64],
    distance_trace: &'a [f64],
    focal_trace: &'a [f64],
}

pub fn fit_camera(bundle_path: &Path, scene: &Path, observed: Option<&Path>, cfg: &FitConfig, out: Option<&Path>) -> CliResult<()> {
    let bundle = load(bundle_path)?;
    let reference = SceneLandmarks::new(read_landmark_json(scene)?.to_vectors()).map_err(CliError::fit)?;
    let observed: LandmarkSet = match observed {
        Some(p) => normalize_landmarks(&read_landmark_json(p)?.to_vectors()).map_err(CliError::fit)?,
        None => bundle
            .landmarks
            .clone()
            .ok_or_else(|| missing_member("config", "landmarks", "pass --observed or add it"))?,
    };
    let ctx = match bundle.reparam {
        Some(ctx) => ctx,
        None => {
            let pre = Prebuilt::new(&bundle, &BilateralParams::default()).map_err(CliError::pipeline)?;
            default_reparam(&bundle.camera, &pre.pivot).map_err(|e| CliError::validation("camera", e))?
        }
    };
    let Some(out) = out else {
        println!("dry run: bundle, landmarks and fit settings are valid; nothing written");
        return Ok(());
    };
    let t = Instant::now();
    let result = run_fit(&reference, &observed, &bundle.camera, &ctx, cfg).map_err(CliError::fit)?;
    let fit_time = t.elapsed();
    let final_loss = landmark_loss(&predict_landmarks(&reference, &result.camera).map_err(CliError::fit)?, &observed);

    ensure_dir(out)?;
    write_json(out, "camera.json", &result.camera)?;
    write_json(
        out,
        "fit-trace.json",
        &FitReport {
            config: cfg,
            iterations_run: result.iterations_run,
            converged: result.converged,
            final_loss,
            loss_trace: &result.loss_trace,
            distance_trace: &result.distance_trace,
            focal_trace: &result.focal_trace,
        },
    )?;
    write_json(out, CONFIG_NAME, &json!({ "command": "fit-camera", "fit": cfg, "reparam": ctx }))?;
    println!("stage timings:");
    Timings(vec![("fit", fit_time)]).print();
    println!(
        "iterations {} converged {} loss {final_loss:.6e} t_z {:.6} focal {:.3}",
        result.iterations_run,
        result.converged,
        result.camera.t_z(),
        result.camera.focal
    );
    println!("outputs written to {}", out.display());
    Ok(())
}

pub fn make_fixture(kind: FixtureKind, size: usize, truth: &ViewDelta, out: Option<&Path>) -> CliResult<()> {
    truth.validate().map_err(|e| CliError::validation("camera", e))?;
    let t = Instant::now();
    let f = make_fixture_with_view(kind, size, truth).map_err(CliError::fixture)?;
    let build_time = t.elapsed();
    let Some(out) = out else {
        println!("dry run: {kind} fixture of size {size} is valid; nothing written");
        return Ok(());
    };
    let bundle = SessionBundle {
        source: f.source.clone(),
        depth: f.depth.clone(),
        matte: Some(f.matte.clone()),
        generated: Some(f.generated.clone()),
        camera: f.camera.clone(),
        landmarks: Some(f.landmarks.clone()),
        reparam: Some(f.reparam),
    };
    let t = Instant::now();
    save_bundle(out, &bundle).map_err(CliError::write)?;
    write_file(out, "truth_view.png", &encode_rgb(&f.truth_view, "truth_view")?)?;
    write_file(out, "truth_view.pfm", &color_pfm(&f.truth_view))?;
    write_file(out, "truth_depth.pfm", &Pfm::gray(size, size, &f.truth_depth).expect("depth length matches").encode())?;
    write_json(out, "truth_camera.json", &f.truth_camera)?;
    let scene = LandmarkJson {
        points: f.scene_landmarks.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
    };
    write_json(out, "scene_landmarks.json", &scene)?;
    write_json(out, CONFIG_NAME, &json!({ "command": "make-fixture", "kind": kind.name(), "size": size, "truth_view": truth }))?;
    println!("stage timings:");
    Timings(vec![("build", build_time), ("write", t.elapsed())]).print();
    println!("{kind} fixture written to {}", out.display());
    Ok(())
}

/// Optional per-pair values that cannot be computed here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    lpips: Option<f64>,
    /// Identity embeddings of the output and the reference.
    id_output: Option<Vec<f64>>,
    id_reference: Option<Vec<f64>>,
}

const OUTPUT_SUFFIX: &str = "_output.png";
const REFERENCE_SUFFIX: &str = "_reference.png";

fn pair_names(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::validation("eval", format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::runtime("eval", e))?;
        if let Some(name) = entry.file_name().to_str().and_then(|n| n.strip_suffix(OUTPUT_SUFFIX)) {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn score_pair(dir: &Path, name: &str) -> CliResult<MetricRow> {
    let read_png = |file: String| -> CliResult<ImageBuffer> {
        let bytes = fs::read(dir.join(&file)).map_err(|e| CliError::validation("eval", format!("{file}: {e}")))?;
        png::decode_rgb(&bytes).map_err(|e| CliError::validation("eval", format!("{file}: {e}")))
    };
    let output = read_png(format!("{name}{OUTPUT_SUFFIX}"))?;
    let reference = read_png(format!("{name}{REFERENCE_SUFFIX}"))?;
    let sidecar_path = dir.join(format!("{name}.json"));
    let sidecar: Sidecar = match fs::read(&sidecar_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| CliError::validation("eval", format!("{name}.json: {e}")))?,
        Err(_) => Sidecar::default(),
    };
    let id = match (sidecar.id_output, sidecar.id_reference) {
        (Some(a), Some(b)) => {
            let a = FeatureVector::new(a).map_err(CliError::metric)?;
            let b = FeatureVector::new(b).map_err(CliError::metric)?;
            Some(id_score(&a, &b).map_err(CliError::metric)?)
        }
        (None, None) => None,
        _ => return Err(CliError::validation("eval", format!("{name}.json: id_output and id_reference come together"))),
    };
    Ok(MetricRow {
        name: name.to_string(),
        psnr_db: psnr(&output, &reference, None).map_err(CliError::metric)?,
        ssim: ssim(&output, &reference).map_err(CliError::metric)?,
        lpips: sidecar.lpips,
        id_score: id,
    })
}

pub fn eval(pairs_dir: &Path, method: &str, out: Option<&Path>) -> CliResult<()> {
    let names = pair_names(pairs_dir)?;
    let rows = names
        .par_iter()
        .map(|n| score_pair(pairs_dir, n))
        .collect::<CliResult<Vec<_>>>()?;
    let report = aggregate_report(rows).map_err(CliError::metric)?;
    let text = report.to_text(method);
    print!("{text}");
    let Some(out) = out else {
        return Ok(());
    };
    ensure_dir(out)?;
    write_json(out, "report.json", &report)?;
    write_file(out, "report.txt", text.as_bytes())?;
    write_json(out, CONFIG_NAME, &json!({ "command": "eval", "method": method, "pairs": names.len() }))?;
    println!("report written to {}", out.display());
    Ok(())
}
