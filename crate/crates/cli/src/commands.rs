use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clod_core::camera::CameraSetFile;
use clod_core::clod::{LodMode, LodQuery};
use clod_core::eval::{
    self, average_reports, curve_csv, dlod_clod_compare, quality_curve, scale_grid, RenderPath, Schedule, REGIONS,
};
use clod_core::ply::{encode_ply, load_ply, record_size, save_ply};
use clod_core::synth::{desk_data, DeskSpec, Layout};
use clod_core::train::{self, TrainConfig, TrainOutput, Variant};
use clod_core::{render as render_frame, Camera, CameraSet, GaussianScene, Orbit};
use clod_service::{AppState, Catalog, ModeSpec};
use serde::Serialize;
use serde_json::json;

use crate::config::{load_over, parse_grid, unix_now, write_json, write_manifest};
use crate::{CurveArgs, DlodArgs, InfoArgs, ModelCameras, RenderArgs, ServeArgs, SynthArgs, TrainArgs};

fn load_model(path: &Path) -> Result<GaussianScene> {
    load_ply(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_views(path: &Path) -> Result<CameraSet> {
    CameraSet::load(path).with_context(|| format!("loading views {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_mode(mode: &str, s_v: f64, tau: f64, n_total: usize) -> Result<LodMode> {
    let query = LodQuery::with_tau(s_v, tau);
    query.validate()?;
    Ok(match mode.parse::<ModeSpec>()? {
        ModeSpec::Clod => LodMode::Clod(query),
        ModeSpec::Off => LodMode::Off { tau },
        ModeSpec::TopK(k) => {
            ensure!(k <= n_total, "topk:{k} exceeds the {n_total} primitives");
            LodMode::TopK { k, query }
        }
    })
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let t0 = Instant::now();
    let started = unix_now();
    let mut spec = load_over(DeskSpec::default(), a.config.as_deref())?;
    if let Some(v) = a.count {
        spec.scene.count = v;
    }
    if let Some(v) = a.seed {
        spec.scene.seed = v;
    }
    if let Some(v) = &a.layout {
        spec.scene.layout = v.parse::<Layout>()?;
    }
    if let Some(v) = a.sh_degree {
        spec.scene.sh_degree = v;
    }
    if let Some(v) = a.cameras {
        spec.cameras = v;
    }
    if let Some(v) = a.camera_seed {
        spec.camera_seed = v;
    }
    if let Some(v) = a.width {
        spec.rig.width = v;
    }
    if let Some(v) = a.height {
        spec.rig.height = v;
    }
    let data = desk_data(&spec)?;
    create_dir(&a.out)?;
    save_ply(&data.ground_truth, a.out.join("ground_truth.ply"))?;
    save_ply(&data.init, a.out.join("init.ply"))?;
    data.train.save(a.out.join("train"))?;
    data.test.save(a.out.join("test"))?;
    write_json(&a.out.join("desk.json"), &spec)?;
    let outputs = [
        "ground_truth.ply",
        "init.ply",
        "train/cameras.json",
        "test/cameras.json",
        "desk.json",
    ];
    write_manifest(
        &a.out,
        "synth",
        started,
        t0.elapsed().as_secs_f64(),
        &spec,
        outputs.iter().map(|s| s.to_string()).collect(),
    )?;
    eprintln!(
        "wrote {} primitives, {} train and {} test views to {}",
        data.ground_truth.len(),
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let base = if a.desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    let mut cfg = load_over(base, a.config.as_deref())?;
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.mechanism_start {
        cfg.mechanism_start = v;
    }
    if let Some(v) = a.s_max {
        cfg.s_max = v;
    }
    if let Some(v) = a.lambda_reg {
        cfg.lambda_reg = v;
    }
    if let Some(v) = &a.variant {
        cfg.variant = serde_json::from_value::<Variant>(json!(v)).with_context(|| {
            format!("unknown variant '{v}' (expected full, no-weight, no-loss or no-weight-no-loss)")
        })?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.sigma_d_init {
        cfg.sigma_d_init = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_path(explicit: &Option<PathBuf>, data: &Option<PathBuf>, rel: &str) -> Result<PathBuf> {
    match (explicit, data) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(rel)),
        (None, None) => bail!("pass --data or an explicit path for {rel}"),
    }
}

/// Held-out results written next to the trained model.
#[derive(Serialize)]
struct Evaluation {
    summary: eval::Summary,
    curve: Vec<eval::CurvePoint>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let started = unix_now();
    let cfg = train_config(a)?;
    let init = load_model(&input_path(&a.init, &a.data, "init.ply")?)?;
    let views = load_views(&input_path(&a.cameras, &a.data, "train/cameras.json")?)?;
    let test_path = a.test.clone().or_else(|| {
        a.data
            .as_ref()
            .map(|d| d.join("test/cameras.json"))
            .filter(|p| p.is_file())
    });
    let test = test_path.as_deref().map(load_views).transpose()?;

    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let out = TrainOutput { dir: a.out.clone() };
    let result = train::train(init, &views, &cfg, Some(&out))?;
    let mut outputs = vec!["config.json".to_string(), "train_log.jsonl".into(), "model.ply".into()];
    if let Some(test) = &test {
        let grid = scale_grid(1.0, cfg.s_max.max(1.0), 0.5);
        let evaluation = Evaluation {
            summary: eval::summarize(&result.scene, test)?,
            curve: quality_curve(&result.scene, test, &grid, cfg.tau)?,
        };
        std::fs::write(a.out.join("curve.csv"), curve_csv(&evaluation.curve))?;
        write_json(&a.out.join("eval.json"), &evaluation)?;
        outputs.extend(["curve.csv".into(), "eval.json".into()]);
        eprintln!(
            "held-out PSNR {:.2} dB at full detail with {} primitives",
            evaluation.summary.psnr, evaluation.summary.num_gaussians
        );
    }
    write_manifest(&a.out, "train", started, t0.elapsed().as_secs_f64(), &cfg, outputs)?;
    if let Some(last) = result.log.last() {
        eprintln!(
            "finished {} iterations, final loss {:.5}",
            cfg.iterations, last.loss.total
        );
    }
    Ok(())
}

fn parse_orbit(s: &str, scene: &GaussianScene) -> Result<Orbit> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("orbit '{s}'"))?;
    let [azimuth, elevation, radius] = v[..] else {
        bail!("orbit '{s}' needs azimuth,elevation,radius");
    };
    Ok(Orbit {
        azimuth,
        elevation,
        radius,
        target: scene.centroid().into(),
    })
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let scene = load_model(&a.model)?;
    let camera = match (&a.cameras, &a.orbit) {
        (Some(path), _) => {
            let file = CameraSetFile::load(path).with_context(|| format!("loading cameras {}", path.display()))?;
            let n = file.frames.len();
            let frame = file
                .frames
                .get(a.frame)
                .with_context(|| format!("frame {} out of range ({n} frames)", a.frame))?;
            file.camera(frame)
        }
        (None, Some(orbit)) => {
            ensure!(a.width > 0 && a.height > 0, "image size must be positive");
            Camera::with_fov(a.width, a.height, a.fov, parse_orbit(orbit, &scene)?.pose()?)
        }
        (None, None) => bail!("pass --cameras or --orbit"),
    };
    let mode = parse_mode(&a.mode, a.sv, a.tau, scene.len())?;
    let art = render_frame(&scene, &camera, &mode)?;
    art.image
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", serde_json::to_string_pretty(&art.summary())?);
    Ok(())
}

pub fn curve(a: &CurveArgs) -> Result<()> {
    let scene = load_model(&a.input.model)?;
    let views = load_views(&a.input.cameras)?;
    let grid = parse_grid(&a.grid)?;
    let csv = curve_csv(&quality_curve(&scene, &views, &grid, a.tau)?);
    match &a.out {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    if s == "ramp" {
        return Ok(Schedule::MatchedRamp);
    }
    let v = parse_grid(s)?;
    let scales: [f64; REGIONS] = v
        .try_into()
        .map_err(|_| anyhow::anyhow!("schedule '{s}' needs {REGIONS} scales or 'ramp'"))?;
    for &sv in &scales {
        LodQuery::new(sv).validate()?;
    }
    Ok(Schedule::Fixed { scales })
}

pub fn dlod_compare(a: &DlodArgs) -> Result<()> {
    let t0 = Instant::now();
    let started = unix_now();
    ensure!(
        a.low_ratio > 0.0 && a.low_ratio <= 1.0,
        "--low-ratio must lie in (0, 1]"
    );
    let schedule = parse_schedule(&a.schedule)?;
    let clod = load_model(&a.clod)?;
    let high = load_model(&a.high)?;
    let low = a.low.as_deref().map(load_model).transpose()?;
    let views = load_views(&a.cameras)?;
    ensure!(!views.is_empty(), "no views in {}", a.cameras.display());
    let high_mode = LodMode::Clod(LodQuery::with_tau(1.0, a.tau));

    let mut comparisons = Vec::with_capacity(views.len());
    for view in &views.views {
        let low_path = match &low {
            Some(scene) => RenderPath { scene, mode: high_mode },
            None => {
                let full = render_frame(&high, &view.camera, &high_mode)?.rendered_count;
                let k = ((full as f64 * a.low_ratio).round() as usize).max(1);
                RenderPath {
                    scene: &high,
                    mode: LodMode::TopK {
                        k,
                        query: LodQuery::with_tau(1.0, a.tau),
                    },
                }
            }
        };
        let high_path = RenderPath {
            scene: &high,
            mode: high_mode,
        };
        comparisons.push(dlod_clod_compare(high_path, low_path, &clod, view, &schedule, a.tau)?);
    }
    let dlod = average_reports(&comparisons.iter().map(|c| &c.dlod).collect::<Vec<_>>())?;
    let clod_report = average_reports(&comparisons.iter().map(|c| &c.clod).collect::<Vec<_>>())?;

    create_dir(&a.out)?;
    comparisons[0].dlod_image.save_png(a.out.join("dlod.png"))?;
    comparisons[0].clod_image.save_png(a.out.join("clod.png"))?;
    let report = json!({
        "views": views.len(),
        "dlod": dlod,
        "clod": clod_report,
        "clod_scales": comparisons.iter().map(|c| c.clod_scales).collect::<Vec<_>>(),
    });
    write_json(&a.out.join("report.json"), &report)?;
    let settings = json!({
        "schedule": schedule,
        "low_ratio": a.low.is_none().then_some(a.low_ratio),
        "tau": a.tau,
    });
    let outputs = ["dlod.png", "clod.png", "report.json"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_manifest(
        &a.out,
        "dlod-compare",
        started,
        t0.elapsed().as_secs_f64(),
        &settings,
        outputs,
    )?;
    eprintln!(
        "max adjacent-strip jump: discrete {:.2} dB, continuous {:.2} dB",
        dlod.max_jump(),
        clod_report.max_jump()
    );
    Ok(())
}

pub fn summarize(a: &ModelCameras) -> Result<()> {
    let scene = load_model(&a.model)?;
    let views = load_views(&a.cameras)?;
    println!("{}", serde_json::to_string_pretty(&eval::summarize(&scene, &views)?)?);
    Ok(())
}

/// Mean, minimum and maximum of a per-primitive quantity.
#[derive(Serialize)]
struct Stats {
    mean: f64,
    min: f64,
    max: f64,
}

impl Stats {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Stats {
            mean: sum / n as f64,
            min,
            max,
        })
    }
}

pub fn info(a: &InfoArgs) -> Result<()> {
    let scene = load_model(&a.model)?;
    let (lo, hi) = scene.bounds();
    let bytes = encode_ply(&scene)?.len();
    let info = json!({
        "num_gaussians": scene.len(),
        "sh_degree": scene.sh_degree,
        "record_bytes": record_size(scene.sh_degree),
        "file_bytes": bytes,
        "file_mb": bytes as f64 / 1e6,
        "bounds": {"min": <[f64; 3]>::from(lo), "max": <[f64; 3]>::from(hi)},
        "opacity": Stats::of(scene.primitives.iter().map(|p| p.opacity())),
        "sigma_d": Stats::of(scene.primitives.iter().map(|p| p.sigma_d)),
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    ensure!(a.max_size > 0, "--max-size must be positive");
    let catalog = Catalog::load(&a.scenes_dir)?;
    let list = catalog.list();
    for e in &list.errors {
        eprintln!("skipping {}: {}", e.file, e.error);
    }
    eprintln!(
        "serving {} scene(s) from {} on http://{}:{}",
        list.scenes.len(),
        a.scenes_dir.display(),
        a.host,
        a.port
    );
    let state = AppState::new(catalog, a.max_size.saturating_mul(a.max_size));
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(clod_service::serve(state, (a.host, a.port).into()))?;
    Ok(())
}
