//! Optimization loop: random virtual scales, render through the filter,
//! objective, backward pass and Adam updates on a fixed primitive set.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clod::{LodMode, LodQuery, SoftRatio, DEFAULT_TAU};
use crate::dataset::{CameraSet, View};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{LossBreakdown, Objective, DEFAULT_LAMBDA_DSSIM, DEFAULT_LAMBDA_REG};
use crate::metrics::psnr;
use crate::model::{GaussianScene, ParamClass, ParamGradients};
use crate::optim::{class_index, Adam, LearningRates};
use crate::ply::save_ply;
use crate::raster::{render, render_backward, RenderArtifacts};

/// Starting `sigma_d` for the mechanism phase. Small enough that attenuation
/// can push opacities under `tau * s_v` across the whole scale range.
pub const DEFAULT_SIGMA_D_INIT: f64 = 1.0;

/// Which objective terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Scale weight pinned to 1.
    NoWeight,
    /// Count regularizer disabled.
    NoLoss,
    NoWeightNoLoss,
}

impl Variant {
    pub fn uses_weight(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLoss)
    }

    pub fn uses_reg(self) -> bool {
        matches!(self, Variant::Full | Variant::NoWeight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Iteration from which scales are sampled and attenuation is active.
    pub mechanism_start: usize,
    /// Upper end of the uniform scale range.
    pub s_max: f64,
    pub lambda_reg: f64,
    pub lambda_dssim: f64,
    pub tau: f64,
    /// Differentiable rendered ratio fed to the regularizer.
    pub soft_ratio: SoftRatio,
    /// Value every `sigma_d` is reset to when the mechanism engages; `None` keeps the loaded values.
    pub sigma_d_init: Option<f64>,
    pub variant: Variant,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            mechanism_start: 5_000,
            s_max: 5.0,
            lambda_reg: DEFAULT_LAMBDA_REG,
            lambda_dssim: DEFAULT_LAMBDA_DSSIM,
            tau: DEFAULT_TAU,
            soft_ratio: SoftRatio::default(),
            sigma_d_init: Some(DEFAULT_SIGMA_D_INIT),
            variant: Variant::Full,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small-scene schedule: the default one shrunk fifteenfold.
    pub fn desk() -> Self {
        Self {
            iterations: 2_000,
            mechanism_start: 200,
            checkpoint_every: 500,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.s_max >= 1.0 && self.s_max.is_finite()) {
            return bad(format!("s_max must be >= 1, got {}", self.s_max));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        self.soft_ratio.validate()?;
        if let Some(v) = self.sigma_d_init {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("sigma_d_init must be positive, got {v}"));
            }
        }
        if self.lambda_reg < 0.0 || !(0.0..=1.0).contains(&self.lambda_dssim) {
            return bad("loss weights out of range".into());
        }
        let lr = &self.lr;
        for (name, v) in [
            ("position_init", lr.position_init),
            ("position_final", lr.position_final),
            ("log_scale", lr.log_scale),
            ("rotation", lr.rotation),
            ("opacity", lr.opacity),
            ("sigma_d", lr.sigma_d),
            ("sh_dc", lr.sh_dc),
            ("sh_rest", lr.sh_rest),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("learning rate {name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps < 0.0 {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda_reg: if self.variant.uses_reg() { self.lambda_reg } else { 0.0 },
            lambda_dssim: self.lambda_dssim,
            s_max: self.s_max,
            adaptive_weight: self.variant.uses_weight(),
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub adam: Adam,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    /// Exponential moving averages of loss and PSNR.
    pub ema_loss: f64,
    pub ema_psnr: f64,
    extent: f64,
}

impl TrainState {
    pub fn new(scene: GaussianScene, cfg: &TrainConfig) -> Self {
        let mut adam = Adam::new(scene.params().len());
        adam.beta1 = cfg.beta1;
        adam.beta2 = cfg.beta2;
        adam.eps = cfg.adam_eps;
        let extent = scene.extent().max(1e-6);
        Self {
            scene,
            adam,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ema_loss: f64::NAN,
            ema_psnr: f64::NAN,
            extent,
        }
    }

    pub fn mechanism_active(&self, cfg: &TrainConfig) -> bool {
        self.iteration >= cfg.mechanism_start
    }
}

/// `1` before the mechanism starts, otherwise a draw from `U(1, s_max)`.
pub fn sample_scale(state: &mut TrainState, cfg: &TrainConfig) -> f64 {
    if !state.mechanism_active(cfg) || cfg.s_max <= 1.0 {
        return 1.0;
    }
    state.rng.random_range(1.0..=cfg.s_max)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub view: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub eta_actual: f64,
    pub rendered_count: usize,
    pub total_primitives: usize,
    pub psnr: f64,
}

fn ema(prev: f64, v: f64) -> f64 {
    if prev.is_nan() {
        v
    } else {
        0.95 * prev + 0.05 * v
    }
}

/// Objective of one render of `view` under `mode` and its gradient with
/// respect to every scene parameter. The regularizer only acts when `mode`
/// carries a query.
pub fn loss_and_gradients(
    scene: &GaussianScene,
    view: &View,
    mode: &LodMode,
    cfg: &TrainConfig,
) -> Result<(RenderArtifacts, LossBreakdown, ParamGradients)> {
    let art = render(scene, &view.camera, mode)?;
    let s_v = mode.query().map_or(1.0, |q| q.scale);
    let (eta_soft, d_eta_soft) = match mode {
        LodMode::Clod(q) => cfg.soft_ratio.evaluate(&art.alpha_eff, &art.distances.in_frustum, q),
        _ => (art.rendered_ratio, Vec::new()),
    };
    let (loss, d_image, d_eta) = cfg.objective().evaluate(&art.image, &view.image, s_v, eta_soft)?;
    let extra: Option<Vec<f64>> =
        (!d_eta_soft.is_empty() && d_eta != 0.0).then(|| d_eta_soft.iter().map(|g| g * d_eta).collect());
    let d_image = Image {
        width: view.image.width,
        height: view.image.height,
        data: d_image,
    };
    let grads = render_backward(scene, &view.camera, &art, &d_image, extra.as_deref())?;
    Ok((art, loss, grads))
}

/// One forward/backward/update on `view`.
pub fn train_step(state: &mut TrainState, view: &View, view_index: usize, cfg: &TrainConfig) -> Result<StepRecord> {
    let it = state.iteration;
    if let (true, Some(v)) = (it == cfg.mechanism_start, cfg.sigma_d_init) {
        for p in &mut state.scene.primitives {
            p.sigma_d = v;
        }
    }
    let active = state.mechanism_active(cfg);
    let s_v = sample_scale(state, cfg);
    let mode = if active {
        LodMode::Clod(LodQuery::with_tau(s_v, cfg.tau))
    } else {
        LodMode::Off { tau: cfg.tau }
    };
    let (art, loss, grads) = loss_and_gradients(&state.scene, view, &mode, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            iteration: it,
            detail: format!(
                "loss {} (view {view_index}, s_v {s_v:.4}, l1 {}, dssim {}, reg {}, eta {})",
                loss.total, loss.l1, loss.dssim, loss.reg, loss.eta_soft
            ),
        });
    }
    if let Some(k) = grads.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: it,
            detail: format!(
                "non-finite gradient for primitive {} ({:?}), view {view_index}, s_v {s_v:.4}",
                k / grads.layout.stride,
                grads.layout.class_of(k)
            ),
        });
    }

    let layout = grads.layout;
    let rates: [f64; 7] = std::array::from_fn(|c| cfg.lr.rate(ParamClass::ALL[c], it, cfg.iterations, state.extent));
    let mut frozen = [false; 7];
    frozen[class_index(ParamClass::SigmaD)] = !active;
    let mut params = state.scene.params();
    state.adam.update(&mut params, &grads.values, &layout, &rates, &frozen);
    state.scene.set_params(&params);
    for p in &mut state.scene.primitives {
        p.normalize_rotation();
    }
    state.scene.check_finite().map_err(|e| Error::Diverged {
        iteration: it,
        detail: format!("parameters became non-finite: {e}"),
    })?;

    let p = psnr(&art.image, &view.image)?;
    state.ema_loss = ema(state.ema_loss, loss.total);
    state.ema_psnr = ema(state.ema_psnr, p.min(100.0));
    state.iteration += 1;
    Ok(StepRecord {
        iteration: it,
        view: view_index,
        loss,
        eta_actual: art.rendered_ratio,
        rendered_count: art.rendered_count,
        total_primitives: art.total,
        psnr: p,
    })
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn final_model(&self) -> PathBuf {
        self.dir.join("model.ply")
    }

    pub fn checkpoint(&self, iteration: usize) -> (PathBuf, PathBuf) {
        let base = self.dir.join("checkpoints");
        (
            base.join(format!("iter_{iteration:06}.ply")),
            base.join(format!("iter_{iteration:06}.adam")),
        )
    }

    fn save_checkpoint(&self, state: &TrainState) -> Result<()> {
        let (ply, adam) = self.checkpoint(state.iteration);
        if let Some(parent) = ply.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_ply(&state.scene, &ply)?;
        state.adam.save(adam)
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub scene: GaussianScene,
    pub log: Vec<StepRecord>,
}

/// Runs `cfg.iterations` steps, visiting cameras round-robin. When `out` is
/// given, writes a JSON-lines log, periodic checkpoints and the final model;
/// on failure the last good state is checkpointed before the error returns.
pub fn train(
    scene: GaussianScene,
    cameras: &CameraSet,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cameras.len() < 2 {
        return Err(Error::Config("training needs at least 2 cameras".into()));
    }
    cameras.validate()?;
    scene.validate()?;

    let mut log_file = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log_path();
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };

    let mut state = TrainState::new(scene, cfg);
    let mut log = Vec::with_capacity(cfg.iterations);
    while state.iteration < cfg.iterations {
        let vi = state.iteration % cameras.len();
        let record = match train_step(&mut state, &cameras.views[vi], vi, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(o) = out {
                    o.save_checkpoint(&state)?;
                }
                if let Some((w, path)) = log_file.as_mut() {
                    w.flush().map_err(|err| Error::io(path.as_path(), err))?;
                }
                return Err(e);
            }
        };
        if let Some((w, path)) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
        if let Some(o) = out {
            if cfg.checkpoint_every > 0
                && state.iteration.is_multiple_of(cfg.checkpoint_every)
                && state.iteration < cfg.iterations
            {
                o.save_checkpoint(&state)?;
            }
        }
    }
    if let (Some(o), Some((mut w, path))) = (out, log_file) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        save_ply(&state.scene, o.final_model())?;
    }
    Ok(TrainResult {
        scene: state.scene,
        log,
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_SIGMA_D;
    use crate::synth::{
        generate_camera_set, generate_synthetic_scene, perturb_scene, Layout, Perturbation, RigSpec, SynthSpec,
    };

    fn toy(count: usize) -> (GaussianScene, CameraSet) {
        let gt = generate_synthetic_scene(&SynthSpec::new(count, 5, Layout::UniformBox)).unwrap();
        let rig = RigSpec {
            width: 24,
            height: 24,
            ..RigSpec::default()
        };
        let cams = generate_camera_set(&gt, 4, 1, &rig).unwrap();
        (perturb_scene(&gt, &Perturbation::default()), cams)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 20,
            mechanism_start: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scale_is_one_before_start() {
        let (scene, _) = toy(5);
        let cfg = small_cfg();
        let mut state = TrainState::new(scene, &cfg);
        for it in 0..5 {
            state.iteration = it;
            assert_eq!(sample_scale(&mut state, &cfg), 1.0);
        }
    }

    #[test]
    fn scale_distribution() {
        let (scene, _) = toy(5);
        let cfg = small_cfg();
        let mut state = TrainState::new(scene.clone(), &cfg);
        state.iteration = 10;
        let draws: Vec<f64> = (0..100_000).map(|_| sample_scale(&mut state, &cfg)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 3.0).abs() <= 0.02, "{mean}");
        assert!(draws.iter().all(|&s| (1.0..=5.0).contains(&s)));

        let mut again = TrainState::new(scene, &cfg);
        again.iteration = 10;
        let repeat: Vec<f64> = (0..100).map(|_| sample_scale(&mut again, &cfg)).collect();
        assert_eq!(repeat, draws[..100]);
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig {
            s_max: 0.5,
            ..TrainConfig::desk()
        }
        .validate()
        .is_err());
        let mut cfg = TrainConfig::desk();
        cfg.lr.sigma_d = 0.0;
        assert!(cfg.validate().is_err());
        let toml_like = serde_json::to_string(&TrainConfig::desk()).unwrap();
        let back: TrainConfig = serde_json::from_str(&toml_like).unwrap();
        assert_eq!(back, TrainConfig::desk());
        let partial: TrainConfig =
            serde_json::from_str(r#"{"iterations": 7, "variant": "no-weight-no-loss"}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.variant, Variant::NoWeightNoLoss);
        assert_eq!(partial.s_max, 5.0);
    }

    #[test]
    fn variant_wiring() {
        let o = TrainConfig::desk().with_variant(Variant::NoWeightNoLoss).objective();
        assert_eq!(o.lambda_reg, 0.0);
        assert!(!o.adaptive_weight);
        let o = TrainConfig::desk().with_variant(Variant::NoWeight).objective();
        assert_eq!(o.lambda_reg, 1.0);
        assert!(!o.adaptive_weight);
        let o = TrainConfig::desk().with_variant(Variant::NoLoss).objective();
        assert_eq!(o.lambda_reg, 0.0);
        assert!(o.adaptive_weight);
    }

    #[test]
    fn plain_fitting_decreases_loss() {
        let (scene, cams) = toy(50);
        let single = CameraSet {
            views: vec![cams.views[0].clone(), cams.views[0].clone()],
        };
        let cfg = TrainConfig {
            iterations: 100,
            mechanism_start: 0,
            s_max: 1.0,
            lambda_reg: 0.0,
            ..TrainConfig::default()
        };
        let res = train(scene, &single, &cfg, None).unwrap();
        let first = res.log[0].loss.total;
        let last = res.log[99].loss.total;
        assert!(last < 0.7 * first, "{first} -> {last}");
        let smoothed: Vec<f64> = res
            .log
            .chunks(10)
            .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>())
            .collect();
        assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (scene, cams) = toy(30);
        let cfg = small_cfg();
        let a = train(scene.clone(), &cams, &cfg, None).unwrap();
        let b = train(scene, &cams, &cfg, None).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn sigma_untouched_when_mechanism_never_starts() {
        let (scene, cams) = toy(30);
        let cfg = TrainConfig {
            iterations: 10,
            mechanism_start: 10,
            ..TrainConfig::default()
        };
        let res = train(scene.clone(), &cams, &cfg, None).unwrap();
        for (a, b) in res.scene.primitives.iter().zip(&scene.primitives) {
            assert_eq!(a.sigma_d, b.sigma_d);
        }
        assert!(res.log.iter().all(|r| r.loss.s_v == 1.0));
    }

    #[test]
    fn sigma_reset_when_mechanism_engages() {
        let (scene, cams) = toy(30);
        let mut cfg = TrainConfig {
            iterations: 3,
            mechanism_start: 2,
            sigma_d_init: Some(0.75),
            ..TrainConfig::default()
        };
        cfg.lr.sigma_d = 1e-12;
        let mut state = TrainState::new(scene, &cfg);
        for i in 0..2 {
            train_step(&mut state, &cams.views[i], i, &cfg).unwrap();
            assert!(state.scene.primitives.iter().all(|p| p.sigma_d == DEFAULT_SIGMA_D));
        }
        train_step(&mut state, &cams.views[2], 2, &cfg).unwrap();
        assert!(state.scene.primitives.iter().all(|p| (p.sigma_d - 0.75).abs() < 1e-9));
        cfg.sigma_d_init = Some(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sigma_receives_gradient_once_active() {
        let (scene, cams) = toy(40);
        let cfg = TrainConfig {
            mechanism_start: 0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(scene.clone(), &cfg);
        let view = &cams.views[0];
        let s_v = 3.0;
        let q = LodQuery::with_tau(s_v, cfg.tau);
        let art = render(&scene, &view.camera, &LodMode::Clod(q)).unwrap();
        let (eta, d) = cfg.soft_ratio.evaluate(&art.alpha_eff, &art.distances.in_frustum, &q);
        let (_, d_img, d_eta) = cfg.objective().evaluate(&art.image, &view.image, s_v, eta).unwrap();
        let extra: Vec<f64> = d.iter().map(|g| g * d_eta).collect();
        let d_img = Image {
            width: view.image.width,
            height: view.image.height,
            data: d_img,
        };
        let g = render_backward(&scene, &view.camera, &art, &d_img, Some(&extra)).unwrap();
        let hit = (0..scene.len())
            .any(|i| art.distances.in_frustum[i] && art.distances.normalized[i] > 0.0 && g.sigma_d(i) != 0.0);
        assert!(hit);
        // and a step actually changes some sigma_d
        state.iteration = 1;
        train_step(&mut state, view, 0, &cfg).unwrap();
        assert!(state
            .scene
            .primitives
            .iter()
            .zip(&scene.primitives)
            .any(|(a, b)| a.sigma_d != b.sigma_d));
    }

    #[test]
    fn divergence_is_reported_and_checkpointed() {
        let (scene, mut cams) = toy(10);
        cams.views[2].image.data[5] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: dir.path().to_path_buf(),
        };
        let cfg = small_cfg();
        let err = train(scene, &cams, &cfg, Some(&out)).unwrap_err();
        let Error::Diverged { iteration, .. } = err else {
            panic!("unexpected error {err}");
        };
        assert_eq!(iteration, 2);
        assert_eq!(read_log(out.log_path()).unwrap().len(), 2);
        assert!(out.checkpoint(iteration).0.exists());
    }

    #[test]
    fn writes_log_checkpoints_and_model() {
        let (scene, cams) = toy(20);
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: dir.path().to_path_buf(),
        };
        let cfg = TrainConfig {
            checkpoint_every: 10,
            ..small_cfg()
        };
        let res = train(scene, &cams, &cfg, Some(&out)).unwrap();
        let log = read_log(out.log_path()).unwrap();
        assert_eq!(log.len(), 20);
        assert_eq!(log, res.log);
        assert!(out.checkpoint(10).0.exists() && out.checkpoint(10).1.exists());
        let model = crate::ply::load_ply(out.final_model()).unwrap();
        assert_eq!(model, crate::ply::quantize_f32(&res.scene));
        let adam = Adam::load(out.checkpoint(10).1).unwrap();
        assert_eq!(adam.step, 10);
    }

    #[test]
    fn too_few_cameras() {
        let (scene, cams) = toy(5);
        let one = CameraSet {
            views: vec![cams.views[0].clone()],
        };
        assert!(train(scene, &one, &small_cfg(), None).is_err());
    }
}
