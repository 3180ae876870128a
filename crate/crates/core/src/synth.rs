//! Seeded synthetic scenes and camera rigs for self-contained experiments.

use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Orbit};
use crate::clod::LodMode;
use crate::dataset::{CameraSet, View};
use crate::error::{Error, Result};
use crate::math::logit;
use crate::model::{sh_coeffs_for_degree, GaussianPrimitive, GaussianScene, DEFAULT_SIGMA_D};
use crate::raster::render;
use crate::sh::SH_C0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    UniformBox,
    #[default]
    TexturedPlane,
    ClusterMix,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-box" => Ok(Layout::UniformBox),
            "textured-plane" => Ok(Layout::TexturedPlane),
            "cluster-mix" => Ok(Layout::ClusterMix),
            other => Err(Error::Config(format!(
                "unknown layout '{other}' (expected uniform-box, textured-plane or cluster-mix)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    pub layout: Layout,
    pub sh_degree: usize,
}

impl SynthSpec {
    pub fn new(count: usize, seed: u64, layout: Layout) -> Self {
        Self {
            count,
            seed,
            layout,
            sh_degree: 0,
        }
    }
}

const PALETTE_SIZE: usize = 6;

fn palette(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..PALETTE_SIZE)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)))
        .collect()
}

fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

fn plane_texture(palette: &[[f64; 3]], x: f64, y: f64) -> [f64; 3] {
    let cx = ((x + 1.5) * 1.5).floor() as i64;
    let cy = ((y + 1.5) * 1.5).floor() as i64;
    let base = palette[((cx + 2 * cy).rem_euclid(PALETTE_SIZE as i64)) as usize];
    let shade = 0.8 + 0.2 * (7.0 * x).sin() * (5.0 * y).cos();
    base.map(|c| (c * shade).clamp(0.02, 0.98))
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q = Vector4::from_fn(|_, _| normal.sample(rng));
    q / q.norm()
}

fn about_z(angle: f64) -> Vector4<f64> {
    Vector4::new((angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin())
}

/// Deterministic scene for `(spec, seed)`. Opacities lie in `[0.3, 0.95]`,
/// every `sigma_d` starts at [`DEFAULT_SIGMA_D`].
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<GaussianScene> {
    if spec.count == 0 {
        return Err(Error::Config("synthetic scene needs count >= 1".into()));
    }
    if spec.sh_degree > crate::model::MAX_SH_DEGREE {
        return Err(Error::Config(format!("sh degree {} unsupported", spec.sh_degree)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let colors = palette(&mut rng);
    let coeffs = sh_coeffs_for_degree(spec.sh_degree);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut primitives = Vec::with_capacity(spec.count);
    let clusters: Vec<(Vector3<f64>, usize)> = (0..8)
        .map(|k| (Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), k % PALETTE_SIZE))
        .collect();

    for i in 0..spec.count {
        let opacity = rng.random_range(0.3..=0.95);
        let (position, log_scale, rotation, rgb) = match spec.layout {
            Layout::TexturedPlane => {
                let x = rng.random_range(-1.5..1.5);
                let y = rng.random_range(-1.5..1.5);
                let z = rng.random_range(-0.01..0.01);
                let coarse = rng.random_bool(0.3);
                let (lo, hi) = if coarse { (0.08, 0.16) } else { (0.03, 0.06) };
                let sx: f64 = rng.random_range(lo..hi);
                let sy: f64 = sx * rng.random_range(0.5..1.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mut rgb = plane_texture(&colors, x, y);
                if !coarse {
                    // fine splats carry their own color detail
                    for c in &mut rgb {
                        *c = (*c + rng.random_range(-0.2..0.2)).clamp(0.02, 0.98);
                    }
                }
                (
                    Vector3::new(x, y, z),
                    Vector3::new(sx.ln(), sy.ln(), 0.005f64.ln()),
                    about_z(angle),
                    rgb,
                )
            }
            Layout::UniformBox => {
                let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let s = Vector3::from_fn(|_, _| rng.random_range(0.03f64..0.1).ln());
                let rgb = colors[rng.random_range(0..PALETTE_SIZE)];
                (p, s, random_unit_quaternion(&mut rng), rgb)
            }
            Layout::ClusterMix => {
                if i % 10 == 0 {
                    let p = Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2));
                    let s = Vector3::from_fn(|_, _| rng.random_range(0.12f64..0.25).ln());
                    let rgb = colors[rng.random_range(0..PALETTE_SIZE)];
                    (p, s, random_unit_quaternion(&mut rng), rgb)
                } else {
                    let (center, color) = clusters[rng.random_range(0..clusters.len())];
                    let p = center + Vector3::from_fn(|_, _| 0.2 * normal.sample(&mut rng));
                    let s = Vector3::from_fn(|_, _| rng.random_range(0.02f64..0.06).ln());
                    let rgb = colors[color].map(|c| (c + 0.1 * normal.sample(&mut rng)).clamp(0.02, 0.98));
                    (p, s, random_unit_quaternion(&mut rng), rgb)
                }
            }
        };
        let mut sh = vec![[0.0; 3]; coeffs];
        sh[0] = rgb_to_dc(rgb);
        for c in sh.iter_mut().skip(1) {
            *c = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        }
        primitives.push(GaussianPrimitive {
            position,
            log_scale,
            rotation,
            opacity_logit: logit(opacity),
            sh,
            sigma_d: DEFAULT_SIGMA_D,
        });
    }
    GaussianScene::new(primitives, spec.sh_degree, [0.0; 3])
}

/// Camera rig parameters shared by every generated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Orbit radius range as multiples of the scene extent.
    pub radius: (f64, f64),
    /// Elevation range in degrees.
    pub elevation: (f64, f64),
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 60.0,
            radius: (1.0, 1.6),
            elevation: (20.0, 55.0),
        }
    }
}

/// Cameras orbiting the centroid, all looking at it.
pub fn generate_cameras(scene: &GaussianScene, n: usize, seed: u64, rig: &RigSpec) -> Result<Vec<Camera>> {
    if n < 2 {
        return Err(Error::Config("camera set needs at least 2 views".into()));
    }
    let (lo, hi) = scene.bounds();
    if (hi - lo).norm() <= 0.0 {
        return Err(Error::InvalidScene("scene has zero extent".into()));
    }
    let centroid = scene.centroid();
    let extent = scene.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n)
        .map(|i| {
            // Stratify azimuth so the views surround the scene.
            let azimuth = 360.0 * (i as f64 + rng.random_range(0.0..1.0)) / n as f64;
            let orbit = Orbit {
                azimuth,
                elevation: rng.random_range(rig.elevation.0..=rig.elevation.1),
                radius: extent * rng.random_range(rig.radius.0..=rig.radius.1),
                target: centroid.into(),
            };
            Ok(Camera::with_fov(rig.width, rig.height, rig.fov_deg, orbit.pose()?))
        })
        .collect()
}

/// Generates cameras and renders ground truth with attenuation disabled.
pub fn generate_camera_set(scene: &GaussianScene, n: usize, seed: u64, rig: &RigSpec) -> Result<CameraSet> {
    let cameras = generate_cameras(scene, n, seed, rig)?;
    let mut views = Vec::with_capacity(n);
    for camera in cameras {
        let image = render(scene, &camera, &LodMode::off())?.image;
        views.push(View { camera, image });
    }
    Ok(CameraSet { views })
}

/// How far a training initialization departs from the generating scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub seed: u64,
    /// Position noise standard deviation, as a fraction of the scene extent.
    pub position: f64,
    /// Additive noise on log-scales.
    pub log_scale: f64,
    /// Additive noise on each RGB channel of the base color.
    pub color: f64,
    /// All opacities are reset to this value.
    pub opacity: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            seed: 17,
            position: 0.01,
            log_scale: 0.3,
            color: 0.25,
            opacity: 0.5,
        }
    }
}

/// Starting point for reconstruction: the generating scene with noisy
/// geometry and colors, reset opacities and no view-dependent color.
pub fn perturb_scene(scene: &GaussianScene, p: &Perturbation) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let extent = scene.extent().max(1e-9);
    let mut out = scene.clone();
    for prim in &mut out.primitives {
        prim.position += Vector3::from_fn(|_, _| normal.sample(&mut rng) * p.position * extent);
        prim.log_scale += Vector3::from_fn(|_, _| normal.sample(&mut rng) * p.log_scale);
        prim.opacity_logit = logit(p.opacity);
        let rgb: [f64; 3] = std::array::from_fn(|c| 0.5 + SH_C0 * prim.sh[0][c]);
        let noisy = rgb.map(|v| (v + normal.sample(&mut rng) * p.color).clamp(0.02, 0.98));
        prim.sh[0] = rgb_to_dc(noisy);
        for c in prim.sh.iter_mut().skip(1) {
            *c = [0.0; 3];
        }
        prim.sigma_d = DEFAULT_SIGMA_D;
    }
    out
}

/// A complete small-scale reconstruction experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskSpec {
    pub scene: SynthSpec,
    /// Total generated views, before the held-out split.
    pub cameras: usize,
    pub camera_seed: u64,
    pub rig: RigSpec,
    /// Every `holdout_every`-th view starting at `holdout_offset` is held out.
    pub holdout_every: usize,
    pub holdout_offset: usize,
    pub perturbation: Perturbation,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            scene: SynthSpec {
                sh_degree: 1,
                ..SynthSpec::new(2000, 1, Layout::TexturedPlane)
            },
            cameras: 25,
            camera_seed: 2,
            rig: RigSpec::default(),
            holdout_every: 5,
            holdout_offset: 4,
            perturbation: Perturbation::default(),
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::new(2000, 1, Layout::TexturedPlane)
    }
}

/// Generated data of a [`DeskSpec`].
#[derive(Clone, Debug)]
pub struct DeskData {
    pub ground_truth: GaussianScene,
    /// Perturbed copy of the ground truth that training starts from.
    pub init: GaussianScene,
    pub train: CameraSet,
    pub test: CameraSet,
}

pub fn desk_data(spec: &DeskSpec) -> Result<DeskData> {
    if spec.holdout_every < 2 || spec.holdout_offset >= spec.holdout_every {
        return Err(Error::Config(
            "holdout_every must be >= 2 and holdout_offset below it".into(),
        ));
    }
    let ground_truth = generate_synthetic_scene(&spec.scene)?;
    let all = generate_camera_set(&ground_truth, spec.cameras, spec.camera_seed, &spec.rig)?;
    let (train, test) = all.split_holdout(spec.holdout_every, spec.holdout_offset);
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Config(format!(
            "{} views leave too few for training or testing",
            spec.cameras
        )));
    }
    let init = perturb_scene(&ground_truth, &spec.perturbation);
    Ok(DeskData {
        ground_truth,
        init,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::new(5, 7, Layout::UniformBox);
        assert_eq!(
            generate_synthetic_scene(&spec).unwrap(),
            generate_synthetic_scene(&spec).unwrap()
        );
        let other = SynthSpec::new(5, 8, Layout::UniformBox);
        assert_ne!(
            generate_synthetic_scene(&spec).unwrap(),
            generate_synthetic_scene(&other).unwrap()
        );
    }

    #[test]
    fn zero_count_and_unknown_layout_fail() {
        assert!(generate_synthetic_scene(&SynthSpec::new(0, 1, Layout::ClusterMix)).is_err());
        assert!("spiral".parse::<Layout>().is_err());
        assert_eq!("cluster-mix".parse::<Layout>().unwrap(), Layout::ClusterMix);
    }

    #[test]
    fn opacities_in_range_and_default_sigma() {
        for layout in [Layout::UniformBox, Layout::TexturedPlane, Layout::ClusterMix] {
            let s = generate_synthetic_scene(&SynthSpec::new(300, 3, layout)).unwrap();
            for p in &s.primitives {
                let a = p.opacity();
                assert!((0.3 - 1e-12..=0.95 + 1e-12).contains(&a));
                assert_eq!(p.sigma_d, DEFAULT_SIGMA_D);
                assert!(p.position.norm() < 3.0);
            }
        }
    }

    #[test]
    fn camera_rig_rules() {
        let s = generate_synthetic_scene(&SynthSpec::new(50, 1, Layout::UniformBox)).unwrap();
        let rig = RigSpec::default();
        assert!(generate_cameras(&s, 1, 0, &rig).is_err());
        let cams = generate_cameras(&s, 20, 3, &rig).unwrap();
        assert_eq!(cams, generate_cameras(&s, 20, 3, &rig).unwrap());
        let c = s.centroid();
        for cam in &cams {
            cam.validate().unwrap();
            let t = cam.to_camera(&c);
            let u = cam.fx * t.x / t.z + cam.cx;
            let v = cam.fy * t.y / t.z + cam.cy;
            assert!(t.z > 0.0 && (0.0..64.0).contains(&u) && (0.0..64.0).contains(&v));
        }
    }

    #[test]
    fn degenerate_extent_is_rejected() {
        let mut s = generate_synthetic_scene(&SynthSpec::new(3, 1, Layout::UniformBox)).unwrap();
        for p in &mut s.primitives {
            p.position = Vector3::new(0.2, 0.2, 0.2);
        }
        assert!(generate_cameras(&s, 4, 0, &RigSpec::default()).is_err());
    }

    #[test]
    fn desk_split_and_defaults() {
        let spec = DeskSpec {
            scene: SynthSpec::new(50, 1, Layout::TexturedPlane),
            rig: RigSpec {
                width: 16,
                height: 16,
                ..RigSpec::default()
            },
            ..DeskSpec::default()
        };
        let d = desk_data(&spec).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (20, 5));
        assert_eq!(d.init.len(), 50);
        let partial: DeskSpec = serde_json::from_str(r#"{"cameras": 10}"#).unwrap();
        assert_eq!(partial.scene, DeskSpec::default().scene);
        assert!(desk_data(&DeskSpec {
            holdout_every: 1,
            ..spec
        })
        .is_err());
    }
}
