//! Continuous level-of-detail filter.
//!
//! Every primitive's base opacity is attenuated by a Gaussian falloff in its
//! normalized view distance `d'`, scaled by the virtual distance factor `s_v`
//! and shaped by the primitive's learned decay `sigma_d`:
//!
//! ```text
//! alpha'' = alpha * exp(-(d' * s_v)^2 / (2 * relu(sigma_d)^2 + eps))
//! ```
//!
//! A primitive is rendered only when it is inside the frustum and
//! `alpha'' > tau * s_v`. Raising `s_v` both lowers every `alpha''` and raises
//! the threshold, so the rendered set shrinks monotonically.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{relu, sigmoid};
use crate::model::GaussianScene;
use crate::project::{project_geometry, SplatGeometry};

pub const DEFAULT_TAU: f64 = 1.0 / 255.0;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodQuery {
    /// Virtual distance scale `s_v >= 1`.
    pub scale: f64,
    /// Base opacity threshold.
    pub tau: f64,
    pub eps: f64,
}

impl Default for LodQuery {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl LodQuery {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            tau: DEFAULT_TAU,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_tau(scale: f64, tau: f64) -> Self {
        Self {
            scale,
            tau,
            eps: DEFAULT_EPS,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.tau * self.scale
    }

    /// True when no primitive can pass the mask (`tau * s_v >= 1`).
    pub fn culls_everything(&self) -> bool {
        self.threshold() >= 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("s_v must be >= 1, got {}", self.scale)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-view distances and their normalization over the in-frustum set.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub distance: Vec<f64>,
    /// `d / max(d)` over the in-frustum set; zero for primitives outside it.
    pub normalized: Vec<f64>,
    pub in_frustum: Vec<bool>,
    /// Index of the in-frustum primitive attaining the maximum distance.
    pub farthest: Option<usize>,
}

impl DistanceField {
    pub fn from_geometry(scene: &GaussianScene, cam: &Camera, geometry: &[Option<SplatGeometry>]) -> Self {
        let center = cam.center();
        let distance: Vec<f64> = scene.primitives.iter().map(|p| (p.position - center).norm()).collect();
        let in_frustum: Vec<bool> = geometry.iter().map(Option::is_some).collect();
        let mut farthest: Option<usize> = None;
        for (i, &d) in distance.iter().enumerate() {
            if in_frustum[i] && farthest.is_none_or(|f| d > distance[f]) {
                farthest = Some(i);
            }
        }
        let normalized = match farthest {
            Some(f) if distance[f] > 0.0 => distance
                .iter()
                .zip(&in_frustum)
                .map(|(&d, &inside)| if inside { d / distance[f] } else { 0.0 })
                .collect(),
            _ => vec![0.0; distance.len()],
        };
        Self {
            distance,
            normalized,
            in_frustum,
            farthest,
        }
    }

    pub fn visible_count(&self) -> usize {
        self.in_frustum.iter().filter(|&&v| v).count()
    }

    /// Adds `d_normalized[i] * d(d'_i)/d(mu)` into `d_position`.
    pub fn backward(&self, scene: &GaussianScene, cam: &Camera, d_normalized: &[f64], d_position: &mut [Vector3<f64>]) {
        let Some(m) = self.farthest else { return };
        let dmax = self.distance[m];
        if dmax <= 0.0 {
            return;
        }
        let center = cam.center();
        let unit = |i: usize| {
            let v = scene.primitives[i].position - center;
            let n = v.norm();
            if n > 0.0 {
                v / n
            } else {
                Vector3::zeros()
            }
        };
        let u_m = unit(m);
        let mut d_dmax = 0.0;
        for i in 0..self.distance.len() {
            let g = d_normalized[i];
            if !self.in_frustum[i] || g == 0.0 || i == m {
                continue;
            }
            d_position[i] += unit(i) * (g / dmax);
            d_dmax -= g * self.distance[i] / (dmax * dmax);
        }
        d_position[m] += u_m * d_dmax;
    }
}

/// Distances for `scene` seen from `cam`, using the projection's culling test
/// to decide frustum membership.
pub fn compute_distances(scene: &GaussianScene, cam: &Camera) -> DistanceField {
    let geometry: Vec<Option<SplatGeometry>> = scene.primitives.iter().map(|p| project_geometry(p, cam)).collect();
    DistanceField::from_geometry(scene, cam, &geometry)
}

pub fn attenuate_opacity(alpha: f64, d_norm: f64, sigma_d: f64, q: &LodQuery) -> f64 {
    let r = relu(sigma_d);
    let x = d_norm * q.scale;
    alpha * (-(x * x) / (2.0 * r * r + q.eps)).exp()
}

/// Partial derivatives of the attenuated opacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttenuationGrad {
    pub alpha: f64,
    pub sigma_d: f64,
    pub d_norm: f64,
}

pub fn attenuation_grad(alpha: f64, d_norm: f64, sigma_d: f64, q: &LodQuery) -> AttenuationGrad {
    let r = relu(sigma_d);
    let v = 2.0 * r * r + q.eps;
    let x = d_norm * q.scale;
    let factor = (-(x * x) / v).exp();
    let out = alpha * factor;
    AttenuationGrad {
        alpha: factor,
        // subgradient 0 at the ReLU kink
        sigma_d: if sigma_d > 0.0 {
            out * x * x * 4.0 * r / (v * v)
        } else {
            0.0
        },
        d_norm: -out * 2.0 * d_norm * q.scale * q.scale / v,
    }
}

/// Hard mask `in_frustum && alpha'' > tau * s_v`, and the rendered ratio over
/// the whole scene.
pub fn compute_mask(alpha_eff: &[f64], in_frustum: &[bool], q: &LodQuery) -> (Vec<bool>, f64) {
    let threshold = q.threshold();
    let mask: Vec<bool> = alpha_eff
        .iter()
        .zip(in_frustum)
        .map(|(&a, &inside)| inside && a > threshold)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    let ratio = if mask.is_empty() {
        0.0
    } else {
        count as f64 / mask.len() as f64
    };
    (mask, ratio)
}

/// Differentiable stand-in for the rendered ratio:
/// `sum_in_frustum logistic((alpha'' - tau s_v) / T) / N_total`.
/// Returns the value and its derivative w.r.t. every `alpha''`.
pub fn soft_rendered_ratio(alpha_eff: &[f64], in_frustum: &[bool], q: &LodQuery, temperature: f64) -> (f64, Vec<f64>) {
    assert!(temperature > 0.0, "temperature must be positive");
    let n = alpha_eff.len().max(1) as f64;
    let threshold = q.threshold();
    let mut sum = 0.0;
    let mut grad = vec![0.0; alpha_eff.len()];
    for (i, (&a, &inside)) in alpha_eff.iter().zip(in_frustum).enumerate() {
        if !inside {
            continue;
        }
        let s = sigmoid((a - threshold) / temperature);
        sum += s;
        grad[i] = s * (1.0 - s) / (temperature * n);
    }
    (sum / n, grad)
}

/// Log-domain variant: `sum_in_frustum logistic(ln(alpha'' / (tau s_v)) / T) / N_total`.
/// A fully attenuated primitive contributes exactly zero, so the gradient is
/// spent on primitives that are still visible. Requires `0 < T <= 1`.
pub fn soft_rendered_ratio_log(
    alpha_eff: &[f64],
    in_frustum: &[bool],
    q: &LodQuery,
    temperature: f64,
) -> (f64, Vec<f64>) {
    assert!(
        temperature > 0.0 && temperature <= 1.0,
        "temperature must lie in (0, 1]"
    );
    let n = alpha_eff.len().max(1) as f64;
    let log_threshold = q.threshold().ln();
    let mut sum = 0.0;
    let mut grad = vec![0.0; alpha_eff.len()];
    for (i, (&a, &inside)) in alpha_eff.iter().zip(in_frustum).enumerate() {
        if !inside || a <= 0.0 {
            continue;
        }
        let s = sigmoid((a.ln() - log_threshold) / temperature);
        sum += s;
        grad[i] = s * (1.0 - s) / (temperature * a * n);
    }
    (sum / n, grad)
}

/// Differentiable stand-in for the rendered ratio used by the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SoftRatio {
    /// Logistic of `alpha'' - tau s_v`.
    Linear { temperature: f64 },
    /// Logistic of `ln(alpha'' / (tau s_v))`.
    Log { temperature: f64 },
}

impl Default for SoftRatio {
    fn default() -> Self {
        SoftRatio::Log { temperature: 1.0 }
    }
}

impl SoftRatio {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SoftRatio::Linear { temperature } if temperature > 0.0 && temperature.is_finite() => Ok(()),
            SoftRatio::Log { temperature } if temperature > 0.0 && temperature <= 1.0 => Ok(()),
            other => Err(Error::Config(format!("invalid soft ratio temperature in {other:?}"))),
        }
    }

    pub fn evaluate(&self, alpha_eff: &[f64], in_frustum: &[bool], q: &LodQuery) -> (f64, Vec<f64>) {
        match *self {
            SoftRatio::Linear { temperature } => soft_rendered_ratio(alpha_eff, in_frustum, q, temperature),
            SoftRatio::Log { temperature } => soft_rendered_ratio_log(alpha_eff, in_frustum, q, temperature),
        }
    }
}

/// How primitives are chosen and attenuated for one render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LodMode {
    /// Learned attenuation and the `tau * s_v` threshold.
    Clod(LodQuery),
    /// Plain splatting: base opacity, primitives above `tau` rendered.
    Off { tau: f64 },
    /// Keep the `k` in-frustum primitives with the largest attenuated
    /// opacity, ignoring the threshold.
    TopK { k: usize, query: LodQuery },
}

impl LodMode {
    pub fn clod(scale: f64) -> Self {
        LodMode::Clod(LodQuery::new(scale))
    }

    pub fn off() -> Self {
        LodMode::Off { tau: DEFAULT_TAU }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LodMode::Clod(q) | LodMode::TopK { query: q, .. } => q.validate(),
            LodMode::Off { tau } => LodQuery::with_tau(1.0, *tau).validate(),
        }
    }

    /// The query whose `s_v` drives the attenuation, if any.
    pub fn query(&self) -> Option<&LodQuery> {
        match self {
            LodMode::Clod(q) | LodMode::TopK { query: q, .. } => Some(q),
            LodMode::Off { .. } => None,
        }
    }
}

/// Opacities and mask chosen for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub distances: DistanceField,
    pub alpha_eff: Vec<f64>,
    pub mask: Vec<bool>,
    pub rendered_count: usize,
    pub rendered_ratio: f64,
}

pub fn select(scene: &GaussianScene, distances: DistanceField, mode: &LodMode) -> Selection {
    let n = scene.len();
    let alpha_eff: Vec<f64> = match mode {
        LodMode::Clod(q) | LodMode::TopK { query: q, .. } => scene
            .primitives
            .iter()
            .zip(&distances.normalized)
            .map(|(p, &d)| attenuate_opacity(p.opacity(), d, p.sigma_d, q))
            .collect(),
        LodMode::Off { .. } => scene.primitives.iter().map(|p| p.opacity()).collect(),
    };
    let mask = match mode {
        LodMode::Clod(q) => compute_mask(&alpha_eff, &distances.in_frustum, q).0,
        LodMode::Off { tau } => compute_mask(&alpha_eff, &distances.in_frustum, &LodQuery::with_tau(1.0, *tau)).0,
        LodMode::TopK { k, .. } => {
            let mut order: Vec<usize> = (0..n).filter(|&i| distances.in_frustum[i]).collect();
            order.sort_by(|&a, &b| alpha_eff[b].total_cmp(&alpha_eff[a]).then(a.cmp(&b)));
            let mut mask = vec![false; n];
            for &i in order.iter().take(*k) {
                mask[i] = true;
            }
            mask
        }
    };
    let rendered_count = mask.iter().filter(|&&m| m).count();
    Selection {
        distances,
        alpha_eff,
        mask,
        rendered_count,
        rendered_ratio: rendered_count as f64 / n.max(1) as f64,
    }
}
