//! Scene representation: anisotropic Gaussians with a learnable distance decay.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math::{quat_to_matrix, sigmoid};

/// Initial distance decay. With `d' <= 1` and `s_v = 1` the attenuation factor
/// stays above `exp(-1/50)`, so imported models render almost unchanged.
pub const DEFAULT_SIGMA_D: f64 = 5.0;

pub const MAX_SH_DEGREE: usize = 3;

pub const fn sh_coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sh_degree_from_coeffs(coeffs: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| sh_coeffs_for_degree(d) == coeffs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// Log of the per-axis standard deviations.
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; kept at unit norm by the optimizer.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function, DC first.
    pub sh: Vec<[f64; 3]>,
    /// Raw decay parameter; the effective value is `max(sigma_d, 0)`.
    pub sigma_d: f64,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }

    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Some("position");
        }
        if !self.log_scale.iter().all(|v| v.is_finite()) {
            return Some("log_scale");
        }
        if !self.rotation.iter().all(|v| v.is_finite()) || self.rotation.norm() == 0.0 {
            return Some("rotation");
        }
        if !self.opacity_logit.is_finite() {
            return Some("opacity_logit");
        }
        if !self.sh.iter().flatten().all(|v| v.is_finite()) {
            return Some("sh");
        }
        if !self.sigma_d.is_finite() {
            return Some("sigma_d");
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>, sh_degree: usize, background: [f64; 3]) -> Result<Self> {
        let scene = Self {
            primitives,
            sh_degree,
            background,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn sh_coeffs(&self) -> usize {
        sh_coeffs_for_degree(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidScene("scene has no primitives".into()));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidScene(format!(
                "sh degree {} above {MAX_SH_DEGREE}",
                self.sh_degree
            )));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidScene("background outside [0, 1]".into()));
        }
        let b = self.sh_coeffs();
        for (i, p) in self.primitives.iter().enumerate() {
            if p.sh.len() != b {
                return Err(Error::InvalidScene(format!(
                    "primitive {i} has {} sh coefficients, expected {b}",
                    p.sh.len()
                )));
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (index, p) in self.primitives.iter().enumerate() {
            if let Some(field) = p.first_non_finite() {
                return Err(Error::NonFinite { index, field });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the primitive centers.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            lo = lo.inf(&p.position);
            hi = hi.sup(&p.position);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.primitives.iter().map(|p| p.position).sum();
        sum / self.primitives.len() as f64
    }

    /// Radius of the sphere around the centroid that holds every center.
    pub fn extent(&self) -> f64 {
        let c = self.centroid();
        self.primitives
            .iter()
            .map(|p| (p.position - c).norm())
            .fold(0.0, f64::max)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.sh_coeffs())
    }

    /// Flattens all learnable parameters (see [`ParamLayout`]).
    pub fn params(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.stride * self.len());
        for p in &self.primitives {
            out.extend_from_slice(p.position.as_slice());
            out.extend_from_slice(p.log_scale.as_slice());
            out.extend_from_slice(p.rotation.as_slice());
            out.push(p.opacity_logit);
            out.push(p.sigma_d);
            for c in &p.sh {
                out.extend_from_slice(c);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let layout = self.layout();
        assert_eq!(params.len(), layout.stride * self.len());
        for (p, chunk) in self.primitives.iter_mut().zip(params.chunks_exact(layout.stride)) {
            p.position = Vector3::new(chunk[0], chunk[1], chunk[2]);
            p.log_scale = Vector3::new(chunk[3], chunk[4], chunk[5]);
            p.rotation = Vector4::new(chunk[6], chunk[7], chunk[8], chunk[9]);
            p.opacity_logit = chunk[10];
            p.sigma_d = chunk[11];
            for (k, c) in p.sh.iter_mut().enumerate() {
                c.copy_from_slice(&chunk[12 + 3 * k..15 + 3 * k]);
            }
        }
    }
}

/// Parameter groups; each is optimized with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    Opacity,
    SigmaD,
    ShDc,
    ShRest,
}

impl ParamClass {
    pub const ALL: [ParamClass; 7] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::Opacity,
        ParamClass::SigmaD,
        ParamClass::ShDc,
        ParamClass::ShRest,
    ];
}

/// Flat per-primitive record:
/// `[position(3), log_scale(3), rotation(4), opacity_logit, sigma_d, sh(3*B)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub stride: usize,
    pub sh_coeffs: usize,
}

impl ParamLayout {
    pub const POSITION: usize = 0;
    pub const LOG_SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const OPACITY: usize = 10;
    pub const SIGMA_D: usize = 11;
    pub const SH: usize = 12;

    pub fn new(sh_coeffs: usize) -> Self {
        Self {
            stride: Self::SH + 3 * sh_coeffs,
            sh_coeffs,
        }
    }

    pub fn class_of(&self, offset: usize) -> ParamClass {
        match offset % self.stride {
            0..=2 => ParamClass::Position,
            3..=5 => ParamClass::LogScale,
            6..=9 => ParamClass::Rotation,
            10 => ParamClass::Opacity,
            11 => ParamClass::SigmaD,
            12..=14 => ParamClass::ShDc,
            _ => ParamClass::ShRest,
        }
    }
}

/// Gradients laid out exactly like [`GaussianScene::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(layout: ParamLayout, count: usize) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.stride * count],
        }
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.layout.stride
    }

    pub fn primitive(&self, i: usize) -> &[f64] {
        &self.values[i * self.layout.stride..(i + 1) * self.layout.stride]
    }

    pub fn primitive_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.layout.stride;
        &mut self.values[i * s..(i + 1) * s]
    }

    pub fn sigma_d(&self, i: usize) -> f64 {
        self.primitive(i)[ParamLayout::SIGMA_D]
    }

    pub fn opacity_logit(&self, i: usize) -> f64 {
        self.primitive(i)[ParamLayout::OPACITY]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim(b: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vector3::new(0.1, 0.2, 0.3),
            log_scale: Vector3::new(-2.0, -1.5, -3.0),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            sh: vec![[0.1, 0.2, 0.3]; b],
            sigma_d: DEFAULT_SIGMA_D,
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        assert!(GaussianScene::new(vec![], 0, [0.0; 3]).is_err());
    }

    #[test]
    fn sh_count_must_match_degree() {
        assert!(GaussianScene::new(vec![prim(4)], 0, [0.0; 3]).is_err());
        assert!(GaussianScene::new(vec![prim(4)], 1, [0.0; 3]).is_ok());
    }

    #[test]
    fn non_finite_field_is_named() {
        let mut p = prim(1);
        p.sigma_d = f64::NAN;
        let err = GaussianScene::new(vec![prim(1), p], 0, [0.0; 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                index: 1,
                field: "sigma_d"
            }
        ));
    }

    #[test]
    fn params_round_trip_and_classes() {
        let mut scene = GaussianScene::new(vec![prim(4), prim(4)], 1, [0.0; 3]).unwrap();
        let layout = scene.layout();
        assert_eq!(layout.stride, 24);
        let mut params = scene.params();
        assert_eq!(params.len(), 48);
        params[24 + ParamLayout::SIGMA_D] = 1.25;
        scene.set_params(&params);
        assert_eq!(scene.primitives[1].sigma_d, 1.25);
        assert_eq!(scene.params(), params);
        assert_eq!(layout.class_of(24 + 11), ParamClass::SigmaD);
        assert_eq!(layout.class_of(13), ParamClass::ShDc);
        assert_eq!(layout.class_of(15), ParamClass::ShRest);
    }

    #[test]
    fn opacity_of_zero_logit_is_half() {
        assert_eq!(prim(1).opacity(), 0.5);
    }
}
