//! Training objective: rendering loss, primitive-count regularizer and the
//! scale-dependent weight.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::math::relu;
use crate::metrics::{dssim_with_grad, l1_with_grad};

pub const TARGET_RATIO_EXPONENT: f64 = 1.5;
pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;
pub const DEFAULT_LAMBDA_REG: f64 = 1.0;

/// Fraction of primitives a view at scale `s_v` should keep: `s_v^-1.5`.
pub fn target_ratio(s_v: f64) -> f64 {
    s_v.powf(-TARGET_RATIO_EXPONENT)
}

/// `(s_v - 1)^2 * relu(eta - eta_target)^2`
pub fn reg_loss(s_v: f64, eta: f64, eta_target: f64) -> f64 {
    let excess = relu(eta - eta_target);
    (s_v - 1.0).powi(2) * excess * excess
}

/// Derivative of [`reg_loss`] w.r.t. `eta`.
pub fn reg_loss_grad(s_v: f64, eta: f64, eta_target: f64) -> f64 {
    2.0 * (s_v - 1.0).powi(2) * relu(eta - eta_target)
}

/// `(1 - 0.5 * s_v / s_max)^2`, where `s_max` is the top of the sampling range.
pub fn adaptive_weight(s_v: f64, s_max: f64) -> f64 {
    (1.0 - 0.5 * s_v / s_max).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub s_v: f64,
    pub l1: f64,
    pub dssim: f64,
    pub render: f64,
    pub eta_target: f64,
    /// Soft rendered ratio used by the regularizer.
    pub eta_soft: f64,
    pub reg: f64,
    pub w_s: f64,
    pub lambda_reg: f64,
    pub total: f64,
}

/// Weights of the objective. The two flags exist for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub lambda_reg: f64,
    pub lambda_dssim: f64,
    pub s_max: f64,
    /// When false, `w_s` is pinned to 1.
    pub adaptive_weight: bool,
}

impl Objective {
    pub fn new(s_max: f64) -> Self {
        Self {
            lambda_reg: DEFAULT_LAMBDA_REG,
            lambda_dssim: DEFAULT_LAMBDA_DSSIM,
            s_max,
            adaptive_weight: true,
        }
    }

    pub fn weight(&self, s_v: f64) -> f64 {
        if self.adaptive_weight {
            adaptive_weight(s_v, self.s_max)
        } else {
            1.0
        }
    }

    /// Loss value, dL/d(image) and dL/d(eta_soft).
    pub fn evaluate(
        &self,
        render: &Image,
        gt: &Image,
        s_v: f64,
        eta_soft: f64,
    ) -> Result<(LossBreakdown, Vec<f64>, f64)> {
        let (l1, g_l1) = l1_with_grad(render, gt)?;
        let (dssim, g_dssim) = dssim_with_grad(render, gt)?;
        let ld = self.lambda_dssim;
        let render_loss = (1.0 - ld) * l1 + ld * dssim;
        let eta_target = target_ratio(s_v);
        let reg = reg_loss(s_v, eta_soft, eta_target);
        let w_s = self.weight(s_v);
        let total = w_s * (render_loss + self.lambda_reg * reg);

        let d_image = g_l1
            .iter()
            .zip(&g_dssim)
            .map(|(a, b)| w_s * ((1.0 - ld) * a + ld * b))
            .collect();
        let d_eta = w_s * self.lambda_reg * reg_loss_grad(s_v, eta_soft, eta_target);
        let breakdown = LossBreakdown {
            s_v,
            l1,
            dssim,
            render: render_loss,
            eta_target,
            eta_soft,
            reg,
            w_s,
            lambda_reg: self.lambda_reg,
            total,
        };
        Ok((breakdown, d_image, d_eta))
    }
}

/// Assembles the full objective for one rendered view.
pub fn total_loss(
    render: &Image,
    gt: &Image,
    s_v: f64,
    s_max: f64,
    eta_soft: f64,
    lambda_reg: f64,
    lambda_dssim: f64,
) -> Result<LossBreakdown> {
    let objective = Objective {
        lambda_reg,
        lambda_dssim,
        s_max,
        adaptive_weight: true,
    };
    Ok(objective.evaluate(render, gt, s_v, eta_soft)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_ratio_values() {
        assert_eq!(target_ratio(1.0), 1.0);
        assert!((target_ratio(4.0) - 0.125).abs() < 1e-15);
        assert!((target_ratio(2.0) - 0.35355339059327373).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_values() {
        assert_eq!(reg_loss(1.0, 0.9, 0.1), 0.0);
        assert_eq!(reg_loss(3.0, 0.1, 0.2), 0.0);
        let v = reg_loss(3.0, 0.4, target_ratio(3.0));
        assert!((v - 0.17231).abs() < 1e-5, "{v}");
    }

    #[test]
    fn reg_loss_grad_matches_fd() {
        let (s, t) = (2.5, target_ratio(2.5));
        for eta in [0.1, 0.3, 0.6, 0.95] {
            let h = 1e-7;
            let fd = (reg_loss(s, eta + h, t) - reg_loss(s, eta - h, t)) / (2.0 * h);
            assert!((fd - reg_loss_grad(s, eta, t)).abs() < 1e-7);
        }
    }

    #[test]
    fn adaptive_weight_values() {
        assert_eq!(adaptive_weight(5.0, 5.0), 0.25);
        assert!((adaptive_weight(1.0, 5.0) - 0.81).abs() < 1e-15);
        assert!((adaptive_weight(1.0, 10.0) - 0.9025).abs() < 1e-15);
    }

    fn textured(w: usize, h: usize, phase: f64) -> Image {
        let mut img = Image::new(w, h);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin();
        }
        img
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let gt = textured(16, 16, 0.0);
        let b = total_loss(&gt, &gt, 1.0, 5.0, 1.0, 1.0, 0.2).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.reg, 0.0);
    }

    #[test]
    fn ablation_wiring() {
        let gt = textured(16, 16, 0.0);
        let r = textured(16, 16, 0.3);
        let b = total_loss(&r, &gt, 3.0, 5.0, 0.8, 0.0, 0.2).unwrap();
        assert_eq!(b.total, b.w_s * b.render);

        let mut obj = Objective::new(5.0);
        obj.adaptive_weight = false;
        let (b, _, _) = obj.evaluate(&r, &gt, 3.0, 0.8).unwrap();
        assert_eq!(b.w_s, 1.0);
        assert_eq!(b.total, b.render + b.lambda_reg * b.reg);
        assert!(b.reg > 0.0);
    }

    #[test]
    fn components_are_non_negative() {
        let gt = textured(12, 12, 0.0);
        let r = textured(12, 12, 2.0);
        for s in [1.0, 2.0, 4.5] {
            let b = total_loss(&r, &gt, s, 5.0, 0.7, 1.0, 0.2).unwrap();
            for v in [b.l1, b.dssim, b.render, b.reg, b.w_s, b.total] {
                assert!(v >= 0.0);
            }
        }
    }
}
