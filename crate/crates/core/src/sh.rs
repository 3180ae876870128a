//! Real spherical harmonics up to degree 3 for view-dependent color.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::sh_coeffs_for_degree;

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Basis values for `degree`; entries past `(degree + 1)^2` are zero.
pub fn basis(dir: &Vector3<f64>, degree: usize) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis function w.r.t. the (unnormalized)
/// direction components.
pub fn basis_grad(dir: &Vector3<f64>, degree: usize) -> [[f64; 3]; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = [[0.0; 3]; 16];
    if degree >= 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c = SH_C2;
        g[4] = [c[0] * y, c[0] * x, 0.0];
        g[5] = [0.0, c[1] * z, c[1] * y];
        g[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        g[7] = [c[3] * z, 0.0, c[3] * x];
        g[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
        if degree >= 3 {
            let c = SH_C3;
            g[9] = [c[0] * 6.0 * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
            g[11] = [
                c[2] * -2.0 * x * y,
                c[2] * (4.0 * zz - xx - 3.0 * yy),
                c[2] * 8.0 * y * z,
            ];
            g[12] = [
                c[3] * -6.0 * x * z,
                c[3] * -6.0 * y * z,
                c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                c[4] * (4.0 * zz - 3.0 * xx - yy),
                c[4] * -2.0 * x * y,
                c[4] * 8.0 * x * z,
            ];
            g[14] = [c[5] * 2.0 * x * z, c[5] * -2.0 * y * z, c[5] * (xx - yy)];
            g[15] = [c[6] * (3.0 * xx - 3.0 * yy), c[6] * -6.0 * x * y, 0.0];
        }
    }
    g
}

/// Color before clamping, plus which channels were clamped to `[0, 1]`.
pub(crate) fn color_with_clamp(coeffs: &[[f64; 3]], dir: &Vector3<f64>, degree: usize) -> ([f64; 3], [bool; 3]) {
    let b = basis(dir, degree);
    let mut rgb = [0.5; 3];
    for (k, c) in coeffs.iter().take(sh_coeffs_for_degree(degree)).enumerate() {
        for ch in 0..3 {
            rgb[ch] += b[k] * c[ch];
        }
    }
    let mut clamped = [false; 3];
    for ch in 0..3 {
        if !(0.0..=1.0).contains(&rgb[ch]) {
            clamped[ch] = true;
            rgb[ch] = rgb[ch].clamp(0.0, 1.0);
        }
    }
    (rgb, clamped)
}

/// RGB color seen along `view_dir` (a unit vector), offset by 0.5 and clamped
/// to `[0, 1]`.
pub fn evaluate_sh(coeffs: &[[f64; 3]], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    let needed = sh_coeffs_for_degree(degree);
    if coeffs.len() < needed {
        return Err(Error::ShDegree {
            requested: degree,
            available: crate::model::sh_degree_from_coeffs(coeffs.len()).unwrap_or(0),
        });
    }
    Ok(color_with_clamp(coeffs, view_dir, degree).0)
}
