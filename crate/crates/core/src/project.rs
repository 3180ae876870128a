//! Perspective projection of 3D Gaussians (EWA linearization) and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::camera::Camera;
use crate::math::quat_matrix_backward;
use crate::model::GaussianPrimitive;
use crate::sh;

/// Added to the diagonal of every screen-space covariance (pixel^2).
pub const LOW_PASS: f64 = 0.3;

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGeometry {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Three-sigma radius of the footprint along its major axis, pixels.
    pub radius: f64,
    pub(crate) cam_pos: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha_eff: f64,
    pub source_index: usize,
}

fn jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = t.z;
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * t.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * t.y / (z * z),
    )
}

/// Projects the footprint, or `None` when culled: depth outside `(near, far)`
/// or a three-sigma box that misses the image.
pub fn project_geometry(p: &GaussianPrimitive, cam: &Camera) -> Option<SplatGeometry> {
    let t = cam.to_camera(&p.position);
    if t.z <= cam.near || t.z >= cam.far {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let tm = jacobian(cam, &t) * cam.rotation();
    let cov2d = tm * p.covariance() * tm.transpose() + Matrix2::identity() * LOW_PASS;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);
    let lambda_max = 0.5 * (a + c) + ((0.5 * (a - c)).powi(2) + b * b).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d.x + radius <= 0.0 || mean2d.x - radius >= w || mean2d.y + radius <= 0.0 || mean2d.y - radius >= h {
        return None;
    }
    Some(SplatGeometry {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        radius,
        cam_pos: t,
    })
}

/// Projection with color and base (unattenuated) opacity.
pub fn project_gaussian(
    p: &GaussianPrimitive,
    cam: &Camera,
    sh_degree: usize,
    source_index: usize,
) -> Option<ProjectedSplat> {
    let g = project_geometry(p, cam)?;
    let dir = (p.position - cam.center()).normalize();
    let (color, _) = sh::color_with_clamp(&p.sh, &dir, sh_degree);
    Some(ProjectedSplat {
        mean2d: g.mean2d,
        cov2d: g.cov2d,
        depth: g.depth,
        color,
        alpha_eff: p.opacity(),
        source_index,
    })
}

/// Gradients w.r.t. position, log-scale and raw quaternion.
pub struct GeometryGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

/// Pulls gradients on `mean2d` and on the conic (as a symmetric matrix
/// gradient) back to the primitive's geometric parameters.
pub fn project_backward(
    p: &GaussianPrimitive,
    cam: &Camera,
    geom: &SplatGeometry,
    d_mean2d: &Vector2<f64>,
    d_conic: &Matrix2<f64>,
) -> GeometryGrad {
    let t = geom.cam_pos;
    let z = t.z;
    let w = cam.rotation();

    // conic = cov^-1  =>  dL/dcov = -conic * dL/dconic * conic
    let d_cov2d = -(geom.conic * d_conic * geom.conic);

    let jac = jacobian(cam, &t);
    let tm = jac * w;
    let scale = p.scale();
    let rot = p.rotation_matrix();
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();

    // cov2d = T Sigma T^T (+ const)
    let d_sigma = tm.transpose() * d_cov2d * tm;
    let d_tm = 2.0 * d_cov2d * tm * sigma;
    let d_jac = d_tm * w.transpose();

    let mut d_t = Vector3::zeros();
    d_t.x += d_mean2d.x * cam.fx / z;
    d_t.y += d_mean2d.y * cam.fy / z;
    d_t.z += -d_mean2d.x * cam.fx * t.x / (z * z) - d_mean2d.y * cam.fy * t.y / (z * z);

    let z2 = z * z;
    let z3 = z2 * z;
    d_t.x += d_jac[(0, 2)] * (-cam.fx / z2);
    d_t.y += d_jac[(1, 2)] * (-cam.fy / z2);
    d_t.z += d_jac[(0, 0)] * (-cam.fx / z2)
        + d_jac[(0, 2)] * (2.0 * cam.fx * t.x / z3)
        + d_jac[(1, 1)] * (-cam.fy / z2)
        + d_jac[(1, 2)] * (2.0 * cam.fy * t.y / z3);

    // Sigma = M M^T with M = R S
    let d_m = 2.0 * d_sigma * m;
    let d_rot = d_m * Matrix3::from_diagonal(&scale);
    let mut d_log_scale = Vector3::zeros();
    for k in 0..3 {
        let d_s: f64 = (0..3).map(|i| d_m[(i, k)] * rot[(i, k)]).sum();
        d_log_scale[k] = d_s * scale[k];
    }

    GeometryGrad {
        position: w.transpose() * d_t,
        log_scale: d_log_scale,
        rotation: quat_matrix_backward(&p.rotation, &d_rot),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use nalgebra::Matrix4;

    fn prim(pos: Vector3<f64>, log_scale: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            position: pos,
            log_scale,
            rotation: Vector4::new(0.9, 0.1, -0.3, 0.2).normalize(),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
            sigma_d: 5.0,
        }
    }

    fn cam() -> Camera {
        Camera::with_fov(32, 32, 60.0, Matrix4::identity())
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let p = prim(Vector3::new(0.0, 0.0, 3.0), Vector3::repeat(-3.0));
        let g = project_geometry(&p, &cam()).unwrap();
        assert!((g.mean2d - Vector2::new(16.0, 16.0)).norm() < 1e-12);
        assert_eq!(g.depth, 3.0);
    }

    #[test]
    fn isotropic_covariance_matches_fd_jacobian() {
        // Independent oracle: finite-difference Jacobian of the pixel map.
        let cam = cam();
        let (s, z) = (0.05_f64, 2.0);
        let pos = Vector3::new(0.2, -0.1, z);
        let p = prim(pos, Vector3::repeat(s.ln()));
        let pix = |q: Vector3<f64>| Vector2::new(cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy);
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for k in 0..3 {
            let mut a = pos;
            let mut b = pos;
            a[k] += h;
            b[k] -= h;
            jac.set_column(k, &((pix(a) - pix(b)) / (2.0 * h)));
        }
        let expect = jac * jac.transpose() * (s * s) + Matrix2::identity() * LOW_PASS;
        let g = project_geometry(&p, &cam).unwrap();
        assert!((g.cov2d - expect).norm() < 1e-6, "{} vs {}", g.cov2d, expect);
        // On-axis isotropic case reduces to (f s / z)^2 I.
        let p0 = prim(Vector3::new(0.0, 0.0, z), Vector3::repeat(s.ln()));
        let g0 = project_geometry(&p0, &cam).unwrap();
        let k = (cam.fx * s / z).powi(2);
        assert!((g0.cov2d - Matrix2::identity() * (k + LOW_PASS)).norm() < 1e-9);
    }

    #[test]
    fn behind_and_offscreen_are_culled() {
        let c = cam();
        assert!(project_geometry(&prim(Vector3::new(0.0, 0.0, -1.0), Vector3::repeat(-3.0)), &c).is_none());
        assert!(project_geometry(&prim(Vector3::new(50.0, 0.0, 1.0), Vector3::repeat(-3.0)), &c).is_none());
        assert!(project_geometry(&prim(Vector3::new(0.0, 0.0, 200.0), Vector3::repeat(-3.0)), &c).is_none());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let pose =
            crate::camera::look_at(Vector3::new(1.5, -2.0, 1.0), Vector3::new(0.0, 0.0, 0.0), Vector3::z()).unwrap();
        let cam = Camera::with_fov(32, 32, 60.0, pose);
        let base = prim(Vector3::new(0.1, 0.2, -0.1), Vector3::new(-2.0, -2.5, -3.0));
        let wm = Vector2::new(0.7, -1.3);
        let wc = Matrix2::new(0.4, -0.25, -0.25, 1.1);
        let f = |p: &GaussianPrimitive| {
            let g = project_geometry(p, &cam).unwrap();
            g.mean2d.dot(&wm) + g.conic.component_mul(&wc).sum()
        };
        let g = project_geometry(&base, &cam).unwrap();
        let grad = project_backward(&base, &cam, &g, &wm, &wc);
        let h = 1e-6;
        let check = |analytic: f64, perturb: &dyn Fn(&mut GaussianPrimitive, f64)| {
            let mut a = base.clone();
            let mut b = base.clone();
            perturb(&mut a, h);
            perturb(&mut b, -h);
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {analytic}");
        };
        for k in 0..3 {
            check(grad.position[k], &|p, d| p.position[k] += d);
            check(grad.log_scale[k], &|p, d| p.log_scale[k] += d);
        }
        for k in 0..4 {
            check(grad.rotation[k], &|p, d| p.rotation[k] += d);
        }
    }
}
