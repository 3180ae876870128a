//! Pinhole cameras and the on-disk camera set format.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

/// Pinhole camera using the OpenCV convention: x right, y down, z forward.
/// Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera("need 0 < near < far".into()));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > 1e-5 || r.determinant() <= 0.0 {
            return Err(Error::InvalidCamera("pose rotation is not orthonormal".into()));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidCamera("pose bottom row must be [0 0 0 1]".into()));
        }
        Ok(())
    }

    /// Intrinsics for a horizontal field of view, principal point centered.
    pub fn with_fov(width: usize, height: usize, fov_x_deg: f64, world_to_camera: Matrix4<f64>) -> Self {
        let fx = width as f64 / (2.0 * (fov_x_deg.to_radians() / 2.0).tan());
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }
}

/// World-to-camera pose looking from `eye` at `target`, with `up` pointing
/// roughly toward the top of the image.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Matrix4<f64>> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(Error::InvalidCamera("eye coincides with target".into()));
    }
    let forward = forward.normalize();
    let right = forward.cross(&up);
    if right.norm() < 1e-9 {
        return Err(Error::InvalidCamera("view direction parallel to up".into()));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * eye);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(m)
}

/// Orbit parameters in degrees, world up = +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub target: [f64; 3],
}

impl Orbit {
    pub fn eye(&self) -> Vector3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        Vector3::from(self.target) + dir * self.radius
    }

    pub fn pose(&self) -> Result<Matrix4<f64>> {
        if !(self.radius > 0.0) || !self.elevation.is_finite() || self.elevation.abs() >= 89.9 {
            return Err(Error::InvalidCamera(
                "orbit needs radius > 0 and |elevation| < 89.9".into(),
            ));
        }
        look_at(self.eye(), Vector3::from(self.target), Vector3::z())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Row-major 4x4.
    pub world_to_camera: [f64; 16],
    pub image: PathBuf,
}

/// JSON document describing a set of frames sharing one set of intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSetFile {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub frames: Vec<FrameRecord>,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

pub fn matrix_to_row_major(m: &Matrix4<f64>) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[4 * r + c] = m[(r, c)];
        }
    }
    out
}

pub fn matrix_from_row_major(v: &[f64; 16]) -> Matrix4<f64> {
    Matrix4::from_row_slice(v)
}

impl CameraSetFile {
    pub fn camera(&self, frame: &FrameRecord) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: matrix_from_row_major(&frame.world_to_camera),
            near: self.near,
            far: self.far,
        }
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.frames.iter().map(|f| self.camera(f)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, cam) in self.cameras().iter().enumerate() {
            cam.validate()
                .map_err(|e| Error::InvalidCamera(format!("frame {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
