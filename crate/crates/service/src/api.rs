//! Wire types of the render endpoint and their translation to renderer inputs.

use std::str::FromStr;

use clod_core::camera::matrix_from_row_major;
use clod_core::clod::{LodMode, LodQuery, DEFAULT_TAU};
use clod_core::{Camera, Orbit};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const DEFAULT_MAX_PIXELS: usize = 1024 * 1024;
pub const DEFAULT_FOV_DEG: f64 = 60.0;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Where the camera is: an explicit world-to-camera matrix or an orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraSpec {
    Pose {
        /// Row-major 4x4 world-to-camera matrix.
        matrix: Vec<f64>,
        /// Defaults to the request's field of view with a centered principal point.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        intrinsics: Option<Intrinsics>,
    },
    Orbit(Orbit),
}

/// `clod`, `off` or `topk:N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSpec {
    Clod,
    Off,
    TopK(usize),
}

impl FromStr for ModeSpec {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, ApiError> {
        match s {
            "clod" => Ok(ModeSpec::Clod),
            "off" => Ok(ModeSpec::Off),
            _ => s
                .strip_prefix("topk:")
                .and_then(|n| n.parse().ok())
                .map(ModeSpec::TopK)
                .ok_or_else(|| ApiError::InvalidRequest(format!("mode '{s}' is not clod, off or topk:N"))),
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_size() -> usize {
    256
}

fn default_fov() -> f64 {
    DEFAULT_FOV_DEG
}

fn default_mode() -> String {
    "clod".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub scene: String,
    pub camera: CameraSpec,
    #[serde(default = "default_scale")]
    pub s_v: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    /// Horizontal field of view, used when no intrinsics are given.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
}

impl RenderRequest {
    /// Checks sizes and parameters and builds the camera and render mode.
    pub fn resolve(&self, max_pixels: usize, n_total: usize) -> Result<(Camera, LodMode), ApiError> {
        if self.width == 0 || self.height == 0 {
            return Err(ApiError::InvalidRequest("image size must be positive".into()));
        }
        if self.width.saturating_mul(self.height) > max_pixels {
            return Err(ApiError::OversizeImage {
                width: self.width,
                height: self.height,
                max_pixels,
            });
        }
        let query = LodQuery::with_tau(self.s_v, self.tau);
        query.validate().map_err(|e| ApiError::InvalidRequest(e.to_string()))?;
        let mode = match self.mode.parse()? {
            ModeSpec::Clod => LodMode::Clod(query),
            ModeSpec::Off => LodMode::Off { tau: self.tau },
            ModeSpec::TopK(k) if k <= n_total => LodMode::TopK { k, query },
            ModeSpec::TopK(k) => {
                return Err(ApiError::InvalidRequest(format!(
                    "topk:{k} exceeds the {n_total} primitives"
                )))
            }
        };
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(ApiError::InvalidRequest("fov_deg must lie in (0, 180)".into()));
        }
        let camera = match &self.camera {
            CameraSpec::Pose { matrix, intrinsics } => {
                let m: [f64; 16] = matrix
                    .as_slice()
                    .try_into()
                    .map_err(|_| ApiError::MalformedPose(format!("pose needs 16 values, got {}", matrix.len())))?;
                let mut cam = Camera::with_fov(self.width, self.height, self.fov_deg, matrix_from_row_major(&m));
                if let Some(k) = intrinsics {
                    (cam.fx, cam.fy, cam.cx, cam.cy) = (k.fx, k.fy, k.cx, k.cy);
                }
                cam.validate().map_err(|e| ApiError::MalformedPose(e.to_string()))?;
                cam
            }
            CameraSpec::Orbit(orbit) => {
                let pose = orbit.pose().map_err(|e| ApiError::MalformedPose(e.to_string()))?;
                Camera::with_fov(self.width, self.height, self.fov_deg, pose)
            }
        };
        Ok((camera, mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResponse {
    /// Base64 PNG.
    pub image_png: String,
    pub width: usize,
    pub height: usize,
    pub rendered_count: usize,
    pub n_total: usize,
    pub eta_actual: f64,
    pub render_ms: f64,
    pub request: RenderRequest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orbit_request() -> RenderRequest {
        serde_json::from_str(
            r#"{"scene": "a", "camera": {"orbit": {"azimuth": 30, "elevation": 20, "radius": 4, "target": [0, 0, 0]}}}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let r = orbit_request();
        assert_eq!(
            (r.s_v, r.tau, r.width, r.height, r.mode.as_str()),
            (1.0, DEFAULT_TAU, 256, 256, "clod")
        );
    }

    #[test]
    fn modes_parse() {
        assert_eq!("clod".parse::<ModeSpec>().unwrap(), ModeSpec::Clod);
        assert_eq!("off".parse::<ModeSpec>().unwrap(), ModeSpec::Off);
        assert_eq!("topk:12".parse::<ModeSpec>().unwrap(), ModeSpec::TopK(12));
        for bad in ["topk:", "topk:-1", "top", ""] {
            assert_eq!(bad.parse::<ModeSpec>().unwrap_err().code(), "invalid_request");
        }
    }

    #[test]
    fn resolve_reports_codes() {
        let mut r = orbit_request();
        assert!(r.resolve(DEFAULT_MAX_PIXELS, 10).is_ok());
        r.width = 2048;
        r.height = 2048;
        assert_eq!(r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap_err().code(), "oversize_image");
        let mut r = orbit_request();
        r.s_v = 0.5;
        assert_eq!(r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap_err().code(), "invalid_request");
        let mut r = orbit_request();
        r.mode = "topk:11".into();
        assert_eq!(r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap_err().code(), "invalid_request");
        let mut r = orbit_request();
        r.camera = CameraSpec::Pose {
            matrix: vec![1.0; 15],
            intrinsics: None,
        };
        assert_eq!(r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap_err().code(), "malformed_pose");
        r.camera = CameraSpec::Pose {
            matrix: vec![2.0; 16],
            intrinsics: None,
        };
        assert_eq!(r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap_err().code(), "malformed_pose");
    }

    #[test]
    fn pose_with_intrinsics() {
        let mut r = orbit_request();
        let identity = [
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        r.camera = CameraSpec::Pose {
            matrix: identity.to_vec(),
            intrinsics: Some(Intrinsics {
                fx: 100.0,
                fy: 90.0,
                cx: 10.0,
                cy: 20.0,
            }),
        };
        let (cam, mode) = r.resolve(DEFAULT_MAX_PIXELS, 10).unwrap();
        assert_eq!((cam.fx, cam.fy, cam.cx, cam.cy), (100.0, 90.0, 10.0, 20.0));
        assert_eq!(mode, LodMode::Clod(LodQuery::new(1.0)));
    }
}
