//! Cameras paired with ground-truth images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::{matrix_to_row_major, Camera, CameraSetFile, FrameRecord};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CameraSet {
    pub views: Vec<View>,
}

impl CameraSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn cameras(&self) -> impl Iterator<Item = &Camera> {
        self.views.iter().map(|v| &v.camera)
    }

    /// Splits off every `every`-th view (starting at `offset`) as a held-out set.
    pub fn split_holdout(&self, every: usize, offset: usize) -> (CameraSet, CameraSet) {
        let (mut train, mut test) = (CameraSet::default(), CameraSet::default());
        for (i, v) in self.views.iter().enumerate() {
            if every > 0 && i % every == offset % every {
                test.views.push(v.clone());
            } else {
                train.views.push(v.clone());
            }
        }
        (train, test)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::InvalidCamera("camera set is empty".into()))?;
        for (i, v) in self.views.iter().enumerate() {
            v.camera
                .validate()
                .map_err(|e| Error::InvalidCamera(format!("view {i}: {e}")))?;
            let c = &v.camera;
            let f = &first.camera;
            if (c.width, c.height) != (f.width, f.height)
                || (c.fx, c.fy, c.cx, c.cy, c.near, c.far) != (f.fx, f.fy, f.cx, f.cy, f.near, f.far)
            {
                return Err(Error::InvalidCamera(format!("view {i} intrinsics differ from view 0")));
            }
            if (v.image.width, v.image.height) != (c.width, c.height) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", c.width, c.height),
                    actual: format!("{}x{}", v.image.width, v.image.height),
                });
            }
        }
        Ok(())
    }

    /// Writes `cameras.json` and one PPM per view under `dir`; returns the
    /// JSON path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.validate()?;
        let dir = dir.as_ref();
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let c0 = &self.views[0].camera;
        let mut frames = Vec::with_capacity(self.views.len());
        for (i, v) in self.views.iter().enumerate() {
            let rel = PathBuf::from("images").join(format!("frame_{i:04}.ppm"));
            v.image.save_ppm(dir.join(&rel))?;
            frames.push(FrameRecord {
                world_to_camera: matrix_to_row_major(&v.camera.world_to_camera),
                image: rel,
            });
        }
        let file = CameraSetFile {
            width: c0.width,
            height: c0.height,
            fx: c0.fx,
            fy: c0.fy,
            cx: c0.cx,
            cy: c0.cy,
            near: c0.near,
            far: c0.far,
            frames,
        };
        let path = dir.join("cameras.json");
        file.save(&path)?;
        Ok(path)
    }

    /// Loads a camera set; image paths are relative to the JSON file.
    pub fn load(json: impl AsRef<Path>) -> Result<Self> {
        let json = json.as_ref();
        let file = CameraSetFile::load(json)?;
        let base = json.parent().unwrap_or(Path::new("."));
        let mut views = Vec::with_capacity(file.frames.len());
        for frame in &file.frames {
            let path = base.join(&frame.image);
            let image = Image::load_ppm(&path)?;
            views.push(View {
                camera: file.camera(frame),
                image,
            });
        }
        let set = CameraSet { views };
        set.validate()?;
        Ok(set)
    }
}
