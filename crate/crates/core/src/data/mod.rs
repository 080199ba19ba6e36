//! Datasets in the D-NeRF layout and the synthetic scene generator.
//!
//! A split `name` lives in `transforms_<name>.json` at the dataset root:
//!
//! ```json
//! {
//!   "camera_angle_x": 0.69,
//!   "frames": [
//!     { "file_path": "./train/r_000", "time": 0.0,
//!       "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]] }
//!   ]
//! }
//! ```
//!
//! `file_path` is relative to the root; `.png` is appended when it has no
//! extension. `transform_matrix` is the row-major camera-to-world matrix of a
//! camera looking down its −z axis. `camera_angle_x` is the horizontal field
//! of view in radians.

pub mod image;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Camera;

pub use self::image::{read_labels, read_png, write_labels, write_png16, write_png8, Image};

#[derive(Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    file_path: String,
    time: f64,
    transform_matrix: Vec<Vec<f64>>,
}

/// One posed, timed image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// As written in the manifest.
    pub file_path: String,
    pub time: f64,
    pub c2w: Matrix4<f64>,
    /// RGB pixels, alpha already composited.
    pub rgb: Vec<[f32; 3]>,
}

/// The frames of one split with their shared intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    /// Sorted by time.
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }

    pub fn camera(&self, frame: usize) -> Result<Camera> {
        Camera::new(self.width, self.height, self.focal(), self.frames[frame].c2w)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("transforms_{split}.json"))
}

/// Image file of a manifest `file_path`.
pub fn image_path(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn parse_matrix(m: &[Vec<f64>]) -> std::result::Result<Matrix4<f64>, String> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err("transform_matrix must be 4×4".into());
    }
    let p = Matrix4::from_fn(|i, j| m[i][j]);
    if p.iter().any(|v| !v.is_finite()) {
        return Err("transform_matrix has non-finite entries".into());
    }
    let r = p.fixed_view::<3, 3>(0, 0);
    if (r.transpose() * r - nalgebra::Matrix3::identity()).norm() > 1e-4 {
        return Err("transform_matrix rotation block is not orthonormal".into());
    }
    if (p.row(3) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).norm() > 1e-9 {
        return Err("transform_matrix last row must be (0, 0, 0, 1)".into());
    }
    Ok(p)
}

/// Loads one split, compositing alpha onto `background`.
pub fn load_dataset(root: &Path, split: &str, background: [f64; 3]) -> Result<Dataset> {
    let path = manifest_path(root, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if !(manifest.camera_angle_x > 0.0 && manifest.camera_angle_x < std::f64::consts::PI) {
        return Err(Error::format(&path, "camera_angle_x must lie in (0, π)"));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut size = None;
    for (i, f) in manifest.frames.iter().enumerate() {
        let field = |name: &str, msg: String| Error::format(&path, format!("frames[{i}].{name}: {msg}"));
        if !(0.0..=1.0).contains(&f.time) {
            return Err(field("time", format!("{} is outside [0, 1]", f.time)));
        }
        let c2w = parse_matrix(&f.transform_matrix).map_err(|m| field("transform_matrix", m))?;
        let img_path = image_path(root, &f.file_path);
        let img = read_png(&img_path)?;
        match size {
            None => size = Some((img.width, img.height)),
            Some(s) if s != (img.width, img.height) => {
                return Err(Error::format(
                    &img_path,
                    format!("image is {}×{} but earlier frames are {}×{}", img.width, img.height, s.0, s.1),
                ))
            }
            _ => {}
        }
        frames.push(Frame {
            file_path: f.file_path.clone(),
            time: f.time,
            c2w,
            rgb: img.to_rgb(background),
        });
    }
    let (width, height) = size.ok_or_else(|| Error::format(&path, "manifest lists no frames"))?;
    frames.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(Dataset {
        width,
        height,
        fov_x: manifest.camera_angle_x,
        frames,
    })
}

/// Writes the manifest of one split. Images are not touched.
pub fn save_manifest(root: &Path, split: &str, fov_x: f64, frames: &[(String, f64, Matrix4<f64>)]) -> Result<()> {
    let manifest = Manifest {
        camera_angle_x: fov_x,
        frames: frames
            .iter()
            .map(|(p, t, m)| ManifestFrame {
                file_path: p.clone(),
                time: *t,
                transform_matrix: (0..4).map(|i| (0..4).map(|j| m[(i, j)]).collect()).collect(),
            })
            .collect(),
    };
    let path = manifest_path(root, split);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a split: one 8-bit RGB PNG per frame under `root/<split>/` plus the manifest.
pub fn save_dataset(root: &Path, split: &str, data: &Dataset) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(data.frames.len());
    for (i, f) in data.frames.iter().enumerate() {
        let rel = format!("./{split}/r_{i:03}");
        let img = Image::new(
            data.width,
            data.height,
            3,
            f.rgb.iter().flat_map(|p| p.iter().copied()).collect(),
        )?;
        write_png8(&image_path(root, &rel), &img)?;
        records.push((rel, f.time, f.c2w));
    }
    save_manifest(root, split, data.fov_x, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_validation() {
        let id: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert!(parse_matrix(&id).is_ok());
        let mut bad = id.clone();
        bad[0][0] = 2.0;
        assert!(parse_matrix(&bad).is_err());
        assert!(parse_matrix(&id[..3]).is_err());
    }

    #[test]
    fn image_paths_gain_png_extension() {
        let root = Path::new("/data");
        assert_eq!(image_path(root, "./train/r_000"), Path::new("/data/./train/r_000.png"));
        assert_eq!(image_path(root, "a/b.png"), Path::new("/data/a/b.png"));
    }
}
