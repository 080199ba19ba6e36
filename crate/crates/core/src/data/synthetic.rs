//! Analytic scenes of moving boxes and spheres with exact part masks.
//!
//! Frames are rendered by tracing each pixel ray against every primitive and
//! compositing the piecewise-constant density exactly, so the images are
//! independent of the learned renderer.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{image_path, save_manifest, write_labels, write_png8, Dataset, Frame, Image};
use crate::error::{Error, Result};
use crate::fields::Aabb;
use crate::render::{generate_rays, Camera, Ray};
use crate::rigid::{axis_angle, PoseSequence};

/// Scene description, usually read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_x_deg: f64,
    #[serde(default = "white")]
    pub background: [f64; 3],
    pub camera: OrbitSpec,
    pub primitives: Vec<PrimitiveSpec>,
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

/// One camera per frame on a circle around `target`, z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub radius: f64,
    pub elevation_deg: f64,
    #[serde(default)]
    pub azimuth_start_deg: f64,
    /// Azimuth covered between the first and the last frame.
    pub azimuth_span_deg: f64,
    /// Uniform random azimuth perturbation per frame.
    #[serde(default)]
    pub azimuth_jitter_deg: f64,
    #[serde(default)]
    pub target: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Box { half_extent: [f64; 3] },
    Sphere { radius: f64 },
}

/// A rigid primitive whose center moves linearly from `center` to
/// `center + translation` while it turns by `rotation_deg` about
/// `rotation_axis` over t ∈ [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "z_axis")]
    pub rotation_axis: [f64; 3],
    #[serde(default)]
    pub rotation_deg: f64,
}

fn default_density() -> f64 {
    40.0
}

fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl PrimitiveSpec {
    /// Local-to-world pose at time `t`.
    pub fn pose(&self, t: f64) -> Matrix4<f64> {
        let r = axis_angle(Vector3::from(self.rotation_axis), self.rotation_deg.to_radians() * t);
        let c = Vector3::from(self.center) + Vector3::from(self.translation) * t;
        let mut p = Matrix4::identity();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&c);
        p
    }

    /// Depth interval where a ray is inside the primitive at time `t`.
    fn interval(&self, ray: &Ray, t: f64) -> Option<(f64, f64)> {
        let p = self.pose(t);
        let r: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
        let c = Vector3::new(p[(0, 3)], p[(1, 3)], p[(2, 3)]);
        let o = r.transpose() * (Vector3::from(ray.origin) - c);
        let d = r.transpose() * Vector3::from(ray.dir);
        let (t0, t1) = match &self.shape {
            Shape::Box { half_extent } => {
                let b = crate::fields::Aabb {
                    min: half_extent.map(|h| -h),
                    max: *half_extent,
                };
                b.intersect_ray(o.into(), d.into())?
            }
            Shape::Sphere { radius } => {
                let bq = o.dot(&d);
                let cq = o.dot(&o) - radius * radius;
                let disc = bq * bq - cq;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                (-bq - s, -bq + s)
            }
        };
        let (a, b) = (t0.max(ray.near), t1.min(ray.far));
        (a < b).then_some((a, b))
    }
}

impl SyntheticSceneSpec {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = Self::from_toml(&text).map_err(|m| Error::format(path, m))?;
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.primitives.is_empty() {
            return bad("scene has no primitives".into());
        }
        if self.primitives.len() > 254 {
            return bad("at most 254 primitives fit in 8-bit masks".into());
        }
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return bad("frame count and resolution must be positive".into());
        }
        if !(self.fov_x_deg > 0.0 && self.fov_x_deg < 180.0) {
            return bad(format!("fov_x_deg {} outside (0, 180)", self.fov_x_deg));
        }
        if !(self.camera.radius > 0.0) {
            return bad("camera radius must be positive".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Box { half_extent } => half_extent.iter().all(|&h| h > 0.0),
                Shape::Sphere { radius } => *radius > 0.0,
            };
            if !ok || !(p.density > 0.0) {
                return bad(format!("primitive {i} is degenerate"));
            }
            if p.rotation_deg != 0.0 && Vector3::from(p.rotation_axis).norm() < 1e-12 {
                return bad(format!("primitive {i} rotates about a zero axis"));
            }
        }
        Ok(())
    }

    pub fn time(&self, frame: usize) -> f64 {
        if self.frames < 2 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }

    /// Box enclosing every primitive over t ∈ [0, 1], grown by `margin`.
    /// Uses bounding spheres, so it is conservative for rotating boxes.
    pub fn bounds(&self, margin: f64) -> Result<Aabb> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            let r = match &p.shape {
                Shape::Box { half_extent } => Vector3::from(*half_extent).norm(),
                Shape::Sphere { radius } => *radius,
            };
            for c in [Vector3::from(p.center), Vector3::from(p.center) + Vector3::from(p.translation)] {
                for k in 0..3 {
                    min[k] = min[k].min(c[k] - r - margin);
                    max[k] = max[k].max(c[k] + r + margin);
                }
            }
        }
        Aabb::new(min, max)
    }

    pub fn fov_x(&self) -> f64 {
        self.fov_x_deg.to_radians()
    }

    /// Camera-to-world matrix of an orbit camera at `azimuth_deg`.
    pub fn orbit_pose(&self, azimuth_deg: f64) -> Matrix4<f64> {
        let o = &self.camera;
        let (a, e) = (azimuth_deg.to_radians(), o.elevation_deg.to_radians());
        let target = Vector3::from(o.target);
        let pos = target + o.radius * Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
        look_at(pos, target, Vector3::z())
    }

    /// The two-body fixture: a box translating by 0.4 along x next to a static box,
    /// seen from an orbit with ±60° of per-frame azimuth jitter.
    pub fn two_body() -> Self {
        Self {
            frames: 60,
            width: 64,
            height: 64,
            fov_x_deg: 40.0,
            background: white(),
            camera: OrbitSpec {
                radius: 3.5,
                elevation_deg: 30.0,
                azimuth_start_deg: -150.0,
                azimuth_span_deg: 120.0,
                azimuth_jitter_deg: 60.0,
                target: [0.0; 3],
            },
            primitives: vec![
                PrimitiveSpec {
                    shape: Shape::Box {
                        half_extent: [0.28, 0.28, 0.28],
                    },
                    center: [-0.5, 0.0, 0.0],
                    albedo: [0.2, 0.35, 0.85],
                    density: default_density(),
                    translation: [0.0; 3],
                    rotation_axis: z_axis(),
                    rotation_deg: 0.0,
                },
                PrimitiveSpec {
                    shape: Shape::Box {
                        half_extent: [0.2, 0.2, 0.2],
                    },
                    center: [0.1, 0.0, 0.0],
                    albedo: [0.9, 0.25, 0.15],
                    density: default_density(),
                    translation: [0.4, 0.0, 0.0],
                    rotation_axis: z_axis(),
                    rotation_deg: 0.0,
                },
            ],
        }
    }
}

/// Camera-to-world matrix of a camera at `pos` whose −z axis points at `target`.
pub fn look_at(pos: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
    let forward = (target - pos).normalize();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::x());
    }
    let right = right.normalize();
    let up = right.cross(&forward);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&up);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&(-forward));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&pos);
    m
}

/// Exact rendering of one ray: premultiplied color, opacity, and label
/// (primitive index + 1, or 0 when the opacity is below one half).
pub fn trace_ray(primitives: &[PrimitiveSpec], ray: &Ray, t: f64) -> ([f64; 3], f64, u8) {
    let hits: Vec<(f64, f64, usize)> = primitives
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.interval(ray, t).map(|(a, b)| (a, b, k)))
        .collect();
    let mut bounds: Vec<f64> = hits.iter().flat_map(|h| [h.0, h.1]).collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();
    let mut color = [0.0; 3];
    let mut optical = 0.0f64;
    let mut best = (0.0, 0u8);
    for seg in bounds.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let mid = 0.5 * (a + b);
        let inside: Vec<usize> = hits.iter().filter(|h| h.0 <= mid && mid < h.1).map(|h| h.2).collect();
        if inside.is_empty() {
            continue;
        }
        let sigma: f64 = inside.iter().map(|&k| primitives[k].density).sum();
        let w = (-optical).exp() * -(-sigma * (b - a)).exp_m1();
        optical += sigma * (b - a);
        let mut dominant = (0.0, 0usize);
        for &k in &inside {
            let share = primitives[k].density / sigma;
            for c in 0..3 {
                color[c] += w * share * primitives[k].albedo[c];
            }
            if share > dominant.0 {
                dominant = (share, k);
            }
        }
        if w > best.0 {
            best = (w, dominant.1 as u8 + 1);
        }
    }
    let acc = -(-optical).exp_m1();
    (color, acc, if acc < 0.5 { 0 } else { best.1 })
}

/// Rendered frames with ground-truth masks and trajectories.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub spec: SyntheticSceneSpec,
    /// Frames composited over the spec's background.
    pub dataset: Dataset,
    /// RGBA images with straight alpha.
    pub rgba: Vec<Image>,
    /// One label per pixel per frame; 0 is background.
    pub masks: Vec<Vec<u8>>,
    /// Local-to-world pose of each primitive at every frame time.
    pub trajectories: Vec<PoseSequence>,
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec, rng: &mut impl Rng) -> Result<GeneratedScene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let times: Vec<f64> = (0..spec.frames).map(|i| spec.time(i)).collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut rgba = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for (i, &t) in times.iter().enumerate() {
        let jitter = if spec.camera.azimuth_jitter_deg > 0.0 {
            rng.gen_range(-spec.camera.azimuth_jitter_deg..=spec.camera.azimuth_jitter_deg)
        } else {
            0.0
        };
        let c2w = spec.orbit_pose(spec.camera.azimuth_start_deg + spec.camera.azimuth_span_deg * t + jitter);
        let cam = Camera::from_fov(w, h, spec.fov_x(), c2w)?;
        let rays = generate_rays(&cam, &cam.pixel_centers(), t, 0.0, 1e3)?;
        let mut data = Vec::with_capacity(w * h * 4);
        let mut mask = Vec::with_capacity(w * h);
        let mut rgb = Vec::with_capacity(w * h);
        for ray in &rays {
            let (c, a, label) = trace_ray(&spec.primitives, ray, t);
            let straight = if a > 0.0 { c.map(|v| v / a) } else { [0.0; 3] };
            data.extend(straight.iter().map(|&v| v as f32));
            data.push(a as f32);
            mask.push(label);
            rgb.push([0, 1, 2].map(|k| (c[k] + (1.0 - a) * spec.background[k]) as f32));
        }
        frames.push(Frame {
            file_path: format!("./train/r_{i:03}"),
            time: t,
            c2w,
            rgb,
        });
        rgba.push(Image::new(w, h, 4, data)?);
        masks.push(mask);
    }
    let trajectories = spec
        .primitives
        .iter()
        .map(|p| PoseSequence::new(times.clone(), times.iter().map(|&t| p.pose(t)).collect()))
        .collect::<Result<_>>()?;
    Ok(GeneratedScene {
        spec: spec.clone(),
        dataset: Dataset {
            width: w,
            height: h,
            fov_x: spec.fov_x(),
            frames,
        },
        rgba,
        masks,
        trajectories,
    })
}

/// Directory layout written by [`write_synthetic`].
pub fn mask_path(root: &Path, frame: usize) -> std::path::PathBuf {
    root.join("masks").join(format!("m_{frame:03}.png"))
}

pub fn trajectory_path(root: &Path, label: usize) -> std::path::PathBuf {
    root.join("trajectories").join(format!("part_{label}.txt"))
}

/// Writes the `train` split as RGBA PNGs, the label masks, one trajectory
/// table per primitive (named by its mask label) and the scene spec.
pub fn write_synthetic(root: &Path, scene: &GeneratedScene) -> Result<()> {
    for dir in [root.join("train"), root.join("masks"), root.join("trajectories")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(scene.rgba.len());
    for (i, (img, f)) in scene.rgba.iter().zip(&scene.dataset.frames).enumerate() {
        write_png8(&image_path(root, &f.file_path), img)?;
        write_labels(&mask_path(root, i), scene.dataset.width, scene.dataset.height, &scene.masks[i])?;
        records.push((f.file_path.clone(), f.time, f.c2w));
    }
    save_manifest(root, "train", scene.dataset.fov_x, &records)?;
    for (k, traj) in scene.trajectories.iter().enumerate() {
        traj.save(&trajectory_path(root, k + 1))?;
    }
    let spec_path = root.join("scene.toml");
    fs::write(&spec_path, scene.spec.to_toml()).map_err(|e| Error::io(&spec_path, e))
}

/// Reads the masks written by [`write_synthetic`] for `frames` frames.
pub fn load_masks(root: &Path, frames: usize) -> Result<Vec<Vec<u8>>> {
    (0..frames).map(|i| Ok(super::read_labels(&mask_path(root, i))?.2)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_toml_round_trip() {
        let spec = SyntheticSceneSpec::two_body();
        let back = SyntheticSceneSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn ray_through_box_center() {
        let prim = SyntheticSceneSpec::two_body().primitives[0].clone();
        let ray = Ray {
            origin: [-0.5, 0.0, 5.0],
            dir: [0.0, 0.0, -1.0],
            near: 0.0,
            far: 100.0,
            pixel: [0.0; 2],
            time: 0.0,
        };
        let (c, a, label) = trace_ray(&[prim.clone()], &ray, 0.0);
        let expect = 1.0 - (-40.0f64 * 0.56).exp();
        assert!((a - expect).abs() < 1e-12);
        assert!((c[2] - expect * prim.albedo[2]).abs() < 1e-12);
        assert_eq!(label, 1);
    }

    #[test]
    fn zero_primitives_rejected() {
        let mut spec = SyntheticSceneSpec::two_body();
        spec.primitives.clear();
        assert!(spec.validate().is_err());
    }
}
