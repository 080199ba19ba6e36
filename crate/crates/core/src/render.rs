//! Pinhole rays, quadrature sampling, volume rendering and the rendering losses.

use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{lit, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::Aabb;
use crate::model::{points_var, times_var, SceneModel};

/// Pinhole camera looking down its local −z axis (OpenGL convention), with
/// the principal point at the image center.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub c2w: Matrix4<f64>,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, c2w: Matrix4<f64>) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            focal,
            c2w,
        })
    }

    /// Camera with horizontal field of view `fov_x` (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64, c2w: Matrix4<f64>) -> Result<Self> {
        Self::new(width, height, 0.5 * width as f64 / (0.5 * fov_x).tan(), c2w)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[(0, 3)], self.c2w[(1, 3)], self.c2w[(2, 3)]]
    }

    /// Unit world direction through image position `(u, v)`; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn direction(&self, u: f64, v: f64) -> [f64; 3] {
        let cx = 0.5 * self.width as f64;
        let cy = 0.5 * self.height as f64;
        let d = Vector4::new((u - cx) / self.focal, -(v - cy) / self.focal, -1.0, 0.0);
        let w = (self.c2w * d).xyz().normalize();
        [w.x, w.y, w.z]
    }

    /// Image position of a world point, or `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let w2c = crate::rigid::rigid_inverse(&self.c2w);
        let q = w2c * Vector4::new(p[0], p[1], p[2], 1.0);
        if q.z >= 0.0 {
            return None;
        }
        let cx = 0.5 * self.width as f64;
        let cy = 0.5 * self.height as f64;
        Some([cx + self.focal * q.x / -q.z, cy - self.focal * q.y / -q.z])
    }

    /// Centers of all pixels in row-major order.
    pub fn pixel_centers(&self) -> Vec<[f64; 2]> {
        (0..self.height)
            .flat_map(|j| (0..self.width).map(move |i| [i as f64 + 0.5, j as f64 + 0.5]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit length.
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub pixel: [f64; 2],
    pub time: f64,
}

impl Ray {
    pub fn at(&self, h: f64) -> [f64; 3] {
        [
            self.origin[0] + h * self.dir[0],
            self.origin[1] + h * self.dir[1],
            self.origin[2] + h * self.dir[2],
        ]
    }

    /// The part of the ray inside `aabb`, or `None` if it misses.
    pub fn clip(&self, aabb: &Aabb) -> Option<Ray> {
        let (t0, t1) = aabb.intersect_ray(self.origin, self.dir)?;
        let near = self.near.max(t0);
        let far = self.far.min(t1);
        (near < far).then(|| Ray {
            near,
            far,
            ..self.clone()
        })
    }
}

/// Back-projects image positions through `camera` at time `time`.
pub fn generate_rays(camera: &Camera, pixels: &[[f64; 2]], time: f64, near: f64, far: f64) -> Result<Vec<Ray>> {
    if !(camera.focal > 0.0) {
        return Err(Error::Config("focal length must be positive".into()));
    }
    if !(near < far) {
        return Err(Error::Config(format!("near {near} must be below far {far}")));
    }
    let origin = camera.origin();
    Ok(pixels
        .iter()
        .map(|&[u, v]| Ray {
            origin,
            dir: camera.direction(u, v),
            near,
            far,
            pixel: [u, v],
            time,
        })
        .collect())
}

/// Sample depths along a ray and the length of the interval each one covers.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// `n` samples in `[near, far]`, one per uniform bin: bin centers, or a
/// uniform jitter inside each bin when `stratified`. Interval boundaries sit
/// halfway between neighbouring samples, so the intervals tile `[near, far]`.
pub fn sample_points(ray: &Ray, n: usize, stratified: bool, rng: &mut impl Rng) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples per ray, got {n}")));
    }
    let width = (ray.far - ray.near) / n as f64;
    let depths: Vec<f64> = (0..n)
        .map(|i| {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            ray.near + (i as f64 + u) * width
        })
        .collect();
    let mut deltas = Vec::with_capacity(n);
    let mut lo = ray.near;
    for i in 0..n {
        let hi = if i + 1 < n {
            0.5 * (depths[i] + depths[i + 1])
        } else {
            ray.far
        };
        deltas.push(hi - lo);
        lo = hi;
    }
    Ok(RaySamples { depths, deltas })
}

/// Number of samples for a ray marched at roughly `step` spacing.
pub fn sample_count(ray: &Ray, step: f64) -> usize {
    (((ray.far - ray.near) / step).ceil() as usize).max(2)
}

/// Quadrature result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub acc: f64,
    pub depth: f64,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
    pub t_final: f64,
}

/// Alpha compositing of one ray's samples over `background`. The expected
/// depth assigns the leftover transmittance to `far`.
pub fn volume_render(
    sigma: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    depths: &[f64],
    far: f64,
    background: [f64; 3],
) -> RenderOutput {
    let n = sigma.len();
    let mut out = RenderOutput {
        color: [0.0; 3],
        acc: 0.0,
        depth: 0.0,
        alpha: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        t_final: 1.0,
    };
    let mut optical = 0.0f64;
    for i in 0..n {
        let a = sigma[i] * deltas[i];
        let t = (-optical).exp();
        let alpha = -(-a).exp_m1();
        let w = t * alpha;
        optical += a;
        out.alpha.push(alpha);
        out.transmittance.push(t);
        out.weights.push(w);
        for c in 0..3 {
            out.color[c] += w * colors[i][c];
        }
        out.acc += w;
        out.depth += w * depths[i];
    }
    out.t_final = (-optical).exp();
    for c in 0..3 {
        out.color[c] += out.t_final * background[c];
    }
    out.depth += out.t_final * far;
    out
}

/// Rendering weights `w_i = T_i α_i` of a batch of rays whose samples occupy
/// `offsets[r]..offsets[r + 1]` of `sigma`.
pub fn ray_weights<'t, T: Real>(sigma: Var<'t, T>, deltas: Arc<Vec<T>>, offsets: Arc<Vec<usize>>) -> Var<'t, T> {
    let s = sigma.value();
    assert_eq!(s.len(), deltas.len(), "one interval per sample");
    let mut w = vec![T::zero(); s.len()];
    for r in 0..offsets.len() - 1 {
        let mut optical = T::zero();
        for i in offsets[r]..offsets[r + 1] {
            let a = s.data()[i] * deltas[i];
            w[i] = (-optical).exp() * -(-a).exp_m1();
            optical += a;
        }
    }
    let y = Tensor::from_parts(vec![s.len()], w);
    sigma.tape().custom(
        y,
        &[sigma],
        Box::new(move |ctx| {
            let s = ctx.input(0).data();
            let w = ctx.output.data();
            let g = ctx.grad.data();
            let mut out = vec![T::zero(); s.len()];
            for r in 0..offsets.len() - 1 {
                let (lo, hi) = (offsets[r], offsets[r + 1]);
                let mut optical = T::zero();
                for i in lo..hi {
                    let e = (-(s[i] * deltas[i])).exp();
                    out[i] = g[i] * (-optical).exp() * e * deltas[i];
                    optical += s[i] * deltas[i];
                }
                let mut later = T::zero();
                for i in (lo..hi).rev() {
                    out[i] -= deltas[i] * later;
                    later += g[i] * w[i];
                }
            }
            vec![Some(Tensor::from_parts(vec![s.len()], out))]
        }),
    )
}

/// Differentiable per-ray compositing.
pub struct Composite<'t, T> {
    /// R×3 pixel colors including the background term.
    pub rgb: Var<'t, T>,
    /// R accumulated opacities.
    pub acc: Var<'t, T>,
    /// P sample weights.
    pub weights: Var<'t, T>,
}

/// Composites per-sample densities (P) and colors (P×3) over `background`.
pub fn composite<'t, T: Real>(
    sigma: Var<'t, T>,
    rgb: Var<'t, T>,
    deltas: Arc<Vec<T>>,
    offsets: Arc<Vec<usize>>,
    background: [f64; 3],
) -> Composite<'t, T> {
    let tape = sigma.tape();
    let rays = offsets.len() - 1;
    let weights = ray_weights(sigma, deltas, offsets.clone());
    let acc = weights.segment_sum(offsets.clone());
    let color = rgb.mul_col(weights).segment_sum(offsets);
    let bg: Vec<T> = (0..rays).flat_map(|_| background.map(lit::<T>)).collect();
    let bg = tape.constant(Tensor::from_parts(vec![rays, 3], bg));
    let rgb = color.add(bg).sub(bg.mul_col(acc));
    Composite { rgb, acc, weights }
}

fn zero<T: Real>(tape: &Tape<T>) -> Var<'_, T> {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Mean over rays of the squared color error summed over channels.
pub fn photometric_loss<'t, T: Real>(rendered: Var<'t, T>, target: &Tensor<T>) -> Var<'t, T> {
    let tape = rendered.tape();
    let r = target.rows();
    if r == 0 {
        return zero(tape);
    }
    let gt = tape.constant(target.clone());
    rendered.sub(gt).square().sum().scale(lit(1.0 / r as f64))
}

/// Mean over rays of `Σ_i w_i ‖c_i − C_gt‖²` over each ray's samples.
pub fn per_point_loss<'t, T: Real>(
    colors: Var<'t, T>,
    weights: Var<'t, T>,
    target: &Tensor<T>,
    offsets: &[usize],
) -> Var<'t, T> {
    let tape = colors.tape();
    let r = target.rows();
    if r == 0 || colors.value().is_empty() {
        return zero(tape);
    }
    let mut gt = Vec::with_capacity(colors.value().len());
    for ray in 0..r {
        for _ in offsets[ray]..offsets[ray + 1] {
            gt.extend_from_slice(target.row(ray));
        }
    }
    let gt = tape.constant(Tensor::from_parts(colors.shape(), gt));
    let err = colors.sub(gt).square().sum_cols_per_row();
    err.mul(weights).sum().scale(lit(1.0 / r as f64))
}

/// Mean binary entropy of the accumulated opacities.
pub fn entropy_loss<'t, T: Real>(acc: Var<'t, T>) -> Var<'t, T> {
    let n = acc.value().len();
    if n == 0 {
        return zero(acc.tape());
    }
    let a = acc.clamp(lit(1e-6), lit(1.0 - 1e-6));
    let b = a.neg().add_scalar(T::one());
    a.mul(a.ln()).add(b.mul(b.ln())).sum().scale(lit(-1.0 / n as f64))
}

/// Mean over points with `sigma > eps` of `‖f_Em − f_Lm‖²`; zero when none qualify.
pub fn cycle_loss<'t, T: Real>(sigma: &[T], f_em: Var<'t, T>, f_lm: Var<'t, T>, eps: f64) -> Var<'t, T> {
    let keep: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > lit(eps)).collect();
    if keep.is_empty() {
        return zero(f_em.tape());
    }
    let k = keep.len();
    let keep = Arc::new(keep);
    let d = f_em.gather_rows(keep.clone()).sub(f_lm.gather_rows(keep));
    d.square().sum().scale(lit(1.0 / k as f64))
}

/// Densities, colors and optional labels of a field at a batch of points.
#[derive(Clone, Debug, Default)]
pub struct FieldSamples {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    /// Label per sample; 0 means none.
    pub labels: Option<Vec<u32>>,
}

/// Anything that can be ray-marched without gradients.
pub trait SceneField: Sync {
    fn eval(&self, points: &[[f64; 3]], dirs: &[[f64; 3]], time: f64) -> Result<FieldSamples>;
}

/// Which world cells may contain matter; used to skip empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub aabb: Aabb,
    pub res: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn full(aabb: Aabb, res: usize) -> Self {
        Self {
            aabb,
            res,
            cells: vec![true; res * res * res],
        }
    }

    fn cell_index(&self, p: [f64; 3]) -> Option<usize> {
        if !self.aabb.contains(p) {
            return None;
        }
        let e = self.aabb.extent();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.aabb.min[a]) / e[a] * self.res as f64;
            idx[a] = (f as usize).min(self.res - 1);
        }
        Some((idx[0] * self.res + idx[1]) * self.res + idx[2])
    }

    pub fn occupied(&self, p: [f64; 3]) -> bool {
        self.cell_index(p).is_some_and(|i| self.cells[i])
    }

    pub fn fraction(&self) -> f64 {
        self.cells.iter().filter(|&&c| c).count() as f64 / self.cells.len() as f64
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let e = self.aabb.extent();
        let r = self.res as f64;
        [
            self.aabb.min[0] + (i as f64 + 0.5) / r * e[0],
            self.aabb.min[1] + (j as f64 + 0.5) / r * e[1],
            self.aabb.min[2] + (k as f64 + 0.5) / r * e[2],
        ]
    }

    /// Marks the cells whose center has density above `sigma_thr` at any of
    /// `times`, then grows the marked set by `dilation` cells.
    pub fn build<T: Real>(model: &SceneModel<T>, res: usize, times: &[f64], sigma_thr: f64, dilation: usize) -> Result<Self> {
        let aabb = model.config.aabb;
        let mut grid = Self {
            aabb,
            res,
            cells: vec![false; res * res * res],
        };
        let centers: Vec<[f64; 3]> = (0..res)
            .flat_map(|i| (0..res).flat_map(move |j| (0..res).map(move |k| (i, j, k))))
            .map(|(i, j, k)| grid.cell_center(i, j, k))
            .collect();
        const CHUNK: usize = 8192;
        for &t in times {
            let hits: Vec<Vec<bool>> = centers
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<Vec<bool>> {
                    let tape = Tape::new();
                    let g = model.graph(&tape, false);
                    let x = points_var(&tape, chunk);
                    let ts = times_var(&tape, &vec![t; chunk.len()]);
                    let xc = g.eulerian(x, ts)?.point;
                    let s = g.density(xc).value();
                    Ok(s.data().iter().map(|v| v.to_f64().unwrap() > sigma_thr).collect())
                })
                .collect::<Result<_>>()?;
            for (c, h) in grid.cells.iter_mut().zip(hits.into_iter().flatten()) {
                *c |= h;
            }
        }
        grid.dilate(dilation);
        Ok(grid)
    }

    pub fn dilate(&mut self, cells: usize) {
        let r = self.res as isize;
        for _ in 0..cells {
            let src = self.cells.clone();
            for i in 0..r {
                for j in 0..r {
                    for k in 0..r {
                        let at = |a: isize, b: isize, c: isize| ((a * r + b) * r + c) as usize;
                        if src[at(i, j, k)] {
                            continue;
                        }
                        let near = (-1..=1).any(|di| {
                            (-1..=1).any(|dj| {
                                (-1..=1).any(|dk| {
                                    let (a, b, c) = (i + di, j + dj, k + dk);
                                    (0..r).contains(&a) && (0..r).contains(&b) && (0..r).contains(&c) && src[at(a, b, c)]
                                })
                            })
                        });
                        self.cells[at(i, j, k)] = near;
                    }
                }
            }
        }
    }
}

/// The trained model seen through its Eulerian rendering path.
pub struct ModelField<'a, T> {
    pub model: &'a SceneModel<T>,
    pub occupancy: Option<&'a OccupancyGrid>,
}

impl<T: Real> ModelField<'_, T> {
    /// Field values plus the canonical point of every sample; skipped samples
    /// get zero density and a `None` canonical point.
    pub fn eval_canonical(
        &self,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
        time: f64,
    ) -> Result<(FieldSamples, Vec<Option<[f64; 3]>>)> {
        let keep: Vec<usize> = match self.occupancy {
            Some(o) => (0..points.len()).filter(|&i| o.occupied(points[i])).collect(),
            None => (0..points.len()).collect(),
        };
        let mut out = FieldSamples {
            sigma: vec![0.0; points.len()],
            rgb: vec![[0.0; 3]; points.len()],
            labels: None,
        };
        let mut canonical = vec![None; points.len()];
        if keep.is_empty() {
            return Ok((out, canonical));
        }
        let tape = Tape::new();
        let g = self.model.graph(&tape, false);
        let kp: Vec<[f64; 3]> = keep.iter().map(|&i| points[i]).collect();
        let kd: Vec<[f64; 3]> = keep.iter().map(|&i| dirs[i]).collect();
        let xc = g.eulerian(points_var(&tape, &kp), times_var(&tape, &vec![time; kp.len()]))?.point;
        let c = g.canonical(xc, points_var(&tape, &kd));
        let (s, rgb, xcv) = (c.sigma.value(), c.rgb.value(), xc.value());
        for (r, &i) in keep.iter().enumerate() {
            out.sigma[i] = s.data()[r].to_f64().unwrap();
            let row = rgb.row(r);
            out.rgb[i] = [row[0], row[1], row[2]].map(|v| v.to_f64().unwrap());
            let p = xcv.row(r);
            canonical[i] = Some([p[0], p[1], p[2]].map(|v| v.to_f64().unwrap()));
        }
        Ok((out, canonical))
    }
}

impl<T: Real> SceneField for ModelField<'_, T> {
    fn eval(&self, points: &[[f64; 3]], dirs: &[[f64; 3]], time: f64) -> Result<FieldSamples> {
        Ok(self.eval_canonical(points, dirs, time)?.0)
    }
}

/// How images are ray-marched.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub aabb: Aabb,
    pub near: f64,
    pub far: f64,
    /// Samples along the box diagonal; sets the marching step.
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    /// Rays per field evaluation.
    pub chunk: usize,
}

impl RenderOptions {
    pub fn step(&self) -> f64 {
        self.aabb.diagonal() / self.samples_per_ray as f64
    }
}

/// A rendered frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub acc: Vec<f64>,
    pub depth: Vec<f64>,
    /// Label of the max-weight sample, or 0 where `acc < 0.5`; present when the field reports labels.
    pub labels: Option<Vec<u32>>,
}

/// Renders every pixel of `camera` at `time`.
pub fn render_image(field: &dyn SceneField, camera: &Camera, time: f64, opts: &RenderOptions) -> Result<RenderedImage> {
    let rays = generate_rays(camera, &camera.pixel_centers(), time, opts.near, opts.far)?;
    let chunks: Vec<Vec<(RenderOutput, Option<u32>)>> = rays
        .par_chunks(opts.chunk.max(1))
        .map(|chunk| render_chunk(field, chunk, opts))
        .collect::<Result<_>>()?;
    let n = rays.len();
    let mut img = RenderedImage {
        width: camera.width,
        height: camera.height,
        rgb: Vec::with_capacity(n),
        acc: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        labels: None,
    };
    let mut labels = Vec::with_capacity(n);
    let mut any_label = false;
    for (out, label) in chunks.into_iter().flatten() {
        img.rgb.push(out.color);
        img.acc.push(out.acc);
        img.depth.push(out.depth);
        any_label |= label.is_some();
        labels.push(label.unwrap_or(0));
    }
    if any_label {
        img.labels = Some(labels);
    }
    Ok(img)
}

/// Marches a batch of rays through `field` with deterministic bin-center samples.
pub fn render_chunk(field: &dyn SceneField, rays: &[Ray], opts: &RenderOptions) -> Result<Vec<(RenderOutput, Option<u32>)>> {
    let step = opts.step();
    let mut spans = Vec::with_capacity(rays.len());
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut samples = Vec::with_capacity(rays.len());
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    for ray in rays {
        let start = points.len();
        let clipped = ray.clip(&opts.aabb);
        if let Some(r) = &clipped {
            let s = sample_points(r, sample_count(r, step), false, &mut no_rng)?;
            for &h in &s.depths {
                points.push(r.at(h));
                dirs.push(r.dir);
            }
            samples.push(Some(s));
        } else {
            samples.push(None);
        }
        spans.push(start..points.len());
    }
    let time = rays.first().map_or(0.0, |r| r.time);
    let values = if points.is_empty() {
        FieldSamples::default()
    } else {
        field.eval(&points, &dirs, time)?
    };
    let mut out = Vec::with_capacity(rays.len());
    for ((ray, span), s) in rays.iter().zip(spans).zip(samples) {
        let Some(s) = s else {
            let empty = volume_render(&[], &[], &[], &[], ray.far, opts.background);
            let label = values.labels.as_ref().map(|_| 0);
            out.push((empty, label));
            continue;
        };
        let r = volume_render(
            &values.sigma[span.clone()],
            &values.rgb[span.clone()],
            &s.deltas,
            &s.depths,
            ray.clip(&opts.aabb).map_or(ray.far, |c| c.far),
            opts.background,
        );
        let label = values.labels.as_ref().map(|l| {
            if r.acc < 0.5 {
                0
            } else {
                let best = crate::autodiff::argmax(&r.weights);
                l[span.start + best]
            }
        });
        out.push((r, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, -1.0],
            near,
            far,
            pixel: [0.5, 0.5],
            time: 0.0,
        }
    }

    #[test]
    fn bin_centers_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_points(&ray(0.0, 3.0), 3, false, &mut rng).unwrap();
        assert_eq!(s.depths, vec![0.5, 1.5, 2.5]);
        assert!((s.deltas.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(sample_points(&ray(0.0, 1.0), 1, false, &mut rng).is_err());
    }

    #[test]
    fn empty_and_opaque_rays() {
        let bg = [1.0, 0.5, 0.25];
        let r = volume_render(&[0.0; 4], &[[0.3; 3]; 4], &[0.25; 4], &[0.1, 0.2, 0.3, 0.4], 1.0, bg);
        assert_eq!(r.color, bg);
        assert_eq!(r.acc, 0.0);
        let r = volume_render(&[1e4, 0.0], &[[0.2, 0.4, 0.6], [1.0; 3]], &[1.0, 1.0], &[0.5, 1.5], 2.0, bg);
        assert!((r.acc - 1.0).abs() < 1e-12);
        assert!((r.color[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn principal_ray_looks_down_minus_z() {
        let cam = Camera::new(4, 4, 2.0, Matrix4::identity()).unwrap();
        let rays = generate_rays(&cam, &[[2.0, 2.0]], 0.3, 0.1, 5.0).unwrap();
        assert_eq!(rays[0].origin, [0.0; 3]);
        assert_eq!(rays[0].dir, [0.0, 0.0, -1.0]);
        assert_eq!(rays[0].time, 0.3);
        assert!(Camera::new(4, 4, 0.0, Matrix4::identity()).is_err());
    }

    #[test]
    fn occupancy_dilation_grows_by_one_cell() {
        let mut g = OccupancyGrid {
            aabb: Aabb::cube(1.0),
            res: 5,
            cells: vec![false; 125],
        };
        g.cells[(2 * 5 + 2) * 5 + 2] = true;
        g.dilate(1);
        assert_eq!(g.cells.iter().filter(|&&c| c).count(), 27);
        assert!(g.occupied([0.0, 0.0, 0.0]));
        assert!(!g.occupied([0.9, 0.9, 0.9]));
        assert!(!g.occupied([2.0, 0.0, 0.0]));
    }
}
