//! Dense voxel feature grids: trilinear and multi-distance interpolation,
//! sinusoidal encoding, total variation and resampling.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{lit, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Axis-aligned box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::Config(format!("aabb min {min:?} not below max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Entry and exit distances of a ray, if it hits the box.
    pub fn intersect_ray(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Geometry of a feature grid: lattice resolution, channel count and world box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub res: [usize; 3],
    pub channels: usize,
    pub aabb: Aabb,
}

impl GridSpec {
    pub fn new(res: [usize; 3], channels: usize, aabb: Aabb) -> Result<Self> {
        if res.iter().any(|&n| n < 2) || channels == 0 {
            return Err(Error::Config(format!(
                "grid needs ≥2 nodes per axis and ≥1 channel, got {res:?}×{channels}"
            )));
        }
        Ok(Self { res, channels, aabb })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.res[0], self.res[1], self.res[2], self.channels]
    }

    pub fn len(&self) -> usize {
        self.res.iter().product::<usize>() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn node_offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.res[1] + j) * self.res[2] + k) * self.channels
    }

    /// World position of lattice node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let e = self.aabb.extent();
        let idx = [i, j, k];
        std::array::from_fn(|a| {
            self.aabb.min[a] + e[a] * idx[a] as f64 / (self.res[a] - 1) as f64
        })
    }
}

/// Strides of the sub-lattices used by multi-distance interpolation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiDistanceConfig {
    strides: Vec<usize>,
}

impl MultiDistanceConfig {
    pub fn new(strides: Vec<usize>) -> Result<Self> {
        if strides.first() != Some(&1) || strides.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "strides must be positive and start with 1, got {strides:?}"
            )));
        }
        Ok(Self { strides })
    }

    pub fn single() -> Self {
        Self { strides: vec![1] }
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }

    /// Every stride must be below the smallest grid resolution.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        let min_res = *spec.res.iter().min().unwrap();
        match self.strides.iter().find(|&&s| s >= min_res) {
            Some(s) => Err(Error::Config(format!(
                "stride {s} not below grid resolution {min_res}"
            ))),
            None => Ok(()),
        }
    }
}

impl Default for MultiDistanceConfig {
    fn default() -> Self {
        Self {
            strides: vec![1, 2, 4],
        }
    }
}

/// Corner offsets and trilinear weights of one query on one (sub-)lattice.
struct Stencil<T> {
    offsets: [usize; 8],
    weights: [T; 8],
    /// d(weight)/d(world coordinate), per corner and axis.
    dweights: [[T; 3]; 8],
}

fn stencil<T: Real>(spec: &GridSpec, stride: usize, p: [T; 3]) -> Stencil<T> {
    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let mut scale = [T::zero(); 3];
    for a in 0..3 {
        let n = spec.res[a];
        let sub_n = (n - 1) / stride + 1;
        let lo: T = lit(spec.aabb.min[a]);
        let ext: T = lit(spec.aabb.max[a] - spec.aabb.min[a]);
        let per_unit = lit::<T>((n - 1) as f64 / stride as f64) / ext;
        let u = (p[a] - lo) * per_unit;
        let top = lit::<T>((sub_n - 1) as f64);
        let (u, inside) = if u < T::zero() {
            (T::zero(), false)
        } else if u > top {
            (top, false)
        } else {
            (u, true)
        };
        let i0 = u.floor().to_usize().unwrap().min(sub_n - 2);
        base[a] = i0 * stride;
        frac[a] = u - lit(i0 as f64);
        scale[a] = if inside { per_unit } else { T::zero() };
    }
    let mut offsets = [0usize; 8];
    let mut weights = [T::zero(); 8];
    let mut dweights = [[T::zero(); 3]; 8];
    for corner in 0..8 {
        let bit = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let idx: [usize; 3] = std::array::from_fn(|a| base[a] + bit[a] * stride);
        offsets[corner] = spec.node_offset(idx[0], idx[1], idx[2]);
        let f: [T; 3] = std::array::from_fn(|a| {
            if bit[a] == 1 {
                frac[a]
            } else {
                T::one() - frac[a]
            }
        });
        let df: [T; 3] = std::array::from_fn(|a| {
            if bit[a] == 1 {
                scale[a]
            } else {
                -scale[a]
            }
        });
        weights[corner] = f[0] * f[1] * f[2];
        dweights[corner] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    }
    Stencil {
        offsets,
        weights,
        dweights,
    }
}

/// A feature grid with its values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid3D<T> {
    pub spec: GridSpec,
    pub values: Tensor<T>,
}

impl<T: Real> FeatureGrid3D<T> {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: Tensor::zeros(&spec.shape()),
        }
    }

    pub fn from_values(spec: GridSpec, values: Tensor<T>) -> Result<Self> {
        if values.shape() != spec.shape() {
            return Err(Error::Shape(format!(
                "grid values {:?} do not match {:?}",
                values.shape(),
                spec.shape()
            )));
        }
        Ok(Self { spec, values })
    }

    /// Fills every node from a function of its world position.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut([f64; 3], usize) -> T) -> Self {
        let mut data = Vec::with_capacity(spec.len());
        for i in 0..spec.res[0] {
            for j in 0..spec.res[1] {
                for k in 0..spec.res[2] {
                    let p = spec.node_position(i, j, k);
                    data.extend((0..spec.channels).map(|c| f(p, c)));
                }
            }
        }
        Self {
            spec,
            values: Tensor::from_parts(spec.shape().to_vec(), data),
        }
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> &[T] {
        let o = self.spec.node_offset(i, j, k);
        &self.values.data()[o..o + self.spec.channels]
    }

    /// Trilinear interpolation; positions outside the box clamp to its boundary.
    pub fn trilinear(&self, x: [T; 3]) -> Vec<T> {
        let mut out = vec![T::zero(); self.spec.channels];
        accumulate(&self.spec, self.values.data(), 1, x, &mut out);
        out
    }

    /// Trilinear interpolation on each strided sub-lattice, concatenated in stride order.
    pub fn multi_distance_interp(&self, x: [T; 3], cfg: &MultiDistanceConfig) -> Result<Vec<T>> {
        cfg.validate(&self.spec)?;
        let c = self.spec.channels;
        let mut out = vec![T::zero(); c * cfg.len()];
        for (s, &stride) in cfg.strides().iter().enumerate() {
            accumulate(&self.spec, self.values.data(), stride, x, &mut out[s * c..(s + 1) * c]);
        }
        Ok(out)
    }

    pub fn tv_loss(&self) -> T {
        tv_forward(&self.spec, self.values.data())
    }

    /// Resamples onto a finer lattice over the same box.
    pub fn upsample(&self, new_res: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| new_res[a] < self.spec.res[a]) {
            return Err(Error::Config(format!(
                "cannot shrink grid from {:?} to {new_res:?}",
                self.spec.res
            )));
        }
        let spec = GridSpec {
            res: new_res,
            ..self.spec
        };
        if new_res == self.spec.res {
            return Ok(Self {
                spec,
                values: self.values.clone(),
            });
        }
        Ok(Self::from_fn_vec(spec, |p| {
            self.trilinear([lit(p[0]), lit(p[1]), lit(p[2])])
        }))
    }

    fn from_fn_vec(spec: GridSpec, f: impl Fn([f64; 3]) -> Vec<T>) -> Self {
        let mut data = Vec::with_capacity(spec.len());
        for i in 0..spec.res[0] {
            for j in 0..spec.res[1] {
                for k in 0..spec.res[2] {
                    data.extend(f(spec.node_position(i, j, k)));
                }
            }
        }
        Self {
            spec,
            values: Tensor::from_parts(spec.shape().to_vec(), data),
        }
    }
}

fn accumulate<T: Real>(spec: &GridSpec, values: &[T], stride: usize, x: [T; 3], out: &mut [T]) {
    let st = stencil(spec, stride, x);
    let c = spec.channels;
    for corner in 0..8 {
        let w = st.weights[corner];
        if w == T::zero() {
            continue;
        }
        let node = &values[st.offsets[corner]..st.offsets[corner] + c];
        for (o, &v) in out.iter_mut().zip(node) {
            *o += w * v;
        }
    }
}

/// Differentiable multi-distance sampling of `grid` (shape of `spec`) at
/// `points` (N×3). Output is N×(C·|strides|); gradients reach both the grid
/// values and the query positions.
pub fn sample_grid<'t, T: Real>(
    grid: Var<'t, T>,
    points: Var<'t, T>,
    spec: GridSpec,
    cfg: &MultiDistanceConfig,
) -> Var<'t, T> {
    let strides = cfg.strides().to_vec();
    let g = grid.value();
    let p = points.value();
    assert_eq!(g.shape(), spec.shape(), "grid value shape");
    assert_eq!(p.cols(), 3, "points must be N×3");
    let n = p.rows();
    let c = spec.channels;
    let width = c * strides.len();
    let mut out = vec![T::zero(); n * width];
    for (i, row) in out.chunks_mut(width.max(1)).enumerate() {
        let q = p.row(i);
        let x = [q[0], q[1], q[2]];
        for (s, &stride) in strides.iter().enumerate() {
            accumulate(&spec, g.data(), stride, x, &mut row[s * c..(s + 1) * c]);
        }
    }
    let y = Tensor::from_parts(vec![n, width], out);
    grid.tape().custom(
        y,
        &[grid, points],
        Box::new(move |ctx| {
            let values = ctx.input(0).data();
            let pts = ctx.input(1);
            let gout = ctx.grad.data();
            let mut ggrid = ctx.needs[0].then(|| vec![T::zero(); values.len()]);
            let mut gpts = ctx.needs[1].then(|| vec![T::zero(); pts.len()]);
            for i in 0..n {
                let q = pts.row(i);
                let x = [q[0], q[1], q[2]];
                let grow = &gout[i * width..(i + 1) * width];
                for (s, &stride) in strides.iter().enumerate() {
                    let gs = &grow[s * c..(s + 1) * c];
                    let st = stencil(&spec, stride, x);
                    for corner in 0..8 {
                        let off = st.offsets[corner];
                        if let Some(gg) = ggrid.as_mut() {
                            let w = st.weights[corner];
                            if w != T::zero() {
                                for (d, &gv) in gg[off..off + c].iter_mut().zip(gs) {
                                    *d += w * gv;
                                }
                            }
                        }
                        if let Some(gp) = gpts.as_mut() {
                            let node = &values[off..off + c];
                            let dot: T = node.iter().zip(gs).map(|(&v, &gv)| v * gv).sum();
                            for a in 0..3 {
                                gp[i * 3 + a] += st.dweights[corner][a] * dot;
                            }
                        }
                    }
                }
            }
            vec![
                ggrid.map(|d| Tensor::from_parts(spec.shape().to_vec(), d)),
                gpts.map(|d| Tensor::from_parts(pts.shape().to_vec(), d)),
            ]
        }),
    )
}

/// Identity plus `sin/cos(2^k π v)` blocks for `k < n_freq`, laid out as
/// `[v, sin(2⁰πv), cos(2⁰πv), sin(2¹πv), …]` with each block `D` wide.
pub fn positional_encoding<T: Real>(v: &[T], n_freq: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len() * (1 + 2 * n_freq));
    out.extend_from_slice(v);
    for k in 0..n_freq {
        let f: T = lit((1u64 << k) as f64 * PI);
        out.extend(v.iter().map(|&x| (f * x).sin()));
        out.extend(v.iter().map(|&x| (f * x).cos()));
    }
    out
}

/// Row-wise [`positional_encoding`] of an N×D matrix.
pub fn encode<'t, T: Real>(v: Var<'t, T>, n_freq: usize) -> Var<'t, T> {
    let x = v.value();
    let n = x.rows();
    let d = x.cols();
    let width = d * (1 + 2 * n_freq);
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        out.extend(positional_encoding(x.row(i), n_freq));
    }
    let y = Tensor::from_parts(vec![n, width], out);
    v.tape().custom(
        y,
        &[v],
        Box::new(move |ctx| {
            let x = ctx.input(0);
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gx = Vec::with_capacity(x.len());
            for i in 0..n {
                let gr = &g[i * width..(i + 1) * width];
                let yr = &y[i * width..(i + 1) * width];
                for j in 0..d {
                    let mut acc = gr[j];
                    for k in 0..n_freq {
                        let f: T = lit((1u64 << k) as f64 * PI);
                        let sin_at = d * (1 + 2 * k) + j;
                        let cos_at = sin_at + d;
                        // d sin(fx) = f cos(fx), d cos(fx) = -f sin(fx)
                        acc += gr[sin_at] * f * yr[cos_at] - gr[cos_at] * f * yr[sin_at];
                    }
                    gx.push(acc);
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }),
    )
}

fn tv_axes(spec: &GridSpec) -> impl Iterator<Item = (usize, usize)> + '_ {
    // (axis, offset between neighbours along it)
    let strides = [
        spec.res[1] * spec.res[2] * spec.channels,
        spec.res[2] * spec.channels,
        spec.channels,
    ];
    (0..3)
        .filter(|&a| spec.res[a] > 1)
        .map(move |a| (a, strides[a]))
}

fn for_each_pair(spec: &GridSpec, axis: usize, mut f: impl FnMut(usize, usize)) {
    let step = [
        spec.res[1] * spec.res[2] * spec.channels,
        spec.res[2] * spec.channels,
        spec.channels,
    ][axis];
    for i in 0..spec.res[0] {
        for j in 0..spec.res[1] {
            for k in 0..spec.res[2] {
                let idx = [i, j, k];
                if idx[axis] + 1 >= spec.res[axis] {
                    continue;
                }
                let o = spec.node_offset(i, j, k);
                for ch in 0..spec.channels {
                    f(o + ch, o + ch + step);
                }
            }
        }
    }
}

fn pair_count(spec: &GridSpec, axis: usize) -> usize {
    let mut r = spec.res;
    r[axis] -= 1;
    r.iter().product::<usize>() * spec.channels
}

fn tv_forward<T: Real>(spec: &GridSpec, v: &[T]) -> T {
    let axes: Vec<_> = tv_axes(spec).collect();
    if axes.is_empty() {
        return T::zero();
    }
    let mut total = T::zero();
    for &(a, _) in &axes {
        let mut s = T::zero();
        for_each_pair(spec, a, |i, j| {
            let d = v[j] - v[i];
            s += d * d;
        });
        total += s / lit(pair_count(spec, a) as f64);
    }
    total / lit(axes.len() as f64)
}

/// Mean over axes (and channels, and adjacent pairs) of squared neighbour differences.
pub fn tv_loss<'t, T: Real>(grid: Var<'t, T>, spec: GridSpec) -> Var<'t, T> {
    let y = Tensor::scalar(tv_forward(&spec, grid.value().data()));
    grid.tape().custom(
        y,
        &[grid],
        Box::new(move |ctx| {
            let v = ctx.input(0).data();
            let g = ctx.grad.item();
            let axes: Vec<_> = tv_axes(&spec).collect();
            let mut out = vec![T::zero(); v.len()];
            for &(a, _) in &axes {
                let scale = lit::<T>(2.0) * g
                    / (lit::<T>(pair_count(&spec, a) as f64) * lit(axes.len() as f64));
                for_each_pair(&spec, a, |i, j| {
                    let d = (v[j] - v[i]) * scale;
                    out[j] += d;
                    out[i] -= d;
                });
            }
            vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), out))]
        }),
    )
}
