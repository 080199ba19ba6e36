//! Rigid motion: the continuous 6D rotation parameterization, the Eulerian
//! and Lagrangian coordinate maps, pose sequences and the absolute pose error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::autodiff::{lit, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Norm below which a 6D input counts as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-8;

/// Two unconstrained 3-vectors: the first two columns of a rotation before orthonormalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D {
    pub a1: [f64; 3],
    pub a2: [f64; 3],
}

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D {
        a1: [1.0, 0.0, 0.0],
        a2: [0.0, 1.0, 0.0],
    };

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            a1: [v[0], v[1], v[2]],
            a2: [v[3], v[4], v[5]],
        }
    }
}

/// Gram–Schmidt on the two columns; the third column is their cross product.
pub fn sixd_to_rotation(r: Rot6D) -> Result<Matrix3<f64>> {
    let cols = gram_schmidt::<f64>(&[r.a1[0], r.a1[1], r.a1[2], r.a2[0], r.a2[1], r.a2[2]])?;
    Ok(Matrix3::from_fn(|i, j| cols.b[j][i]))
}

struct Frame<T> {
    /// Columns b1, b2, b3.
    b: [[T; 3]; 3],
    n1: T,
    n2: T,
    /// b1 · a2
    s: T,
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn gram_schmidt<T: Real>(v: &[T]) -> Result<Frame<T>> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let eps: T = lit(DEGENERACY_EPS);
    let n1 = dot(a1, a1).sqrt();
    if !(n1 >= eps) {
        return Err(Error::DegenerateRotation(format!("|a1| = {n1}")));
    }
    let b1 = a1.map(|x| x / n1);
    let s = dot(b1, a2);
    let u: [T; 3] = std::array::from_fn(|i| a2[i] - s * b1[i]);
    let n2 = dot(u, u).sqrt();
    if !(n2 >= eps) {
        return Err(Error::DegenerateRotation(format!(
            "a2 is parallel to a1 (residual {n2})"
        )));
    }
    let b2 = u.map(|x| x / n2);
    let b3 = cross(b1, b2);
    Ok(Frame {
        b: [b1, b2, b3],
        n1,
        n2,
        s,
    })
}

/// Batched 6D → rotation on an N×6 input. Output rows hold `R` row-major (N×9).
pub fn sixd_to_rotation_batch<'t, T: Real>(a: Var<'t, T>) -> Result<Var<'t, T>> {
    let x = a.value();
    if x.cols() != 6 {
        return Err(Error::Shape(format!("6D input must be N×6, got {:?}", x.shape())));
    }
    let n = x.rows();
    let mut out = Vec::with_capacity(n * 9);
    for i in 0..n {
        let f = gram_schmidt(x.row(i))?;
        for r in 0..3 {
            for c in 0..3 {
                out.push(f.b[c][r]);
            }
        }
    }
    let y = Tensor::from_parts(vec![n, 9], out);
    Ok(a.tape().custom(
        y,
        &[a],
        Box::new(move |ctx| {
            let x = ctx.input(0);
            let g = ctx.grad.data();
            let mut gx = Vec::with_capacity(x.len());
            for i in 0..n {
                let f = gram_schmidt(x.row(i)).expect("validated in forward");
                let gr = &g[i * 9..(i + 1) * 9];
                // column c of R is b_c; R[r][c] sits at r*3 + c
                let gcol = |c: usize| [gr[c], gr[3 + c], gr[6 + c]];
                let [b1, b2, _] = f.b;
                let (g1, g2, g3) = (gcol(0), gcol(1), gcol(2));
                // b3 = b1 × b2
                let x23 = cross(b2, g3);
                let x31 = cross(g3, b1);
                let mut gb1: [T; 3] = std::array::from_fn(|k| g1[k] + x23[k]);
                let gb2: [T; 3] = std::array::from_fn(|k| g2[k] + x31[k]);
                // b2 = u / n2
                let p = dot(b2, gb2);
                let gu: [T; 3] = std::array::from_fn(|k| (gb2[k] - b2[k] * p) / f.n2);
                // u = a2 - (b1·a2) b1
                let gub1 = dot(gu, b1);
                let a2 = [x.row(i)[3], x.row(i)[4], x.row(i)[5]];
                let ga2: [T; 3] = std::array::from_fn(|k| gu[k] - gub1 * b1[k]);
                for k in 0..3 {
                    gb1[k] -= gub1 * a2[k] + f.s * gu[k];
                }
                // b1 = a1 / n1
                let q = dot(b1, gb1);
                let ga1: [T; 3] = std::array::from_fn(|k| (gb1[k] - b1[k] * q) / f.n1);
                gx.extend_from_slice(&ga1);
                gx.extend_from_slice(&ga2);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }),
    ))
}

/// Per-row `R (x − t)` with `R` N×9 row-major, `t` and `x` N×3.
pub fn eulerian_map_batch<'t, T: Real>(
    rot: Var<'t, T>,
    trans: Var<'t, T>,
    x: Var<'t, T>,
) -> Var<'t, T> {
    let r = rot.value();
    let t = trans.value();
    let p = x.value();
    let n = p.rows();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (rr, tt, pp) = (r.row(i), t.row(i), p.row(i));
        let d = [pp[0] - tt[0], pp[1] - tt[1], pp[2] - tt[2]];
        for a in 0..3 {
            out.push(rr[a * 3] * d[0] + rr[a * 3 + 1] * d[1] + rr[a * 3 + 2] * d[2]);
        }
    }
    let y = Tensor::from_parts(vec![n, 3], out);
    rot.tape().custom(
        y,
        &[rot, trans, x],
        Box::new(move |ctx| {
            let (r, t, p) = (ctx.input(0), ctx.input(1), ctx.input(2));
            let g = ctx.grad.data();
            let mut gr = Vec::with_capacity(n * 9);
            let mut gd = Vec::with_capacity(n * 3);
            for i in 0..n {
                let (rr, tt, pp) = (r.row(i), t.row(i), p.row(i));
                let d = [pp[0] - tt[0], pp[1] - tt[1], pp[2] - tt[2]];
                let gi = &g[i * 3..i * 3 + 3];
                for a in 0..3 {
                    for b in 0..3 {
                        gr.push(gi[a] * d[b]);
                    }
                }
                for b in 0..3 {
                    gd.push(rr[b] * gi[0] + rr[3 + b] * gi[1] + rr[6 + b] * gi[2]);
                }
            }
            let gt = ctx.needs[1].then(|| Tensor::from_parts(vec![n, 3], gd.iter().map(|&v| -v).collect()));
            vec![
                Some(Tensor::from_parts(vec![n, 9], gr)),
                gt,
                Some(Tensor::from_parts(vec![n, 3], gd)),
            ]
        }),
    )
}

/// Per-row `Rᵀ x_c + t`, the exact inverse of [`eulerian_map_batch`] for the same `(R, t)`.
pub fn lagrangian_map_batch<'t, T: Real>(
    rot: Var<'t, T>,
    trans: Var<'t, T>,
    xc: Var<'t, T>,
) -> Var<'t, T> {
    let r = rot.value();
    let t = trans.value();
    let p = xc.value();
    let n = p.rows();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (rr, tt, pp) = (r.row(i), t.row(i), p.row(i));
        for a in 0..3 {
            out.push(rr[a] * pp[0] + rr[3 + a] * pp[1] + rr[6 + a] * pp[2] + tt[a]);
        }
    }
    let y = Tensor::from_parts(vec![n, 3], out);
    rot.tape().custom(
        y,
        &[rot, trans, xc],
        Box::new(move |ctx| {
            let (r, p) = (ctx.input(0), ctx.input(2));
            let g = ctx.grad.data();
            let mut gr = Vec::with_capacity(n * 9);
            let mut gp = Vec::with_capacity(n * 3);
            for i in 0..n {
                let (rr, pp) = (r.row(i), p.row(i));
                let gi = &g[i * 3..i * 3 + 3];
                // out_a = Σ_b R[b][a] p_b
                for b in 0..3 {
                    for a in 0..3 {
                        gr.push(gi[a] * pp[b]);
                    }
                }
                for b in 0..3 {
                    gp.push(rr[b * 3] * gi[0] + rr[b * 3 + 1] * gi[1] + rr[b * 3 + 2] * gi[2]);
                }
            }
            vec![
                Some(Tensor::from_parts(vec![n, 9], gr)),
                Some(ctx.grad.clone()),
                Some(Tensor::from_parts(vec![n, 3], gp)),
            ]
        }),
    )
}

/// A rotation and a translation in scene units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransformSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransformSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_row_major(r: &[f64], t: &[f64]) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(&r[..9]),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    /// World point at time t to its canonical position: `R (x − t)`.
    pub fn eulerian_map(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.translation)
    }

    /// Canonical point to its world position: `Rᵀ x_c + t`.
    pub fn lagrangian_map(&self, xc: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * xc + self.translation
    }

    /// Homogeneous canonical-to-world matrix `[Rᵀ | t]`.
    pub fn to_pose(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.transpose());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation;
        (r.transpose() * r - Matrix3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

/// Inverse of a homogeneous rigid transform.
pub fn rigid_inverse(p: &Matrix4<f64>) -> Matrix4<f64> {
    let r = p.fixed_view::<3, 3>(0, 0).transpose();
    let t = p.fixed_view::<3, 1>(0, 3);
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r * t)));
    out
}

/// Time-stamped homogeneous poses of one rigid group.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub times: Vec<f64>,
    pub poses: Vec<Matrix4<f64>>,
}

impl PoseSequence {
    pub fn new(times: Vec<f64>, poses: Vec<Matrix4<f64>>) -> Result<Self> {
        if times.len() != poses.len() {
            return Err(Error::Shape(format!(
                "{} times but {} poses",
                times.len(),
                poses.len()
            )));
        }
        Ok(Self { times, poses })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// One row per pose: `t r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# t r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
        for (t, p) in self.times.iter().zip(&self.poses) {
            write!(s, "{t:.17e}").unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    write!(s, " {:.17e}", p[(i, j)]).unwrap();
                }
            }
            for i in 0..3 {
                write!(s, " {:.17e}", p[(i, 3)]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_table(text: &str) -> std::result::Result<Self, String> {
        let mut times = Vec::new();
        let mut poses = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", ln + 1))?;
            if v.len() != 13 {
                return Err(format!("line {}: expected 13 columns, got {}", ln + 1, v.len()));
            }
            let mut p = Matrix4::identity();
            for i in 0..3 {
                for j in 0..3 {
                    p[(i, j)] = v[1 + i * 3 + j];
                }
                p[(i, 3)] = v[10 + i];
            }
            times.push(v[0]);
            poses.push(p);
        }
        Ok(Self { times, poses })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_table(&text).map_err(|m| Error::format(path, m))
    }
}

/// `Σ_t ‖(P_i^t)⁻¹ P_j^t − I‖_F`.
pub fn ape(seq_i: &PoseSequence, seq_j: &PoseSequence) -> Result<f64> {
    if seq_i.times != seq_j.times {
        return Err(Error::TimestampMismatch);
    }
    Ok(seq_i
        .poses
        .iter()
        .zip(&seq_j.poses)
        .map(|(pi, pj)| (rigid_inverse(pi) * pj - Matrix4::identity()).norm())
        .sum())
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    if axis.norm() < 1e-12 || angle == 0.0 {
        return Matrix3::identity();
    }
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}
