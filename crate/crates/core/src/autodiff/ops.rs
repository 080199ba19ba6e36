//! Generic array operations with their backward rules.

use std::sync::Arc;

use super::tape::{GradCtx, Var};
use super::tensor::{lit, Real, Tensor};

fn elementwise<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    a.map(f)
}

/// Row-major `a (n×k) · b (k×m)`.
pub fn matmul_raw<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    T::gemm(
        n, k, m, a, k as isize, 1, b, m as isize, 1, T::zero(), &mut out, m as isize, 1,
    );
    out
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = elementwise(&x, f);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx: &GradCtx<'_, T>| {
                let x = ctx.input(0).data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| T::one() / (T::one() + (-x).exp()))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sin(self) -> Var<'t, T> {
        self.unary(|x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t, T> {
        self.unary(|x| x.cos(), |x, _| -x.sin())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    /// `1/x`, with zero output and zero gradient where `x == 0`.
    pub fn recip_or_zero(self) -> Var<'t, T> {
        self.unary(
            |x| if x == T::zero() { T::zero() } else { T::one() / x },
            |x, _| if x == T::zero() { T::zero() } else { -T::one() / (x * x) },
        )
    }

    fn binary_same_shape(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise operands differ in shape");
        let y = a.zip_map(&b, f);
        self.tape.custom(
            y,
            &[self, other],
            Box::new(move |ctx: &GradCtx<'_, T>| {
                let a = ctx.input(0).data();
                let b = ctx.input(1).data();
                let g = ctx.grad.data();
                let shape = ctx.grad.shape().to_vec();
                let ga = ctx.needs[0].then(|| {
                    Tensor::from_parts(
                        shape.clone(),
                        (0..g.len()).map(|i| da(g[i], a[i], b[i])).collect(),
                    )
                });
                let gb = ctx.needs[1].then(|| {
                    Tensor::from_parts(
                        shape.clone(),
                        (0..g.len()).map(|i| db(g[i], a[i], b[i])).collect(),
                    )
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_same_shape(other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_same_shape(other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_same_shape(other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(self, bias: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = bias.value();
        let m = a.cols();
        assert_eq!(b.len(), m, "bias length must match column count");
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let y = Tensor::from_parts(a.shape().to_vec(), out);
        self.tape.custom(
            y,
            &[self, bias],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let m = g.cols();
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); m];
                    for row in g.data().chunks(m.max(1)) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(ctx.input(1).shape().to_vec(), acc)
                });
                vec![ctx.needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    /// Multiplies row `i` of an `n×m` matrix by element `i` of a length-`n` vector.
    pub fn mul_col(self, col: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let c = col.value();
        let n = a.rows();
        let m = a.cols();
        assert_eq!(c.len(), n, "column scale length must match row count");
        let mut out = a.data().to_vec();
        for (row, &s) in out.chunks_mut(m.max(1)).zip(c.data()) {
            for o in row {
                *o *= s;
            }
        }
        let y = Tensor::from_parts(a.shape().to_vec(), out);
        self.tape.custom(
            y,
            &[self, col],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let a = ctx.input(0);
                let c = ctx.input(1);
                let m = a.cols().max(1);
                let ga = ctx.needs[0].then(|| {
                    let mut out = g.data().to_vec();
                    for (row, &s) in out.chunks_mut(m).zip(c.data()) {
                        for o in row {
                            *o *= s;
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), out)
                });
                let gc = ctx.needs[1].then(|| {
                    let data = g
                        .data()
                        .chunks(m)
                        .zip(a.data().chunks(m))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    Tensor::from_parts(c.shape().to_vec(), data)
                });
                vec![ga, gc]
            }),
        )
    }

    /// Matrix product of `n×k` and `k×m` operands.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let (k2, m) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let y = Tensor::from_parts(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m));
        self.tape.custom(
            y,
            &[self, other],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let a = ctx.input(0).data();
                let b = ctx.input(1).data();
                let ga = ctx.needs[0].then(|| {
                    // g (n×m) · bᵀ (m×k)
                    let mut out = vec![T::zero(); n * k];
                    T::gemm(
                        n, m, k, g, m as isize, 1, b, 1, m as isize, T::zero(), &mut out,
                        k as isize, 1,
                    );
                    Tensor::from_parts(vec![n, k], out)
                });
                let gb = ctx.needs[1].then(|| {
                    // aᵀ (k×n) · g (n×m)
                    let mut out = vec![T::zero(); k * m];
                    T::gemm(
                        k, n, m, a, 1, k as isize, g, m as isize, 1, T::zero(), &mut out,
                        m as isize, 1,
                    );
                    Tensor::from_parts(vec![k, m], out)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(self) -> Var<'t, T> {
        let a = self.value();
        let (n, m) = (a.rows(), a.cols());
        let y = Tensor::from_parts(vec![m, n], transpose_raw(a.data(), n, m));
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                vec![Some(Tensor::from_parts(
                    ctx.input(0).shape().to_vec(),
                    transpose_raw(ctx.grad.data(), m, n),
                ))]
            }),
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t, T> {
        let a = self.value();
        let y = (*a).clone().reshape(shape).expect("reshape preserves size");
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                vec![Some(Tensor::from_parts(
                    ctx.input(0).shape().to_vec(),
                    ctx.grad.data().to_vec(),
                ))]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t, T> {
        let y = Tensor::scalar(self.value().sum());
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                vec![Some(Tensor::full(ctx.input(0).shape(), ctx.grad.item()))]
            }),
        )
    }

    /// Mean of all elements; zero for an empty operand.
    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        if n == 0 {
            return self.sum();
        }
        self.sum().scale(T::one() / lit::<T>(n as f64))
    }

    /// Row sums of an `n×m` matrix, giving a length-`n` vector.
    pub fn sum_cols_per_row(self) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols().max(1);
        let data: Vec<T> = a.data().chunks(m).map(|r| r.iter().copied().sum()).collect();
        let y = Tensor::vector(data);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let a = ctx.input(0);
                let m = a.cols().max(1);
                let mut out = Vec::with_capacity(a.len());
                for &g in ctx.grad.data() {
                    out.extend(std::iter::repeat(g).take(m));
                }
                out.truncate(a.len());
                vec![Some(Tensor::from_parts(a.shape().to_vec(), out))]
            }),
        )
    }

    /// Column sums of an `n×m` matrix, giving a length-`m` vector.
    pub fn sum_rows_per_col(self) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols();
        let mut acc = vec![T::zero(); m];
        for row in a.data().chunks(m.max(1)) {
            for (s, &v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
        let y = Tensor::vector(acc);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let a = ctx.input(0);
                let g = ctx.grad.data();
                let mut out = Vec::with_capacity(a.len());
                for _ in 0..a.rows() {
                    out.extend_from_slice(g);
                }
                vec![Some(Tensor::from_parts(a.shape().to_vec(), out))]
            }),
        )
    }

    /// Selects rows by index; repeated indices accumulate in the backward pass.
    pub fn gather_rows(self, index: Arc<Vec<usize>>) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index.iter() {
            out.extend_from_slice(a.row(i));
        }
        let mut shape = a.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = index.len();
        let y = Tensor::from_parts(shape, out);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let a = ctx.input(0);
                let m = a.cols();
                let mut out = vec![T::zero(); a.len()];
                for (r, &i) in index.iter().enumerate() {
                    let src = &ctx.grad.data()[r * m..(r + 1) * m];
                    for (o, &g) in out[i * m..(i + 1) * m].iter_mut().zip(src) {
                        *o += g;
                    }
                }
                vec![Some(Tensor::from_parts(a.shape().to_vec(), out))]
            }),
        )
    }

    /// Columns `start..start + len` of an `n×m` matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t, T> {
        let a = self.value();
        let n = a.rows();
        let m = a.cols();
        assert!(start + len <= m, "column slice out of range");
        let mut out = Vec::with_capacity(n * len);
        for row in a.data().chunks(m.max(1)) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let y = Tensor::from_parts(vec![n, len], out);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let a = ctx.input(0);
                let m = a.cols();
                let mut out = vec![T::zero(); a.len()];
                for (r, gr) in ctx.grad.data().chunks(len.max(1)).enumerate().take(n) {
                    out[r * m + start..r * m + start + len].copy_from_slice(&gr[..len]);
                }
                vec![Some(Tensor::from_parts(a.shape().to_vec(), out))]
            }),
        )
    }

    /// Row-wise softmax of an `n×m` matrix.
    pub fn softmax_rows(self) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols().max(1);
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Tensor::from_parts(a.shape().to_vec(), out);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let m = ctx.output.cols().max(1);
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), out))]
            }),
        )
    }

    /// Forward: one-hot of each row's argmax (ties to the lowest index).
    /// Backward: the identity, as if the output were the input.
    pub fn straight_through_onehot(self) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols().max(1);
        let mut out = vec![T::zero(); a.len()];
        for (o, row) in out.chunks_mut(m).zip(a.data().chunks(m)) {
            o[argmax(row)] = T::one();
        }
        let y = Tensor::from_parts(a.shape().to_vec(), out);
        self.tape
            .custom(y, &[self], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Sums rows of a `p×m` matrix over contiguous segments `offsets[r]..offsets[r + 1]`.
    pub fn segment_sum(self, offsets: Arc<Vec<usize>>) -> Var<'t, T> {
        let a = self.value();
        let m = a.cols();
        let r = offsets.len() - 1;
        let mut out = vec![T::zero(); r * m];
        for s in 0..r {
            let dst = &mut out[s * m..(s + 1) * m];
            for i in offsets[s]..offsets[s + 1] {
                for (d, &v) in dst.iter_mut().zip(a.row(i)) {
                    *d += v;
                }
            }
        }
        let shape = if a.shape().len() <= 1 {
            vec![r]
        } else {
            vec![r, m]
        };
        let y = Tensor::from_parts(shape, out);
        self.tape.custom(
            y,
            &[self],
            Box::new(move |ctx| {
                let a = ctx.input(0);
                let m = a.cols();
                let g = ctx.grad.data();
                let mut out = vec![T::zero(); a.len()];
                for s in 0..offsets.len() - 1 {
                    let gs = &g[s * m..(s + 1) * m];
                    for i in offsets[s]..offsets[s + 1] {
                        out[i * m..(i + 1) * m].copy_from_slice(gs);
                    }
                }
                vec![Some(Tensor::from_parts(a.shape().to_vec(), out))]
            }),
        )
    }
}

/// Concatenates 2-D operands with equal row counts along columns.
pub fn concat_cols<'t, T: Real>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].rows();
    let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    for v in &values {
        assert_eq!(v.rows(), n, "concat operands differ in row count");
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for r in 0..n {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let y = Tensor::from_parts(vec![n, total], out);
    let tape = parts[0].tape;
    tape.custom(
        y,
        parts,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (k, &w) in widths.iter().enumerate() {
                if ctx.needs[k] {
                    let mut out = Vec::with_capacity(n * w);
                    for r in 0..n {
                        out.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(Tensor::from_parts(
                        ctx.input(k).shape().to_vec(),
                        out,
                    )));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }),
    )
}

pub fn transpose_raw<T: Copy>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for j in 0..m {
        for i in 0..n {
            out.push(a[i * m + j]);
        }
    }
    out
}

/// Index of the first maximum.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
