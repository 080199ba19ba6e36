//! Hard motion grouping: slot attention with Gumbel noise, a straight-through
//! one-hot assignment, and per-group feature averaging.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{argmax, concat_cols, lit, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Soft similarity, hard assignment and group id of every point.
pub struct GroupAssignment<'t, T> {
    /// N×L softmax over slots; rows sum to one.
    pub soft: Var<'t, T>,
    /// N×L one-hot rows whose backward pass behaves as `soft`.
    pub hard: Var<'t, T>,
    pub ids: Vec<usize>,
}

/// Learnable pieces of the grouping network, bound to a tape.
#[derive(Clone, Copy)]
pub struct GroupingParams<'t, T> {
    /// L×D slot vectors.
    pub slots: Var<'t, T>,
    /// (C + 3)×K query projection.
    pub w_query: Var<'t, T>,
    /// D×K key projection.
    pub w_key: Var<'t, T>,
}

/// Assigns every point to one slot.
///
/// The similarity logits are `W_q (f_L ⊕ x_c) · W_k S_l`, perturbed by
/// independent Gumbel(0, 1) samples when `rng` is given and divided by
/// `temperature` before the row softmax.
pub fn group_assign<'t, T: Real, R: Rng>(
    points: Var<'t, T>,
    features: Var<'t, T>,
    params: GroupingParams<'t, T>,
    rng: Option<&mut R>,
    temperature: f64,
) -> Result<GroupAssignment<'t, T>> {
    let slots = params.slots.value();
    let l = slots.rows();
    if l == 0 || slots.is_empty() {
        return Err(Error::Config("grouping needs at least one slot".into()));
    }
    let n = points.value().rows();
    if features.value().rows() != n {
        return Err(Error::Shape(format!(
            "{} points but {} features",
            n,
            features.value().rows()
        )));
    }
    let fused = concat_cols(&[features, points]);
    let q = fused.matmul(params.w_query);
    let k = params.slots.matmul(params.w_key);
    let mut logits = q.matmul(k.transpose());
    if let Some(rng) = rng {
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let noise: Vec<T> = (0..n * l).map(|_| lit(gumbel.sample(rng))).collect();
        let noise = logits.tape().constant(Tensor::from_parts(vec![n, l], noise));
        logits = logits.add(noise);
    }
    let soft = logits.scale(lit(1.0 / temperature)).softmax_rows();
    let hard = soft.straight_through_onehot();
    let a = soft.value();
    let ids = (0..n).map(|i| argmax(a.row(i))).collect();
    Ok(GroupAssignment { soft, hard, ids })
}

/// Replaces every feature with the mean feature of its hard group.
///
/// Computed as `Â · diag(1/|g|) · Âᵀ F`, so gradients reach both the features
/// and, through the straight-through estimator, the soft assignment.
pub fn group_average<'t, T: Real>(features: Var<'t, T>, hard: Var<'t, T>) -> Var<'t, T> {
    let (means, _) = group_means(features, hard);
    hard.matmul(means)
}

/// Per-slot mean features (L×C; zero rows for empty slots) and member counts.
pub fn group_means<'t, T: Real>(features: Var<'t, T>, hard: Var<'t, T>) -> (Var<'t, T>, Vec<usize>) {
    let counts = hard.sum_rows_per_col();
    let sums = hard.transpose().matmul(features);
    let means = sums.mul_col(counts.recip_or_zero());
    let c = counts
        .value()
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap().round() as usize)
        .collect();
    (means, c)
}
