//! Finite-difference cases for every differentiable op. Each case draws one
//! random instance and returns the comparison report.

use std::sync::Arc;

use movingparts::autodiff::{concat_cols, Tape, Tensor, Var};
use movingparts::fields::{encode, sample_grid, tv_loss, Aabb, GridSpec, MultiDistanceConfig};
use movingparts::model::grouping::{group_assign, group_average, GroupingParams};
use movingparts::render::{
    composite, cycle_loss, entropy_loss, per_point_loss, photometric_loss, ray_weights,
};
use movingparts::rigid::{eulerian_map_batch, lagrangian_map_batch, sixd_to_rotation_batch};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, project, random_tensor, GradReport};

pub const INSTANCES: usize = 100;

pub type Case = fn(&mut ChaCha8Rng) -> GradReport;

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("elementwise", elementwise),
        ("linear_layers", linear_layers),
        ("softmax_rows", softmax_rows),
        ("structural", structural),
        ("segment_sum", segment_sum),
        ("trilinear", trilinear),
        ("multi_distance", multi_distance),
        ("positional_encoding", positional_encoding),
        ("tv_loss", tv),
        ("sixd_to_rotation", sixd),
        ("eulerian_map", eulerian_map),
        ("lagrangian_map", lagrangian_map),
        ("ray_weights", weights),
        ("composite", composite_case),
        ("photometric_loss", photometric),
        ("per_point_loss", per_point),
        ("entropy_loss", entropy),
        ("cycle_loss", cycle),
        ("group_assign_soft", assign_soft),
        ("group_average", average),
    ]
}

/// Runs `case` on [`INSTANCES`] seeds and returns the worst report.
pub fn run(case: Case, seed: u64) -> GradReport {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = GradReport {
        rel_error: 0.0,
        max_component: 0.0,
    };
    for _ in 0..INSTANCES {
        let r = case(&mut rng);
        worst.rel_error = worst.rel_error.max(r.rel_error);
        worst.max_component = worst.max_component.max(r.max_component);
    }
    worst
}

fn weights_for(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    random_tensor(rng, &[n], -1.0, 1.0)
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn elementwise(rng: &mut ChaCha8Rng) -> GradReport {
    let x = away_from_zero(rng, &[4, 3]);
    let pos = random_tensor(rng, &[4, 3], 0.2, 2.0);
    let w = weights_for(rng, 12);
    check_gradients(
        move |_, v| {
            let (x, p) = (v[0], v[1]);
            let a = x.relu().add(x.sigmoid()).add(x.softplus()).add(x.exp().scale(0.1));
            let b = p.ln().add(x.sin()).add(x.cos()).add(x.square()).add(x.neg().add_scalar(0.5));
            let c = x.clamp(-0.8, 0.8).add(p.recip_or_zero()).sub(x.mul(p));
            project(a.add(b).add(c), &w)
        },
        &[x, pos],
        &[true, true],
    )
}

fn linear_layers(rng: &mut ChaCha8Rng) -> GradReport {
    let x = random_tensor(rng, &[5, 4], -1.0, 1.0);
    let w1 = random_tensor(rng, &[4, 6], -1.0, 1.0);
    let b1 = random_tensor(rng, &[6], -1.0, 1.0);
    let w2 = random_tensor(rng, &[6, 2], -1.0, 1.0);
    let col = random_tensor(rng, &[5], -1.0, 1.0);
    let w = weights_for(rng, 10);
    check_gradients(
        move |_, v| {
            let h = v[0].matmul(v[1]).add_row(v[2]).softplus();
            project(h.matmul(v[3]).mul_col(v[4]), &w)
        },
        &[x, w1, b1, w2, col],
        &[true; 5],
    )
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> GradReport {
    let x = random_tensor(rng, &[4, 5], -2.0, 2.0);
    let w = weights_for(rng, 20);
    check_gradients(move |_, v| project(v[0].softmax_rows(), &w), &[x], &[true])
}

fn structural(rng: &mut ChaCha8Rng) -> GradReport {
    let a = random_tensor(rng, &[4, 3], -1.0, 1.0);
    let b = random_tensor(rng, &[4, 2], -1.0, 1.0);
    let index = Arc::new((0..6).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>());
    let w = weights_for(rng, 40);
    check_gradients(
        move |_, v| {
            let cat = concat_cols(&[v[0], v[1]]);
            let g = cat.gather_rows(index.clone()).slice_cols(1, 3);
            let t = cat.transpose().reshape(vec![4, 5]);
            let s = cat.sum_cols_per_row().add(cat.slice_cols(0, 1).reshape(vec![4]));
            let r = cat.sum_rows_per_col();
            project(g, &w)
                .add(project(t, &w))
                .add(project(s, &w))
                .add(project(r, &w))
                .add(cat.mean())
        },
        &[a, b],
        &[true, true],
    )
}

fn random_offsets(rng: &mut ChaCha8Rng, rays: usize, max: usize) -> Arc<Vec<usize>> {
    let mut offsets = vec![0];
    for _ in 0..rays {
        let last = *offsets.last().unwrap();
        offsets.push(last + rng.gen_range(1..=max));
    }
    Arc::new(offsets)
}

fn segment_sum(rng: &mut ChaCha8Rng) -> GradReport {
    let offsets = random_offsets(rng, 3, 5);
    let p = *offsets.last().unwrap();
    let x = random_tensor(rng, &[p, 2], -1.0, 1.0);
    let w = weights_for(rng, 6);
    check_gradients(move |_, v| project(v[0].segment_sum(offsets.clone()), &w), &[x], &[true])
}

/// Lattice with 8 cells per axis, so sub-lattices of stride 1, 2 and 4 share node planes.
fn lattice(channels: usize) -> GridSpec {
    GridSpec::new([9, 9, 9], channels, Aabb::cube(1.0)).unwrap()
}

/// Points whose fractional cell coordinates stay in [0.05, 0.95].
fn interior_points(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let h = 2.0 / 8.0;
    let data = (0..n * 3)
        .map(|_| -1.0 + h * (rng.gen_range(0..8) as f64 + rng.gen_range(0.05..0.95)))
        .collect();
    Tensor::new(vec![n, 3], data).unwrap()
}

fn grid_case(rng: &mut ChaCha8Rng, strides: Vec<usize>) -> GradReport {
    let spec = lattice(2);
    let cfg = MultiDistanceConfig::new(strides).unwrap();
    let grid = random_tensor(rng, &spec.shape(), -1.0, 1.0);
    let pts = interior_points(rng, 4);
    let w = weights_for(rng, 4 * 2 * cfg.len());
    check_gradients(
        move |_, v| project(sample_grid(v[0], v[1], spec, &cfg), &w),
        &[grid, pts],
        &[true, true],
    )
}

fn trilinear(rng: &mut ChaCha8Rng) -> GradReport {
    grid_case(rng, vec![1])
}

fn multi_distance(rng: &mut ChaCha8Rng) -> GradReport {
    grid_case(rng, vec![1, 2, 4])
}

fn positional_encoding(rng: &mut ChaCha8Rng) -> GradReport {
    let x = random_tensor(rng, &[3, 2], -1.0, 1.0);
    let w = weights_for(rng, 3 * 2 * 9);
    check_gradients(move |_, v| project(encode(v[0], 4), &w), &[x], &[true])
}

fn tv(rng: &mut ChaCha8Rng) -> GradReport {
    let spec = GridSpec::new([3, 4, 3], 2, Aabb::cube(1.0)).unwrap();
    let grid = random_tensor(rng, &spec.shape(), -1.0, 1.0);
    check_gradients(move |_, v| tv_loss(v[0], spec), &[grid], &[true])
}

fn sixd(rng: &mut ChaCha8Rng) -> GradReport {
    let x = random_tensor(rng, &[3, 6], -1.0, 1.0);
    let w = weights_for(rng, 27);
    check_gradients(
        move |_, v| project(sixd_to_rotation_batch(v[0]).unwrap(), &w),
        &[x],
        &[true],
    )
}

fn map_case(rng: &mut ChaCha8Rng, eulerian: bool) -> GradReport {
    let rot = random_tensor(rng, &[4, 9], -1.0, 1.0);
    let trans = random_tensor(rng, &[4, 3], -1.0, 1.0);
    let x = random_tensor(rng, &[4, 3], -1.0, 1.0);
    let w = weights_for(rng, 12);
    check_gradients(
        move |_, v| {
            let y = if eulerian {
                eulerian_map_batch(v[0], v[1], v[2])
            } else {
                lagrangian_map_batch(v[0], v[1], v[2])
            };
            project(y, &w)
        },
        &[rot, trans, x],
        &[true; 3],
    )
}

fn eulerian_map(rng: &mut ChaCha8Rng) -> GradReport {
    map_case(rng, true)
}

fn lagrangian_map(rng: &mut ChaCha8Rng) -> GradReport {
    map_case(rng, false)
}

fn ray_batch(rng: &mut ChaCha8Rng) -> (Arc<Vec<usize>>, Arc<Vec<f64>>, Tensor<f64>) {
    let offsets = random_offsets(rng, 3, 6);
    let p = *offsets.last().unwrap();
    let deltas = Arc::new((0..p).map(|_| rng.gen_range(0.05..0.5)).collect::<Vec<_>>());
    let sigma = random_tensor(rng, &[p], 0.0, 4.0);
    (offsets, deltas, sigma)
}

fn weights(rng: &mut ChaCha8Rng) -> GradReport {
    let (offsets, deltas, sigma) = ray_batch(rng);
    let w = weights_for(rng, sigma.len());
    check_gradients(
        move |_, v| project(ray_weights(v[0], deltas.clone(), offsets.clone()), &w),
        &[sigma],
        &[true],
    )
}

fn composite_case(rng: &mut ChaCha8Rng) -> GradReport {
    let (offsets, deltas, sigma) = ray_batch(rng);
    let rgb = random_tensor(rng, &[sigma.len(), 3], 0.0, 1.0);
    let bg = [rng.gen(), rng.gen(), rng.gen()];
    let w = weights_for(rng, 12);
    check_gradients(
        move |_, v| {
            let c = composite(v[0], v[1], deltas.clone(), offsets.clone(), bg);
            project(c.rgb, &w).add(project(c.acc, &w))
        },
        &[sigma, rgb],
        &[true, true],
    )
}

fn photometric(rng: &mut ChaCha8Rng) -> GradReport {
    let pred = random_tensor(rng, &[5, 3], 0.0, 1.0);
    let target = random_tensor(rng, &[5, 3], 0.0, 1.0);
    check_gradients(move |_, v| photometric_loss(v[0], &target), &[pred], &[true])
}

fn per_point(rng: &mut ChaCha8Rng) -> GradReport {
    let offsets = random_offsets(rng, 3, 4);
    let p = *offsets.last().unwrap();
    let colors = random_tensor(rng, &[p, 3], 0.0, 1.0);
    let w = random_tensor(rng, &[p], 0.0, 1.0);
    let target = random_tensor(rng, &[3, 3], 0.0, 1.0);
    check_gradients(
        move |_, v| per_point_loss(v[0], v[1], &target, &offsets),
        &[colors, w],
        &[true, true],
    )
}

fn entropy(rng: &mut ChaCha8Rng) -> GradReport {
    let acc = random_tensor(rng, &[6], 0.05, 0.95);
    check_gradients(|_, v| entropy_loss(v[0]), &[acc], &[true])
}

fn cycle(rng: &mut ChaCha8Rng) -> GradReport {
    let sigma: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let eps = 0.3;
    let a = random_tensor(rng, &[6, 3], -1.0, 1.0);
    let b = random_tensor(rng, &[6, 3], -1.0, 1.0);
    check_gradients(
        move |_, v| cycle_loss(&sigma, v[0], v[1], eps),
        &[a, b],
        &[true, true],
    )
}

fn assign_soft(rng: &mut ChaCha8Rng) -> GradReport {
    let (n, c, l, d, k) = (4, 3, 3, 2, 2);
    let pts = random_tensor(rng, &[n, 3], -1.0, 1.0);
    let feats = random_tensor(rng, &[n, c], -1.0, 1.0);
    let slots = random_tensor(rng, &[l, d], -1.0, 1.0);
    let wq = random_tensor(rng, &[c + 3, k], -1.0, 1.0);
    let wk = random_tensor(rng, &[d, k], -1.0, 1.0);
    let temperature = rng.gen_range(0.5..2.0);
    let w = weights_for(rng, n * l);
    check_gradients(
        move |_, v: &[Var<f64>]| {
            let params = GroupingParams {
                slots: v[2],
                w_query: v[3],
                w_key: v[4],
            };
            let a = group_assign::<f64, ChaCha8Rng>(v[0], v[1], params, None, temperature).unwrap();
            project(a.soft, &w)
        },
        &[pts, feats, slots, wq, wk],
        &[true; 5],
    )
}

fn average(rng: &mut ChaCha8Rng) -> GradReport {
    let (n, l, c) = (6, 3, 2);
    // Every slot keeps at least one member so the counts stay positive.
    let mut hard = vec![0.0; n * l];
    for i in 0..n {
        let slot = if i < l { i } else { rng.gen_range(0..l) };
        hard[i * l + slot] = 1.0;
    }
    let hard = Tensor::new(vec![n, l], hard).unwrap();
    let feats = random_tensor(rng, &[n, c], -1.0, 1.0);
    let w = weights_for(rng, n * c);
    check_gradients(
        move |_: &Tape<f64>, v| project(group_average(v[0], v[1]), &w),
        &[feats, hard],
        &[true, true],
    )
}
