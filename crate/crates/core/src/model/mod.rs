//! The learned scene: canonical radiance field, Eulerian motion field and the
//! grouped Lagrangian motion field.

pub mod grouping;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{concat_cols, lit, Bound, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{encode, sample_grid, Aabb, FeatureGrid3D, GridSpec, MultiDistanceConfig};
use crate::rigid::{eulerian_map_batch, lagrangian_map_batch, sixd_to_rotation_batch, RigidTransformSE3};

pub use grouping::{group_assign, group_average, group_means, GroupAssignment, GroupingParams};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub aabb: Aabb,
    /// Initial canonical resolution per axis.
    pub canonical_res: usize,
    pub canonical_channels: usize,
    pub strides: Vec<usize>,
    pub motion_res: usize,
    pub motion_channels: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    pub feature_freqs: usize,
    pub time_freqs: usize,
    /// `None` feeds the raw direction to the color head.
    pub dir_freqs: Option<usize>,
    pub slots: usize,
    pub slot_dim: usize,
    pub key_dim: usize,
    pub temperature: f64,
    /// Density of every point at initialization.
    pub density_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            aabb: Aabb::cube(1.0),
            canonical_res: 40,
            canonical_channels: 6,
            strides: vec![1, 2, 4],
            motion_res: 50,
            motion_channels: 20,
            hidden: 128,
            feature_freqs: 5,
            time_freqs: 4,
            dir_freqs: Some(4),
            slots: 12,
            slot_dim: 32,
            key_dim: 32,
            temperature: 1.0,
            density_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.slots == 0 {
            return bad("slot count must be at least 1");
        }
        if self.hidden == 0 || self.motion_channels == 0 || self.canonical_channels == 0 {
            return bad("layer widths and channel counts must be positive");
        }
        if self.slot_dim == 0 || self.key_dim == 0 {
            return bad("slot and key dimensions must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.density_init > 0.0) {
            return bad("density_init must be positive");
        }
        MultiDistanceConfig::new(self.strides.clone())?.validate(&self.canonical_spec(self.canonical_res)?)?;
        self.motion_spec()?;
        Ok(())
    }

    pub fn canonical_spec(&self, res: usize) -> Result<GridSpec> {
        GridSpec::new([res; 3], self.canonical_channels, self.aabb)
    }

    pub fn motion_spec(&self) -> Result<GridSpec> {
        GridSpec::new([self.motion_res; 3], self.motion_channels, self.aabb)
    }

    fn dir_width(&self) -> usize {
        3 * (1 + 2 * self.dir_freqs.unwrap_or(0))
    }

    fn time_width(&self) -> usize {
        1 + 2 * self.time_freqs
    }
}

/// Weight (in×out) and bias of one affine layer.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// fan_in×fan_out matrix drawn from U(±1/√fan_in).
fn uniform<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

impl Linear {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let w = uniform(fan_in, fan_out, rng);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let b = Tensor::from_parts(vec![fan_out], (0..fan_out).map(|_| lit(rng.gen_range(-bound..bound))).collect());
        Self {
            w: store.add(format!("{name}.w"), w, group),
            b: store.add(format!("{name}.b"), b, group),
        }
    }

    /// A layer with zero weights and a fixed bias: its output ignores the input.
    fn constant<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, bias: &[f64]) -> Self {
        let w = Tensor::zeros(&[fan_in, bias.len()]);
        let b = Tensor::from_parts(vec![bias.len()], bias.iter().map(|&v| lit(v)).collect());
        Self {
            w: store.add(format!("{name}.w"), w, ParamGroup::ExtractorDecoder),
            b: store.add(format!("{name}.b"), b, ParamGroup::ExtractorDecoder),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(p.var(self.w)).add_row(p.var(self.b))
    }
}

/// Ids of every parameter, grouped by role.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub canonical_grid: ParamId,
    pub euler_grid: ParamId,
    pub lagr_grid: ParamId,
    pub density: [Linear; 3],
    pub color: [Linear; 2],
    pub euler_extractor: [Linear; 2],
    pub lagr_extractor: [Linear; 2],
    /// Rotation (6D) and translation heads shared by both motion fields.
    pub decoder_rot: Linear,
    pub decoder_trans: Linear,
    pub slots: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
}

/// Decoded rigid motion for a batch of queries.
#[derive(Clone, Copy)]
pub struct MotionOut<'t, T> {
    /// N×9 row-major rotations.
    pub rot: Var<'t, T>,
    /// N×3 translations.
    pub trans: Var<'t, T>,
    /// N×H motion features (`f_Em` or `f_Lm`).
    pub feature: Var<'t, T>,
    /// N×3 mapped points (`x_c` for Eulerian, `x` for Lagrangian queries).
    pub point: Var<'t, T>,
}

pub struct CanonicalOut<'t, T> {
    /// N densities.
    pub sigma: Var<'t, T>,
    /// N×3 colors in [0, 1].
    pub rgb: Var<'t, T>,
}

pub struct LagrangianOut<'t, T> {
    pub motion: MotionOut<'t, T>,
    pub assignment: GroupAssignment<'t, T>,
    /// Raw N×C Lagrangian features before group averaging.
    pub raw_features: Var<'t, T>,
}

/// All learnable state of the scene.
#[derive(Clone, Debug)]
pub struct SceneModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelParams,
    /// Current canonical resolution; grows with upsampling.
    pub canonical_res: usize,
}

impl<T: Real> SceneModel<T> {
    /// Fresh model whose motion fields are exactly the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c_spec = config.canonical_spec(config.canonical_res)?;
        let m_spec = config.motion_spec()?;
        let canonical_grid = store.add("canonical.grid", Tensor::zeros(&c_spec.shape()), ParamGroup::CanonicalGrid);
        let euler_grid = store.add("euler.grid", Tensor::zeros(&m_spec.shape()), ParamGroup::MotionGrid);
        let lagr_grid = store.add("lagr.grid", Tensor::zeros(&m_spec.shape()), ParamGroup::MotionGrid);

        let h = config.hidden;
        let feat_in = config.canonical_channels * config.strides.len() * (1 + 2 * config.feature_freqs);
        let other = ParamGroup::Other;
        let d0 = Linear::new(&mut store, "density.0", feat_in, h, other, &mut rng);
        let d1 = Linear::new(&mut store, "density.1", h, h, other, &mut rng);
        let d2 = Linear::new(&mut store, "density.2", h, 1, other, &mut rng);
        let c0 = Linear::new(&mut store, "color.0", h + config.dir_width(), h, other, &mut rng);
        let c1 = Linear::new(&mut store, "color.1", h, 3, other, &mut rng);

        let ed = ParamGroup::ExtractorDecoder;
        let motion_in = config.motion_channels + config.time_width();
        let e0 = Linear::new(&mut store, "euler.0", motion_in, h, ed, &mut rng);
        let e1 = Linear::new(&mut store, "euler.1", h, h, ed, &mut rng);
        let l0 = Linear::new(&mut store, "lagr.0", motion_in, h, ed, &mut rng);
        let l1 = Linear::new(&mut store, "lagr.1", h, h, ed, &mut rng);
        let decoder_rot = Linear::constant(&mut store, "decoder.rot", h, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let decoder_trans = Linear::constant(&mut store, "decoder.trans", h, &[0.0, 0.0, 0.0]);

        let slot_values = (0..config.slots * config.slot_dim)
            .map(|_| lit(StandardNormal.sample(&mut rng)))
            .collect();
        let slots = store.add(
            "group.slots",
            Tensor::from_parts(vec![config.slots, config.slot_dim], slot_values),
            other,
        );
        let q_in = config.motion_channels + 3;
        let w_query = store.add("group.query", uniform(q_in, config.key_dim, &mut rng), other);
        let w_key = store.add("group.key", uniform(config.slot_dim, config.key_dim, &mut rng), other);

        Ok(Self {
            canonical_res: config.canonical_res,
            config,
            store,
            ids: ModelParams {
                canonical_grid,
                euler_grid,
                lagr_grid,
                density: [d0, d1, d2],
                color: [c0, c1],
                euler_extractor: [e0, e1],
                lagr_extractor: [l0, l1],
                decoder_rot,
                decoder_trans,
                slots,
                w_query,
                w_key,
            },
        })
    }

    pub fn canonical_spec(&self) -> GridSpec {
        self.config
            .canonical_spec(self.canonical_res)
            .expect("validated at construction")
    }

    pub fn motion_spec(&self) -> GridSpec {
        self.config.motion_spec().expect("validated at construction")
    }

    pub fn strides(&self) -> MultiDistanceConfig {
        MultiDistanceConfig::new(self.config.strides.clone()).expect("validated at construction")
    }

    pub fn canonical_grid(&self) -> FeatureGrid3D<T> {
        FeatureGrid3D {
            spec: self.canonical_spec(),
            values: self.store.get(self.ids.canonical_grid).clone(),
        }
    }

    /// Trilinearly resamples the canonical grid to `res³`.
    pub fn upsample_canonical(&mut self, res: usize) -> Result<()> {
        let grid = self.canonical_grid().upsample([res; 3])?;
        MultiDistanceConfig::new(self.config.strides.clone())?.validate(&grid.spec)?;
        self.store.set(self.ids.canonical_grid, grid.values);
        self.canonical_res = res;
        Ok(())
    }

    /// Density shift so that `softplus(shift) = density_init`.
    fn density_shift(&self) -> T {
        lit(self.config.density_init.exp_m1().ln())
    }

    /// Places the parameters on `tape`.
    pub fn graph<'t>(&'t self, tape: &'t Tape<T>, requires_grad: bool) -> ModelGraph<'t, T> {
        ModelGraph {
            model: self,
            params: self.store.bind(tape, requires_grad),
            tape,
        }
    }

    /// Densities and colors at canonical points, without recording gradients.
    pub fn canonical_query(&self, xc: &[[f64; 3]], dirs: &[[f64; 3]]) -> Vec<([f64; 3], f64)> {
        let tape = Tape::new();
        let g = self.graph(&tape, false);
        let out = g.canonical(points_var(&tape, xc), points_var(&tape, dirs));
        let (s, c) = (out.sigma.value(), out.rgb.value());
        (0..xc.len())
            .map(|i| (to3(c.row(i)), s.data()[i].to_f64().unwrap()))
            .collect()
    }

    /// Eulerian transform, motion feature and canonical point per query.
    pub fn eulerian_query(&self, x: &[[f64; 3]], t: &[f64]) -> Result<Vec<(RigidTransformSE3, Vec<f64>, [f64; 3])>> {
        let tape = Tape::new();
        let g = self.graph(&tape, false);
        let m = g.eulerian(points_var(&tape, x), times_var(&tape, t))?;
        Ok(unpack_motion(&m))
    }

    /// Lagrangian transform, motion feature, world point and group id per
    /// query. All queries are grouped together, without noise.
    pub fn lagrangian_query(
        &self,
        xc: &[[f64; 3]],
        t: &[f64],
    ) -> Result<Vec<(RigidTransformSE3, Vec<f64>, [f64; 3], usize)>> {
        let tape = Tape::new();
        let g = self.graph(&tape, false);
        let out = g.lagrangian(points_var(&tape, xc), times_var(&tape, t), None::<&mut ChaCha8Rng>)?;
        Ok(unpack_motion(&out.motion)
            .into_iter()
            .zip(&out.assignment.ids)
            .map(|((tr, f, p), &id)| (tr, f, p, id))
            .collect())
    }
}

fn to3<T: Real>(v: &[T]) -> [f64; 3] {
    [v[0].to_f64().unwrap(), v[1].to_f64().unwrap(), v[2].to_f64().unwrap()]
}

/// N×3 constant holding `points`.
pub fn points_var<'t, T: Real>(tape: &'t Tape<T>, points: &[[f64; 3]]) -> Var<'t, T> {
    let data = points.iter().flat_map(|p| p.iter().map(|&v| lit(v))).collect();
    tape.constant(Tensor::from_parts(vec![points.len(), 3], data))
}

/// N×1 constant holding `times`.
pub fn times_var<'t, T: Real>(tape: &'t Tape<T>, times: &[f64]) -> Var<'t, T> {
    tape.constant(Tensor::from_parts(vec![times.len(), 1], times.iter().map(|&v| lit(v)).collect()))
}

fn unpack_motion<T: Real>(m: &MotionOut<'_, T>) -> Vec<(RigidTransformSE3, Vec<f64>, [f64; 3])> {
    let (r, t, f, p) = (m.rot.value(), m.trans.value(), m.feature.value(), m.point.value());
    let f64s = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>();
    (0..r.rows())
        .map(|i| {
            let tr = RigidTransformSE3::from_row_major(&f64s(r.row(i)), &f64s(t.row(i)));
            (tr, f64s(f.row(i)), to3(p.row(i)))
        })
        .collect()
}

/// A model whose parameters live on one tape.
pub struct ModelGraph<'t, T> {
    pub model: &'t SceneModel<T>,
    pub params: Bound<'t, T>,
    pub tape: &'t Tape<T>,
}

impl<'t, T: Real> ModelGraph<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.params.var(id)
    }

    /// Density and color at canonical points `xc` (N×3) seen from unit directions `dirs` (N×3).
    pub fn canonical(&self, xc: Var<'t, T>, dirs: Var<'t, T>) -> CanonicalOut<'t, T> {
        let m = self.model;
        let ids = &m.ids;
        let feats = sample_grid(self.var(ids.canonical_grid), xc, m.canonical_spec(), &m.strides());
        let enc = encode(feats, m.config.feature_freqs);
        let h = ids.density[0].forward(&self.params, enc).relu();
        let h = ids.density[1].forward(&self.params, h).relu();
        let n = xc.value().rows();
        let sigma = ids.density[2]
            .forward(&self.params, h)
            .add_scalar(m.density_shift())
            .softplus()
            .reshape(vec![n]);
        let d = match m.config.dir_freqs {
            Some(k) => encode(dirs, k),
            None => dirs,
        };
        let c = ids.color[0].forward(&self.params, concat_cols(&[h, d])).relu();
        let rgb = ids.color[1].forward(&self.params, c).sigmoid();
        CanonicalOut { sigma, rgb }
    }

    /// Density only; skips the color head.
    pub fn density(&self, xc: Var<'t, T>) -> Var<'t, T> {
        let m = self.model;
        let ids = &m.ids;
        let feats = sample_grid(self.var(ids.canonical_grid), xc, m.canonical_spec(), &m.strides());
        let enc = encode(feats, m.config.feature_freqs);
        let h = ids.density[0].forward(&self.params, enc).relu();
        let h = ids.density[1].forward(&self.params, h).relu();
        let n = xc.value().rows();
        ids.density[2]
            .forward(&self.params, h)
            .add_scalar(m.density_shift())
            .softplus()
            .reshape(vec![n])
    }

    fn decode(&self, feature: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let ids = &self.model.ids;
        let rot = sixd_to_rotation_batch(ids.decoder_rot.forward(&self.params, feature))?;
        let trans = ids.decoder_trans.forward(&self.params, feature);
        Ok((rot, trans))
    }

    fn extract(&self, layers: &[Linear; 2], feature: Var<'t, T>, t: Var<'t, T>) -> Var<'t, T> {
        let input = concat_cols(&[feature, encode(t, self.model.config.time_freqs)]);
        let h = layers[0].forward(&self.params, input).relu();
        layers[1].forward(&self.params, h)
    }

    /// Eulerian motion at world points `x` (N×3) and times `t` (N×1).
    pub fn eulerian(&self, x: Var<'t, T>, t: Var<'t, T>) -> Result<MotionOut<'t, T>> {
        let m = self.model;
        let f = sample_grid(self.var(m.ids.euler_grid), x, m.motion_spec(), &MultiDistanceConfig::single());
        let feature = self.extract(&m.ids.euler_extractor, f, t);
        let (rot, trans) = self.decode(feature)?;
        let point = eulerian_map_batch(rot, trans, x);
        Ok(MotionOut {
            rot,
            trans,
            feature,
            point,
        })
    }

    /// Raw Lagrangian features `f_L` at canonical points.
    pub fn lagrangian_features(&self, xc: Var<'t, T>) -> Var<'t, T> {
        let m = self.model;
        sample_grid(self.var(m.ids.lagr_grid), xc, m.motion_spec(), &MultiDistanceConfig::single())
    }

    pub fn grouping_params(&self) -> GroupingParams<'t, T> {
        let ids = &self.model.ids;
        GroupingParams {
            slots: self.var(ids.slots),
            w_query: self.var(ids.w_query),
            w_key: self.var(ids.w_key),
        }
    }

    /// Rigid motion decoded from group-averaged Lagrangian features `f_hat` (N×C) at times `t` (N×1).
    pub fn lagrangian_motion(&self, f_hat: Var<'t, T>, t: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let feature = self.extract(&self.model.ids.lagr_extractor, f_hat, t);
        let (rot, trans) = self.decode(feature)?;
        Ok((rot, trans, feature))
    }

    /// Lagrangian motion of canonical points `xc` (N×3) at times `t` (N×1).
    /// The N points form one grouping batch.
    pub fn lagrangian<R: Rng>(&self, xc: Var<'t, T>, t: Var<'t, T>, rng: Option<&mut R>) -> Result<LagrangianOut<'t, T>> {
        let raw = self.lagrangian_features(xc);
        let assignment = group_assign(xc, raw, self.grouping_params(), rng, self.model.config.temperature)?;
        let f_hat = group_average(raw, assignment.hard);
        let (rot, trans, feature) = self.lagrangian_motion(f_hat, t)?;
        let point = lagrangian_map_batch(rot, trans, xc);
        Ok(LagrangianOut {
            motion: MotionOut {
                rot,
                trans,
                feature,
                point,
            },
            assignment,
            raw_features: raw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            canonical_res: 9,
            motion_res: 5,
            motion_channels: 4,
            hidden: 16,
            slots: 3,
            slot_dim: 4,
            key_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identity_at_init() {
        let model = SceneModel::<f64>::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen_range(-1.2..1.2), rng.gen(), -0.3]).collect();
        let ts: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
        for (q, p) in model.eulerian_query(&pts, &ts).unwrap().iter().zip(&pts) {
            assert_eq!(q.2, *p);
        }
        for (q, p) in model.lagrangian_query(&pts, &ts).unwrap().iter().zip(&pts) {
            assert_eq!(q.2, *p);
        }
    }

    #[test]
    fn canonical_outputs_in_range_and_view_independent_density() {
        let model = SceneModel::<f64>::new(small(), 0).unwrap();
        let pts = [[0.1, 0.2, 0.3], [-0.9, 0.5, 0.0]];
        let a = model.canonical_query(&pts, &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let b = model.canonical_query(&pts, &[[0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.1, y.1);
            assert!(x.1 >= 0.0 && x.1.is_finite());
            assert!(x.0.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            slots: 0,
            ..small()
        };
        assert!(SceneModel::<f32>::new(cfg, 0).is_err());
        let cfg = ModelConfig {
            strides: vec![1, 9],
            ..small()
        };
        assert!(SceneModel::<f32>::new(cfg, 0).is_err());
    }
}
