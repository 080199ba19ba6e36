//! The optimization loop: batching, loss weighting, image curriculum,
//! canonical-grid upsampling, empty-space skipping and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, lit, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint, ParamGroup, ParamId, Real, Tape,
    Tensor, Var,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fields::{tv_loss, Aabb};
use crate::model::{points_var, times_var, ModelConfig, SceneModel};
use crate::render::{
    composite, cycle_loss, entropy_loss, per_point_loss, photometric_loss, sample_count, sample_points, Camera,
    OccupancyGrid, Ray, RenderOptions,
};

/// Every training knob. Parsed from `key = value` lines; see [`TrainConfig::parse`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub rays_per_batch: usize,
    /// Samples along the scene box diagonal; fixes the marching step.
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub lr_motion_grids: f64,
    pub lr_canonical_grid: f64,
    pub lr_extractors_decoders: f64,
    pub lr_other_nets: f64,
    /// Learning-rate multiplier reached at the last iteration (exponential); 1 disables decay.
    pub lr_decay: f64,
    pub w_cycle: f64,
    pub w_per_pt: f64,
    pub w_entropy: f64,
    pub w_tv: f64,
    /// Density threshold selecting object points for the cycle loss.
    pub density_eps: f64,
    /// Most object points fed to the Lagrangian path per step.
    pub cycle_max_points: usize,
    pub upsample_iters: Vec<usize>,
    pub canonical_res_init: usize,
    pub canonical_res_final: usize,
    pub canonical_channels: usize,
    pub strides: Vec<usize>,
    pub motion_res: usize,
    pub motion_channels: usize,
    pub hidden: usize,
    pub feature_freqs: usize,
    pub time_freqs: usize,
    pub encode_dirs: bool,
    pub dir_freqs: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub key_dim: usize,
    pub temperature: f64,
    pub density_init: f64,
    /// Fraction of frames (earliest first) available at iteration 0.
    pub curriculum_start: f64,
    /// Fraction of `total_iters` after which every frame is available.
    pub curriculum_end: f64,
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Skip samples in world cells that were empty at the last refresh.
    pub occupancy: bool,
    pub occupancy_warmup: usize,
    pub occupancy_every: usize,
    pub occupancy_res: usize,
    pub occupancy_times: usize,
    pub occupancy_sigma: f64,
    pub occupancy_dilation: usize,
    pub seed: u64,
    /// Reproducibility flag. Training already runs sequentially in a fixed
    /// order, so runs with the same seed match bit for bit either way.
    pub deterministic: bool,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-scale schedule and sizes.
    pub fn full() -> Self {
        Self {
            total_iters: 20000,
            rays_per_batch: 4096,
            samples_per_ray: 128,
            stratified: true,
            lr_motion_grids: 0.08,
            lr_canonical_grid: 0.01,
            lr_extractors_decoders: 6e-4,
            lr_other_nets: 8e-4,
            lr_decay: 1.0,
            w_cycle: 0.01,
            w_per_pt: 0.01,
            w_entropy: 0.001,
            w_tv: 0.0001,
            density_eps: 1e-4,
            cycle_max_points: 8192,
            upsample_iters: vec![4000, 6000, 8000],
            canonical_res_init: 40,
            canonical_res_final: 160,
            canonical_channels: 6,
            strides: vec![1, 2, 4],
            motion_res: 50,
            motion_channels: 20,
            hidden: 128,
            feature_freqs: 5,
            time_freqs: 4,
            encode_dirs: true,
            dir_freqs: 4,
            slots: 12,
            slot_dim: 32,
            key_dim: 32,
            temperature: 1.0,
            density_init: 0.1,
            curriculum_start: 0.1,
            curriculum_end: 0.25,
            aabb_min: [-1.0; 3],
            aabb_max: [1.0; 3],
            near: 0.1,
            far: 100.0,
            background: [1.0; 3],
            occupancy: true,
            occupancy_warmup: 1000,
            occupancy_every: 500,
            occupancy_res: 64,
            occupancy_times: 16,
            occupancy_sigma: 0.01,
            occupancy_dilation: 2,
            seed: 0,
            deterministic: true,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    /// Small grids and a short schedule for CPU runs on 64² images.
    pub fn desk() -> Self {
        Self {
            total_iters: 3000,
            rays_per_batch: 2048,
            upsample_iters: vec![600, 900, 1200],
            canonical_res_init: 24,
            canonical_res_final: 48,
            motion_res: 16,
            hidden: 64,
            occupancy_warmup: 150,
            occupancy_every: 150,
            occupancy_res: 32,
            occupancy_times: 12,
            cycle_max_points: 4096,
            ..Self::full()
        }
    }

    /// Parses `key = value` lines (`#` starts a comment). Values use TOML
    /// literal syntax: `0.01`, `true`, `[600, 900]`. A `preset = "desk"` or
    /// `"full"` line selects the base values the other lines override.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        let base = match table.remove("preset") {
            None => Self::full(),
            Some(toml::Value::String(s)) if s == "full" => Self::full(),
            Some(toml::Value::String(s)) if s == "desk" => Self::desk(),
            Some(v) => return Err(Error::Config(format!("unknown preset {v}"))),
        };
        let mut merged = base.to_table();
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!(),
        }
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = self.to_table();
        for o in overrides {
            let parsed: toml::Table = o
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("override {o:?}: {e}")))?;
            for (k, v) in parsed {
                if !table.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key {k:?}")));
                }
                table.insert(k, v);
            }
        }
        Self::from_table(table)
    }

    /// The configuration as `key = value` lines, readable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        self.to_table()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [
            ("lr_motion_grids", self.lr_motion_grids),
            ("lr_canonical_grid", self.lr_canonical_grid),
            ("lr_extractors_decoders", self.lr_extractors_decoders),
            ("lr_other_nets", self.lr_other_nets),
        ] {
            if !(lr >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.upsample_iters.windows(2).any(|w| w[0] >= w[1]) {
            return bad("upsample_iters must be strictly increasing".into());
        }
        if self.upsample_iters.iter().any(|&i| i == 0 || i >= self.total_iters) {
            return bad("upsample_iters must lie in (0, total_iters)".into());
        }
        if self.canonical_res_final < self.canonical_res_init {
            return bad("canonical_res_final is below canonical_res_init".into());
        }
        if !self.upsample_iters.is_empty() && self.canonical_res_final == self.canonical_res_init {
            return bad("upsampling requested but canonical_res_final equals canonical_res_init".into());
        }
        if self.rays_per_batch == 0 || self.samples_per_ray < 2 {
            return bad("rays_per_batch must be positive and samples_per_ray at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.curriculum_start) || !(0.0..=1.0).contains(&self.curriculum_end) {
            return bad("curriculum fractions must lie in [0, 1]".into());
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive".into());
        }
        if !(self.near < self.far) {
            return bad("near must be below far".into());
        }
        if self.occupancy && (self.occupancy_res == 0 || self.occupancy_every == 0 || self.occupancy_times == 0) {
            return bad("occupancy_res, occupancy_every and occupancy_times must be positive".into());
        }
        self.model_config()?.validate()?;
        let mut m = self.model_config()?;
        m.canonical_res = self.canonical_res_final;
        m.validate()
    }

    pub fn aabb(&self) -> Result<Aabb> {
        Aabb::new(self.aabb_min, self.aabb_max)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            aabb: self.aabb()?,
            canonical_res: self.canonical_res_init,
            canonical_channels: self.canonical_channels,
            strides: self.strides.clone(),
            motion_res: self.motion_res,
            motion_channels: self.motion_channels,
            hidden: self.hidden,
            feature_freqs: self.feature_freqs,
            time_freqs: self.time_freqs,
            dir_freqs: self.encode_dirs.then_some(self.dir_freqs),
            slots: self.slots,
            slot_dim: self.slot_dim,
            key_dim: self.key_dim,
            temperature: self.temperature,
            density_init: self.density_init,
        })
    }

    /// Canonical resolution reached at each upsampling iteration, spaced geometrically.
    pub fn upsample_resolutions(&self) -> Vec<usize> {
        let k = self.upsample_iters.len();
        let (a, b) = (self.canonical_res_init as f64, self.canonical_res_final as f64);
        let mut out: Vec<usize> = Vec::with_capacity(k);
        for i in 1..=k {
            let r = (a * (b / a).powf(i as f64 / k as f64)).round() as usize;
            let prev = out.last().copied().unwrap_or(self.canonical_res_init);
            out.push(r.max(prev + 1));
        }
        if let Some(last) = out.last_mut() {
            *last = (*last).max(self.canonical_res_final);
        }
        out
    }

    /// Number of earliest frames eligible at `iter`.
    pub fn active_frames(&self, iter: usize, frames: usize) -> usize {
        let first = ((self.curriculum_start * frames as f64).ceil() as usize).clamp(1, frames);
        let end = self.curriculum_end * self.total_iters as f64;
        if end <= 0.0 || iter as f64 >= end {
            return frames;
        }
        let extra = ((frames - first) as f64 * iter as f64 / end).floor() as usize;
        (first + extra).min(frames)
    }

    pub fn render_options(&self) -> Result<RenderOptions> {
        Ok(RenderOptions {
            aabb: self.aabb()?,
            near: self.near,
            far: self.far,
            samples_per_ray: self.samples_per_ray,
            background: self.background,
            chunk: 1024,
        })
    }

    fn lr(&self, group: ParamGroup, iter: usize) -> f64 {
        let base = match group {
            ParamGroup::MotionGrid => self.lr_motion_grids,
            ParamGroup::CanonicalGrid => self.lr_canonical_grid,
            ParamGroup::ExtractorDecoder => self.lr_extractors_decoders,
            ParamGroup::Other => self.lr_other_nets,
        };
        base * self.lr_decay.powf(iter as f64 / self.total_iters.max(1) as f64)
    }
}

/// Weights of the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cycle: f64,
    pub per_pt: f64,
    pub entropy: f64,
    pub tv: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            cycle: c.w_cycle,
            per_pt: c.w_per_pt,
            entropy: c.w_entropy,
            tv: c.w_tv,
        }
    }
}

/// The five loss terms of one batch.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, T> {
    pub photo: Var<'t, T>,
    pub cycle: Var<'t, T>,
    pub per_pt: Var<'t, T>,
    pub entropy: Var<'t, T>,
    pub tv: Var<'t, T>,
}

/// `photo + w_cycle·cycle + w_per_pt·per_pt + w_entropy·entropy + w_tv·tv`.
/// A non-finite term is reported by name.
pub fn total_loss<'t, T: Real>(terms: &LossTerms<'t, T>, w: &LossWeights, iter: usize) -> Result<Var<'t, T>> {
    let named = [
        ("photo", terms.photo, 1.0),
        ("cycle", terms.cycle, w.cycle),
        ("per_pt", terms.per_pt, w.per_pt),
        ("entropy", terms.entropy, w.entropy),
        ("tv", terms.tv, w.tv),
    ];
    for (name, v, _) in &named {
        if !v.value().is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                iter,
            });
        }
    }
    let mut total = terms.photo;
    for (_, v, weight) in &named[1..] {
        total = total.add(v.scale(lit(*weight)));
    }
    Ok(total)
}

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub iter: usize,
    pub loss: f64,
    pub photo: f64,
    pub cycle: f64,
    pub per_pt: f64,
    pub entropy: f64,
    pub tv: f64,
    /// From the batch photometric error.
    pub psnr: f64,
}

impl LossBreakdown {
    pub const HEADER: &'static str = "iter\tloss\tphoto\tcycle\tper_pt\tentropy\ttv\tpsnr";

    /// One tab-separated log line.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.3}",
            self.iter, self.loss, self.photo, self.cycle, self.per_pt, self.entropy, self.tv, self.psnr
        )
    }
}

/// Rays of one image with their target colors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rays: Vec<Ray>,
    /// One RGB triple per ray.
    pub target: Vec<[f32; 3]>,
    pub frame: usize,
}

/// Samples of a batch that survived clipping and empty-space skipping.
struct Marched {
    points: Vec<[f64; 3]>,
    dirs: Vec<[f64; 3]>,
    deltas: Vec<f64>,
    offsets: Vec<usize>,
}

/// Optimizer state around a [`SceneModel`].
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: SceneModel<T>,
    pub adam: Vec<AdamState<T>>,
    pub rng: ChaCha8Rng,
    /// Number of completed steps.
    pub iter: usize,
    pub occupancy: Option<OccupancyGrid>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SceneModel::new(config.model_config()?, config.seed)?;
        let adam = model
            .store
            .iter()
            .map(|(_, p)| AdamState::new(p.value.shape(), AdamConfig::with_lr(config.lr(p.group, 0))))
            .collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e),
            config,
            model,
            adam,
            iter: 0,
            occupancy: None,
        })
    }

    /// Checks that every frame matches the dataset's camera before training.
    pub fn check_dataset(dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Config("dataset has no frames".into()));
        }
        for (i, f) in dataset.frames.iter().enumerate() {
            if f.rgb.len() != dataset.width * dataset.height {
                return Err(Error::Config(format!(
                    "frame {i} has {} pixels, camera expects {}×{}",
                    f.rgb.len(),
                    dataset.width,
                    dataset.height
                )));
            }
            dataset.camera(i)?;
        }
        Ok(())
    }

    /// Random rays from one random frame among those the curriculum allows.
    pub fn sample_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        let active = self.config.active_frames(self.iter, dataset.len());
        let frame = self.rng.gen_range(0..active);
        let cam = dataset.camera(frame)?;
        let f = &dataset.frames[frame];
        let n = cam.width * cam.height;
        let mut pixels = Vec::with_capacity(self.config.rays_per_batch);
        let mut target = Vec::with_capacity(self.config.rays_per_batch);
        for _ in 0..self.config.rays_per_batch {
            let p = self.rng.gen_range(0..n);
            pixels.push([(p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5]);
            target.push(f.rgb[p]);
        }
        let rays = crate::render::generate_rays(&cam, &pixels, f.time, self.config.near, self.config.far)?;
        Ok(Batch { rays, target, frame })
    }

    fn march(&mut self, rays: &[Ray]) -> Result<Marched> {
        let aabb = self.config.aabb()?;
        let step = aabb.diagonal() / self.config.samples_per_ray as f64;
        let mut m = Marched {
            points: Vec::new(),
            dirs: Vec::new(),
            deltas: Vec::new(),
            offsets: vec![0],
        };
        for ray in rays {
            if let Some(r) = ray.clip(&aabb) {
                let s = sample_points(&r, sample_count(&r, step), self.config.stratified, &mut self.rng)?;
                for (&h, &d) in s.depths.iter().zip(&s.deltas) {
                    let p = r.at(h);
                    if self.occupancy.as_ref().is_some_and(|o| !o.occupied(p)) {
                        continue;
                    }
                    m.points.push(p);
                    m.dirs.push(r.dir);
                    m.deltas.push(d);
                }
            }
            m.offsets.push(m.points.len());
        }
        Ok(m)
    }

    /// One forward/backward pass and one Adam update of every parameter.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let time = batch.rays.first().map_or(0.0, |r| r.time);
        let marched = self.march(&batch.rays)?;
        let target = Tensor::from_parts(
            vec![batch.target.len(), 3],
            batch.target.iter().flat_map(|c| c.map(|v| lit::<T>(v as f64))).collect(),
        );
        let tape = Tape::new();
        let weights = LossWeights::from(&self.config);
        let g = self.model.graph(&tape, true);
        let k = marched.points.len();
        let x = points_var(&tape, &marched.points);
        let t = times_var(&tape, &vec![time; k]);
        let euler = g.eulerian(x, t)?;
        let canon = g.canonical(euler.point, points_var(&tape, &marched.dirs));
        let deltas = Arc::new(marched.deltas.iter().map(|&d| lit::<T>(d)).collect::<Vec<_>>());
        let offsets = Arc::new(marched.offsets);
        let comp = composite(canon.sigma, canon.rgb, deltas, offsets.clone(), self.config.background);

        let photo = photometric_loss(comp.rgb, &target);
        let per_pt = per_point_loss(canon.rgb, comp.weights, &target, &offsets);
        let entropy = entropy_loss(comp.acc);

        let sigma = canon.sigma.value();
        let eps: T = lit(self.config.density_eps);
        let mut object: Vec<usize> = (0..k).filter(|&i| sigma.data()[i] > eps).collect();
        if object.len() > self.config.cycle_max_points {
            let mut pick = sample_indices(&mut self.rng, object.len(), self.config.cycle_max_points).into_vec();
            pick.sort_unstable();
            object = pick.into_iter().map(|i| object[i]).collect();
        }
        let cycle = if object.is_empty() {
            tape.constant(Tensor::scalar(T::zero()))
        } else {
            let sel = Arc::new(object);
            let xc = euler.point.detach().gather_rows(sel.clone());
            let ts = times_var(&tape, &vec![time; sel.len()]);
            let lag = g.lagrangian(xc, ts, Some(&mut self.rng))?;
            let sig: Vec<T> = sel.iter().map(|&i| sigma.data()[i]).collect();
            cycle_loss(&sig, euler.feature.gather_rows(sel), lag.motion.feature, self.config.density_eps)
        };

        let ids = &self.model.ids;
        let tv = tv_loss(g.var(ids.canonical_grid), self.model.canonical_spec())
            .add(tv_loss(g.var(ids.euler_grid), self.model.motion_spec()))
            .add(tv_loss(g.var(ids.lagr_grid), self.model.motion_spec()));

        let terms = LossTerms {
            photo,
            cycle,
            per_pt,
            entropy,
            tv,
        };
        let total = total_loss(&terms, &weights, self.iter)?;
        let val = |v: Var<'_, T>| v.value().item().to_f64().unwrap();
        let out = LossBreakdown {
            iter: self.iter,
            loss: val(total),
            photo: val(photo),
            cycle: val(cycle),
            per_pt: val(per_pt),
            entropy: val(entropy),
            tv: val(tv),
            psnr: -10.0 * (val(photo) / 3.0).max(1e-10).log10(),
        };
        let mut grads = tape.backward(total)?;
        let grads: Vec<Option<Tensor<T>>> = g.params.vars().iter().map(|&v| grads.take(v)).collect();
        for (i, grad) in grads.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = ParamId(i);
            self.adam[i].config.lr = self.config.lr(self.model.store.param(id).group, self.iter);
            adam_step(self.model.store.get_mut(id), &grad, &mut self.adam[i])?;
        }
        self.iter += 1;
        Ok(out)
    }

    /// Applies the schedule due at the current iteration: canonical
    /// upsampling and occupancy refresh.
    pub fn apply_schedule(&mut self) -> Result<()> {
        if let Some(k) = self.config.upsample_iters.iter().position(|&i| i == self.iter) {
            let res = self.config.upsample_resolutions()[k];
            self.model.upsample_canonical(res)?;
            let id = self.model.ids.canonical_grid;
            let shape = self.model.store.get(id).shape().to_vec();
            self.adam[id.0].reset(&shape);
            log::info!("iter {}: canonical grid upsampled to {res}³", self.iter);
        }
        let c = &self.config;
        if c.occupancy && self.iter >= c.occupancy_warmup && (self.iter - c.occupancy_warmup) % c.occupancy_every == 0 {
            self.refresh_occupancy()?;
        }
        Ok(())
    }

    pub fn refresh_occupancy(&mut self) -> Result<()> {
        let c = &self.config;
        let n = c.occupancy_times;
        let times: Vec<f64> = (0..n).map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 }).collect();
        let grid = OccupancyGrid::build(&self.model, c.occupancy_res, &times, c.occupancy_sigma, c.occupancy_dilation)?;
        log::debug!("iter {}: occupancy {:.3}", self.iter, grid.fraction());
        self.occupancy = Some(grid);
        Ok(())
    }

    /// Schedule, batch and step.
    pub fn step(&mut self, dataset: &Dataset) -> Result<LossBreakdown> {
        self.apply_schedule()?;
        let batch = self.sample_batch(dataset)?;
        self.train_step(&batch)
    }

    /// Trains until `total_iters`, calling `on_log` every `log_every` steps
    /// and on the last one. Periodic checkpoints go to `checkpoint_dir`. A
    /// non-finite loss saves `failed.ckpt` there before returning the error.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        checkpoint_dir: Option<&Path>,
        mut on_log: impl FnMut(&LossBreakdown),
    ) -> Result<()> {
        Self::check_dataset(dataset)?;
        while self.iter < self.config.total_iters {
            let out = match self.step(dataset) {
                Ok(o) => o,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = checkpoint_dir {
                        self.save(&dir.join("failed.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let last = self.iter == self.config.total_iters;
            if self.config.log_every > 0 && (out.iter % self.config.log_every == 0 || last) {
                on_log(&out);
            }
            if let (Some(dir), true) = (checkpoint_dir, self.config.checkpoint_every > 0) {
                if self.iter % self.config.checkpoint_every == 0 && !last {
                    self.save(&dir.join(format!("iter_{:06}.ckpt", self.iter)))?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, &self.model, &self.config, self.occupancy.as_ref(), self.iter)
    }
}

/// A trained model with what is needed to render it.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: SceneModel<T>,
    pub config: TrainConfig,
    pub occupancy: Option<OccupancyGrid>,
    pub iter: usize,
}

const OCCUPANCY: &str = "aux.occupancy";

/// Writes parameters, configuration and occupancy to an `mp-ckpt-v1` file.
pub fn save_model<T: Real>(
    path: &Path,
    model: &SceneModel<T>,
    config: &TrainConfig,
    occupancy: Option<&OccupancyGrid>,
    iter: usize,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    for (k, v) in config.to_table() {
        meta.insert(format!("config.{k}"), v.to_string());
    }
    meta.insert("iter".into(), iter.to_string());
    meta.insert("canonical_res".into(), model.canonical_res.to_string());
    let mut params: Vec<(String, Tensor<T>)> =
        model.store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect();
    if let Some(o) = occupancy {
        let data = o.cells.iter().map(|&c| if c { T::one() } else { T::zero() }).collect();
        params.push((OCCUPANCY.into(), Tensor::from_parts(vec![o.res; 3], data)));
    }
    write_checkpoint(path, &Checkpoint { meta, params })
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model<T: Real>(path: &Path) -> Result<Trained<T>> {
    let ckpt = read_checkpoint::<T>(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut table = toml::Table::new();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("config.") {
            let parsed: toml::Table = format!("{key} = {v}").parse().map_err(|e| bad(format!("{e}")))?;
            table.extend(parsed);
        }
    }
    let config = TrainConfig::from_table(table)?;
    let meta_usize = |k: &str| -> Result<usize> {
        ckpt.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing {k}")))
    };
    let iter = meta_usize("iter")?;
    let res = meta_usize("canonical_res")?;
    let mut model = SceneModel::<T>::new(config.model_config()?, config.seed)?;
    if res != model.canonical_res {
        model.upsample_canonical(res)?;
    }
    let mut occupancy = None;
    let mut seen = 0;
    for (name, tensor) in ckpt.params {
        if name == OCCUPANCY {
            let r = tensor.shape().first().copied().unwrap_or(0);
            occupancy = Some(OccupancyGrid {
                aabb: config.aabb()?,
                res: r,
                cells: tensor.data().iter().map(|&v| v > T::zero()).collect(),
            });
            continue;
        }
        let id = model.store.find(&name).ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
        if model.store.get(id).shape() != tensor.shape() {
            return Err(bad(format!("parameter {name} has shape {:?}", tensor.shape())));
        }
        model.store.set(id, tensor);
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(bad(format!("{} of {} parameters present", seen, model.store.len())));
    }
    Ok(Trained {
        model,
        config,
        occupancy,
        iter,
    })
}

/// Camera and time of every frame, for rendering a dataset's views.
pub fn dataset_views(dataset: &Dataset) -> Result<Vec<(Camera, f64)>> {
    (0..dataset.len()).map(|i| Ok((dataset.camera(i)?, dataset.frames[i].time))).collect()
}
