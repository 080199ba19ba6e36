//! Rigid parts of a trained scene: grouping occupied canonical points,
//! merging groups that move alike, segmentation and render-time edits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, UnitQuaternion, Vector3};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{argmax, Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fields::Aabb;
use crate::model::grouping::group_assign;
use crate::model::{points_var, times_var, SceneModel};
use crate::render::{
    render_image, Camera, FieldSamples, ModelField, OccupancyGrid, RenderOptions, RenderedImage, SceneField,
};
use crate::rigid::{ape, axis_angle, rigid_inverse, PoseSequence, RigidTransformSE3};

const CHUNK: usize = 8192;

/// Merge costs at or below this count as zero when picking the stop step.
pub const ZERO_COST: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PartOptions {
    /// Lattice points per axis over the canonical box.
    pub lattice_res: usize,
    pub density_eps: f64,
    /// Uniform times in [0, 1] at which group motion is decoded.
    pub n_times: usize,
}

impl Default for PartOptions {
    fn default() -> Self {
        Self {
            lattice_res: 64,
            density_eps: 1e-4,
            n_times: 16,
        }
    }
}

/// `n` evenly spaced times covering [0, 1].
pub fn linspace_times(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Lattice cell centers of the canonical box whose density exceeds `eps`.
pub fn sample_occupied_points<T: Real>(model: &SceneModel<T>, res: usize, eps: f64) -> Result<Vec<[f64; 3]>> {
    let aabb = model.config.aabb;
    let e = aabb.extent();
    let r = res as f64;
    let lattice: Vec<[f64; 3]> = (0..res)
        .flat_map(|i| (0..res).flat_map(move |j| (0..res).map(move |k| [i, j, k])))
        .map(|ijk| [0, 1, 2].map(|a| aabb.min[a] + (ijk[a] as f64 + 0.5) / r * e[a]))
        .collect();
    let kept: Vec<Vec<[f64; 3]>> = lattice
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let g = model.graph(&tape, false);
            let s = g.density(points_var(&tape, chunk)).value();
            chunk
                .iter()
                .zip(s.data())
                .filter(|(_, &v)| v.to_f64().unwrap() > eps)
                .map(|(p, _)| *p)
                .collect()
        })
        .collect();
    let kept: Vec<[f64; 3]> = kept.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::EmptyScene(eps));
    }
    Ok(kept)
}

/// Noise-free group id of each canonical point. Ids depend on each point alone.
pub fn group_ids<T: Real>(model: &SceneModel<T>, points: &[[f64; 3]]) -> Result<Vec<usize>> {
    let ids: Vec<Vec<usize>> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let g = model.graph(&tape, false);
            let xc = points_var(&tape, chunk);
            let f = g.lagrangian_features(xc);
            let a = group_assign(xc, f, g.grouping_params(), None::<&mut ChaCha8Rng>, model.config.temperature)?;
            Ok(a.ids)
        })
        .collect::<Result<_>>()?;
    Ok(ids.into_iter().flatten().collect())
}

/// Occupied points split by slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub points: Vec<[f64; 3]>,
    /// Slot of each point.
    pub ids: Vec<usize>,
    /// Member count per slot.
    pub counts: Vec<usize>,
    /// Mean raw Lagrangian feature per slot; empty for slots without members.
    pub features: Vec<Vec<f64>>,
}

impl Grouping {
    /// Slots with at least one member, ascending.
    pub fn nonempty(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&s| self.counts[s] > 0).collect()
    }
}

pub fn group_points<T: Real>(model: &SceneModel<T>, points: Vec<[f64; 3]>) -> Result<Grouping> {
    let slots = model.config.slots;
    let c = model.config.motion_channels;
    let ids = group_ids(model, &points)?;
    let mut counts = vec![0usize; slots];
    let mut sums = vec![vec![0.0f64; c]; slots];
    for (chunk, idc) in points.chunks(CHUNK).zip(ids.chunks(CHUNK)) {
        let tape = Tape::new();
        let g = model.graph(&tape, false);
        let f = g.lagrangian_features(points_var(&tape, chunk)).value();
        for (i, &s) in idc.iter().enumerate() {
            counts[s] += 1;
            for (acc, v) in sums[s].iter_mut().zip(f.row(i)) {
                *acc += v.to_f64().unwrap();
            }
        }
    }
    let features = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                Vec::new()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect();
    Ok(Grouping {
        points,
        ids,
        counts,
        features,
    })
}

/// Canonical-to-world poses decoded from one group feature at `times`.
pub fn decode_trajectory<T: Real>(model: &SceneModel<T>, feature: &[f64], times: &[f64]) -> Result<PoseSequence> {
    let n = times.len();
    let c = feature.len();
    let tape = Tape::new();
    let g = model.graph(&tape, false);
    let data = (0..n).flat_map(|_| feature.iter().map(|&v| crate::autodiff::lit(v))).collect();
    let f = tape.constant(Tensor::from_parts(vec![n, c], data));
    let (rot, trans, _) = g.lagrangian_motion(f, times_var(&tape, times))?;
    let (r, t) = (rot.value(), trans.value());
    let f64s = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>();
    let poses = (0..n)
        .map(|i| RigidTransformSE3::from_row_major(&f64s(r.row(i)), &f64s(t.row(i))).to_pose())
        .collect();
    PoseSequence::new(times.to_vec(), poses)
}

/// One trajectory per non-empty slot, in the order of [`Grouping::nonempty`].
pub fn build_motion_sequences<T: Real>(
    model: &SceneModel<T>,
    grouping: &Grouping,
    n_times: usize,
) -> Result<Vec<PoseSequence>> {
    let times = linspace_times(n_times);
    grouping
        .nonempty()
        .into_iter()
        .map(|s| decode_trajectory(model, &grouping.features[s], &times))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeStep {
    /// 1-based.
    pub step: usize,
    /// Cluster that survives; it has the larger member count.
    pub kept: usize,
    pub absorbed: usize,
    pub cost: f64,
}

/// Greedy agglomeration down to one cluster. Clusters are named by the
/// index of the sequence they started from.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTrace {
    pub steps: Vec<MergeStep>,
    /// Number of leading merges to apply.
    pub stop: usize,
}

impl MergeTrace {
    pub fn costs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.cost).collect()
    }

    /// Cluster of every input sequence after the first `stop` merges.
    pub fn clusters(&self, n: usize) -> Vec<usize> {
        let mut owner: Vec<usize> = (0..n).collect();
        for s in &self.steps[..self.stop] {
            for o in owner.iter_mut() {
                if *o == s.absorbed {
                    *o = s.kept;
                }
            }
        }
        owner
    }

    /// Tab-separated table with a header row; the stop step is a trailing comment.
    pub fn to_table(&self) -> String {
        let mut s = String::from("step\tkept\tabsorbed\tcost\n");
        for m in &self.steps {
            writeln!(s, "{}\t{}\t{}\t{:.9e}", m.step, m.kept, m.absorbed, m.cost).unwrap();
        }
        writeln!(s, "# stop = {}", self.stop).unwrap();
        s
    }
}

/// Merges the two clusters with the smallest APE between their
/// representatives until one is left. The larger cluster's representative
/// survives; ties go to the lower index. `counts` gives each sequence's
/// member count. Fewer than two sequences give an empty trace.
pub fn merge_groups(sequences: &[PoseSequence], counts: &[usize]) -> Result<MergeTrace> {
    let n = sequences.len();
    if counts.len() != n {
        return Err(Error::Shape(format!("{n} sequences but {} counts", counts.len())));
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = ape(&sequences[i], &sequences[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Cluster id → (representative sequence, member count).
    let mut alive: Vec<Option<(usize, usize)>> = (0..n).map(|i| Some((i, counts[i]))).collect();
    let mut steps = Vec::new();
    while alive.iter().filter(|a| a.is_some()).count() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let Some((ri, _)) = alive[i] else { continue };
            for j in i + 1..n {
                let Some((rj, _)) = alive[j] else { continue };
                let d = dist[ri][rj];
                if best.map_or(true, |(b, _, _)| d < b) {
                    best = Some((d, i, j));
                }
            }
        }
        let (cost, i, j) = best.expect("two clusters alive");
        let (ci, cj) = (alive[i].unwrap(), alive[j].unwrap());
        let (kept, absorbed) = if cj.1 > ci.1 { (j, i) } else { (i, j) };
        let rep = alive[kept].unwrap().0;
        alive[kept] = Some((rep, ci.1 + cj.1));
        alive[absorbed] = None;
        steps.push(MergeStep {
            step: steps.len() + 1,
            kept,
            absorbed,
            cost,
        });
    }
    let stop = choose_stop(&steps.iter().map(|s| s.cost).collect::<Vec<_>>());
    Ok(MergeTrace { steps, stop })
}

/// Number of merges to keep: the step just before the largest cost increase.
///
/// Ties pick the earliest increase. A trace shorter than two gives 0. When
/// every cost is at most [`ZERO_COST`] all groups move alike and everything
/// is merged.
pub fn choose_stop(costs: &[f64]) -> usize {
    if costs.len() < 2 {
        return 0;
    }
    if costs.iter().all(|&c| c <= ZERO_COST) {
        return costs.len();
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 1..costs.len() {
        let inc = costs[k] - costs[k - 1];
        if inc > best.0 {
            best = (inc, k);
        }
    }
    best.1
}

/// One rigid part after merging.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub id: usize,
    /// Canonical member points. Empty when loaded from an export.
    pub members: Vec<[f64; 3]>,
    pub count: usize,
    pub centroid: [f64; 3],
    /// Canonical bounding box of the members.
    pub bounds: Aabb,
    /// Representative group feature. Empty when loaded from an export.
    pub feature: Vec<f64>,
    /// Canonical-to-world pose over time.
    pub trajectory: PoseSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartModel {
    pub parts: Vec<Part>,
    /// Part of each slot. Slots without members follow the nearest populated slot key.
    pub slot_to_part: Vec<usize>,
}

/// Distinct colors for part labels; label 0 is background.
pub fn label_color(label: u32) -> [f64; 3] {
    if label == 0 {
        return [0.0; 3];
    }
    let h = (label as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.2],
        1 => [x, 1.0, 0.2],
        2 => [0.2, 1.0, x],
        3 => [0.2, x, 1.0],
        4 => [x, 0.2, 1.0],
        _ => [1.0, 0.2, x],
    }
}

impl PartModel {
    pub fn part_of_slot(&self, slot: usize) -> usize {
        self.slot_to_part[slot]
    }

    /// Part of each canonical point.
    pub fn classify<T: Real>(&self, model: &SceneModel<T>, points: &[[f64; 3]]) -> Result<Vec<usize>> {
        Ok(group_ids(model, points)?.into_iter().map(|s| self.slot_to_part[s]).collect())
    }

    /// Writes `parts.txt` and one trajectory table per part into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = String::from("id\tmembers\tcx\tcy\tcz\tmin_x\tmin_y\tmin_z\tmax_x\tmax_y\tmax_z\ttrajectory\n");
        for p in &self.parts {
            let file = part_trajectory_name(p.id);
            p.trajectory.save(&dir.join(&file))?;
            let v: Vec<String> = p
                .centroid
                .iter()
                .chain(&p.bounds.min)
                .chain(&p.bounds.max)
                .map(|x| format!("{x:.17e}"))
                .collect();
            writeln!(s, "{}\t{}\t{}\t{}", p.id, p.count, v.join("\t"), file).unwrap();
        }
        let slots: Vec<String> = self.slot_to_part.iter().map(|x| x.to_string()).collect();
        writeln!(s, "# slots = {}", slots.join(" ")).unwrap();
        let path = dir.join(PARTS_FILE);
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    /// Reads an export written by [`PartModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PARTS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |ln: usize, m: String| Error::format(&path, format!("line {}: {m}", ln + 1));
        let mut parts = Vec::new();
        let mut slot_to_part = None;
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# slots =") {
                let v: std::result::Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
                slot_to_part = Some(v.map_err(|e| bad(ln, e.to_string()))?);
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 12 {
                return Err(bad(ln, format!("expected 12 columns, got {}", cols.len())));
            }
            let id: usize = cols[0].parse().map_err(|e| bad(ln, format!("{e}")))?;
            let count: usize = cols[1].parse().map_err(|e| bad(ln, format!("{e}")))?;
            let v: Vec<f64> = cols[2..11]
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(ln, e.to_string()))?;
            if id != parts.len() {
                return Err(bad(ln, format!("part ids must be 0, 1, …; found {id}")));
            }
            parts.push(Part {
                id,
                members: Vec::new(),
                count,
                centroid: [v[0], v[1], v[2]],
                bounds: Aabb::new([v[3], v[4], v[5]], [v[6], v[7], v[8]])?,
                feature: Vec::new(),
                trajectory: PoseSequence::load(&dir.join(cols[11]))?,
            });
        }
        let slot_to_part = slot_to_part.ok_or_else(|| Error::format(&path, "missing `# slots =` line"))?;
        if parts.is_empty() || slot_to_part.iter().any(|&p| p >= parts.len()) {
            return Err(Error::format(&path, "slot table references missing parts"));
        }
        Ok(Self { parts, slot_to_part })
    }
}

pub const PARTS_FILE: &str = "parts.txt";

pub fn part_trajectory_name(id: usize) -> String {
    format!("part_{id}.txt")
}

/// Turns the merged grouping into parts, numbered by first appearance among
/// non-empty slots.
pub fn extract_parts<T: Real>(
    model: &SceneModel<T>,
    grouping: &Grouping,
    trace: &MergeTrace,
    n_times: usize,
) -> Result<PartModel> {
    let nonempty = grouping.nonempty();
    if nonempty.is_empty() {
        return Err(Error::EmptyScene(0.0));
    }
    let clusters = trace.clusters(nonempty.len());
    let mut cluster_ids: Vec<usize> = Vec::new();
    for &c in &clusters {
        if !cluster_ids.contains(&c) {
            cluster_ids.push(c);
        }
    }
    let slots = grouping.counts.len();
    let mut slot_to_part = vec![usize::MAX; slots];
    for (k, &s) in nonempty.iter().enumerate() {
        slot_to_part[s] = cluster_ids.iter().position(|&c| c == clusters[k]).unwrap();
    }
    // Empty slots follow the nearest populated slot in key space.
    let keys = slot_keys(model);
    for s in 0..slots {
        if slot_to_part[s] != usize::MAX {
            continue;
        }
        let nearest = nonempty
            .iter()
            .copied()
            .min_by(|&a, &b| dist2(&keys[s], &keys[a]).total_cmp(&dist2(&keys[s], &keys[b])))
            .unwrap();
        slot_to_part[s] = slot_to_part[nearest];
    }
    let times = linspace_times(n_times);
    let mut parts = Vec::with_capacity(cluster_ids.len());
    for (id, &rep) in cluster_ids.iter().enumerate() {
        let members: Vec<[f64; 3]> = grouping
            .points
            .iter()
            .zip(&grouping.ids)
            .filter(|(_, &s)| slot_to_part[s] == id && grouping.counts[s] > 0)
            .map(|(p, _)| *p)
            .collect();
        let feature = grouping.features[nonempty[rep]].clone();
        let trajectory = decode_trajectory(model, &feature, &times)?;
        let count = members.len();
        let mut centroid = [0.0; 3];
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &members {
            for a in 0..3 {
                centroid[a] += p[a] / count as f64;
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        parts.push(Part {
            id,
            members,
            count,
            centroid,
            bounds: Aabb::new(min, max)?,
            feature,
            trajectory,
        });
    }
    Ok(PartModel { parts, slot_to_part })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn slot_keys<T: Real>(model: &SceneModel<T>) -> Vec<Vec<f64>> {
    let s = model.store.get(model.ids.slots);
    let w = model.store.get(model.ids.w_key);
    let k = crate::autodiff::matmul_raw(s.data(), w.data(), s.rows(), s.cols(), w.cols());
    k.chunks(w.cols())
        .map(|r| r.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

/// Everything the part pipeline produces.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub grouping: Grouping,
    pub sequences: Vec<PoseSequence>,
    pub trace: MergeTrace,
    pub parts: PartModel,
}

/// Occupancy sampling, grouping, motion decoding, merging and extraction.
pub fn discover_parts<T: Real>(model: &SceneModel<T>, opts: &PartOptions) -> Result<Discovery> {
    let points = sample_occupied_points(model, opts.lattice_res, opts.density_eps)?;
    let grouping = group_points(model, points)?;
    let sequences = build_motion_sequences(model, &grouping, opts.n_times)?;
    let counts: Vec<usize> = grouping.nonempty().iter().map(|&s| grouping.counts[s]).collect();
    let trace = merge_groups(&sequences, &counts)?;
    let parts = extract_parts(model, &grouping, &trace, opts.n_times)?;
    Ok(Discovery {
        grouping,
        sequences,
        trace,
        parts,
    })
}

/// The model's Eulerian rendering with part labels attached.
pub struct PartField<'a, T> {
    pub field: ModelField<'a, T>,
    pub parts: &'a PartModel,
}

impl<T: Real> SceneField for PartField<'_, T> {
    fn eval(&self, points: &[[f64; 3]], dirs: &[[f64; 3]], time: f64) -> Result<FieldSamples> {
        let (mut s, canonical) = self.field.eval_canonical(points, dirs, time)?;
        let idx: Vec<usize> = (0..points.len()).filter(|&i| canonical[i].is_some()).collect();
        let xc: Vec<[f64; 3]> = idx.iter().map(|&i| canonical[i].unwrap()).collect();
        let mut labels = vec![0u32; points.len()];
        if !xc.is_empty() {
            for (&i, p) in idx.iter().zip(self.parts.classify(self.field.model, &xc)?) {
                labels[i] = p as u32 + 1;
            }
        }
        s.labels = Some(labels);
        Ok(s)
    }
}

/// Per-pixel part label (part id + 1, 0 for background).
pub fn render_segmentation<T: Real>(
    model: &SceneModel<T>,
    parts: &PartModel,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    time: f64,
    opts: &RenderOptions,
) -> Result<Vec<u32>> {
    let field = PartField {
        field: ModelField { model, occupancy },
        parts,
    };
    let img = render_image(&field, camera, time, opts)?;
    Ok(img.labels.expect("part field reports labels"))
}

/// Rigid transform written as translation plus axis-angle rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditPose {
    pub translation: [f64; 3],
    pub axis: [f64; 3],
    pub degrees: f64,
}

impl Default for EditPose {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            axis: [0.0, 0.0, 1.0],
            degrees: 0.0,
        }
    }
}

impl EditPose {
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&axis_angle(Vector3::from(self.axis), self.degrees.to_radians()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(self.translation));
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditOp {
    Remove { part: usize },
    /// Adds a copy placed at `offset · P(t)`.
    Duplicate { part: usize, offset: EditPose },
    /// Scales the part about its canonical centroid.
    Rescale { part: usize, factor: f64 },
    /// Keyframe of a canonical-to-world pose replacing the learned trajectory.
    Repose { part: usize, time: f64, pose: EditPose },
}

impl EditOp {
    pub fn part(&self) -> usize {
        match self {
            EditOp::Remove { part }
            | EditOp::Duplicate { part, .. }
            | EditOp::Rescale { part, .. }
            | EditOp::Repose { part, .. } => *part,
        }
    }
}

/// Ordered edit operations.
///
/// Text form, one operation per line, `#` comments:
///
/// ```text
/// remove part=1
/// duplicate part=0 tx=0 ty=0 tz=0.6 ax=0 ay=0 az=1 deg=0
/// rescale part=0 factor=1.5
/// repose part=1 t=0 tx=0 ty=0 tz=0 deg=0
/// repose part=1 t=1 tx=0 ty=0.3 tz=0 deg=90
/// ```
///
/// Omitted pose fields default to zero translation and no rotation about z.
/// `remove` drops every instance of the part declared so far. `rescale` and
/// `repose` apply to all instances, including later duplicates. Repose
/// keyframes of one part are interpolated in time (slerp for rotation) and
/// held constant outside their range.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("edit script line {}: {m}", ln + 1));
            let mut words = line.split_whitespace();
            let verb = words.next().unwrap();
            let mut fields = std::collections::BTreeMap::new();
            for w in words {
                let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got {w:?}")))?;
                let v: f64 = v.parse().map_err(|_| err(format!("{k}: not a number: {v:?}")))?;
                if !v.is_finite() {
                    return Err(err(format!("{k} must be finite")));
                }
                if fields.insert(k.to_string(), v).is_some() {
                    return Err(err(format!("{k} given twice")));
                }
            }
            let allowed: &[&str] = match verb {
                "remove" => &["part"],
                "duplicate" => &["part", "tx", "ty", "tz", "ax", "ay", "az", "deg"],
                "rescale" => &["part", "factor"],
                "repose" => &["part", "t", "tx", "ty", "tz", "ax", "ay", "az", "deg"],
                _ => return Err(err(format!("unknown operation {verb:?}"))),
            };
            if let Some(k) = fields.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(err(format!("{verb} takes no field {k:?}")));
            }
            let get = |k: &str, d: Option<f64>| fields.get(k).copied().or(d).ok_or_else(|| err(format!("missing {k}")));
            let p = get("part", None)?;
            if p < 0.0 || p.fract() != 0.0 {
                return Err(err(format!("part must be a non-negative integer, got {p}")));
            }
            let part = p as usize;
            let pose = || -> Result<EditPose> {
                Ok(EditPose {
                    translation: [get("tx", Some(0.0))?, get("ty", Some(0.0))?, get("tz", Some(0.0))?],
                    axis: [get("ax", Some(0.0))?, get("ay", Some(0.0))?, get("az", Some(1.0))?],
                    degrees: get("deg", Some(0.0))?,
                })
            };
            let op = match verb {
                "remove" => EditOp::Remove { part },
                "duplicate" => EditOp::Duplicate { part, offset: pose()? },
                "rescale" => {
                    let factor = get("factor", None)?;
                    if factor <= 0.0 {
                        return Err(err("factor must be positive".into()));
                    }
                    EditOp::Rescale { part, factor }
                }
                _ => {
                    let time = get("t", None)?;
                    if !(0.0..=1.0).contains(&time) {
                        return Err(err("t must lie in [0, 1]".into()));
                    }
                    EditOp::Repose { part, time, pose: pose()? }
                }
            };
            if let EditOp::Duplicate { offset: o, .. } | EditOp::Repose { pose: o, .. } = &op {
                if o.degrees != 0.0 && Vector3::from(o.axis).norm() < 1e-12 {
                    return Err(err("rotation axis is zero".into()));
                }
            }
            ops.push(op);
        }
        Ok(Self { ops })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Rejects references to parts that do not exist.
    pub fn validate(&self, parts: &PartModel) -> Result<()> {
        match self.ops.iter().find(|op| op.part() >= parts.parts.len()) {
            Some(op) => Err(Error::UnknownPart(op.part())),
            None => Ok(()),
        }
    }
}

/// One rendered copy of a part.
#[derive(Clone, Debug, PartialEq)]
struct Instance {
    part: usize,
    offset: Matrix4<f64>,
    /// Written into segmentation labels.
    label: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PartEdit {
    scale: f64,
    keyframes: Vec<(f64, Matrix4<f64>)>,
}

/// A scene rendered with edits applied. Unedited parts keep the Eulerian
/// path; edited parts and copies follow their Lagrangian trajectories.
pub struct EditedField<'a, T> {
    pub base: ModelField<'a, T>,
    pub parts: &'a PartModel,
    /// Parts still rendered through the base path.
    base_parts: Vec<bool>,
    instances: Vec<Instance>,
    edits: Vec<PartEdit>,
    noop: bool,
}

/// Validates `script` and prepares the edited scene.
pub fn apply_edit<'a, T: Real>(
    base: ModelField<'a, T>,
    parts: &'a PartModel,
    script: &EditScript,
) -> Result<EditedField<'a, T>> {
    script.validate(parts)?;
    let n = parts.parts.len();
    let mut edits = vec![
        PartEdit {
            scale: 1.0,
            keyframes: Vec::new()
        };
        n
    ];
    let mut instances: Vec<Instance> = (0..n)
        .map(|p| Instance {
            part: p,
            offset: Matrix4::identity(),
            label: p as u32 + 1,
        })
        .collect();
    let mut next_label = n as u32 + 1;
    for op in &script.ops {
        match op {
            EditOp::Remove { part } => instances.retain(|i| i.part != *part),
            EditOp::Duplicate { part, offset } => {
                instances.push(Instance {
                    part: *part,
                    offset: offset.matrix(),
                    label: next_label,
                });
                next_label += 1;
            }
            EditOp::Rescale { part, factor } => edits[*part].scale *= factor,
            EditOp::Repose { part, time, pose } => {
                let k = &mut edits[*part].keyframes;
                k.retain(|(t, _)| t != time);
                k.push((*time, pose.matrix()));
                k.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
        }
    }
    let edited: Vec<bool> = edits.iter().map(|e| e.scale != 1.0 || !e.keyframes.is_empty()).collect();
    let mut base_parts = vec![false; n];
    let mut rest = Vec::new();
    for inst in instances {
        if inst.offset == Matrix4::identity() && inst.label == inst.part as u32 + 1 && !edited[inst.part] {
            base_parts[inst.part] = true;
        } else {
            rest.push(inst);
        }
    }
    Ok(EditedField {
        base,
        parts,
        noop: script.ops.is_empty(),
        base_parts,
        instances: rest,
        edits,
    })
}

fn interpolate(keys: &[(f64, Matrix4<f64>)], t: f64) -> Matrix4<f64> {
    let i = keys.partition_point(|(kt, _)| *kt <= t);
    if i == 0 {
        return keys[0].1;
    }
    if i == keys.len() {
        return keys[i - 1].1;
    }
    let (t0, a) = keys[i - 1];
    let (t1, b) = keys[i];
    let s = (t - t0) / (t1 - t0);
    let rot = |m: &Matrix4<f64>| {
        UnitQuaternion::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned())
    };
    let q = rot(&a).slerp(&rot(&b), s);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(q.to_rotation_matrix().matrix());
    let ta = a.fixed_view::<3, 1>(0, 3);
    let tb = b.fixed_view::<3, 1>(0, 3);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(ta * (1.0 - s) + tb * s));
    m
}

/// Pose at `t` by interpolating the samples of `seq`.
pub fn trajectory_at(seq: &PoseSequence, t: f64) -> Matrix4<f64> {
    let keys: Vec<(f64, Matrix4<f64>)> = seq.times.iter().copied().zip(seq.poses.iter().copied()).collect();
    interpolate(&keys, t)
}

impl<T: Real> EditedField<'_, T> {
    /// Canonical-to-world placement of `part` at `t`, edits included.
    fn placement(&self, part: usize, t: f64) -> Matrix4<f64> {
        let e = &self.edits[part];
        if e.keyframes.is_empty() {
            trajectory_at(&self.parts.parts[part].trajectory, t)
        } else {
            interpolate(&e.keyframes, t)
        }
    }

    /// Full canonical-to-world map of an instance: offset, placement, scaling.
    fn instance_matrix(&self, inst: &Instance, t: f64) -> Matrix4<f64> {
        let p = &self.parts.parts[inst.part];
        let s = self.edits[inst.part].scale;
        let c = Vector3::from(p.centroid);
        let mut scale = Matrix4::identity() * s;
        scale[(3, 3)] = 1.0;
        scale.fixed_view_mut::<3, 1>(0, 3).copy_from(&(c * (1.0 - s)));
        inst.offset * self.placement(inst.part, t) * scale
    }

    /// Box to march when rendering the edited scene at `time`.
    pub fn render_aabb(&self, base: &Aabb, time: f64) -> Aabb {
        let mut min = base.min;
        let mut max = base.max;
        for inst in &self.instances {
            let b = &self.parts.parts[inst.part].bounds;
            let m = self.instance_matrix(inst, time);
            for corner in 0..8 {
                let p = [0, 1, 2].map(|a| if corner >> a & 1 == 1 { b.max[a] } else { b.min[a] });
                let w = m * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
                for a in 0..3 {
                    min[a] = min[a].min(w[a]);
                    max[a] = max[a].max(w[a]);
                }
            }
        }
        Aabb { min, max }
    }

    fn eval_edited(&self, points: &[[f64; 3]], dirs: &[[f64; 3]], time: f64) -> Result<FieldSamples> {
        let model = self.base.model;
        let n = points.len();
        let (mut out, canonical) = self.base.eval_canonical(points, dirs, time)?;
        let mut labels = vec![0u32; n];
        let idx: Vec<usize> = (0..n).filter(|&i| canonical[i].is_some()).collect();
        let xc: Vec<[f64; 3]> = idx.iter().map(|&i| canonical[i].unwrap()).collect();
        let owners = if xc.is_empty() { Vec::new() } else { self.parts.classify(model, &xc)? };
        for (&i, &p) in idx.iter().zip(&owners) {
            if self.base_parts[p] {
                labels[i] = p as u32 + 1;
            } else {
                out.sigma[i] = 0.0;
                out.rgb[i] = [0.0; 3];
            }
        }
        // Per sample: the strongest contribution's density for labelling.
        let mut best = out.sigma.clone();
        let mut weighted: Vec<[f64; 3]> = (0..n).map(|i| out.rgb[i].map(|c| c * out.sigma[i])).collect();
        let aabb = model.config.aabb;
        for inst in &self.instances {
            let inv = rigid_or_general_inverse(&self.instance_matrix(inst, time));
            let mut sel = Vec::new();
            let mut local = Vec::new();
            for (i, p) in points.iter().enumerate() {
                let q = inv * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
                let q = [q[0], q[1], q[2]];
                if aabb.contains(q) {
                    sel.push(i);
                    local.push(q);
                }
            }
            if sel.is_empty() {
                continue;
            }
            let owners = self.parts.classify(model, &local)?;
            let ldirs: Vec<[f64; 3]> = sel.iter().map(|&i| dirs[i]).collect();
            let vals = model.canonical_query(&local, &ldirs);
            for (k, &i) in sel.iter().enumerate() {
                if owners[k] != inst.part {
                    continue;
                }
                let (rgb, s) = vals[k];
                out.sigma[i] += s;
                for c in 0..3 {
                    weighted[i][c] += rgb[c] * s;
                }
                if s > best[i] || labels[i] == 0 {
                    best[i] = s;
                    labels[i] = inst.label;
                }
            }
        }
        for i in 0..n {
            if out.sigma[i] > 0.0 {
                out.rgb[i] = weighted[i].map(|c| c / out.sigma[i]);
            }
        }
        out.labels = Some(labels);
        Ok(out)
    }
}

/// Inverse of a placement that may include uniform scaling.
fn rigid_or_general_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    m.try_inverse().unwrap_or_else(|| rigid_inverse(m))
}

impl<T: Real> SceneField for EditedField<'_, T> {
    fn eval(&self, points: &[[f64; 3]], dirs: &[[f64; 3]], time: f64) -> Result<FieldSamples> {
        if self.noop {
            return self.base.eval(points, dirs, time);
        }
        self.eval_edited(points, dirs, time)
    }
}

/// Renders the edited scene, widening the marched box to cover moved parts.
pub fn render_edited<T: Real>(
    field: &EditedField<'_, T>,
    camera: &Camera,
    time: f64,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    if field.noop {
        return render_image(field, camera, time, opts);
    }
    let mut o = opts.clone();
    o.aabb = field.render_aabb(&opts.aabb, time);
    // Keep the marching step of the unedited scene.
    let scale = o.aabb.diagonal() / opts.aabb.diagonal();
    o.samples_per_ray = ((opts.samples_per_ray as f64) * scale).ceil() as usize;
    render_image(field, camera, time, &o)
}

/// Merge trace file inside a `parts` output directory.
pub fn trace_path(dir: &Path) -> PathBuf {
    dir.join("merge_trace.tsv")
}

/// Index of the label with most pixels in `labels`, ignoring background.
pub fn dominant_label(labels: &[u32]) -> Option<u32> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max as usize + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts[0] = 0;
    let best = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    (counts[best] > 0).then_some(best as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(poses: &[Matrix4<f64>]) -> PoseSequence {
        PoseSequence::new(linspace_times(poses.len()), poses.to_vec()).unwrap()
    }

    fn shifted(x: f64, n: usize) -> PoseSequence {
        let mut m = Matrix4::identity();
        m[(0, 3)] = x;
        seq(&vec![m; n])
    }

    #[test]
    fn stop_rule_examples() {
        assert_eq!(choose_stop(&[0.10, 0.12, 0.15, 2.0]), 3);
        assert_eq!(choose_stop(&[0.1, 0.11, 0.12]), 1);
        assert_eq!(choose_stop(&[0.0, 0.0, 5.0]), 2);
        assert_eq!(choose_stop(&[3.0]), 0);
        assert_eq!(choose_stop(&[]), 0);
        assert_eq!(choose_stop(&[0.0, 0.0, 0.0]), 3);
    }

    #[test]
    fn identical_pair_merges_first() {
        let s = vec![shifted(0.0, 4), shifted(1.0, 4), shifted(0.0, 4)];
        let t = merge_groups(&s, &[5, 7, 9]).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].cost, 0.0);
        assert_eq!((t.steps[0].kept, t.steps[0].absorbed), (2, 0));
        assert_eq!(t.steps[1].cost, 4.0);
        assert_eq!(t.stop, 1);
        assert_eq!(t.clusters(3), vec![2, 1, 2]);
    }

    #[test]
    fn fewer_than_two_groups_give_empty_trace() {
        let t = merge_groups(&[shifted(0.0, 3)], &[1]).unwrap();
        assert!(t.steps.is_empty());
        assert_eq!(t.stop, 0);
    }

    #[test]
    fn script_parsing() {
        let s = EditScript::parse(
            "# edits\nremove part=1\nduplicate part=0 tz=0.5\nrescale part=0 factor=2 # bigger\nrepose part=0 t=1 deg=90\n",
        )
        .unwrap();
        assert_eq!(s.ops.len(), 4);
        assert_eq!(s.ops[0], EditOp::Remove { part: 1 });
        match &s.ops[1] {
            EditOp::Duplicate { part: 0, offset } => assert_eq!(offset.translation, [0.0, 0.0, 0.5]),
            o => panic!("{o:?}"),
        }
        for bad in [
            "explode part=0",
            "remove",
            "remove part=1.5",
            "rescale part=0 factor=-1",
            "repose part=0 t=2",
            "remove part=0 tx=1",
            "duplicate part=0 ax=0 az=0 deg=10",
        ] {
            assert!(EditScript::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn keyframes_interpolate() {
        let a = EditPose::default().matrix();
        let b = EditPose {
            translation: [2.0, 0.0, 0.0],
            axis: [0.0, 0.0, 1.0],
            degrees: 90.0,
        }
        .matrix();
        let keys = vec![(0.0, a), (1.0, b)];
        let m = interpolate(&keys, 0.5);
        assert!((m[(0, 3)] - 1.0).abs() < 1e-12);
        let expect = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_4);
        assert!((m.fixed_view::<3, 3>(0, 0) - expect).norm() < 1e-12);
        assert_eq!(interpolate(&keys, -1.0), a);
        assert_eq!(interpolate(&keys, 3.0), b);
    }

    #[test]
    fn dominant_label_ignores_background() {
        assert_eq!(dominant_label(&[0, 0, 0, 2, 2, 1]), Some(2));
        assert_eq!(dominant_label(&[0, 0]), None);
    }
}
