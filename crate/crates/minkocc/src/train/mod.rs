//! Two-phase training: warm-start on voxel ground truth, then accumulated
//! LiDAR occupancy plus rendered 2D supervision. Owns the optimizer loop,
//! augmentation, CSV logging, checkpoint/resume, evaluation and benching.

mod augment;
mod checkpoint;

pub use augment::{
    apply_transform3, apply_warp2, augment_2d, augment_3d, draw_warp2, Augment3Config, Sample,
    Transform3, Warp2, Warp2Config,
};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{FREE_CLASS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{Camera, FusionConfig, FusionNet, PointCloud, VoxelReduction};
use crate::genunet::{
    occupancy_targets, to_dense_labels, CoordSet, DecodeResult, GenUNet, UNetConfig,
};
use crate::grid::{DenseVoxelGrid, GridConfig};
use crate::losses::{
    class_balanced_ce, occupancy_bce, soft_ce_2d, total_loss, ClassBalance, PhaseSchedule,
    SemanticLoss, BETA, LAMBDA1, LAMBDA2,
};
use crate::metrics::{
    lidar_rays, ConfusionCounts, EvalReport, MiouResult, RayIouAccum, RAYIOU_THRESHOLDS,
};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::params::{glorot2, Binder, ParamStore, StatsStore};
use crate::renderer::{
    class_map_to_ppm, depth_to_ppm, render_features, spheres_from_voxels, write_ppm, NeuralShade,
    RenderConfig, Rendered,
};
use crate::sim::{Dataset, Manifest, Pose};
use crate::sparse::ops::SparseVar;
use crate::sparse::Coordinate;
use crate::tape::{Arr, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaUnit {
    /// Warm-start batches draw from every training frame.
    Steps,
    /// Warm-start batches draw only from the first ceil(alpha * n) training
    /// frames, as if only that fraction of scenes carried voxel labels. The
    /// phase switch happens at the same step either way.
    Scenes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub fusion: FusionConfig,
    pub unet_channels: Vec<usize>,
    pub kernel: usize,
    pub prune_threshold: f64,
    pub shade_hidden: [usize; 2],
    /// Raw bias of the radius head; softplus(-1) + r_min keeps new spheres
    /// small.
    pub radius_bias: f64,
    /// Raw bias of the opacity head; sigmoid(1) starts spheres mostly solid.
    pub opacity_bias: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            fusion: FusionConfig {
                backbone_channels: [8, 16, 32],
                attr_dim: 2,
                hidden: 32,
                out_channels: 16,
                reduction: VoxelReduction::Mean,
            },
            unet_channels: vec![16, 32, 64],
            kernel: 3,
            prune_threshold: 0.5,
            shade_hidden: [16, 16],
            radius_bias: -1.0,
            opacity_bias: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the schedule (or of the scenes, see `alpha_unit`) under
    /// 3D supervision.
    pub alpha: f64,
    pub alpha_unit: AlphaUnit,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub grad_clip_norm: f64,
    /// Steps on each side of the phase switch where clipping is active.
    pub clip_window: u64,
    pub grid_preset: String,
    pub model: ModelSpec,
    pub render: RenderConfig,
    pub augment3: Augment3Config,
    pub augment2: Warp2Config,
    /// Checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 2,
            lr: 1e-3,
            alpha: 1.0,
            alpha_unit: AlphaUnit::Steps,
            lambda1: LAMBDA1,
            lambda2: LAMBDA2,
            beta: BETA,
            grad_clip_norm: 1.0,
            clip_window: 50,
            grid_preset: "desk".to_string(),
            model: ModelSpec::default(),
            render: RenderConfig::default(),
            augment3: Augment3Config {
                flip: true,
                rotate: true,
                gt_dropout: 0.1,
            },
            augment2: Warp2Config::desk(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0,1)", self.beta)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        GridConfig::preset(&self.grid_preset)?;
        self.render.validate()?;
        self.augment3.validate()?;
        self.augment2.validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridConfig> {
        GridConfig::preset(&self.grid_preset)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<TrainConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))
    }
}

/// Deep-merges `patch` into `base`: objects merge key by key, anything else
/// replaces. Lets partial config files and overrides sit on top of the full
/// default document.
pub fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Applies one `path.to.field=value` override onto a JSON config document.
/// The value is parsed as JSON when possible and falls back to a string, so
/// `lr=0.001`, `grid_preset=paper` and `model.unet_channels=[8,16]` all work.
pub fn set_json_path(root: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {path:?}: {:?} is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            let v = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Frontend, sparse UNet and shading net plus the splat heads, assembled
/// from one spec so checkpoints can rebuild the exact architecture.
pub struct Model {
    pub spec: ModelSpec,
    pub grid: GridConfig,
    pub render: RenderConfig,
    pub fusion: FusionNet,
    pub unet: GenUNet,
    pub shade: NeuralShade,
}

impl Model {
    pub fn new(spec: ModelSpec, grid: GridConfig, render: RenderConfig) -> Result<Model> {
        render.validate()?;
        let ucfg = UNetConfig {
            in_channels: spec.fusion.out_channels,
            depth: spec.unet_channels.len(),
            channels: spec.unet_channels.clone(),
            kernel: spec.kernel,
            prune_threshold: spec.prune_threshold,
            num_classes: NUM_CLASSES,
        };
        let unet = GenUNet::new(ucfg)?;
        let shade = NeuralShade::new(spec.unet_channels[0], spec.shade_hidden, NUM_CLASSES);
        Ok(Model {
            fusion: FusionNet::new(spec.fusion),
            unet,
            shade,
            spec,
            grid,
            render,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Model> {
        Model::new(cfg.model.clone(), cfg.grid()?, cfg.render)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.fusion.init_params(store, rng, "fusion");
        self.unet.init_params(store, rng, "unet");
        self.shade.init_params(store, rng, "shade");
        let c = self.spec.unet_channels[0];
        store.insert("render.radius.w", glorot2(rng, c, 1));
        store.insert(
            "render.radius.b",
            Array2::from_elem((1, 1), self.spec.radius_bias).into_dyn(),
        );
        store.insert("render.opacity.w", glorot2(rng, c, 1));
        store.insert(
            "render.opacity.b",
            Array2::from_elem((1, 1), self.spec.opacity_bias).into_dyn(),
        );
    }

    /// Frontend + UNet on one sample: decoder levels, class logits and
    /// softmax probabilities over the output rows.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        stats: &StatsStore,
        sample: &Sample,
        teacher: Option<&[CoordSet]>,
        training: bool,
    ) -> Result<(DecodeResult<'t>, Var<'t>, Var<'t>)> {
        let images: Vec<ArrayD<f64>> =
            sample.images.iter().map(|i| i.clone().into_dyn()).collect();
        let feats = self.fusion.forward(
            binder,
            "fusion",
            &images,
            &sample.cameras,
            &sample.cloud,
            &self.grid,
            0,
        )?;
        self.unet.forward(binder, stats, "unet", &feats, teacher, training)
    }

    /// Splats the decoder output into one camera and shades it into
    /// per-pixel class logits.
    pub fn render_view<'t>(
        &self,
        binder: &Binder<'t>,
        out: &SparseVar<'t>,
        cam: &Camera,
    ) -> Result<(Rendered<'t>, Var<'t>)> {
        let n = out.len();
        let radius = out
            .feats
            .matmul(binder.var("render.radius.w")?)
            .add(binder.var("render.radius.b")?.broadcast_rows(n));
        let opacity = out
            .feats
            .matmul(binder.var("render.opacity.w")?)
            .add(binder.var("render.opacity.b")?.broadcast_rows(n));
        let cloud = spheres_from_voxels(out, radius, opacity, &self.grid, &self.render)?;
        let rendered = render_features(&cloud, cam, &self.render)?;
        let logits = self.shade.forward(binder, "shade", rendered.image)?;
        Ok((rendered, logits))
    }
}

/// Occupied ground-truth voxels split by the supervision mask: `kept` rows
/// the loss may use, `hidden` rows that must not be treated as positive or
/// negative anywhere (voxel dropout or unobserved space).
fn occupied_split(gt: &DenseVoxelGrid) -> (Vec<Coordinate>, Vec<Coordinate>) {
    let dims = gt.config.dims;
    let mut kept = Vec::new();
    let mut hidden = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if gt.labels[[x, y, z]] == FREE_CLASS {
                    continue;
                }
                let c = Coordinate::new(0, x as i32, y as i32, z as i32);
                if gt.mask[[x, y, z]] {
                    kept.push(c);
                } else {
                    hidden.push(c);
                }
            }
        }
    }
    (kept, hidden)
}

/// Stride-1 voxels touched by the accumulated point cloud, deduplicated.
fn cloud_occupancy(cloud: &PointCloud, grid: &GridConfig) -> Vec<Coordinate> {
    let mut set = CoordSet::new();
    for i in 0..cloud.xyz.shape()[0] {
        let p = [cloud.xyz[[i, 0]], cloud.xyz[[i, 1]], cloud.xyz[[i, 2]]];
        if let Some([x, y, z]) = grid.voxel_index(p) {
            set.insert(Coordinate::new(0, x as i32, y as i32, z as i32));
        }
    }
    set.into_iter().collect()
}

/// Keep-logit rows paired with 0/1 targets per decoder level. Rows whose
/// cell holds only unsupervisable occupancy are left out entirely; a cell
/// that also covers supervisable occupancy stays positive.
fn occupancy_pairs<'t>(
    dec: &DecodeResult<'t>,
    positive: &[CoordSet],
    excluded: &[CoordSet],
) -> Vec<(Var<'t>, Vec<f64>)> {
    debug_assert_eq!(dec.levels.len(), positive.len());
    let mut out = Vec::with_capacity(dec.levels.len());
    for (i, lvl) in dec.levels.iter().enumerate() {
        let mut rows: Vec<u32> = Vec::new();
        let mut targets = Vec::new();
        for (r, c) in lvl.tensor.coords.iter().enumerate() {
            if positive[i].contains(c) {
                rows.push(r as u32);
                targets.push(1.0);
            } else if excluded[i].contains(c) {
                continue;
            } else {
                rows.push(r as u32);
                targets.push(0.0);
            }
        }
        out.push((lvl.keep_logits.gather_rows(Rc::new(rows)), targets));
    }
    out
}

/// Decoder rows that land on supervisable ground truth, with their labels.
fn semantic_rows(coords: &[Coordinate], gt: &DenseVoxelGrid) -> (Vec<u32>, Vec<i32>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, c) in coords.iter().enumerate() {
        if c.batch != 0 || !gt.config.in_bounds([c.x, c.y, c.z]) {
            continue;
        }
        let idx = [c.x as usize, c.y as usize, c.z as usize];
        if !gt.mask[idx] {
            continue;
        }
        rows.push(r as u32);
        labels.push(gt.labels[idx]);
    }
    (rows, labels)
}

struct FrameLosses<'t> {
    sem: Var<'t>,
    bce: Var<'t>,
    total: Var<'t>,
}

#[allow(clippy::too_many_arguments)]
fn frame_loss<'t>(
    model: &Model,
    binder: &Binder<'t>,
    stats: &StatsStore,
    balance: &ClassBalance,
    schedule: &PhaseSchedule,
    step: u64,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<FrameLosses<'t>> {
    let tape = binder.tape();
    let depth = model.unet.cfg.depth;
    if schedule.is_warm(step) {
        let (kept, hidden) = occupied_split(&sample.gt);
        let teacher = occupancy_targets(&kept, depth);
        let excluded = occupancy_targets(&hidden, depth);
        let (dec, logits, _) = model.forward(binder, stats, sample, Some(&teacher), true)?;
        let bce = occupancy_bce(tape, &occupancy_pairs(&dec, &teacher, &excluded))?;
        let (rows, labels) = semantic_rows(&dec.output.coords, &sample.gt);
        let sem = class_balanced_ce(logits.gather_rows(Rc::new(rows)), &labels, balance)?;
        let total = total_loss(
            schedule,
            step,
            SemanticLoss::ThreeD(sem),
            bce,
            cfg.lambda1,
            cfg.lambda2,
        )?;
        Ok(FrameLosses { sem, bce, total })
    } else {
        let teacher = occupancy_targets(&cloud_occupancy(&sample.cloud, &model.grid), depth);
        let excluded = vec![CoordSet::new(); depth - 1];
        let (dec, _, _) = model.forward(binder, stats, sample, Some(&teacher), true)?;
        let bce = occupancy_bce(tape, &occupancy_pairs(&dec, &teacher, &excluded))?;
        let mut acc: Option<Var> = None;
        for (cam, pseudo) in sample.cameras.iter().zip(&sample.pseudo) {
            let (_, logits2d) = model.render_view(binder, &dec.output, cam)?;
            let l = soft_ce_2d(logits2d, pseudo)?;
            acc = Some(match acc {
                Some(a) => a.add(l),
                None => l,
            });
        }
        let sem = acc
            .ok_or_else(|| Error::Config("sample has no camera views".into()))?
            .mul_scalar(1.0 / sample.cameras.len() as f64);
        let total = total_loss(
            schedule,
            step,
            SemanticLoss::TwoD(sem),
            bce,
            cfg.lambda1,
            cfg.lambda2,
        )?;
        Ok(FrameLosses { sem, bce, total })
    }
}

#[derive(Debug)]
struct StepOutcome {
    l_sem: f64,
    l_bce: f64,
    total: f64,
    grad_norm: f64,
    clipped: bool,
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &Model,
    store: &mut ParamStore,
    stats: &StatsStore,
    adam: &mut Adam,
    balance: &ClassBalance,
    schedule: &PhaseSchedule,
    cfg: &TrainConfig,
    step: u64,
    batch: &[Sample],
    lr: f64,
    in_window: bool,
) -> Result<StepOutcome> {
    let (mut grad_map, l_sem, l_bce, total_v) = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &*store);
        let mut acc: Option<Var> = None;
        let mut sem_sum = 0.0;
        let mut bce_sum = 0.0;
        for sample in batch {
            let fl = frame_loss(model, &binder, stats, balance, schedule, step, sample, cfg)?;
            sem_sum += fl.sem.scalar_value();
            bce_sum += fl.bce.scalar_value();
            acc = Some(match acc {
                Some(a) => a.add(fl.total),
                None => fl.total,
            });
        }
        let total = acc
            .ok_or_else(|| Error::Config("empty batch".into()))?
            .mul_scalar(1.0 / batch.len() as f64);
        let l_sem = sem_sum / batch.len() as f64;
        let l_bce = bce_sum / batch.len() as f64;
        let total_v = total.scalar_value();
        let sem_name = if schedule.is_warm(step) { "l_3d" } else { "l_2d" };
        for (value, name) in [(l_sem, sem_name), (l_bce, "l_bce"), (total_v, "total")] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    component: name.to_string(),
                });
            }
        }
        let grads = tape.backward(total)?;
        (binder.grad_map(&grads), l_sem, l_bce, total_v)
    };
    let limit = if in_window {
        cfg.grad_clip_norm
    } else {
        f64::INFINITY
    };
    let (grad_norm, clipped) = clip_global_norm(&mut grad_map, limit);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            component: "grad_norm".to_string(),
        });
    }
    adam.step(store, &grad_map, lr);
    Ok(StepOutcome {
        l_sem,
        l_bce,
        total: total_v,
        grad_norm,
        clipped,
    })
}

const SALT_INIT: u64 = 1;
const SALT_DATA: u64 = 2;
const SALT_ORDER: u64 = 3;
const SALT_WARM_ORDER: u64 = 4;

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 step keeps derived streams decorrelated
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Frame index for a global batch slot: slots walk shuffled rounds of
/// 0..n, reshuffling whenever a round is exhausted. Pure in (seed, salt,
/// slot), so resuming needs no sampler state.
fn shuffled_index(seed: u64, salt: u64, n: usize, slot: u64) -> usize {
    let round = slot / n as u64;
    let pos = (slot % n as u64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, salt), round));
    order.shuffle(&mut rng);
    order[pos]
}

fn augment_sample(base: &Sample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let a3 = &cfg.augment3;
    let mut s = if a3.flip || a3.rotate || a3.gt_dropout > 0.0 {
        augment_3d(base, a3, rng)?
    } else {
        base.clone()
    };
    let a2 = &cfg.augment2;
    if a2.quarter_turns || a2.max_translate != 0 || a2.scale != (1.0, 1.0) || a2.rgb_jitter > 0.0 {
        for i in 0..s.cameras.len() {
            let (img, ps, cam) = augment_2d(&s.images[i], &s.pseudo[i], &s.cameras[i], a2, rng)?;
            s.images[i] = img;
            s.pseudo[i] = ps;
            s.cameras[i] = cam;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub steps: u64,
    pub warm_steps: u64,
    pub steps_per_epoch: usize,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_total: f64,
}

/// Runs the full schedule, writing `train_log.csv` and per-epoch
/// checkpoints under `out_dir`. `resume` continues from a checkpoint saved
/// by the same configuration; rows are appended to any existing log.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    if grid != dataset.manifest.grid {
        return Err(Error::Config(format!(
            "grid preset {:?} does not match the dataset grid",
            cfg.grid_preset
        )));
    }
    let model = Model::from_config(cfg)?;
    let config_json = cfg.to_json()?;
    let hash = config_hash(&config_json);

    let train_names = &dataset.manifest.splits.train;
    let n = train_names.len();
    if n == 0 {
        return Err(Error::Dataset("empty training split".into()));
    }
    let samples: Vec<Sample> = train_names
        .iter()
        .map(|nm| dataset.load_frame(nm).and_then(|f| Sample::from_frame(&f)))
        .collect::<Result<_>>()?;

    let spe = n.div_ceil(cfg.batch_size);
    let total_steps = (spe * cfg.epochs) as u64;
    let schedule = PhaseSchedule::new(cfg.alpha, total_steps)?;
    let warm_steps = schedule.warm_steps();
    let n_labeled = ((cfg.alpha * n as f64).ceil() as usize).min(n);
    let balance = ClassBalance::new(cfg.beta, dataset.manifest.class_counts.clone())?;

    let mut store = ParamStore::new();
    let stats;
    let mut adam;
    let mut rng;
    let start_step;
    match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config_hash != hash {
                return Err(Error::Config(
                    "checkpoint was written by a different configuration".into(),
                ));
            }
            if ck.step % spe as u64 != 0 || ck.step > total_steps {
                return Err(Error::Config(format!(
                    "checkpoint step {} is not an epoch boundary of this schedule",
                    ck.step
                )));
            }
            store = ck.params;
            stats = ck.stats;
            adam = ck.adam;
            rng = ck.rng;
            start_step = ck.step;
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_INIT));
            model.init_params(&mut store, &mut init_rng);
            stats = StatsStore::new();
            adam = Adam::new();
            rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_DATA));
            start_step = 0;
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let had_log = log_path.exists();
    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if !had_log {
        writeln!(
            log,
            "step,phase,lr,l_3d,l_2d,l_bce,total,grad_norm,in_clip_window,clipped"
        )
        .map_err(|e| Error::io(&log_path, e))?;
    }

    let start_epoch = (start_step / spe as u64) as usize;
    let mut checkpoints = Vec::new();
    let mut final_total = f64::NAN;
    for epoch in start_epoch..cfg.epochs {
        for s in 0..spe {
            let step = (epoch * spe + s) as u64;
            let warm = schedule.is_warm(step);
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for k in 0..cfg.batch_size {
                let slot = step * cfg.batch_size as u64 + k as u64;
                let idx = if warm && cfg.alpha_unit == AlphaUnit::Scenes {
                    shuffled_index(cfg.seed, SALT_WARM_ORDER, n_labeled, slot)
                } else {
                    shuffled_index(cfg.seed, SALT_ORDER, n, slot)
                };
                batch.push(augment_sample(&samples[idx], cfg, &mut rng)?);
            }
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let in_window = warm_steps > 0
                && warm_steps < total_steps
                && step.abs_diff(warm_steps) <= cfg.clip_window;
            let out = run_step(
                &model, &mut store, &stats, &mut adam, &balance, &schedule, cfg, step, &batch,
                lr, in_window,
            )?;
            final_total = out.total;
            let (c3, c2) = if warm {
                (format!("{:.6e}", out.l_sem), String::new())
            } else {
                (String::new(), format!("{:.6e}", out.l_sem))
            };
            writeln!(
                log,
                "{},{},{:.6e},{},{},{:.6e},{:.6e},{:.6e},{},{}",
                step,
                if warm { 1 } else { 2 },
                lr,
                c3,
                c2,
                out.l_bce,
                out.total,
                out.grad_norm,
                in_window as u8,
                out.clipped as u8
            )
            .map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            let step_now = ((epoch + 1) * spe) as u64;
            let path = out_dir.join(format!("ckpt_epoch_{:04}.mocc", epoch + 1));
            save_checkpoint(
                &path,
                &store,
                &adam,
                &stats,
                step_now,
                &rng,
                &grid,
                &config_json,
            )?;
            checkpoints.push(path);
        }
        eprintln!(
            "epoch {}/{}: step {} loss {:.4}",
            epoch + 1,
            cfg.epochs,
            (epoch + 1) * spe,
            final_total
        );
    }
    Ok(TrainOutput {
        steps: total_steps,
        warm_steps,
        steps_per_epoch: spe,
        log_path,
        checkpoints,
        final_total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
}

impl EvalSplit {
    fn names(self, m: &Manifest) -> &[String] {
        match self {
            EvalSplit::Train => &m.splits.train,
            EvalSplit::Val => &m.splits.val,
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalSplit> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train or val"
            ))),
        }
    }
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, TrainConfig)> {
    let cfg = TrainConfig::from_json(&ckpt.config_json)?;
    let grid = cfg.grid()?;
    if grid != ckpt.grid {
        return Err(Error::Config(
            "checkpoint grid does not match its stored configuration".into(),
        ));
    }
    Ok((Model::new(cfg.model.clone(), grid, cfg.render)?, cfg))
}

/// Single-sample inference to a dense label grid.
pub fn infer_dense(
    model: &Model,
    params: &ParamStore,
    stats: &StatsStore,
    sample: &Sample,
) -> Result<DenseVoxelGrid> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, params);
    let (dec, _, probs) = model.forward(&binder, stats, sample, None, false)?;
    let (grid_out, _) = to_dense_labels(&dec.output.coords, &probs.value(), &model.grid, 0);
    Ok(grid_out)
}

/// Voxel and ray metrics over one dataset split, using the simulated LiDAR
/// mount as the query ray protocol.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, split: EvalSplit) -> Result<EvalReport> {
    let (model, _) = model_from_checkpoint(ckpt)?;
    if model.grid != dataset.manifest.grid {
        return Err(Error::Config(
            "checkpoint grid does not match the dataset grid".into(),
        ));
    }
    let names = split.names(&dataset.manifest);
    if names.is_empty() {
        return Err(Error::Dataset("requested split is empty".into()));
    }
    let rig = &dataset.manifest.rig;
    let rays = lidar_rays(&Pose::identity(), rig.lidar_mount, &rig.beam);
    let mut counts = ConfusionCounts::zero();
    let mut ray_acc = RayIouAccum::new(&RAYIOU_THRESHOLDS)?;
    for name in names {
        let frame = dataset.load_frame(name)?;
        let sample = Sample::from_frame(&frame)?;
        let pred = infer_dense(&model, &ckpt.params, &ckpt.stats, &sample)?;
        counts.merge(&ConfusionCounts::count(
            &pred.labels,
            &frame.gt.labels,
            &frame.gt.mask,
        )?);
        ray_acc.add(&pred, &frame.gt, &rays)?;
    }
    Ok(EvalReport::new(
        MiouResult::from_counts(counts),
        ray_acc.finish(),
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub frames: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub peak_tape_bytes: usize,
    pub param_bytes: usize,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn to_table(&self) -> String {
        format!(
            "grid {}x{}x{} @ {} m, {} frames x {} repeats ({} warmup)\n\
             latency mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms\n\
             peak tape {} bytes, params {} bytes\n",
            self.grid_dims[0],
            self.grid_dims[1],
            self.grid_dims[2],
            self.voxel_size,
            self.frames,
            self.repeats,
            self.warmup,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.peak_tape_bytes,
            self.param_bytes
        )
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((sorted.len() as f64 * q).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Wall-clock per-frame inference latency over a split, dense grid
/// included; warmup passes are excluded from the statistics.
pub fn bench(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: EvalSplit,
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    let (model, _) = model_from_checkpoint(ckpt)?;
    if model.grid != dataset.manifest.grid {
        return Err(Error::Config(
            "checkpoint grid does not match the dataset grid".into(),
        ));
    }
    let names = split.names(&dataset.manifest);
    if names.is_empty() {
        return Err(Error::Dataset("requested split is empty".into()));
    }
    let samples: Vec<Sample> = names
        .iter()
        .map(|nm| dataset.load_frame(nm).and_then(|f| Sample::from_frame(&f)))
        .collect::<Result<_>>()?;
    let mut times = Vec::with_capacity(repeats * samples.len());
    let mut peak = 0usize;
    for r in 0..warmup + repeats {
        for sample in &samples {
            let t0 = Instant::now();
            let tape = Tape::new();
            let binder = Binder::new(&tape, &ckpt.params);
            let (dec, _, probs) = model.forward(&binder, &ckpt.stats, sample, None, false)?;
            let _ = to_dense_labels(&dec.output.coords, &probs.value(), &model.grid, 0);
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            peak = peak.max(tape.peak_bytes());
            if r >= warmup {
                times.push(dt);
            }
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        grid_dims: model.grid.dims,
        voxel_size: model.grid.voxel_size,
        frames: samples.len(),
        repeats,
        warmup,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p50_ms: nearest_rank(&times, 0.5),
        p95_ms: nearest_rank(&times, 0.95),
        peak_tape_bytes: peak,
        param_bytes: ckpt.params.num_trainable_elements() * 8,
    })
}

fn argmax_classes(logits: &Arr) -> Array2<i32> {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for k in 0..c {
                let v = logits[[k, y, x]];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            out[[y, x]] = best as i32;
        }
    }
    out
}

fn image_to_ppm(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut rgb = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            rgb.push([
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
        }
    }
    write_ppm(path, &rgb, w, h)
}

/// Renders every camera of one frame through the trained splat heads:
/// predicted class map, composited depth and the simulator RGB reference.
pub fn render_views(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    frame_name: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, _) = model_from_checkpoint(ckpt)?;
    if model.grid != dataset.manifest.grid {
        return Err(Error::Config(
            "checkpoint grid does not match the dataset grid".into(),
        ));
    }
    let frame = dataset.load_frame(frame_name)?;
    let sample = Sample::from_frame(&frame)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &ckpt.params);
    let (dec, _, _) = model.forward(&binder, &ckpt.stats, &sample, None, false)?;
    let mut paths = Vec::new();
    for (i, cam) in sample.cameras.iter().enumerate() {
        let (rendered, logits2d) = model.render_view(&binder, &dec.output, cam)?;
        let classes = argmax_classes(&logits2d.value());
        let p_cls = out_dir.join(format!("cam{i}_classes.ppm"));
        class_map_to_ppm(&p_cls, &classes)?;
        let p_depth = out_dir.join(format!("cam{i}_depth.ppm"));
        depth_to_ppm(&p_depth, &rendered.depth, model.render.z_far)?;
        let p_rgb = out_dir.join(format!("cam{i}_rgb.ppm"));
        image_to_ppm(&p_rgb, &sample.images[i])?;
        paths.extend([p_cls, p_depth, p_rgb]);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, load_dataset, GenConfig, SensorRig};
    use std::collections::BTreeSet;

    fn tiny_rig() -> SensorRig {
        let mut rig = SensorRig::desk();
        rig.beam.rings = 4;
        rig.beam.azimuth_steps = 24;
        rig.cam_width = 32;
        rig.cam_height = 32;
        rig.cam_fx = 16.0;
        rig.cam_fy = 16.0;
        rig.cam_yaws = vec![0.0, std::f64::consts::PI];
        rig
    }

    fn tiny_dataset(root: &Path, frames: usize, val_fraction: f64) -> Dataset {
        let mut cfg = GenConfig {
            frames,
            val_fraction,
            ..GenConfig::default()
        };
        cfg.scene.n_box = 2;
        cfg.scene.n_cyl = 1;
        cfg.scene.trajectory_len = 2;
        cfg.rig = tiny_rig();
        generate_dataset(&cfg, root).unwrap();
        load_dataset(root).unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            fusion: FusionConfig {
                backbone_channels: [2, 2, 4],
                attr_dim: 2,
                hidden: 8,
                out_channels: 4,
                reduction: VoxelReduction::Mean,
            },
            unet_channels: vec![4, 8],
            kernel: 3,
            prune_threshold: 0.5,
            shade_hidden: [4, 4],
            radius_bias: -1.0,
            opacity_bias: 1.0,
        }
    }

    #[test]
    fn default_config_round_trips_and_empty_json_gives_defaults() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());

        let empty = TrainConfig::from_json("{}").unwrap();
        assert_eq!(empty.lambda1, 0.5);
        assert_eq!(empty.lambda2, 1.0);
        assert_eq!(empty.beta, 0.9);
        assert_eq!(empty.alpha, 1.0);
        assert_eq!(empty.grid_preset, "desk");
        assert_eq!(empty.batch_size, 2);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        set_json_path(&mut v, "lr", "0.5").unwrap();
        set_json_path(&mut v, "grid_preset", "paper").unwrap();
        set_json_path(&mut v, "model.unet_channels", "[8,16]").unwrap();
        set_json_path(&mut v, "augment3.flip", "false").unwrap();
        let cfg = TrainConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.grid_preset, "paper");
        assert_eq!(cfg.model.unet_channels, vec![8, 16]);
        assert!(!cfg.augment3.flip);
    }

    #[test]
    fn override_through_scalar_path_is_rejected() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        let err = set_json_path(&mut v, "lr.inner", "1").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn partial_config_merges_onto_defaults() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        let patch: serde_json::Value =
            serde_json::from_str(r#"{"lr": 0.01, "model": {"fusion": {"out_channels": 4}}}"#)
                .unwrap();
        merge_json(&mut v, &patch);
        let cfg = TrainConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.model.fusion.out_channels, 4);
        // siblings keep their defaults instead of being wiped by the patch
        let def = ModelSpec::default();
        assert_eq!(cfg.model.fusion.attr_dim, def.fusion.attr_dim);
        assert_eq!(cfg.model.unet_channels, def.unet_channels);
        assert_eq!(cfg.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn shuffled_index_walks_a_permutation_each_round() {
        let n = 7;
        for round in 0..3u64 {
            let seen: BTreeSet<usize> = (0..n as u64)
                .map(|p| shuffled_index(9, SALT_ORDER, n, round * n as u64 + p))
                .collect();
            assert_eq!(seen.len(), n);
        }
        let first: Vec<usize> = (0..n as u64)
            .map(|p| shuffled_index(9, SALT_ORDER, n, p))
            .collect();
        let second: Vec<usize> = (0..n as u64)
            .map(|p| shuffled_index(9, SALT_ORDER, n, n as u64 + p))
            .collect();
        assert_ne!(first, second, "rounds should reshuffle");
    }

    #[test]
    fn grid_preset_must_match_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 2, 0.0);
        let cfg = TrainConfig {
            grid_preset: "paper".to_string(),
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let err = train(&cfg, &ds, &dir.path().join("run"), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn short_run_logs_phases_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path().join("data").as_path(), 3, 0.34);
        assert_eq!(ds.manifest.splits.train.len(), 2);
        assert_eq!(ds.manifest.splits.val.len(), 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            alpha: 0.34,
            clip_window: 0,
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let out = train(&cfg, &ds, &dir.path().join("run"), None).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.warm_steps, 2);
        assert_eq!(out.checkpoints.len(), 3);
        assert!(out.final_total.is_finite());

        let log = fs::read_to_string(&out.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 4, "header plus one row per step:\n{log}");
        assert_eq!(
            lines[0],
            "step,phase,lr,l_3d,l_2d,l_bce,total,grad_norm,in_clip_window,clipped"
        );
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 10, "row {i}: {line}");
            assert_eq!(cols[0], i.to_string());
            if i < 2 {
                assert_eq!(cols[1], "1");
                assert!(!cols[3].is_empty() && cols[4].is_empty(), "warm row: {line}");
                assert_eq!(cols[8], "0");
            } else {
                assert_eq!(cols[1], "2");
                assert!(cols[3].is_empty() && !cols[4].is_empty(), "post row: {line}");
                assert_eq!(cols[8], "1", "transition step sits in the clip window");
            }
        }

        let ckpt = load_checkpoint(&out.checkpoints[2]).unwrap();
        assert_eq!(ckpt.step, 3);
        let report = evaluate(&ckpt, &ds, EvalSplit::Val).unwrap();
        assert!(report.miou.mean >= 0.0 && report.miou.mean <= 1.0);
        assert_eq!(report.rayiou.per_threshold.len(), 3);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path().join("data").as_path(), 2, 0.0);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            alpha: 1.0,
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let full = train(&cfg, &ds, &dir.path().join("a"), None).unwrap();
        assert_eq!(full.checkpoints.len(), 2);
        let resumed = train(
            &cfg,
            &ds,
            &dir.path().join("b"),
            Some(&full.checkpoints[0]),
        )
        .unwrap();
        assert_eq!(resumed.checkpoints.len(), 1);
        let a = fs::read(&full.checkpoints[1]).unwrap();
        let b = fs::read(&resumed.checkpoints[0]).unwrap();
        assert_eq!(a, b, "resumed final checkpoint must be bit-identical");

        let last_full = fs::read_to_string(&full.log_path).unwrap();
        let last_resumed = fs::read_to_string(&resumed.log_path).unwrap();
        assert_eq!(
            last_full.lines().last().unwrap(),
            last_resumed.lines().last().unwrap()
        );
    }

    #[test]
    fn resume_rejects_a_different_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path().join("data").as_path(), 2, 0.0);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let out = train(&cfg, &ds, &dir.path().join("a"), None).unwrap();
        let other = TrainConfig {
            lr: cfg.lr * 2.0,
            ..cfg.clone()
        };
        let err = train(&other, &ds, &dir.path().join("b"), Some(&out.checkpoints[0]))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_component() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 1, 0.0);
        let cfg = TrainConfig {
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let model = Model::from_config(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.init_params(&mut store, &mut rng);
        store.get_mut("unet.cls.w").unwrap().value.fill(f64::NAN);
        let stats = StatsStore::new();
        let mut adam = Adam::new();
        let balance = ClassBalance::new(cfg.beta, ds.manifest.class_counts.clone()).unwrap();
        let schedule = PhaseSchedule::new(1.0, 10).unwrap();
        let frame = ds.load_frame(&ds.manifest.splits.train[0]).unwrap();
        let sample = Sample::from_frame(&frame).unwrap();
        let err = run_step(
            &model, &mut store, &stats, &mut adam, &balance, &schedule, &cfg, 7,
            std::slice::from_ref(&sample), 1e-3, false,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { step, component } => {
                assert_eq!(step, 7);
                assert_eq!(component, "l_3d");
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_rejects_grid_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 1, 0.0);
        let cfg = TrainConfig {
            grid_preset: "paper".to_string(),
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let json = cfg.to_json().unwrap();
        let ckpt = Checkpoint {
            params: ParamStore::new(),
            adam: Adam::new(),
            stats: StatsStore::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            grid: GridConfig::paper(),
            config_hash: config_hash(&json),
            config_json: json,
        };
        let err = evaluate(&ckpt, &ds, EvalSplit::Train).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn bench_single_repeat_collapses_percentiles() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path().join("data").as_path(), 2, 0.5);
        assert_eq!(ds.manifest.splits.val.len(), 1);
        let cfg = TrainConfig {
            model: tiny_spec(),
            ..TrainConfig::default()
        };
        let model = Model::from_config(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.init_params(&mut store, &mut rng);
        let json = cfg.to_json().unwrap();
        let ckpt = Checkpoint {
            params: store,
            adam: Adam::new(),
            stats: StatsStore::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(1),
            grid: GridConfig::desk(),
            config_hash: config_hash(&json),
            config_json: json,
        };
        let report = bench(&ckpt, &ds, EvalSplit::Val, 1, 0).unwrap();
        assert_eq!(report.frames, 1);
        assert_eq!(report.mean_ms, report.p50_ms);
        assert_eq!(report.p50_ms, report.p95_ms);
        assert!(report.mean_ms > 0.0);
        assert!(report.peak_tape_bytes > 0);
        assert!(report.param_bytes > 0);
    }
}
