//! Voxel-level mIoU and ray-level RayIoU over dense labeled grids.

use ndarray::Array3;
use serde::Serialize;

use crate::classes::{class_name, FREE_CLASS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::grid::DenseVoxelGrid;
use crate::sim::{BeamConfig, Pose};

/// How RayIoU is scored; printed at the top of every report so numbers are
/// comparable across runs.
pub const RAYIOU_PROTOCOL: &str = "rayiou protocol: simulated lidar beams cast from the ego \
origin; a ray counts as true positive for a class at threshold t when prediction and ground \
truth first-hit the same class within t meters of depth error; per-class ray IoU is averaged \
over classes, then over thresholds 1/2/4 m";

pub const RAYIOU_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

/// Per-class true positives, false positives and false negatives counted over
/// visible (masked-in) voxels. For every class, tp + fneg equals its ground
/// truth population.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fneg: Vec<u64>,
}

impl ConfusionCounts {
    pub fn count(
        pred: &Array3<i32>,
        gt: &Array3<i32>,
        mask: &Array3<bool>,
    ) -> Result<ConfusionCounts> {
        if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "confusion over pred {:?} vs gt {:?} vs mask {:?}",
                pred.shape(),
                gt.shape(),
                mask.shape()
            )));
        }
        let mut c = ConfusionCounts {
            tp: vec![0; NUM_CLASSES],
            fp: vec![0; NUM_CLASSES],
            fneg: vec![0; NUM_CLASSES],
        };
        for ((&p, &g), &m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
            if !m {
                continue;
            }
            for l in [p, g] {
                if !(0..NUM_CLASSES as i32).contains(&l) {
                    return Err(Error::UnknownLabel(l));
                }
            }
            if p == g {
                c.tp[p as usize] += 1;
            } else {
                c.fp[p as usize] += 1;
                c.fneg[g as usize] += 1;
            }
        }
        Ok(c)
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp[class] + self.fp[class] + self.fneg[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }

    pub fn zero() -> ConfusionCounts {
        ConfusionCounts {
            tp: vec![0; NUM_CLASSES],
            fp: vec![0; NUM_CLASSES],
            fneg: vec![0; NUM_CLASSES],
        }
    }

    /// Fold another frame's counts in (split-level evaluation).
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..NUM_CLASSES {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fneg[c] += other.fneg[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouResult {
    /// One entry per class; None when the class is absent from both grids
    /// (or is the free class, which never participates).
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub counts: ConfusionCounts,
}

impl MiouResult {
    pub fn from_counts(counts: ConfusionCounts) -> MiouResult {
        let mut per_class = vec![None; NUM_CLASSES];
        let mut sum = 0.0;
        let mut n = 0usize;
        for class in 0..NUM_CLASSES {
            if class == FREE_CLASS as usize {
                continue;
            }
            if let Some(iou) = counts.iou(class) {
                per_class[class] = Some(iou);
                sum += iou;
                n += 1;
            }
        }
        MiouResult {
            per_class,
            mean: if n > 0 { sum / n as f64 } else { 0.0 },
            counts,
        }
    }
}

/// Voxel IoU per class over `mask`, averaged over the classes present in
/// either grid; the free class is always excluded from the mean.
pub fn miou(pred: &DenseVoxelGrid, gt: &DenseVoxelGrid, mask: &Array3<bool>) -> Result<MiouResult> {
    Ok(MiouResult::from_counts(ConfusionCounts::count(
        &pred.labels,
        &gt.labels,
        mask,
    )?))
}

/// Query ray with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn new(origin: [f64; 3], dir: [f64; 3]) -> Result<Ray> {
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ray direction has norm {norm}, expected unit length"
            )));
        }
        Ok(Ray { origin, dir })
    }
}

/// The simulated-LiDAR ray set used for RayIoU, cast from the ego origin.
pub fn lidar_rays(pose: &Pose, mount: [f64; 3], beam: &BeamConfig) -> Vec<Ray> {
    let origin = pose.apply(mount);
    beam.directions()
        .iter()
        .map(|&d| {
            let dir = pose.rotate(d);
            Ray::new(origin, dir).expect("beam directions are unit vectors")
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub index: [usize; 3],
    /// Parametric distance from the ray origin to the voxel's entry face
    /// (zero when the origin already sits inside the hit voxel).
    pub distance: f64,
    pub class: i32,
}

/// First occupied, visible voxel along the ray through a dense grid.
pub fn ray_first_hit(grid: &DenseVoxelGrid, origin: [f64; 3], dir: [f64; 3]) -> Result<Option<RayHit>> {
    first_hit_masked(grid, &grid.mask, origin, dir)
}

/// Integer voxel traversal, stepping axis-by-axis along the ray. Ties at
/// voxel corners advance through the smallest axis index first. The `mask`
/// may differ from the grid's own (RayIoU gates predictions by the ground
/// truth visibility mask).
fn first_hit_masked(
    grid: &DenseVoxelGrid,
    mask: &Array3<bool>,
    origin: [f64; 3],
    dir: [f64; 3],
) -> Result<Option<RayHit>> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "ray direction has norm {norm}, expected unit length"
        )));
    }
    let cfg = &grid.config;
    let h = cfg.voxel_size;
    let gmin = cfg.min;
    let gmax = cfg.max();

    // clip the ray to the grid box
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < gmin[a] || origin[a] >= gmax[a] {
                return Ok(None);
            }
            continue;
        }
        let t0 = (gmin[a] - origin[a]) / dir[a];
        let t1 = (gmax[a] - origin[a]) / dir[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    if t_exit < t_enter || t_exit <= 0.0 {
        return Ok(None);
    }
    let t_start = t_enter.max(0.0);

    let entry = [
        origin[0] + t_start * dir[0],
        origin[1] + t_start * dir[1],
        origin[2] + t_start * dir[2],
    ];
    let mut idx = [0i64; 3];
    for a in 0..3 {
        let mut i = ((entry[a] - gmin[a]) / h).floor() as i64;
        // a ray entering exactly on the far face belongs to the last voxel
        if i == cfg.dims[a] as i64 && dir[a] <= 0.0 {
            i = cfg.dims[a] as i64 - 1;
        }
        if i == -1 && dir[a] >= 0.0 {
            i = 0;
        }
        if i < 0 || i >= cfg.dims[a] as i64 {
            return Ok(None);
        }
        idx[a] = i;
    }

    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        if dir[a] > 1e-15 {
            step[a] = 1;
            let boundary = gmin[a] + (idx[a] + 1) as f64 * h;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = h / dir[a];
        } else if dir[a] < -1e-15 {
            step[a] = -1;
            let boundary = gmin[a] + idx[a] as f64 * h;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = h / -dir[a];
        }
    }

    let mut t_cur = t_start;
    loop {
        let u = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        if grid.labels[u] != FREE_CLASS && mask[u] {
            return Ok(Some(RayHit {
                index: u,
                distance: t_cur,
                class: grid.labels[u],
            }));
        }
        let mut axis = 0;
        for a in 1..3 {
            if t_next[a] < t_next[axis] {
                axis = a;
            }
        }
        t_cur = t_next[axis];
        t_next[axis] += t_delta[axis];
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= cfg.dims[axis] as i64 {
            return Ok(None);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RayIouThreshold {
    pub tau: f64,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RayIouResult {
    pub per_threshold: Vec<RayIouThreshold>,
    /// Mean over thresholds of the per-threshold class means.
    pub score: f64,
}

/// Running ray-level confusion over many frames, one counter set per
/// threshold.
pub struct RayIouAccum {
    thresholds: Vec<f64>,
    tp: Vec<Vec<u64>>,
    fp: Vec<Vec<u64>>,
    fneg: Vec<Vec<u64>>,
}

impl RayIouAccum {
    pub fn new(thresholds: &[f64]) -> Result<RayIouAccum> {
        if thresholds.is_empty() {
            return Err(Error::Config("rayiou needs at least one threshold".into()));
        }
        let zeros = vec![vec![0u64; NUM_CLASSES]; thresholds.len()];
        Ok(RayIouAccum {
            thresholds: thresholds.to_vec(),
            tp: zeros.clone(),
            fp: zeros.clone(),
            fneg: zeros,
        })
    }

    /// Traverse one frame's rays and fold the matches in. Both grids are
    /// traversed under the ground truth visibility mask, so invisible voxels
    /// can never influence the score.
    pub fn add(&mut self, pred: &DenseVoxelGrid, gt: &DenseVoxelGrid, rays: &[Ray]) -> Result<()> {
        if pred.config != gt.config {
            return Err(Error::Config(
                "rayiou needs prediction and ground truth on the same grid".into(),
            ));
        }
        for r in rays {
            let p = first_hit_masked(pred, &gt.mask, r.origin, r.dir)?;
            let g = first_hit_masked(gt, &gt.mask, r.origin, r.dir)?;
            for (k, &tau) in self.thresholds.iter().enumerate() {
                let matched = match (&p, &g) {
                    (Some(p), Some(g)) => {
                        p.class == g.class && (p.distance - g.distance).abs() <= tau
                    }
                    _ => false,
                };
                if matched {
                    self.tp[k][p.as_ref().unwrap().class as usize] += 1;
                } else {
                    if let Some(p) = &p {
                        self.fp[k][p.class as usize] += 1;
                    }
                    if let Some(g) = &g {
                        self.fneg[k][g.class as usize] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> RayIouResult {
        let mut per_threshold = Vec::with_capacity(self.thresholds.len());
        for (k, &tau) in self.thresholds.iter().enumerate() {
            let mut per_class = vec![None; NUM_CLASSES];
            let mut sum = 0.0;
            let mut n = 0usize;
            for class in 0..NUM_CLASSES {
                let denom = self.tp[k][class] + self.fp[k][class] + self.fneg[k][class];
                if class == FREE_CLASS as usize || denom == 0 {
                    continue;
                }
                let iou = self.tp[k][class] as f64 / denom as f64;
                per_class[class] = Some(iou);
                sum += iou;
                n += 1;
            }
            per_threshold.push(RayIouThreshold {
                tau,
                per_class,
                mean: if n > 0 { sum / n as f64 } else { 0.0 },
            });
        }
        let score =
            per_threshold.iter().map(|t| t.mean).sum::<f64>() / per_threshold.len() as f64;
        RayIouResult {
            per_threshold,
            score,
        }
    }
}

/// Single-frame convenience wrapper over [`RayIouAccum`].
pub fn rayiou(
    pred: &DenseVoxelGrid,
    gt: &DenseVoxelGrid,
    rays: &[Ray],
    thresholds: &[f64],
) -> Result<RayIouResult> {
    let mut acc = RayIouAccum::new(thresholds)?;
    acc.add(pred, gt, rays)?;
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub miou: MiouResult,
    pub rayiou: RayIouResult,
}

impl EvalReport {
    pub fn new(miou: MiouResult, rayiou: RayIouResult) -> Self {
        EvalReport {
            protocol: RAYIOU_PROTOCOL.to_string(),
            miou,
            rayiou,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    /// Aligned text table, classes in the palette column order.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.protocol));
        out.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>8} {:>8}\n",
            "class", "iou", "ray@1m", "ray@2m", "ray@4m"
        ));
        for class in 0..NUM_CLASSES {
            if class == FREE_CLASS as usize {
                continue;
            }
            let rays: Vec<String> = self
                .rayiou
                .per_threshold
                .iter()
                .map(|t| fmt(t.per_class[class]))
                .collect();
            out.push_str(&format!(
                "{:<22} {:>8} {:>8} {:>8} {:>8}\n",
                class_name(class as i32),
                fmt(self.miou.per_class[class]),
                rays.first().map(String::as_str).unwrap_or("-"),
                rays.get(1).map(String::as_str).unwrap_or("-"),
                rays.get(2).map(String::as_str).unwrap_or("-"),
            ));
        }
        out.push_str(&format!("{:<22} {:>8.4}\n", "miou", self.miou.mean));
        for t in &self.rayiou.per_threshold {
            out.push_str(&format!(
                "{:<22} {:>8.4}\n",
                format!("rayiou@{:.0}m", t.tau),
                t.mean
            ));
        }
        out.push_str(&format!("{:<22} {:>8.4}\n", "rayiou", self.rayiou.score));
        out
    }
}
