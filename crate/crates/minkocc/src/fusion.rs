//! LiDAR-camera fusion frontend: pinhole projection, a small multi-scale
//! image backbone, per-point feature sampling, softmax-weighted multi-view
//! fusion, a shared refinement MLP and voxelization into a sparse tensor.
//!
//! Camera convention: computer-vision frame, +z forward, +x right, +y down;
//! p_cam = R p + t. Continuous pixel coordinates put the center of pixel
//! (i, j) at (i + 0.5, j + 0.5).

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::params::Binder;
use crate::sparse::ops::SparseVar;
use crate::sparse::{Coordinate, CoordinateIndex};
use crate::tape::{concat_cols, Var};

/// Ego-frame points: xyz in meters plus per-point extra attributes
/// (intensity, sweep age, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub xyz: Array2<f64>,
    pub attrs: Array2<f64>,
}

impl PointCloud {
    pub fn new(xyz: Array2<f64>, attrs: Array2<f64>) -> Result<Self> {
        if xyz.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "point xyz must be N x 3, got {:?}",
                xyz.shape()
            )));
        }
        if xyz.shape()[0] != attrs.shape()[0] {
            return Err(Error::Shape(format!(
                "{} points but {} attribute rows",
                xyz.shape()[0],
                attrs.shape()[0]
            )));
        }
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".to_string()));
        }
        Ok(PointCloud { xyz, attrs })
    }

    pub fn len(&self) -> usize {
        self.xyz.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.xyz[[i, 0]], self.xyz[[i, 1]], self.xyz[[i, 2]]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub k: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        r: Matrix3<f64>,
        t: Vector3<f64>,
        k: Matrix3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "camera rotation determinant {} is not 1",
                r.determinant()
            )));
        }
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::Config("camera rotation is not orthonormal".to_string()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::Config("camera focal lengths must be positive".to_string()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Config("camera intrinsics must be upper-triangular".to_string()));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Config(format!(
                "principal point ({cx},{cy}) outside {width}x{height} image"
            )));
        }
        Ok(Camera {
            r,
            t,
            k,
            width,
            height,
        })
    }

    /// Simple pinhole looking along `forward` (ego frame) from `eye`, with
    /// +y_cam pointing down (world -z up assumed).
    pub fn look_along(
        eye: [f64; 3],
        yaw: f64,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        // camera axes in ego frame: z_cam = forward, x_cam = right, y_cam = down
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        // rows of R are the camera axes, so R maps ego -> camera
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let eye = Vector3::new(eye[0], eye[1], eye[2]);
        let t = -r * eye;
        let k = Matrix3::new(
            fx,
            0.0,
            width as f64 / 2.0,
            0.0,
            fy,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(r, t, k, width, height).expect("constructed camera is valid")
    }

    /// (u, v, depth) of an ego-frame point; u,v meaningful only when
    /// depth > 0.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let pc = self.r * Vector3::new(p[0], p[1], p[2]) + self.t;
        let depth = pc.z;
        let uvw = self.k * pc;
        if depth <= 0.0 {
            return (f64::NAN, f64::NAN, depth);
        }
        (uvw.x / uvw.z, uvw.y / uvw.z, depth)
    }

    pub fn uv_in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Ego-frame point seen at continuous pixel (u,v) with given depth.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let kinv = self.k.try_inverse().expect("intrinsics invertible");
        let pc = kinv * Vector3::new(u * depth, v * depth, depth);
        let p = self.r.transpose() * (pc - self.t);
        [p.x, p.y, p.z]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Pinhole projection of every point; invalid points are flagged, not
/// dropped.
pub fn project_points(xyz: &Array2<f64>, cam: &Camera) -> Vec<Projection> {
    (0..xyz.shape()[0])
        .map(|i| {
            let p = [xyz[[i, 0]], xyz[[i, 1]], xyz[[i, 2]]];
            let (u, v, depth) = cam.project(p);
            let valid = depth > 0.0 && cam.uv_in_bounds(u, v);
            Projection { u, v, depth, valid }
        })
        .collect()
}

/// Multi-scale image features: level l at 1/2^l resolution.
pub struct FeaturePyramid<'t> {
    pub levels: Vec<Var<'t>>,
}

impl<'t> FeaturePyramid<'t> {
    pub fn channel_sum(&self) -> usize {
        self.levels.iter().map(|l| l.shape()[0]).sum()
    }
}

/// Three strided conv+relu stages over a (3,H,W) image.
pub fn image_backbone<'t>(
    binder: &Binder<'t>,
    prefix: &str,
    image: &ArrayD<f64>,
) -> Result<FeaturePyramid<'t>> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "backbone expects a (3,H,W) image, got {:?}",
            image.shape()
        )));
    }
    let tape = binder.tape();
    let mut x = tape.constant(image.clone());
    let mut levels = Vec::with_capacity(3);
    for (i, stride) in [1usize, 2, 2].into_iter().enumerate() {
        let w = binder.var(&format!("{prefix}.l{i}.w"))?;
        let b = binder.var(&format!("{prefix}.l{i}.b"))?;
        x = x.conv2d(w, b, stride).relu();
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}

/// Bilinear per-point sampling at every pyramid level (uv scaled by 2^-l),
/// concatenated over levels.
pub fn sample_image_features<'t>(
    pyramid: &FeaturePyramid<'t>,
    uv: &[(f64, f64)],
) -> Result<Var<'t>> {
    if pyramid.levels.is_empty() {
        return Err(Error::Shape("empty feature pyramid".to_string()));
    }
    let tape = pyramid.levels[0].tape();
    let mut parts = Vec::with_capacity(pyramid.levels.len());
    for (l, level) in pyramid.levels.iter().enumerate() {
        let s = (1u32 << l) as f64;
        let scaled: Vec<(f64, f64)> = uv.iter().map(|&(u, v)| (u / s, v / s)).collect();
        parts.push(level.bilinear_sample(Rc::new(scaled)));
    }
    Ok(concat_cols(tape, &parts))
}

/// Softmax-weighted fusion across views. Points valid in no view receive the
/// learned no-view embedding exactly.
pub fn fuse_multiview<'t>(
    per_view: &[Var<'t>],
    valid: &[Vec<bool>],
    score_w: Var<'t>,
    score_b: Var<'t>,
    no_view: Var<'t>,
) -> Result<Var<'t>> {
    let n_views = per_view.len();
    if n_views == 0 || valid.len() != n_views {
        return Err(Error::Shape(format!(
            "{} view features with {} validity lists",
            n_views,
            valid.len()
        )));
    }
    let tape = per_view[0].tape();
    let p = per_view[0].shape()[0];
    for (v, feats) in per_view.iter().enumerate() {
        if feats.shape()[0] != p || valid[v].len() != p {
            return Err(Error::Shape(format!(
                "view {v} has {} rows and {} flags, expected {p}",
                feats.shape()[0],
                valid[v].len()
            )));
        }
    }
    let scores: Vec<Var> = per_view
        .iter()
        .map(|f| f.matmul(score_w).add(score_b.broadcast_rows(p)))
        .collect();
    let score_mat = concat_cols(tape, &scores);
    let mut mask = vec![false; p * n_views];
    for (v, flags) in valid.iter().enumerate() {
        for (i, &ok) in flags.iter().enumerate() {
            mask[i * n_views + v] = ok;
        }
    }
    let weights = score_mat.masked_softmax_rows(Rc::new(mask));
    let mut fused: Option<Var> = None;
    for (v, feats) in per_view.iter().enumerate() {
        let part = feats.scale_rows(weights.col(v));
        fused = Some(match fused {
            Some(acc) => acc.add(part),
            None => part,
        });
    }
    let fused = fused.expect("at least one view");
    let orphan = Array2::from_shape_fn((p, 1), |(i, _)| {
        if (0..n_views).any(|v| valid[v][i]) {
            0.0
        } else {
            1.0
        }
    });
    let orphan = tape.constant(orphan.into_dyn());
    Ok(fused.add(no_view.broadcast_rows(p).scale_rows(orphan)))
}

/// Two-layer pointwise MLP with shared weights.
pub fn refine_mlp<'t>(
    x: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
) -> Var<'t> {
    let n = x.shape()[0];
    x.matmul(w1)
        .add(b1.broadcast_rows(n))
        .relu()
        .matmul(w2)
        .add(b2.broadcast_rows(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelReduction {
    Mean,
    Max,
}

/// Scatter per-point features into voxels. Points outside the grid range are
/// dropped; features of points sharing a voxel are reduced (mean by default,
/// max as an option). Output stride is 1.
pub fn voxelize<'t>(
    xyz: &Array2<f64>,
    feats: Var<'t>,
    grid: &GridConfig,
    batch: i32,
    reduction: VoxelReduction,
) -> SparseVar<'t> {
    let tape = feats.tape();
    let d = feats.shape()[1];
    let mut index = CoordinateIndex::build(&[]);
    let mut kept: Vec<u32> = Vec::new();
    let mut seg: Vec<u32> = Vec::new();
    for i in 0..xyz.shape()[0] {
        let p = [xyz[[i, 0]], xyz[[i, 1]], xyz[[i, 2]]];
        let Some(v) = grid.voxel_index(p) else { continue };
        let row = index.insert(Coordinate::new(batch, v[0] as i32, v[1] as i32, v[2] as i32));
        kept.push(i as u32);
        seg.push(row as u32);
    }
    let n_vox = index.len();
    let gathered = feats.gather_rows(Rc::new(kept));
    let out = match reduction {
        VoxelReduction::Mean => {
            let mut counts = vec![0usize; n_vox];
            for &s in &seg {
                counts[s as usize] += 1;
            }
            let inv = Array2::from_shape_fn((n_vox, 1), |(i, _)| 1.0 / counts[i].max(1) as f64);
            gathered
                .scatter_add_rows(Rc::new(seg), n_vox)
                .scale_rows(tape.constant(inv.into_dyn()))
        }
        VoxelReduction::Max => {
            // per voxel and channel, select the winning point's entry
            let vals = gathered.value();
            let mut best: Vec<Option<(usize, f64)>> = vec![None; n_vox * d];
            for (k, &s) in seg.iter().enumerate() {
                for ch in 0..d {
                    let v = vals[[k, ch]];
                    let slot = &mut best[s as usize * d + ch];
                    if slot.map_or(true, |(_, b)| v > b) {
                        *slot = Some((k, v));
                    }
                }
            }
            let flat: Vec<usize> = best
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let (k, _) = s.expect("every voxel has at least one point");
                    k * d + (j % d)
                })
                .collect();
            gathered.select_flat(Rc::new(flat)).reshape(&[n_vox, d])
        }
    };
    SparseVar::from_parts(Rc::new(index.into_coords()), 1, out)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub backbone_channels: [usize; 3],
    /// raw point attribute width fed to the refine MLP alongside xyz
    pub attr_dim: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub reduction: VoxelReduction,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            backbone_channels: [16, 32, 64],
            attr_dim: 2,
            hidden: 64,
            out_channels: 32,
            reduction: VoxelReduction::Mean,
        }
    }
}

impl FusionConfig {
    pub fn feature_dim(&self) -> usize {
        self.backbone_channels.iter().sum()
    }
}

/// Parameter owner and forward orchestrator for the whole frontend.
pub struct FusionNet {
    pub cfg: FusionConfig,
}

impl FusionNet {
    pub fn new(cfg: FusionConfig) -> Self {
        FusionNet { cfg }
    }

    pub fn init_params<R: rand::Rng>(
        &self,
        store: &mut crate::params::ParamStore,
        rng: &mut R,
        prefix: &str,
    ) {
        use crate::params::{glorot2, glorot_conv2d, zeros1, zeros2};
        let ch = self.cfg.backbone_channels;
        let ins = [3, ch[0], ch[1]];
        for i in 0..3 {
            store.insert(
                &format!("{prefix}.backbone.l{i}.w"),
                glorot_conv2d(rng, ch[i], ins[i], 3),
            );
            store.insert(&format!("{prefix}.backbone.l{i}.b"), zeros1(ch[i]));
        }
        let d = self.cfg.feature_dim();
        store.insert(&format!("{prefix}.score.w"), glorot2(rng, d, 1));
        store.insert(&format!("{prefix}.score.b"), zeros2(1, 1));
        store.insert(&format!("{prefix}.noview"), glorot2(rng, 1, d));
        let refine_in = d + 3 + self.cfg.attr_dim;
        store.insert(
            &format!("{prefix}.refine.w1"),
            glorot2(rng, refine_in, self.cfg.hidden),
        );
        store.insert(&format!("{prefix}.refine.b1"), zeros2(1, self.cfg.hidden));
        store.insert(
            &format!("{prefix}.refine.w2"),
            glorot2(rng, self.cfg.hidden, self.cfg.out_channels),
        );
        store.insert(
            &format!("{prefix}.refine.b2"),
            zeros2(1, self.cfg.out_channels),
        );
    }

    /// Full frontend for one frame: backbones, projection, sampling, fusion,
    /// refinement, voxelization.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        prefix: &str,
        images: &[ArrayD<f64>],
        cameras: &[Camera],
        cloud: &PointCloud,
        grid: &GridConfig,
        batch: i32,
    ) -> Result<SparseVar<'t>> {
        if images.len() != cameras.len() || cameras.is_empty() {
            return Err(Error::Shape(format!(
                "{} images for {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        if cloud.attrs.shape()[1] != self.cfg.attr_dim {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.attr_dim,
                got: cloud.attrs.shape()[1],
            });
        }
        let tape = binder.tape();
        let mut per_view = Vec::with_capacity(cameras.len());
        let mut valid = Vec::with_capacity(cameras.len());
        for (img, cam) in images.iter().zip(cameras) {
            let pyr = image_backbone(binder, &format!("{prefix}.backbone"), img)?;
            let projs = project_points(&cloud.xyz, cam);
            let uv: Vec<(f64, f64)> = projs
                .iter()
                .map(|pr| if pr.valid { (pr.u, pr.v) } else { (0.0, 0.0) })
                .collect();
            per_view.push(sample_image_features(&pyr, &uv)?);
            valid.push(projs.iter().map(|pr| pr.valid).collect::<Vec<bool>>());
        }
        let fused = fuse_multiview(
            &per_view,
            &valid,
            binder.var(&format!("{prefix}.score.w"))?,
            binder.var(&format!("{prefix}.score.b"))?,
            binder.var(&format!("{prefix}.noview"))?,
        )?;
        let raw = ndarray::concatenate(
            ndarray::Axis(1),
            &[cloud.xyz.view(), cloud.attrs.view()],
        )
        .expect("xyz and attrs share row count");
        let raw = tape.constant(raw.into_dyn());
        let both = concat_cols(tape, &[fused, raw]);
        let refined = refine_mlp(
            both,
            binder.var(&format!("{prefix}.refine.w1"))?,
            binder.var(&format!("{prefix}.refine.b1"))?,
            binder.var(&format!("{prefix}.refine.w2"))?,
            binder.var(&format!("{prefix}.refine.b2"))?,
        );
        Ok(voxelize(
            &cloud.xyz,
            refined,
            grid,
            batch,
            self.cfg.reduction,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{check_gradients, glorot2, ParamStore};
    use crate::tape::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cam(yaw: f64) -> Camera {
        Camera::look_along([0.0, 0.0, 1.5], yaw, 20.0, 20.0, 32, 24)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = test_cam(0.0);
        let (u, v, depth) = cam.project([7.0, 0.0, 1.5]);
        assert_abs_diff_eq!(u, 16.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!(depth, 7.0, epsilon = 1e-9);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let cam = test_cam(0.0);
        let xyz = array![[-4.0, 0.0, 1.5]];
        let projs = project_points(&xyz, &cam);
        assert!(!projs[0].valid);
        assert!(projs[0].depth < 0.0);
    }

    #[test]
    fn projection_round_trip() {
        let cam = test_cam(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            use rand::Rng;
            let p = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-1.0..3.0),
            ];
            let (u, v, depth) = cam.project(p);
            if depth <= 0.1 {
                continue;
            }
            let q = cam.back_project(u, v, depth);
            for a in 0..3 {
                assert_abs_diff_eq!(q[a], p[a], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn camera_rejects_scaled_rotation() {
        let r = Matrix3::identity() * 2.0;
        let k = Matrix3::new(10.0, 0.0, 8.0, 0.0, 10.0, 6.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(r, Vector3::zeros(), k, 16, 12).is_err());
    }

    fn backbone_store(rng: &mut ChaCha8Rng, ch: [usize; 3]) -> ParamStore {
        use crate::params::{glorot_conv2d, zeros1};
        let mut store = ParamStore::new();
        let ins = [3, ch[0], ch[1]];
        for i in 0..3 {
            store.insert(&format!("bb.l{i}.w"), glorot_conv2d(rng, ch[i], ins[i], 3));
            store.insert(&format!("bb.l{i}.b"), zeros1(ch[i]));
        }
        store
    }

    #[test]
    fn backbone_shapes_halve_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = backbone_store(&mut rng, [4, 6, 8]);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let img = ArrayD::from_elem(IxDyn(&[3, 16, 16]), 0.5);
        let pyr = image_backbone(&binder, "bb", &img).unwrap();
        assert_eq!(pyr.levels[0].shape(), vec![4, 16, 16]);
        assert_eq!(pyr.levels[1].shape(), vec![6, 8, 8]);
        assert_eq!(pyr.levels[2].shape(), vec![8, 4, 4]);
        assert_eq!(pyr.channel_sum(), 18);
    }

    #[test]
    fn zero_image_samples_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = backbone_store(&mut rng, [2, 2, 2]);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let img = ArrayD::zeros(IxDyn(&[3, 8, 8]));
        let pyr = image_backbone(&binder, "bb", &img).unwrap();
        let feats = sample_image_features(&pyr, &[(4.0, 4.0), (1.3, 6.2)]).unwrap();
        assert_eq!(feats.shape(), vec![2, 6]);
        assert!(feats.value().iter().all(|&v| v == 0.0));
    }

    fn const_feats<'t>(tape: &'t Tape, rows: &[[f64; 3]]) -> Var<'t> {
        let n = rows.len();
        let arr = Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j]);
        tape.leaf(arr.into_dyn())
    }

    #[test]
    fn single_view_fusion_is_identity() {
        let tape = Tape::new();
        let feats = const_feats(&tape, &[[1.0, -2.0, 0.5], [3.0, 0.0, 7.0]]);
        let w = tape.leaf(glorot2(&mut ChaCha8Rng::seed_from_u64(5), 3, 1));
        let b = tape.leaf(crate::params::zeros2(1, 1));
        let noview = tape.leaf(glorot2(&mut ChaCha8Rng::seed_from_u64(6), 1, 3));
        let fused = fuse_multiview(&[feats], &[vec![true, true]], w, b, noview).unwrap();
        assert_eq!(fused.value(), feats.value());
    }

    #[test]
    fn identical_views_fuse_to_same_features() {
        let tape = Tape::new();
        let feats = const_feats(&tape, &[[1.0, 2.0, 3.0], [0.1, -0.4, 2.0]]);
        let w = tape.leaf(glorot2(&mut ChaCha8Rng::seed_from_u64(7), 3, 1));
        let b = tape.leaf(crate::params::zeros2(1, 1));
        let noview = tape.leaf(glorot2(&mut ChaCha8Rng::seed_from_u64(8), 1, 3));
        let fused = fuse_multiview(
            &[feats, feats],
            &[vec![true, true], vec![true, true]],
            w,
            b,
            noview,
        )
        .unwrap();
        let out = fused.value();
        let want = feats.value();
        for (a, b) in out.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn orphan_point_gets_noview_embedding() {
        let tape = Tape::new();
        let v0 = const_feats(&tape, &[[1.0, 1.0, 1.0], [9.0, 9.0, 9.0]]);
        let v1 = const_feats(&tape, &[[2.0, 2.0, 2.0], [8.0, 8.0, 8.0]]);
        let w = tape.leaf(glorot2(&mut ChaCha8Rng::seed_from_u64(9), 3, 1));
        let b = tape.leaf(crate::params::zeros2(1, 1));
        let noview = tape.leaf(array![[0.25, -0.5, 4.0]].into_dyn());
        let fused = fuse_multiview(
            &[v0, v1],
            &[vec![true, false], vec![true, false]],
            w,
            b,
            noview,
        )
        .unwrap();
        let out = fused.value();
        assert_eq!(out[[1, 0]], 0.25);
        assert_eq!(out[[1, 1]], -0.5);
        assert_eq!(out[[1, 2]], 4.0);
        // the covered point must not contain the embedding
        assert!(out[[0, 0]] != 0.25 || out[[0, 1]] != -0.5);
    }

    #[test]
    fn refine_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::new();
        let x = tape.leaf(glorot2(&mut rng, 5, 4));
        let w1 = tape.leaf(glorot2(&mut rng, 4, 6));
        let b1 = tape.leaf(glorot2(&mut rng, 1, 6));
        let w2 = tape.leaf(glorot2(&mut rng, 6, 3));
        let b2 = tape.leaf(glorot2(&mut rng, 1, 3));
        let y = refine_mlp(x, w1, b1, w2, b2);
        let perm: Vec<u32> = vec![4, 2, 0, 1, 3];
        let xp = x.gather_rows(Rc::new(perm.clone()));
        let yp = refine_mlp(xp, w1, b1, w2, b2);
        let y_val = y.value();
        let yp_val = yp.value();
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_abs_diff_eq!(
                    yp_val[[i, c]],
                    y_val[[src as usize, c]],
                    epsilon = 1e-12
                );
            }
        }
    }

    fn unit_grid() -> GridConfig {
        GridConfig {
            dims: [4, 4, 2],
            voxel_size: 1.0,
            min: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn voxelize_means_shared_voxel() {
        let tape = Tape::new();
        let xyz = array![[0.2, 0.2, 0.5], [0.8, 0.9, 0.1], [3.5, 0.5, 1.5]];
        let feats = const_feats(&tape, &[[2.0, 0.0, 1.0], [4.0, 2.0, 5.0], [7.0, 7.0, 7.0]]);
        let sv = voxelize(&xyz, feats, &unit_grid(), 0, VoxelReduction::Mean);
        assert_eq!(sv.len(), 2);
        assert_eq!(sv.coords[0], Coordinate::new(0, 0, 0, 0));
        assert_eq!(sv.coords[1], Coordinate::new(0, 3, 0, 1));
        let out = sv.feats.value();
        assert_abs_diff_eq!(out[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 2]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[1, 0]], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn voxelize_drops_out_of_range_points() {
        let tape = Tape::new();
        let xyz = array![[-0.1, 0.0, 0.0], [0.0, 0.0, 5.0], [1.5, 1.5, 0.5]];
        let feats = const_feats(&tape, &[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0]]);
        let sv = voxelize(&xyz, feats, &unit_grid(), 0, VoxelReduction::Mean);
        assert_eq!(sv.len(), 1);
        assert_eq!(sv.coords[0], Coordinate::new(0, 1, 1, 0));
        assert_eq!(sv.feats.value()[[0, 0]], 3.0);
    }

    #[test]
    fn voxelize_full_scale_origin_index() {
        let grid = GridConfig::paper();
        assert_eq!(grid.voxel_index([0.0, 0.0, 0.0]), Some([100, 100, 2]));
        let tape = Tape::new();
        let xyz = array![[0.0, 0.0, 0.0]];
        let feats = const_feats(&tape, &[[1.0, 0.0, 0.0]]);
        let sv = voxelize(&xyz, feats, &grid, 2, VoxelReduction::Mean);
        assert_eq!(sv.coords[0], Coordinate::new(2, 100, 100, 2));
    }

    #[test]
    fn voxelize_max_picks_per_channel_winners() {
        let tape = Tape::new();
        let xyz = array![[0.5, 0.5, 0.5], [0.4, 0.6, 0.2]];
        let feats = const_feats(&tape, &[[1.0, 5.0, 0.0], [3.0, 2.0, 0.0]]);
        let sv = voxelize(&xyz, feats, &unit_grid(), 0, VoxelReduction::Max);
        let out = sv.feats.value();
        assert_eq!(out[[0, 0]], 3.0);
        assert_eq!(out[[0, 1]], 5.0);
        let loss = sv.feats.sum();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(feats).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[1, 0]], 1.0);
        assert_eq!(g[[0, 1]], 1.0);
        assert_eq!(g[[1, 1]], 0.0);
    }

    #[test]
    fn voxelize_content_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        use rand::seq::SliceRandom;
        use rand::Rng;
        let n = 40;
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..2.0),
                ]
            })
            .collect();
        let fv: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen(), rng.gen()])
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let run = |idx: &[usize]| {
            let tape = Tape::new();
            let xyz = Array2::from_shape_fn((n, 3), |(i, j)| pts[idx[i]][j]);
            let feats = const_feats(
                &tape,
                &idx.iter().map(|&i| fv[i]).collect::<Vec<_>>(),
            );
            let sv = voxelize(&xyz, feats, &unit_grid(), 0, VoxelReduction::Mean);
            sv.coords
                .iter()
                .cloned()
                .zip(
                    sv.feats
                        .value()
                        .outer_iter()
                        .map(|r| r.iter().cloned().collect::<Vec<f64>>()),
                )
                .collect::<std::collections::BTreeMap<_, _>>()
        };
        let base: Vec<usize> = (0..n).collect();
        let a = run(&base);
        let b = run(&order);
        assert_eq!(a.len(), b.len());
        for (c, fa) in &a {
            let fb = &b[c];
            for (x, y) in fa.iter().zip(fb.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn forward_empty_cloud_yields_empty_tensor() {
        let cfg = FusionConfig {
            backbone_channels: [2, 2, 2],
            attr_dim: 1,
            hidden: 4,
            out_channels: 3,
            reduction: VoxelReduction::Mean,
        };
        let net = FusionNet::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        net.init_params(&mut store, &mut rng, "fusion");
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let img = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.3);
        let cloud = PointCloud::new(Array2::zeros((0, 3)), Array2::zeros((0, 1))).unwrap();
        let sv = net
            .forward(
                &binder,
                "fusion",
                &[img],
                &[test_cam(0.0)],
                &cloud,
                &unit_grid(),
                0,
            )
            .unwrap();
        assert_eq!(sv.len(), 0);
        assert_eq!(sv.channels(), 3);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let cfg = FusionConfig {
            backbone_channels: [2, 2, 2],
            attr_dim: 1,
            hidden: 4,
            out_channels: 2,
            reduction: VoxelReduction::Mean,
        };
        let net = FusionNet::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        net.init_params(&mut store, &mut rng, "f");
        use rand::Rng;
        let img0 = ArrayD::from_shape_fn(IxDyn(&[3, 8, 8]), |_| rng.gen_range(0.0..1.0));
        let img1 = ArrayD::from_shape_fn(IxDyn(&[3, 8, 8]), |_| rng.gen_range(0.0..1.0));
        let xyz = array![
            [2.1, 0.3, 1.4],
            [3.0, -0.4, 1.6],
            [1.2, 1.2, 0.4],
            [-2.0, 0.0, 1.0],
            [2.5, 2.5, 1.9],
        ];
        let attrs = Array2::from_shape_fn((5, 1), |_| rng.gen_range(0.0..1.0));
        let cloud = PointCloud::new(xyz, attrs).unwrap();
        let cams = [test_cam(0.0), test_cam(std::f64::consts::FRAC_PI_2)];
        let grid = GridConfig {
            dims: [8, 8, 4],
            voxel_size: 1.0,
            min: [-4.0, -4.0, 0.0],
        };
        let imgs = [img0, img1];
        let max_rel = check_gradients(&store, 1e-5, |_tape, binder| {
            let sv = net.forward(binder, "f", &imgs, &cams, &cloud, &grid, 0)?;
            Ok(sv.feats.mul(sv.feats).sum())
        })
        .unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }
}
