//! On-disk dataset: a JSON manifest plus one tensor container per frame.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Ix2, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{rasterize_ground_truth, render_camera_image, render_pseudo_labels, NoiseConfig};
use super::lidar::{simulate_lidar, Sweep, SweepSet};
use super::scene::{generate_scene, Scene, SceneConfig};
use super::{camera_rig, Pose, SensorRig};
use crate::classes::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::Camera;
use crate::grid::{DenseVoxelGrid, GridConfig};
use crate::losses::PseudoLabelImage;
use crate::mocc::Container;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub k: [[f64; 3]; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraCalib {
    pub fn from_camera(cam: &Camera) -> Self {
        let m3 = |m: &nalgebra::Matrix3<f64>| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = m[(i, j)];
                }
            }
            out
        };
        CameraCalib {
            r: m3(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
            k: m3(&cam.k),
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = nalgebra::Matrix3::from_fn(|i, j| self.r[i][j]);
        let k = nalgebra::Matrix3::from_fn(|i, j| self.k[i][j]);
        let t = nalgebra::Vector3::new(self.t[0], self.t[1], self.t[2]);
        Camera::new(r, t, k, self.width, self.height)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid: GridConfig,
    pub class_names: Vec<String>,
    /// Rig cameras at the identity ego pose; per-frame extrinsics live in the
    /// frame containers.
    pub cameras: Vec<CameraCalib>,
    /// Voxel count per class over the training split's ground truth.
    pub class_counts: Vec<u64>,
    pub splits: SplitLists,
    pub rig: SensorRig,
    pub noise: NoiseConfig,
    pub ground_height: f64,
}

/// Everything the trainer needs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub sweeps: SweepSet,
    pub cameras: Vec<Camera>,
    pub images: Vec<Array3<f64>>,
    pub pseudo: Vec<PseudoLabelImage>,
    pub gt: DenseVoxelGrid,
}

/// Simulates one full frame of a scene: LiDAR sweeps along the trajectory,
/// camera images, pseudo-labels and dense ground truth. The scene's current
/// pose must be the identity so that cloud, cameras and grid share a frame.
pub fn generate_frame(
    scene: &Scene,
    grid: &GridConfig,
    rig: &SensorRig,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Frame> {
    rig.validate()?;
    scene.validate(grid)?;
    let cur = scene.current_pose();
    if cur.pose != Pose::identity() {
        return Err(Error::Config(
            "frame generation expects the current ego pose to be the identity".into(),
        ));
    }

    let mut sweeps: Vec<Sweep> = scene
        .trajectory
        .iter()
        .map(|e| {
            Ok(Sweep {
                cloud: simulate_lidar(scene, &e.pose, rig.lidar_mount, &rig.beam, rng)?,
                pose: e.pose,
                timestamp: e.timestamp,
            })
        })
        .collect::<Result<_>>()?;
    let current = sweeps.pop().expect("trajectory is never empty");
    sweeps.reverse(); // most recent past first
    let sweeps = SweepSet::new(current, sweeps)?;

    let cameras = camera_rig(&cur.pose, rig);
    let images = cameras.iter().map(|c| render_camera_image(scene, c)).collect();
    let pseudo = cameras
        .iter()
        .map(|c| render_pseudo_labels(scene, c, noise, rng))
        .collect::<Result<Vec<_>>>()?;
    let gt = rasterize_ground_truth(scene, grid, rig);

    Ok(Frame {
        sweeps,
        cameras,
        images,
        pseudo,
        gt,
    })
}

fn push_scalar(c: &mut Container, name: &str, v: f64) {
    c.push_f64(name, Array1::from_vec(vec![v]).into_dyn());
}

fn read_scalar(c: &Container, path: &Path, name: &str) -> Result<f64> {
    let a = c.require(path, name)?.as_f64(path, name)?;
    a.iter()
        .next()
        .copied()
        .ok_or_else(|| Error::container(path, format!("record {name:?} is empty")))
}

fn sweep_to_records(c: &mut Container, prefix: &str, s: &Sweep) {
    c.push_f64(&format!("{prefix}.xyz"), s.cloud.xyz.clone().into_dyn());
    c.push_f64(&format!("{prefix}.attrs"), s.cloud.attrs.clone().into_dyn());
    c.push_f64(&format!("{prefix}.pose"), s.pose.to_matrix().into_dyn());
    push_scalar(c, &format!("{prefix}.stamp"), s.timestamp);
}

fn sweep_from_records(c: &Container, path: &Path, prefix: &str) -> Result<Sweep> {
    let get2 = |name: String| -> Result<Array2<f64>> {
        c.require(path, &name)?
            .as_f64(path, &name)?
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::container(path, format!("{name}: {e}")))
    };
    let xyz = get2(format!("{prefix}.xyz"))?;
    let attrs = get2(format!("{prefix}.attrs"))?;
    let pose = Pose::from_matrix(&get2(format!("{prefix}.pose"))?)?;
    let timestamp = read_scalar(c, path, &format!("{prefix}.stamp"))?;
    Ok(Sweep {
        cloud: crate::fusion::PointCloud::new(xyz, attrs)?,
        pose,
        timestamp,
    })
}

impl Frame {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_i32(
            "sweeps.past_count",
            Array1::from_vec(vec![self.sweeps.past.len() as i32]).into_dyn(),
        );
        sweep_to_records(&mut c, "sweep0", &self.sweeps.current);
        for (i, s) in self.sweeps.past.iter().enumerate() {
            sweep_to_records(&mut c, &format!("sweep{}", i + 1), s);
        }
        c.push_i32(
            "cams.count",
            Array1::from_vec(vec![self.cameras.len() as i32]).into_dyn(),
        );
        for (i, cam) in self.cameras.iter().enumerate() {
            let p = format!("cam{i}");
            let r = Array2::from_shape_fn((3, 3), |(a, b)| cam.r[(a, b)]);
            let k = Array2::from_shape_fn((3, 3), |(a, b)| cam.k[(a, b)]);
            let t = Array1::from_vec(vec![cam.t.x, cam.t.y, cam.t.z]);
            c.push_f64(&format!("{p}.r"), r.into_dyn());
            c.push_f64(&format!("{p}.t"), t.into_dyn());
            c.push_f64(&format!("{p}.k"), k.into_dyn());
            c.push_f64(&format!("{p}.image"), self.images[i].clone().into_dyn());
            c.push_i32(&format!("{p}.classes"), self.pseudo[i].classes.clone().into_dyn());
            c.push_f64(&format!("{p}.conf"), self.pseudo[i].confidence.clone().into_dyn());
        }
        self.gt.to_records(&mut c, "gt");
        c
    }

    pub fn from_container(c: &Container, path: &Path, grid: GridConfig) -> Result<Frame> {
        let past_count = {
            let name = "sweeps.past_count";
            let a = c.require(path, name)?.as_i32(path, name)?;
            a.iter()
                .next()
                .copied()
                .ok_or_else(|| Error::container(path, "empty sweeps.past_count"))? as usize
        };
        let current = sweep_from_records(c, path, "sweep0")?;
        let past = (0..past_count)
            .map(|i| sweep_from_records(c, path, &format!("sweep{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let sweeps = SweepSet::new(current, past)?;

        let cam_count = {
            let name = "cams.count";
            let a = c.require(path, name)?.as_i32(path, name)?;
            a.iter()
                .next()
                .copied()
                .ok_or_else(|| Error::container(path, "empty cams.count"))? as usize
        };
        let mut cameras = Vec::with_capacity(cam_count);
        let mut images = Vec::with_capacity(cam_count);
        let mut pseudo = Vec::with_capacity(cam_count);
        for i in 0..cam_count {
            let p = format!("cam{i}");
            let name = format!("{p}.image");
            let image = c
                .require(path, &name)?
                .as_f64(path, &name)?
                .clone()
                .into_dimensionality::<Ix3>()
                .map_err(|e| Error::container(path, format!("{name}: {e}")))?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let name = format!("{p}.r");
            let r = c.require(path, &name)?.as_f64(path, &name)?;
            let r = nalgebra::Matrix3::from_fn(|a, b| r[[a, b]]);
            let name = format!("{p}.k");
            let k = c.require(path, &name)?.as_f64(path, &name)?;
            let k = nalgebra::Matrix3::from_fn(|a, b| k[[a, b]]);
            let name = format!("{p}.t");
            let t = c.require(path, &name)?.as_f64(path, &name)?;
            let t = nalgebra::Vector3::new(t[[0]], t[[1]], t[[2]]);
            cameras.push(Camera::new(r, t, k, w, h)?);
            images.push(image);
            let name = format!("{p}.classes");
            let classes = c
                .require(path, &name)?
                .as_i32(path, &name)?
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::container(path, format!("{name}: {e}")))?;
            let name = format!("{p}.conf");
            let conf = c
                .require(path, &name)?
                .as_f64(path, &name)?
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::container(path, format!("{name}: {e}")))?;
            pseudo.push(PseudoLabelImage::new(classes, conf)?);
        }
        let gt = DenseVoxelGrid::from_records(c, "gt", grid, path)?;
        Ok(Frame {
            sweeps,
            cameras,
            images,
            pseudo,
            gt,
        })
    }
}

fn frame_path(root: &Path, name: &str) -> PathBuf {
    root.join("frames").join(format!("{name}.mocc"))
}

/// Writes frames and a manifest; `class_counts` is recomputed from the
/// training split's ground truth so the loss weighting never drifts from the
/// stored data.
pub fn write_dataset(
    frames: &[(String, Frame)],
    splits: &SplitLists,
    grid: &GridConfig,
    rig: &SensorRig,
    noise: &NoiseConfig,
    ground_height: f64,
    root: &Path,
) -> Result<Manifest> {
    let known: std::collections::BTreeMap<&str, &Frame> =
        frames.iter().map(|(n, f)| (n.as_str(), f)).collect();
    if known.len() != frames.len() {
        return Err(Error::Dataset("duplicate frame names".into()));
    }
    for name in splits.train.iter().chain(&splits.val) {
        if !known.contains_key(name.as_str()) {
            return Err(Error::Dataset(format!(
                "split references unknown frame {name:?}"
            )));
        }
    }
    for name in &splits.train {
        if splits.val.contains(name) {
            return Err(Error::Dataset(format!(
                "frame {name:?} appears in both splits"
            )));
        }
    }

    fs::create_dir_all(root.join("frames")).map_err(|e| Error::io(root, e))?;
    for (name, frame) in frames {
        frame.to_container().write(&frame_path(root, name))?;
    }

    let mut class_counts = vec![0u64; NUM_CLASSES];
    for name in &splits.train {
        for (i, n) in known[name.as_str()].gt.class_counts().iter().enumerate() {
            class_counts[i] += n;
        }
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        grid: *grid,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        cameras: camera_rig(&Pose::identity(), rig)
            .iter()
            .map(CameraCalib::from_camera)
            .collect(),
        class_counts,
        splits: splits.clone(),
        rig: rig.clone(),
        noise: *noise,
        ground_height,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Dataset(format!("manifest serialization: {e}")))?;
    let tmp = root.join("manifest.json.tmp");
    fs::write(&tmp, &json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, root.join("manifest.json")).map_err(|e| Error::io(root, e))?;
    Ok(manifest)
}

/// Open dataset: the manifest plus lazy per-frame loading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load_frame(&self, name: &str) -> Result<Frame> {
        let path = frame_path(&self.root, name);
        let c = Container::read(&path)?;
        Frame::from_container(&c, &path, self.manifest.grid)
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.manifest
            .splits
            .train
            .iter()
            .chain(&self.manifest.splits.val)
            .map(|s| s.as_str())
    }
}

/// Reads and validates the manifest and checks every referenced frame file
/// exists, so missing data surfaces at open time with the frame's identity.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.json");
    let json = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "manifest version {} unsupported, this build reads {MANIFEST_VERSION}",
            manifest.version
        )));
    }
    if manifest.class_names.len() != NUM_CLASSES || manifest.class_counts.len() != NUM_CLASSES {
        return Err(Error::Dataset(format!(
            "manifest lists {} classes / {} counts, expected {NUM_CLASSES}",
            manifest.class_names.len(),
            manifest.class_counts.len()
        )));
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        manifest,
    };
    for name in ds.frame_names() {
        let p = frame_path(root, name);
        if !p.is_file() {
            return Err(Error::Dataset(format!(
                "frame {name:?} is missing its file {}",
                p.display()
            )));
        }
    }
    Ok(ds)
}

/// End-to-end generation settings for the `gen-data` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub frames: usize,
    pub val_fraction: f64,
    pub scene: SceneConfig,
    pub rig: SensorRig,
    pub noise: NoiseConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            frames: 10,
            val_fraction: 0.2,
            scene: SceneConfig::default(),
            rig: SensorRig::desk(),
            noise: NoiseConfig::desk(),
        }
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-frame streams decorrelated
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generates `frames` scenes deterministically from the seed and writes the
/// dataset under `root`. Returns the manifest and the total number of
/// primitives dropped by placement retries.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<(Manifest, usize)> {
    if !(0.0..=1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("val_fraction outside [0,1]".into()));
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut dropped = 0;
    for i in 0..cfg.frames {
        let (scene, report) = generate_scene(mix_seed(cfg.seed, i as u64), &cfg.scene);
        dropped += report.dropped();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0xfeed, i as u64));
        let frame = generate_frame(&scene, &cfg.scene.grid, &cfg.rig, &cfg.noise, &mut rng)?;
        frames.push((format!("frame_{i:05}"), frame));
    }
    let n_val = (cfg.frames as f64 * cfg.val_fraction).round() as usize;
    let n_train = cfg.frames - n_val;
    let splits = SplitLists {
        train: frames.iter().take(n_train).map(|(n, _)| n.clone()).collect(),
        val: frames.iter().skip(n_train).map(|(n, _)| n.clone()).collect(),
    };
    let manifest = write_dataset(
        &frames,
        &splits,
        &cfg.scene.grid,
        &cfg.rig,
        &cfg.noise,
        cfg.scene.ground_height,
        root,
    )?;
    Ok((manifest, dropped))
}
