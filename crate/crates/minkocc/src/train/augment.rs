//! Training-time augmentation: rigid world transforms applied consistently to
//! points, grid and cameras, plus per-view image warps that keep the recorded
//! camera in sync with the warped pixels.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{Camera, PointCloud};
use crate::grid::DenseVoxelGrid;
use crate::losses::PseudoLabelImage;
use crate::sim::{accumulate_sweeps, Frame};

/// One training sample in the current ego frame: the accumulated sweep cloud,
/// per-view cameras/images/pseudo-labels, and the dense grid. The grid's mask
/// means "supervise here" (visibility minus dropout), so augmentation may
/// clear entries without touching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub cameras: Vec<Camera>,
    pub images: Vec<Array3<f64>>,
    pub pseudo: Vec<PseudoLabelImage>,
    pub gt: DenseVoxelGrid,
}

impl Sample {
    pub fn from_frame(frame: &Frame) -> Result<Sample> {
        Ok(Sample {
            cloud: accumulate_sweeps(&frame.sweeps)?,
            cameras: frame.cameras.clone(),
            images: frame.images.clone(),
            pseudo: frame.pseudo.clone(),
            gt: frame.gt.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Augment3Config {
    pub flip: bool,
    pub rotate: bool,
    /// Fraction of occupied ground-truth voxels removed from supervision.
    pub gt_dropout: f64,
}

impl Augment3Config {
    pub fn none() -> Self {
        Augment3Config {
            flip: false,
            rotate: false,
            gt_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gt_dropout) {
            return Err(Error::Config(format!(
                "gt_dropout {} outside [0,1)",
                self.gt_dropout
            )));
        }
        Ok(())
    }
}

/// Rigid world transform: a z-rotation by `quarter` * 90 degrees followed by
/// an optional x-mirror. Quarter turns use exact integer matrices so the
/// dihedral group composes without rounding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform3 {
    pub quarter: u8,
    pub flip_x: bool,
}

impl Transform3 {
    pub const IDENTITY: Transform3 = Transform3 {
        quarter: 0,
        flip_x: false,
    };

    fn rotation(&self) -> Matrix3<f64> {
        // CCW about +z
        match self.quarter % 4 {
            0 => Matrix3::identity(),
            1 => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            2 => Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
            _ => Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation() * Vector3::new(p[0], p[1], p[2]);
        if self.flip_x {
            [-q.x, q.y, q.z]
        } else {
            [q.x, q.y, q.z]
        }
    }
}

fn require_symmetric_footprint(grid: &DenseVoxelGrid) -> Result<()> {
    let cfg = &grid.config;
    let centered = |a: usize| -> bool {
        let extent = cfg.dims[a] as f64 * cfg.voxel_size;
        (cfg.min[a] + extent / 2.0).abs() < 1e-9
    };
    if cfg.dims[0] != cfg.dims[1] || cfg.min[0] != cfg.min[1] || !centered(0) || !centered(1) {
        return Err(Error::Config(
            "3d augmentation needs a square, xy-centered grid".into(),
        ));
    }
    Ok(())
}

fn permute_grid<T: Copy>(src: &ndarray::Array3<T>, t: Transform3) -> ndarray::Array3<T> {
    let d = src.shape()[0];
    let mut out = src.clone();
    for ix in 0..d {
        for iy in 0..src.shape()[1] {
            for iz in 0..src.shape()[2] {
                let (mut jx, jy) = match t.quarter % 4 {
                    0 => (ix, iy),
                    1 => (d - 1 - iy, ix),
                    2 => (d - 1 - ix, src.shape()[1] - 1 - iy),
                    _ => (iy, src.shape()[1] - 1 - ix),
                };
                if t.flip_x {
                    jx = d - 1 - jx;
                }
                out[[jx, jy, iz]] = src[[ix, iy, iz]];
            }
        }
    }
    out
}

/// Conjugates a camera so it keeps seeing the transformed world at the same
/// pixels. A mirror cannot stay a proper rotation, so the x-flip additionally
/// mirrors the image plane: the returned bool says "flip the image columns".
fn conjugate_camera(cam: &Camera, t: Transform3) -> Result<(Camera, bool)> {
    let rot = t.rotation();
    let mut r = cam.r * rot.transpose();
    let mut tr = cam.t;
    let mut k = cam.k;
    if t.flip_x {
        let f = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let s = f; // mirror of the camera x-axis
        r = s * r * f;
        tr = s * tr;
        k[(0, 2)] = cam.width as f64 - k[(0, 2)];
    }
    Ok((
        Camera::new(r, tr, k, cam.width, cam.height)?,
        t.flip_x,
    ))
}

fn flip_image_u(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(Axis(2));
    out
}

fn flip_pseudo_u(p: &PseudoLabelImage) -> Result<PseudoLabelImage> {
    let mut classes = p.classes.clone();
    let mut conf = p.confidence.clone();
    classes.invert_axis(Axis(1));
    conf.invert_axis(Axis(1));
    PseudoLabelImage::new(classes, conf)
}

/// Applies one rigid transform to every part of the sample.
pub fn apply_transform3(sample: &Sample, t: Transform3) -> Result<Sample> {
    if t.quarter % 4 != 0 {
        require_symmetric_footprint(&sample.gt)?;
    }
    let mut xyz = sample.cloud.xyz.clone();
    for mut row in xyz.rows_mut() {
        let p = t.apply_point([row[0], row[1], row[2]]);
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
    }
    let cloud = PointCloud::new(xyz, sample.cloud.attrs.clone())?;

    let mut cameras = Vec::with_capacity(sample.cameras.len());
    let mut images = Vec::with_capacity(sample.images.len());
    let mut pseudo = Vec::with_capacity(sample.pseudo.len());
    for ((cam, img), ps) in sample
        .cameras
        .iter()
        .zip(&sample.images)
        .zip(&sample.pseudo)
    {
        let (cam2, mirror) = conjugate_camera(cam, t)?;
        cameras.push(cam2);
        if mirror {
            images.push(flip_image_u(img));
            pseudo.push(flip_pseudo_u(ps)?);
        } else {
            images.push(img.clone());
            pseudo.push(ps.clone());
        }
    }

    let gt = DenseVoxelGrid {
        config: sample.gt.config,
        labels: permute_grid(&sample.gt.labels, t),
        mask: permute_grid(&sample.gt.mask, t),
    };
    Ok(Sample {
        cloud,
        cameras,
        images,
        pseudo,
        gt,
    })
}

/// Draws one transform and applies it, then removes a random fraction of
/// occupied ground-truth voxels from supervision by clearing their mask.
pub fn augment_3d(sample: &Sample, cfg: &Augment3Config, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    let t = Transform3 {
        quarter: if cfg.rotate { rng.gen_range(0..4u8) } else { 0 },
        flip_x: cfg.flip && rng.gen::<bool>(),
    };
    let mut out = apply_transform3(sample, t)?;
    if cfg.gt_dropout > 0.0 {
        let free = crate::classes::FREE_CLASS;
        for (l, m) in out.gt.labels.iter().zip(out.gt.mask.iter_mut()) {
            if *l != free && *m && rng.gen_range(0.0..1.0) < cfg.gt_dropout {
                *m = false;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Warp2Config {
    pub quarter_turns: bool,
    /// Max absolute pixel shift per axis.
    pub max_translate: i32,
    pub scale: (f64, f64),
    /// Max relative RGB gain change and absolute offset.
    pub rgb_jitter: f64,
}

impl Warp2Config {
    pub fn desk() -> Self {
        Warp2Config {
            quarter_turns: true,
            max_translate: 4,
            scale: (0.9, 1.1),
            rgb_jitter: 0.1,
        }
    }

    pub fn none() -> Self {
        Warp2Config {
            quarter_turns: false,
            max_translate: 0,
            scale: (1.0, 1.0),
            rgb_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_translate < 0 || self.scale.0 <= 0.0 || self.scale.0 > self.scale.1 {
            return Err(Error::Config("bad 2d warp ranges".into()));
        }
        if self.rgb_jitter < 0.0 || self.rgb_jitter >= 1.0 {
            return Err(Error::Config(format!(
                "rgb jitter {} outside [0,1)",
                self.rgb_jitter
            )));
        }
        Ok(())
    }
}

/// One sampled 2D warp, applied as rotate -> scale -> translate -> rgb.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp2 {
    pub quarter: u8,
    pub scale: f64,
    pub translate: (i32, i32),
    pub rgb_scale: [f64; 3],
    pub rgb_offset: [f64; 3],
}

impl Warp2 {
    pub const IDENTITY: Warp2 = Warp2 {
        quarter: 0,
        scale: 1.0,
        translate: (0, 0),
        rgb_scale: [1.0; 3],
        rgb_offset: [0.0; 3],
    };
}

pub fn draw_warp2(cfg: &Warp2Config, rng: &mut ChaCha8Rng) -> Warp2 {
    let quarter = if cfg.quarter_turns {
        rng.gen_range(0..4u8)
    } else {
        0
    };
    let scale = if cfg.scale.0 == cfg.scale.1 {
        cfg.scale.0
    } else {
        rng.gen_range(cfg.scale.0..cfg.scale.1)
    };
    let translate = if cfg.max_translate == 0 {
        (0, 0)
    } else {
        (
            rng.gen_range(-cfg.max_translate..=cfg.max_translate),
            rng.gen_range(-cfg.max_translate..=cfg.max_translate),
        )
    };
    let (mut rgb_scale, mut rgb_offset) = ([1.0; 3], [0.0; 3]);
    if cfg.rgb_jitter > 0.0 {
        for c in 0..3 {
            rgb_scale[c] = 1.0 + rng.gen_range(-cfg.rgb_jitter..cfg.rgb_jitter);
            rgb_offset[c] = rng.gen_range(-cfg.rgb_jitter..cfg.rgb_jitter) * 0.5;
        }
    }
    Warp2 {
        quarter,
        scale,
        translate,
        rgb_scale,
        rgb_offset,
    }
}

/// One exact quarter turn: pixel (u,v) moves to (v, W-u), dims swap, and the
/// camera rolls about its optical axis to match.
fn quarter_turn_view(
    img: &Array3<f64>,
    pseudo: &PseudoLabelImage,
    cam: &Camera,
) -> Result<(Array3<f64>, PseudoLabelImage, Camera)> {
    let (h, w) = (cam.height, cam.width);
    let mut img2 = Array3::zeros((3, w, h));
    let mut classes = Array2::zeros((w, h));
    let mut conf = Array2::zeros((w, h));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                img2[[c, w - 1 - j, i]] = img[[c, i, j]];
            }
            classes[[w - 1 - j, i]] = pseudo.classes[[i, j]];
            conf[[w - 1 - j, i]] = pseudo.confidence[[i, j]];
        }
    }
    let s = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let (fx, fy) = (cam.k[(0, 0)], cam.k[(1, 1)]);
    let (cx, cy) = (cam.k[(0, 2)], cam.k[(1, 2)]);
    let k = Matrix3::new(fy, 0.0, cy, 0.0, fx, w as f64 - cx, 0.0, 0.0, 1.0);
    let cam2 = Camera::new(s * cam.r, s * cam.t, k, h, w)?;
    Ok((img2, PseudoLabelImage::new(classes, conf)?, cam2))
}

fn scale_view(
    img: &Array3<f64>,
    pseudo: &PseudoLabelImage,
    cam: &Camera,
    s: f64,
) -> Result<(Array3<f64>, PseudoLabelImage, Camera)> {
    let (h, w) = (cam.height, cam.width);
    let (cx, cy) = (cam.k[(0, 2)], cam.k[(1, 2)]);
    let mut img2 = Array3::zeros((3, h, w));
    let mut classes = Array2::zeros((h, w));
    let mut conf = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let us = (j as f64 + 0.5 - cx) / s + cx;
            let vs = (i as f64 + 0.5 - cy) / s + cy;
            let sj = (us - 0.5).round() as i64;
            let si = (vs - 0.5).round() as i64;
            if sj < 0 || sj >= w as i64 || si < 0 || si >= h as i64 {
                continue; // fill stays zero / unlabeled
            }
            let (si, sj) = (si as usize, sj as usize);
            for c in 0..3 {
                img2[[c, i, j]] = img[[c, si, sj]];
            }
            classes[[i, j]] = pseudo.classes[[si, sj]];
            conf[[i, j]] = pseudo.confidence[[si, sj]];
        }
    }
    let mut k = cam.k;
    k[(0, 0)] *= s;
    k[(1, 1)] *= s;
    let cam2 = Camera::new(cam.r, cam.t, k, w, h)?;
    Ok((img2, PseudoLabelImage::new(classes, conf)?, cam2))
}

fn translate_view(
    img: &Array3<f64>,
    pseudo: &PseudoLabelImage,
    cam: &Camera,
    (du, dv): (i32, i32),
) -> Result<(Array3<f64>, PseudoLabelImage, Camera)> {
    let (h, w) = (cam.height, cam.width);
    let mut img2 = Array3::zeros((3, h, w));
    let mut classes = Array2::zeros((h, w));
    let mut conf = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let sj = j as i64 - du as i64;
            let si = i as i64 - dv as i64;
            if sj < 0 || sj >= w as i64 || si < 0 || si >= h as i64 {
                continue;
            }
            let (si, sj) = (si as usize, sj as usize);
            for c in 0..3 {
                img2[[c, i, j]] = img[[c, si, sj]];
            }
            classes[[i, j]] = pseudo.classes[[si, sj]];
            conf[[i, j]] = pseudo.confidence[[si, sj]];
        }
    }
    let mut k = cam.k;
    k[(0, 2)] += du as f64;
    k[(1, 2)] += dv as f64;
    let cam2 = Camera::new(cam.r, cam.t, k, w, h)?;
    Ok((img2, PseudoLabelImage::new(classes, conf)?, cam2))
}

pub fn apply_warp2(
    img: &Array3<f64>,
    pseudo: &PseudoLabelImage,
    cam: &Camera,
    warp: &Warp2,
) -> Result<(Array3<f64>, PseudoLabelImage, Camera)> {
    if img.shape() != [3, cam.height, cam.width] {
        return Err(Error::Shape(format!(
            "image {:?} does not match the {}x{} camera",
            img.shape(),
            cam.width,
            cam.height
        )));
    }
    let mut cur = (img.clone(), pseudo.clone(), cam.clone());
    for _ in 0..warp.quarter % 4 {
        cur = quarter_turn_view(&cur.0, &cur.1, &cur.2)?;
    }
    if warp.scale != 1.0 {
        cur = scale_view(&cur.0, &cur.1, &cur.2, warp.scale)?;
    }
    if warp.translate != (0, 0) {
        cur = translate_view(&cur.0, &cur.1, &cur.2, warp.translate)?;
    }
    if warp.rgb_scale != [1.0; 3] || warp.rgb_offset != [0.0; 3] {
        for c in 0..3 {
            cur.0
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| (v * warp.rgb_scale[c] + warp.rgb_offset[c]).clamp(0.0, 1.0));
        }
    }
    Ok(cur)
}

pub fn augment_2d(
    img: &Array3<f64>,
    pseudo: &PseudoLabelImage,
    cam: &Camera,
    cfg: &Warp2Config,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f64>, PseudoLabelImage, Camera)> {
    cfg.validate()?;
    apply_warp2(img, pseudo, cam, &draw_warp2(cfg, rng))
}
