//! Sparse generative UNet: strided sparse-conv encoder with residual blocks
//! and squeeze-excite, generative transposed-conv decoder with per-level
//! pruning and additive skip connections, and a per-voxel semantic head.

use std::collections::BTreeSet;
use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{DenseVoxelGrid, GridConfig};
use crate::params::{Binder, ParamStore, StatsStore};
use crate::sparse::ops::{
    generative_transposed_conv, prune, prune_with_mask, sparse_conv, squeeze_excite, SparseVar,
};
use crate::sparse::{build_kernel_map, downsample_coords, Coordinate, CoordinateIndex};
use crate::tape::{Arr, Var};

pub type CoordSet = BTreeSet<Coordinate>;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub prune_threshold: f64,
    pub num_classes: usize,
}

impl UNetConfig {
    pub fn desk(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            depth: 3,
            channels: vec![32, 64, 128],
            kernel: 3,
            prune_threshold: 0.5,
            num_classes: crate::classes::NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("unet depth must be at least 1".to_string()));
        }
        if self.channels.len() != self.depth {
            return Err(Error::Config(format!(
                "{} channel entries for depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::Config("unet channels must be positive".to_string()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("unet kernel must be odd".to_string()));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Config(format!(
                "prune threshold {} outside [0,1)",
                self.prune_threshold
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".to_string()));
        }
        Ok(())
    }
}

/// Pre-prune decoder state at one upsampling step; keep_logits row-aligned
/// with the tensor.
pub struct LevelOutput<'t> {
    pub tensor: SparseVar<'t>,
    pub keep_logits: Var<'t>,
}

pub struct DecodeResult<'t> {
    /// stride-1 tensor after the last prune and skip
    pub output: SparseVar<'t>,
    /// one entry per upsampling step, deepest first
    pub levels: Vec<LevelOutput<'t>>,
}

pub struct GenUNet {
    pub cfg: UNetConfig,
}

impl GenUNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(GenUNet { cfg })
    }

    pub fn init_params<R: rand::Rng>(&self, store: &mut ParamStore, rng: &mut R, prefix: &str) {
        use crate::params::{glorot2, glorot_sparse, ones2, zeros2};
        let k3 = self.cfg.kernel.pow(3);
        for l in 0..self.cfg.depth {
            let c_in = if l == 0 {
                self.cfg.in_channels
            } else {
                self.cfg.channels[l]
            };
            let c = self.cfg.channels[l];
            store.insert(
                &format!("{prefix}.enc{l}.conv1.w"),
                glorot_sparse(rng, k3, c_in, c),
            );
            store.insert(&format!("{prefix}.enc{l}.conv1.b"), zeros2(1, c));
            store.insert(
                &format!("{prefix}.enc{l}.conv2.w"),
                glorot_sparse(rng, k3, c, c),
            );
            store.insert(&format!("{prefix}.enc{l}.conv2.b"), zeros2(1, c));
            for n in ["norm1", "norm2"] {
                store.insert(&format!("{prefix}.enc{l}.{n}.gamma"), ones2(1, c));
                store.insert(&format!("{prefix}.enc{l}.{n}.beta"), zeros2(1, c));
            }
            if c_in != c {
                store.insert(&format!("{prefix}.enc{l}.proj.w"), glorot2(rng, c_in, c));
            }
            let h = (c / 4).max(1);
            store.insert(&format!("{prefix}.enc{l}.se.w1"), glorot2(rng, c, h));
            store.insert(&format!("{prefix}.enc{l}.se.b1"), zeros2(1, h));
            store.insert(&format!("{prefix}.enc{l}.se.w2"), glorot2(rng, h, c));
            store.insert(&format!("{prefix}.enc{l}.se.b2"), zeros2(1, c));
        }
        for l in 0..self.cfg.depth - 1 {
            let (c_in, c_out) = (self.cfg.channels[l], self.cfg.channels[l + 1]);
            store.insert(
                &format!("{prefix}.down{l}.w"),
                glorot_sparse(rng, k3, c_in, c_out),
            );
            store.insert(&format!("{prefix}.down{l}.b"), zeros2(1, c_out));
        }
        for i in 0..self.cfg.depth - 1 {
            let c_in = self.cfg.channels[self.cfg.depth - 1 - i];
            let c_out = self.cfg.channels[self.cfg.depth - 2 - i];
            store.insert(
                &format!("{prefix}.up{i}.w"),
                glorot_sparse(rng, 8, c_in, c_out),
            );
            store.insert(&format!("{prefix}.up{i}.b"), zeros2(1, c_out));
            store.insert(&format!("{prefix}.head{i}.w"), glorot2(rng, c_out, 1));
            // optimistic keep bias so fresh models do not prune everything
            store.insert(
                &format!("{prefix}.head{i}.b"),
                Array2::from_elem((1, 1), 2.0).into_dyn(),
            );
        }
        store.insert(
            &format!("{prefix}.cls.w"),
            glorot2(rng, self.cfg.channels[0], self.cfg.num_classes),
        );
        store.insert(
            &format!("{prefix}.cls.b"),
            zeros2(1, self.cfg.num_classes),
        );
    }

    fn conv_block<'t>(
        &self,
        binder: &Binder<'t>,
        stats: &StatsStore,
        name: &str,
        x: &SparseVar<'t>,
        c_in: usize,
        training: bool,
    ) -> Result<SparseVar<'t>> {
        let index = CoordinateIndex::build(&x.coords);
        let kmap = build_kernel_map(&index, &x.coords, self.cfg.kernel, x.stride, x.stride)?;
        let h = sparse_conv(
            x,
            binder.var(&format!("{name}.conv1.w"))?,
            Some(binder.var(&format!("{name}.conv1.b"))?),
            &kmap,
        )?;
        let h = crate::sparse::ops::batch_norm(
            &h,
            binder.var(&format!("{name}.norm1.gamma"))?,
            binder.var(&format!("{name}.norm1.beta"))?,
            stats,
            &format!("{name}.norm1"),
            training,
        );
        let h = SparseVar {
            coords: h.coords.clone(),
            stride: h.stride,
            feats: h.feats.relu(),
        };
        let h = sparse_conv(
            &h,
            binder.var(&format!("{name}.conv2.w"))?,
            Some(binder.var(&format!("{name}.conv2.b"))?),
            &kmap,
        )?;
        let h = crate::sparse::ops::batch_norm(
            &h,
            binder.var(&format!("{name}.norm2.gamma"))?,
            binder.var(&format!("{name}.norm2.beta"))?,
            stats,
            &format!("{name}.norm2"),
            training,
        );
        let c_out = h.channels();
        let residual = if c_in == c_out {
            x.feats
        } else {
            x.feats.matmul(binder.var(&format!("{name}.proj.w"))?)
        };
        let summed = SparseVar {
            coords: h.coords.clone(),
            stride: h.stride,
            feats: h.feats.relu().add(residual),
        };
        squeeze_excite(
            &summed,
            binder.var(&format!("{name}.se.w1"))?,
            binder.var(&format!("{name}.se.b1"))?,
            binder.var(&format!("{name}.se.w2"))?,
            binder.var(&format!("{name}.se.b2"))?,
        )
    }

    /// Residual conv blocks with squeeze-excite, downsampling between
    /// levels; returns one tensor per level at strides 1, 2, 4, ...
    pub fn encode<'t>(
        &self,
        binder: &Binder<'t>,
        stats: &StatsStore,
        prefix: &str,
        input: &SparseVar<'t>,
        training: bool,
    ) -> Result<Vec<SparseVar<'t>>> {
        if input.stride != 1 {
            return Err(Error::Stride(format!(
                "encoder input must have stride 1, got {}",
                input.stride
            )));
        }
        let mut levels = Vec::with_capacity(self.cfg.depth);
        let mut x = input.clone();
        for l in 0..self.cfg.depth {
            let c_in = if l == 0 {
                self.cfg.in_channels
            } else {
                self.cfg.channels[l]
            };
            x = self.conv_block(binder, stats, &format!("{prefix}.enc{l}"), &x, c_in, training)?;
            levels.push(x.clone());
            if l + 1 < self.cfg.depth {
                let out_coords = downsample_coords(&x.coords, x.stride * 2);
                let index = CoordinateIndex::build(&x.coords);
                let kmap = build_kernel_map(
                    &index,
                    &out_coords,
                    self.cfg.kernel,
                    x.stride,
                    x.stride * 2,
                )?;
                x = sparse_conv(
                    &x,
                    binder.var(&format!("{prefix}.down{l}.w"))?,
                    Some(binder.var(&format!("{prefix}.down{l}.b"))?),
                    &kmap,
                )?;
            }
        }
        Ok(levels)
    }

    /// From the deepest level up: generative upsample, keep-logit head,
    /// prune (optionally forced to keep teacher-occupied coordinates), then
    /// additive skip from the same-stride encoder level.
    pub fn decode<'t>(
        &self,
        binder: &Binder<'t>,
        prefix: &str,
        encoded: &[SparseVar<'t>],
        teacher: Option<&[CoordSet]>,
    ) -> Result<DecodeResult<'t>> {
        if encoded.len() != self.cfg.depth {
            return Err(Error::Shape(format!(
                "{} encoder levels for depth {}",
                encoded.len(),
                self.cfg.depth
            )));
        }
        if let Some(t) = teacher {
            if t.len() != self.cfg.depth - 1 {
                return Err(Error::Length(format!(
                    "{} teacher levels for {} upsampling steps",
                    t.len(),
                    self.cfg.depth - 1
                )));
            }
        }
        let mut z = encoded[self.cfg.depth - 1].clone();
        let mut levels = Vec::with_capacity(self.cfg.depth - 1);
        for i in 0..self.cfg.depth - 1 {
            let up = generative_transposed_conv(
                &z,
                binder.var(&format!("{prefix}.up{i}.w"))?,
                Some(binder.var(&format!("{prefix}.up{i}.b"))?),
                2,
                2,
            )?;
            let n = up.len();
            let logits = up
                .feats
                .matmul(binder.var(&format!("{prefix}.head{i}.w"))?)
                .add(binder.var(&format!("{prefix}.head{i}.b"))?.broadcast_rows(n));
            levels.push(LevelOutput {
                tensor: up.clone(),
                keep_logits: logits,
            });
            let pruned = match teacher {
                Some(t) => {
                    let lv = logits.value();
                    let keep: Vec<bool> = up
                        .coords
                        .iter()
                        .enumerate()
                        .map(|(r, c)| {
                            t[i].contains(c)
                                || sigmoid(lv[[r, 0]]) > self.cfg.prune_threshold
                        })
                        .collect();
                    prune_with_mask(&up, &keep)?
                }
                None => prune(&up, logits, self.cfg.prune_threshold)?,
            };
            let skip = &encoded[self.cfg.depth - 2 - i];
            z = skip_sum(&pruned, skip)?;
        }
        Ok(DecodeResult { output: z, levels })
    }

    /// Linear per-row head; returns (logits, softmax probabilities).
    pub fn classify<'t>(
        &self,
        binder: &Binder<'t>,
        prefix: &str,
        x: &SparseVar<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = x.len();
        let logits = x
            .feats
            .matmul(binder.var(&format!("{prefix}.cls.w"))?)
            .add(binder.var(&format!("{prefix}.cls.b"))?.broadcast_rows(n));
        let probs = logits.log_softmax_rows().exp();
        Ok((logits, probs))
    }

    /// encode + decode + classify in one call.
    #[allow(clippy::type_complexity)]
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        stats: &StatsStore,
        prefix: &str,
        input: &SparseVar<'t>,
        teacher: Option<&[CoordSet]>,
        training: bool,
    ) -> Result<(DecodeResult<'t>, Var<'t>, Var<'t>)> {
        let enc = self.encode(binder, stats, prefix, input, training)?;
        let dec = self.decode(binder, prefix, &enc, teacher)?;
        let (logits, probs) = self.classify(binder, prefix, &dec.output)?;
        Ok((dec, logits, probs))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Add encoder features onto decoder rows that share a coordinate; decoder
/// rows without an encoder match pass through unchanged.
fn skip_sum<'t>(dec: &SparseVar<'t>, enc: &SparseVar<'t>) -> Result<SparseVar<'t>> {
    if dec.stride != enc.stride {
        return Err(Error::Stride(format!(
            "skip connection between strides {} and {}",
            dec.stride, enc.stride
        )));
    }
    if dec.channels() != enc.channels() && dec.len() > 0 && enc.len() > 0 {
        return Err(Error::ChannelMismatch {
            expected: dec.channels(),
            got: enc.channels(),
        });
    }
    let enc_index = CoordinateIndex::build(&enc.coords);
    let mut enc_rows: Vec<u32> = Vec::new();
    let mut dec_rows: Vec<u32> = Vec::new();
    for (r, c) in dec.coords.iter().enumerate() {
        if let Some(e) = enc_index.lookup(*c) {
            enc_rows.push(e as u32);
            dec_rows.push(r as u32);
        }
    }
    if enc_rows.is_empty() {
        return Ok(dec.clone());
    }
    let gathered = enc.feats.gather_rows(Rc::new(enc_rows));
    let added = gathered.scatter_add_rows(Rc::new(dec_rows), dec.len());
    Ok(SparseVar {
        coords: dec.coords.clone(),
        stride: dec.stride,
        feats: dec.feats.add(added),
    })
}

/// Per-level occupancy targets for the decoder's upsampling steps, deepest
/// first: a coarse coordinate is occupied when any stride-1 ground-truth
/// coordinate falls inside it (max-pooling).
pub fn occupancy_targets(gt: &[Coordinate], depth: usize) -> Vec<CoordSet> {
    (0..depth.saturating_sub(1))
        .map(|i| {
            let stride = 1i32 << (depth - 2 - i);
            downsample_coords(gt, stride).into_iter().collect()
        })
        .collect()
}

/// 0/1 keep targets aligned with the given rows.
pub fn keep_targets(coords: &[Coordinate], target: &CoordSet) -> Vec<f64> {
    coords
        .iter()
        .map(|c| if target.contains(c) { 1.0 } else { 0.0 })
        .collect()
}

/// Argmax labels written onto a dense grid; everything else stays free.
/// Returns the grid and the number of out-of-bounds coordinates dropped.
pub fn to_dense_labels(
    coords: &[Coordinate],
    class_probs: &Arr,
    grid: &GridConfig,
    batch: i32,
) -> (DenseVoxelGrid, usize) {
    let mut out = DenseVoxelGrid::all_free(*grid);
    let mut dropped = 0usize;
    for (row, c) in coords.iter().enumerate() {
        if c.batch != batch {
            continue;
        }
        if !grid.in_bounds([c.x, c.y, c.z]) {
            dropped += 1;
            continue;
        }
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for k in 0..class_probs.shape()[1] {
            let p = class_probs[[row, k]];
            if p > best_p {
                best_p = p;
                best = k;
            }
        }
        out.labels[[c.x as usize, c.y as usize, c.z as usize]] = best as i32;
    }
    (out, dropped)
}
