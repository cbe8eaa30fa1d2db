//! Differentiable ops over sparse voxel tensors.
//!
//! A [`SparseVar`] couples an immutable coordinate list with a feature matrix
//! living on the tape. Convolutions are a single fused tape node: per offset,
//! gather input rows, multiply by that offset's weight matrix, scatter-add
//! into output rows; the backward pass replays the same pair lists.

use std::rc::Rc;

use ndarray::{Array2, Array3, Axis, Ix2, Ix3};

use crate::error::{Error, Result};
use crate::params::StatsStore;
use crate::sparse::{
    build_generative_kernel_map, Coordinate, KernelMap, SparseVoxelTensor,
};
use crate::tape::{Arr, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Sparse tensor whose features are a tape node.
#[derive(Clone)]
pub struct SparseVar<'t> {
    pub coords: Rc<Vec<Coordinate>>,
    pub stride: i32,
    pub feats: Var<'t>,
}

impl<'t> SparseVar<'t> {
    pub fn mount(tape: &'t Tape, t: &SparseVoxelTensor, differentiable: bool) -> SparseVar<'t> {
        let feats = t.features().clone().into_dyn();
        let feats = if differentiable {
            tape.leaf(feats)
        } else {
            tape.constant(feats)
        };
        SparseVar {
            coords: Rc::new(t.coords().to_vec()),
            stride: t.stride(),
            feats,
        }
    }

    pub fn from_parts(coords: Rc<Vec<Coordinate>>, stride: i32, feats: Var<'t>) -> SparseVar<'t> {
        SparseVar {
            coords,
            stride,
            feats,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }

    /// Copy values off the tape into a data-at-rest tensor.
    pub fn freeze(&self) -> Result<SparseVoxelTensor> {
        let feats = self
            .feats
            .value()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        SparseVoxelTensor::new(self.coords.as_ref().clone(), feats, self.stride)
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D features")
}

fn as3w(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3-D weights")
}

/// Fused kernel-map application: out[o] = sum over offsets i and pairs (a,o)
/// of x[a] · W_i. Gradients flow to both the features and the weights.
fn apply_kernel_map<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    weights: Var<'t>,
    pairs: Rc<Vec<Vec<(u32, u32)>>>,
    n_out: usize,
) -> Var<'t> {
    let (x_id, w_id) = (x.id(), weights.id());
    let d_out = weights.shape()[2];
    let value = tape.with_value(x_id, |xv| {
        tape.with_value(w_id, |wv| {
            let xf = as2(xv);
            let w = as3w(wv);
            let d_in = xf.shape()[1];
            let mut out = Array2::<f64>::zeros((n_out, d_out));
            for (oi, plist) in pairs.iter().enumerate() {
                if plist.is_empty() {
                    continue;
                }
                let wi = w.index_axis(Axis(0), oi);
                let mut gathered = Array2::<f64>::zeros((plist.len(), d_in));
                for (k, &(a, _)) in plist.iter().enumerate() {
                    gathered.row_mut(k).assign(&xf.row(a as usize));
                }
                let prod = gathered.dot(&wi);
                for (k, &(_, o)) in plist.iter().enumerate() {
                    let mut orow = out.row_mut(o as usize);
                    let prow = prod.row(k);
                    for j in 0..d_out {
                        orow[j] += prow[j];
                    }
                }
            }
            out.into_dyn()
        })
    });
    let wants = tape.wants_any(&[x_id, w_id]);
    let x_shape = x.shape();
    let w_shape = weights.shape();
    let pairs_b = pairs.clone();
    let id = tape.push_raw(
        value,
        wants,
        wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
            Box::new(move |ctx, g, sink| {
                let g2 = as2(g);
                let d_out = g2.shape()[1];
                let d_in = x_shape[1];
                let wants_x = sink.wants(x_id);
                let wants_w = sink.wants(w_id);
                let xv = ctx.v(x_id);
                let wv = ctx.v(w_id);
                let xf = as2(xv);
                let w = as3w(wv);
                let mut dx = Array2::<f64>::zeros((x_shape[0], d_in));
                let mut dw = Array3::<f64>::zeros((w_shape[0], w_shape[1], w_shape[2]));
                for (oi, plist) in pairs_b.iter().enumerate() {
                    if plist.is_empty() {
                        continue;
                    }
                    let mut gout = Array2::<f64>::zeros((plist.len(), d_out));
                    for (k, &(_, o)) in plist.iter().enumerate() {
                        gout.row_mut(k).assign(&g2.row(o as usize));
                    }
                    if wants_x {
                        let wi = w.index_axis(Axis(0), oi);
                        let dxi = gout.dot(&wi.t());
                        for (k, &(a, _)) in plist.iter().enumerate() {
                            let mut dr = dx.row_mut(a as usize);
                            let sr = dxi.row(k);
                            for j in 0..d_in {
                                dr[j] += sr[j];
                            }
                        }
                    }
                    if wants_w {
                        let mut gathered = Array2::<f64>::zeros((plist.len(), d_in));
                        for (k, &(a, _)) in plist.iter().enumerate() {
                            gathered.row_mut(k).assign(&xf.row(a as usize));
                        }
                        let dwi = gathered.t().dot(&gout);
                        let mut slot = dw.index_axis_mut(Axis(0), oi);
                        slot += &dwi;
                    }
                }
                if wants_x {
                    sink.add(x_id, dx.into_dyn());
                }
                if wants_w {
                    sink.add(w_id, dw.into_dyn());
                }
            })
        }),
    );
    Var::from_raw(tape, id)
}

fn check_conv_shapes(x: &SparseVar, weights: Var, kmap: &KernelMap) -> Result<()> {
    let ws = weights.shape();
    if ws.len() != 3 || ws[0] != kmap.offsets.len() {
        return Err(Error::Shape(format!(
            "weights shape {ws:?} does not match {} kernel offsets",
            kmap.offsets.len()
        )));
    }
    if ws[1] != x.channels() {
        return Err(Error::ChannelMismatch {
            expected: ws[1],
            got: x.channels(),
        });
    }
    if kmap.in_rows != x.len() {
        return Err(Error::Shape(format!(
            "kernel map built for {} input rows, tensor has {}",
            kmap.in_rows,
            x.len()
        )));
    }
    Ok(())
}

/// Generalized sparse convolution over a prebuilt kernel map.
pub fn sparse_conv<'t>(
    x: &SparseVar<'t>,
    weights: Var<'t>,
    bias: Option<Var<'t>>,
    kmap: &KernelMap,
) -> Result<SparseVar<'t>> {
    check_conv_shapes(x, weights, kmap)?;
    let tape = x.feats.tape();
    let n_out = kmap.out_coords.len();
    let mut out = apply_kernel_map(tape, x.feats, weights, Rc::new(kmap.pairs.clone()), n_out);
    if let Some(b) = bias {
        out = out.add(b.broadcast_rows(n_out));
    }
    Ok(SparseVar {
        coords: Rc::new(kmap.out_coords.clone()),
        stride: kmap.out_stride,
        feats: out,
    })
}

/// Transposed convolution that expands the support: every input coordinate
/// spawns the full offset cube at the finer stride.
pub fn generative_transposed_conv<'t>(
    x: &SparseVar<'t>,
    weights: Var<'t>,
    bias: Option<Var<'t>>,
    kernel_size: usize,
    upsample: i32,
) -> Result<SparseVar<'t>> {
    let kmap = build_generative_kernel_map(&x.coords, x.stride, kernel_size, upsample)?;
    check_conv_shapes(x, weights, &kmap)?;
    let tape = x.feats.tape();
    let n_out = kmap.out_coords.len();
    let mut out = apply_kernel_map(tape, x.feats, weights, Rc::new(kmap.pairs), n_out);
    if let Some(b) = bias {
        out = out.add(b.broadcast_rows(n_out));
    }
    Ok(SparseVar {
        coords: Rc::new(kmap.out_coords),
        stride: kmap.out_stride,
        feats: out,
    })
}

/// Keep exactly the rows whose sigmoid(logit) exceeds the threshold.
/// The keep decision is non-differentiable; gradients flow through the
/// surviving feature rows only.
pub fn prune<'t>(
    x: &SparseVar<'t>,
    keep_logits: Var<'t>,
    threshold: f64,
) -> Result<SparseVar<'t>> {
    let ls = keep_logits.shape();
    if ls[0] != x.len() {
        return Err(Error::Length(format!(
            "{} keep logits for {} rows",
            ls[0],
            x.len()
        )));
    }
    let logits = keep_logits.value();
    let l2 = as2(&logits);
    let keep: Vec<bool> = (0..x.len())
        .map(|i| {
            let z = l2[[i, 0]];
            let p = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            p > threshold
        })
        .collect();
    prune_with_mask(x, &keep)
}

/// Prune with an externally chosen keep mask (teacher forcing).
pub fn prune_with_mask<'t>(x: &SparseVar<'t>, keep: &[bool]) -> Result<SparseVar<'t>> {
    if keep.len() != x.len() {
        return Err(Error::Length(format!(
            "{} mask entries for {} rows",
            keep.len(),
            x.len()
        )));
    }
    let mut coords = Vec::new();
    let mut idx = Vec::new();
    for (i, (&k, &c)) in keep.iter().zip(x.coords.iter()).enumerate() {
        if k {
            coords.push(c);
            idx.push(i as u32);
        }
    }
    Ok(SparseVar {
        coords: Rc::new(coords),
        stride: x.stride,
        feats: x.feats.gather_rows(Rc::new(idx)),
    })
}

/// Per-row segment ids grouping rows by batch index, segment order = first
/// occurrence. Returns (segment id per row, segment count, rows per segment).
pub fn batch_segments(coords: &[Coordinate]) -> (Vec<u32>, usize, Vec<usize>) {
    let mut order: Vec<i32> = Vec::new();
    let mut seg = Vec::with_capacity(coords.len());
    let mut counts: Vec<usize> = Vec::new();
    for c in coords {
        let s = match order.iter().position(|&b| b == c.batch) {
            Some(p) => p,
            None => {
                order.push(c.batch);
                counts.push(0);
                order.len() - 1
            }
        };
        counts[s] += 1;
        seg.push(s as u32);
    }
    (seg, order.len(), counts)
}

/// Squeeze-excite: per batch item, global average pool, bottleneck MLP with
/// sigmoid output, channel-wise rescale of that item's rows.
pub fn squeeze_excite<'t>(
    x: &SparseVar<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
) -> Result<SparseVar<'t>> {
    let d = x.channels();
    if w1.shape()[0] != d {
        return Err(Error::ChannelMismatch {
            expected: w1.shape()[0],
            got: d,
        });
    }
    if w2.shape()[1] != d {
        return Err(Error::ChannelMismatch {
            expected: w2.shape()[1],
            got: d,
        });
    }
    let tape = x.feats.tape();
    let (seg, n_seg, counts) = batch_segments(&x.coords);
    let seg = Rc::new(seg);
    let pooled_sum = x.feats.scatter_add_rows(seg.clone(), n_seg);
    let inv = Array2::from_shape_fn((n_seg, 1), |(i, _)| 1.0 / counts[i].max(1) as f64);
    let pooled = pooled_sum.scale_rows(tape.constant(inv.into_dyn()));
    let hidden = pooled.matmul(w1).add(b1.broadcast_rows(n_seg)).relu();
    let gates = hidden.matmul(w2).add(b2.broadcast_rows(n_seg)).sigmoid();
    let per_row = gates.gather_rows(seg);
    Ok(SparseVar {
        coords: x.coords.clone(),
        stride: x.stride,
        feats: x.feats.mul(per_row),
    })
}

/// Per-channel statistic normalization over all rows of the batch, with an
/// affine output transform. Training mode normalizes by batch statistics and
/// folds them into the running estimates; eval mode uses the running ones.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<'t>(
    x: &SparseVar<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    stats: &StatsStore,
    key: &str,
    training: bool,
) -> SparseVar<'t> {
    let tape = x.feats.tape();
    let n = x.len();
    let d = x.channels();
    if n == 0 {
        return x.clone();
    }
    let normalized = if training {
        let mean = x.feats.mean_rows();
        let centered = x.feats.sub(mean.broadcast_rows(n));
        let var = centered.mul(centered).mean_rows();
        stats.update(key, &mean.value(), &var.value(), NORM_MOMENTUM);
        let inv_std = var.add_scalar(NORM_EPS).powf(-0.5);
        centered.mul(inv_std.broadcast_rows(n))
    } else {
        let (rm, rv) = stats.get_or_init(key, d);
        let rm = tape.constant(rm);
        let inv = tape.constant(rv.mapv(|v| 1.0 / (v + NORM_EPS).sqrt()));
        x.feats
            .sub(rm.broadcast_rows(n))
            .mul(inv.broadcast_rows(n))
    };
    SparseVar {
        coords: x.coords.clone(),
        stride: x.stride,
        feats: normalized
            .mul(gamma.broadcast_rows(n))
            .add(beta.broadcast_rows(n)),
    }
}
