//! Coordinate-list sparse voxel tensors and kernel maps.
//!
//! Coordinates are absolute voxel indices: a tensor at stride `s` only holds
//! coordinates divisible by `s`, so strides can change without rescaling the
//! lattice. A [`KernelMap`] lists, per kernel offset, the (input_row,
//! output_row) pairs that contribute; convolutions are then just gather,
//! per-offset matrix multiply and scatter-add over those pairs (see
//! [`ops`]).
//!
//! Kernel offsets are ordered lexicographically by (dz, dy, dx) everywhere,
//! which keeps weight tensors portable across runs and serializations.

pub mod ops;

use std::path::Path;

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::error::{Error, Result};
use crate::mocc::Container;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Coordinate {
    pub batch: i32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coordinate {
    pub fn new(batch: i32, x: i32, y: i32, z: i32) -> Self {
        Coordinate { batch, x, y, z }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Coordinate {
            batch: self.batch,
            x: self.x + dx,
            y: self.y + dy,
            z: self.z + dz,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn coord_hash(c: Coordinate) -> u64 {
    let k1 = ((c.batch as u32 as u64) << 32) | (c.x as u32 as u64);
    let k2 = ((c.y as u32 as u64) << 32) | (c.z as u32 as u64);
    splitmix64(splitmix64(k1) ^ k2)
}

/// Open-addressing map from [`Coordinate`] to row index with deterministic
/// iteration order (first occurrence wins on duplicates).
pub struct CoordinateIndex {
    coords: Vec<Coordinate>,
    table: Vec<i32>,
    mask: u64,
}

impl CoordinateIndex {
    pub fn build(input: &[Coordinate]) -> CoordinateIndex {
        let cap = (input.len().max(4) * 2).next_power_of_two();
        let mut idx = CoordinateIndex {
            coords: Vec::with_capacity(input.len()),
            table: vec![-1; cap],
            mask: cap as u64 - 1,
        };
        for &c in input {
            idx.insert(c);
        }
        idx
    }

    /// Returns the row of `c`, inserting it at the end when absent.
    pub fn insert(&mut self, c: Coordinate) -> usize {
        let mut slot = (coord_hash(c) & self.mask) as usize;
        loop {
            let row = self.table[slot];
            if row < 0 {
                let new_row = self.coords.len();
                self.coords.push(c);
                self.table[slot] = new_row as i32;
                if (self.coords.len() + 1) * 2 > self.table.len() {
                    self.grow();
                }
                return new_row;
            }
            if self.coords[row as usize] == c {
                return row as usize;
            }
            slot = (slot + 1) & self.mask as usize;
        }
    }

    fn grow(&mut self) {
        let cap = self.table.len() * 2;
        self.table = vec![-1; cap];
        self.mask = cap as u64 - 1;
        for (row, &c) in self.coords.iter().enumerate() {
            let mut slot = (coord_hash(c) & self.mask) as usize;
            while self.table[slot] >= 0 {
                slot = (slot + 1) & self.mask as usize;
            }
            self.table[slot] = row as i32;
        }
    }

    pub fn lookup(&self, c: Coordinate) -> Option<usize> {
        let mut slot = (coord_hash(c) & self.mask) as usize;
        loop {
            let row = self.table[slot];
            if row < 0 {
                return None;
            }
            if self.coords[row as usize] == c {
                return Some(row as usize);
            }
            slot = (slot + 1) & self.mask as usize;
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coordinate] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<Coordinate> {
        self.coords
    }
}

/// COO sparse tensor: unique coordinates, an N×d feature matrix and a stride.
#[derive(Clone, Debug)]
pub struct SparseVoxelTensor {
    coords: Vec<Coordinate>,
    features: Array2<f64>,
    stride: i32,
}

impl SparseVoxelTensor {
    pub fn new(coords: Vec<Coordinate>, features: Array2<f64>, stride: i32) -> Result<Self> {
        if stride <= 0 {
            return Err(Error::Stride(format!("stride must be positive, got {stride}")));
        }
        if coords.len() != features.shape()[0] {
            return Err(Error::Shape(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.shape()[0]
            )));
        }
        for c in &coords {
            if c.x % stride != 0 || c.y % stride != 0 || c.z % stride != 0 {
                return Err(Error::Stride(format!(
                    "coordinate ({},{},{},{}) not divisible by stride {stride}",
                    c.batch, c.x, c.y, c.z
                )));
            }
        }
        let index = CoordinateIndex::build(&coords);
        if index.len() != coords.len() {
            return Err(Error::Shape(format!(
                "{} duplicate coordinates",
                coords.len() - index.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse tensor features".to_string()));
        }
        Ok(SparseVoxelTensor {
            coords,
            features,
            stride,
        })
    }

    pub fn empty(channels: usize, stride: i32) -> Self {
        SparseVoxelTensor {
            coords: Vec::new(),
            features: Array2::zeros((0, channels)),
            stride,
        }
    }

    pub fn coords(&self) -> &[Coordinate] {
        &self.coords
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    /// Store as three records under `prefix`: i32 coords (N×4), f64 features
    /// (N×d), i32 stride.
    pub fn to_records(&self, c: &mut Container, prefix: &str) {
        let n = self.coords.len();
        let mut coords = ndarray::Array2::<i32>::zeros((n, 4));
        for (i, co) in self.coords.iter().enumerate() {
            coords[[i, 0]] = co.batch;
            coords[[i, 1]] = co.x;
            coords[[i, 2]] = co.y;
            coords[[i, 3]] = co.z;
        }
        c.push_i32(&format!("{prefix}.coords"), coords.into_dyn());
        c.push_f64(&format!("{prefix}.features"), self.features.clone().into_dyn());
        c.push_i32(
            &format!("{prefix}.stride"),
            ndarray::arr1(&[self.stride]).into_dyn(),
        );
    }

    pub fn from_records(c: &Container, prefix: &str, path: &Path) -> Result<Self> {
        let name = format!("{prefix}.coords");
        let coords_arr = c.require(path, &name)?.as_i32(path, &name)?;
        let name = format!("{prefix}.features");
        let feats_arr = c.require(path, &name)?.as_f64(path, &name)?;
        let name = format!("{prefix}.stride");
        let stride_arr = c.require(path, &name)?.as_i32(path, &name)?;
        let coords_arr = coords_arr
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::container(path, e.to_string()))?;
        let mut coords = Vec::with_capacity(coords_arr.shape()[0]);
        for row in coords_arr.rows() {
            coords.push(Coordinate::new(row[0], row[1], row[2], row[3]));
        }
        let features = feats_arr
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::container(path, e.to_string()))?
            .to_owned();
        let stride = stride_arr
            .iter()
            .next()
            .copied()
            .ok_or_else(|| Error::container(path, "empty stride record"))?;
        SparseVoxelTensor::new(coords, features, stride)
    }
}

/// Kernel offsets for an odd, centered kernel: lexicographic in (dz,dy,dx),
/// each component in {-(K-1)/2, ..., (K-1)/2} scaled by `step`.
pub fn centered_offsets(kernel_size: usize, step: i32) -> Vec<(i32, i32, i32)> {
    let h = (kernel_size as i32 - 1) / 2;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                out.push((dx * step, dy * step, dz * step));
            }
        }
    }
    out
}

/// Kernel offsets for support expansion: lexicographic in (dz,dy,dx), each
/// component in {0, ..., K-1} scaled by `step`.
pub fn corner_offsets(kernel_size: usize, step: i32) -> Vec<(i32, i32, i32)> {
    let k = kernel_size as i32;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for dz in 0..k {
        for dy in 0..k {
            for dx in 0..k {
                out.push((dx * step, dy * step, dz * step));
            }
        }
    }
    out
}

/// Per-offset (input_row, output_row) contribution lists.
pub struct KernelMap {
    pub offsets: Vec<(i32, i32, i32)>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub in_rows: usize,
    pub out_coords: Vec<Coordinate>,
    pub out_stride: i32,
}

impl KernelMap {
    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }
}

/// Unique downsampled coordinates (floor division to the coarser lattice),
/// first occurrence order.
pub fn downsample_coords(coords: &[Coordinate], out_stride: i32) -> Vec<Coordinate> {
    let mut index = CoordinateIndex::build(&[]);
    for c in coords {
        index.insert(Coordinate {
            batch: c.batch,
            x: c.x.div_euclid(out_stride) * out_stride,
            y: c.y.div_euclid(out_stride) * out_stride,
            z: c.z.div_euclid(out_stride) * out_stride,
        });
    }
    index.into_coords()
}

/// Kernel map for a (possibly strided) centered convolution. The
/// neighborhood of an output coordinate u is {u + i} with offsets i scaled by
/// the input stride; pairs exist exactly where u + i is an input coordinate.
pub fn build_kernel_map(
    in_index: &CoordinateIndex,
    out_coords: &[Coordinate],
    kernel_size: usize,
    in_stride: i32,
    out_stride: i32,
) -> Result<KernelMap> {
    if kernel_size % 2 == 0 {
        return Err(Error::Config(format!(
            "centered convolutions need an odd kernel, got {kernel_size}"
        )));
    }
    if out_stride % in_stride != 0 {
        return Err(Error::Stride(format!(
            "output stride {out_stride} not a multiple of input stride {in_stride}"
        )));
    }
    for c in out_coords {
        if c.x % out_stride != 0 || c.y % out_stride != 0 || c.z % out_stride != 0 {
            return Err(Error::Stride(format!(
                "output coordinate ({},{},{},{}) not divisible by stride {out_stride}",
                c.batch, c.x, c.y, c.z
            )));
        }
    }
    let offsets = centered_offsets(kernel_size, in_stride);
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (out_row, &u) in out_coords.iter().enumerate() {
        for (oi, &(dx, dy, dz)) in offsets.iter().enumerate() {
            if let Some(in_row) = in_index.lookup(u.offset(dx, dy, dz)) {
                pairs[oi].push((in_row as u32, out_row as u32));
            }
        }
    }
    Ok(KernelMap {
        offsets,
        pairs,
        in_rows: in_index.len(),
        out_coords: out_coords.to_vec(),
        out_stride,
    })
}

/// Kernel map for generative transposed convolution: the output support is
/// the outer product of input coordinates with the corner offsets at the
/// finer stride, deduplicated; every (input, offset) combination contributes.
pub fn build_generative_kernel_map(
    in_coords: &[Coordinate],
    in_stride: i32,
    kernel_size: usize,
    upsample: i32,
) -> Result<KernelMap> {
    if upsample <= 0 || in_stride % upsample != 0 {
        return Err(Error::Stride(format!(
            "input stride {in_stride} not divisible by upsample factor {upsample}"
        )));
    }
    let out_stride = in_stride / upsample;
    let offsets = corner_offsets(kernel_size, out_stride);
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    let mut out_index = CoordinateIndex::build(&[]);
    for (in_row, &c) in in_coords.iter().enumerate() {
        for (oi, &(dx, dy, dz)) in offsets.iter().enumerate() {
            let out_row = out_index.insert(c.offset(dx, dy, dz));
            pairs[oi].push((in_row as u32, out_row as u32));
        }
    }
    Ok(KernelMap {
        offsets,
        pairs,
        in_rows: in_coords.len(),
        out_coords: out_index.into_coords(),
        out_stride,
    })
}

/// Dense helper: (features, occupancy) of one batch item on a dense grid,
/// used by tests and by rasterization.
pub fn to_dense(
    t: &SparseVoxelTensor,
    batch: i32,
    dims: (usize, usize, usize),
) -> ArrayD<f64> {
    let d = t.channels();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[dims.0, dims.1, dims.2, d]));
    for (row, c) in t.coords().iter().enumerate() {
        if c.batch != batch {
            continue;
        }
        let (x, y, z) = (c.x, c.y, c.z);
        if x < 0 || y < 0 || z < 0 {
            continue;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= dims.0 || y >= dims.1 || z >= dims.2 {
            continue;
        }
        for ch in 0..d {
            out[[x, y, z, ch]] = t.features()[[row, ch]];
        }
    }
    out
}
