//! Metric voxel grid geometry and dense labeled grids.

use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use serde::{Deserialize, Serialize};

use crate::classes::FREE_CLASS;
use crate::error::{Error, Result};
use crate::mocc::Container;

/// Axis-aligned voxel lattice: `dims` voxels of edge `voxel_size` starting at
/// the metric `min` corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub min: [f64; 3],
}

impl GridConfig {
    /// 64x64x8 at 0.5 m covering (-16,-16,-1)..(16,16,3).
    pub fn desk() -> Self {
        GridConfig {
            dims: [64, 64, 8],
            voxel_size: 0.5,
            min: [-16.0, -16.0, -1.0],
        }
    }

    /// Same extent as `desk` at half the voxel size: 128x128x16 at 0.25 m.
    pub fn desk_fine() -> Self {
        GridConfig {
            dims: [128, 128, 16],
            voxel_size: 0.25,
            min: [-16.0, -16.0, -1.0],
        }
    }

    /// 200x200x16 at 0.4 m covering (-40,-40,-1)..(40,40,5.4).
    pub fn paper() -> Self {
        GridConfig {
            dims: [200, 200, 16],
            voxel_size: 0.4,
            min: [-40.0, -40.0, -1.0],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "desk-fine" => Ok(Self::desk_fine()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown grid preset {other:?}, expected desk, desk-fine or paper"
            ))),
        }
    }

    pub fn max(&self) -> [f64; 3] {
        [
            self.min[0] + self.dims[0] as f64 * self.voxel_size,
            self.min[1] + self.dims[1] as f64 * self.voxel_size,
            self.min[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Voxel containing a metric point, or None when out of range.
    pub fn voxel_index(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - self.min[a]) / self.voxel_size).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx)
    }

    /// Metric center of a voxel index (also meaningful for strided indices
    /// when scaled by the stride before calling).
    pub fn voxel_center(&self, idx: [i32; 3]) -> [f64; 3] {
        [
            self.min[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.min[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.min[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        ]
    }

    pub fn in_bounds(&self, idx: [i32; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }
}

/// Dense labeled grid plus a visibility mask; labels in [0, C-1] with free=17.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVoxelGrid {
    pub config: GridConfig,
    pub labels: Array3<i32>,
    pub mask: Array3<bool>,
}

impl DenseVoxelGrid {
    pub fn all_free(config: GridConfig) -> Self {
        let d = config.dims;
        DenseVoxelGrid {
            config,
            labels: Array3::from_elem((d[0], d[1], d[2]), FREE_CLASS),
            mask: Array3::from_elem((d[0], d[1], d[2]), true),
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != FREE_CLASS).count()
    }

    /// Per-class voxel counts over non-free labels (length NUM_CLASSES).
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; crate::classes::NUM_CLASSES];
        for &l in self.labels.iter() {
            if (0..counts.len() as i32).contains(&l) {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn to_records(&self, c: &mut Container, prefix: &str) {
        c.push_i32(&format!("{prefix}.labels"), self.labels.clone().into_dyn());
        let mask_i32 = self.mask.mapv(|b| b as i32);
        c.push_i32(&format!("{prefix}.mask"), mask_i32.into_dyn());
    }

    pub fn from_records(
        c: &Container,
        prefix: &str,
        config: GridConfig,
        path: &Path,
    ) -> Result<Self> {
        let name = format!("{prefix}.labels");
        let labels: ArrayD<i32> = c.require(path, &name)?.as_i32(path, &name)?.clone();
        let name = format!("{prefix}.mask");
        let mask: ArrayD<i32> = c.require(path, &name)?.as_i32(path, &name)?.clone();
        let labels = labels
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::container(path, e.to_string()))?;
        let mask = mask
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::container(path, e.to_string()))?
            .mapv(|v| v != 0);
        let d = config.dims;
        if labels.shape() != [d[0], d[1], d[2]] || mask.shape() != [d[0], d[1], d[2]] {
            return Err(Error::container(
                path,
                format!(
                    "grid records shaped {:?}/{:?}, config wants {:?}",
                    labels.shape(),
                    mask.shape(),
                    d
                ),
            ));
        }
        Ok(DenseVoxelGrid {
            config,
            labels,
            mask,
        })
    }
}
