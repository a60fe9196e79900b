//! Spatial-pyramid max pooling of sparse codes.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::llc::Code;

/// Pyramid grid levels, e.g. `[(1,1), (1,2), (2,3)]` for 9 cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: Vec<(u32, u32)>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { levels: vec![(1, 1), (1, 2), (2, 3)] }
    }
}

impl PyramidConfig {
    pub fn cells(&self) -> usize {
        self.levels.iter().map(|&(r, c)| r as usize * c as usize).sum()
    }

    pub fn is_valid(&self) -> bool {
        !self.levels.is_empty() && self.levels.iter().all(|&(r, c)| r >= 1 && c >= 1)
    }
}

/// Pooled feature length without allocating anything.
pub fn feature_len(channels: usize, k: usize, pyramid: &PyramidConfig) -> usize {
    channels * k * pyramid.cells()
}

/// Where a pooled feature came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub image: String,
    pub box_index: u32,
}

/// Max-pooled bag-of-words feature over one region crop.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature<F: Scalar> {
    pub values: Vec<F>,
    pub provenance: Option<Provenance>,
}

/// Pools codes into pyramid cells partitioning a `width` x `height` crop.
///
/// Cells are concatenated level by level, row-major inside a level; each cell
/// block is the component-wise max of its codes, clamped at zero (an empty
/// cell stays a zero block).
pub fn spm_pool<F: Scalar>(
    codes: &[(Code<F>, (u32, u32))],
    width: u32,
    height: u32,
    k: usize,
    pyramid: &PyramidConfig,
) -> RegionFeature<F> {
    assert!(pyramid.is_valid(), "pyramid must have at least one non-empty level");
    let mut values = vec![F::zero(); feature_len(1, k, pyramid)];
    let mut level_base = 0usize;
    for &(rows, cols) in &pyramid.levels {
        for &(ref code, (cx, cy)) in codes {
            debug_assert!(cx < width && cy < height, "code center outside crop");
            let row = (cy as u64 * rows as u64 / height as u64) as usize;
            let col = (cx as u64 * cols as u64 / width as u64) as usize;
            let cell = level_base + row * cols as usize + col;
            let block = &mut values[cell * k..(cell + 1) * k];
            for &(idx, v) in code.entries() {
                let slot = &mut block[idx as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
        level_base += (rows * cols) as usize;
    }
    RegionFeature { values, provenance: None }
}
