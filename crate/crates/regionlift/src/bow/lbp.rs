//! Uniform local binary pattern histograms.
//!
//! Each interior pixel of a patch gets an 8-bit code: bit `i` is set when the
//! i-th neighbor (clockwise from the top-left) is at least as bright as the
//! center. Codes with at most two 0/1 transitions around the circle are
//! "uniform" and keep their own histogram bin (58 of them); everything else
//! shares a catch-all bin, giving 59 bins total.

use crate::geometry::Rect;
use crate::raster::GrayImage;
use crate::scalar::{cast, Scalar};

use super::BowError;

/// Histogram length: 58 uniform patterns plus one catch-all bin.
pub const LBP_BINS: usize = 59;

const CATCH_ALL: u8 = 58;

const fn transitions(code: u8) -> u32 {
    let mut t = 0;
    let mut i = 0;
    while i < 8 {
        let a = (code >> i) & 1;
        let b = (code >> ((i + 1) % 8)) & 1;
        if a != b {
            t += 1;
        }
        i += 1;
    }
    t
}

const fn build_bin_table() -> [u8; 256] {
    let mut table = [CATCH_ALL; 256];
    let mut bin = 0u8;
    let mut code = 0usize;
    while code < 256 {
        if transitions(code as u8) <= 2 {
            table[code] = bin;
            bin += 1;
        }
        code += 1;
    }
    table
}

/// Maps an LBP code to its histogram bin; uniform codes in ascending order.
static UNIFORM_BIN: [u8; 256] = build_bin_table();

/// Neighbor offsets, clockwise from the top-left corner.
const NEIGHBORS: [(i32, i32); 8] =
    [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

/// 8-neighbor code of an interior pixel (all neighbors must be in bounds).
#[inline]
pub fn lbp_code(img: &GrayImage, x: u32, y: u32) -> u8 {
    let center = img.get(x, y);
    let mut code = 0u8;
    for (i, (dx, dy)) in NEIGHBORS.iter().enumerate() {
        let v = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32);
        code |= ((v >= center) as u8) << i;
    }
    code
}

/// L1-normalized histogram of uniform LBP codes over the interior of `patch`
/// (image coordinates; the patch must lie inside the image and be >= 3x3).
pub fn lbp_histogram<F: Scalar>(img: &GrayImage, patch: Rect) -> Result<Vec<F>, BowError> {
    if patch.width() < 3 || patch.height() < 3 {
        return Err(BowError::PatchTooSmall { width: patch.width(), height: patch.height() });
    }
    debug_assert!(img.extent().contains(patch), "patch outside image");
    let mut counts = [0u32; LBP_BINS];
    for y in patch.y1 + 1..patch.y2 - 1 {
        for x in patch.x1 + 1..patch.x2 - 1 {
            let code = lbp_code(img, x as u32, y as u32);
            counts[UNIFORM_BIN[code as usize] as usize] += 1;
        }
    }
    let total: u32 = counts.iter().sum();
    let hist = if total == 0 {
        vec![F::zero(); LBP_BINS]
    } else {
        let norm = cast::<F>(total as f64);
        counts.iter().map(|&c| cast::<F>(c as f64) / norm).collect()
    };
    Ok(hist)
}
