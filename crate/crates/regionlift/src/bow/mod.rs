//! Mask-aware bag-of-words region classification.
//!
//! The stack: dense multi-scale LBP descriptors over a region crop, sparse
//! coding against a k-means codebook, spatial-pyramid max pooling, and a
//! linear score. Descriptors whose patch center falls outside the region
//! mask are dropped, so pixels outside the region never contaminate codes.

pub mod kmeans;
pub mod lbp;
pub mod llc;
pub mod spm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PixelMask, Rect};
use crate::raster::GrayImage;
use crate::scalar::Scalar;

pub use kmeans::{kmeans_train, Codebook, KmeansOutcome, KmeansParams};
pub use lbp::{lbp_histogram, LBP_BINS};
pub use llc::{llc_encode, Code, LlcConfig};
pub use spm::{feature_len, spm_pool, Provenance, PyramidConfig, RegionFeature};

#[derive(Debug, Error)]
pub enum BowError {
    #[error("patch {width}x{height} is too small; at least 3x3 required")]
    PatchTooSmall { width: u32, height: u32 },
    #[error("mask {mask_w}x{mask_h} does not match crop {crop_w}x{crop_h}")]
    MaskSizeMismatch { mask_w: u32, mask_h: u32, crop_w: u32, crop_h: u32 },
    #[error("crop {crop:?} lies outside the image")]
    CropOutsideImage { crop: Rect },
    #[error("codebook size {k} is invalid; need k >= 2")]
    InvalidCodebookSize { k: usize },
    #[error("{neighbors} neighbors requested from a codebook of {k} centers")]
    InvalidNeighbors { neighbors: usize, k: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("local Gram matrix is singular; use lambda > 0")]
    SingularGram,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Dense-grid sampling plan: one pass per patch size, 50% overlap stride.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub patch_sizes: Vec<u32>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { patch_sizes: vec![12, 16, 20, 24] }
    }
}

impl SamplingConfig {
    pub fn is_valid(&self) -> bool {
        !self.patch_sizes.is_empty() && self.patch_sizes.iter().all(|&p| p >= 3)
    }
}

/// A descriptor sampled at a grid position of a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<F: Scalar> {
    pub vector: Vec<F>,
    /// Patch center in crop-local pixels.
    pub center: (u32, u32),
    pub patch_size: u32,
}

/// Samples LBP descriptors over `crop` at every grid position whose patch
/// center lies inside the mask. The mask is crop-local and must match the
/// crop size. An all-false mask yields an empty list.
pub fn dense_sample<F: Scalar>(
    img: &GrayImage,
    crop: Rect,
    mask: &PixelMask,
    cfg: &SamplingConfig,
) -> Result<Vec<Descriptor<F>>, BowError> {
    if !img.extent().contains(crop) {
        return Err(BowError::CropOutsideImage { crop });
    }
    let (w, h) = (crop.width(), crop.height());
    if mask.width() != w || mask.height() != h {
        return Err(BowError::MaskSizeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            crop_w: w,
            crop_h: h,
        });
    }
    let mut out = Vec::new();
    for &p in &cfg.patch_sizes {
        if p < 3 {
            return Err(BowError::PatchTooSmall { width: p, height: p });
        }
        if p > w || p > h {
            continue;
        }
        let stride = (p / 2).max(1);
        let mut y0 = 0u32;
        while y0 + p <= h {
            let mut x0 = 0u32;
            while x0 + p <= w {
                let center = (x0 + p / 2, y0 + p / 2);
                if mask.get(center.0, center.1) {
                    let patch = Rect::new(
                        crop.x1 + x0 as i32,
                        crop.y1 + y0 as i32,
                        crop.x1 + (x0 + p) as i32,
                        crop.y1 + (y0 + p) as i32,
                    );
                    let vector = lbp_histogram(img, patch)?;
                    out.push(Descriptor { vector, center, patch_size: p });
                }
                x0 += stride;
            }
            y0 += stride;
        }
    }
    Ok(out)
}

/// Codes for every grid position of a crop, mask applied later at pooling.
/// Computing this once per distinct crop lets many regions share the work.
#[derive(Debug, Clone)]
pub struct EncodedCrop<F: Scalar> {
    pub codes: Vec<(Code<F>, (u32, u32))>,
    pub width: u32,
    pub height: u32,
}

pub fn encode_crop<F: Scalar>(
    img: &GrayImage,
    crop: Rect,
    codebook: &Codebook<F>,
    sampling: &SamplingConfig,
    llc: &LlcConfig<F>,
) -> Result<EncodedCrop<F>, BowError> {
    let full = PixelMask::full(crop.width(), crop.height());
    let descriptors = dense_sample::<F>(img, crop, &full, sampling)?;
    let codes = descriptors
        .into_iter()
        .map(|d| llc_encode(&d.vector, codebook, llc).map(|c| (c, d.center)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedCrop { codes, width: crop.width(), height: crop.height() })
}

/// Pools a pre-encoded crop over the positions selected by `mask`.
pub fn pool_masked<F: Scalar>(
    encoded: &EncodedCrop<F>,
    mask: &PixelMask,
    k: usize,
    pyramid: &PyramidConfig,
) -> Result<RegionFeature<F>, BowError> {
    if mask.width() != encoded.width || mask.height() != encoded.height {
        return Err(BowError::MaskSizeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            crop_w: encoded.width,
            crop_h: encoded.height,
        });
    }
    let selected: Vec<(Code<F>, (u32, u32))> = encoded
        .codes
        .iter()
        .filter(|&&(_, (cx, cy))| mask.get(cx, cy))
        .cloned()
        .collect();
    Ok(spm_pool(&selected, encoded.width, encoded.height, k, pyramid))
}

/// Everything needed to score one region: codebook, coding and pooling
/// settings, and a linear decision function.
#[derive(Debug, Clone)]
pub struct RegionClassifier<F: Scalar> {
    pub codebook: Codebook<F>,
    pub pyramid: PyramidConfig,
    pub sampling: SamplingConfig,
    pub llc: LlcConfig<F>,
    pub weights: Vec<F>,
    pub bias: F,
}

impl<F: Scalar> RegionClassifier<F> {
    pub fn feature_len(&self) -> usize {
        feature_len(1, self.codebook.k(), &self.pyramid)
    }

    /// Pooled feature of the masked crop.
    pub fn feature(
        &self,
        img: &GrayImage,
        crop: Rect,
        mask: &PixelMask,
    ) -> Result<RegionFeature<F>, BowError> {
        let descriptors = dense_sample::<F>(img, crop, mask, &self.sampling)?;
        let codes = descriptors
            .into_iter()
            .map(|d| llc_encode(&d.vector, &self.codebook, &self.llc).map(|c| (c, d.center)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(spm_pool(&codes, crop.width(), crop.height(), self.codebook.k(), &self.pyramid))
    }

    /// Linear score `w . feature + bias` of the masked crop.
    pub fn classify(&self, img: &GrayImage, crop: Rect, mask: &PixelMask) -> Result<F, BowError> {
        let feature = self.feature(img, crop, mask)?;
        self.score_feature(&feature)
    }

    pub fn score_feature(&self, feature: &RegionFeature<F>) -> Result<F, BowError> {
        if feature.values.len() != self.weights.len() {
            return Err(BowError::DimensionMismatch {
                expected: self.weights.len(),
                got: feature.values.len(),
            });
        }
        let dot: F = self.weights.iter().zip(&feature.values).map(|(&w, &v)| w * v).sum();
        Ok(dot + self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageExtent;
    use crate::svm::{smo_train, KernelSpec, SmoParams};

    fn grid_image(w: u32, h: u32) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, ((x * 7 + y * 13) % 251) as u8);
            }
        }
        img
    }

    #[test]
    fn full_mask_grid_count() {
        // 16x16 patches at 8px stride on a 64x64 crop: 7x7 grid positions.
        let img = grid_image(64, 64);
        let crop = Rect::new(0, 0, 64, 64);
        let mask = PixelMask::full(64, 64);
        let cfg = SamplingConfig { patch_sizes: vec![16] };
        let descriptors: Vec<Descriptor<f64>> = dense_sample(&img, crop, &mask, &cfg).unwrap();
        assert_eq!(descriptors.len(), 49);
        for d in &descriptors {
            assert_eq!(d.patch_size, 16);
            let s: f64 = d.vector.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_yields_no_descriptors() {
        let img = grid_image(32, 32);
        let crop = Rect::new(0, 0, 32, 32);
        let mask = PixelMask::new(32, 32);
        let cfg = SamplingConfig { patch_sizes: vec![12] };
        let descriptors: Vec<Descriptor<f64>> = dense_sample(&img, crop, &mask, &cfg).unwrap();
        assert!(descriptors.is_empty());
    }

    #[test]
    fn half_mask_keeps_only_masked_centers() {
        let img = grid_image(64, 64);
        let crop = Rect::new(0, 0, 64, 64);
        let mut mask = PixelMask::new(64, 64);
        mask.set_rect(Rect::new(0, 0, 32, 64), true);
        let cfg = SamplingConfig { patch_sizes: vec![16] };
        let descriptors: Vec<Descriptor<f64>> = dense_sample(&img, crop, &mask, &cfg).unwrap();
        // Centers are x0 + 8 for x0 in {0,8,...,48}; centers < 32 keep
        // x0 in {0,8,16}, so 3 of 7 columns survive.
        assert_eq!(descriptors.len(), 3 * 7);
        assert!(descriptors.iter().all(|d| d.center.0 < 32));
    }

    #[test]
    fn mask_size_mismatch_is_an_error() {
        let img = grid_image(32, 32);
        let crop = Rect::new(0, 0, 32, 32);
        let mask = PixelMask::new(16, 32);
        let cfg = SamplingConfig::default();
        assert!(matches!(
            dense_sample::<f64>(&img, crop, &mask, &cfg),
            Err(BowError::MaskSizeMismatch { .. })
        ));
    }

    fn stripes(w: u32, h: u32, vertical: bool, period: u32) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let t = if vertical { x } else { y };
                let v = if (t / period).is_multiple_of(2) { 40 } else { 210 };
                img.set(x, y, v);
            }
        }
        img
    }

    fn toy_classifier(seed: u64) -> RegionClassifier<f64> {
        // Train on vertical-stripe positives vs horizontal-stripe negatives.
        let sampling = SamplingConfig { patch_sizes: vec![8] };
        let llc = LlcConfig { neighbors: 3, lambda: 1e-4 };
        let pyramid = PyramidConfig { levels: vec![(1, 1), (1, 2)] };

        let mut descriptors: Vec<Vec<f64>> = Vec::new();
        let mut crops = Vec::new();
        for i in 0..6 {
            let vertical = i % 2 == 0;
            let img = stripes(40, 40, vertical, 2 + (i as u32 % 3));
            let crop = Rect::new(0, 0, 40, 40);
            let mask = PixelMask::full(40, 40);
            let descs: Vec<Descriptor<f64>> =
                dense_sample(&img, crop, &mask, &sampling).unwrap();
            descriptors.extend(descs.iter().map(|d| d.vector.clone()));
            crops.push((img, vertical));
        }
        let kp = KmeansParams { k: 8, seed, max_iters: 20, ..KmeansParams::default() };
        let codebook = kmeans_train(&descriptors, &kp).unwrap().codebook;

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (img, vertical) in &crops {
            let crop = Rect::new(0, 0, 40, 40);
            let mask = PixelMask::full(40, 40);
            let clf = RegionClassifier {
                codebook: codebook.clone(),
                pyramid: pyramid.clone(),
                sampling: sampling.clone(),
                llc,
                weights: vec![0.0; feature_len(1, 8, &pyramid)],
                bias: 0.0,
            };
            features.push(clf.feature(&img.clone(), crop, &mask).unwrap().values);
            labels.push(if *vertical { 1 } else { -1 });
        }
        let params = SmoParams { c: 10.0, seed, ..SmoParams::default() };
        let model = smo_train(&features, &labels, KernelSpec::Linear, &params).unwrap();
        RegionClassifier {
            codebook,
            pyramid,
            sampling,
            llc,
            weights: model.weights().unwrap().to_vec(),
            bias: model.bias(),
        }
    }

    #[test]
    fn trained_toy_model_separates_textures() {
        let clf = toy_classifier(13);
        let mask = PixelMask::full(36, 36);
        let pos = stripes(36, 36, true, 3);
        let neg = stripes(36, 36, false, 3);
        let crop = Rect::new(0, 0, 36, 36);
        let sp = clf.classify(&pos, crop, &mask).unwrap();
        let sn = clf.classify(&neg, crop, &mask).unwrap();
        assert!(sp > 0.0, "vertical stripes scored {sp}");
        assert!(sn < 0.0, "horizontal stripes scored {sn}");
    }

    #[test]
    fn zero_weights_and_empty_masks_score_the_bias() {
        let clf = RegionClassifier {
            weights: vec![0.0; 8 * 3],
            bias: -1.25,
            pyramid: PyramidConfig { levels: vec![(1, 1), (1, 2)] },
            sampling: SamplingConfig { patch_sizes: vec![8] },
            llc: LlcConfig::default(),
            codebook: toy_classifier(1).codebook,
        };
        let img = stripes(24, 24, true, 2);
        let crop = Rect::new(0, 0, 24, 24);
        assert_eq!(clf.classify(&img, crop, &PixelMask::full(24, 24)).unwrap(), -1.25);
        // Empty mask: zero feature, score is the bias even with real weights.
        let trained = toy_classifier(2);
        let got = trained.classify(&img, crop, &PixelMask::new(24, 24)).unwrap();
        assert_eq!(got, trained.bias);
    }

    #[test]
    fn classify_is_translation_consistent() {
        let clf = toy_classifier(3);
        let tile = stripes(30, 30, true, 3);
        // Paste the same 30x30 content at two offsets of a larger image.
        let mut big_a = GrayImage::filled(64, 64, 7);
        let mut big_b = GrayImage::filled(64, 64, 201);
        for y in 0..30 {
            for x in 0..30 {
                big_a.set(2 + x, 5 + y, tile.get(x, y));
                big_b.set(20 + x, 31 + y, tile.get(x, y));
            }
        }
        let mut mask = PixelMask::new(30, 30);
        mask.set_rect(Rect::new(3, 2, 27, 28), true);
        let a = clf.classify(&big_a, Rect::new(2, 5, 32, 35), &mask).unwrap();
        let b = clf.classify(&big_b, Rect::new(20, 31, 50, 61), &mask).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cached_encode_path_matches_direct_path() {
        let clf = toy_classifier(4);
        let img = stripes(48, 48, true, 4);
        let crop = Rect::new(4, 4, 44, 44);
        let mut mask = PixelMask::new(40, 40);
        mask.set_rect(Rect::new(0, 0, 25, 40), true);
        mask.set_rect(Rect::new(30, 10, 40, 20), true);

        let direct = clf.feature(&img, crop, &mask).unwrap();
        let encoded = encode_crop(&img, crop, &clf.codebook, &clf.sampling, &clf.llc).unwrap();
        let cached = pool_masked(&encoded, &mask, clf.codebook.k(), &clf.pyramid).unwrap();
        assert_eq!(direct.values, cached.values);
    }

    #[test]
    fn score_dimension_mismatch_is_an_error() {
        let clf = toy_classifier(5);
        let feature = RegionFeature { values: vec![0.0; 3], provenance: None };
        assert!(matches!(
            clf.score_feature(&feature),
            Err(BowError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dimension_law_holds_end_to_end() {
        let clf = toy_classifier(6);
        let img = stripes(32, 32, true, 2);
        let mask = PixelMask::full(32, 32);
        let feat = clf.feature(&img, Rect::new(0, 0, 32, 32), &mask).unwrap();
        assert_eq!(feat.values.len(), feature_len(1, clf.codebook.k(), &clf.pyramid));
        let _ = ImageExtent::new(32, 32);
    }
}
