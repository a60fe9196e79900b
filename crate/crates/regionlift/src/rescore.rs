//! Score fusion: logistic renormalization, the per-box context feature,
//! additive fusion, candidate thresholding, and RBF-SVM rescoring.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{Detection, ImageExtent, Rect};
use crate::scalar::{cast, Scalar};
use crate::svm::{smo_train, KernelSpec, SmoParams, SvmError, SvmModel};

#[derive(Debug, Error)]
pub enum RescoreError {
    #[error("context vectors have lengths {det} and {cls}; they must match")]
    ContextLengthMismatch { det: usize, cls: usize },
    #[error("no rescoring model for category {category}")]
    MissingModel { category: u32 },
    #[error(transparent)]
    Svm(#[from] SvmError),
}

/// Default candidate-score cutoff applied before building support sets.
pub const DEFAULT_SCORE_THRESHOLD: f64 = -0.95;

/// Logistic squash `1 / (1 + exp(-2x))`: order-preserving, 0.5 at zero, and
/// `alpha(x) + alpha(-x) = 1`.
#[inline]
pub fn alpha<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-(x + x)).exp())
}

/// Per-image context: the squashed best detection and classification score
/// of every category. A category with no boxes contributes 0, the limit of
/// the squash at negative infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageContext<F: Scalar> {
    pub det: Vec<F>,
    pub cls: Vec<F>,
}

impl<F: Scalar> ImageContext<F> {
    pub fn num_categories(&self) -> usize {
        self.det.len()
    }
}

pub fn image_context<F: Scalar>(
    best_det: &[Option<F>],
    best_cls: &[Option<F>],
) -> Result<ImageContext<F>, RescoreError> {
    if best_det.len() != best_cls.len() {
        return Err(RescoreError::ContextLengthMismatch {
            det: best_det.len(),
            cls: best_cls.len(),
        });
    }
    let squash = |v: &Option<F>| v.map_or(F::zero(), alpha);
    Ok(ImageContext {
        det: best_det.iter().map(squash).collect(),
        cls: best_cls.iter().map(squash).collect(),
    })
}

/// The per-box rescoring feature
/// `[alpha(det), alpha(cls), x1, y1, x2, y2, f1(I), f2(I)]`
/// with coordinates normalized by the image size; length `2k + 6`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescoreFeature<F: Scalar> {
    values: Vec<F>,
}

impl<F: Scalar> RescoreFeature<F> {
    pub fn expected_len(num_categories: usize) -> usize {
        2 * num_categories + 6
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }
}

pub fn box_feature<F: Scalar>(
    rect: Rect,
    det_score: F,
    cls_score: F,
    ctx: &ImageContext<F>,
    extent: ImageExtent,
) -> RescoreFeature<F> {
    debug_assert!(extent.contains(rect), "box outside image");
    let w: F = cast(extent.width as f64);
    let h: F = cast(extent.height as f64);
    let mut values = Vec::with_capacity(RescoreFeature::<F>::expected_len(ctx.num_categories()));
    values.push(alpha(det_score));
    values.push(alpha(cls_score));
    values.push(cast::<F>(rect.x1 as f64) / w);
    values.push(cast::<F>(rect.y1 as f64) / h);
    values.push(cast::<F>(rect.x2 as f64) / w);
    values.push(cast::<F>(rect.y2 as f64) / h);
    values.extend_from_slice(&ctx.det);
    values.extend_from_slice(&ctx.cls);
    RescoreFeature { values }
}

/// Additive fusion `det + weight * cls`.
#[inline]
pub fn fuse_simple<F: Scalar>(det_score: F, cls_score: F, weight: F) -> F {
    det_score + weight * cls_score
}

/// Keeps detections scoring at least `threshold`; also reports how many
/// survived per category.
pub fn threshold_filter(
    dets: Vec<Detection>,
    threshold: f64,
) -> (Vec<Detection>, BTreeMap<u32, usize>) {
    let mut retained: BTreeMap<u32, usize> = BTreeMap::new();
    let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score >= threshold).collect();
    for d in &kept {
        *retained.entry(d.category).or_insert(0) += 1;
    }
    (kept, retained)
}

/// Per-category rescorer training result.
#[derive(Debug, Clone)]
pub enum RescoreOutcome<F: Scalar> {
    Trained(SvmModel<F>),
    /// Training was impossible (e.g. a single-label category); the cascade
    /// falls back to simple fusion for this category.
    Skipped { reason: String },
}

#[derive(Debug, Clone, Copy)]
pub struct RescoreTrainParams<F: Scalar> {
    pub svm: SmoParams<F>,
    /// RBF bandwidth; `None` uses 1 / feature dimension.
    pub gamma: Option<F>,
}

impl<F: Scalar> Default for RescoreTrainParams<F> {
    fn default() -> Self {
        Self { svm: SmoParams::default(), gamma: None }
    }
}

/// Trains one RBF rescorer per category from labeled feature vectors
/// (label true = the box matches same-category ground truth).
pub fn rescore_train<F: Scalar>(
    samples: &BTreeMap<u32, Vec<(RescoreFeature<F>, bool)>>,
    params: &RescoreTrainParams<F>,
) -> BTreeMap<u32, RescoreOutcome<F>> {
    let mut out = BTreeMap::new();
    for (&category, items) in samples {
        let x: Vec<Vec<F>> = items.iter().map(|(f, _)| f.values.clone()).collect();
        let y: Vec<i8> = items.iter().map(|&(_, pos)| if pos { 1 } else { -1 }).collect();
        let dim = x.first().map_or(0, Vec::len);
        let gamma = params.gamma.unwrap_or_else(|| {
            if dim == 0 {
                F::one()
            } else {
                F::one() / cast::<F>(dim as f64)
            }
        });
        // Category-specific seed keeps results independent of which other
        // categories are present.
        let svm_params =
            SmoParams { seed: params.svm.seed.wrapping_add(category as u64), ..params.svm };
        let outcome = match smo_train(&x, &y, KernelSpec::Rbf { gamma }, &svm_params) {
            Ok(model) => RescoreOutcome::Trained(model),
            Err(e) => RescoreOutcome::Skipped { reason: e.to_string() },
        };
        out.insert(category, outcome);
    }
    out
}

/// Replaces detection scores with the rescorer's decision values. Geometry
/// and category are untouched.
pub fn rescore_apply<F: Scalar>(
    model: &SvmModel<F>,
    items: &[(Detection, RescoreFeature<F>)],
) -> Result<Vec<Detection>, RescoreError> {
    items
        .iter()
        .map(|(det, feature)| {
            let score = model.score(&feature.values)?;
            Ok(Detection {
                score: score.to_f64().expect("score representable"),
                ..*det
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate_dataset, DetRecord, GtRecord, MatchOptions};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn alpha_fixed_points() {
        assert_eq!(alpha(0.0f64), 0.5);
        // Direct evaluation of 1/(1 + e^-2).
        assert!((alpha(1.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.random::<f64>() * 40.0 - 20.0;
            assert!((alpha(x) + alpha(-x) - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&alpha(x)));
        }
        // Open interval holds away from f64 saturation (|x| >= ~18.4 rounds
        // the denominator to exactly 1).
        for x in [-15.0f64, -3.0, 0.25, 9.0, 15.0] {
            assert!(alpha(x) > 0.0 && alpha(x) < 1.0);
        }
    }

    #[test]
    fn alpha_is_strictly_increasing() {
        let mut prev = alpha(-15.0f64);
        let mut x = -15.0;
        while x < 15.0 {
            x += 0.125;
            let v = alpha(x);
            assert!(v > prev, "alpha not increasing at {x}");
            prev = v;
        }
    }

    #[test]
    fn image_context_cases() {
        let ctx = image_context::<f64>(&[Some(0.0), Some(0.0)], &[Some(0.0), Some(0.0)]).unwrap();
        assert_eq!(ctx.det, vec![0.5, 0.5]);
        assert_eq!(ctx.cls, vec![0.5, 0.5]);

        let ctx = image_context::<f64>(&[None, Some(2.0)], &[Some(-1.0), None]).unwrap();
        assert_eq!(ctx.det[0], 0.0);
        assert_eq!(ctx.cls[1], 0.0);
        assert!(ctx.det[1] > 0.9);

        // k = 20 mixed values against an element-wise scalar recomputation.
        let mut rng = StdRng::seed_from_u64(3);
        let best: Vec<Option<f64>> = (0..20)
            .map(|i| if i % 4 == 0 { None } else { Some(rng.random::<f64>() * 4.0 - 2.0) })
            .collect();
        let ctx = image_context(&best, &best).unwrap();
        for (got, raw) in ctx.det.iter().zip(&best) {
            let want = match raw {
                None => 0.0,
                Some(v) => 1.0 / (1.0 + (-2.0 * v).exp()),
            };
            assert_eq!(got.to_bits(), want.to_bits());
        }

        assert!(matches!(
            image_context::<f64>(&[None], &[None, None]),
            Err(RescoreError::ContextLengthMismatch { .. })
        ));
    }

    #[test]
    fn box_feature_layout() {
        // k = 1, zero scores, unit box in a unit image.
        let ctx = image_context::<f64>(&[Some(0.0)], &[Some(0.0)]).unwrap();
        let f = box_feature(Rect::new(0, 0, 1, 1), 0.0, 0.0, &ctx, ImageExtent::new(1, 1));
        assert_eq!(f.values(), &[0.5, 0.5, 0.0, 0.0, 1.0, 1.0, 0.5, 0.5]);

        // Lengths follow 2k + 6.
        for k in [1usize, 5, 20] {
            let ctx = image_context::<f64>(&vec![None; k], &vec![None; k]).unwrap();
            let f = box_feature(Rect::new(2, 3, 6, 9), 0.1, -0.4, &ctx, ImageExtent::new(10, 10));
            assert_eq!(f.len(), 2 * k + 6);
        }
        assert_eq!(RescoreFeature::<f64>::expected_len(20), 46);

        // Field-by-field assembly oracle on a random case.
        let mut rng = StdRng::seed_from_u64(9);
        let extent = ImageExtent::new(64, 48);
        let rect = Rect::new(8, 4, 40, 32);
        let d: f64 = rng.random();
        let c: f64 = rng.random();
        let best_d: Vec<Option<f64>> = (0..3).map(|_| Some(rng.random::<f64>())).collect();
        let best_c: Vec<Option<f64>> = (0..3).map(|_| Some(rng.random::<f64>())).collect();
        let ctx = image_context(&best_d, &best_c).unwrap();
        let f = box_feature(rect, d, c, &ctx, extent);
        let mut want = vec![alpha(d), alpha(c), 8.0 / 64.0, 4.0 / 48.0, 40.0 / 64.0, 32.0 / 48.0];
        want.extend(best_d.iter().map(|v| alpha(v.unwrap())));
        want.extend(best_c.iter().map(|v| alpha(v.unwrap())));
        assert_eq!(f.values(), &want[..]);
    }

    #[test]
    fn fuse_simple_cases() {
        assert_eq!(fuse_simple(0.7f64, 123.0, 0.0), 0.7);
        assert!((fuse_simple(0.3f64, 0.2, 1.0) - 0.5).abs() < 1e-15);

        // Ranking under weight 1 equals ranking by plain sums.
        let mut rng = StdRng::seed_from_u64(4);
        let pairs: Vec<(f64, f64)> = (0..50).map(|_| (rng.random(), rng.random())).collect();
        let mut by_fused: Vec<usize> = (0..pairs.len()).collect();
        by_fused.sort_by(|&a, &b| {
            fuse_simple(pairs[b].0, pairs[b].1, 1.0)
                .partial_cmp(&fuse_simple(pairs[a].0, pairs[a].1, 1.0))
                .unwrap()
        });
        let mut by_sum: Vec<usize> = (0..pairs.len()).collect();
        by_sum.sort_by(|&a, &b| {
            (pairs[b].0 + pairs[b].1).partial_cmp(&(pairs[a].0 + pairs[a].1)).unwrap()
        });
        assert_eq!(by_fused, by_sum);
    }

    #[test]
    fn threshold_filter_cases() {
        let mk = |score, category| Detection::new(Rect::new(0, 0, 4, 4), score, category);
        let dets = vec![mk(-2.0, 0), mk(-0.95, 0), mk(0.3, 1), mk(-0.96, 1)];

        let (kept, counts) = threshold_filter(dets.clone(), f64::NEG_INFINITY);
        assert_eq!(kept.len(), 4);
        assert_eq!(counts[&0], 2);

        let (kept, counts) = threshold_filter(dets.clone(), DEFAULT_SCORE_THRESHOLD);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|d| d.score >= -0.95));
        assert_eq!(counts.get(&0), Some(&1));
        assert_eq!(counts.get(&1), Some(&1));

        // Count agrees with a naive filter.
        let naive = dets.iter().filter(|d| d.score >= -0.95).count();
        assert_eq!(kept.len(), naive);
    }

    #[test]
    fn degenerate_categories_are_skipped() {
        let ctx = image_context::<f64>(&[Some(0.0)], &[Some(0.0)]).unwrap();
        let extent = ImageExtent::new(10, 10);
        let f = |s: f64| box_feature(Rect::new(0, 0, 5, 5), s, 0.0, &ctx, extent);

        let mut samples = BTreeMap::new();
        samples.insert(0u32, vec![(f(0.1), true), (f(0.4), true)]);
        let out = rescore_train::<f64>(&samples, &RescoreTrainParams::default());
        assert!(matches!(&out[&0], RescoreOutcome::Skipped { reason } if reason.contains("both classes")));

        // Identical feature vectors with mixed labels are degenerate too.
        let mut samples = BTreeMap::new();
        samples.insert(1u32, vec![(f(0.2), true), (f(0.2), false)]);
        let out = rescore_train::<f64>(&samples, &RescoreTrainParams::default());
        assert!(matches!(&out[&1], RescoreOutcome::Skipped { .. }));
    }

    #[test]
    fn rescore_apply_preserves_geometry_and_monotone_models_preserve_rank() {
        let ctx = image_context::<f64>(&[Some(0.3)], &[Some(0.1)]).unwrap();
        let extent = ImageExtent::new(100, 100);
        let mut rng = StdRng::seed_from_u64(8);
        let items: Vec<(Detection, RescoreFeature<f64>)> = (0..20)
            .map(|i| {
                let x = (i * 4) % 80;
                let rect = Rect::new(x, 0, x + 10, 10);
                let d = Detection::new(rect, rng.random::<f64>() * 2.0 - 1.0, 0);
                let f = box_feature(rect, d.score, 0.0, &ctx, extent);
                (d, f)
            })
            .collect();

        // A linear model reading only alpha(det) is strictly monotone in the
        // original score, so the ranking is untouched.
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        let model = SvmModel::from_linear_weights(w, -0.25);
        let rescored = rescore_apply(&model, &items).unwrap();
        for ((orig, _), new) in items.iter().zip(&rescored) {
            assert_eq!(orig.rect, new.rect);
            assert_eq!(orig.category, new.category);
        }
        let mut orig_rank: Vec<usize> = (0..items.len()).collect();
        orig_rank.sort_by(|&a, &b| items[b].0.score.partial_cmp(&items[a].0.score).unwrap());
        let mut new_rank: Vec<usize> = (0..rescored.len()).collect();
        new_rank.sort_by(|&a, &b| rescored[b].score.partial_cmp(&rescored[a].score).unwrap());
        assert_eq!(orig_rank, new_rank);

        // Dimension mismatch surfaces as an error.
        let bad = SvmModel::from_linear_weights(vec![1.0; 5], 0.0);
        assert!(matches!(rescore_apply(&bad, &items), Err(RescoreError::Svm(_))));
    }

    /// End-to-end on synthetic data where the classification score carries
    /// the true label: rescored AP >= fused AP >= raw AP.
    #[test]
    fn oracle_signal_improves_ap_monotonically() {
        let mut rng = StdRng::seed_from_u64(21);
        let extent = ImageExtent::new(100, 100);
        let gt_rect = Rect::new(20, 20, 60, 60);
        let fp_rect = Rect::new(70, 70, 95, 95);

        let mut gts = Vec::new();
        let mut raw = Vec::new();
        let mut train_samples: BTreeMap<u32, Vec<(RescoreFeature<f64>, bool)>> = BTreeMap::new();
        let mut test_items: Vec<(Detection, RescoreFeature<f64>, String, bool)> = Vec::new();

        for i in 0..60 {
            let image = format!("img{i}");
            let train = i % 2 == 0;
            gts.push(GtRecord { image: image.clone(), category: 0, rect: gt_rect });

            // One true detection and one false alarm, noisy scores.
            let d_tp = 1.0 + rng.random::<f64>() * 1.4 - 0.7;
            let d_fp = rng.random::<f64>() * 1.4 - 0.7;
            for (rect, score, matched) in [(gt_rect, d_tp, true), (fp_rect, d_fp, false)] {
                let cls = if matched { 1.0 } else { -1.0 };
                let best_d = Some(d_tp.max(d_fp));
                let ctx = image_context(&[best_d], &[Some(1.0)]).unwrap();
                let feature = box_feature(rect, score, cls, &ctx, extent);
                if train {
                    train_samples.entry(0).or_default().push((feature, matched));
                } else {
                    let det = Detection::new(rect, score, 0);
                    test_items.push((det, feature, image.clone(), matched));
                    raw.push(DetRecord { image: image.clone(), category: 0, rect, score });
                }
            }
        }

        let test_gts: Vec<GtRecord> =
            gts.iter().filter(|g| raw.iter().any(|d| d.image == g.image)).cloned().collect();
        let opts = MatchOptions::default();
        let ap_raw = evaluate_dataset(&raw, &test_gts, 1, &opts).unwrap().mean_ap;

        // Simple fusion with the oracle classification signal.
        let fused: Vec<DetRecord> = raw
            .iter()
            .zip(&test_items)
            .map(|(d, (_, _, _, matched))| DetRecord {
                score: fuse_simple(d.score, if *matched { 1.0 } else { -1.0 }, 1.0),
                ..d.clone()
            })
            .collect();
        let ap_fused = evaluate_dataset(&fused, &test_gts, 1, &opts).unwrap().mean_ap;

        // RBF rescoring trained on the other half.
        let params = RescoreTrainParams::<f64> {
            svm: SmoParams { c: 10.0, seed: 5, ..SmoParams::default() },
            gamma: None,
        };
        let outcomes = rescore_train(&train_samples, &params);
        let model = match &outcomes[&0] {
            RescoreOutcome::Trained(m) => m,
            RescoreOutcome::Skipped { reason } => panic!("skipped: {reason}"),
        };
        let pairs: Vec<(Detection, RescoreFeature<f64>)> =
            test_items.iter().map(|(d, f, _, _)| (*d, f.clone())).collect();
        let rescored_dets = rescore_apply(model, &pairs).unwrap();
        let rescored: Vec<DetRecord> = rescored_dets
            .iter()
            .zip(&test_items)
            .map(|(d, (_, _, image, _))| DetRecord {
                image: image.clone(),
                category: 0,
                rect: d.rect,
                score: d.score,
            })
            .collect();
        let ap_rescored = evaluate_dataset(&rescored, &test_gts, 1, &opts).unwrap().mean_ap;

        assert!(ap_raw < 1.0, "noise must leave headroom, got {ap_raw}");
        assert!(ap_fused >= ap_raw, "fused {ap_fused} < raw {ap_raw}");
        assert!(ap_rescored >= ap_fused, "rescored {ap_rescored} < fused {ap_fused}");
        assert_eq!(ap_fused, 1.0);
        assert_eq!(ap_rescored, 1.0);
    }

    #[test]
    fn rescore_training_is_deterministic() {
        let ctx = image_context::<f64>(&[Some(0.0)], &[Some(0.0)]).unwrap();
        let extent = ImageExtent::new(10, 10);
        let mut rng = StdRng::seed_from_u64(2);
        let mut samples = BTreeMap::new();
        let items: Vec<(RescoreFeature<f64>, bool)> = (0..30)
            .map(|i| {
                let s = rng.random::<f64>() * 2.0 - 1.0 + if i % 2 == 0 { 1.0 } else { -1.0 };
                (box_feature(Rect::new(0, 0, 5, 5), s, s, &ctx, extent), i % 2 == 0)
            })
            .collect();
        samples.insert(3u32, items);
        let params = RescoreTrainParams::<f64>::default();
        let a = rescore_train(&samples, &params);
        let b = rescore_train(&samples, &params);
        match (&a[&3], &b[&3]) {
            (RescoreOutcome::Trained(ma), RescoreOutcome::Trained(mb)) => assert_eq!(ma, mb),
            _ => panic!("expected trained models"),
        }
    }
}
