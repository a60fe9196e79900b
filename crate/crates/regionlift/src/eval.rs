//! Detection evaluation: greedy IoU matching in rank order, precision/recall
//! curves, and 11-point interpolated average precision.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::geometry::Rect;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("detection references category {category}, but only {count} categories are declared")]
    UnknownCategory { category: u32, count: usize },
    #[error("average precision is undefined without ground-truth instances")]
    NoGroundTruth,
}

/// One ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRecord {
    pub image: String,
    pub category: u32,
    pub rect: Rect,
}

/// One scored detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetRecord {
    pub image: String,
    pub category: u32,
    pub rect: Rect,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MatchOptions {
    pub iou_threshold: f64,
    /// `false`: overlap >= threshold counts (devkit convention).
    /// `true`: overlap must strictly exceed the threshold.
    pub strict: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self { iou_threshold: 0.5, strict: false }
    }
}

impl MatchOptions {
    fn accepts(&self, iou: f64) -> bool {
        if self.strict {
            iou > self.iou_threshold
        } else {
            iou >= self.iou_threshold
        }
    }
}

/// One ranked detection with its match verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDet {
    /// Index into the detection slice passed to the matcher.
    pub det_index: usize,
    pub score: f64,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detections in rank order (descending score, input order on ties).
    pub ranked: Vec<RankedDet>,
    /// Claim marks, indexed like the ground-truth slice; boxes of other
    /// categories stay false.
    pub gt_matched: Vec<bool>,
    pub total_gt: usize,
}

/// Matches one category's detections against ground truth.
///
/// In rank order, a detection claims the unmatched same-image ground-truth
/// box of maximal IoU when that IoU passes the threshold; everything else,
/// including duplicate hits on an already-claimed box, is a false positive.
pub fn match_detections(
    dets: &[DetRecord],
    gt: &[GtRecord],
    category: u32,
    opts: &MatchOptions,
) -> MatchResult {
    let gt_idx: Vec<usize> =
        (0..gt.len()).filter(|&i| gt[i].category == category).collect();
    let total_gt = gt_idx.len();
    let mut gt_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &g in &gt_idx {
        gt_by_image.entry(gt[g].image.as_str()).or_default().push(g);
    }

    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == category).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));

    let mut claimed = vec![false; gt.len()];
    let mut ranked = Vec::with_capacity(order.len());
    for det_index in order {
        let det = &dets[det_index];
        let mut best: Option<(f64, usize)> = None;
        if let Some(candidates) = gt_by_image.get(det.image.as_str()) {
            for &g in candidates {
                if claimed[g] {
                    continue;
                }
                let iou = det.rect.iou(gt[g].rect);
                // Strict `>` keeps the first (lowest-index) box on ties.
                if best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
        }
        let tp = match best {
            Some((iou, g)) if opts.accepts(iou) => {
                claimed[g] = true;
                true
            }
            _ => false,
        };
        ranked.push(RankedDet { det_index, score: det.score, tp });
    }
    MatchResult { ranked, gt_matched: claimed, total_gt }
}

/// One point of a cumulative precision/recall curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    /// 1-based rank.
    pub rank: usize,
    pub score: f64,
    pub tp: bool,
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall after each ranked detection.
pub fn pr_curve(matches: &MatchResult) -> Result<Vec<PrPoint>, EvalError> {
    if matches.total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut tp_cum = 0usize;
    Ok(matches
        .ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.tp {
                tp_cum += 1;
            }
            PrPoint {
                rank: i + 1,
                score: r.score,
                tp: r.tp,
                recall: tp_cum as f64 / matches.total_gt as f64,
                precision: tp_cum as f64 / (i + 1) as f64,
            }
        })
        .collect())
}

/// 11-point interpolated average precision over `(recall, precision)` pairs:
/// the mean over recall levels {0, 0.1, ..., 1} of the maximum precision at
/// recall at or beyond the level (zero when no point qualifies).
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for level in 0..=10u32 {
        let r = level as f64 / 10.0;
        let best = curve
            .iter()
            .filter(|&&(recall, _)| recall >= r)
            .map(|&(_, precision)| precision)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 11.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEval {
    pub category: u32,
    pub ap: f64,
    pub total_gt: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Categories with at least one ground-truth instance, ascending id.
    pub categories: Vec<CategoryEval>,
    /// Unweighted mean AP over the evaluated categories.
    pub mean_ap: f64,
}

/// Evaluates every declared category that has ground truth; detections with
/// undeclared category ids are an error.
pub fn evaluate_dataset(
    dets: &[DetRecord],
    gt: &[GtRecord],
    num_categories: usize,
    opts: &MatchOptions,
) -> Result<EvalReport, EvalError> {
    for d in dets {
        if d.category as usize >= num_categories {
            return Err(EvalError::UnknownCategory { category: d.category, count: num_categories });
        }
    }
    for g in gt {
        if g.category as usize >= num_categories {
            return Err(EvalError::UnknownCategory { category: g.category, count: num_categories });
        }
    }
    let mut categories = Vec::new();
    for category in 0..num_categories as u32 {
        let matches = match_detections(dets, gt, category, opts);
        if matches.total_gt == 0 {
            continue;
        }
        let curve = pr_curve(&matches)?;
        let pairs: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
        let ap = interpolated_ap(&pairs);
        categories.push(CategoryEval { category, ap, total_gt: matches.total_gt, curve });
    }
    if categories.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let mean_ap = categories.iter().map(|c| c.ap).sum::<f64>() / categories.len() as f64;
    Ok(EvalReport { categories, mean_ap })
}

/// Writes one category's PR curve as CSV.
pub fn write_pr_csv<W: Write>(mut w: W, curve: &[PrPoint]) -> std::io::Result<()> {
    writeln!(w, "rank,score,tp,recall,precision")?;
    for p in curve {
        writeln!(w, "{},{},{},{},{}", p.rank, p.score, p.tp as u8, p.recall, p.precision)?;
    }
    Ok(())
}
