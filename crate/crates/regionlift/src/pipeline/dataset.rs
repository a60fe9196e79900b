//! Region-level dataset construction for classifier training.
//!
//! Two policies:
//! * `gt-only` — positives are a category's ground-truth boxes, negatives
//!   are every other category's ground-truth boxes, full-box masks.
//! * `gt-plus-false-alarms` — positives unchanged; negatives are a seeded
//!   random sample of detection boxes that touch no ground truth at all,
//!   masked by their supporting region (the box minus higher-ranked boxes).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Rect, Region};
use crate::support::RankedDetections;

use super::formats::{Annotations, Detections, FormatError};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DatasetPolicy {
    #[default]
    #[serde(rename = "gt-only")]
    GtOnly,
    #[serde(rename = "gt-plus-false-alarms")]
    GtPlusFalseAlarms,
}

/// One training region: a crop window in an image, a mask inside it, and a
/// binary label for one category's classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub image: String,
    pub crop: Rect,
    /// Image-coordinate region; rasterized against `crop` at feature time.
    pub mask: Region,
    pub label: i8,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDataset {
    pub policy: DatasetPolicy,
    pub samples: Vec<RegionSample>,
}

impl RegionDataset {
    pub fn for_category(&self, category: u32) -> impl Iterator<Item = &RegionSample> {
        self.samples.iter().filter(move |s| s.category == category)
    }
}

/// Builds the region dataset for every declared category.
///
/// The false-alarm policy needs detections and the support configuration;
/// negatives are balanced to the positive count per category by a seeded
/// shuffle.
pub fn build_region_dataset(
    annotations: &Annotations,
    detections: &Detections,
    policy: DatasetPolicy,
    support: &crate::support::SupportConfig,
    seed: u64,
) -> Result<RegionDataset, PipelineError> {
    let k = annotations.k() as u32;
    let mut samples = Vec::new();

    let mut gt_by_category: BTreeMap<u32, Vec<(&str, Rect)>> = BTreeMap::new();
    for o in &annotations.objects {
        gt_by_category.entry(o.category).or_default().push((o.image.as_str(), o.rect));
    }
    for category in 0..k {
        if !gt_by_category.contains_key(&category) {
            return Err(PipelineError::NoPositives { category });
        }
    }

    // Positives are always the category's own ground-truth boxes.
    for (&category, boxes) in &gt_by_category {
        for &(image, rect) in boxes {
            samples.push(RegionSample {
                image: image.to_string(),
                crop: rect,
                mask: Region::from_rect(rect),
                label: 1,
                category,
            });
        }
    }

    match policy {
        DatasetPolicy::GtOnly => {
            for &category in gt_by_category.keys() {
                for (&other, boxes) in &gt_by_category {
                    if other == category {
                        continue;
                    }
                    for &(image, rect) in boxes {
                        samples.push(RegionSample {
                            image: image.to_string(),
                            crop: rect,
                            mask: Region::from_rect(rect),
                            label: -1,
                            category,
                        });
                    }
                }
            }
        }
        DatasetPolicy::GtPlusFalseAlarms => {
            // Candidate negatives per category: detection boxes with zero
            // ground-truth overlap, masked by their supporting region.
            let mut candidates: BTreeMap<u32, Vec<RegionSample>> = BTreeMap::new();
            let by_image = detections.by_image();
            for (image, indices) in by_image {
                let info = &annotations.images[image];
                let gt_rects: Vec<Rect> = annotations
                    .objects
                    .iter()
                    .filter(|o| o.image == image)
                    .map(|o| o.rect)
                    .collect();
                let mut per_category: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
                for &i in &indices {
                    per_category
                        .entry(detections.items[i].detection.category)
                        .or_default()
                        .push(i);
                }
                for (category, idxs) in per_category {
                    let boxes = idxs.iter().map(|&i| detections.items[i].detection).collect();
                    let ranked = RankedDetections::rank(boxes, info.extent)?;
                    // Masks never include the image background: the crop is
                    // the box itself, so only overlap subtraction matters.
                    let boxed_cfg = crate::support::SupportConfig {
                        include_background: false,
                        ..*support
                    };
                    for index in 0..ranked.len() {
                        let det = ranked.boxes()[index];
                        let clean =
                            gt_rects.iter().all(|&g| det.rect.intersect(g).is_none());
                        if !clean {
                            continue;
                        }
                        let mask = ranked.supporting_region(index, &boxed_cfg)?;
                        if mask.is_empty() {
                            continue;
                        }
                        candidates.entry(category).or_default().push(RegionSample {
                            image: image.to_string(),
                            crop: det.rect,
                            mask,
                            label: -1,
                            category,
                        });
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (&category, positives) in &gt_by_category {
                let mut pool = candidates.remove(&category).unwrap_or_default();
                if pool.is_empty() {
                    return Err(PipelineError::NoNegatives { category });
                }
                pool.shuffle(&mut rng);
                pool.truncate(positives.len().max(1));
                samples.extend(pool);
            }
        }
    }

    // Canonical order keeps runs reproducible regardless of construction.
    samples.sort_by(|a, b| {
        (a.category, &a.image, a.crop, a.label).cmp(&(b.category, &b.image, b.crop, b.label))
    });
    Ok(RegionDataset { policy, samples })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    kind: String,
    version: u32,
    policy: DatasetPolicy,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    image: String,
    crop: [i32; 4],
    mask: Vec<[i32; 4]>,
    label: i8,
    category: u32,
}

impl RegionDataset {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = String::new();
        let header =
            DatasetHeader { kind: "region-dataset".into(), version: 1, policy: self.policy };
        writeln!(text, "{}", serde_json::to_string(&header).expect("header serializes")).unwrap();
        for s in &self.samples {
            let line = SampleLine {
                image: s.image.clone(),
                crop: [s.crop.x1, s.crop.y1, s.crop.x2, s.crop.y2],
                mask: s.mask.rects().iter().map(|r| [r.x1, r.y1, r.x2, r.y2]).collect(),
                label: s.label,
                category: s.category,
            };
            writeln!(text, "{}", serde_json::to_string(&line).expect("line serializes")).unwrap();
        }
        std::fs::write(path, text).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let io_err = |source| PipelineError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let header: DatasetHeader = match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(io_err)?;
                serde_json::from_str(&line).map_err(|source| {
                    FormatError::Parse { path: path.display().to_string(), line: i + 1, source }
                })?
            }
            None => {
                return Err(FormatError::Schema {
                    path: path.display().to_string(),
                    line: 1,
                    message: "empty file; header expected".into(),
                }
                .into())
            }
        };
        if header.kind != "region-dataset" || header.version != 1 {
            return Err(FormatError::Schema {
                path: path.display().to_string(),
                line: 1,
                message: "not a version-1 region-dataset file".into(),
            }
            .into());
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let s: SampleLine = serde_json::from_str(&line).map_err(|source| {
                FormatError::Parse { path: path.display().to_string(), line: i + 1, source }
            })?;
            let to_rect = |c: [i32; 4]| {
                Rect::checked(c[0], c[1], c[2], c[3]).map_err(|e| FormatError::Schema {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            };
            let crop = to_rect(s.crop)?;
            let mask =
                Region::from_rects(s.mask.into_iter().map(to_rect).collect::<Result<Vec<_>, _>>()?);
            samples.push(RegionSample { image: s.image, crop, mask, label: s.label, category: s.category });
        }
        Ok(RegionDataset { policy: header.policy, samples })
    }
}
