//! The runnable cascade: threshold candidates, rank them per image and
//! category, build supporting regions, score each region, fuse scores, and
//! evaluate the rescored detections.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::bow::{encode_crop, pool_masked, EncodedCrop};
use crate::eval::{evaluate_dataset, write_pr_csv, EvalReport};
use crate::geometry::{Detection, Rect, Region};
use crate::raster::{load_gray, GrayImage};
use crate::rescore::{
    box_feature, fuse_simple, image_context, rescore_apply, threshold_filter, RescoreFeature,
};
use crate::support::RankedDetections;

use super::config::{FusionMode, RunConfig};
use super::formats::{Annotations, DetectionItem, Detections, ImageInfo};
use super::model_store::{ModelBundle, RescorerState};
use super::PipelineError;

/// Source of image pixels, keyed by the annotation manifest.
pub trait ImageProvider: Sync {
    fn load(&self, info: &ImageInfo) -> Result<GrayImage, PipelineError>;
}

/// Reads images from disk, manifest paths resolved against a root directory.
pub struct DiskImages {
    pub root: std::path::PathBuf,
}

impl ImageProvider for DiskImages {
    fn load(&self, info: &ImageInfo) -> Result<GrayImage, PipelineError> {
        Ok(load_gray(&self.root.join(&info.path))?)
    }
}

/// In-memory images, used by tests and fresh simulations.
pub struct MemoryImages(pub BTreeMap<String, GrayImage>);

impl ImageProvider for MemoryImages {
    fn load(&self, info: &ImageInfo) -> Result<GrayImage, PipelineError> {
        self.0
            .get(&info.id)
            .cloned()
            .ok_or_else(|| PipelineError::MissingImage { image: info.id.clone() })
    }
}

/// Classification-score source for (detection, supporting region) pairs of
/// one image. Deterministic for a fixed model.
pub trait RegionScorer: Sync {
    fn score_regions(
        &self,
        img: &GrayImage,
        image_id: &str,
        items: &[(Detection, Region)],
    ) -> Result<Vec<f64>, PipelineError>;
}

/// Scores regions with the trained bag-of-words models. Crops are encoded
/// once per distinct (bounding box, codebook) pair and shared across the
/// regions of the image, which collapses the work when supporting regions
/// include the whole background.
pub struct ModelScorer<'a> {
    pub bundle: &'a ModelBundle,
}

impl RegionScorer for ModelScorer<'_> {
    fn score_regions(
        &self,
        img: &GrayImage,
        _image_id: &str,
        items: &[(Detection, Region)],
    ) -> Result<Vec<f64>, PipelineError> {
        let sampling = self.bundle.sampling();
        let llc = self.bundle.config.llc_config();
        let pyramid = self.bundle.pyramid();
        let mut cache: HashMap<(Rect, usize), EncodedCrop<f64>> = HashMap::new();
        let mut scores = Vec::with_capacity(items.len());
        for (det, region) in items {
            let model = self
                .bundle
                .categories
                .get(&det.category)
                .ok_or(PipelineError::MissingModel { category: det.category })?;
            let crop = match region.bounding_rect() {
                Some(r) => r,
                None => {
                    // Empty region: zero feature, the score is the bias.
                    scores.push(model.bias);
                    continue;
                }
            };
            let codebook = &self.bundle.codebooks[model.codebook_idx];
            let encoded = match cache.entry((crop, model.codebook_idx)) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(encode_crop(img, crop, codebook, &sampling, &llc)?)
                }
            };
            let mask = region.rasterize_within(crop);
            let feature = pool_masked(encoded, &mask, codebook.k(), &pyramid)?;
            if feature.values.len() != model.weights.len() {
                return Err(crate::bow::BowError::DimensionMismatch {
                    expected: model.weights.len(),
                    got: feature.values.len(),
                }
                .into());
            }
            let dot: f64 =
                model.weights.iter().zip(&feature.values).map(|(w, v)| w * v).sum();
            scores.push(dot + model.bias);
        }
        Ok(scores)
    }
}

/// Diagnostic scorer that knows the ground truth: +1 when the detection box
/// overlaps a same-category ground-truth box at or above the threshold,
/// otherwise -1. Regions are ignored.
pub struct OracleScorer {
    gt_by_image: BTreeMap<String, Vec<(Rect, u32)>>,
    iou_threshold: f64,
}

impl OracleScorer {
    pub fn new(annotations: &Annotations, iou_threshold: f64) -> Self {
        let mut gt_by_image: BTreeMap<String, Vec<(Rect, u32)>> = BTreeMap::new();
        for o in &annotations.objects {
            gt_by_image.entry(o.image.clone()).or_default().push((o.rect, o.category));
        }
        Self { gt_by_image, iou_threshold }
    }
}

impl RegionScorer for OracleScorer {
    fn score_regions(
        &self,
        _img: &GrayImage,
        image_id: &str,
        items: &[(Detection, Region)],
    ) -> Result<Vec<f64>, PipelineError> {
        Ok(items
            .iter()
            .map(|(det, _)| {
                let hit = self.gt_by_image.get(image_id).is_some_and(|boxes| {
                    boxes.iter().any(|&(rect, category)| {
                        category == det.category && det.rect.iou(rect) >= self.iou_threshold
                    })
                });
                if hit {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect())
    }
}

/// Per-image intermediate: each kept detection with its classification score.
#[derive(Debug, Clone)]
pub(crate) struct ScoredImage {
    pub image: String,
    pub items: Vec<(Detection, f64)>,
    pub retained: BTreeMap<u32, usize>,
}

/// Thresholds, ranks, builds support sets, and scores one image's
/// detections, category by category.
pub(crate) fn score_image(
    config: &RunConfig,
    info: &ImageInfo,
    dets: Vec<Detection>,
    scorer: &dyn RegionScorer,
    provider: &dyn ImageProvider,
) -> Result<ScoredImage, PipelineError> {
    let img = provider.load(info)?;
    let (kept, retained) = threshold_filter(dets, config.score_threshold);
    let mut by_category: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in kept {
        by_category.entry(d.category).or_default().push(d);
    }
    let support_cfg = config.support_config();
    let mut items = Vec::new();
    for (_, cat_dets) in by_category {
        let ranked = RankedDetections::rank(cat_dets, info.extent)?;
        let set = ranked.build_support_set(&support_cfg);
        let pairs: Vec<(Detection, Region)> = set
            .entries
            .iter()
            .map(|entry| (ranked.boxes()[entry.index], entry.support.clone()))
            .collect();
        let scores = scorer.score_regions(&img, &info.id, &pairs)?;
        items.extend(pairs.into_iter().zip(scores).map(|((d, _), s)| (d, s)));
    }
    Ok(ScoredImage { image: info.id.clone(), items, retained })
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub rescored: Detections,
    pub report: EvalReport,
    /// Post-threshold candidate counts per category.
    pub retained: BTreeMap<u32, usize>,
}

pub struct CascadeInputs<'a> {
    pub config: &'a RunConfig,
    pub annotations: &'a Annotations,
    pub detections: &'a Detections,
    pub scorer: &'a dyn RegionScorer,
    pub provider: &'a dyn ImageProvider,
    /// Required when `config.fusion` is `rescore`.
    pub rescorers: Option<&'a BTreeMap<u32, RescorerState>>,
    /// Worker count; `None` falls back to [`worker_threads`].
    pub threads: Option<usize>,
}

/// Worker count: `REGIONLIFT_THREADS` when set, available parallelism
/// otherwise. Work is aggregated in image order, so the count never changes
/// results.
pub fn worker_threads() -> usize {
    match std::env::var("REGIONLIFT_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

pub(crate) fn score_all_images(
    config: &RunConfig,
    annotations: &Annotations,
    detections: &Detections,
    scorer: &dyn RegionScorer,
    provider: &dyn ImageProvider,
    threads: Option<usize>,
) -> Result<Vec<ScoredImage>, PipelineError> {
    let by_image = detections.by_image();
    let work: Vec<(&ImageInfo, Vec<Detection>)> = annotations
        .images
        .values()
        .filter_map(|info| {
            by_image
                .get(info.id.as_str())
                .map(|idxs| (info, idxs.iter().map(|&i| detections.items[i].detection).collect()))
        })
        .collect();

    let threads = threads.unwrap_or_else(worker_threads);
    if threads <= 1 {
        work.into_iter()
            .map(|(info, dets)| score_image(config, info, dets, scorer, provider))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PipelineError::InvalidConfig { message: format!("thread pool: {e}") })?;
        pool.install(|| {
            work.into_par_iter()
                .map(|(info, dets)| score_image(config, info, dets, scorer, provider))
                .collect()
        })
    }
}

/// Runs the full cascade and evaluates the rescored detections.
pub fn run_cascade(inputs: &CascadeInputs) -> Result<CascadeOutput, PipelineError> {
    let config = inputs.config;
    config.validate()?;
    let k = inputs.annotations.k();
    let scored = score_all_images(
        config,
        inputs.annotations,
        inputs.detections,
        inputs.scorer,
        inputs.provider,
        inputs.threads,
    )?;

    let mut retained: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &scored {
        for (&cat, &n) in &s.retained {
            *retained.entry(cat).or_insert(0) += n;
        }
    }

    let mut rescored_items: Vec<DetectionItem> = Vec::new();
    for s in &scored {
        let extent = inputs.annotations.images[&s.image].extent;
        // Image context: the best detection and classification score each
        // category reaches in this image.
        let mut best_det = vec![None; k];
        let mut best_cls = vec![None; k];
        for (d, cls) in &s.items {
            let slot = d.category as usize;
            best_det[slot] = Some(best_det[slot].map_or(d.score, |b: f64| b.max(d.score)));
            best_cls[slot] = Some(best_cls[slot].map_or(*cls, |b: f64| b.max(*cls)));
        }
        let ctx = image_context(&best_det, &best_cls)?;

        match config.fusion {
            FusionMode::Simple => {
                for &(d, cls) in &s.items {
                    let score = fuse_simple(d.score, cls, config.fusion_weight);
                    rescored_items.push(DetectionItem {
                        image: s.image.clone(),
                        detection: Detection { score, ..d },
                    });
                }
            }
            FusionMode::Rescore => {
                let rescorers = inputs.rescorers.ok_or(PipelineError::InvalidConfig {
                    message: "fusion = rescore requires trained rescorers".into(),
                })?;
                let mut by_cat: BTreeMap<u32, Vec<(Detection, f64)>> = BTreeMap::new();
                for &(d, cls) in &s.items {
                    by_cat.entry(d.category).or_default().push((d, cls));
                }
                for (category, group) in by_cat {
                    let state = rescorers
                        .get(&category)
                        .ok_or(PipelineError::MissingModel { category })?;
                    match state {
                        RescorerState::Model(dto) => {
                            let model = dto.clone().into_model();
                            let pairs: Vec<(Detection, RescoreFeature<f64>)> = group
                                .into_iter()
                                .map(|(d, cls)| {
                                    (d, box_feature(d.rect, d.score, cls, &ctx, extent))
                                })
                                .collect();
                            for d in rescore_apply(&model, &pairs)? {
                                rescored_items.push(DetectionItem {
                                    image: s.image.clone(),
                                    detection: d,
                                });
                            }
                        }
                        RescorerState::Fallback { .. } => {
                            for (d, cls) in group {
                                let score = fuse_simple(d.score, cls, config.fusion_weight);
                                rescored_items.push(DetectionItem {
                                    image: s.image.clone(),
                                    detection: Detection { score, ..d },
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    rescored_items.sort_by(|a, b| {
        (&a.image, a.detection.category)
            .cmp(&(&b.image, b.detection.category))
            .then(b.detection.score.partial_cmp(&a.detection.score).expect("finite"))
            .then(a.detection.rect.cmp(&b.detection.rect))
    });
    let rescored = Detections { items: rescored_items };

    let report = evaluate_dataset(
        &rescored.det_records(),
        &inputs.annotations.gt_records(),
        k,
        &config.match_options(),
    )?;
    Ok(CascadeOutput { rescored, report, retained })
}

#[derive(serde::Serialize)]
struct ReportDto<'a> {
    mean_ap: f64,
    categories: Vec<ReportCategoryDto<'a>>,
}

#[derive(serde::Serialize)]
struct ReportCategoryDto<'a> {
    id: u32,
    name: &'a str,
    ap: f64,
    ground_truth: usize,
    retained_candidates: usize,
}

#[derive(serde::Serialize)]
struct ResolvedConfig<'a> {
    run: &'a RunConfig,
}

/// Writes the run directory: resolved config, rescored detections (re-read
/// to prove they validate), the evaluation report, and per-category PR CSVs.
pub fn write_run_outputs(
    dir: &Path,
    config: &RunConfig,
    annotations: &Annotations,
    output: &CascadeOutput,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| PipelineError::Io { path, source }
    };

    let config_path = dir.join("config.toml");
    let text = toml::to_string_pretty(&ResolvedConfig { run: config }).expect("config serializes");
    std::fs::write(&config_path, text).map_err(io_err(&config_path))?;

    let det_path = dir.join("detections.jsonl");
    output.rescored.save(&det_path)?;
    // Every emitted file must re-validate against the ingestion schema.
    let reread = Detections::load(&det_path, annotations)?;
    debug_assert_eq!(reread, output.rescored);

    let report_path = dir.join("report.json");
    let dto = ReportDto {
        mean_ap: output.report.mean_ap,
        categories: output
            .report
            .categories
            .iter()
            .map(|c| ReportCategoryDto {
                id: c.category,
                name: annotations.categories.name(c.category).unwrap_or("?"),
                ap: c.ap,
                ground_truth: c.total_gt,
                retained_candidates: output.retained.get(&c.category).copied().unwrap_or(0),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&dto).expect("report serializes");
    json.push('\n');
    std::fs::write(&report_path, json).map_err(io_err(&report_path))?;

    for c in &output.report.categories {
        let name = annotations.categories.name(c.category).unwrap_or("unknown");
        let path = dir.join(format!("pr_{name}.csv"));
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &c.curve).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(&path, buf).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Evaluates detections as-is (no rescoring); used by the `eval` command
/// and as the baseline for improvement checks.
pub fn evaluate_only(
    annotations: &Annotations,
    detections: &Detections,
    config: &RunConfig,
) -> Result<EvalReport, PipelineError> {
    Ok(evaluate_dataset(
        &detections.det_records(),
        &annotations.gt_records(),
        annotations.k(),
        &config.match_options(),
    )?)
}

/// Dumps the support sets of one image as JSON, for inspection.
pub fn dump_regions(
    config: &RunConfig,
    annotations: &Annotations,
    detections: &Detections,
    image_id: &str,
    category: Option<u32>,
) -> Result<String, PipelineError> {
    #[derive(serde::Serialize)]
    struct EntryDto {
        index: usize,
        score: f64,
        category: u32,
        rect: [i32; 4],
        support: Vec<[i32; 4]>,
        support_area: u64,
        local_background: Vec<[i32; 4]>,
        local_background_area: u64,
    }
    #[derive(serde::Serialize)]
    struct GroupDto {
        category: u32,
        background: Vec<[i32; 4]>,
        background_area: u64,
        entries: Vec<EntryDto>,
    }
    #[derive(serde::Serialize)]
    struct DumpDto {
        image: String,
        width: u32,
        height: u32,
        groups: Vec<GroupDto>,
    }

    let info = annotations
        .images
        .get(image_id)
        .ok_or_else(|| PipelineError::MissingImage { image: image_id.to_string() })?;
    let rects = |r: &Region| r.rects().iter().map(|r| [r.x1, r.y1, r.x2, r.y2]).collect();

    let mut by_category: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for item in detections.items.iter().filter(|i| i.image == image_id) {
        if category.is_none_or(|c| c == item.detection.category) {
            by_category.entry(item.detection.category).or_default().push(item.detection);
        }
    }
    let support_cfg = config.support_config();
    let mut groups = Vec::new();
    for (cat, dets) in by_category {
        let (kept, _) = threshold_filter(dets, config.score_threshold);
        let ranked = RankedDetections::rank(kept, info.extent)?;
        let set = ranked.build_support_set(&support_cfg);
        groups.push(GroupDto {
            category: cat,
            background: rects(&set.background),
            background_area: set.background.area(),
            entries: set
                .entries
                .iter()
                .map(|e| EntryDto {
                    index: e.index,
                    score: ranked.boxes()[e.index].score,
                    category: cat,
                    rect: {
                        let r = ranked.boxes()[e.index].rect;
                        [r.x1, r.y1, r.x2, r.y2]
                    },
                    support: rects(&e.support),
                    support_area: e.support.area(),
                    local_background: rects(&e.local_background),
                    local_background_area: e.local_background.area(),
                })
                .collect(),
        });
    }
    let dump = DumpDto {
        image: image_id.to_string(),
        width: info.extent.width,
        height: info.extent.height,
        groups,
    };
    Ok(serde_json::to_string_pretty(&dump).expect("dump serializes"))
}
