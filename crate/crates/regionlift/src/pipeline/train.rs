//! Training orchestration: codebooks from dataset descriptors, per-category
//! linear region classifiers, and per-category RBF rescorers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bow::{dense_sample, kmeans_train, llc_encode, spm_pool, Codebook, KmeansParams};
use crate::rescore::{
    box_feature, image_context, rescore_train, RescoreOutcome, RescoreTrainParams,
};
use crate::svm::{smo_train, KernelSpec};

use super::cascade::{score_all_images, ImageProvider, ModelScorer};
use super::config::RunConfig;
use super::dataset::{DatasetPolicy, RegionDataset, RegionSample};
use super::formats::{Annotations, Detections};
use super::model_store::{CategoryModel, ModelBundle, RescorerState, SvmModelDto};
use super::PipelineError;

type LabeledFeatures = Vec<(crate::rescore::RescoreFeature<f64>, bool)>;

/// Trained codebooks plus the category-to-codebook assignment.
pub type CodebookSet = (Vec<Codebook<f64>>, BTreeMap<u32, usize>);

fn sample_descriptors(
    annotations: &Annotations,
    provider: &dyn ImageProvider,
    samples: &[&RegionSample],
    config: &RunConfig,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let sampling = config.sampling_config();
    let mut out = Vec::new();
    let mut current_image: Option<(String, crate::raster::GrayImage)> = None;
    for s in samples {
        let img = match &current_image {
            Some((id, img)) if *id == s.image => img,
            _ => {
                let info = annotations
                    .images
                    .get(&s.image)
                    .ok_or_else(|| PipelineError::MissingImage { image: s.image.clone() })?;
                current_image = Some((s.image.clone(), provider.load(info)?));
                &current_image.as_ref().unwrap().1
            }
        };
        let mask = s.mask.rasterize_within(s.crop);
        let descriptors = dense_sample::<f64>(img, s.crop, &mask, &sampling)?;
        out.extend(descriptors.into_iter().map(|d| d.vector));
    }
    Ok(out)
}

fn capped<T>(mut items: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    items.truncate(cap);
    items
}

/// Trains the codebook(s) for a dataset: one shared codebook for `gt-only`,
/// one per category for `gt-plus-false-alarms`.
pub fn train_codebooks(
    annotations: &Annotations,
    dataset: &RegionDataset,
    provider: &dyn ImageProvider,
    config: &RunConfig,
) -> Result<CodebookSet, PipelineError> {
    let kmeans_params = KmeansParams {
        k: config.codebook_size,
        seed: config.seed,
        max_iters: config.kmeans_max_iters,
        tol: config.kmeans_tol,
    };
    let categories: Vec<u32> = (0..annotations.k() as u32).collect();
    match dataset.policy {
        DatasetPolicy::GtOnly => {
            // Every sample is some category's ground-truth box; one pass over
            // the distinct boxes is enough for a shared codebook.
            let mut seen = std::collections::BTreeSet::new();
            let distinct: Vec<&RegionSample> = dataset
                .samples
                .iter()
                .filter(|s| seen.insert((s.image.clone(), s.crop)))
                .collect();
            let descriptors =
                sample_descriptors(annotations, provider, &distinct, config)?;
            let descriptors = capped(descriptors, config.kmeans_sample_cap, config.seed);
            let out = kmeans_train(&descriptors, &kmeans_params)?;
            let assignment = categories.into_iter().map(|c| (c, 0usize)).collect();
            Ok((vec![out.codebook], assignment))
        }
        DatasetPolicy::GtPlusFalseAlarms => {
            let mut codebooks = Vec::new();
            let mut assignment = BTreeMap::new();
            for category in categories {
                let samples: Vec<&RegionSample> = dataset.for_category(category).collect();
                let descriptors =
                    sample_descriptors(annotations, provider, &samples, config)?;
                let descriptors = capped(
                    descriptors,
                    config.kmeans_sample_cap,
                    config.seed.wrapping_add(category as u64),
                );
                let params = KmeansParams {
                    seed: config.seed.wrapping_add(category as u64),
                    ..kmeans_params
                };
                let out = kmeans_train(&descriptors, &params)?;
                assignment.insert(category, codebooks.len());
                codebooks.push(out.codebook);
            }
            Ok((codebooks, assignment))
        }
    }
}

/// Trains one linear region classifier per category on pooled features of
/// the dataset samples.
pub fn train_classifiers(
    annotations: &Annotations,
    dataset: &RegionDataset,
    provider: &dyn ImageProvider,
    codebooks: &[Codebook<f64>],
    assignment: &BTreeMap<u32, usize>,
    config: &RunConfig,
) -> Result<BTreeMap<u32, CategoryModel>, PipelineError> {
    let sampling = config.sampling_config();
    let llc = config.llc_config();
    let mut models = BTreeMap::new();
    for (&category, &codebook_idx) in assignment {
        let codebook = &codebooks[codebook_idx];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut current_image: Option<(String, crate::raster::GrayImage)> = None;
        for (sample_idx, s) in dataset.for_category(category).enumerate() {
            let img = match &current_image {
                Some((id, img)) if *id == s.image => img,
                _ => {
                    let info = annotations
                        .images
                        .get(&s.image)
                        .ok_or_else(|| PipelineError::MissingImage { image: s.image.clone() })?;
                    current_image = Some((s.image.clone(), provider.load(info)?));
                    &current_image.as_ref().unwrap().1
                }
            };
            let mask = s.mask.rasterize_within(s.crop);
            let descriptors = dense_sample::<f64>(img, s.crop, &mask, &sampling)?;
            let codes = descriptors
                .into_iter()
                .map(|d| llc_encode(&d.vector, codebook, &llc).map(|c| (c, d.center)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut feature =
                spm_pool(&codes, s.crop.width(), s.crop.height(), codebook.k(), &config.pyramid);
            feature.provenance = Some(crate::bow::Provenance {
                image: s.image.clone(),
                box_index: sample_idx as u32,
            });
            features.push(feature.values);
            labels.push(s.label);
        }
        let params = crate::svm::SmoParams {
            seed: config.seed.wrapping_add(category as u64),
            ..config.smo_params()
        };
        let model = smo_train(&features, &labels, KernelSpec::Linear, &params)?;
        models.insert(
            category,
            CategoryModel {
                codebook_idx,
                weights: model.weights().expect("linear kernel").to_vec(),
                bias: model.bias(),
            },
        );
    }
    Ok(models)
}

/// Codebooks plus classifiers in one step; rescorers start empty.
pub fn train_bundle(
    annotations: &Annotations,
    dataset: &RegionDataset,
    provider: &dyn ImageProvider,
    config: &RunConfig,
) -> Result<ModelBundle, PipelineError> {
    let (codebooks, assignment) = train_codebooks(annotations, dataset, provider, config)?;
    let categories =
        train_classifiers(annotations, dataset, provider, &codebooks, &assignment, config)?;
    Ok(ModelBundle {
        config: config.clone(),
        codebooks,
        categories,
        rescorers: BTreeMap::new(),
    })
}

/// Trains the per-category RBF rescorers by running the classifier stage of
/// the cascade over training detections. A box is a positive example when it
/// overlaps a same-category ground-truth box at the evaluation threshold.
pub fn train_rescorers(
    bundle: &ModelBundle,
    annotations: &Annotations,
    detections: &Detections,
    provider: &dyn ImageProvider,
    config: &RunConfig,
) -> Result<BTreeMap<u32, RescorerState>, PipelineError> {
    let scorer = ModelScorer { bundle };
    let scored = score_all_images(config, annotations, detections, &scorer, provider, None)?;
    let k = annotations.k();

    let mut samples: BTreeMap<u32, LabeledFeatures> = BTreeMap::new();
    for s in &scored {
        let extent = annotations.images[&s.image].extent;
        let mut best_det = vec![None; k];
        let mut best_cls = vec![None; k];
        for (d, cls) in &s.items {
            let slot = d.category as usize;
            best_det[slot] = Some(best_det[slot].map_or(d.score, |b: f64| b.max(d.score)));
            best_cls[slot] = Some(best_cls[slot].map_or(*cls, |b: f64| b.max(*cls)));
        }
        let ctx = image_context(&best_det, &best_cls)?;
        let gt: Vec<_> =
            annotations.objects.iter().filter(|o| o.image == s.image).collect();
        for &(d, cls) in &s.items {
            let feature = box_feature(d.rect, d.score, cls, &ctx, extent);
            let positive = gt.iter().any(|o| {
                o.category == d.category && o.rect.iou(d.rect) >= config.iou_threshold
            });
            samples.entry(d.category).or_default().push((feature, positive));
        }
    }

    let params = RescoreTrainParams {
        svm: config.smo_params(),
        gamma: config.rbf_gamma,
    };
    let outcomes = rescore_train(&samples, &params);
    Ok(outcomes
        .into_iter()
        .map(|(category, outcome)| {
            let state = match outcome {
                RescoreOutcome::Trained(model) => {
                    RescorerState::Model(SvmModelDto::from_model(&model))
                }
                RescoreOutcome::Skipped { reason } => RescorerState::Fallback { reason },
            };
            (category, state)
        })
        .collect())
}
