//! Seeded synthetic scenes: textured objects on a flat background, plus
//! noisy detections with a controlled true/false positive mix. A desk-scale
//! stand-in for a real detection dataset.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Detection, ImageExtent, Rect};
use crate::raster::{save_png, GrayImage};

use super::formats::{Annotations, CategoryDict, DetectionItem, Detections, GtObject, ImageInfo};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_box: u32,
    pub max_box: u32,
    /// Probability that a ground-truth object has no detection.
    pub miss_rate: f64,
    /// Probability of spawning one false alarm per ground-truth object.
    pub fp_rate: f64,
    /// Standard deviation of the Gaussian score noise.
    pub score_noise: f64,
    /// Maximum absolute pixel jitter of true-positive boxes.
    pub jitter: u32,
    pub tp_score: f64,
    pub fp_score: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            images: 50,
            width: 128,
            height: 128,
            categories: 3,
            min_objects: 1,
            max_objects: 3,
            min_box: 24,
            max_box: 48,
            miss_rate: 0.0,
            fp_rate: 0.5,
            score_noise: 0.3,
            jitter: 2,
            tp_score: 1.0,
            fp_score: 0.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::InvalidConfig { message: msg.to_string() });
        if self.images == 0 {
            return bad("simulate.images must be positive");
        }
        if self.width < 8 || self.height < 8 {
            return bad("simulate extent must be at least 8x8");
        }
        if self.categories == 0 {
            return bad("simulate.categories must be positive");
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return bad("simulate object counts must satisfy 0 < min <= max");
        }
        if self.min_box < 8 || self.min_box > self.max_box || self.max_box > self.width.min(self.height) {
            return bad("simulate box sizes must satisfy 8 <= min <= max <= extent");
        }
        if !(0.0..=1.0).contains(&self.miss_rate) || !(0.0..=1.0).contains(&self.fp_rate) {
            return bad("simulate rates must lie in [0, 1]");
        }
        if !self.score_noise.is_finite() || self.score_noise < 0.0 {
            return bad("simulate.score_noise must be finite and >= 0");
        }
        Ok(())
    }
}

/// A generated dataset, kept in memory until written.
#[derive(Debug, Clone)]
pub struct SimulatedScenes {
    pub annotations: Annotations,
    pub detections: Detections,
    pub images: BTreeMap<String, GrayImage>,
}

const BACKGROUND_GRAY: u8 = 128;

/// Per-category procedural texture, anchored at the object's own origin so
/// identical objects look identical wherever they sit.
fn texture(category: usize, x: u32, y: u32) -> u8 {
    let period = 3 + (category / 4) as u32;
    let bright = ((category % 8) >= 4) as u8 * 30 + 180;
    let on = match category % 4 {
        0 => (x / period).is_multiple_of(2),
        1 => (y / period).is_multiple_of(2),
        2 => ((x / period) + (y / period)).is_multiple_of(2),
        _ => ((x + y) / period).is_multiple_of(2),
    };
    if on {
        bright
    } else {
        40
    }
}

fn intersects_any(rect: Rect, others: &[(Rect, u32)]) -> bool {
    others.iter().any(|&(r, _)| rect.intersect(r).is_some())
}

fn random_box(rng: &mut ChaCha8Rng, params: &SceneParams) -> Rect {
    let w = rng.random_range(params.min_box..=params.max_box);
    let h = rng.random_range(params.min_box..=params.max_box);
    let x = rng.random_range(0..=params.width - w) as i32;
    let y = rng.random_range(0..=params.height - h) as i32;
    Rect::new(x, y, x + w as i32, y + h as i32)
}

/// Generates scenes deterministically from the seed.
pub fn simulate(params: &SceneParams, seed: u64) -> Result<SimulatedScenes, PipelineError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let extent = ImageExtent::new(params.width, params.height);

    let categories =
        CategoryDict::new((0..params.categories).map(|c| format!("texture{c:02}")).collect());
    let mut images = BTreeMap::new();
    let mut manifest = BTreeMap::new();
    let mut objects = Vec::new();
    let mut det_items = Vec::new();

    for index in 0..params.images {
        let id = format!("img_{index:04}");
        let mut img = GrayImage::filled(params.width, params.height, BACKGROUND_GRAY);

        // Place non-overlapping ground-truth boxes.
        let target = rng.random_range(params.min_objects..=params.max_objects);
        let mut placed: Vec<(Rect, u32)> = Vec::new();
        for _ in 0..target {
            let category = rng.random_range(0..params.categories) as u32;
            for _attempt in 0..40 {
                let rect = random_box(&mut rng, params);
                if !intersects_any(rect, &placed) {
                    placed.push((rect, category));
                    break;
                }
            }
        }
        for &(rect, category) in &placed {
            for y in rect.y1..rect.y2 {
                for x in rect.x1..rect.x2 {
                    let v = texture(category as usize, (x - rect.x1) as u32, (y - rect.y1) as u32);
                    img.set(x as u32, y as u32, v);
                }
            }
            objects.push(GtObject { image: id.clone(), category, rect });
        }

        // True positives: jittered copies of ground truth with noisy scores.
        for &(rect, category) in &placed {
            if rng.random::<f64>() < params.miss_rate {
                continue;
            }
            let j = params.jitter as i32;
            let (dx, dy) = if j > 0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0, 0)
            };
            let dx = dx.clamp(-rect.x1, params.width as i32 - rect.x2);
            let dy = dy.clamp(-rect.y1, params.height as i32 - rect.y2);
            let moved = Rect::new(rect.x1 + dx, rect.y1 + dy, rect.x2 + dx, rect.y2 + dy);
            let score = params.tp_score + params.score_noise * normal(&mut rng);
            det_items.push(DetectionItem {
                image: id.clone(),
                detection: Detection::new(moved, score, category),
            });
        }

        // False alarms: boxes that never touch any ground truth.
        for &(_, category) in &placed {
            if rng.random::<f64>() >= params.fp_rate {
                continue;
            }
            for _attempt in 0..40 {
                let rect = random_box(&mut rng, params);
                if !intersects_any(rect, &placed) {
                    let score = params.fp_score + params.score_noise * normal(&mut rng);
                    det_items.push(DetectionItem {
                        image: id.clone(),
                        detection: Detection::new(rect, score, category),
                    });
                    break;
                }
            }
        }

        manifest.insert(
            id.clone(),
            ImageInfo { id: id.clone(), path: format!("images/{id}.png").into(), extent },
        );
        images.insert(id, img);
    }

    Ok(SimulatedScenes {
        annotations: Annotations { categories, images: manifest, objects },
        detections: Detections { items: det_items },
        images,
    })
}

/// Writes `annotations.jsonl`, `detections.jsonl`, and `images/*.png`.
pub fn write_scenes(dir: &Path, scenes: &SimulatedScenes) -> Result<(), PipelineError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| PipelineError::Io {
        path: images_dir.display().to_string(),
        source,
    })?;
    for (id, img) in &scenes.images {
        let path = scenes.annotations.images[id].path.clone();
        save_png(&dir.join(path), img)?;
    }
    scenes.annotations.save(&dir.join("annotations.jsonl"))?;
    scenes.detections.save(&dir.join("detections.jsonl"))?;
    Ok(())
}
