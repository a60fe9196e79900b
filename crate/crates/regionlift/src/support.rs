//! Supporting regions computed from a ranked list of detection boxes.
//!
//! For one image, detections are sorted by descending score. The background
//! is everything outside all boxes. Each box `k` gets a supporting region:
//! the box minus its overlap with the boxes ranked before (or after) it,
//! optionally unioned with the background. Each box also gets a local
//! background: a margin ring around the expanded box that excludes every
//! detection box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, GeometryError, ImageExtent, Region};

#[derive(Debug, Error)]
pub enum SupportError {
    #[error("box index {index} out of range for {len} detections")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("detection score is not finite")]
    NonFiniteScore,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which side of the ranking claims contested pixels.
///
/// `Higher` subtracts overlap with higher-scored boxes (each pixel belongs to
/// the best-scoring box covering it); `Lower` subtracts overlap with
/// lower-scored boxes instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Higher,
    Lower,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupportConfig {
    pub orientation: Orientation,
    /// Union the image-wide background into every supporting region.
    pub include_background: bool,
    /// Margin for the local-background ring, as a fraction of box size.
    pub margin_frac: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self { orientation: Orientation::Higher, include_background: true, margin_frac: 0.5 }
    }
}

/// Detections of one image sorted by descending score, ties keeping input order.
#[derive(Debug, Clone)]
pub struct RankedDetections {
    boxes: Vec<Detection>,
    extent: ImageExtent,
}

impl RankedDetections {
    pub fn rank(mut boxes: Vec<Detection>, extent: ImageExtent) -> Result<Self, SupportError> {
        for b in &boxes {
            if !b.score.is_finite() {
                return Err(SupportError::NonFiniteScore);
            }
            if !extent.contains(b.rect) {
                return Err(GeometryError::OutsideExtent { rect: b.rect, extent }.into());
            }
        }
        // Stable sort: equal scores keep their input order.
        boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));
        Ok(Self { boxes, extent })
    }

    pub fn boxes(&self) -> &[Detection] {
        &self.boxes
    }

    pub fn extent(&self) -> ImageExtent {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Image area outside every detection box.
    pub fn background_region(&self) -> Region {
        let mut bg = Region::full(self.extent);
        for b in &self.boxes {
            bg = bg.subtract_rect(b.rect);
        }
        bg
    }

    /// Supporting region of box `k`: the box minus its overlap with every box
    /// on the configured side of the ranking, plus the background if enabled.
    pub fn supporting_region(&self, k: usize, cfg: &SupportConfig) -> Result<Region, SupportError> {
        if k >= self.boxes.len() {
            return Err(SupportError::IndexOutOfRange { index: k, len: self.boxes.len() });
        }
        let part = self.box_part(k, cfg.orientation);
        Ok(if cfg.include_background { self.background_region().union(&part) } else { part })
    }

    fn box_part(&self, k: usize, orientation: Orientation) -> Region {
        let mut part = Region::from_rect(self.boxes[k].rect);
        let excluded: &[Detection] = match orientation {
            Orientation::Higher => &self.boxes[..k],
            Orientation::Lower => &self.boxes[k + 1..],
        };
        for other in excluded {
            part = part.subtract_rect(other.rect);
        }
        part
    }

    /// Margin ring around box `i`: the expanded box minus every detection box.
    pub fn local_background(&self, i: usize, margin_frac: f64) -> Result<Region, SupportError> {
        if i >= self.boxes.len() {
            return Err(SupportError::IndexOutOfRange { index: i, len: self.boxes.len() });
        }
        let mut ring = Region::from_rect(self.boxes[i].rect.expand(margin_frac, self.extent));
        for b in &self.boxes {
            ring = ring.subtract_rect(b.rect);
        }
        Ok(ring)
    }

    /// Background plus (supporting region, local background) for every box.
    pub fn build_support_set(&self, cfg: &SupportConfig) -> SupportSet {
        let background = self.background_region();
        let entries = (0..self.boxes.len())
            .map(|k| {
                let part = self.box_part(k, cfg.orientation);
                let support =
                    if cfg.include_background { background.union(&part) } else { part };
                let local_background = self
                    .local_background(k, cfg.margin_frac)
                    .expect("index in range");
                SupportEntry { index: k, support, local_background }
            })
            .collect();
        SupportSet { background, entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub background: Region,
    pub entries: Vec<SupportEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    /// Rank of the box this entry belongs to.
    pub index: usize,
    pub support: Region,
    pub local_background: Region,
}
