//! Exact axis-aligned box and rectilinear-region set algebra.
//!
//! Coordinates are half-open integer pixel ranges: a [`Rect`] covers pixels
//! `x1 <= x < x2`, `y1 <= y < y2`, so areas and boolean operations are exact.
//! A [`Region`] is a canonical set of disjoint rectangles; two regions cover
//! the same pixel set if and only if they compare equal. [`PixelMask`] is the
//! per-pixel bitmask used both as the test oracle for the algebra and to mask
//! region crops during feature extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rectangle ({x1},{y1})-({x2},{y2}): requires x1 < x2 and y1 < y2")]
    DegenerateRect { x1: i32, y1: i32, x2: i32, y2: i32 },
    #[error("rectangle {rect:?} lies outside image extent {extent:?}")]
    OutsideExtent { rect: Rect, extent: ImageExtent },
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "image extent must be positive");
        Self { width, height }
    }

    /// The full image as a rectangle.
    pub fn rect(&self) -> Rect {
        Rect::new(0, 0, self.width as i32, self.height as i32)
    }

    pub fn contains(&self, r: Rect) -> bool {
        r.x1 >= 0 && r.y1 >= 0 && r.x2 <= self.width as i32 && r.y2 <= self.height as i32
    }
}

/// Axis-aligned rectangle with half-open integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl Rect {
    /// Panics if the rectangle is degenerate (`x1 >= x2` or `y1 >= y2`).
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Self {
        assert!(x1 < x2 && y1 < y2, "degenerate rectangle ({x1},{y1})-({x2},{y2})");
        Self { x1, y1, x2, y2 }
    }

    /// Validating constructor for data read from files.
    pub fn checked(x1: i32, y1: i32, x2: i32, y2: i32) -> Result<Self, GeometryError> {
        if x1 < x2 && y1 < y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(GeometryError::DegenerateRect { x1, y1, x2, y2 })
        }
    }

    pub fn width(&self) -> u32 {
        (self.x2 - self.x1) as u32
    }

    pub fn height(&self) -> u32 {
        (self.y2 - self.y1) as u32
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Maximal rectangle contained in both, or `None` if the overlap area is zero.
    pub fn intersect(&self, other: Rect) -> Option<Rect> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Rect { x1, y1, x2, y2 })
    }

    /// Intersection-over-union, computed in integer arithmetic before one division.
    pub fn iou(&self, other: Rect) -> f64 {
        let inter = self.intersect(other).map_or(0, |r| r.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Grows the box outward by `margin_frac` of its own width/height per side,
    /// rounding half away from zero, then clips to the image extent.
    pub fn expand(&self, margin_frac: f64, extent: ImageExtent) -> Rect {
        assert!(margin_frac.is_finite() && margin_frac >= 0.0, "margin_frac must be finite and >= 0");
        // f64::round rounds half away from zero, as documented.
        let dx = (margin_frac * self.width() as f64).round() as i64;
        let dy = (margin_frac * self.height() as f64).round() as i64;
        let x1 = (self.x1 as i64 - dx).max(0) as i32;
        let y1 = (self.y1 as i64 - dy).max(0) as i32;
        let x2 = (self.x2 as i64 + dx).min(extent.width as i64) as i32;
        let y2 = (self.y2 as i64 + dy).min(extent.height as i64) as i32;
        Rect::new(x1, y1, x2, y2)
    }
}

/// A scored, categorized detection box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub score: f64,
    pub category: u32,
}

impl Detection {
    pub fn new(rect: Rect, score: f64, category: u32) -> Self {
        Self { rect, score, category }
    }
}

/// A set of pixels representable as disjoint axis-aligned rectangles.
///
/// Held in canonical form: maximal horizontal bands (split at every y where
/// the x-coverage changes, then re-merged), maximal x-runs within each band,
/// sorted by `(y1, x1, y2, x2)`. Equal pixel sets always compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Region {
    rects: Vec<Rect>,
}

impl Region {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_rect(r: Rect) -> Self {
        Self { rects: vec![r] }
    }

    /// Builds a region from arbitrary (possibly overlapping) rectangles.
    pub fn from_rects<I: IntoIterator<Item = Rect>>(rects: I) -> Self {
        Self { rects: canonicalize(rects.into_iter().collect()) }
    }

    /// The whole image as a region.
    pub fn full(extent: ImageExtent) -> Self {
        Self::from_rect(extent.rect())
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Exact pixel count; the rectangles are disjoint so areas just add up.
    pub fn area(&self) -> u64 {
        self.rects.iter().map(Rect::area).sum()
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        self.rects.iter().any(|r| r.contains_point(x, y))
    }

    /// Smallest rectangle covering the region, or `None` when empty.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let first = *self.rects.first()?;
        Some(self.rects.iter().fold(first, |acc, r| Rect {
            x1: acc.x1.min(r.x1),
            y1: acc.y1.min(r.y1),
            x2: acc.x2.max(r.x2),
            y2: acc.y2.max(r.y2),
        }))
    }

    pub fn union(&self, other: &Region) -> Region {
        Region::from_rects(self.rects.iter().chain(other.rects.iter()).copied())
    }

    pub fn subtract_rect(&self, b: Rect) -> Region {
        Region { rects: canonicalize(split_away(&self.rects, b)) }
    }

    pub fn subtract(&self, other: &Region) -> Region {
        let mut pieces = self.rects.clone();
        for &b in &other.rects {
            pieces = split_away(&pieces, b);
        }
        Region { rects: canonicalize(pieces) }
    }

    pub fn intersect_rect(&self, b: Rect) -> Region {
        Region::from_rects(self.rects.iter().filter_map(|r| r.intersect(b)))
    }

    pub fn intersect(&self, other: &Region) -> Region {
        // Pairwise intersections of two disjoint families are disjoint.
        let rects = self
            .rects
            .iter()
            .flat_map(|a| other.rects.iter().filter_map(|b| a.intersect(*b)))
            .collect::<Vec<_>>();
        Region { rects: canonicalize(rects) }
    }

    /// Fills the region into a full-extent bitmask.
    pub fn rasterize(&self, extent: ImageExtent) -> Result<PixelMask, GeometryError> {
        for &r in &self.rects {
            if !extent.contains(r) {
                return Err(GeometryError::OutsideExtent { rect: r, extent });
            }
        }
        let mut mask = PixelMask::new(extent.width, extent.height);
        for &r in &self.rects {
            mask.set_rect(r, true);
        }
        Ok(mask)
    }

    /// Rasterizes the part of the region inside `window`, in window-local
    /// coordinates. Used to build crop masks for feature extraction.
    pub fn rasterize_within(&self, window: Rect) -> PixelMask {
        let mut mask = PixelMask::new(window.width(), window.height());
        for r in self.rects.iter().filter_map(|r| r.intersect(window)) {
            mask.set_rect(
                Rect::new(r.x1 - window.x1, r.y1 - window.y1, r.x2 - window.x1, r.y2 - window.y1),
                true,
            );
        }
        mask
    }
}

/// Removes `b` from every piece; each piece splits into at most 4 rectangles.
fn split_away(pieces: &[Rect], b: Rect) -> Vec<Rect> {
    let mut out = Vec::with_capacity(pieces.len());
    for &r in pieces {
        match r.intersect(b) {
            None => out.push(r),
            Some(ov) => {
                if r.y1 < ov.y1 {
                    out.push(Rect::new(r.x1, r.y1, r.x2, ov.y1));
                }
                if ov.y2 < r.y2 {
                    out.push(Rect::new(r.x1, ov.y2, r.x2, r.y2));
                }
                if r.x1 < ov.x1 {
                    out.push(Rect::new(r.x1, ov.y1, ov.x1, ov.y2));
                }
                if ov.x2 < r.x2 {
                    out.push(Rect::new(ov.x2, ov.y1, r.x2, ov.y2));
                }
            }
        }
    }
    out
}

/// Unique decomposition by horizontal bands: cut at every y where coverage can
/// change, merge x-intervals within each band, then re-merge adjacent bands
/// with identical interval lists. Accepts overlapping input rectangles.
fn canonicalize(rects: Vec<Rect>) -> Vec<Rect> {
    if rects.is_empty() {
        return rects;
    }
    let mut ys: Vec<i32> = rects.iter().flat_map(|r| [r.y1, r.y2]).collect();
    ys.sort_unstable();
    ys.dedup();

    struct Band {
        y1: i32,
        y2: i32,
        xs: Vec<(i32, i32)>,
    }
    let mut bands: Vec<Band> = Vec::new();
    for w in ys.windows(2) {
        let (ya, yb) = (w[0], w[1]);
        let mut xs: Vec<(i32, i32)> = rects
            .iter()
            .filter(|r| r.y1 <= ya && r.y2 >= yb)
            .map(|r| (r.x1, r.x2))
            .collect();
        if xs.is_empty() {
            continue;
        }
        xs.sort_unstable();
        let mut merged: Vec<(i32, i32)> = Vec::with_capacity(xs.len());
        for (a, b) in xs {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        match bands.last_mut() {
            Some(prev) if prev.y2 == ya && prev.xs == merged => prev.y2 = yb,
            _ => bands.push(Band { y1: ya, y2: yb, xs: merged }),
        }
    }

    let mut out = Vec::new();
    for band in bands {
        for (x1, x2) in band.xs {
            out.push(Rect::new(x1, band.y1, x2, band.y2));
        }
    }
    out
}

/// Boolean pixel grid. The rasterization oracle for the region algebra, and
/// the crop mask fed to feature extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width as usize) * (height as usize)] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![true; (width as usize) * (height as usize)] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    /// Sets every pixel of `r` (clipped to the grid) to `value`.
    pub fn set_rect(&mut self, r: Rect, value: bool) {
        let x1 = r.x1.max(0) as u32;
        let y1 = r.y1.max(0) as u32;
        let x2 = (r.x2.max(0) as u32).min(self.width);
        let y2 = (r.y2.max(0) as u32).min(self.height);
        for y in y1..y2 {
            let row = y as usize * self.width as usize;
            self.bits[row + x1 as usize..row + x2 as usize].fill(value);
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn or_with(&mut self, other: &PixelMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn and_with(&mut self, other: &PixelMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= *b;
        }
    }

    pub fn subtract_mask(&mut self, other: &PixelMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !*b;
        }
    }
}
