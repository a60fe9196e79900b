//! 8-bit grayscale rasters and image file I/O (PNG, raw PGM/PPM).

use std::path::Path;

use thiserror::Error;

use crate::geometry::{ImageExtent, Rect};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        assert!(width >= 1 && height >= 1);
        Self { width, height, pixels }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn extent(&self) -> ImageExtent {
        ImageExtent::new(self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Copies the pixels under `rect` (must be inside the image).
    pub fn crop(&self, rect: Rect) -> GrayImage {
        assert!(self.extent().contains(rect), "crop outside image");
        let (w, h) = (rect.width(), rect.height());
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for y in rect.y1..rect.y2 {
            let row = y as usize * self.width as usize;
            out.extend_from_slice(&self.pixels[row + rect.x1 as usize..row + rect.x2 as usize]);
        }
        GrayImage::new(w, h, out)
    }
}

/// Integer luma used for all RGB-to-gray conversion: `(77R + 150G + 29B) >> 8`.
#[inline]
pub fn luma_u8(r: u8, g: u8, b: u8) -> u8 {
    ((77 * r as u32 + 150 * g as u32 + 29 * b as u32) >> 8) as u8
}

/// Loads PNG or raw PGM/PPM. Non-gray inputs go through [`luma_u8`].
pub fn load_gray(path: &Path) -> Result<GrayImage, RasterError> {
    let img = image::open(path)
        .map_err(|source| RasterError::Decode { path: path.display().to_string(), source })?;
    let (width, height) = (img.width(), img.height());
    let pixels = match img {
        image::DynamicImage::ImageLuma8(gray) => gray.into_raw(),
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels().map(|p| luma_u8(p.0[0], p.0[1], p.0[2])).collect()
        }
    };
    Ok(GrayImage::new(width, height, pixels))
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<(), RasterError> {
    let buf = image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| RasterError::Encode { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights_sum_to_256() {
        assert_eq!(luma_u8(255, 255, 255), 255);
        assert_eq!(luma_u8(0, 0, 0), 0);
        assert_eq!(luma_u8(255, 0, 0), ((77u32 * 255) >> 8) as u8);
        assert_eq!(luma_u8(0, 255, 0), ((150u32 * 255) >> 8) as u8);
    }

    #[test]
    fn crop_copies_window() {
        let mut img = GrayImage::filled(8, 8, 0);
        img.set(3, 2, 200);
        let crop = img.crop(Rect::new(2, 1, 6, 5));
        assert_eq!(crop.width(), 4);
        assert_eq!(crop.height(), 4);
        assert_eq!(crop.get(1, 1), 200);
    }

    #[test]
    fn png_and_pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::filled(5, 4, 10);
        img.set(2, 3, 250);

        let png = dir.path().join("t.png");
        save_png(&png, &img).unwrap();
        assert_eq!(load_gray(&png).unwrap(), img);

        // Raw PGM (P5) written by hand.
        let pgm = dir.path().join("t.pgm");
        let mut bytes = b"P5\n5 4\n255\n".to_vec();
        bytes.extend_from_slice(img.pixels());
        std::fs::write(&pgm, bytes).unwrap();
        assert_eq!(load_gray(&pgm).unwrap(), img);

        // Raw PPM (P6): color converts through the integer luma.
        let ppm = dir.path().join("t.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&ppm, bytes).unwrap();
        let got = load_gray(&ppm).unwrap();
        assert_eq!(got.get(0, 0), ((77u32 * 255) >> 8) as u8);
        assert_eq!(got.get(1, 0), ((29u32 * 255) >> 8) as u8);
    }
}
