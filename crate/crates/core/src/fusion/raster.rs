use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use super::FusionError;

/// Channel-major RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Resamples to `side` x `side` with a triangle filter.
    pub fn from_rgb(img: &RgbImage, side: usize) -> Self {
        let resized = image::imageops::resize(img, side as u32, side as u32, FilterType::Triangle);
        let mut r = Raster::zeros(3, side, side);
        for (x, y, px) in resized.enumerate_pixels() {
            for c in 0..3 {
                r.data[(c * side + y as usize) * side + x as usize] = px[c] as f64 / 255.0;
            }
        }
        r
    }

    pub fn from_bytes(bytes: &[u8], side: usize) -> Result<Self, FusionError> {
        let img = image::load_from_memory(bytes).map_err(|e| FusionError::Image(e.to_string()))?;
        Ok(Self::from_rgb(&img.to_rgb8(), side))
    }

    /// Loads a file, returning the raster and the original (width, height).
    pub fn load(path: &Path, side: usize) -> Result<(Self, (u32, u32)), FusionError> {
        let img = image::open(path)
            .map_err(|e| FusionError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let dims = img.dimensions();
        Ok((Self::from_rgb(&img, side), dims))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_resamples_to_constant() {
        let img = RgbImage::from_pixel(40, 20, image::Rgb([255, 0, 51]));
        let r = Raster::from_rgb(&img, 8);
        assert_eq!((r.channels, r.height, r.width), (3, 8, 8));
        assert!(r.data[..64].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(r.data[64..128].iter().all(|&v| v == 0.0));
        assert!(r.data[128..].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn garbage_bytes_rejected() {
        assert!(Raster::from_bytes(b"not an image", 8).is_err());
    }
}
