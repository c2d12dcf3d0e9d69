//! Dataset ingestion, PNG decoding, random cropping and colour conversion.

mod color;
mod corpus;

pub use color::{rgb_to_yuv, rgb_to_yuv_image, yuv_grad_to_rgb, yuv_to_rgb, YuvImage};
pub use corpus::{load_corpus, CorpusManifest, Split};

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image must have exactly 3 channels, got {0}")]
    ChannelCount(usize),
    #[error("pixel value {value} at index {index} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("image too small: {height}x{width} cannot hold a {size}x{size} crop")]
    TooSmall { height: usize, width: usize, size: usize },
    #[error("empty corpus at {0}")]
    EmptyCorpus(String),
    #[error("corpus directory {0} does not exist")]
    MissingDirectory(String),
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Float RGB images in `[0, 1]`, laid out as (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
    bit_depth_src: u8,
}

impl ImageBatch {
    /// Validates channel count and value range.
    pub fn new(data: Array4<f64>) -> Result<Self, ImageError> {
        let channels = data.len_of(Axis(1));
        if channels != 3 {
            return Err(ImageError::ChannelCount(channels));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { data, bit_depth_src: 8 })
    }

    /// Builds a batch from values that may leave `[0, 1]`, clamping them.
    pub fn from_clamped(mut data: Array4<f64>) -> Result<Self, ImageError> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn single(image: Array3<f64>) -> Result<Self, ImageError> {
        Self::new(image.insert_axis(Axis(0)))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array4::zeros((1, 3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[0, c, y as usize, x as usize]] = f64::from(px[c]) / 255.0;
            }
        }
        Self { data, bit_depth_src: 8 }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes batch element `index` as an 8-bit PNG (round to nearest).
    pub fn save_png(&self, index: usize, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let img = self.to_rgb8(index);
        img.save(path.as_ref()).map_err(|source| ImageError::Decode {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn to_rgb8(&self, index: usize) -> image::RgbImage {
        let view = self.image(index);
        let (h, w) = (view.shape()[1], view.shape()[2]);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (view[[c, y as usize, x as usize]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn bit_depth_src(&self) -> u8 {
        self.bit_depth_src
    }

    pub fn batch_size(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(3))
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), index)
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        self.data.shape() == other.data.shape()
    }
}

/// Valid top-left offsets of a `size`x`size` crop are `[0, h - size] x [0, w - size]`.
pub fn crop_offsets(height: usize, width: usize, size: usize, seed: u64) -> Result<(usize, usize), ImageError> {
    if height < size || width < size {
        return Err(ImageError::TooSmall { height, width, size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=height - size);
    let left = rng.random_range(0..=width - size);
    Ok((top, left))
}

/// Crops every batch element at the same seeded offset.
pub fn random_crop(img: &ImageBatch, size: usize, seed: u64) -> Result<ImageBatch, ImageError> {
    let (top, left) = crop_offsets(img.height(), img.width(), size, seed)?;
    let data = img.data.slice(s![.., .., top..top + size, left..left + size]).to_owned();
    Ok(ImageBatch {
        data,
        bit_depth_src: img.bit_depth_src,
    })
}

/// Centre crop to `height` x `width`.
pub fn center_crop(img: &ImageBatch, height: usize, width: usize) -> Result<ImageBatch, ImageError> {
    if img.height() < height || img.width() < width {
        return Err(ImageError::TooSmall {
            height: img.height(),
            width: img.width(),
            size: height.max(width),
        });
    }
    let top = (img.height() - height) / 2;
    let left = (img.width() - width) / 2;
    let data = img.data.slice(s![.., .., top..top + height, left..left + width]).to_owned();
    Ok(ImageBatch {
        data,
        bit_depth_src: img.bit_depth_src,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBatch {
        let data = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
        ImageBatch::new(data).unwrap()
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let data = Array4::zeros((1, 4, 8, 8));
        assert!(matches!(ImageBatch::new(data), Err(ImageError::ChannelCount(4))));
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array4::zeros((1, 3, 8, 8));
        data[[0, 1, 2, 3]] = 1.5;
        assert!(matches!(ImageBatch::new(data), Err(ImageError::OutOfRange { .. })));
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = ramp(256, 256);
        let out = random_crop(&img, 256, 99).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let img = ramp(512, 512);
        let a = random_crop(&img, 256, 7).unwrap();
        let b = random_crop(&img, 256, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (256, 256));
    }

    #[test]
    fn crop_offsets_stay_in_valid_range() {
        // 300x400 with a 256 crop: rows 0..=44, columns 0..=144.
        let mut seen_top = 0;
        let mut seen_left = 0;
        for seed in 0..500 {
            let (top, left) = crop_offsets(300, 400, 256, seed).unwrap();
            assert!(top <= 44 && left <= 144);
            seen_top = seen_top.max(top);
            seen_left = seen_left.max(left);
        }
        assert!(seen_top > 30 && seen_left > 100);
    }

    #[test]
    fn crop_too_small_errors() {
        let img = ramp(200, 300);
        assert!(matches!(random_crop(&img, 256, 0), Err(ImageError::TooSmall { .. })));
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(20, 30);
        let path = dir.path().join("x.png");
        img.save_png(0, &path).unwrap();
        let back = ImageBatch::open(&path).unwrap();
        let max_err = (&back.data - &img.data).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(max_err < 1e-12);
    }
}
