//! Image rasters, file codecs, resampling and training augmentations.
//!
//! Everything in the crate moves images around as [`ImageBuffer`]: an
//! `H×W×3` row-major, channel-interleaved raster of `f64` samples that are
//! nominally in `[0, 1]` and sRGB encoded.

mod augment;
mod codec;

pub use augment::{augment, Augmentation, Rotation};
pub use codec::{load_image, save_image, save_image_with_depth, BitDepth};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Wraps interleaved RGB samples. `data.len()` must be `height * width * 3`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp();
        self
    }
}

/// Bilinear resampling with half-pixel-centered coordinates.
///
/// Output pixel `(i, j)` samples the source at
/// `((i + 0.5) * H / out_h - 0.5, (j + 0.5) * W / out_w - 0.5)`, clamped to
/// the source extent.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, img.height);
    let cols = taps(out_w, img.width);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let a = img.pixel(y0, x0);
            let b = img.pixel(y0, x1);
            let c = img.pixel(y1, x0);
            let d = img.pixel(y1, x1);
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    ImageBuffer::from_vec(out_h, out_w, data)
}

/// Copies the `h×w` rectangle whose top-left corner is `(top, left)`.
pub fn crop(img: &ImageBuffer, top: usize, left: usize, h: usize, w: usize) -> Result<ImageBuffer> {
    if h == 0 || w == 0 || top + h > img.height || left + w > img.width {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} at ({top}, {left}) does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in top..top + h {
        let start = (y * img.width + left) * 3;
        data.extend_from_slice(&img.data[start..start + w * 3]);
    }
    ImageBuffer::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(ImageBuffer::from_vec(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = random_image(7, 5, 1);
        let out = resize_bilinear(&img, 7, 5).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_checkerboard_to_single_pixel_averages() {
        let img = ImageBuffer::from_vec(
            2,
            2,
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let out = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(out.pixel(0, 0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageBuffer::filled(9, 13, [0.25, 0.5, 0.75]);
        for (h, w) in [(1, 1), (4, 4), (20, 3), (64, 64)] {
            let out = resize_bilinear(&img, h, w).unwrap();
            for p in out.pixels() {
                for (v, e) in p.iter().zip([0.25, 0.5, 0.75]) {
                    assert!((v - e).abs() < 1e-12);
                }
            }
        }
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn crop_full_image_is_identity() {
        let img = random_image(6, 4, 2);
        assert_eq!(crop(&img, 0, 0, 6, 4).unwrap(), img);
    }

    #[test]
    fn crop_single_pixel() {
        let img = random_image(6, 4, 3);
        let c = crop(&img, 5, 2, 1, 1).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(5, 2));
    }

    #[test]
    fn crop_matches_index_arithmetic() {
        let img = random_image(17, 11, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = rng.gen_range(1..=17);
            let w = rng.gen_range(1..=11);
            let top = rng.gen_range(0..=17 - h);
            let left = rng.gen_range(0..=11 - w);
            let c = crop(&img, top, left, h, w).unwrap();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let expect = img.data()[((top + y) * 11 + left + x) * 3 + ch];
                        assert_eq!(c.data()[(y * w + x) * 3 + ch], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let img = random_image(4, 4, 6);
        assert!(crop(&img, 3, 0, 2, 1).is_err());
        assert!(crop(&img, 0, 0, 0, 1).is_err());
    }
}
