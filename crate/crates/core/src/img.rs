//! In-memory RGB images and the bilinear crop/resize the tracker feeds its
//! networks from.
//!
//! Coordinate convention: pixel `(ix, iy)` occupies the continuous unit
//! square `[ix, ix+1) × [iy, iy+1)`, so its center sits at
//! `(ix + 0.5, iy + 0.5)` and an image spans `[0, w) × [0, h)`. Bounding
//! boxes live in the same continuous frame, which keeps synthetic ground
//! truth exact: a patch pasted at integer corner `(x, y)` with integer size
//! `(w, h)` is exactly the box with that corner and size.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ImageIoError {
    Io { path: String, detail: String },
    Codec { path: String, detail: String },
}

impl fmt::Display for ImageIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageIoError::Io { path, detail } => write!(f, "io error on {path}: {detail}"),
            ImageIoError::Codec { path, detail } => write!(f, "cannot decode/encode {path}: {detail}"),
        }
    }
}

impl std::error::Error for ImageIoError {}

/// Interleaved RGB, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3, "image data length");
        Image { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at a continuous point; everything outside the image
    /// reads as zero (black padding).
    pub fn sample_bilinear(&self, x: f32, y: f32) -> [f32; 3] {
        // Shift into pixel-center space: pixel i has its center at i + 0.5.
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);

        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            if yy < 0 || yy >= self.h as isize {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 + dx;
                if xx < 0 || xx >= self.w as isize {
                    continue;
                }
                let p = self.pixel(yy as usize, xx as usize);
                let w = wy * wx;
                out[0] += w * p[0];
                out[1] += w * p[1];
                out[2] += w * p[2];
            }
        }
        out
    }

    /// Crops the rectangle centered at `(cx, cy)` with extents
    /// `(rect_w, rect_h)` and resizes it to `out_w × out_h`. Out-of-image
    /// area is zero-filled.
    pub fn crop_resize(&self, cx: f32, cy: f32, rect_w: f32, rect_h: f32, out_h: usize, out_w: usize) -> Image {
        assert!(rect_w > 0.0 && rect_h > 0.0, "crop extent must be positive");
        let left = cx - rect_w / 2.0;
        let top = cy - rect_h / 2.0;
        let sx = rect_w / out_w as f32;
        let sy = rect_h / out_h as f32;
        let mut out = Image::new(out_h, out_w);
        for v in 0..out_h {
            let y = top + (v as f32 + 0.5) * sy;
            for u in 0..out_w {
                let x = left + (u as f32 + 0.5) * sx;
                out.set_pixel(v, u, self.sample_bilinear(x, y));
            }
        }
        out
    }

    /// Snaps every channel onto the 8-bit grid (`round(v·255)/255`) so a
    /// PNG round trip reproduces the image bit-exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }

    /// Encodes as 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| ImageIoError::Codec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Decodes a PNG or JPEG file into RGB with values in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Image, ImageIoError> {
        let decoded = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => ImageIoError::Io {
                path: path.display().to_string(),
                detail: io.to_string(),
            },
            other => ImageIoError::Codec {
                path: path.display().to_string(),
                detail: other.to_string(),
            },
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data: Vec<f32> = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Image::from_data(h, w, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = (y * w + x) as f32 / (h * w) as f32;
                img.set_pixel(y, x, [v, v * 0.5, 1.0 - v]);
            }
        }
        img
    }

    #[test]
    fn aligned_unit_scale_crop_copies_pixels() {
        let img = gradient_image(16, 16);
        // 8x8 crop centered at (8, 8): source pixel centers line up exactly.
        let crop = img.crop_resize(8.0, 8.0, 8.0, 8.0, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(crop.pixel(y, x), img.pixel(y + 4, x + 4));
            }
        }
    }

    #[test]
    fn sample_between_two_pixels_averages() {
        let mut img = Image::new(1, 2);
        img.set_pixel(0, 0, [0.0, 0.0, 0.0]);
        img.set_pixel(0, 1, [1.0, 1.0, 1.0]);
        // Halfway between the two pixel centers (0.5 and 1.5).
        let v = img.sample_bilinear(1.0, 0.5);
        assert!((v[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn outside_reads_zero() {
        let img = gradient_image(4, 4);
        assert_eq!(img.sample_bilinear(-3.0, 2.0), [0.0, 0.0, 0.0]);
        assert_eq!(img.sample_bilinear(2.0, 100.0), [0.0, 0.0, 0.0]);
        // A crop entirely outside the image is all zeros.
        let crop = img.crop_resize(-50.0, -50.0, 8.0, 8.0, 4, 4);
        assert!(crop.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_to_one_downscale_averages_blocks() {
        let mut img = Image::new(2, 2);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(0, 1, [0.0, 1.0, 0.0]);
        img.set_pixel(1, 0, [0.0, 0.0, 1.0]);
        img.set_pixel(1, 1, [1.0, 1.0, 1.0]);
        let small = img.crop_resize(1.0, 1.0, 2.0, 2.0, 1, 1);
        let p = small.pixel(0, 0);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] - 0.5).abs() < 1e-6);
        assert!((p[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn partial_overlap_mixes_with_zero_padding() {
        let mut img = Image::new(1, 1);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        // Sample a quarter-pixel outside: weights should shrink toward zero.
        let v = img.sample_bilinear(0.25, 0.5);
        assert!((v[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let mut img = gradient_image(9, 13);
        img.quantize_u8();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.height(), 9);
        assert_eq!(back.width(), 13);
        assert_eq!(back.data(), img.data());
        assert!(Image::load(&dir.path().join("missing.png")).is_err());
    }
}
