use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, LumaA, Rgb, Rgba};

use crate::error::{Error, Result};

/// Multi-channel raster with samples stored row-major as `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::from_data(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Size(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Image with every pixel set to `value` (one entry per channel).
    pub fn filled(width: usize, height: usize, value: &[f32]) -> Result<Self> {
        let channels = value.len();
        let data = value.iter().copied().cycle().take(width * height * channels).collect();
        Self::from_data(width, height, channels, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_data(width, height, channels, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear sample at a continuous position, coordinates clamped to the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f32]) {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (xc - x0 as f64) as f32;
        let fy = (yc - y0 as f64) as f32;
        let (p00, p10) = (self.pixel(x0, y0), self.pixel(x1, y0));
        let (p01, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
        for c in 0..self.channels {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bottom * fy;
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Size(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self::from_data(width, height, self.channels, data)
    }

    /// Bilinear resample of the rectangle `[x0, x0+w) x [y0, y0+h)` onto a
    /// `out_w x out_h` grid, pixel centers aligned.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        w: f64,
        h: f64,
        out_w: usize,
        out_h: usize,
    ) -> Result<Self> {
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let mut out = Self::new(out_w, out_h, self.channels)?;
        let mut px = vec![0.0; self.channels];
        for y in 0..out_h {
            for x in 0..out_w {
                let src_x = x0 + (x as f64 + 0.5) * sx - 0.5;
                let src_y = y0 + (y as f64 + 0.5) * sy - 0.5;
                self.sample_bilinear(src_x, src_y, &mut px);
                out.pixel_mut(x, y).copy_from_slice(&px);
            }
        }
        Ok(out)
    }

    /// Antialiased resize (triangle filter widened when shrinking).
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("cannot resize to {width}x{height}")));
        }
        let rgba = self.to_rgba();
        let buf: ImageBuffer<Rgba<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, rgba)
                .expect("buffer length matches dimensions");
        let resized = image::imageops::resize(
            &buf,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        self.with_rgba(width, height, resized.into_raw())
    }

    /// Gaussian blur with standard deviation `sigma` pixels.
    pub fn blur(&self, sigma: f32) -> Result<Self> {
        if !(sigma > 0.0) {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgba<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgba())
                .expect("buffer length matches dimensions");
        let rgba = image::imageops::blur(&buf, sigma).into_raw();
        self.with_rgba(self.width, self.height, rgba)
    }

    /// Image with this image's channel layout built from RGBA samples.
    fn with_rgba(&self, width: usize, height: usize, rgba: Vec<f32>) -> Result<Self> {
        let data = match self.channels {
            1 => rgba.chunks_exact(4).map(|p| p[0]).collect(),
            3 => rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            _ => rgba,
        };
        Self::from_data(width, height, self.channels, data)
    }

    fn to_rgba(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for px in self.data.chunks_exact(self.channels) {
            match self.channels {
                1 => out.extend_from_slice(&[px[0], px[0], px[0], 1.0]),
                3 => out.extend_from_slice(&[px[0], px[1], px[2], 1.0]),
                _ => out.extend_from_slice(px),
            }
        }
        out
    }

    /// Rec. 601 luma per pixel; single-channel images return their samples.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| match self.channels {
                1 => px[0],
                _ => luma601(px[0], px[1], px[2]),
            })
            .collect()
    }

    /// RGB view of this image (gray replicated, alpha dropped).
    pub fn to_rgb(&self) -> Self {
        let data = self
            .data
            .chunks_exact(self.channels)
            .flat_map(|px| match self.channels {
                1 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            })
            .collect();
        Self { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn from_luma(width: usize, height: usize, luma: Vec<f32>) -> Result<Self> {
        Self::from_data(width, height, 1, luma)
    }
}

#[inline]
pub fn luma601(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Decodes a raster file; samples are normalized to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(decoded)
}

pub(crate) fn from_dynamic(img: DynamicImage) -> Result<RasterImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, data) = if color.has_color() {
        if color.has_alpha() {
            (4, img.to_rgba32f().into_raw())
        } else {
            (3, img.to_rgb32f().into_raw())
        }
    } else if color.has_alpha() {
        let la = img.to_luma_alpha32f();
        let data = la.pixels().flat_map(|LumaA([l, a])| [*l, *l, *l, *a]).collect();
        (4, data)
    } else {
        (1, img.to_luma32f().into_raw())
    };
    RasterImage::from_data(w, h, channels, data)
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (1, 3 or 4 channels).
pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let dynamic = match img.channels {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).unwrap()),
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).unwrap()),
        _ => DynamicImage::ImageRgba8(ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, bytes).unwrap()),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    dynamic
        .write_to(&mut writer, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_png_decodes_to_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        let img = image::RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]));
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!((loaded.width(), loaded.height(), loaded.channels()), (2, 2, 3));
        assert!(loaded.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gray_128_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::from_pixel(1, 1, Luma([128])).save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.channels(), 1);
        assert!((loaded.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        image::RgbImage::from_pixel(8, 8, Rgb([10, 20, 30])).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn ramp_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::from_fn(4, 4, 3, |x, y, c| (x + 4 * y) as f32 / 15.0 * (c + 1) as f32 / 3.0)
            .unwrap();
        let path = dir.path().join("ramp.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let max = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max <= 1.0 / 255.0, "max diff {max}");
    }

    #[test]
    fn single_pixel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::filled(1, 1, &[0.3]).unwrap();
        let path = dir.path().join("one.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!((back.get(0, 0, 0) - 0.3).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn save_into_missing_directory_is_io_error() {
        let img = RasterImage::filled(1, 1, &[0.3]).unwrap();
        let err = save_image(&img, "/nonexistent-dir/sub/out.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn zero_size_rejected() {
        assert!(RasterImage::new(0, 4, 3).is_err());
    }
}
