//! RGB rasters with intensities in `[0, 1]`, plus the geometry and
//! augmentation primitives used by the training and ranking pipelines.
//!
//! Pixels are stored row-major and channel-interleaved (`r, g, b, r, g, b, ...`).
//! Every constructor and operation clamps into `[0, 1]`, so any `Image` value
//! observed outside this module satisfies the range invariant.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from interleaved RGB values; values are clamped.
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * CHANNELS,
                data.len()
            )));
        }
        for v in &mut data {
            *v = clamp01(*v);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        let rgb = rgb.map(clamp01);
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(clamp01));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|p| [p[0], p[1], p[2]])
    }

    /// Applies `f` to each pixel together with its coordinates; output is clamped.
    pub fn map_pixels(&self, mut f: impl FnMut(usize, usize, [f32; 3]) -> [f32; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, p) in self.data.chunks_exact(CHANNELS).enumerate() {
            let out = f(i % self.width, i / self.width, [p[0], p[1], p[2]]);
            data.extend(out.map(clamp01));
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Planar `[C, H, W]` copy, the layout consumed by the networks.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * CHANNELS];
        for (i, p) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = p[c];
            }
        }
        out
    }

    /// 8-bit interleaved RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::from_vec(width, height, data)
    }

    /// Max absolute per-channel difference; images must share dimensions.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[inline]
pub fn clamp01(v: f32) -> f32 {
    // NaN maps to 0 so a bad recipe can never leak non-finite pixels.
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_png(&bytes)
}

/// Writes a PNG, creating missing parent directories.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Decodes an 8-bit RGB PNG. Other color types and bit depths are rejected.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Decode(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Image::from_rgb8(info.width as usize, info.height as usize, &buf)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Decode(e.to_string()))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::Decode(e.to_string()))?;
        writer.finish().map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &Image, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension {
            width: w,
            height: h,
        });
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f32 / w as f32;
    let sy = img.height as f32 / h as f32;
    let xs: Vec<(usize, usize, f32)> = (0..w).map(|x| taps(x, sx, img.width)).collect();
    let ys: Vec<(usize, usize, f32)> = (0..h).map(|y| taps(y, sy, img.height)).collect();
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..CHANNELS {
                let top = p00[c] + (p10[c] - p00[c]) * fx;
                let bottom = p01[c] + (p11[c] - p01[c]) * fx;
                data.push(clamp01(top + (bottom - top) * fy));
            }
        }
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

fn taps(dst: usize, scale: f32, src_len: usize) -> (usize, usize, f32) {
    let max = (src_len - 1) as f32;
    let s = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, max);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f32)
}

/// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
pub fn crop(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension {
            width: w,
            height: h,
        });
    }
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::CropLargerThanImage {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * CHANNELS;
        data.extend_from_slice(&img.data[start..start + w * CHANNELS]);
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

/// Crop with offsets drawn uniformly from `[0, W - w] x [0, H - h]`.
pub fn random_crop(img: &Image, w: usize, h: usize, rng: &mut Rng) -> Result<Image> {
    let (x0, y0) = random_crop_offsets(img, w, h, rng)?;
    crop(img, x0, y0, w, h)
}

pub fn random_crop_offsets(
    img: &Image,
    w: usize,
    h: usize,
    rng: &mut Rng,
) -> Result<(usize, usize)> {
    if w > img.width || h > img.height {
        return Err(Error::CropLargerThanImage {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    let x0 = rng.below_incl(img.width - w);
    let y0 = rng.below_incl(img.height - h);
    Ok((x0, y0))
}

/// Test-time crop: the window is centered, rounding the offset down.
pub fn center_crop(img: &Image, w: usize, h: usize) -> Result<Image> {
    if w > img.width || h > img.height {
        return Err(Error::CropLargerThanImage {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    crop(img, (img.width - w) / 2, (img.height - h) / 2, w, h)
}

pub fn hflip(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let i = (y * img.width + x) * CHANNELS;
            data.extend_from_slice(&img.data[i..i + CHANNELS]);
        }
    }
    Image {
        width: img.width,
        height: img.height,
        data,
    }
}
