//! Grayscale images: 5x5 averaging, rescaling, resizing and file IO.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale samples in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 8 or 16 (12-bit data is stored in 16-bit containers).
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, samples: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image dimensions {width}x{height} must be positive")));
        }
        if samples.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::Data(format!("unsupported bit depth {bit_depth}")));
        }
        Ok(RawImage {
            width,
            height,
            bit_depth,
            samples,
        })
    }

    pub fn from_u8(width: usize, height: usize, samples: &[u8]) -> Result<Self> {
        Self::new(width, height, 8, samples.iter().map(|&v| v as u16).collect())
    }

    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }
}

/// Averages non-overlapping 5x5 windows. Output extents are `ceil(n / 5)`;
/// edge cells average the pixels their partial window covers. Means are
/// rounded to the nearest integer, halves up.
pub fn avg_pool_5x5(raw: &RawImage) -> RawImage {
    const K: usize = 5;
    let ow = raw.width.div_ceil(K);
    let oh = raw.height.div_ceil(K);
    let mut out = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        let ys = oy * K..((oy + 1) * K).min(raw.height);
        for ox in 0..ow {
            let xs = ox * K..((ox + 1) * K).min(raw.width);
            let count = (ys.len() * xs.len()) as u64;
            let mut sum = 0u64;
            for y in ys.clone() {
                for x in xs.clone() {
                    sum += raw.at(x, y) as u64;
                }
            }
            out.push(((2 * sum + count) / (2 * count)) as u16);
        }
    }
    RawImage {
        width: ow,
        height: oh,
        bit_depth: raw.bit_depth,
        samples: out,
    }
}

/// Linear min-max rescale to `[0, 255]`. A flat image maps to zeros.
pub fn rescale_to_255(raw: &RawImage) -> Vec<f32> {
    let lo = *raw.samples.iter().min().unwrap_or(&0) as f64;
    let hi = *raw.samples.iter().max().unwrap_or(&0) as f64;
    if hi <= lo {
        log::warn!("image has no dynamic range; using zeros");
        return vec![0.0; raw.samples.len()];
    }
    let scale = 255.0 / (hi - lo);
    raw.samples
        .iter()
        .map(|&v| ((v as f64 - lo) * scale) as f32)
        .collect()
}

/// Bilinear resize with pixel-centre alignment and clamped borders. A
/// same-size resize returns the input unchanged.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    if (w, h) == (ow, oh) {
        return src.to_vec();
    }
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let coord = |o: usize, s: f64, n: usize| {
        let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, sx, w);
            let p = |x: usize, y: usize| src[y * w + x] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Rescale to `[0, 255]`, resize to `size x size`, replicate into three
/// identical channels: `[size, size, 3]`.
pub fn to_model_input(raw: &RawImage, size: usize) -> Result<Tensor<f32>> {
    to_model_input_channels(raw, size, 3)
}

pub fn to_model_input_channels(raw: &RawImage, size: usize, channels: usize) -> Result<Tensor<f32>> {
    let scaled = rescale_to_255(raw);
    let resized = resize_bilinear(&scaled, raw.width, raw.height, size, size);
    let mut data = Vec::with_capacity(size * size * channels);
    for v in resized {
        let v = v.clamp(0.0, 255.0);
        data.extend(std::iter::repeat_n(v, channels));
    }
    Ok(Tensor::new([size, size, channels], data)?)
}

/// Reads a PNG or binary PGM as grayscale, keeping 16-bit depth.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::DynamicImage as D;
    match img {
        D::ImageLuma16(b) => RawImage::new(w, h, 16, b.into_raw()),
        D::ImageLuma8(b) => RawImage::from_u8(w, h, b.as_raw()),
        other if other.color().bytes_per_pixel() as usize > other.color().channel_count() as usize => {
            RawImage::new(w, h, 16, other.to_luma16().into_raw())
        }
        other => RawImage::from_u8(w, h, other.to_luma8().as_raw()),
    }
    .map_err(|e| err(e.to_string()))
}

/// Writes an 8-bit grayscale PNG.
pub fn save_png_gray8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, samples.to_vec()).ok_or_else(|| {
        Error::Image {
            path: path.to_path_buf(),
            msg: "sample count does not match dimensions".into(),
        }
    })?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: usize, h: usize, v: u16) -> RawImage {
        RawImage::new(w, h, 16, vec![v; w * h]).unwrap()
    }

    #[test]
    fn pooled_sizes_match_published_resolutions() {
        let a = avg_pool_5x5(&blank(2558, 3327, 100));
        assert_eq!((a.width, a.height), (512, 666));
        let b = avg_pool_5x5(&blank(3327, 4091, 100));
        assert_eq!((b.width, b.height), (666, 819));
        assert!(b.samples.iter().all(|&v| v == 100));
    }

    #[test]
    fn partial_windows_average_what_they_cover() {
        // 6 wide: second column window holds one pixel per row
        let mut s = vec![0u16; 6];
        s[5] = 9;
        let p = avg_pool_5x5(&RawImage::new(6, 1, 8, s).unwrap());
        assert_eq!(p.samples, [0, 9]);
        let p = avg_pool_5x5(&RawImage::new(2, 1, 8, vec![1, 2]).unwrap());
        assert_eq!(p.samples, [2]); // 1.5 rounds up
    }

    #[test]
    fn twelve_bit_maximum_maps_to_255() {
        let r = RawImage::new(2, 1, 16, vec![0, 4095]).unwrap();
        assert_eq!(rescale_to_255(&r), [0.0, 255.0]);
        assert_eq!(rescale_to_255(&blank(3, 3, 7)), vec![0.0; 9]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f32> = (0..224 * 224).map(|i| (i % 251) as f32).collect();
        assert_eq!(resize_bilinear(&src, 224, 224, 224, 224), src);
    }

    #[test]
    fn resize_constant_and_upsample_midpoint() {
        let up = resize_bilinear(&[0.0, 100.0], 2, 1, 4, 1);
        assert_eq!(up, [0.0, 25.0, 75.0, 100.0]);
        let c = resize_bilinear(&[5.0; 12], 4, 3, 7, 9);
        assert!(c.iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn model_input_has_identical_channels() {
        let r = RawImage::new(30, 20, 16, (0..600).map(|i| (i * 7 % 4096) as u16).collect()).unwrap();
        let t = to_model_input(&r, 224).unwrap();
        assert_eq!(t.shape(), [224, 224, 3]);
        for px in t.data().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
            assert!((0.0..=255.0).contains(&px[0]));
        }
    }
}
