//! Case-level augmentation and input normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance of flipping all views of a case together.
    pub hflip_prob: f64,
    /// Chance, per view, of zeroing one rectangle.
    pub erase_prob: f64,
    /// Bounds of the erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub normalize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            erase_prob: 0.25,
            erase_area: (0.02, 0.20),
            normalize: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            erase_prob: 0.0,
            ..Default::default()
        }
    }
}

/// Pixel statistics of a training fold on the `[0, 1]` scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };

    /// Mean and standard deviation of all pixels of all views, after scaling
    /// `[0, 255]` to `[0, 1]`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let (mut n, mut s, mut s2) = (0u64, 0.0f64, 0.0f64);
        for img in images {
            for &v in img.data() {
                let x = v as f64 / 255.0;
                n += 1;
                s += x;
                s2 += x * x;
            }
        }
        if n == 0 {
            return Err(Error::Data("no pixels to fit normalization on".into()));
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() < 1e-8 { 1.0 } else { var.sqrt() };
        Ok(Normalization { mean, std })
    }

    /// `(x / 255 - mean) / std`.
    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean as f32, self.std as f32);
        let mut out = img.clone();
        for v in out.data_mut() {
            *v = (*v / 255.0 - m) / s;
        }
        out
    }
}

/// Mirrors an `H x W x C` image left to right.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    let (src, dst) = (img.data(), out.data_mut());
    for y in 0..h {
        for x in 0..w {
            let a = (y * w + x) * c;
            let b = (y * w + (w - 1 - x)) * c;
            dst[b..b + c].copy_from_slice(&src[a..a + c]);
        }
    }
    out
}

/// Axis-aligned rectangle `(top, left, height, width)`.
pub type Rect = (usize, usize, usize, usize);

/// Draws an erasing rectangle whose area fraction lies within `area`.
pub fn sample_erase_rect(rng: &mut impl Rng, h: usize, w: usize, area: (f64, f64)) -> Option<Rect> {
    let total = (h * w) as f64;
    let ok = |eh: usize, ew: usize| {
        let f = (eh * ew) as f64 / total;
        eh >= 1 && ew >= 1 && eh <= h && ew <= w && f >= area.0 && f <= area.1
    };
    for _ in 0..10 {
        let target = rng.random_range(area.0..=area.1) * total;
        let log_ratio = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln());
        let ratio = log_ratio.exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if ok(eh, ew) {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    // smallest square that satisfies the bounds
    let side = (1..=h.min(w)).find(|&s| ok(s, s))?;
    Some((rng.random_range(0..=h - side), rng.random_range(0..=w - side), side, side))
}

pub fn erase(img: &mut Tensor<f32>, rect: Rect) {
    let (w, c) = (img.shape()[1], img.shape()[2]);
    let (top, left, eh, ew) = rect;
    let data = img.data_mut();
    for y in top..top + eh {
        let from = (y * w + left) * c;
        data[from..from + ew * c].fill(0.0);
    }
}

/// Flips all views together with `hflip_prob`, erases a rectangle in each
/// view independently with `erase_prob`, then normalizes.
pub fn augment(
    views: &[Tensor<f32>],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    norm: &Normalization,
) -> Vec<Tensor<f32>> {
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob.min(1.0));
    views
        .iter()
        .map(|v| {
            let mut img = if flip { hflip(v) } else { v.clone() };
            if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob.min(1.0)) {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                if let Some(r) = sample_erase_rect(rng, h, w, cfg.erase_area) {
                    erase(&mut img, r);
                }
            }
            if cfg.normalize {
                norm.apply(&img)
            } else {
                img
            }
        })
        .collect()
}

/// Normalization only, for evaluation.
pub fn prepare_eval(views: &[Tensor<f32>], cfg: &AugmentConfig, norm: &Normalization) -> Vec<Tensor<f32>> {
    if cfg.normalize {
        views.iter().map(|v| norm.apply(v)).collect()
    } else {
        views.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::registry::stream_rng;

    fn img(seed: usize) -> Tensor<f32> {
        Tensor::from_fn([6, 5, 3], |i| ((i * 31 + seed * 7) % 256) as f32).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let a = img(1);
        assert_ne!(hflip(&a), a);
        assert_eq!(hflip(&hflip(&a)), a);
    }

    #[test]
    fn no_op_draws_only_normalize() {
        let views = [img(1), img(2)];
        let norm = Normalization { mean: 0.5, std: 0.25 };
        let out = augment(&views, &mut stream_rng(0, "t"), &AugmentConfig::none(), &norm);
        for (o, v) in out.iter().zip(&views) {
            assert_eq!(o, &norm.apply(v));
        }
    }

    #[test]
    fn flip_hits_all_views_together() {
        let views = [img(1), img(2), img(3), img(4)];
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            erase_prob: 0.0,
            normalize: false,
            ..Default::default()
        };
        let out = augment(&views, &mut stream_rng(0, "t"), &cfg, &Normalization::IDENTITY);
        for (o, v) in out.iter().zip(&views) {
            assert_eq!(o, &hflip(v));
        }
    }

    #[test]
    fn erase_area_within_bounds() {
        let mut rng = stream_rng(9, "erase");
        for _ in 0..1000 {
            let (_, _, eh, ew) = sample_erase_rect(&mut rng, 64, 64, (0.02, 0.2)).unwrap();
            let f = (eh * ew) as f64 / 4096.0;
            assert!((0.02..=0.2).contains(&f), "{f}");
        }
    }

    #[test]
    fn normalization_fit() {
        let a = Tensor::new([1, 2, 1], vec![0.0, 255.0]).unwrap();
        let n = Normalization::fit([&a]).unwrap();
        assert!((n.mean - 0.5).abs() < 1e-12 && (n.std - 0.5).abs() < 1e-12);
        let c = Tensor::full([2, 2, 1], 7.0).unwrap();
        assert_eq!(Normalization::fit([&c]).unwrap().std, 1.0);
    }
}
