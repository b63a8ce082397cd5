//! Synthetic four-view cases whose labels live in cross-view relations.
//!
//! Each view shows a breast silhouette against the chest wall (left views
//! on the left edge, right views mirrored) over textured noise. A finding
//! is a bright Gaussian blob placed at breast coordinates `(u, v)`: depth
//! from the chest wall and height, both as image fractions.
//!
//! * `presence`: positives have a blob in one breast's CC and MLO views;
//!   negatives have none.
//! * `asymmetry`: negatives have matching blobs in both breasts; positives
//!   in one breast only.
//! * `correspondence`: negatives show a finding in the CC and MLO views of
//!   the same breast. Half of the positives show it in one view only; the
//!   other half show a CC blob in one breast and an MLO blob in the other.
//!   Blob counts separate the single-view positives, but the cross-breast
//!   ones differ from negatives only in which views hold the blobs, so they
//!   need the views compared jointly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::image::{save_png_gray8, to_model_input_channels, RawImage};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::nn::registry::stream_rng;
use crate::vision::View;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Presence,
    Asymmetry,
    Correspondence,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "presence" => Some(Task::Presence),
            "asymmetry" => Some(Task::Asymmetry),
            "correspondence" => Some(Task::Correspondence),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n_cases: usize,
    pub image_size: usize,
    /// Blob standard deviation range in pixels at 64 px; scaled with size.
    pub blob_radius: (f64, f64),
    pub blob_amplitude: f64,
    /// Per-pixel noise standard deviation in gray levels.
    pub noise: f64,
    /// Fraction of positive cases.
    pub balance: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::Presence,
            n_cases: 64,
            image_size: 64,
            blob_radius: (2.5, 4.0),
            blob_amplitude: 80.0,
            noise: 8.0,
            balance: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 || self.image_size < 8 {
            return Err(Error::Config(format!(
                "synthetic: need n_cases > 0 and image_size >= 8, got {} and {}",
                self.n_cases, self.image_size
            )));
        }
        if !(self.balance > 0.0 && self.balance < 1.0) {
            return Err(Error::Config(format!(
                "synthetic: balance must lie in (0, 1), got {}",
                self.balance
            )));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("synthetic: bad blob radius range ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.n_cases as f64 * self.balance).round() as usize
    }
}

/// One generated case: 8-bit views in `View::ALL` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub label: usize,
    pub views: Vec<RawImage>,
}

impl SynthCase {
    pub fn view(&self, v: View) -> &RawImage {
        &self.views[View::ALL.iter().position(|&x| x == v).unwrap_or(0)]
    }
}

const U_RANGE: (f64, f64) = (0.15, 0.55);
const V_RANGE: (f64, f64) = (0.30, 0.70);

#[derive(Clone, Copy, Debug)]
struct Blob {
    u: f64,
    v: f64,
    radius: f64,
}

fn render_view(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, right: bool, blob: Option<Blob>) -> RawImage {
    let n = spec.image_size;
    let s = n as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / s,
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(4.0..10.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // breast coordinates measured from the chest wall
            let xd = if right { (n - 1 - x) as f64 } else { x as f64 };
            let (fx, fy) = ((xd + 0.5) / s, (y as f64 + 0.5) / s);
            let inside = (fx / 0.75).powi(2) + ((fy - 0.5) / 0.45).powi(2) <= 1.0;
            let mut val = 20.0;
            if inside {
                val += 90.0;
                for &(kx, ky, ph, amp) in &waves {
                    val += amp * (kx * x as f64 + ky * y as f64 + ph).sin();
                }
            }
            if let Some(b) = blob {
                let r = b.radius * s / 64.0;
                let d2 = (xd + 0.5 - b.u * s).powi(2) + (y as f64 + 0.5 - b.v * s).powi(2);
                val += spec.blob_amplitude * (-d2 / (2.0 * r * r)).exp();
            }
            let z: f64 = rng.sample(StandardNormal);
            val += spec.noise * z;
            out.push(val.round().clamp(0.0, 255.0) as u16);
        }
    }
    RawImage {
        width: n,
        height: n,
        bit_depth: 8,
        samples: out,
    }
}

fn sample_blob(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Blob {
    Blob {
        u: rng.random_range(U_RANGE.0..U_RANGE.1),
        v: rng.random_range(V_RANGE.0..V_RANGE.1),
        radius: rng.random_range(spec.blob_radius.0..=spec.blob_radius.1),
    }
}

/// Labels with exactly `round(n * balance)` positives, in seeded order.
pub fn synthetic_labels(spec: &SyntheticSpec) -> Vec<usize> {
    let mut labels = vec![0usize; spec.n_cases];
    labels[..spec.positives()].fill(1);
    labels.shuffle(&mut stream_rng(spec.seed, "synthetic/labels"));
    labels
}

/// Blobs per view in `View::ALL` order.
fn blob_layout(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, label: usize) -> [Option<Blob>; 4] {
    let side_right = rng.random_bool(0.5);
    let blob = sample_blob(rng, spec);
    let mut blobs: [Option<Blob>; 4] = [None; 4];
    let (cc, mlo) = if side_right { (1, 3) } else { (0, 2) };
    let (other_cc, other_mlo) = if side_right { (0, 2) } else { (1, 3) };
    match (spec.task, label) {
        (Task::Presence, 0) => {}
        (Task::Presence, _) => {
            blobs[cc] = Some(blob);
            blobs[mlo] = Some(blob);
        }
        (Task::Asymmetry, l) => {
            blobs[cc] = Some(blob);
            blobs[mlo] = Some(blob);
            if l == 0 {
                blobs[other_cc] = Some(blob);
                blobs[other_mlo] = Some(blob);
            }
        }
        (Task::Correspondence, 0) => {
            blobs[cc] = Some(blob);
            blobs[mlo] = Some(blob);
        }
        (Task::Correspondence, _) => {
            if rng.random_bool(0.5) {
                blobs[if rng.random_bool(0.5) { cc } else { mlo }] = Some(blob);
            } else {
                blobs[cc] = Some(blob);
                blobs[other_mlo] = Some(blob);
            }
        }
    }
    blobs
}

/// Generates case `index` with `label`; depends only on `(seed, index)`.
pub fn generate_case(spec: &SyntheticSpec, index: usize, label: usize) -> SynthCase {
    let mut rng = stream_rng(spec.seed, &format!("synthetic/case/{index}"));
    let blobs = blob_layout(&mut rng, spec, label);
    let views = View::ALL
        .iter()
        .zip(blobs)
        .map(|(v, b)| render_view(&mut rng, spec, v.is_right(), b))
        .collect();
    SynthCase {
        id: format!("case{index:04}"),
        label,
        views,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    Ok(synthetic_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, l)| generate_case(spec, i, l))
        .collect())
}

/// Writes `images/<case>_<VIEW>.png` and `manifest.csv` under `dir`;
/// returns the manifest path.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let cases = generate_synthetic(spec)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["case_id", "view", "path", "label"])?;
    for c in &cases {
        for (v, img) in View::ALL.iter().zip(&c.views) {
            let rel = format!("images/{}_{}.png", c.id, v);
            let bytes: Vec<u8> = img.samples.iter().map(|&s| s as u8).collect();
            save_png_gray8(&dir.join(&rel), img.width, img.height, &bytes)?;
            w.write_record([c.id.as_str(), v.name(), rel.as_str(), &c.label.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Preprocessed in-memory cases restricted to `views`; identical to writing
/// the files and loading them through the manifest.
pub fn synthetic_cases(spec: &SyntheticSpec, views: &[View], size: usize, channels: usize) -> Result<Vec<Case>> {
    generate_synthetic(spec)?
        .into_iter()
        .map(|c| {
            let images = views
                .iter()
                .map(|&v| to_model_input_channels(c.view(v), size, channels))
                .collect::<Result<_>>()?;
            Ok(Case {
                id: c.id,
                label: c.label,
                images,
            })
        })
        .collect()
}
