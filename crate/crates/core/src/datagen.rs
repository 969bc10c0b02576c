//! Procedural image datasets with a binary label and a planted binary confound.
//!
//! Each image is a dim background with a bright arc in its lower half. The
//! arc's curvature carries the label: a positive sample gets a "smile" (ends
//! raised), a negative one a "frown". The confound is a background tint: red
//! when `confound = 1`, blue when `confound = 0`. `P(confound = label)` is set
//! by [`DatasetSpec::confound_correlation`], which makes the tint a controllable
//! shortcut feature and lets [`confound_statistic`] score any image for it.

use std::path::Path;

use ndarray::{Array1, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, NpyArray};
use crate::error::{Error, Result};
use crate::seed;

pub const BACKGROUND_LEVEL: f64 = 0.25;
pub const TINT: f64 = 0.3;
pub const ARC_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        ImageShape::new(3, 32, 32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub image_shape: ImageShape,
    pub n_samples: usize,
    /// `P(confound = label)`.
    pub confound_correlation: f64,
    pub label_balance: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_shape: ImageShape::default(),
            n_samples: 4000,
            confound_correlation: 0.9,
            label_balance: 0.5,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.image_shape;
        if s.channels != 3 {
            return Err(Error::invalid("image_shape.channels", "must be 3 (RGB)"));
        }
        if s.height < 16 {
            return Err(Error::invalid("image_shape.height", format!("{} < 16", s.height)));
        }
        if s.width < 16 {
            return Err(Error::invalid("image_shape.width", format!("{} < 16", s.width)));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confound_correlation) {
            return Err(Error::invalid(
                "confound_correlation",
                format!("{} not in [0, 1]", self.confound_correlation),
            ));
        }
        if !(self.label_balance > 0.0 && self.label_balance < 1.0) {
            return Err(Error::invalid(
                "label_balance",
                format!("{} not in (0, 1)", self.label_balance),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", format!("{} is not >= 0", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    /// `[N, c, h, w]`, values in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<u8>,
    pub confounds: Vec<u8>,
    pub spec: DatasetSpec,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images flattened to `[N, c*h*w]`, the layout the networks consume.
    pub fn flat_images(&self) -> ArrayView2<'_, f64> {
        let n = self.images.len_of(Axis(0));
        self.images
            .view()
            .into_shape_with_order((n, self.spec.image_shape.len()))
            .expect("standard layout")
    }

    pub fn labels_f64(&self) -> Array1<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }

    /// Fraction of samples whose confound equals their label.
    pub fn agreement_rate(&self) -> f64 {
        let agree = self
            .labels
            .iter()
            .zip(&self.confounds)
            .filter(|(l, c)| l == c)
            .count();
        agree as f64 / self.len().max(1) as f64
    }

    /// Subset by sample index (in the given order).
    pub fn select(&self, idx: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            confounds: idx.iter().map(|&i| self.confounds[i]).collect(),
            spec: DatasetSpec {
                n_samples: idx.len(),
                ..self.spec.clone()
            },
        }
    }

    /// Writes `images.npy` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let shape = self.images.shape().to_vec();
        let data: Vec<f32> = self.images.iter().map(|&v| v as f32).collect();
        artifact::write_npy_f32(&dir.join("images.npy"), &NpyArray { shape, data })?;
        let meta = DatasetMeta {
            labels: self.labels.clone(),
            confounds: self.confounds.clone(),
            spec: self.spec.clone(),
        };
        artifact::write_json(&dir.join("meta.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = artifact::read_json(&dir.join("meta.json"))?;
        let npy = artifact::read_npy_f32(&dir.join("images.npy"))?;
        let s = meta.spec.image_shape;
        let n = meta.labels.len();
        if npy.shape != [n, s.channels, s.height, s.width] || meta.confounds.len() != n {
            return Err(Error::Artifact(format!(
                "dataset in {} has inconsistent shapes",
                dir.display()
            )));
        }
        let images = Array4::from_shape_vec(
            (n, s.channels, s.height, s.width),
            npy.data.into_iter().map(f64::from).collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(LabeledImageSet {
            images,
            labels: meta.labels,
            confounds: meta.confounds,
            spec: meta.spec,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    labels: Vec<u8>,
    confounds: Vec<u8>,
    spec: DatasetSpec,
}

#[derive(Debug, Clone)]
pub struct BiasSplitPair {
    pub split_a: LabeledImageSet,
    pub split_b: LabeledImageSet,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledImageSet> {
    spec.validate()?;
    let shape = spec.image_shape;
    let n = spec.n_samples;
    let mut rng = seed::stream(spec.seed, "datagen");

    let positives = (spec.label_balance * n as f64).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
    }
    let confounds: Vec<u8> = labels
        .iter()
        .map(|&l| {
            if rng.random::<f64>() < spec.confound_correlation {
                l
            } else {
                1 - l
            }
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Array4::<f64>::zeros((n, shape.channels, shape.height, shape.width));
    for (i, mut img) in images.outer_iter_mut().enumerate() {
        render_sample(&mut img, labels[i] == 1, confounds[i] == 1, &mut rng);
        if spec.noise_std > 0.0 {
            img.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        // f32-representable values so that a save/load round trip is exact
        img.mapv_inplace(|v| v.clamp(0.0, 1.0) as f32 as f64);
    }

    Ok(LabeledImageSet {
        images,
        labels,
        confounds,
        spec: spec.clone(),
    })
}

fn render_sample<R: Rng + ?Sized>(
    img: &mut ndarray::ArrayViewMut3<f64>,
    positive: bool,
    tinted_red: bool,
    rng: &mut R,
) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    img.fill(BACKGROUND_LEVEL);
    let tint_channel = if tinted_red { 0 } else { 2 };
    img.index_axis_mut(Axis(0), tint_channel)
        .mapv_inplace(|v| v + TINT);

    // arc geometry, jittered by up to +-2 px
    let cx = w as f64 / 2.0 + rng.random_range(-2.0..=2.0);
    let cy = h as f64 * 0.72 + rng.random_range(-2.0..=2.0);
    let half_thickness = (3.0 + rng.random_range(-2.0..=2.0_f64)).max(1.0) / 2.0;
    let half_span = w as f64 * 0.3;
    let depth = h as f64 * 0.12;
    // smile: ends raised (y grows downward); frown: ends lowered
    let sign = if positive { -1.0 } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / half_span;
            if dx.abs() > 1.0 {
                continue;
            }
            let curve_y = cy + sign * depth * (dx * dx - 0.5);
            if (y as f64 - curve_y).abs() <= half_thickness {
                for c in 0..img.shape()[0] {
                    img[[c, y, x]] = ARC_LEVEL;
                }
            }
        }
    }
}

pub fn make_bias_splits(spec: &DatasetSpec, rho_a: f64) -> Result<BiasSplitPair> {
    if !(0.0..=1.0).contains(&rho_a) {
        return Err(Error::invalid("confound_correlation", format!("{rho_a} not in [0, 1]")));
    }
    let (spec_a, spec_b) = bias_split_specs(spec, rho_a);
    Ok(BiasSplitPair {
        split_a: generate_dataset(&spec_a)?,
        split_b: generate_dataset(&spec_b)?,
    })
}

/// The two dataset specs of a bias split: correlations `rho_a` and `1 - rho_a`
/// with distinct derived seeds.
pub fn bias_split_specs(spec: &DatasetSpec, rho_a: f64) -> (DatasetSpec, DatasetSpec) {
    let a = DatasetSpec {
        confound_correlation: rho_a,
        seed: seed::derive_seed(spec.seed, "split_a"),
        ..spec.clone()
    };
    let b = DatasetSpec {
        confound_correlation: 1.0 - rho_a,
        seed: seed::derive_seed(spec.seed, "split_b"),
        ..spec.clone()
    };
    (a, b)
}

/// Confound statistic per image: mean red minus mean blue.
pub fn confound_statistic(images: ArrayView4<f64>) -> Result<Vec<f64>> {
    if images.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "confound statistic needs 3 channels, got {}",
            images.shape()[1]
        )));
    }
    Ok(images
        .outer_iter()
        .map(|img| {
            img.index_axis(Axis(0), 0).mean().unwrap_or(0.0)
                - img.index_axis(Axis(0), 2).mean().unwrap_or(0.0)
        })
        .collect())
}

/// [`confound_statistic`] on flattened `[N, 3*h*w]` images.
pub fn confound_statistic_flat(images: ArrayView2<f64>, shape: ImageShape) -> Result<Vec<f64>> {
    let n = images.nrows();
    let view = images
        .into_shape_with_order((n, shape.channels, shape.height, shape.width))
        .map_err(|e| Error::Shape(e.to_string()))?;
    confound_statistic(view)
}
