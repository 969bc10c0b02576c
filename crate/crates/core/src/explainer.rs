//! The explanatory generator `g`, which maps a (reconstructed) hidden
//! representation back to image space, and the factual/counterfactual
//! concept panels rendered with it.
//!
//! Training minimises pixel-averaged binary cross-entropy between `g(phi'(x))`
//! and `x` plus `lambda / max(I(g) . I(f_K), eps)`, where both information
//! vectors are estimated on the current minibatch. The head vector is
//! rescaled to unit sum before the dot product: a confident classifier has
//! head information orders of magnitude below the generator's, and the
//! rescaling keeps `lambda` meaningful across classifiers without changing
//! which direction the penalty pulls in.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::classifier::TrainedClassifier;
use crate::datagen::{confound_statistic_flat, ImageShape, LabeledImageSet};
use crate::dvae::TrainedDvae;
use crate::error::{Error, Result};
use crate::infotheory::{self, GaussianProbe, DOT_FLOOR};
use crate::intervention::{self, InterventionMask, Strategy};
use crate::nn::{self, Activation, Adam, ConvGeometry, LayerSpec, Network};
use crate::seed;

/// Pixel values are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvLayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_shape: ImageShape,
    /// Channels of the coarse feature map produced by the input projection.
    pub seed_channels: usize,
    pub deconv_layers: Vec<DeconvLayerConfig>,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probe used for the training-time penalty.
    pub info_probe: GaussianProbe,
    /// Minibatch rows used as probe centers for the penalty.
    pub probe_centers: usize,
    /// Probe and centers for the logged alignment diagnostic.
    pub diagnostic_probe: GaussianProbe,
    pub diagnostic_centers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let up = |c| DeconvLayerConfig {
            out_channels: c,
            kernel: 4,
            stride: 2,
        };
        GeneratorConfig {
            image_shape: ImageShape::default(),
            seed_channels: 32,
            deconv_layers: vec![up(16), up(8), up(3)],
            lambda: 0.3,
            epochs: 4,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
            info_probe: GaussianProbe {
                samples_per_coord: 8,
                seed: 0,
            },
            probe_centers: 1,
            diagnostic_probe: GaussianProbe {
                samples_per_coord: 16,
                seed: 0,
            },
            diagnostic_centers: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be a finite value >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.probe_centers == 0 || self.diagnostic_centers == 0 {
            return Err(Error::invalid("probe_centers", "need at least one probe center"));
        }
        self.info_probe.validate()?;
        self.diagnostic_probe.validate()?;
        if self.deconv_layers.last().map(|l| l.out_channels) != Some(self.image_shape.channels) {
            return Err(Error::invalid(
                "deconv_layers",
                "the last layer must emit the image's channel count",
            ));
        }
        self.start_size()?;
        Ok(())
    }

    /// Spatial size of the coarse map that the transposed convolutions grow
    /// into the image.
    fn start_size(&self) -> Result<(usize, usize)> {
        let mut scale = 1;
        for l in &self.deconv_layers {
            if l.out_channels == 0 || l.stride == 0 || l.kernel < l.stride || (l.kernel - l.stride) % 2 != 0 {
                return Err(Error::invalid(
                    "deconv_layers",
                    format!("{l:?}: kernel - stride must be a non-negative even number"),
                ));
            }
            scale *= l.stride;
        }
        let (h, w) = (self.image_shape.height, self.image_shape.width);
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::invalid(
                "deconv_layers",
                format!("total stride {scale} does not divide {h}x{w}"),
            ));
        }
        Ok((h / scale, w / scale))
    }

    /// Dense projection, then one transposed convolution per configured
    /// layer, ReLU between them and a sigmoid at the end.
    pub fn layer_specs(&self, repr_dim: usize) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let (mut h, mut w) = self.start_size()?;
        let mut c = self.seed_channels;
        let mut specs = vec![
            LayerSpec::Dense {
                inputs: repr_dim,
                outputs: c * h * w,
            },
            LayerSpec::Activation(Activation::Relu),
        ];
        for (i, l) in self.deconv_layers.iter().enumerate() {
            let g = ConvGeometry {
                channels_in: l.out_channels,
                channels_out: c,
                kernel: l.kernel,
                stride: l.stride,
                padding: (l.kernel - l.stride) / 2,
                height: h * l.stride,
                width: w * l.stride,
            };
            specs.push(LayerSpec::ConvTranspose2d(g));
            let last = i + 1 == self.deconv_layers.len();
            specs.push(LayerSpec::Activation(if last { Activation::Sigmoid } else { Activation::Relu }));
            (c, h, w) = (l.out_channels, g.height, g.width);
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    /// Mean excess cross-entropy over the epoch (see [`reconstruction_loss`]).
    pub recon: f64,
    /// Unweighted penalty `1 / max(I_g . I_f, eps)` on the diagnostic
    /// centers, with `I_f` rescaled to unit sum.
    pub penalty: f64,
    pub alignment: f64,
}

/// Pixel-averaged binary cross-entropy of `pred` against `target`, minus the
/// entropy of the targets themselves, so that a perfect reconstruction scores
/// zero even for grey-level targets. Returns the loss and its gradient with
/// respect to `pred`. The gradient is left unclamped so that, after the
/// generator's sigmoid, it becomes `pred - target` on the logit and saturated
/// outputs keep learning.
pub fn reconstruction_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let count = pred.len().max(1) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    for ((g, &p), &x) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let q = p.clamp(EPS, 1.0 - EPS);
        let t = x.clamp(EPS, 1.0 - EPS);
        total += x * (t / q).ln() + (1.0 - x) * ((1.0 - t) / (1.0 - q)).ln();
        *g = (p - x) / (p * (1.0 - p)).max(f64::MIN_POSITIVE) / count;
    }
    (total / count, grad)
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    net: Network,
    config: GeneratorConfig,
    initial_recon: f64,
    log: Vec<GeneratorEpoch>,
    classifier_checksum: String,
    dvae_checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorManifestExtra {
    config: GeneratorConfig,
    initial_recon: f64,
    log: Vec<GeneratorEpoch>,
    classifier_checksum: String,
    dvae_checksum: String,
}

impl TrainedGenerator {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn training_log(&self) -> &[GeneratorEpoch] {
        &self.log
    }

    /// Reconstruction loss over the training set before the first update.
    pub fn initial_recon(&self) -> f64 {
        self.initial_recon
    }

    pub fn image_shape(&self) -> ImageShape {
        self.config.image_shape
    }

    pub fn checksum(&self) -> String {
        self.net.checksum()
    }

    pub fn upstream_checksums(&self) -> (&str, &str) {
        (&self.classifier_checksum, &self.dvae_checksum)
    }

    /// Renders a batch of representations as flattened `[batch, c*h*w]` images.
    pub fn explain_batch(&self, reprs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if reprs.ncols() != self.net.input_dim() {
            return Err(Error::Shape(format!(
                "generator expects {}-d representations, got {}",
                self.net.input_dim(),
                reprs.ncols()
            )));
        }
        self.net.forward(reprs)
    }

    /// `g(repr)` as a `[c, h, w]` image.
    pub fn explain(&self, repr: ArrayView1<f64>) -> Result<ndarray::Array3<f64>> {
        let flat = self.explain_batch(repr.insert_axis(Axis(0)))?;
        let s = self.config.image_shape;
        flat.into_shape_with_order((s.channels, s.height, s.width))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = GeneratorManifestExtra {
            config: self.config.clone(),
            initial_recon: self.initial_recon,
            log: self.log.clone(),
            classifier_checksum: self.classifier_checksum.clone(),
            dvae_checksum: self.dvae_checksum.clone(),
        };
        artifact::save_model(dir, "generator", &[("g", &self.net)], serde_json::to_value(extra)?)
    }

    /// Loads a generator and checks it was trained against the given models.
    pub fn load(dir: &Path, clf: &TrainedClassifier, dvae: &TrainedDvae) -> Result<Self> {
        let (manifest, mut nets) = artifact::load_model(dir, "generator")?;
        let extra: GeneratorManifestExtra = serde_json::from_value(manifest.extra)?;
        for (what, expected, found) in [
            ("classifier", clf.checksum(), &extra.classifier_checksum),
            ("dvae", dvae.checksum(), &extra.dvae_checksum),
        ] {
            if &expected != found {
                return Err(Error::ChecksumMismatch {
                    what: format!("{what} the generator was trained against"),
                    expected,
                    found: found.clone(),
                });
            }
        }
        let net = nets.pop().ok_or_else(|| Error::Artifact("generator manifest has no network".into()))?;
        Ok(TrainedGenerator {
            net,
            config: extra.config,
            initial_recon: extra.initial_recon,
            log: extra.log,
            classifier_checksum: extra.classifier_checksum,
            dvae_checksum: extra.dvae_checksum,
        })
    }
}

/// Generator and head information vectors on a fixed set of centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostic {
    pub generator: infotheory::InfoVector,
    pub head: infotheory::InfoVector,
    pub alignment: f64,
    pub penalty: f64,
}

/// Information vectors of `g` (around `phi'`) and of the head probability
/// (around `phi`) with shared probe offsets.
pub fn alignment_diagnostic(
    g: &Network,
    head_prob: &Network,
    phi: ArrayView2<f64>,
    phi_prime: ArrayView2<f64>,
    probe: &GaussianProbe,
) -> Result<AlignmentDiagnostic> {
    let offsets = infotheory::probe_offsets(probe, phi.nrows(), phi.ncols());
    let gi = infotheory::layer_info_with_offsets(g, phi_prime, offsets.view())?;
    let fi = infotheory::layer_info_with_offsets(head_prob, phi, offsets.view())?;
    let meta = infotheory::ProbeMeta {
        samples_per_coord: probe.samples_per_coord,
        seed: probe.seed,
        centers: phi.nrows(),
        variance: 1.0,
    };
    let alignment = infotheory::cosine(&gi, &fi)?;
    let penalty = infotheory::inverse_similarity_penalty(&gi, &unit_sum(&fi), DOT_FLOOR);
    Ok(AlignmentDiagnostic {
        generator: infotheory::InfoVector {
            values: gi,
            function_tag: infotheory::InfoTarget::Generator,
            probe: meta,
        },
        head: infotheory::InfoVector {
            values: fi,
            function_tag: infotheory::InfoTarget::Head,
            probe: meta,
        },
        alignment,
        penalty,
    })
}

/// `v / sum(v)`, or `v` unchanged when it sums to zero.
pub fn unit_sum(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        v.to_vec()
    }
}

/// Representations `phi(x)` and `phi'(x)` of a whole dataset.
pub fn representations(
    clf: &TrainedClassifier,
    dvae: &TrainedDvae,
    data: &LabeledImageSet,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let phi = clf.hidden_repr(data.flat_images())?;
    let phi_prime = dvae.reconstruct(phi.view())?;
    Ok((phi, phi_prime))
}

fn mean_recon(g: &Network, phi_prime: ArrayView2<f64>, images: ArrayView2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..images.nrows()).step_by(256) {
        let end = (start + 256).min(images.nrows());
        let pred = g.forward(phi_prime.slice(s![start..end, ..]))?;
        total += reconstruction_loss(pred.view(), images.slice(s![start..end, ..])).0 * (end - start) as f64;
    }
    Ok(total / images.nrows() as f64)
}

/// Trains `g` on `(phi'(x), x)` pairs with the classifier and DVAE frozen.
pub fn train_generator(
    cfg: &GeneratorConfig,
    clf: &TrainedClassifier,
    dvae: &TrainedDvae,
    data: &LabeledImageSet,
) -> Result<TrainedGenerator> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.spec.image_shape != cfg.image_shape {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, generator emits {:?}",
            data.spec.image_shape, cfg.image_shape
        )));
    }
    if dvae.repr_dim() != clf.repr_dim() {
        return Err(Error::Shape("dvae and classifier disagree on the representation width".into()));
    }
    let clf_before = clf.checksum();
    let dvae_before = dvae.checksum();

    let images = data.flat_images();
    let (phi, phi_prime) = representations(clf, dvae, data)?;
    let head_prob = clf.head_probability_network();
    let d = clf.repr_dim();

    let mut rng = seed::stream(cfg.seed, "generator/init");
    let mut g = Network::new(&cfg.layer_specs(d)?, &mut rng)?;
    let mut opt = Adam::new(g.num_params(), cfg.learning_rate);
    let mut shuffle_rng = seed::stream(cfg.seed, "generator/shuffle");
    let mut probe_rng = seed::stream(cfg.info_probe.seed, "generator/probe");

    let diag_rows: Vec<usize> = (0..cfg.diagnostic_centers.min(data.len())).collect();
    let diag_phi = nn::gather_rows(phi.view(), &diag_rows);
    let diag_phi_prime = nn::gather_rows(phi_prime.view(), &diag_rows);

    let initial_recon = mean_recon(&g, phi_prime.view(), images)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = nn::shuffled_indices(data.len(), &mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = nn::gather_rows(images, batch);
            let c = nn::gather_rows(phi_prime.view(), batch);
            let trace = g.forward_train(c.view(), None::<&mut rand_chacha::ChaCha8Rng>)?;
            let (loss, grad_out) = reconstruction_loss(trace.output().view(), x.view());
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "generator",
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            let mut grads = vec![0.0; g.num_params()];
            g.backward(&trace, grad_out.view(), &mut grads);

            if cfg.lambda > 0.0 {
                let k = cfg.probe_centers.min(batch.len());
                let centers = &batch[..k];
                let offsets = infotheory::probe_offsets_from(&mut probe_rng, k * d, cfg.info_probe.samples_per_coord);
                let head_info = infotheory::layer_info_with_offsets(
                    &head_prob,
                    nn::gather_rows(phi.view(), centers).view(),
                    offsets.view(),
                )?;
                let eval = infotheory::penalty_and_gradient(
                    &g,
                    nn::gather_rows(phi_prime.view(), centers).view(),
                    offsets.view(),
                    &unit_sum(&head_info),
                    cfg.lambda,
                    DOT_FLOOR,
                )?;
                if !eval.penalty.is_finite() {
                    return Err(Error::Divergence {
                        stage: "generator",
                        epoch,
                    });
                }
                grads.iter_mut().zip(&eval.grads).for_each(|(a, b)| *a += b);
            }
            opt.step(g.params_mut(), &grads);
        }
        let diag = alignment_diagnostic(
            &g,
            &head_prob,
            diag_phi.view(),
            diag_phi_prime.view(),
            &cfg.diagnostic_probe,
        )?;
        let recon = total / data.len() as f64;
        log::info!(
            "generator epoch {epoch}: recon {recon:.4}, penalty {:.4e}, alignment {:.4}",
            diag.penalty,
            diag.alignment
        );
        log.push(GeneratorEpoch {
            epoch,
            recon,
            penalty: diag.penalty,
            alignment: diag.alignment,
        });
    }

    for (what, before, after) in [
        ("classifier", clf_before, clf.checksum()),
        ("dvae", dvae_before.clone(), dvae.checksum()),
    ] {
        if before != after {
            return Err(Error::ChecksumMismatch {
                what: format!("{what} parameters during generator training"),
                expected: before,
                found: after,
            });
        }
    }
    Ok(TrainedGenerator {
        net: g,
        config: cfg.clone(),
        initial_recon,
        log,
        classifier_checksum: clf.checksum(),
        dvae_checksum: dvae_before,
    })
}

/// How a panel chooses its intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mask")]
pub enum PanelMask {
    Empty,
    FullFlip,
    GreedyMinimal,
    Explicit(InterventionMask),
}

/// Confound statistic of the three images in a panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasStatistics {
    pub original: f64,
    pub factual: f64,
    pub counterfactual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationPanel {
    pub original: Vec<f64>,
    pub factual_render: Vec<f64>,
    pub counterfactual_render: Vec<f64>,
    pub p_original: f64,
    pub p_counterfactual: f64,
    pub prediction_changed: bool,
    /// `None` when a greedy search found no prediction-changing mask.
    pub mask: Option<InterventionMask>,
    pub bias_statistics: BiasStatistics,
}

/// Builds the factual / counterfactual panel for one flattened image.
pub fn concept_panel(
    gen: &TrainedGenerator,
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    image: ArrayView1<f64>,
    choice: &PanelMask,
) -> Result<ExplanationPanel> {
    let phi = clf.hidden_repr(image.insert_axis(Axis(0)))?;
    let bits = dvae.encode_hard(phi.row(0))?.bits;
    panel_from_bits(gen, dvae, clf, image, &bits, choice)
}

/// [`concept_panel`] for a sample whose hard bits are already known.
pub fn panel_from_bits(
    gen: &TrainedGenerator,
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    image: ArrayView1<f64>,
    bits: &[u8],
    choice: &PanelMask,
) -> Result<ExplanationPanel> {
    let mask = match choice {
        PanelMask::Empty => Some(InterventionMask::new(Vec::new(), Strategy::Manual)?),
        PanelMask::FullFlip => Some(InterventionMask::full_flip(bits.len())),
        PanelMask::GreedyMinimal => intervention::greedy_minimal_flip(dvae, clf, bits, bits.len())?,
        PanelMask::Explicit(m) => Some(m.clone()),
    };
    let applied = mask.clone().unwrap_or_else(InterventionMask::empty);
    let record = intervention::counterfactual(dvae, clf, bits, &applied)?;
    let factual_repr = dvae.decode_one(bits)?;
    let mut reprs = Array2::zeros((2, factual_repr.len()));
    reprs.row_mut(0).assign(&factual_repr);
    reprs.row_mut(1).assign(&ArrayView1::from(&record.psi));
    let renders = gen.explain_batch(reprs.view())?;
    let shape = gen.image_shape();
    let stats = confound_statistic_flat(renders.view(), shape)?;
    let original_stat = confound_statistic_flat(image.insert_axis(Axis(0)), shape)?[0];
    Ok(ExplanationPanel {
        original: image.to_vec(),
        factual_render: renders.row(0).to_vec(),
        counterfactual_render: renders.row(1).to_vec(),
        p_original: record.p_original,
        p_counterfactual: record.p_counterfactual,
        prediction_changed: record.prediction_changed,
        mask,
        bias_statistics: BiasStatistics {
            original: original_stat,
            factual: stats[0],
            counterfactual: stats[1],
        },
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit(canvas: &mut RgbImage, flat: &[f64], shape: ImageShape, x0: u32, y0: u32, scale: u32) {
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let c = c.min(shape.channels - 1);
                to_u8(flat[c * plane + y * w + x])
            };
            let rgb = Rgb([px(0), px(1), px(2)]);
            for dy in 0..scale {
                for dx in 0..scale {
                    canvas.put_pixel(x0 + x as u32 * scale + dx, y0 + y as u32 * scale + dy, rgb);
                }
            }
        }
    }
}

/// Encodes one flattened `[c, h, w]` image as PNG, upscaled by `scale`.
pub fn image_png(flat: &[f64], shape: ImageShape, scale: u32) -> Result<Vec<u8>> {
    if flat.len() != shape.len() {
        return Err(Error::Shape(format!("image has {} values, shape needs {}", flat.len(), shape.len())));
    }
    let scale = scale.max(1);
    let mut canvas = RgbImage::new(shape.width as u32 * scale, shape.height as u32 * scale);
    blit(&mut canvas, flat, shape, 0, 0, scale);
    let mut bytes = Vec::new();
    canvas.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

const GAP: u32 = 2;

/// Writes a grid with one row per panel (original | factual |
/// counterfactual) and a JSON sidecar next to it with the same stem.
pub fn export_panels(png_path: &Path, panels: &[ExplanationPanel], shape: ImageShape, scale: u32) -> Result<()> {
    let scale = scale.max(1);
    let (cw, ch) = (shape.width as u32 * scale, shape.height as u32 * scale);
    let rows = panels.len().max(1) as u32;
    let mut canvas = RgbImage::from_pixel(3 * cw + 4 * GAP, rows * ch + (rows + 1) * GAP, Rgb([255, 255, 255]));
    for (r, panel) in panels.iter().enumerate() {
        let y = GAP + r as u32 * (ch + GAP);
        for (col, img) in [&panel.original, &panel.factual_render, &panel.counterfactual_render]
            .into_iter()
            .enumerate()
        {
            if img.len() != shape.len() {
                return Err(Error::Shape("panel image does not match the grid shape".into()));
            }
            blit(&mut canvas, img, shape, GAP + col as u32 * (cw + GAP), y, scale);
        }
    }
    canvas.save_with_format(png_path, ImageFormat::Png)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        columns: [&'static str; 3],
        panels: Vec<SidecarRow<'a>>,
    }
    #[derive(Serialize)]
    struct SidecarRow<'a> {
        p_original: f64,
        p_counterfactual: f64,
        prediction_changed: bool,
        mask: &'a Option<InterventionMask>,
        bias_statistics: BiasStatistics,
    }
    let sidecar = Sidecar {
        columns: ["original", "factual", "counterfactual"],
        panels: panels
            .iter()
            .map(|p| SidecarRow {
                p_original: p.p_original,
                p_counterfactual: p.p_counterfactual,
                prediction_changed: p.prediction_changed,
                mask: &p.mask,
                bias_statistics: p.bias_statistics,
            })
            .collect(),
    };
    artifact::write_json(&png_path.with_extension("json"), &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetSpec};
    use crate::intervention::fixtures;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_shape: ImageShape::new(3, 16, 16),
            seed_channels: 8,
            deconv_layers: vec![
                DeconvLayerConfig {
                    out_channels: 6,
                    kernel: 4,
                    stride: 2,
                },
                DeconvLayerConfig {
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                },
            ],
            epochs: 2,
            batch_size: 16,
            diagnostic_centers: 4,
            diagnostic_probe: GaussianProbe {
                samples_per_coord: 4,
                seed: 0,
            },
            ..GeneratorConfig::default()
        }
    }

    fn data(n: usize) -> LabeledImageSet {
        generate_dataset(&DatasetSpec {
            image_shape: ImageShape::new(3, 16, 16),
            n_samples: n,
            seed: 2,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn default_architecture_grows_to_the_image() {
        let specs = GeneratorConfig::default().layer_specs(64).unwrap();
        let mut rng = seed::stream(0, "t");
        let g = Network::new(&specs, &mut rng).unwrap();
        assert_eq!(g.input_dim(), 64);
        assert_eq!(g.output_dim(), 3 * 32 * 32);
        let bad = GeneratorConfig {
            deconv_layers: vec![DeconvLayerConfig {
                out_channels: 3,
                kernel: 3,
                stride: 2,
            }],
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
        let negative = GeneratorConfig {
            lambda: -1.0,
            ..GeneratorConfig::default()
        };
        assert!(matches!(negative.validate(), Err(Error::InvalidConfig { field: "lambda", .. })));
    }

    #[test]
    fn reconstruction_loss_is_zero_at_the_target_and_matches_its_gradient() {
        let x = ndarray::array![[0.25, 0.9, 0.55], [0.0, 1.0, 0.3]];
        let (zero, _) = reconstruction_loss(x.view(), x.view());
        assert!(zero.abs() < 1e-5);
        let p = ndarray::array![[0.4, 0.6, 0.5], [0.2, 0.7, 0.35]];
        let (_, grad) = reconstruction_loss(p.view(), x.view());
        let h = 1e-6;
        for idx in [(0, 0), (1, 2)] {
            let mut up = p.clone();
            up[idx] += h;
            let mut down = p.clone();
            down[idx] -= h;
            let fd = (reconstruction_loss(up.view(), x.view()).0 - reconstruction_loss(down.view(), x.view()).0) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn training_leaves_upstream_untouched_and_renders_valid_images() {
        let (clf, dvae, data) = (fixtures::classifier(), fixtures::dvae(false), data(48));
        let before = (clf.checksum(), dvae.checksum());
        let cfg = GeneratorConfig {
            lambda: 0.3,
            ..small_cfg()
        };
        let gen = train_generator(&cfg, &clf, &dvae, &data).unwrap();
        assert_eq!(before, (clf.checksum(), dvae.checksum()));
        assert_eq!(gen.training_log().len(), 2);
        let img = gen.explain(ndarray::Array1::from_elem(8, 0.3).view()).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = gen.explain(ndarray::Array1::from_elem(8, 0.3).view()).unwrap();
        assert_eq!(img, again);
        assert!(gen.explain(ndarray::Array1::zeros(7).view()).is_err());

        let dir = tempfile::tempdir().unwrap();
        gen.save(dir.path()).unwrap();
        let loaded = TrainedGenerator::load(dir.path(), &clf, &dvae).unwrap();
        assert_eq!(loaded.checksum(), gen.checksum());
        let other = fixtures::dvae(true);
        assert!(matches!(
            TrainedGenerator::load(dir.path(), &clf, &other),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn zero_lambda_logs_the_same_diagnostic_formula() {
        let (clf, dvae, data) = (fixtures::classifier(), fixtures::dvae(false), data(32));
        let cfg = GeneratorConfig {
            lambda: 0.0,
            epochs: 1,
            ..small_cfg()
        };
        let gen = train_generator(&cfg, &clf, &dvae, &data).unwrap();
        let (phi, phi_prime) = representations(&clf, &dvae, &data).unwrap();
        let diag = alignment_diagnostic(
            gen.network(),
            &clf.head_probability_network(),
            phi.slice(s![..4, ..]),
            phi_prime.slice(s![..4, ..]),
            &cfg.diagnostic_probe,
        )
        .unwrap();
        let last = gen.training_log().last().unwrap();
        assert_eq!(last.penalty, diag.penalty);
        assert_eq!(last.alignment, diag.alignment);
    }

    #[test]
    fn single_image_is_memorized() {
        let (clf, dvae) = (fixtures::classifier(), fixtures::dvae_scaled(1.0));
        let one = data(8).select(&[0]);
        let cfg = GeneratorConfig {
            lambda: 0.0,
            epochs: 300,
            batch_size: 1,
            learning_rate: 2e-3,
            ..small_cfg()
        };
        let gen = train_generator(&cfg, &clf, &dvae, &one).unwrap();
        let final_recon = gen.training_log().last().unwrap().recon;
        assert!(final_recon < 0.05, "{final_recon}");
    }

    #[test]
    fn empty_mask_panel_has_identical_renders_and_exact_probabilities() {
        let (clf, dvae, data) = (fixtures::classifier(), fixtures::dvae(false), data(16));
        let gen = train_generator(&GeneratorConfig { epochs: 1, ..small_cfg() }, &clf, &dvae, &data).unwrap();
        let img = data.flat_images().row(3).to_owned();
        let panel = concept_panel(&gen, &dvae, &clf, img.view(), &PanelMask::Empty).unwrap();
        assert_eq!(panel.factual_render, panel.counterfactual_render);
        assert!(!panel.prediction_changed);

        let full = concept_panel(&gen, &dvae, &clf, img.view(), &PanelMask::FullFlip).unwrap();
        let phi = clf.hidden_repr(img.view().insert_axis(Axis(0))).unwrap();
        let bits = dvae.encode_hard(phi.row(0)).unwrap().bits;
        let flipped = intervention::flip(&bits, &InterventionMask::full_flip(bits.len())).unwrap();
        let psi = dvae.decode_one(&flipped).unwrap();
        let p = clf.head_predict(psi.insert_axis(Axis(0)).view()).unwrap()[0];
        assert_eq!(full.p_counterfactual, p);
        assert_eq!(full.p_original, panel.p_original);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        export_panels(&path, &[panel, full], ImageShape::new(3, 16, 16), 2).unwrap();
        let decoded = image::open(&path).unwrap();
        assert_eq!(decoded.width(), 3 * 32 + 4 * GAP);
        let sidecar: serde_json::Value = artifact::read_json(&path.with_extension("json")).unwrap();
        assert_eq!(sidecar["panels"].as_array().unwrap().len(), 2);
        assert!(!image_png(&img.to_vec(), ImageShape::new(3, 16, 16), 1).unwrap().is_empty());
    }
}
