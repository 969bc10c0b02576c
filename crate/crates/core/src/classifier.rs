//! The discriminative model under study.
//!
//! A convolutional backbone maps an image to the hidden representation
//! `phi(x)`; a linear head maps `phi(x)` to the probability of the positive
//! class. Everything downstream (the DVAE, the generator, interventions) only
//! sees these two frozen maps.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datagen::{ImageShape, LabeledImageSet};
use crate::dvae::TrainedDvae;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, ConvGeometry, LayerSpec, Network};
use crate::seed;

const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_shape: ImageShape,
    pub conv_layers: Vec<ConvLayerConfig>,
    /// Widths of the fully connected layers before the head.
    pub fc_widths: Vec<usize>,
    /// Which fully connected layer yields `phi(x)`; `None` means the last one.
    pub phi_layer: Option<usize>,
    /// Take `phi(x)` after the rectifier (`true`) or before it.
    pub phi_post_activation: bool,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let conv = |c| ConvLayerConfig {
            out_channels: c,
            kernel: 3,
            stride: 2,
        };
        ClassifierConfig {
            image_shape: ImageShape::default(),
            conv_layers: vec![conv(16), conv(32), conv(64)],
            fc_widths: vec![128, 64],
            phi_layer: None,
            phi_post_activation: true,
            dropout_rate: 0.1,
            epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fc_widths.is_empty() {
            return Err(Error::invalid("fc_widths", "need at least one fully connected layer"));
        }
        let phi = self.phi_index();
        if phi >= self.fc_widths.len() {
            return Err(Error::invalid("phi_layer", format!("{phi} out of range")));
        }
        if self.fc_widths[phi] < 8 {
            return Err(Error::invalid("fc_widths", "hidden representation width must be >= 8"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate", format!("{} not in [0, 1)", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        for c in &self.conv_layers {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::invalid("conv_layers", format!("degenerate layer {c:?}")));
            }
        }
        Ok(())
    }

    fn phi_index(&self) -> usize {
        self.phi_layer.unwrap_or(self.fc_widths.len().saturating_sub(1))
    }

    /// Width `d` of the hidden representation.
    pub fn repr_dim(&self) -> usize {
        self.fc_widths[self.phi_index()]
    }

    /// (backbone layers, head layers). The head emits a logit.
    fn layer_specs(&self) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
        let shape = self.image_shape;
        let (mut c, mut h, mut w) = (shape.channels, shape.height, shape.width);
        let mut all = Vec::new();
        for layer in &self.conv_layers {
            let g = ConvGeometry {
                channels_in: c,
                channels_out: layer.out_channels,
                kernel: layer.kernel,
                stride: layer.stride,
                padding: layer.kernel / 2,
                height: h,
                width: w,
            };
            if !g.check() {
                return Err(Error::invalid("conv_layers", format!("does not fit a {h}x{w} input")));
            }
            all.push(LayerSpec::Conv2d(g));
            all.push(LayerSpec::Activation(Activation::Relu));
            (c, h, w) = (g.channels_out, g.out_height(), g.out_width());
        }
        let mut width = c * h * w;
        let phi = self.phi_index();
        let mut split = 0;
        for (i, &out) in self.fc_widths.iter().enumerate() {
            all.push(LayerSpec::Dense {
                inputs: width,
                outputs: out,
            });
            if i == phi && !self.phi_post_activation {
                split = all.len();
            }
            all.push(LayerSpec::Activation(Activation::Relu));
            if i == phi && self.phi_post_activation {
                split = all.len();
            }
            all.push(LayerSpec::Dropout {
                rate: self.dropout_rate,
            });
            width = out;
        }
        all.push(LayerSpec::Dense {
            inputs: width,
            outputs: 1,
        });
        let head = all.split_off(split);
        Ok((all, head))
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Backbone and head networks, trainable.
#[derive(Debug, Clone)]
pub struct ClassifierNetworks {
    pub backbone: Network,
    pub head: Network,
}

impl ClassifierNetworks {
    pub fn build(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let (backbone, head) = cfg.layer_specs()?;
        let mut rng = seed::stream(cfg.seed, "classifier/init");
        Ok(ClassifierNetworks {
            backbone: Network::new(&backbone, &mut rng)?,
            head: Network::new(&head, &mut rng)?,
        })
    }

    /// Mean binary cross-entropy over the batch and its gradients
    /// `(loss, d loss / d backbone, d loss / d head)`. Dropout is active only
    /// when `rng` is given.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        images: ArrayView2<f64>,
        labels: &[f64],
        mut rng: Option<&mut R>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let trace_b = self.backbone.forward_train(images, rng.as_deref_mut())?;
        let trace_h = self.head.forward_train(trace_b.output().view(), rng)?;
        let targets = Array2::from_shape_vec((labels.len(), 1), labels.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (loss, grad) = nn::bce_with_logits(trace_h.output().view(), targets.view());
        let mut gh = vec![0.0; self.head.num_params()];
        let mut gb = vec![0.0; self.backbone.num_params()];
        let g_repr = self.head.backward(&trace_h, grad.view(), &mut gh);
        self.backbone.backward(&trace_b, g_repr.view(), &mut gb);
        Ok((loss, gb, gh))
    }

    pub fn loss(&self, images: ArrayView2<f64>, labels: &[f64]) -> Result<f64> {
        let logits = self.head.forward(self.backbone.forward(images)?.view())?;
        let targets = Array2::from_shape_vec((labels.len(), 1), labels.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(nn::bce_with_logits(logits.view(), targets.view()).0)
    }
}

/// A trained, frozen classifier.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    nets: ClassifierNetworks,
    config: ClassifierConfig,
    log: Vec<ClassifierEpoch>,
}

impl TrainedClassifier {
    pub fn from_parts(nets: ClassifierNetworks, config: ClassifierConfig, log: Vec<ClassifierEpoch>) -> Result<Self> {
        if nets.backbone.output_dim() != nets.head.input_dim() || nets.head.output_dim() != 1 {
            return Err(Error::Shape("backbone and head do not compose".into()));
        }
        Ok(TrainedClassifier { nets, config, log })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn training_log(&self) -> &[ClassifierEpoch] {
        &self.log
    }

    pub fn backbone(&self) -> &Network {
        &self.nets.backbone
    }

    /// Head emitting the logit.
    pub fn head(&self) -> &Network {
        &self.nets.head
    }

    /// The head as a probability-valued network (logit head + sigmoid).
    pub fn head_probability_network(&self) -> Network {
        let mut specs = self.nets.head.specs();
        specs.push(LayerSpec::Activation(Activation::Sigmoid));
        let mut net = Network::zeroed(&specs).expect("head specs are valid");
        net.set_params(self.nets.head.params().to_vec())
            .expect("same parameter count");
        net
    }

    pub fn repr_dim(&self) -> usize {
        self.nets.backbone.output_dim()
    }

    /// Combined checksum of backbone and head parameters.
    pub fn checksum(&self) -> String {
        let mut all = self.nets.backbone.params().to_vec();
        all.extend_from_slice(self.nets.head.params());
        nn::checksum_params(&all)
    }

    /// `phi(x)` for a batch of flattened images, inference mode.
    pub fn hidden_repr(&self, images: ArrayView2<f64>) -> Result<Array2<f64>> {
        if images.ncols() != self.nets.backbone.input_dim() {
            return Err(Error::Shape(format!(
                "classifier expects images of {} values, got {}",
                self.nets.backbone.input_dim(),
                images.ncols()
            )));
        }
        chunked(images, |chunk| self.nets.backbone.forward(chunk))
    }

    /// `f_K(repr)`: positive-class probabilities, strictly inside (0, 1).
    pub fn head_predict(&self, repr: ArrayView2<f64>) -> Result<Array1<f64>> {
        if repr.ncols() != self.repr_dim() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.repr_dim(),
                repr.ncols()
            )));
        }
        if repr.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head input"));
        }
        let logits = self.nets.head.forward(repr)?;
        Ok(logits.column(0).mapv(probability))
    }

    /// Full model `f(x) = f_K(phi(x))`.
    pub fn predict(&self, images: ArrayView2<f64>) -> Result<Array1<f64>> {
        let repr = self.hidden_repr(images)?;
        self.head_predict(repr.view())
    }

    pub fn accuracy(&self, data: &LabeledImageSet) -> Result<f64> {
        let p = self.predict(data.flat_images())?;
        Ok(accuracy(&p, &data.labels))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = ClassifierManifestExtra {
            config: self.config.clone(),
            repr_dim: self.repr_dim(),
            log: self.log.clone(),
        };
        artifact::save_model(
            dir,
            "classifier",
            &[("backbone", &self.nets.backbone), ("head", &self.nets.head)],
            serde_json::to_value(extra)?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, mut nets) = artifact::load_model(dir, "classifier")?;
        let extra: ClassifierManifestExtra = serde_json::from_value(manifest.extra)?;
        if nets.len() != 2 {
            return Err(Error::Artifact("classifier manifest must hold backbone and head".into()));
        }
        let head = nets.pop().expect("two networks");
        let backbone = nets.pop().expect("two networks");
        if backbone.output_dim() != extra.repr_dim {
            return Err(Error::Artifact("classifier manifest width disagrees with layers".into()));
        }
        TrainedClassifier::from_parts(ClassifierNetworks { backbone, head }, extra.config, extra.log)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierManifestExtra {
    config: ClassifierConfig,
    repr_dim: usize,
    log: Vec<ClassifierEpoch>,
}

pub(crate) fn probability(logit: f64) -> f64 {
    nn::sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn predicted_class(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

pub fn accuracy(probs: &Array1<f64>, labels: &[u8]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| predicted_class(p) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn chunked(
    x: ArrayView2<f64>,
    f: impl Fn(ArrayView2<f64>) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    if x.nrows() <= INFERENCE_CHUNK {
        return f(x);
    }
    let parts = (0..x.nrows())
        .step_by(INFERENCE_CHUNK)
        .map(|start| {
            let end = (start + INFERENCE_CHUNK).min(x.nrows());
            f(x.slice(s![start..end, ..]))
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn train_classifier(
    cfg: &ClassifierConfig,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for data in [train, val] {
        if data.spec.image_shape != cfg.image_shape {
            return Err(Error::Shape(format!(
                "dataset images are {:?}, classifier expects {:?}",
                data.spec.image_shape, cfg.image_shape
            )));
        }
    }
    let mut nets = ClassifierNetworks::build(cfg)?;
    let mut opt_b = Adam::new(nets.backbone.num_params(), cfg.learning_rate);
    let mut opt_h = Adam::new(nets.head.num_params(), cfg.learning_rate);
    let mut shuffle_rng = seed::stream(cfg.seed, "classifier/shuffle");
    let mut dropout_rng = seed::stream(cfg.seed, "classifier/dropout");
    let images = train.flat_images();
    let labels = train.labels_f64();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = nn::shuffled_indices(train.len(), &mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = nn::gather_rows(images, batch);
            let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, gb, gh) = nets.loss_and_gradients(x.view(), &y, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "classifier",
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            opt_b.step(nets.backbone.params_mut(), &gb);
            opt_h.step(nets.head.params_mut(), &gh);
        }
        let snapshot = TrainedClassifier {
            nets: nets.clone(),
            config: cfg.clone(),
            log: Vec::new(),
        };
        let val_accuracy = snapshot.accuracy(val)?;
        let loss = total / train.len() as f64;
        log::info!("classifier epoch {epoch}: loss {loss:.4}, val acc {val_accuracy:.4}");
        log.push(ClassifierEpoch {
            epoch,
            loss,
            val_accuracy,
        });
    }
    TrainedClassifier::from_parts(nets, cfg.clone(), log)
}

/// Fidelity of the DVAE reconstruction, as seen by the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub acc_phi: f64,
    pub acc_phi_prime: f64,
    pub agreement: f64,
}

pub fn evaluate_fidelity(
    clf: &TrainedClassifier,
    dvae: &TrainedDvae,
    data: &LabeledImageSet,
) -> Result<FidelityReport> {
    if dvae.repr_dim() != clf.repr_dim() {
        return Err(Error::Shape(format!(
            "dvae models {}-d representations, classifier emits {}-d",
            dvae.repr_dim(),
            clf.repr_dim()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phi = clf.hidden_repr(data.flat_images())?;
    let phi_prime = dvae.reconstruct(phi.view())?;
    Ok(fidelity_from_reprs(clf, phi.view(), phi_prime.view(), &data.labels)?)
}

pub(crate) fn fidelity_from_reprs(
    clf: &TrainedClassifier,
    phi: ArrayView2<f64>,
    phi_prime: ArrayView2<f64>,
    labels: &[u8],
) -> Result<FidelityReport> {
    let p = clf.head_predict(phi)?;
    let p_prime = clf.head_predict(phi_prime)?;
    let agree = p
        .iter()
        .zip(p_prime.iter())
        .filter(|(&a, &b)| predicted_class(a) == predicted_class(b))
        .count();
    Ok(FidelityReport {
        acc_phi: accuracy(&p, labels),
        acc_phi_prime: accuracy(&p_prime, labels),
        agreement: agree as f64 / labels.len() as f64,
    })
}
