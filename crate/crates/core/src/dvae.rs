//! Boolean-latent variational autoencoder over hidden representations.
//!
//! The encoder maps `phi(x)` to `n` logits, one independent Bernoulli per bit.
//! During training bits are relaxed with binary-concrete noise so gradients
//! reach the encoder; at inference the posterior means are thresholded at 0.5
//! and the decoder maps hard bits back to `phi'(x)`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, Activation, Adam, LayerSpec, Network};
use crate::seed;

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DvaeConfig {
    pub n_bits: usize,
    /// Output widths of the four encoder layers; the last must equal `n_bits`.
    pub encoder_widths: [usize; 4],
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_epochs: usize,
    pub kl_weight: f64,
    /// Relaxed samples per datum in the reconstruction expectation.
    pub noise_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        DvaeConfig {
            n_bits: 16,
            encoder_widths: [128, 64, 32, 16],
            tau_start: 1.0,
            tau_end: 0.3,
            anneal_epochs: 20,
            kl_weight: 1.0,
            noise_samples: 1,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl DvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bits < 2 {
            return Err(Error::invalid("n_bits", "need at least 2 latent bits"));
        }
        if self.encoder_widths[3] != self.n_bits {
            return Err(Error::invalid(
                "encoder_widths",
                format!("last width {} must equal n_bits {}", self.encoder_widths[3], self.n_bits),
            ));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::invalid("encoder_widths", "widths must be positive"));
        }
        if !(self.tau_end > 0.0) {
            return Err(Error::invalid("tau_end", "must be positive"));
        }
        if self.tau_start < self.tau_end {
            return Err(Error::invalid("tau_start", "must be >= tau_end"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight", "must be >= 0"));
        }
        if self.noise_samples == 0 {
            return Err(Error::invalid("noise_samples", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Linear annealing from `tau_start` to `tau_end` over `anneal_epochs`.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 {
            return self.tau_end;
        }
        let frac = (epoch as f64 / self.anneal_epochs as f64).min(1.0);
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }

    fn encoder_specs(&self, repr_dim: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = repr_dim;
        for (i, &out) in self.encoder_widths.iter().enumerate() {
            specs.push(LayerSpec::Dense { inputs: width, outputs: out });
            if i < 3 {
                specs.push(LayerSpec::Activation(Activation::Relu));
            }
            width = out;
        }
        specs
    }

    /// Decoder mirrors the encoder: `n -> w2 -> w1 -> w0 -> d`.
    fn decoder_specs(&self, repr_dim: usize) -> Vec<LayerSpec> {
        let w = self.encoder_widths;
        let dims = [w[3], w[2], w[1], w[0], repr_dim];
        let mut specs = Vec::new();
        for i in 0..4 {
            specs.push(LayerSpec::Dense {
                inputs: dims[i],
                outputs: dims[i + 1],
            });
            if i < 3 {
                specs.push(LayerSpec::Activation(Activation::Relu));
            }
        }
        specs
    }
}

/// Relaxed Bernoulli sample `sigmoid((logit + log u - log(1 - u)) / tau)`.
pub fn binary_concrete_sample(
    logits: ArrayView1<f64>,
    tau: f64,
    u: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", "temperature must be positive"));
    }
    if logits.len() != u.len() {
        return Err(Error::Shape("logits and noise differ in length".into()));
    }
    if let Some(&bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidNoise(bad));
    }
    Ok(Zip::from(&logits)
        .and(&u)
        .map_collect(|&l, &v| relaxed(l, v, tau)))
}

fn relaxed(logit: f64, u: f64, tau: f64) -> f64 {
    sigmoid((logit + u.ln() - (1.0 - u).ln()) / tau)
}

/// `KL(q || p)` summed over independent bits, `q` and `p` clamped to
/// `[1e-6, 1 - 1e-6]`.
pub fn bernoulli_kl(q_probs: ArrayView1<f64>, p_prob: f64) -> f64 {
    q_probs.iter().map(|&q| kl_bit(q, p_prob)).sum()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn kl_bit(q: f64, p: f64) -> f64 {
    let (q, p) = (clamp_prob(q), clamp_prob(p));
    (q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()).max(0.0)
}

/// d KL / d logit for `q = sigmoid(logit)`, respecting the clamp.
fn kl_bit_logit_grad(logit: f64, p: f64) -> f64 {
    let q = sigmoid(logit);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
        return 0.0;
    }
    let p = clamp_prob(p);
    ((q / p).ln() - ((1.0 - q) / (1.0 - p)).ln()) * q * (1.0 - q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub elbo_neg: f64,
}

/// Encoder + decoder before freezing.
#[derive(Debug, Clone)]
pub struct DvaeNetworks {
    pub encoder: Network,
    pub decoder: Network,
    pub prior: f64,
}

impl DvaeNetworks {
    pub fn build(cfg: &DvaeConfig, repr_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::stream(cfg.seed, "dvae/init");
        Ok(DvaeNetworks {
            encoder: Network::new(&cfg.encoder_specs(repr_dim), &mut rng)?,
            decoder: Network::new(&cfg.decoder_specs(repr_dim), &mut rng)?,
            prior: 0.5,
        })
    }

    /// Negative ELBO of a batch with the logistic noise fixed by `u`
    /// (`[batch, n]`), and its gradients `(d/d encoder, d/d decoder,
    /// d/d logits)`.
    ///
    /// `recon` is the squared reconstruction error summed over coordinates and
    /// averaged over the batch; `kl` is the bitwise KL to the prior averaged
    /// over the batch.
    pub fn loss_with_noise(
        &self,
        phi: ArrayView2<f64>,
        tau: f64,
        u: ArrayView2<f64>,
        kl_weight: f64,
    ) -> Result<(DvaeLoss, Vec<f64>, Vec<f64>, Array2<f64>)> {
        let batch = phi.nrows() as f64;
        let enc = self.encoder.forward_train::<rand_chacha::ChaCha8Rng>(phi, None)?;
        let logits = enc.output();
        if u.dim() != logits.dim() {
            return Err(Error::Shape("noise must be [batch, n_bits]".into()));
        }
        if let Some(&bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidNoise(bad));
        }
        let z = Zip::from(logits).and(u).map_collect(|&l, &v| relaxed(l, v, tau));
        let dec = self.decoder.forward_train::<rand_chacha::ChaCha8Rng>(z.view(), None)?;
        let diff = dec.output() - &phi;
        let recon = diff.mapv(|v| v * v).sum() / batch;
        let kl = logits.mapv(|l| kl_bit(sigmoid(l), self.prior)).sum() / batch;
        let elbo_neg = recon + kl_weight * kl;

        let mut g_dec = vec![0.0; self.decoder.num_params()];
        let gz = self.decoder.backward(&dec, (&diff * (2.0 / batch)).view(), &mut g_dec);
        let mut g_logits = Zip::from(&gz).and(&z).map_collect(|&g, &zv| g * zv * (1.0 - zv) / tau);
        Zip::from(&mut g_logits)
            .and(logits)
            .for_each(|g, &l| *g += kl_weight * kl_bit_logit_grad(l, self.prior) / batch);
        let mut g_enc = vec![0.0; self.encoder.num_params()];
        self.encoder.backward(&enc, g_logits.view(), &mut g_enc);
        Ok((DvaeLoss { recon, kl, elbo_neg }, g_enc, g_dec, g_logits))
    }

    /// Negative ELBO with logistic noise drawn from `rng`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        phi: ArrayView2<f64>,
        tau: f64,
        kl_weight: f64,
        rng: &mut R,
    ) -> Result<DvaeLoss> {
        let u = uniform_noise(phi.nrows(), self.encoder.output_dim(), rng);
        let (loss, ..) = self.loss_with_noise(phi, tau, u.view(), kl_weight)?;
        if !loss.elbo_neg.is_finite() {
            return Err(Error::NonFinite("dvae loss"));
        }
        Ok(loss)
    }
}

pub fn uniform_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    // open interval (0, 1)
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = rng.random();
        v.clamp(1e-12, 1.0 - 1e-12)
    })
}

/// `dvae_loss`: negative ELBO of a batch, noise drawn from `rng`.
pub fn dvae_loss<R: Rng + ?Sized>(
    model: &DvaeNetworks,
    phi: ArrayView2<f64>,
    tau: f64,
    kl_weight: f64,
    rng: &mut R,
) -> Result<DvaeLoss> {
    model.loss(phi, tau, kl_weight, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvaeEpoch {
    pub epoch: usize,
    pub tau: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub bits: Vec<u8>,
    pub logits: Vec<f64>,
    pub posterior_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedDvae {
    nets: DvaeNetworks,
    config: DvaeConfig,
    log: Vec<DvaeEpoch>,
    classifier_checksum: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DvaeManifestExtra {
    config: DvaeConfig,
    repr_dim: usize,
    n_bits: usize,
    prior: f64,
    classifier_checksum: Option<String>,
    log: Vec<DvaeEpoch>,
}

impl TrainedDvae {
    pub fn from_parts(nets: DvaeNetworks, config: DvaeConfig, log: Vec<DvaeEpoch>) -> Result<Self> {
        if nets.encoder.output_dim() != nets.decoder.input_dim()
            || nets.encoder.input_dim() != nets.decoder.output_dim()
        {
            return Err(Error::Shape("encoder and decoder do not mirror".into()));
        }
        Ok(TrainedDvae {
            nets,
            config,
            log,
            classifier_checksum: None,
        })
    }

    /// Records the checksum of the classifier whose representations this
    /// model was fitted to.
    pub fn with_classifier_checksum(mut self, checksum: String) -> Self {
        self.classifier_checksum = Some(checksum);
        self
    }

    pub fn classifier_checksum(&self) -> Option<&str> {
        self.classifier_checksum.as_deref()
    }

    pub fn config(&self) -> &DvaeConfig {
        &self.config
    }

    pub fn training_log(&self) -> &[DvaeEpoch] {
        &self.log
    }

    pub fn networks(&self) -> &DvaeNetworks {
        &self.nets
    }

    pub fn n_bits(&self) -> usize {
        self.nets.encoder.output_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.nets.encoder.input_dim()
    }

    pub fn checksum(&self) -> String {
        let mut all = self.nets.encoder.params().to_vec();
        all.extend_from_slice(self.nets.decoder.params());
        nn::checksum_params(&all)
    }

    fn check_repr(&self, phi: &ArrayView2<f64>) -> Result<()> {
        if phi.ncols() != self.repr_dim() {
            return Err(Error::Shape(format!(
                "dvae expects {}-d representations, got {}",
                self.repr_dim(),
                phi.ncols()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, phi: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_repr(&phi)?;
        self.nets.encoder.forward(phi)
    }

    /// Hard bits for a batch: `1[sigmoid(logit) >= 0.5]` as `0.0 / 1.0`.
    pub fn encode_bits(&self, phi: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.logits(phi)?.mapv(|l| if sigmoid(l) >= 0.5 { 1.0 } else { 0.0 }))
    }

    pub fn encode_hard(&self, phi: ArrayView1<f64>) -> Result<LatentCode> {
        let logits = self.logits(phi.insert_axis(Axis(0)))?.row(0).to_vec();
        Ok(latent_code(logits))
    }

    pub fn encode_hard_batch(&self, phi: ArrayView2<f64>) -> Result<Vec<LatentCode>> {
        let logits = self.logits(phi)?;
        Ok(logits.outer_iter().map(|row| latent_code(row.to_vec())).collect())
    }

    /// Decodes hard or relaxed bits `[batch, n]` to representations `[batch, d]`.
    pub fn decode(&self, bits: ArrayView2<f64>) -> Result<Array2<f64>> {
        if bits.ncols() != self.n_bits() {
            return Err(Error::Shape(format!(
                "dvae expects {} bits, got {}",
                self.n_bits(),
                bits.ncols()
            )));
        }
        self.nets.decoder.forward(bits)
    }

    pub fn decode_one(&self, bits: &[u8]) -> Result<Array1<f64>> {
        let row = Array2::from_shape_fn((1, bits.len()), |(_, j)| bits[j] as f64);
        Ok(self.decode(row.view())?.row(0).to_owned())
    }

    /// `phi'(x) = decode(encode_hard(phi(x)))`.
    pub fn reconstruct(&self, phi: ArrayView2<f64>) -> Result<Array2<f64>> {
        let bits = self.encode_bits(phi)?;
        self.decode(bits.view())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = DvaeManifestExtra {
            config: self.config.clone(),
            repr_dim: self.repr_dim(),
            n_bits: self.n_bits(),
            prior: self.nets.prior,
            classifier_checksum: self.classifier_checksum.clone(),
            log: self.log.clone(),
        };
        artifact::save_model(
            dir,
            "dvae",
            &[("encoder", &self.nets.encoder), ("decoder", &self.nets.decoder)],
            serde_json::to_value(extra)?,
        )
    }

    /// Loads a model; when `expected_classifier` is given it must match the
    /// checksum recorded at training time.
    pub fn load(dir: &Path, expected_classifier: Option<&str>) -> Result<Self> {
        let (manifest, mut nets) = artifact::load_model(dir, "dvae")?;
        let extra: DvaeManifestExtra = serde_json::from_value(manifest.extra)?;
        if nets.len() != 2 {
            return Err(Error::Artifact("dvae manifest must hold encoder and decoder".into()));
        }
        if let Some(expected) = expected_classifier {
            let found = extra.classifier_checksum.clone().unwrap_or_default();
            if found != expected {
                return Err(Error::ChecksumMismatch {
                    what: "classifier the dvae was trained against".into(),
                    expected: expected.to_string(),
                    found,
                });
            }
        }
        let decoder = nets.pop().expect("two networks");
        let encoder = nets.pop().expect("two networks");
        if encoder.input_dim() != extra.repr_dim || encoder.output_dim() != extra.n_bits {
            return Err(Error::Artifact("dvae manifest dimensions disagree with layers".into()));
        }
        let mut model = TrainedDvae::from_parts(
            DvaeNetworks {
                encoder,
                decoder,
                prior: extra.prior,
            },
            extra.config,
            extra.log,
        )?;
        model.classifier_checksum = extra.classifier_checksum;
        Ok(model)
    }
}

fn latent_code(logits: Vec<f64>) -> LatentCode {
    let posterior_probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let bits = posterior_probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    LatentCode {
        bits,
        logits,
        posterior_probs,
    }
}

pub fn train_dvae(cfg: &DvaeConfig, reprs: ArrayView2<f64>) -> Result<TrainedDvae> {
    cfg.validate()?;
    if reprs.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if reprs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dvae training representations"));
    }
    let mut nets = DvaeNetworks::build(cfg, reprs.ncols())?;
    let mut opt_e = Adam::new(nets.encoder.num_params(), cfg.learning_rate);
    let mut opt_d = Adam::new(nets.decoder.num_params(), cfg.learning_rate);
    let mut shuffle_rng = seed::stream(cfg.seed, "dvae/shuffle");
    let mut noise_rng = seed::stream(cfg.seed, "dvae/noise");
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = nets.encoder.output_dim();

    for epoch in 0..cfg.epochs {
        let tau = cfg.temperature(epoch);
        let order = nn::shuffled_indices(reprs.nrows(), &mut shuffle_rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let phi = nn::gather_rows(reprs, batch);
            let mut ge = vec![0.0; nets.encoder.num_params()];
            let mut gd = vec![0.0; nets.decoder.num_params()];
            let scale = 1.0 / cfg.noise_samples as f64;
            for _ in 0..cfg.noise_samples {
                let u = uniform_noise(batch.len(), n, &mut noise_rng);
                let (loss, e, d, _) = nets.loss_with_noise(phi.view(), tau, u.view(), cfg.kl_weight)?;
                if !loss.elbo_neg.is_finite() {
                    return Err(Error::Divergence { stage: "dvae", epoch });
                }
                recon_sum += loss.recon * batch.len() as f64 * scale;
                kl_sum += loss.kl * batch.len() as f64 * scale;
                ge.iter_mut().zip(&e).for_each(|(a, b)| *a += b * scale);
                gd.iter_mut().zip(&d).for_each(|(a, b)| *a += b * scale);
            }
            opt_e.step(nets.encoder.params_mut(), &ge);
            opt_d.step(nets.decoder.params_mut(), &gd);
        }
        let total = reprs.nrows() as f64;
        let entry = DvaeEpoch {
            epoch,
            tau,
            recon: recon_sum / total,
            kl: kl_sum / total,
        };
        log::info!("dvae epoch {epoch}: tau {tau:.3} recon {:.4} kl {:.4}", entry.recon, entry.kl);
        log.push(entry);
    }
    TrainedDvae::from_parts(nets, cfg.clone(), log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn concrete_sample_closed_forms() {
        let s = binary_concrete_sample(array![0.0].view(), 3.7, array![0.5].view()).unwrap();
        assert_eq!(s[0], 0.5);
        let s = binary_concrete_sample(array![2.0].view(), 1.0, array![0.5].view()).unwrap();
        // sigmoid(2) = 1 / (1 + e^-2)
        assert!((s[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        let s = binary_concrete_sample(array![1.0].view(), 0.01, array![0.5].view()).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn concrete_sample_rejects_degenerate_noise() {
        for bad in [0.0, 1.0] {
            assert!(matches!(
                binary_concrete_sample(array![0.3].view(), 1.0, array![bad].view()),
                Err(Error::InvalidNoise(_))
            ));
        }
        assert!(binary_concrete_sample(array![0.3].view(), 0.0, array![0.4].view()).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(bernoulli_kl(array![0.5, 0.5, 0.5].view(), 0.5), 0.0);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let one = bernoulli_kl(array![0.9].view(), 0.5);
        assert!((one - expected).abs() < 1e-12);
        assert!((one - 0.3681).abs() < 1e-4);
        let two = bernoulli_kl(array![0.9, 0.9].view(), 0.5);
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn temperature_anneals_linearly() {
        let cfg = DvaeConfig {
            anneal_epochs: 10,
            ..DvaeConfig::default()
        };
        assert_eq!(cfg.temperature(0), 1.0);
        assert!((cfg.temperature(5) - 0.65).abs() < 1e-12);
        assert!((cfg.temperature(10) - 0.3).abs() < 1e-12);
        assert!((cfg.temperature(40) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = DvaeConfig {
            n_bits: 8,
            ..DvaeConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field: "encoder_widths", .. })));
        let bad_tau = DvaeConfig {
            tau_start: 0.1,
            ..DvaeConfig::default()
        };
        assert!(bad_tau.validate().is_err());
    }

    #[test]
    fn zero_logits_have_zero_kl() {
        let cfg = DvaeConfig::default();
        let mut nets = DvaeNetworks::build(&cfg, 8).unwrap();
        nets.encoder.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let phi = Array2::from_elem((4, 8), 0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let loss = dvae_loss(&nets, phi.view(), 0.5, 1.0, &mut rng).unwrap();
        assert_eq!(loss.kl, 0.0);
        assert!((loss.elbo_neg - loss.recon).abs() < 1e-12);
    }

    #[test]
    fn logit_and_parameter_gradients_match_finite_differences() {
        let cfg = DvaeConfig {
            n_bits: 4,
            encoder_widths: [12, 10, 8, 4],
            ..DvaeConfig::default()
        };
        let mut nets = DvaeNetworks::build(&cfg, 6).unwrap();
        let phi = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let u = uniform_noise(5, 4, &mut rng);
        let (_, ge, _, _) = nets.loss_with_noise(phi.view(), 0.7, u.view(), 1.0).unwrap();
        let h = 1e-6;
        for k in [0, 9, 40, ge.len() - 2] {
            let orig = nets.encoder.params()[k];
            nets.encoder.params_mut()[k] = orig + h;
            let up = nets.loss_with_noise(phi.view(), 0.7, u.view(), 1.0).unwrap().0.elbo_neg;
            nets.encoder.params_mut()[k] = orig - h;
            let down = nets.loss_with_noise(phi.view(), 0.7, u.view(), 1.0).unwrap().0.elbo_neg;
            nets.encoder.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - ge[k]).abs() <= 1e-3 * fd.abs().max(1e-5), "{k}: {fd} vs {}", ge[k]);
        }
    }

    #[test]
    fn constant_dataset_collapses_and_saturates() {
        // without the KL pull toward the prior, a single-point dataset lets the
        // encoder saturate every bit so the relaxed noise stops mattering
        let cfg = DvaeConfig {
            kl_weight: 0.0,
            n_bits: 4,
            encoder_widths: [16, 16, 8, 4],
            epochs: 60,
            anneal_epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            ..DvaeConfig::default()
        };
        let phi = Array2::from_shape_fn((64, 6), |(_, j)| 0.5 + 0.3 * j as f64);
        let model = train_dvae(&cfg, phi.view()).unwrap();
        let first = model.training_log()[0].recon;
        let last = model.training_log().last().unwrap().recon;
        assert!(last < 0.05 * first, "{first} -> {last}");
        let recon = model.reconstruct(phi.view()).unwrap();
        let err = (&recon - &phi).mapv(|v| v * v).mean().unwrap();
        assert!(err < 1e-2, "{err}");
        let codes = model.encode_hard_batch(phi.slice(ndarray::s![..1, ..])).unwrap();
        eprintln!("{:?}", codes[0].posterior_probs);
        assert!(codes[0].posterior_probs.iter().all(|p| (p - 0.5).abs() > 0.45));
    }

    #[test]
    fn hard_encoding_thresholds_and_is_deterministic() {
        let cfg = DvaeConfig {
            n_bits: 2,
            encoder_widths: [4, 4, 4, 2],
            ..DvaeConfig::default()
        };
        let nets = DvaeNetworks::build(&cfg, 3).unwrap();
        let model = TrainedDvae::from_parts(nets, cfg, vec![]).unwrap();
        let code = latent_code(vec![3.0, -3.0]);
        assert_eq!(code.bits, vec![1, 0]);
        let phi = array![0.2, 1.0, -0.4];
        let a = model.encode_hard(phi.view()).unwrap();
        let b = model.encode_hard(phi.view()).unwrap();
        assert_eq!(a, b);
        for (bit, p) in a.bits.iter().zip(&a.posterior_probs) {
            assert_eq!(*bit, u8::from(*p >= 0.5));
        }
        assert!(model.encode_hard(array![1.0, 2.0].view()).is_err());
        assert!(model.decode(Array2::zeros((1, 3)).view()).is_err());
        let d1 = model.decode_one(&[1, 0]).unwrap();
        let d2 = model.decode_one(&[1, 0]).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn save_load_checks_classifier_link() {
        let cfg = DvaeConfig {
            n_bits: 2,
            encoder_widths: [4, 4, 4, 2],
            ..DvaeConfig::default()
        };
        let nets = DvaeNetworks::build(&cfg, 3).unwrap();
        let model = TrainedDvae::from_parts(nets, cfg, vec![])
            .unwrap()
            .with_classifier_checksum("abc".into());
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = TrainedDvae::load(dir.path(), Some("abc")).unwrap();
        assert_eq!(loaded.checksum(), model.checksum());
        assert!(matches!(
            TrainedDvae::load(dir.path(), Some("xyz")),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
