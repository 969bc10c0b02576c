//! End-to-end experiment orchestration: data, classifier, DVAE and generator
//! stages persisted under one run directory, then metrics, counterfactual
//! records and panel grids computed from the frozen models.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json            resolved configuration
//! manifest.json          config hash and per-stage file checksums
//! data/{train,val}/      images.npy + meta.json
//! models/{classifier,dvae,generator,generator_ablation}/
//! records/full_flip.jsonl
//! panels/*.png + sidecar *.json
//! metrics.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, read_json, write_json};
use crate::classifier::{
    evaluate_fidelity, train_classifier, ClassifierConfig, ConvLayerConfig, FidelityReport, TrainedClassifier,
};
use crate::datagen::{self, confound_statistic_flat, generate_dataset, DatasetSpec, ImageShape, LabeledImageSet};
use crate::dvae::{train_dvae, DvaeConfig, TrainedDvae};
use crate::error::{Error, Result};
use crate::explainer::{
    self, alignment_diagnostic, export_panels, panel_from_bits, train_generator, AlignmentDiagnostic,
    DeconvLayerConfig, GeneratorConfig, PanelMask, TrainedGenerator,
};
use crate::infotheory::GaussianProbe;
use crate::intervention::{self, CounterfactualRecord, InterventionMask};
use crate::seed::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Global seed; every stage's seed is derived from it.
    pub seed: u64,
    /// Training set. Its `seed` is replaced by one derived from `seed`.
    pub dataset: DatasetSpec,
    pub val_samples: usize,
    /// When set, the run is a bias-split pair with this correlation for
    /// split A (`1 - rho_a` for split B), each in its own subdirectory.
    pub bias_split: Option<f64>,
    pub classifier: ClassifierConfig,
    pub dvae: DvaeConfig,
    pub generator: GeneratorConfig,
    /// Penalty weight of a second generator trained for comparison.
    pub ablation_lambda: Option<f64>,
    /// Probe for the reported information alignment.
    pub diagnostic_probe: GaussianProbe,
    pub diagnostic_centers: usize,
    /// Validation samples rendered into each panel grid.
    pub panel_count: usize,
    /// Seeds used by [`compare_regularization`].
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            dataset: DatasetSpec::default(),
            val_samples: 1000,
            bias_split: None,
            classifier: ClassifierConfig::default(),
            dvae: DvaeConfig::default(),
            generator: GeneratorConfig::default(),
            ablation_lambda: None,
            diagnostic_probe: GaussianProbe {
                samples_per_coord: 32,
                seed: 0,
            },
            diagnostic_centers: 32,
            panel_count: 8,
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    /// A seconds-scale configuration on 16x16 images, for tests and demos.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> Self {
        let shape = ImageShape::new(3, 16, 16);
        RunConfig {
            output_dir: output_dir.into(),
            dataset: DatasetSpec {
                image_shape: shape,
                n_samples: 192,
                ..DatasetSpec::default()
            },
            val_samples: 48,
            classifier: ClassifierConfig {
                image_shape: shape,
                conv_layers: vec![ConvLayerConfig {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                }],
                fc_widths: vec![16],
                epochs: 3,
                batch_size: 32,
                learning_rate: 3e-3,
                ..ClassifierConfig::default()
            },
            dvae: DvaeConfig {
                n_bits: 6,
                encoder_widths: [16, 12, 8, 6],
                anneal_epochs: 4,
                epochs: 4,
                batch_size: 32,
                ..DvaeConfig::default()
            },
            generator: GeneratorConfig {
                image_shape: shape,
                seed_channels: 8,
                deconv_layers: vec![
                    DeconvLayerConfig {
                        out_channels: 4,
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
                batch_size: 32,
                info_probe: GaussianProbe {
                    samples_per_coord: 4,
                    seed: 0,
                },
                diagnostic_probe: GaussianProbe {
                    samples_per_coord: 4,
                    seed: 0,
                },
                diagnostic_centers: 2,
                ..GeneratorConfig::default()
            },
            ablation_lambda: Some(0.0),
            diagnostic_probe: GaussianProbe {
                samples_per_coord: 4,
                seed: 0,
            },
            diagnostic_centers: 4,
            panel_count: 4,
            ..RunConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.val_samples == 0 {
            return Err(Error::invalid("val_samples", "must be positive"));
        }
        if let Some(rho) = self.bias_split {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid("bias_split", format!("{rho} not in [0, 1]")));
            }
        }
        if let Some(l) = self.ablation_lambda {
            if !(l >= 0.0) {
                return Err(Error::invalid("ablation_lambda", "must be >= 0"));
            }
        }
        if self.diagnostic_centers == 0 {
            return Err(Error::invalid("diagnostic_centers", "must be positive"));
        }
        self.diagnostic_probe.validate()?;
        self.classifier.validate()?;
        self.dvae.validate()?;
        self.generator.validate()?;
        if self.classifier.image_shape != self.dataset.image_shape
            || self.generator.image_shape != self.dataset.image_shape
        {
            return Err(Error::invalid(
                "image_shape",
                "dataset, classifier and generator must agree on the image shape",
            ));
        }
        if self.dvae.n_bits < 2 {
            return Err(Error::invalid("n_bits", "need at least 2 bits"));
        }
        Ok(())
    }

    /// Copy with every stage seed derived from the global seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        let s = self.seed;
        c.dataset.seed = derive_seed(s, "dataset");
        c.classifier.seed = derive_seed(s, "classifier");
        c.dvae.seed = derive_seed(s, "dvae");
        c.generator.seed = derive_seed(s, "generator");
        c.generator.info_probe.seed = derive_seed(s, "generator/probe");
        c.generator.diagnostic_probe.seed = derive_seed(s, "generator/diagnostic");
        c.diagnostic_probe.seed = derive_seed(s, "diagnostic");
        c
    }

    /// SHA-256 of the resolved configuration, output directory excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        Ok(artifact::sha256_bytes(&serde_json::to_vec(&c)?))
    }

    fn val_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_samples: self.val_samples,
            seed: derive_seed(self.dataset.seed, "val"),
            ..self.dataset.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path -> SHA-256.
    pub files: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// SHA-256 of the manifest file contents, used as the run identifier.
    pub fn file_hash(dir: &Path) -> Result<String> {
        artifact::sha256_file(&dir.join("manifest.json"))
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub manifest_path: PathBuf,
    pub metrics_path: PathBuf,
    pub records_path: PathBuf,
    pub panel_paths: Vec<PathBuf>,
    /// Stages that were (re)computed rather than loaded.
    pub trained_stages: Vec<String>,
    pub manifest: RunManifest,
}

const STAGE_DATA: &str = "data";
const STAGE_CLASSIFIER: &str = "classifier";
const STAGE_DVAE: &str = "dvae";
const STAGE_GENERATOR: &str = "generator";
const STAGE_ABLATION: &str = "generator_ablation";

fn stage_dir(stage: &str) -> &'static str {
    match stage {
        STAGE_DATA => "data",
        STAGE_CLASSIFIER => "models/classifier",
        STAGE_DVAE => "models/dvae",
        STAGE_GENERATOR => "models/generator",
        _ => "models/generator_ablation",
    }
}

fn checksum_tree(run: &Path, sub: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![run.join(sub)];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(run)
                    .map_err(|e| Error::Artifact(e.to_string()))?
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, artifact::sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

enum StageState {
    Missing,
    Valid,
}

/// Checks a recorded stage against the files on disk. Missing files mean
/// the stage must be recomputed; modified files are refused.
fn stage_state(run: &Path, stage: &str, prior: Option<&RunManifest>) -> Result<StageState> {
    let Some(rec) = prior.and_then(|m| m.stages.get(stage)) else {
        return Ok(StageState::Missing);
    };
    if rec.files.keys().any(|f| !run.join(f).exists()) {
        return Ok(StageState::Missing);
    }
    for (file, expected) in &rec.files {
        let found = artifact::sha256_file(&run.join(file))?;
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                what: format!("{file} (stage `{stage}`); refusing to resume from a stale artifact"),
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(StageState::Valid)
}

struct StageRunner<'a> {
    dir: &'a Path,
    prior: Option<RunManifest>,
    manifest: RunManifest,
    upstream_fresh: bool,
    trained: Vec<String>,
}

impl StageRunner<'_> {
    /// Loads the stage if it and everything upstream is intact, otherwise
    /// computes and persists it.
    fn run<T>(
        &mut self,
        stage: &'static str,
        load: impl FnOnce(&Path) -> Result<T>,
        compute: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let state = stage_state(self.dir, stage, self.prior.as_ref()).map_err(|e| e.in_stage(stage))?;
        let sub = self.dir.join(stage_dir(stage));
        if matches!(state, StageState::Valid) && !self.upstream_fresh {
            let value = load(&sub).map_err(|e| e.in_stage(stage))?;
            let rec = self.prior.as_ref().expect("valid stage has a record").stages[stage].clone();
            self.manifest.stages.insert(stage.to_string(), rec);
            return Ok(value);
        }
        log::info!("running stage {stage}");
        self.upstream_fresh = true;
        if sub.exists() {
            fs::remove_dir_all(&sub)?;
        }
        let start = Instant::now();
        let value = compute(&sub).map_err(|e| e.in_stage(stage))?;
        let files = checksum_tree(self.dir, stage_dir(stage))?;
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                files,
                seconds: start.elapsed().as_secs_f64(),
            },
        );
        self.trained.push(stage.to_string());
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(value)
    }
}

/// Everything `metrics.json` reports. No timestamps: reruns are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetMetrics,
    pub classifier_val_accuracy: f64,
    pub fidelity: FidelityReport,
    pub flip_rates: FlipRates,
    pub greedy_mask_sizes: MaskSizeSummary,
    pub per_bit_effect: Vec<f64>,
    pub dvae: DvaeMetrics,
    pub explainer: ExplainerMetrics,
    pub info: InfoMetrics,
    pub bias: BiasMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub train_samples: usize,
    pub val_samples: usize,
    pub confound_correlation: f64,
    pub train_agreement_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipRates {
    pub full_flip: f64,
    pub greedy_minimal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSizeSummary {
    /// Samples for which the greedy search changed the prediction.
    pub found: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvaeMetrics {
    /// Mean `|posterior - 0.5|` over validation samples and bits.
    pub decisiveness: f64,
    /// Bits whose posterior varies across the validation set.
    pub active_bits: usize,
    /// Fraction of bits reproduced by `encode(decode(bits))`.
    pub fixed_point_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerMetrics {
    pub initial_recon: f64,
    pub final_recon: f64,
    /// Mean absolute pixel error of `g(phi'(x))` against `x` on validation.
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMetrics {
    pub lambda: f64,
    pub alignment: f64,
    pub diagnostic: AlignmentDiagnostic,
    pub ablation: Option<AblationArm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub lambda: f64,
    pub alignment: f64,
    pub diagnostic: AlignmentDiagnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByLabel {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMetrics {
    /// Mean confound statistic of the validation images themselves.
    pub original: ByLabel,
    pub factual: ByLabel,
    /// Renders after the full flip.
    pub counterfactual: ByLabel,
    /// Fraction of positive validation samples whose render changes the sign
    /// of the confound statistic under the full flip.
    pub positive_sign_flip_rate: f64,
}

fn by_label(values: &[f64], labels: &[u8]) -> ByLabel {
    let mean = |want: u8| {
        let v: Vec<f64> = values
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(v, _)| *v)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    ByLabel {
        positive: mean(1),
        negative: mean(0),
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

struct Models {
    train: LabeledImageSet,
    val: LabeledImageSet,
    clf: TrainedClassifier,
    dvae: TrainedDvae,
    gen: TrainedGenerator,
    ablation: Option<TrainedGenerator>,
}

/// Runs (or resumes) the pipeline. A bias-split configuration runs both
/// splits in `split_a/` and `split_b/` and writes `bias_report.json`; the
/// returned artifacts are split A's.
pub fn run_pipeline(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    if let Some(rho_a) = config.bias_split {
        let (a, b) = bias_pair_configs(config, rho_a);
        let run_a = run_single(&a)?;
        let run_b = run_single(&b)?;
        emit_bias_report(&run_a.dir, &run_b.dir)?;
        return Ok(run_a);
    }
    run_single(config)
}

/// The two single-split configurations of a bias-split request.
pub fn bias_pair_configs(config: &RunConfig, rho_a: f64) -> (RunConfig, RunConfig) {
    let base = DatasetSpec {
        seed: config.seed,
        ..config.dataset.clone()
    };
    let (spec_a, spec_b) = datagen::bias_split_specs(&base, rho_a);
    let make = |name: &str, spec: DatasetSpec| RunConfig {
        output_dir: config.output_dir.join(name),
        seed: derive_seed(config.seed, name),
        dataset: spec,
        bias_split: None,
        ..config.clone()
    };
    (make("split_a", spec_a), make("split_b", spec_b))
}

fn run_single(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let cfg = config.resolved();
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let hash = config.hash()?;
    let manifest_path = dir.join("manifest.json");
    let prior: Option<RunManifest> = if manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        if m.config_hash != hash {
            return Err(Error::Artifact(format!(
                "{} holds a run with a different configuration (hash {}); use a fresh directory",
                dir.display(),
                m.config_hash
            )));
        }
        Some(m)
    } else {
        None
    };
    write_json(&dir.join("config.json"), &cfg)?;
    let mut runner = StageRunner {
        dir: &dir,
        prior,
        manifest: RunManifest {
            schema_version: SCHEMA_VERSION,
            config_hash: hash.clone(),
            stages: BTreeMap::new(),
        },
        upstream_fresh: false,
        trained: Vec::new(),
    };

    let (train, val) = runner.run(
        STAGE_DATA,
        |sub| Ok((LabeledImageSet::load(&sub.join("train"))?, LabeledImageSet::load(&sub.join("val"))?)),
        |sub| {
            let train = generate_dataset(&cfg.dataset)?;
            let val = generate_dataset(&cfg.val_spec())?;
            train.save(&sub.join("train"))?;
            val.save(&sub.join("val"))?;
            // reload so a fresh run sees exactly what a resumed one would
            Ok((LabeledImageSet::load(&sub.join("train"))?, LabeledImageSet::load(&sub.join("val"))?))
        },
    )?;
    let clf = runner.run(STAGE_CLASSIFIER, TrainedClassifier::load, |sub| {
        let clf = train_classifier(&cfg.classifier, &train, &val)?;
        clf.save(sub)?;
        TrainedClassifier::load(sub)
    })?;
    let dvae = runner.run(
        STAGE_DVAE,
        |sub| TrainedDvae::load(sub, Some(&clf.checksum())),
        |sub| {
            let phi = clf.hidden_repr(train.flat_images())?;
            let dvae = train_dvae(&cfg.dvae, phi.view())?.with_classifier_checksum(clf.checksum());
            dvae.save(sub)?;
            TrainedDvae::load(sub, Some(&clf.checksum()))
        },
    )?;
    let gen = runner.run(
        STAGE_GENERATOR,
        |sub| TrainedGenerator::load(sub, &clf, &dvae),
        |sub| {
            let gen = train_generator(&cfg.generator, &clf, &dvae, &train)?;
            gen.save(sub)?;
            TrainedGenerator::load(sub, &clf, &dvae)
        },
    )?;
    let ablation = match cfg.ablation_lambda {
        Some(lambda) => Some(runner.run(
            STAGE_ABLATION,
            |sub| TrainedGenerator::load(sub, &clf, &dvae),
            |sub| {
                let gcfg = GeneratorConfig {
                    lambda,
                    ..cfg.generator.clone()
                };
                let gen = train_generator(&gcfg, &clf, &dvae, &train)?;
                gen.save(sub)?;
                TrainedGenerator::load(sub, &clf, &dvae)
            },
        )?),
        None => None,
    };
    let models = Models {
        train,
        val,
        clf,
        dvae,
        gen,
        ablation,
    };

    let start = Instant::now();
    let (metrics, records) = compute_metrics(&cfg, &hash, &models).map_err(|e| e.in_stage("metrics"))?;
    let records_path = dir.join("records/full_flip.jsonl");
    fs::create_dir_all(dir.join("records"))?;
    intervention::write_records_jsonl(&records_path, &records)?;
    let panel_paths = write_panels(&dir, &cfg, &models, &records).map_err(|e| e.in_stage("panels"))?;
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    log::info!("metrics and panels in {:.1}s", start.elapsed().as_secs_f64());

    write_json(&manifest_path, &runner.manifest)?;
    Ok(RunArtifacts {
        config_path: dir.join("config.json"),
        manifest_path,
        metrics_path,
        records_path,
        panel_paths,
        trained_stages: runner.trained,
        manifest: runner.manifest,
        dir,
    })
}

fn compute_metrics(cfg: &RunConfig, hash: &str, m: &Models) -> Result<(Metrics, Vec<CounterfactualRecord>)> {
    let shape = cfg.dataset.image_shape;
    let fidelity = evaluate_fidelity(&m.clf, &m.dvae, &m.val)?;
    let (phi, phi_prime) = explainer::representations(&m.clf, &m.dvae, &m.val)?;
    let latent = m.dvae.encode_hard_batch(phi.view())?;
    let codes: Vec<Vec<u8>> = latent.iter().map(|c| c.bits.clone()).collect();

    let masks = vec![InterventionMask::full_flip(m.dvae.n_bits()); codes.len()];
    let records = intervention::counterfactual_batch(&m.dvae, &m.clf, &codes, &masks)?;
    let full_flip = records.iter().filter(|r| r.prediction_changed).count() as f64 / records.len() as f64;
    let mut sizes = Vec::new();
    for bits in &codes {
        if let Some(mask) = intervention::greedy_minimal_flip(&m.dvae, &m.clf, bits, m.dvae.n_bits())? {
            sizes.push(mask.len() as f64);
        }
    }
    let flip_rates = FlipRates {
        full_flip,
        greedy_minimal: sizes.len() as f64 / codes.len() as f64,
    };
    let greedy_mask_sizes = MaskSizeSummary {
        found: sizes.len(),
        mean: (!sizes.is_empty()).then(|| sizes.iter().sum::<f64>() / sizes.len() as f64),
        median: median(sizes),
    };
    let per_bit_effect = intervention::per_bit_effect_from_codes(&m.dvae, &m.clf, &codes)?;

    let n = m.dvae.n_bits();
    let decisiveness = latent
        .iter()
        .flat_map(|c| c.posterior_probs.iter().map(|p| (p - 0.5).abs()))
        .sum::<f64>()
        / (latent.len() * n) as f64;
    let active_bits = (0..n)
        .filter(|&i| {
            let first = latent[0].bits[i];
            latent.iter().any(|c| c.bits[i] != first)
        })
        .count();
    let bits = m.dvae.encode_bits(phi.view())?;
    let again = m.dvae.encode_bits(m.dvae.decode(bits.view())?.view())?;
    let fixed_point_rate = bits.iter().zip(again.iter()).filter(|(a, b)| a == b).count() as f64 / bits.len() as f64;

    let renders = m.gen.explain_batch(phi_prime.view())?;
    let val_mae = (&renders - &m.val.flat_images()).mapv(f64::abs).mean().unwrap_or(0.0);
    let psi = Array2::from_shape_fn((records.len(), m.clf.repr_dim()), |(r, c)| records[r].psi[c]);
    let cf_renders = m.gen.explain_batch(psi.view())?;
    let b_orig = confound_statistic_flat(m.val.flat_images(), shape)?;
    let b_fact = confound_statistic_flat(renders.view(), shape)?;
    let b_cf = confound_statistic_flat(cf_renders.view(), shape)?;
    let positives: Vec<usize> = (0..m.val.len()).filter(|&i| m.val.labels[i] == 1).collect();
    let sign_flips = positives
        .iter()
        .filter(|&&i| (b_fact[i] >= 0.0) != (b_cf[i] >= 0.0))
        .count();
    let bias = BiasMetrics {
        original: by_label(&b_orig, &m.val.labels),
        factual: by_label(&b_fact, &m.val.labels),
        counterfactual: by_label(&b_cf, &m.val.labels),
        positive_sign_flip_rate: sign_flips as f64 / positives.len().max(1) as f64,
    };

    let centers = cfg.diagnostic_centers.min(m.val.len());
    let diag_for = |g: &TrainedGenerator| {
        alignment_diagnostic(
            g.network(),
            &m.clf.head_probability_network(),
            phi.slice(s![..centers, ..]),
            phi_prime.slice(s![..centers, ..]),
            &cfg.diagnostic_probe,
        )
    };
    let diagnostic = diag_for(&m.gen)?;
    let ablation = match &m.ablation {
        Some(g) => {
            let d = diag_for(g)?;
            Some(AblationArm {
                lambda: g.config().lambda,
                alignment: d.alignment,
                diagnostic: d,
            })
        }
        None => None,
    };

    let metrics = Metrics {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.to_string(),
        seed: cfg.seed,
        dataset: DatasetMetrics {
            train_samples: m.train.len(),
            val_samples: m.val.len(),
            confound_correlation: cfg.dataset.confound_correlation,
            train_agreement_rate: m.train.agreement_rate(),
        },
        classifier_val_accuracy: m.clf.accuracy(&m.val)?,
        fidelity,
        flip_rates,
        greedy_mask_sizes,
        per_bit_effect,
        dvae: DvaeMetrics {
            decisiveness,
            active_bits,
            fixed_point_rate,
        },
        explainer: ExplainerMetrics {
            initial_recon: m.gen.initial_recon(),
            final_recon: m.gen.training_log().last().map_or(f64::NAN, |e| e.recon),
            val_mae,
        },
        info: InfoMetrics {
            lambda: m.gen.config().lambda,
            alignment: diagnostic.alignment,
            diagnostic,
            ablation,
        },
        bias,
    };
    Ok((metrics, records))
}

fn write_panels(dir: &Path, cfg: &RunConfig, m: &Models, records: &[CounterfactualRecord]) -> Result<Vec<PathBuf>> {
    let panel_dir = dir.join("panels");
    fs::create_dir_all(&panel_dir)?;
    let count = cfg.panel_count.min(m.val.len());
    let images = m.val.flat_images();
    let mut paths = Vec::new();
    for (name, choice) in [("full_flip", PanelMask::FullFlip), ("greedy_minimal", PanelMask::GreedyMinimal)] {
        let panels = (0..count)
            .map(|i| panel_from_bits(&m.gen, &m.dvae, &m.clf, images.row(i), &records[i].original_bits, &choice))
            .collect::<Result<Vec<_>>>()?;
        let path = panel_dir.join(format!("{name}.png"));
        export_panels(&path, &panels, cfg.dataset.image_shape, 4)?;
        paths.push(path);
    }
    Ok(paths)
}

/// A completed run loaded for read-only use.
#[derive(Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub manifest_hash: String,
    pub metrics_text: String,
    pub metrics: Metrics,
    pub val: LabeledImageSet,
    pub classifier: TrainedClassifier,
    pub dvae: TrainedDvae,
    pub generator: TrainedGenerator,
    pub records: Vec<CounterfactualRecord>,
}

impl LoadedRun {
    /// Loads a run, verifying every recorded checksum.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Artifact(format!(
                "run schema {} is not the supported version {SCHEMA_VERSION}",
                manifest.schema_version
            )));
        }
        for stage in manifest.stages.keys() {
            if matches!(stage_state(dir, stage, Some(&manifest))?, StageState::Missing) {
                return Err(Error::Artifact(format!("stage `{stage}` artifacts are missing")));
            }
        }
        let config: RunConfig = read_json(&dir.join("config.json"))?;
        let metrics_text = fs::read_to_string(dir.join("metrics.json"))?;
        let metrics: Metrics = serde_json::from_str(&metrics_text)?;
        let classifier = TrainedClassifier::load(&dir.join(stage_dir(STAGE_CLASSIFIER)))?;
        let dvae = TrainedDvae::load(&dir.join(stage_dir(STAGE_DVAE)), Some(&classifier.checksum()))?;
        let generator = TrainedGenerator::load(&dir.join(stage_dir(STAGE_GENERATOR)), &classifier, &dvae)?;
        Ok(LoadedRun {
            manifest_hash: RunManifest::file_hash(dir)?,
            val: LabeledImageSet::load(&dir.join("data/val"))?,
            records: intervention::read_records_jsonl(&dir.join("records/full_flip.jsonl"))?,
            dir: dir.to_path_buf(),
            config,
            manifest,
            metrics_text,
            metrics,
            classifier,
            dvae,
            generator,
        })
    }

    pub fn image_shape(&self) -> ImageShape {
        self.val.spec.image_shape
    }

    /// `phi(x)` for validation sample `id`.
    pub fn phi(&self, id: usize) -> Result<Array2<f64>> {
        let images = self.val.flat_images();
        if id >= images.nrows() {
            return Err(Error::IndexOutOfRange {
                index: id,
                len: images.nrows(),
            });
        }
        self.classifier.hidden_repr(images.slice(s![id..id + 1, ..]))
    }
}

/// One row of the regularization ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub seed: u64,
    pub lambda_off: f64,
    pub lambda_on: f64,
    pub without: f64,
    pub with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Markdown table with one row per task and seed.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Task | Seed | w/o regularization | w/ regularization |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!("| {} | {} | {:.2} | {:.2} |\n", r.task, r.seed, r.without, r.with));
        }
        out
    }

    /// Seeds where the regularized arm is at least as aligned.
    pub fn wins(&self) -> usize {
        self.rows.iter().filter(|r| r.with >= r.without).count()
    }
}

/// Paired runs per seed: the configured generator against one trained with
/// `ablation_lambda` (0 when unset). Each seed runs in `seed-<n>/`.
pub fn compare_regularization(config: &RunConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let cfg = RunConfig {
            seed,
            output_dir: config.output_dir.join(format!("seed-{seed}")),
            bias_split: None,
            ablation_lambda: Some(config.ablation_lambda.unwrap_or(0.0)),
            ..config.clone()
        };
        let run = run_single(&cfg)?;
        let metrics: Metrics = read_json(&run.metrics_path)?;
        let arm = metrics.info.ablation.expect("ablation arm requested");
        rows.push(AblationRow {
            task: "smile".into(),
            seed,
            lambda_off: arm.lambda,
            lambda_on: metrics.info.lambda,
            without: arm.alignment,
            with: metrics.info.alignment,
        });
    }
    let table = AblationTable {
        schema_version: SCHEMA_VERSION,
        rows,
    };
    fs::create_dir_all(&config.output_dir)?;
    write_json(&config.output_dir.join("ablation.json"), &table)?;
    fs::write(config.output_dir.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub dir: PathBuf,
    pub confound_correlation: f64,
    pub flip_rates: FlipRates,
    pub bias: BiasMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub schema_version: u32,
    pub split_a: SplitSummary,
    pub split_b: SplitSummary,
    /// Mean factual confound statistic of positives, split A minus split B.
    pub contrast: f64,
    pub opposite_sign: bool,
    /// `opposite_sign` and `|contrast| >= 0.05`.
    pub significant: bool,
}

pub const BIAS_MARGIN: f64 = 0.05;

/// Compares two completed split runs. Writes `bias_report.json` and one
/// panel grid of positive validation samples per split into the parent
/// directory of `run_a`.
pub fn emit_bias_report(run_a: &Path, run_b: &Path) -> Result<BiasReport> {
    let summary = |dir: &Path| -> Result<SplitSummary> {
        let m: Metrics = read_json(&dir.join("metrics.json"))?;
        Ok(SplitSummary {
            dir: dir.to_path_buf(),
            confound_correlation: m.dataset.confound_correlation,
            flip_rates: m.flip_rates,
            bias: m.bias,
        })
    };
    let (a, b) = (summary(run_a)?, summary(run_b)?);
    let (pa, pb) = (a.bias.factual.positive, b.bias.factual.positive);
    let contrast = pa - pb;
    let opposite_sign = pa * pb < 0.0;
    let report = BiasReport {
        schema_version: SCHEMA_VERSION,
        significant: opposite_sign && contrast.abs() >= BIAS_MARGIN,
        opposite_sign,
        contrast,
        split_a: a,
        split_b: b,
    };
    let out_dir = run_a.parent().unwrap_or(run_a);
    for (name, dir) in [("split_a", run_a), ("split_b", run_b)] {
        let run = LoadedRun::open(dir)?;
        let positives: Vec<usize> = (0..run.val.len()).filter(|&i| run.val.labels[i] == 1).take(6).collect();
        let images = run.val.flat_images();
        let panels = positives
            .iter()
            .map(|&i| {
                panel_from_bits(
                    &run.generator,
                    &run.dvae,
                    &run.classifier,
                    images.row(i),
                    &run.records[i].original_bits,
                    &PanelMask::FullFlip,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        export_panels(&out_dir.join(format!("bias_{name}.png")), &panels, run.image_shape(), 4)?;
    }
    write_json(&out_dir.join("bias_report.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 3, "dataset": {"n_samples": 500}, "generator": {"lambda": 0.1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.n_samples, 500);
        assert_eq!(cfg.dataset.confound_correlation, 0.9);
        assert_eq!(cfg.generator.lambda, 0.1);
        assert_eq!(cfg.generator.epochs, GeneratorConfig::default().epochs);
        assert_eq!(cfg.val_samples, 1000);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = RunConfig::smoke("x");
        let b = RunConfig::smoke("y");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn stage_seeds_follow_the_global_seed() {
        let a = RunConfig::smoke("x").resolved();
        let b = RunConfig { seed: 1, ..RunConfig::smoke("x") }.resolved();
        assert_ne!(a.dataset.seed, b.dataset.seed);
        assert_ne!(a.classifier.seed, b.classifier.seed);
        assert_ne!(a.dataset.seed, a.val_spec().seed);
        assert_eq!(a, RunConfig::smoke("x").resolved());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
