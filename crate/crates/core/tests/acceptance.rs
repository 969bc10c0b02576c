//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4-7 share, per seed, one bias-split pair (split A at rho=0.9,
//! N=4000, 3x32x32, plus a lambda=0 generator arm; split B at rho=0.1).
//! Split A has the default run's distribution and answers 4-6.
//!
//! Set `ACCEPTANCE_DIR` (absolute; tests run from the package directory) to
//! keep the runs; a rerun resumes from them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use latent_lens::classifier::{ClassifierConfig, ClassifierNetworks, ConvLayerConfig};
use latent_lens::datagen::{generate_dataset, DatasetSpec, ImageShape};
use latent_lens::dvae::{bernoulli_kl, uniform_noise, DvaeConfig, DvaeNetworks};
use latent_lens::infotheory::{
    coordinate_info, inverse_similarity_penalty, layer_info_with_offsets, penalty_and_gradient, probe_offsets,
    FnProbe, GaussianProbe, DOT_FLOOR,
};
use latent_lens::nn::{Activation, ConvGeometry, LayerSpec, Network};
use latent_lens::pipeline::{
    bias_pair_configs, emit_bias_report, run_pipeline, BiasReport, Metrics, RunConfig, BIAS_MARGIN,
};
use latent_lens::seed;
use ndarray::{array, Array1, Array2};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: u8,
    pass: bool,
    detail: String,
}

fn line(id: u8, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

fn exp_fn(dim: usize, coord: usize) -> FnProbe<impl Fn(ndarray::ArrayView1<f64>, usize) -> (Vec<f64>, Vec<f64>)> {
    FnProbe::new(dim, move |p: ndarray::ArrayView1<f64>, c: usize| {
        let v = p[coord].exp();
        (vec![v], vec![if c == coord { v } else { 0.0 }])
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let expected = 0.5f64.exp();
    let center = Array1::zeros(4);
    let mut worst: f64 = 0.0;
    let mut values = Vec::new();
    for s in SEEDS {
        let probe = GaussianProbe::new(10_000, s).unwrap();
        let v = coordinate_info(&exp_fn(4, 2), center.view(), 2, &probe).unwrap();
        worst = worst.max((v - expected).abs() / expected);
        values.push(format!("{v:.4}"));
    }
    let constant = FnProbe::new(4, |_: ndarray::ArrayView1<f64>, _| (vec![2.5], vec![0.0]));
    let zero = coordinate_info(&constant, center.view(), 1, &GaussianProbe::new(10_000, 0).unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        worst <= 0.05 && zero == 0.0 && secs < 10.0,
        format!(
            "Fisher oracle e^0.5={expected:.4}: [{}], max rel err {:.2}%, constant {zero}, {secs:.1}s",
            values.join(", "),
            worst * 100.0
        ),
    )
}

fn criterion_2() -> Outcome {
    // 0.9 ln 1.8 + 0.1 ln 0.2
    let analytic = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    let kl = bernoulli_kl(array![0.9].view(), 0.5);
    let same = bernoulli_kl(array![0.3, 0.3, 0.3].view(), 0.3)
        + bernoulli_kl(array![0.5].view(), 0.5)
        + bernoulli_kl(array![0.77].view(), 0.77);
    line(
        2,
        (kl - 0.3681).abs() <= 1e-4 && (kl - analytic).abs() <= 1e-6 && same == 0.0,
        format!("KL(0.9||0.5)={kl:.7} (analytic {analytic:.7}), KL(q=p)={same}"),
    )
}

/// `||a - b|| / max(||a||, ||b||)` over the checked coordinates.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-300)
}

fn sampled_coords(n: usize, k: usize, stream: &str) -> Vec<usize> {
    let mut rng = seed::stream(3, stream);
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn fd_check(net: &mut Network, coords: &[usize], analytic: &[f64], h: f64, f: impl Fn(&Network) -> f64) -> f64 {
    let mut numeric = Vec::new();
    let mut picked = Vec::new();
    for &k in coords {
        let orig = net.params()[k];
        net.params_mut()[k] = orig + h;
        let up = f(net);
        net.params_mut()[k] = orig - h;
        let down = f(net);
        net.params_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * h));
        picked.push(analytic[k]);
    }
    rel_err(&picked, &numeric)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let shape = ImageShape::new(3, 16, 16);
    let data = generate_dataset(&DatasetSpec {
        image_shape: shape,
        n_samples: 8,
        seed: 5,
        ..DatasetSpec::default()
    })
    .unwrap();
    let labels = data.labels_f64().to_vec();

    // classifier
    let cfg = ClassifierConfig {
        image_shape: shape,
        conv_layers: vec![ConvLayerConfig {
            out_channels: 4,
            kernel: 3,
            stride: 2,
        }],
        fc_widths: vec![16, 8],
        seed: 17,
        ..ClassifierConfig::default()
    };
    let mut nets = ClassifierNetworks::build(&cfg).unwrap();
    let (_, gb, gh) = nets
        .loss_and_gradients::<rand_chacha::ChaCha8Rng>(data.flat_images(), &labels, None)
        .unwrap();
    let images = data.flat_images().to_owned();
    let coords = sampled_coords(nets.backbone.num_params(), 40, "backbone");
    let head = nets.head.clone();
    let e_backbone = fd_check(&mut nets.backbone, &coords, &gb, 1e-5, |b| {
        head.forward(b.forward(images.view()).unwrap().view())
            .map(|logits| bce(&logits, &labels))
            .unwrap()
    });
    let backbone = nets.backbone.clone();
    let repr = backbone.forward(images.view()).unwrap();
    let coords = sampled_coords(nets.head.num_params(), 40, "head");
    let e_head = fd_check(&mut nets.head, &coords, &gh, 1e-5, |h| bce(&h.forward(repr.view()).unwrap(), &labels));
    let e_clf = e_backbone.max(e_head);

    // DVAE relaxed path, noise frozen
    let dcfg = DvaeConfig {
        n_bits: 6,
        encoder_widths: [12, 10, 8, 6],
        seed: 4,
        ..DvaeConfig::default()
    };
    let mut dvae = DvaeNetworks::build(&dcfg, 8).unwrap();
    let mut rng = seed::stream(9, "phi");
    let phi = Array2::from_shape_simple_fn((5, 8), || rng.random_range(0.0..2.0));
    let u = uniform_noise(5, 6, &mut seed::stream(9, "noise"));
    let (tau, klw) = (0.7, 1.0);
    let (_, g_enc, g_dec, _) = dvae.loss_with_noise(phi.view(), tau, u.view(), klw).unwrap();
    let decoder = dvae.decoder.clone();
    let enc_coords = sampled_coords(dvae.encoder.num_params(), 40, "encoder");
    let e_enc = fd_check(&mut dvae.encoder, &enc_coords, &g_enc, 1e-6, |e| {
        let d = DvaeNetworks {
            encoder: e.clone(),
            decoder: decoder.clone(),
            prior: 0.5,
        };
        d.loss_with_noise(phi.view(), tau, u.view(), klw).unwrap().0.elbo_neg
    });
    let encoder = dvae.encoder.clone();
    let dec_coords = sampled_coords(dvae.decoder.num_params(), 40, "decoder");
    let e_dec = fd_check(&mut dvae.decoder, &dec_coords, &g_dec, 1e-6, |d| {
        let m = DvaeNetworks {
            encoder: encoder.clone(),
            decoder: d.clone(),
            prior: 0.5,
        };
        m.loss_with_noise(phi.view(), tau, u.view(), klw).unwrap().0.elbo_neg
    });
    let e_dvae = e_enc.max(e_dec);

    // inverse similarity penalty through a small transposed-conv generator
    let geom = ConvGeometry {
        channels_in: 3,
        channels_out: 4,
        kernel: 4,
        stride: 2,
        padding: 1,
        height: 8,
        width: 8,
    };
    let specs = [
        LayerSpec::Dense { inputs: 6, outputs: 64 },
        LayerSpec::Activation(Activation::Relu),
        LayerSpec::ConvTranspose2d(geom),
        LayerSpec::Activation(Activation::Sigmoid),
    ];
    let mut g = Network::new(&specs, &mut seed::stream(21, "gen")).unwrap();
    let mut rng = seed::stream(21, "centers");
    let centers = Array2::from_shape_simple_fn((2, 6), || rng.random_range(0.0..1.5));
    let offsets = probe_offsets(&GaussianProbe::new(8, 2).unwrap(), 2, 6);
    let head_info = [0.05, 0.3, 0.1, 0.25, 0.2, 0.1];
    let lambda = 0.3;
    let eval = penalty_and_gradient(&g, centers.view(), offsets.view(), &head_info, lambda, DOT_FLOOR).unwrap();
    let coords = sampled_coords(g.num_params(), 40, "penalty");
    let e_pen = fd_check(&mut g, &coords, &eval.grads, 1e-6, |g| {
        let info = layer_info_with_offsets(g, centers.view(), offsets.view()).unwrap();
        lambda * inverse_similarity_penalty(&info, &head_info, DOT_FLOOR)
    });

    let secs = start.elapsed().as_secs_f64();
    line(
        3,
        e_clf <= 1e-3 && e_dvae <= 1e-3 && e_pen <= 1e-2 && secs < 120.0,
        format!("rel err classifier {e_clf:.1e}, dvae {e_dvae:.1e}, penalty {e_pen:.1e}, {secs:.1}s"),
    )
}

fn bce(logits: &Array2<f64>, labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    logits
        .column(0)
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

struct PairResult {
    seed: u64,
    a: Metrics,
    report: BiasReport,
    secs: f64,
}

fn run_pair(root: &Path, seed: u64) -> PairResult {
    let cfg = RunConfig {
        seed,
        output_dir: root.join(format!("pair-{seed}")),
        ablation_lambda: Some(0.0),
        ..RunConfig::default()
    };
    let (cfg_a, cfg_b) = bias_pair_configs(&cfg, 0.9);
    let start = Instant::now();
    let run_a = run_pipeline(&cfg_a).unwrap_or_else(|e| panic!("seed {seed} split A: {e}"));
    let secs = start.elapsed().as_secs_f64();
    let run_b = run_pipeline(&cfg_b).unwrap_or_else(|e| panic!("seed {seed} split B: {e}"));
    let report = emit_bias_report(&run_a.dir, &run_b.dir).unwrap();
    let a: Metrics = serde_json::from_str(&std::fs::read_to_string(&run_a.metrics_path).unwrap()).unwrap();
    eprintln!("seed {seed}: split A pipeline {secs:.0}s, pair {:.0}s", start.elapsed().as_secs_f64());
    PairResult { seed, a, report, secs }
}

fn criterion_4(pairs: &[PairResult]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in pairs {
        let f = &p.a.fidelity;
        let pass = f.acc_phi >= 0.90 && f.agreement >= 0.90 && (f.acc_phi - f.acc_phi_prime).abs() <= 0.05;
        ok &= pass && p.secs <= 30.0 * 60.0;
        parts.push(format!(
            "seed {}: acc {:.3} acc' {:.3} agree {:.3} ({:.0}s)",
            p.seed, f.acc_phi, f.acc_phi_prime, f.agreement, p.secs
        ));
    }
    line(4, ok, parts.join("; "))
}

fn criterion_5(pairs: &[PairResult]) -> Outcome {
    let rates: Vec<f64> = pairs.iter().map(|p| p.a.flip_rates.full_flip).collect();
    let wins = rates.iter().filter(|&&r| r >= 0.80).count();
    line(
        5,
        wins >= 2,
        format!(
            "full_flip rates {:?}, {wins}/3 >= 0.80 (greedy {:?})",
            rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            pairs
                .iter()
                .map(|p| format!("{:.3}", p.a.flip_rates.greedy_minimal))
                .collect::<Vec<_>>()
        ),
    )
}

fn criterion_6(pairs: &[PairResult]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for p in pairs {
        let with = p.a.info.alignment;
        let without = p.a.info.ablation.as_ref().expect("ablation arm").alignment;
        if with - without >= 0.15 {
            wins += 1;
        }
        parts.push(format!("seed {}: {without:.3} -> {with:.3}", p.seed));
    }
    line(6, wins >= 2, format!("{}; {wins}/3 gain >= 0.15", parts.join("; ")))
}

fn criterion_7(pairs: &[PairResult]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for p in pairs {
        let r = &p.report;
        let flips = r.split_a.bias.positive_sign_flip_rate;
        let pass = r.opposite_sign && r.contrast.abs() >= BIAS_MARGIN && flips >= 0.60;
        if pass {
            wins += 1;
        }
        parts.push(format!(
            "seed {}: B_a {:+.3} B_b {:+.3} cf sign flips {:.2}/{:.2}",
            p.seed,
            r.split_a.bias.factual.positive,
            r.split_b.bias.factual.positive,
            flips,
            r.split_b.bias.positive_sign_flip_rate
        ));
    }
    line(7, wins >= 2, format!("{}; {wins}/3", parts.join("; ")))
}

fn criterion_8(root: &Path) -> Outcome {
    let read = |p: &Path| std::fs::read(p).unwrap();
    let a = run_pipeline(&RunConfig::smoke(root.join("determinism/a"))).unwrap();
    let b = run_pipeline(&RunConfig::smoke(root.join("determinism/b"))).unwrap();
    let same = read(&a.metrics_path) == read(&b.metrics_path);
    let resumed = run_pipeline(&RunConfig::smoke(root.join("determinism/a"))).unwrap();
    let same_resumed = read(&a.metrics_path) == read(&resumed.metrics_path);
    line(
        8,
        same && same_resumed,
        format!("fresh rerun identical: {same}, resumed rerun identical: {same_resumed}"),
    )
}

fn main() -> ExitCode {
    let _ = env_logger::builder().is_test(true).try_init();
    let tmp;
    let root = match std::env::var_os("ACCEPTANCE_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => {
            tmp = tempfile::tempdir().unwrap();
            tmp.path().to_path_buf()
        }
    };
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3()];
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    let pairs: Vec<PairResult> = SEEDS.iter().map(|&s| run_pair(&root, s)).collect();
    let later = [
        criterion_4(&pairs),
        criterion_5(&pairs),
        criterion_6(&pairs),
        criterion_7(&pairs),
        criterion_8(&root),
    ];
    for o in &later {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    outcomes.extend(later);
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {}/{} passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
