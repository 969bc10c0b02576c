//! Generate a bias-split pair and show how strongly the tint tracks the label.
//!
//!     cargo run --release --example bias_splits

use latent_lens::datagen::{confound_statistic, make_bias_splits, DatasetSpec};

fn main() -> latent_lens::Result<()> {
    let spec = DatasetSpec {
        n_samples: 2000,
        ..DatasetSpec::default()
    };
    let pair = make_bias_splits(&spec, 0.9)?;
    for (name, set) in [("split_a", &pair.split_a), ("split_b", &pair.split_b)] {
        let b = confound_statistic(set.images.view())?;
        let mean_pos = mean(b.iter().zip(&set.labels).filter(|(_, &l)| l == 1).map(|(v, _)| *v));
        let mean_neg = mean(b.iter().zip(&set.labels).filter(|(_, &l)| l == 0).map(|(v, _)| *v));
        println!(
            "{name}: rho {:.1}, label/confound agreement {:.3}, mean B positives {mean_pos:+.3}, negatives {mean_neg:+.3}",
            set.spec.confound_correlation,
            set.agreement_rate()
        );
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}
