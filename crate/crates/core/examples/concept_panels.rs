//! Train the explanatory generator on top of a frozen classifier and DVAE,
//! then export factual / counterfactual panels as a PNG grid.
//!
//!     cargo run --release --example concept_panels -- panels.png

use std::path::PathBuf;

use latent_lens::classifier::train_classifier;
use latent_lens::datagen::{generate_dataset, DatasetSpec};
use latent_lens::dvae::train_dvae;
use latent_lens::explainer::{concept_panel, export_panels, train_generator, PanelMask};
use latent_lens::pipeline::RunConfig;

fn main() -> latent_lens::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "panels.png".into()));
    let cfg = RunConfig::smoke("unused");
    let train = generate_dataset(&DatasetSpec {
        n_samples: 400,
        ..cfg.dataset.clone()
    })?;
    let val = generate_dataset(&DatasetSpec {
        n_samples: 8,
        seed: 1,
        ..cfg.dataset.clone()
    })?;
    let clf = train_classifier(&cfg.classifier, &train, &val)?;
    let dvae = train_dvae(&cfg.dvae, clf.hidden_repr(train.flat_images())?.view())?;
    let gen = train_generator(&cfg.generator, &clf, &dvae, &train)?;
    for e in gen.training_log() {
        println!(
            "epoch {}: recon {:.4} penalty {:.3e} alignment {:.3}",
            e.epoch, e.recon, e.penalty, e.alignment
        );
    }

    let images = val.flat_images();
    let panels = (0..val.len())
        .map(|i| concept_panel(&gen, &dvae, &clf, images.row(i), &PanelMask::FullFlip))
        .collect::<latent_lens::Result<Vec<_>>>()?;
    for (i, p) in panels.iter().enumerate() {
        println!(
            "sample {i}: p {:.3} -> {:.3}, B factual {:+.3} counterfactual {:+.3}",
            p.p_original, p.p_counterfactual, p.bias_statistics.factual, p.bias_statistics.counterfactual
        );
    }
    export_panels(&out, &panels, val.spec.image_shape, 4)?;
    println!("wrote {} and its .json sidecar", out.display());
    Ok(())
}
