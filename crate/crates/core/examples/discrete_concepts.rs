//! Train a small classifier, fit a DVAE to its hidden layer, and intervene
//! on the discovered bits.
//!
//!     cargo run --release --example discrete_concepts

use latent_lens::classifier::{evaluate_fidelity, train_classifier};
use latent_lens::datagen::{generate_dataset, DatasetSpec};
use latent_lens::dvae::train_dvae;
use latent_lens::intervention::{self, counterfactual, greedy_minimal_flip, InterventionMask, Strategy};
use latent_lens::pipeline::RunConfig;

fn main() -> latent_lens::Result<()> {
    let cfg = RunConfig::smoke("unused");
    let train = generate_dataset(&DatasetSpec {
        n_samples: 600,
        ..cfg.dataset.clone()
    })?;
    let val = generate_dataset(&DatasetSpec {
        n_samples: 200,
        seed: 1,
        ..cfg.dataset.clone()
    })?;
    let clf = train_classifier(&cfg.classifier, &train, &val)?;
    let dvae = train_dvae(&cfg.dvae, clf.hidden_repr(train.flat_images())?.view())?;

    let fidelity = evaluate_fidelity(&clf, &dvae, &val)?;
    println!("fidelity: {fidelity:?}");
    for strategy in [Strategy::FullFlip, Strategy::GreedyMinimal] {
        let rate = intervention::flip_rate(&dvae, &clf, &val, strategy)?;
        println!("{strategy:?} flip rate: {rate:.3}");
    }
    let effects = intervention::per_bit_effect(&dvae, &clf, &val)?;
    println!("mean |delta p| per bit: {effects:.3?}");

    let phi = clf.hidden_repr(val.flat_images())?;
    let code = dvae.encode_hard(phi.row(0))?;
    println!("sample 0 bits {:?}, posteriors {:.2?}", code.bits, code.posterior_probs);
    let all = counterfactual(&dvae, &clf, &code.bits, &InterventionMask::full_flip(dvae.n_bits()))?;
    println!(
        "flip all: p {:.3} -> {:.3}, changed {}",
        all.p_original, all.p_counterfactual, all.prediction_changed
    );
    match greedy_minimal_flip(&dvae, &clf, &code.bits, dvae.n_bits())? {
        Some(mask) => println!("smallest greedy mask: {:?}", mask.flip_indices()),
        None => println!("no mask within budget changes the prediction"),
    }
    Ok(())
}
