//! Bit-flip interventions on the discrete latent code and the counterfactual
//! representations `psi(x) = decode(flip(bits))` they induce.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classifier::{predicted_class, TrainedClassifier};
use crate::datagen::LabeledImageSet;
use crate::dvae::{LatentCode, TrainedDvae};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullFlip,
    SingleBit,
    GreedyMinimal,
    /// Caller-chosen indices (the explorer's toggles).
    Manual,
}

/// A sorted set of bit indices to toggle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionMask {
    flip_indices: Vec<usize>,
    strategy_tag: Strategy,
}

impl InterventionMask {
    /// Sorts the indices; duplicates are rejected.
    pub fn new(mut indices: Vec<usize>, strategy_tag: Strategy) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("flip_indices", "indices must be unique"));
        }
        Ok(InterventionMask {
            flip_indices: indices,
            strategy_tag,
        })
    }

    pub fn empty() -> Self {
        InterventionMask {
            flip_indices: Vec::new(),
            strategy_tag: Strategy::Manual,
        }
    }

    pub fn full_flip(n_bits: usize) -> Self {
        InterventionMask {
            flip_indices: (0..n_bits).collect(),
            strategy_tag: Strategy::FullFlip,
        }
    }

    pub fn single_bit(index: usize) -> Self {
        InterventionMask {
            flip_indices: vec![index],
            strategy_tag: Strategy::SingleBit,
        }
    }

    pub fn flip_indices(&self) -> &[usize] {
        &self.flip_indices
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy_tag
    }

    pub fn len(&self) -> usize {
        self.flip_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flip_indices.is_empty()
    }

    /// Errors unless every index is below `n_bits`.
    pub fn check(&self, n_bits: usize) -> Result<()> {
        match self.flip_indices.last() {
            Some(&last) if last >= n_bits => Err(Error::IndexOutOfRange {
                index: last,
                len: n_bits,
            }),
            _ => Ok(()),
        }
    }
}

/// Toggles `bits[i]` for every `i` in the mask.
pub fn flip(bits: &[u8], mask: &InterventionMask) -> Result<Vec<u8>> {
    mask.check(bits.len())?;
    let mut out = bits.to_vec();
    for &i in mask.flip_indices() {
        out[i] ^= 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub original_bits: Vec<u8>,
    pub flipped_bits: Vec<u8>,
    pub mask: InterventionMask,
    pub psi: Vec<f64>,
    pub p_original: f64,
    pub p_counterfactual: f64,
    pub prediction_changed: bool,
}

fn check_compatible(dvae: &TrainedDvae, clf: &TrainedClassifier) -> Result<()> {
    if dvae.repr_dim() != clf.repr_dim() {
        return Err(Error::Shape(format!(
            "dvae models {}-d representations, classifier head takes {}",
            dvae.repr_dim(),
            clf.repr_dim()
        )));
    }
    Ok(())
}

fn bits_matrix(rows: &[Vec<u8>]) -> Array2<f64> {
    let n = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), n), |(r, c)| rows[r][c] as f64)
}

/// Head probabilities of the decoded bit vectors.
fn decode_and_score(dvae: &TrainedDvae, clf: &TrainedClassifier, bits: &[Vec<u8>]) -> Result<(Array2<f64>, Vec<f64>)> {
    let reprs = dvae.decode(bits_matrix(bits).view())?;
    let p = clf.head_predict(reprs.view())?;
    Ok((reprs, p.to_vec()))
}

pub fn counterfactual(
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    bits: &[u8],
    mask: &InterventionMask,
) -> Result<CounterfactualRecord> {
    let mut out = counterfactual_batch(dvae, clf, &[bits.to_vec()], std::slice::from_ref(mask))?;
    Ok(out.pop().expect("one record"))
}

/// One record per `(bits, mask)` pair, evaluated in a single batch.
pub fn counterfactual_batch(
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    bits: &[Vec<u8>],
    masks: &[InterventionMask],
) -> Result<Vec<CounterfactualRecord>> {
    check_compatible(dvae, clf)?;
    if bits.len() != masks.len() {
        return Err(Error::Shape("one mask per bit vector is required".into()));
    }
    if bits.is_empty() {
        return Ok(Vec::new());
    }
    let flipped = bits
        .iter()
        .zip(masks)
        .map(|(b, m)| flip(b, m))
        .collect::<Result<Vec<_>>>()?;
    let (_, p_orig) = decode_and_score(dvae, clf, bits)?;
    let (psi, p_cf) = decode_and_score(dvae, clf, &flipped)?;
    Ok(bits
        .iter()
        .zip(flipped)
        .zip(masks)
        .enumerate()
        .map(|(r, ((b, f), m))| CounterfactualRecord {
            original_bits: b.clone(),
            flipped_bits: f,
            mask: m.clone(),
            psi: psi.row(r).to_vec(),
            p_original: p_orig[r],
            p_counterfactual: p_cf[r],
            prediction_changed: predicted_class(p_orig[r]) != predicted_class(p_cf[r]),
        })
        .collect())
}

/// Greedy search for a small mask that changes the predicted class. Each
/// step adds the bit whose flip moves `p` furthest toward the opposite class
/// (lowest index on ties). `None` if the budget runs out first.
pub fn greedy_minimal_flip(
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    bits: &[u8],
    max_budget: usize,
) -> Result<Option<InterventionMask>> {
    check_compatible(dvae, clf)?;
    let n = bits.len();
    if n != dvae.n_bits() {
        return Err(Error::Shape(format!("expected {} bits, got {n}", dvae.n_bits())));
    }
    let (_, p0) = decode_and_score(dvae, clf, &[bits.to_vec()])?;
    let start_class = predicted_class(p0[0]);
    // flipping toward class 0 means lowering p
    let toward = |p: f64| if start_class == 1 { -p } else { p };

    let mut chosen: Vec<usize> = Vec::new();
    let mut current = bits.to_vec();
    for _ in 0..max_budget.min(n) {
        let candidates: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        let trial: Vec<Vec<u8>> = candidates
            .iter()
            .map(|&i| {
                let mut t = current.clone();
                t[i] ^= 1;
                t
            })
            .collect();
        let (_, p) = decode_and_score(dvae, clf, &trial)?;
        let mut best = 0;
        for k in 1..candidates.len() {
            if toward(p[k]) > toward(p[best]) {
                best = k;
            }
        }
        chosen.push(candidates[best]);
        current = trial[best].clone();
        if predicted_class(p[best]) != start_class {
            let mask = InterventionMask::new(chosen, Strategy::GreedyMinimal)?;
            let record = counterfactual(dvae, clf, bits, &mask)?;
            return Ok(record.prediction_changed.then_some(mask));
        }
    }
    Ok(None)
}

fn hard_codes(dvae: &TrainedDvae, clf: &TrainedClassifier, data: &LabeledImageSet) -> Result<Vec<Vec<u8>>> {
    check_compatible(dvae, clf)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phi = clf.hidden_repr(data.flat_images())?;
    codes_from_reprs(dvae, phi.view())
}

pub fn codes_from_reprs(dvae: &TrainedDvae, phi: ArrayView2<f64>) -> Result<Vec<Vec<u8>>> {
    Ok(dvae
        .encode_hard_batch(phi)?
        .into_iter()
        .map(|LatentCode { bits, .. }| bits)
        .collect())
}

/// Fraction of samples whose predicted class changes under the strategy.
pub fn flip_rate(
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    data: &LabeledImageSet,
    strategy: Strategy,
) -> Result<f64> {
    let codes = hard_codes(dvae, clf, data)?;
    flip_rate_from_codes(dvae, clf, &codes, strategy)
}

pub fn flip_rate_from_codes(
    dvae: &TrainedDvae,
    clf: &TrainedClassifier,
    codes: &[Vec<u8>],
    strategy: Strategy,
) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let changed = match strategy {
        Strategy::FullFlip => {
            let masks = vec![InterventionMask::full_flip(dvae.n_bits()); codes.len()];
            counterfactual_batch(dvae, clf, codes, &masks)?
                .iter()
                .filter(|r| r.prediction_changed)
                .count()
        }
        Strategy::GreedyMinimal => {
            let mut count = 0;
            for bits in codes {
                if greedy_minimal_flip(dvae, clf, bits, dvae.n_bits())?.is_some() {
                    count += 1;
                }
            }
            count
        }
        other => {
            return Err(Error::invalid(
                "strategy",
                format!("flip rate is defined for full_flip and greedy_minimal, not {other:?}"),
            ))
        }
    };
    Ok(changed as f64 / codes.len() as f64)
}

/// Mean `|p(flip bit i) - p(original)|` over the dataset, per bit.
pub fn per_bit_effect(dvae: &TrainedDvae, clf: &TrainedClassifier, data: &LabeledImageSet) -> Result<Vec<f64>> {
    let codes = hard_codes(dvae, clf, data)?;
    per_bit_effect_from_codes(dvae, clf, &codes)
}

pub fn per_bit_effect_from_codes(dvae: &TrainedDvae, clf: &TrainedClassifier, codes: &[Vec<u8>]) -> Result<Vec<f64>> {
    check_compatible(dvae, clf)?;
    if codes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dvae.n_bits();
    let mut effect = vec![0.0; n];
    for bits in codes {
        let mut rows = Vec::with_capacity(n + 1);
        rows.push(bits.clone());
        for i in 0..n {
            let mut t = bits.clone();
            t[i] ^= 1;
            rows.push(t);
        }
        let (_, p) = decode_and_score(dvae, clf, &rows)?;
        for i in 0..n {
            effect[i] += (p[i + 1] - p[0]).abs();
        }
    }
    effect.iter_mut().for_each(|e| *e /= codes.len() as f64);
    Ok(effect)
}

/// Writes one JSON object per line.
pub fn write_records_jsonl(path: &Path, records: &[CounterfactualRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<CounterfactualRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
