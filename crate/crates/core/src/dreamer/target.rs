use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SeedProvenance, SeedStrategy, TargetMode};
use crate::classifier::ModelWeights;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Logit vector a target-matching run aims for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub class: usize,
    pub logits: Vec<f64>,
    /// `logits[class]`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedChoice {
    pub series: Vec<f64>,
    pub provenance: SeedProvenance,
}

/// Eval-mode logits of every class-`c` training series, with their indices.
pub(crate) fn class_logits(model: &ModelWeights, train: &Dataset, c: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let (idx, series): (Vec<usize>, Vec<&[f64]>) =
        train.of_class(c).map(|(i, s)| (i, s.values.as_slice())).unzip();
    let logits = model.logits_batch(&series)?;
    Ok(idx.into_iter().zip(logits).collect())
}

pub(crate) fn target_from_logits(
    class_logits: &[(usize, Vec<f64>)],
    c: usize,
    mode: TargetMode,
    k: f64,
) -> Result<TargetSpec> {
    let Some((_, first)) = class_logits.first() else {
        return Err(Error::Data(format!("no training samples of class {c}")));
    };
    let width = first.len();
    if c >= width {
        return Err(Error::invalid(format!("class {c} out of range for {width} logits")));
    }
    let n = class_logits.len() as f64;
    let mean: Vec<f64> = (0..width)
        .map(|j| class_logits.iter().map(|(_, l)| l[j]).sum::<f64>() / n)
        .collect();
    let logits = match mode {
        TargetMode::Center => mean,
        TargetMode::Max => (0..width)
            .map(|j| {
                if j == c {
                    k * mean[c]
                } else {
                    class_logits.iter().map(|(_, l)| l[j]).fold(f64::INFINITY, f64::min)
                }
            })
            .collect(),
    };
    Ok(TargetSpec {
        class: c,
        score: logits[c],
        logits,
    })
}

/// Target logits for class `c`: the class mean (`Center`), or `k` times the
/// mean class score with every other score at its class-`c` minimum (`Max`).
pub fn target_logits(model: &ModelWeights, train: &Dataset, c: usize, mode: TargetMode, k: f64) -> Result<TargetSpec> {
    target_from_logits(&class_logits(model, train, c)?, c, mode, k)
}

pub(crate) fn seed_from_logits<R: Rng + ?Sized>(
    train: &Dataset,
    class_logits: &[(usize, Vec<f64>)],
    spec: &TargetSpec,
    strategy: SeedStrategy,
    given: Option<&[f64]>,
    rng: &mut R,
) -> Result<SeedChoice> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let provenance = |train_index| SeedProvenance { strategy, train_index };
    match strategy {
        SeedStrategy::MeanActivationNearest => {
            let mut best: Option<(f64, usize)> = None;
            for (i, l) in class_logits {
                let d: f64 = l.iter().zip(&spec.logits).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, *i));
                }
            }
            let (_, i) = best.ok_or_else(|| Error::Data(format!("no training samples of class {}", spec.class)))?;
            Ok(SeedChoice {
                series: train.series()[i].values.clone(),
                provenance: provenance(Some(i)),
            })
        }
        SeedStrategy::RandomNoise => {
            let st = train.stats();
            let normal = Normal::new(st.mean, st.std).map_err(|e| Error::Data(format!("noise from training stats: {e}")))?;
            Ok(SeedChoice {
                series: (0..train.length()).map(|_| normal.sample(rng)).collect(),
                provenance: provenance(None),
            })
        }
        SeedStrategy::GivenSeries => {
            let series = given.ok_or_else(|| Error::invalid("given-series strategy needs a series"))?;
            if series.len() != train.length() {
                return Err(Error::shape(format!(
                    "given series has length {}, training series have {}",
                    series.len(),
                    train.length()
                )));
            }
            Ok(SeedChoice {
                series: series.to_vec(),
                provenance: provenance(None),
            })
        }
    }
}

/// Starting series for a run toward `spec`: the class sample whose logits are
/// nearest to the target (lowest index on ties), Gaussian noise at the
/// training mean and spread, or a copy of `given`.
pub fn select_seed_input<R: Rng + ?Sized>(
    model: &ModelWeights,
    train: &Dataset,
    spec: &TargetSpec,
    strategy: SeedStrategy,
    given: Option<&[f64]>,
    rng: &mut R,
) -> Result<SeedChoice> {
    let logits = match strategy {
        SeedStrategy::MeanActivationNearest => class_logits(model, train, spec.class)?,
        _ => Vec::new(),
    };
    seed_from_logits(train, &logits, spec, strategy, given, rng)
}
