//! Distance of generated series from the training distribution.
//!
//! Per class, a Gaussian is fitted both to the training activations of a
//! chosen layer and to the raw training series; generated series are scored
//! by Mahalanobis distance against the band of training distances, and
//! projected onto the first two principal components of the training
//! activations.

mod stats;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use stats::{distance_band, fit_gaussian_stats, fit_pca, mahalanobis, project, GaussianStats, PcaModel, DEFAULT_EPS_SCALE};

use crate::classifier::{prediction, LayerSelector, ModelWeights};
use crate::dataset::Dataset;
use crate::dreamer::{DreamResult, Variant};
use crate::error::{Error, Result};

pub const EVAL_REPORT_FORMAT: &str = "seqdream-eval-v1";

/// Distance of one series in one space, with the training band it is
/// judged against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceReport {
    pub distance: f64,
    pub band_min: f64,
    pub band_max: f64,
    /// Ridge added to the covariance diagonal.
    pub eps: f64,
    pub within_band: bool,
    pub above_band_max: bool,
}

impl SpaceReport {
    fn new(distance: f64, (band_min, band_max): (f64, f64), eps: f64) -> Self {
        Self {
            distance,
            band_min,
            band_max,
            eps,
            within_band: band_min <= distance && distance <= band_max,
            above_band_max: distance > band_max,
        }
    }

    fn consistent(&self) -> bool {
        self.within_band == (self.band_min <= self.distance && self.distance <= self.band_max)
            && self.above_band_max == (self.distance > self.band_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub layer: String,
    pub class: usize,
    pub variant: Variant,
    pub activation: SpaceReport,
    pub raw: SpaceReport,
    pub predicted_class: usize,
    pub confidence: f64,
    /// First two principal-component coordinates of the activation.
    pub projection: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.format != EVAL_REPORT_FORMAT {
            return Err(Error::Data(format!("unknown eval report format `{}`", r.format)));
        }
        if !r.activation.consistent() || !r.raw.consistent() {
            return Err(Error::Data("verdicts disagree with stored distances".into()));
        }
        Ok(r)
    }
}

struct ClassSpaces {
    activation: GaussianStats,
    activation_band: (f64, f64),
    raw: GaussianStats,
    raw_band: (f64, f64),
}

/// Training-side statistics for one model, dataset and layer, fitted once
/// and reused for every evaluated series.
pub struct EvalContext<'a> {
    model: &'a ModelWeights,
    train: &'a Dataset,
    layer: LayerSelector,
    activations: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    classes: Vec<Option<ClassSpaces>>,
    pca: PcaModel,
}

impl<'a> EvalContext<'a> {
    pub fn new(model: &'a ModelWeights, train: &'a Dataset, layer: LayerSelector) -> Result<Self> {
        let series: Vec<&[f64]> = train.series().iter().map(|s| s.values.as_slice()).collect();
        let logits = model.logits_batch(&series)?;
        let activations = match layer {
            LayerSelector::Logits => logits.clone(),
            _ => model.activations_batch(&series, layer)?,
        };
        let mut classes = Vec::with_capacity(train.num_classes());
        for c in 0..train.num_classes() {
            let idx: Vec<usize> = train.of_class(c).map(|(i, _)| i).collect();
            if idx.len() < 2 {
                classes.push(None);
                continue;
            }
            let act: Vec<&[f64]> = idx.iter().map(|&i| activations[i].as_slice()).collect();
            let raw: Vec<&[f64]> = idx.iter().map(|&i| series[i]).collect();
            let activation = fit_gaussian_stats(&act, DEFAULT_EPS_SCALE)?;
            let raw_stats = fit_gaussian_stats(&raw, DEFAULT_EPS_SCALE)?;
            classes.push(Some(ClassSpaces {
                activation_band: distance_band(&activation, &act)?,
                activation,
                raw_band: distance_band(&raw_stats, &raw)?,
                raw: raw_stats,
            }));
        }
        let pca = fit_pca(&activations, 2)?;
        Ok(Self {
            model,
            train,
            layer,
            activations,
            logits,
            classes,
            pca,
        })
    }

    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    fn class(&self, c: usize) -> Result<&ClassSpaces> {
        self.classes
            .get(c)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Data(format!("class {c} has fewer than 2 training samples")))
    }

    /// Training band of class `c` in activation space.
    pub fn activation_band(&self, c: usize) -> Result<(f64, f64)> {
        Ok(self.class(c)?.activation_band)
    }

    /// Training band of class `c` in raw-series space.
    pub fn raw_band(&self, c: usize) -> Result<(f64, f64)> {
        Ok(self.class(c)?.raw_band)
    }

    /// Scores `series` against the class-`c` training distribution.
    pub fn evaluate_series(&self, series: &[f64], c: usize, variant: Variant) -> Result<EvalReport> {
        if series.len() != self.train.length() {
            return Err(Error::shape(format!(
                "series has length {}, training series have {}",
                series.len(),
                self.train.length()
            )));
        }
        let spaces = self.class(c)?;
        let act = self.model.activations(series, self.layer)?;
        let logits = self.model.logits(series)?;
        let (predicted_class, confidence) = prediction(&logits);
        Ok(EvalReport {
            format: EVAL_REPORT_FORMAT.to_string(),
            layer: self.layer.to_string(),
            class: c,
            variant,
            activation: SpaceReport::new(
                mahalanobis(&spaces.activation, &act)?,
                spaces.activation_band,
                spaces.activation.eps(),
            ),
            raw: SpaceReport::new(mahalanobis(&spaces.raw, series)?, spaces.raw_band, spaces.raw.eps()),
            predicted_class,
            confidence,
            projection: project(&self.pca, &act)?,
        })
    }

    pub fn evaluate(&self, result: &DreamResult) -> Result<EvalReport> {
        self.evaluate_series(&result.series, result.class, result.variant)
    }

    /// Tab-separated table with one row per training series followed by one
    /// row per generated series. `score` is the logit of the row's class;
    /// `activation` holds the comma-joined layer output.
    pub fn distribution_table(&self, generated: &[DreamResult]) -> Result<String> {
        let mut out = String::from("source\tid\tclass\tscore\tpc1\tpc2\tactivation\n");
        let mut row = |source: &str, id: usize, class: usize, score: f64, act: &[f64]| -> Result<()> {
            let z = project(&self.pca, act)?;
            let joined = act.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{source}\t{id}\t{class}\t{score}\t{}\t{}\t{joined}", z[0], z[1]);
            Ok(())
        };
        for (i, s) in self.train.series().iter().enumerate() {
            row("train", i, s.label, self.logits[i][s.label], &self.activations[i])?;
        }
        for (i, r) in generated.iter().enumerate() {
            let act = self.model.activations(&r.series, self.layer)?;
            let logits = self.model.logits(&r.series)?;
            let score = *logits
                .get(r.class)
                .ok_or_else(|| Error::invalid(format!("dream class {} out of range", r.class)))?;
            row("dream", i, r.class, score, &act)?;
        }
        Ok(out)
    }
}

/// One-shot evaluation of a dreaming result.
pub fn evaluate_dream(model: &ModelWeights, train: &Dataset, result: &DreamResult, layer: LayerSelector) -> Result<EvalReport> {
    EvalContext::new(model, train, layer)?.evaluate(result)
}

/// Writes [`EvalContext::distribution_table`] to `path`.
pub fn export_distribution_data(
    model: &ModelWeights,
    train: &Dataset,
    generated: &[DreamResult],
    layer: LayerSelector,
    path: &Path,
) -> Result<()> {
    let table = EvalContext::new(model, train, layer)?.distribution_table(generated)?;
    std::fs::write(path, table).map_err(|e| Error::io(path, e))
}
