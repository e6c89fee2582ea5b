//! Activation maximization for univariate series.
//!
//! Three variants share one config type: plain gradient ascent on a class
//! score with loss-free regularizers ([`dream_ascent`]), Adam on a
//! target-matching loss ([`dream_target`]), and plain gradient descent on the
//! target-matching loss plus a smoothness term, with blur, clamping and
//! noise injection ([`sequence_dream`]).

mod regularize;
mod run;
mod target;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use regularize::{
    alpha_norm, clamp_to_bounds, exponential_smooth, gaussian_blur_1d, gaussian_kernel, is_plateau, l2_decay,
    moving_average_smooth, random_scale, reinit_on_plateau, sm, tv, DreamState,
};
pub use run::{dream_ascent, dream_objective, dream_target, sequence_dream, sequence_dream_in, DreamContext};
pub use target::{select_seed_input, target_logits, SeedChoice, TargetSpec};

use crate::dataset::DatasetStats;
use crate::error::{Error, Result};

macro_rules! kebab_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: ", $($text, " "),+, ")"),
                        s
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ascent,
    Target,
    #[default]
    Sd,
}
kebab_enum!(Variant { Ascent => "ascent", Target => "target", Sd => "sd" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Mean logit vector of the class.
    #[default]
    Center,
    /// Amplified class score with the other scores pushed to their minimum.
    Max,
}
kebab_enum!(TargetMode { Center => "center", Max => "max" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedStrategy {
    #[default]
    MeanActivationNearest,
    RandomNoise,
    GivenSeries,
}
kebab_enum!(SeedStrategy {
    MeanActivationNearest => "mean-activation-nearest",
    RandomNoise => "random-noise",
    GivenSeries => "given-series",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    MovingAverage,
    #[default]
    Exponential,
}
kebab_enum!(Smoothing { None => "none", MovingAverage => "moving-average", Exponential => "exponential" });

/// What the target-matching term compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreDistance {
    /// Squared distance between whole logit vectors over the squared class target.
    #[default]
    FullVector,
    /// Squared distance of the class score alone.
    ClassScore,
}
kebab_enum!(ScoreDistance { FullVector => "full-vector", ClassScore => "class-score" });

/// Hyperparameters of a dreaming run. Fields left as `None` are derived from
/// the variant or from training-data statistics by [`DreamConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamConfig {
    pub variant: Variant,
    pub mode: TargetMode,
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Blur standard deviation in time steps.
    pub sigma: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_sm: f64,
    pub target_multiplier: f64,
    /// Blur period in steps, 0 = never.
    pub blur_every: Option<usize>,
    pub l2_decay: f64,
    pub scale_jitter: f64,
    pub scale_whole_series: bool,
    pub smoothing: Smoothing,
    pub ma_window: usize,
    pub exp_gamma: f64,
    pub exp_single_pass: bool,
    pub plateau_eps: f64,
    pub plateau_window: usize,
    pub reinit_noise_std: Option<f64>,
    pub overshoot_noise_std: Option<f64>,
    pub clamp: Option<[f64; 2]>,
    pub score_distance: ScoreDistance,
    /// The descent variants stop once the loss is at or below this value.
    pub converge_tol: f64,
    pub seed: u64,
    pub seed_strategy: SeedStrategy,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sd,
            mode: TargetMode::Center,
            steps: 100,
            lr: 0.1,
            alpha: 6.0,
            beta: 2.0,
            sigma: 3.0,
            lambda_alpha: 1e-5,
            lambda_beta: 1e-5,
            lambda_sm: 0.1,
            target_multiplier: 2.5,
            blur_every: None,
            l2_decay: 0.01,
            scale_jitter: 0.01,
            scale_whole_series: false,
            smoothing: Smoothing::Exponential,
            ma_window: 3,
            exp_gamma: 0.6,
            exp_single_pass: false,
            plateau_eps: 1e-4,
            plateau_window: 10,
            reinit_noise_std: None,
            overshoot_noise_std: None,
            clamp: None,
            score_distance: ScoreDistance::FullVector,
            converge_tol: 0.0,
            seed: 0,
            seed_strategy: SeedStrategy::MeanActivationNearest,
        }
    }
}

/// Training-data statistics that data-relative defaults are scaled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataScale {
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl From<&DatasetStats> for DataScale {
    fn from(s: &DatasetStats) -> Self {
        Self {
            min: s.min,
            max: s.max,
            std: s.std,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.steps >= 1, || "steps must be >= 1".into())?;
        check(self.lr > 0.0 && self.lr.is_finite(), || format!("lr must be > 0, got {}", self.lr))?;
        check(self.alpha > 2.0, || format!("alpha must be > 2, got {}", self.alpha))?;
        check(self.beta >= 1.0, || format!("beta must be >= 1, got {}", self.beta))?;
        check(self.sigma > 0.0 && self.sigma.is_finite(), || format!("sigma must be > 0, got {}", self.sigma))?;
        for (name, v) in [
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_beta", self.lambda_beta),
            ("lambda_sm", self.lambda_sm),
        ] {
            check(v >= 0.0 && v.is_finite(), || format!("{name} must be >= 0, got {v}"))?;
        }
        check(self.target_multiplier > 0.0, || {
            format!("target_multiplier must be > 0, got {}", self.target_multiplier)
        })?;
        check((0.0..1.0).contains(&self.l2_decay), || format!("l2_decay must lie in [0, 1), got {}", self.l2_decay))?;
        check((0.0..1.0).contains(&self.scale_jitter), || {
            format!("scale_jitter must lie in [0, 1), got {}", self.scale_jitter)
        })?;
        check(self.ma_window % 2 == 1, || format!("ma_window must be odd, got {}", self.ma_window))?;
        check(self.exp_gamma > 0.0 && self.exp_gamma <= 1.0, || {
            format!("exp_gamma must lie in (0, 1], got {}", self.exp_gamma)
        })?;
        check(self.plateau_eps >= 0.0, || format!("plateau_eps must be >= 0, got {}", self.plateau_eps))?;
        for (name, v) in [
            ("reinit_noise_std", self.reinit_noise_std),
            ("overshoot_noise_std", self.overshoot_noise_std),
        ] {
            if let Some(v) = v {
                check(v >= 0.0 && v.is_finite(), || format!("{name} must be >= 0, got {v}"))?;
            }
        }
        if let Some([lo, hi]) = self.clamp {
            check(lo < hi, || format!("clamp bounds need lo < hi, got [{lo}, {hi}]"))?;
        }
        check(self.converge_tol >= 0.0, || format!("converge_tol must be >= 0, got {}", self.converge_tol))?;
        Ok(())
    }

    /// Fills every derived default: blur period from the variant, noise
    /// levels and clamp bounds from `scale`.
    pub fn resolve(&self, scale: &DataScale) -> Result<DreamConfig> {
        self.validate()?;
        let mut out = self.clone();
        out.blur_every.get_or_insert(match self.variant {
            Variant::Ascent => 1,
            Variant::Sd => 5,
            Variant::Target => 0,
        });
        out.reinit_noise_std.get_or_insert(0.05 * scale.std);
        out.overshoot_noise_std.get_or_insert(0.02 * scale.std);
        if out.clamp.is_none() {
            check(scale.min < scale.max, || {
                format!("training data is constant ({}), clamp bounds must be given", scale.min)
            })?;
            out.clamp = Some([scale.min, scale.max]);
        }
        Ok(out)
    }
}

/// Where the starting series came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedProvenance {
    pub strategy: SeedStrategy,
    /// Index into the training set for the nearest-sample strategy.
    pub train_index: Option<usize>,
}

/// Outcome of one dreaming run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamResult {
    pub format: String,
    pub variant: Variant,
    pub class: usize,
    /// Config with every derived default filled in.
    pub config: DreamConfig,
    pub target: Option<TargetSpec>,
    pub seed: SeedProvenance,
    pub series: Vec<f64>,
    /// Loss of the iterate evaluated at each step (the negated class score
    /// for ascent).
    pub loss_trace: Vec<f64>,
    pub score_trace: Vec<f64>,
    pub steps_used: usize,
    pub reinit_count: usize,
    pub overshoot_count: usize,
    /// Loss of the returned series.
    pub best_loss: f64,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

pub const DREAM_RESULT_FORMAT: &str = "seqdream-dream-v1";

impl DreamResult {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a result file.
    pub fn from_json_str(text: &str) -> Result<DreamResult> {
        let r: DreamResult = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        if self.format != DREAM_RESULT_FORMAT {
            return bad(format!("unknown dream result format `{}`", self.format));
        }
        if self.variant != self.config.variant {
            return bad("variant does not match config".into());
        }
        if self.series.is_empty() {
            return bad("empty series".into());
        }
        if self.loss_trace.len() != self.steps_used || self.score_trace.len() != self.steps_used {
            return bad(format!(
                "trace lengths {}/{} differ from steps_used {}",
                self.loss_trace.len(),
                self.score_trace.len(),
                self.steps_used
            ));
        }
        if self.class >= self.logits.len() || self.predicted_class >= self.logits.len() {
            return bad("class index out of range of logits".into());
        }
        if let Some(t) = &self.target {
            if t.class != self.class || t.logits.len() != self.logits.len() {
                return bad("target does not match result class or logit count".into());
            }
        }
        let finite = self
            .series
            .iter()
            .chain(&self.loss_trace)
            .chain(&self.score_trace)
            .chain(&self.logits)
            .chain([&self.best_loss, &self.confidence])
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite value".into());
        }
        if let Some([lo, hi]) = self.config.clamp {
            if self.series.iter().any(|v| *v < lo || *v > hi) {
                return bad("series outside clamp bounds".into());
            }
        }
        self.config.validate()
    }
}
