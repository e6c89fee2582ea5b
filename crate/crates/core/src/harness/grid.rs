//! Grid search over the sequence-dreaming hyperparameters.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::GridSection;
use super::rundir::{ManifestEntry, RunDir, RunStatus};
use crate::classifier::{LayerSelector, ModelWeights};
use crate::dataset::Dataset;
use crate::dreamer::{sequence_dream_in, DreamConfig, DreamContext, DreamResult, TargetMode, Variant};
use crate::error::{Error, Result};
use crate::evaluator::{EvalContext, EvalReport};

/// Softmax confidence a run needs to be ranked.
pub const FEASIBLE_CONFIDENCE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub steps: Vec<usize>,
    pub lr: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda_alpha: Vec<f64>,
    pub lambda_beta: Vec<f64>,
    pub lambda_sm: Vec<f64>,
    pub mode: TargetMode,
    pub class: usize,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// Both endpoints of every axis of the published search space.
    pub fn two_point(mode: TargetMode, class: usize, seed: u64) -> Self {
        Self {
            steps: vec![5, 100],
            lr: vec![1e-2, 1e1],
            alpha: vec![4.0, 6.0],
            beta: vec![1.0, 2.0],
            sigma: vec![3.0, 6.0],
            lambda_alpha: vec![1e-5, 1e-1],
            lambda_beta: vec![1e-5, 1e-1],
            lambda_sm: vec![1e-1, 5e-1],
            mode,
            class,
            seeds: vec![seed],
        }
    }

    /// The two-point grid with any axis given in `section` replaced.
    pub fn from_section(section: &GridSection, mode: TargetMode, class: usize, seed: u64) -> Self {
        let mut g = Self::two_point(section.mode.unwrap_or(mode), class, seed);
        macro_rules! take {
            ($($f:ident),+) => {$(if !section.$f.is_empty() { g.$f = section.$f.clone(); })+};
        }
        take!(steps, lr, alpha, beta, sigma, lambda_alpha, lambda_beta, lambda_sm, seeds);
        g
    }

    pub fn validate(&self) -> Result<()> {
        fn axis<T: Copy + PartialOrd + std::fmt::Display>(name: &str, v: &[T], ok: impl Fn(T) -> bool) -> Result<()> {
            if v.is_empty() {
                return Err(Error::Config(format!("grid axis `{name}` is empty")));
            }
            if let Some(bad) = v.iter().find(|x| !ok(**x)) {
                return Err(Error::Config(format!("grid axis `{name}` value {bad} out of range")));
            }
            Ok(())
        }
        axis("steps", &self.steps, |s| (1..=100_000).contains(&s))?;
        axis("lr", &self.lr, |x| x > 0.0 && x <= 1e3)?;
        axis("alpha", &self.alpha, |x| x > 2.0 && x <= 32.0)?;
        axis("beta", &self.beta, |x| (1.0..=8.0).contains(&x))?;
        axis("sigma", &self.sigma, |x| x > 0.0 && x <= 100.0)?;
        for (n, v) in [
            ("lambda_alpha", &self.lambda_alpha),
            ("lambda_beta", &self.lambda_beta),
            ("lambda_sm", &self.lambda_sm),
        ] {
            axis(n, v, |x| (0.0..=1e3).contains(&x))?;
        }
        axis("seeds", &self.seeds, |_| true)
    }
}

/// One point of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRun {
    /// Stable identifier built from the point's values.
    pub run_id: String,
    pub config: DreamConfig,
}

/// Cartesian product of the axes in the order steps, lr, alpha, beta, sigma,
/// lambda_alpha, lambda_beta, lambda_sm, seed; the last axis varies fastest.
/// Every other field comes from `base`.
pub fn expand_grid(spec: &GridSpec, base: &DreamConfig) -> Result<Vec<GridRun>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &steps in &spec.steps {
        for &lr in &spec.lr {
            for &alpha in &spec.alpha {
                for &beta in &spec.beta {
                    for &sigma in &spec.sigma {
                        for &la in &spec.lambda_alpha {
                            for &lb in &spec.lambda_beta {
                                for &lsm in &spec.lambda_sm {
                                    for &seed in &spec.seeds {
                                        let config = DreamConfig {
                                            variant: Variant::Sd,
                                            mode: spec.mode,
                                            steps,
                                            lr,
                                            alpha,
                                            beta,
                                            sigma,
                                            lambda_alpha: la,
                                            lambda_beta: lb,
                                            lambda_sm: lsm,
                                            seed,
                                            ..base.clone()
                                        };
                                        let run_id = format!(
                                            "{}-c{}-s{steps}-lr{lr}-a{alpha}-b{beta}-sg{sigma}-la{la}-lb{lb}-lsm{lsm}-seed{seed}",
                                            spec.mode, spec.class
                                        );
                                        out.push(GridRun { run_id, config });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub loss: f64,
    pub predicted_class: usize,
    pub confidence: f64,
    pub class_score: f64,
    pub activation_distance: f64,
    pub activation_band_max: f64,
    pub raw_distance: f64,
    pub raw_band_max: f64,
}

impl RunMetrics {
    fn from_parts(result: &DreamResult, report: &EvalReport) -> Self {
        Self {
            loss: result.best_loss,
            predicted_class: report.predicted_class,
            confidence: report.confidence,
            class_score: result.logits[result.class],
            activation_distance: report.activation.distance,
            activation_band_max: report.activation.band_max,
            raw_distance: report.raw.distance,
            raw_band_max: report.raw.band_max,
        }
    }
}

/// Ranked grid output; `ranking` lists the feasible runs best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub mode: TargetMode,
    pub class: usize,
    pub ranking: Vec<RunSummary>,
    pub infeasible: Vec<String>,
    pub failed: Vec<RunSummary>,
    /// Runs loaded from an earlier invocation instead of recomputed.
    #[serde(skip)]
    pub reused: usize,
}

impl GridOutcome {
    pub fn best(&self) -> Option<&RunSummary> {
        self.ranking.first()
    }
}

pub fn is_feasible(m: &RunMetrics, class: usize) -> bool {
    m.predicted_class == class && m.confidence >= FEASIBLE_CONFIDENCE
}

/// Ranking order: lower loss, then the mode's distance preference (center:
/// closer; max: runs beyond the band maximum first, closest of those, then
/// the farthest of the rest), then run id.
pub fn compare_runs(mode: TargetMode, a: &RunSummary, b: &RunSummary) -> Ordering {
    let (ma, mb) = (a.metrics.as_ref(), b.metrics.as_ref());
    let (Some(ma), Some(mb)) = (ma, mb) else {
        return a.run_id.cmp(&b.run_id);
    };
    let by_distance = match mode {
        TargetMode::Center => ma.activation_distance.total_cmp(&mb.activation_distance),
        TargetMode::Max => {
            let beyond = |m: &RunMetrics| m.activation_distance > m.activation_band_max;
            match (beyond(ma), beyond(mb)) {
                (true, false) => Ordering::Less,
                (false, true) => Ordering::Greater,
                (true, true) => ma.activation_distance.total_cmp(&mb.activation_distance),
                (false, false) => mb.activation_distance.total_cmp(&ma.activation_distance),
            }
        }
    };
    ma.loss.total_cmp(&mb.loss).then(by_distance).then_with(|| a.run_id.cmp(&b.run_id))
}

fn rank(mode: TargetMode, class: usize, runs: Vec<RunSummary>, reused: usize) -> GridOutcome {
    let mut ranking = Vec::new();
    let mut infeasible = Vec::new();
    let mut failed = Vec::new();
    for r in runs {
        match &r.metrics {
            None => failed.push(r),
            Some(m) if is_feasible(m, class) => ranking.push(r),
            Some(_) => infeasible.push(r.run_id),
        }
    }
    ranking.sort_by(|a, b| compare_runs(mode, a, b));
    infeasible.sort();
    failed.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    GridOutcome {
        mode,
        class,
        ranking,
        infeasible,
        failed,
        reused,
    }
}

fn load_previous(dir: &RunDir, run_id: &str) -> Option<(DreamResult, EvalReport)> {
    let d = std::fs::read_to_string(dir.dream_path(run_id)).ok()?;
    let e = std::fs::read_to_string(dir.eval_path(&format!("{run_id}.json"))).ok()?;
    Some((DreamResult::from_json_str(&d).ok()?, EvalReport::from_json_str(&e).ok()?))
}

fn run_one(ctx: &DreamContext<'_>, eval: &EvalContext<'_>, dir: &RunDir, class: usize, run: &GridRun) -> Result<(DreamResult, EvalReport)> {
    let result = sequence_dream_in(ctx, class, &run.config, None)?;
    let report = eval.evaluate(&result)?;
    dir.write_atomic(&dir.dream_path(&run.run_id), &result.to_json()?)?;
    dir.write_atomic(&dir.eval_path(&format!("{}.json", run.run_id)), &report.to_json()?)?;
    Ok((result, report))
}

/// Name of the ranking file inside `eval/`.
pub fn ranking_file(mode: TargetMode, class: usize) -> String {
    format!("grid-{mode}-c{class}-ranking.json")
}

/// Runs every grid point not already completed in `dir` on a pool of
/// `parallelism` threads, evaluates each result, and ranks the feasible
/// ones. Per-run failures are recorded, not fatal. Writes the ranking to
/// `eval/` and one manifest record per computed run.
pub fn run_grid(
    model: &ModelWeights,
    train: &Dataset,
    spec: &GridSpec,
    base: &DreamConfig,
    layer: LayerSelector,
    dir: &RunDir,
    parallelism: usize,
) -> Result<GridOutcome> {
    let runs = expand_grid(spec, base)?;
    let ctx = DreamContext::new(model, train)?;
    let eval = EvalContext::new(model, train, layer)?;
    let done: std::collections::HashSet<String> = dir
        .read_manifest()?
        .into_iter()
        .filter(|e| e.command == "grid-run" && e.status == RunStatus::Done)
        .filter_map(|e| e.run_id)
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(RunSummary, bool)> = pool.install(|| {
        runs.par_iter()
            .map(|run| -> Result<(RunSummary, bool)> {
                if done.contains(&run.run_id) {
                    if let Some((r, e)) = load_previous(dir, &run.run_id) {
                        let summary = RunSummary {
                            run_id: run.run_id.clone(),
                            status: RunStatus::Done,
                            error: None,
                            metrics: Some(RunMetrics::from_parts(&r, &e)),
                        };
                        return Ok((summary, true));
                    }
                }
                let mut entry = ManifestEntry::new("grid-run", RunStatus::Done);
                entry.run_id = Some(run.run_id.clone());
                let summary = match run_one(&ctx, &eval, dir, spec.class, run) {
                    Ok((r, e)) => {
                        entry.outputs = vec![
                            dir.relative(&dir.dream_path(&run.run_id)),
                            dir.relative(&dir.eval_path(&format!("{}.json", run.run_id))),
                        ];
                        RunSummary {
                            run_id: run.run_id.clone(),
                            status: RunStatus::Done,
                            error: None,
                            metrics: Some(RunMetrics::from_parts(&r, &e)),
                        }
                    }
                    Err(err) => {
                        entry.status = RunStatus::Failed;
                        entry.error = Some(err.to_string());
                        RunSummary {
                            run_id: run.run_id.clone(),
                            status: RunStatus::Failed,
                            error: Some(err.to_string()),
                            metrics: None,
                        }
                    }
                };
                dir.append(&entry)?;
                Ok((summary, false))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let reused = results.iter().filter(|(_, r)| *r).count();
    let outcome = rank(spec.mode, spec.class, results.into_iter().map(|(s, _)| s).collect(), reused);
    let mut json = serde_json::to_string_pretty(&outcome)?;
    json.push('\n');
    dir.write_atomic(&dir.eval_path(&ranking_file(spec.mode, spec.class)), &json)?;
    Ok(outcome)
}
