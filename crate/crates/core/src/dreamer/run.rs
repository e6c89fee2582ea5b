use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::regularize::{
    add_noise, alpha_norm_var, clamp_to_bounds, exponential_smooth, gaussian_blur_1d, l2_decay, moving_average_smooth,
    random_scale, reinit_on_plateau, sm_var, tv_var, DreamState,
};
use super::target::{seed_from_logits, target_from_logits, TargetSpec};
use super::{
    DataScale, DreamConfig, DreamResult, ScoreDistance, SeedProvenance, SeedStrategy, Smoothing, Variant,
    DREAM_RESULT_FORMAT,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::{prediction, ModelWeights};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Builds the loss of `variant` on `tape` from the model's `logits` and the
/// input `x`: the negated class score for ascent, the target-matching loss
/// with alpha-norm and total-variation penalties for target, plus the
/// smoothness penalty for sd.
pub(crate) fn loss_var(
    tape: &mut Tape,
    logits: Var,
    x: Var,
    class: usize,
    spec: Option<&TargetSpec>,
    cfg: &DreamConfig,
) -> Result<Var> {
    let Some(spec) = spec else {
        let s = tape.index(logits, class)?;
        return tape.scale(s, -1.0);
    };
    if spec.score == 0.0 {
        return Err(Error::invalid("target class score is zero"));
    }
    let matched = match cfg.score_distance {
        ScoreDistance::FullVector => {
            let t = tape.constant(Tensor::new(vec![spec.logits.len()], spec.logits.clone())?);
            let d = tape.sub(logits, t)?;
            let sq = tape.mul(d, d)?;
            tape.sum(sq)?
        }
        ScoreDistance::ClassScore => {
            let s = tape.index(logits, spec.class)?;
            let t = tape.constant(Tensor::scalar(spec.score));
            let d = tape.sub(s, t)?;
            tape.mul(d, d)?
        }
    };
    let mut loss = tape.scale(matched, 1.0 / (spec.score * spec.score))?;
    let a = alpha_norm_var(tape, x, cfg.alpha)?;
    let a = tape.scale(a, cfg.lambda_alpha)?;
    loss = tape.add(loss, a)?;
    let t = tv_var(tape, x, cfg.beta)?;
    let t = tape.scale(t, cfg.lambda_beta)?;
    loss = tape.add(loss, t)?;
    if cfg.variant == Variant::Sd {
        let s = sm_var(tape, x)?;
        let s = tape.scale(s, cfg.lambda_sm)?;
        loss = tape.add(loss, s)?;
    }
    Ok(loss)
}

struct Eval {
    loss: f64,
    score: f64,
    logits: Vec<f64>,
    grad: Vec<f64>,
}

fn evaluate(model: &ModelWeights, series: &[f64], class: usize, spec: Option<&TargetSpec>, cfg: &DreamConfig) -> Result<Eval> {
    let (mut tape, x, fwd) = model.forward_series(series, true)?;
    let loss = loss_var(&mut tape, fwd.logits, x, class, spec, cfg)?;
    tape.backward(loss)?;
    let logits = tape.value(fwd.logits).data().to_vec();
    Ok(Eval {
        loss: tape.value(loss).item()?,
        score: logits[class],
        grad: tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; series.len()]),
        logits,
    })
}

/// Loss of `cfg.variant` at `series` and its gradient with respect to the
/// series. `spec` is required for the target and sd variants.
pub fn dream_objective(
    model: &ModelWeights,
    series: &[f64],
    class: usize,
    spec: Option<&TargetSpec>,
    cfg: &DreamConfig,
) -> Result<(f64, Vec<f64>)> {
    let spec = match cfg.variant {
        Variant::Ascent => None,
        _ => Some(spec.ok_or_else(|| Error::invalid("target and sd objectives need a target"))?),
    };
    let e = evaluate(model, series, class, spec, cfg)?;
    Ok((e.loss, e.grad))
}

/// Running record of one optimization: traces and the best iterate seen.
struct Recorder {
    loss_trace: Vec<f64>,
    score_trace: Vec<f64>,
    best: Option<(f64, Vec<f64>, Vec<f64>)>,
}

impl Recorder {
    fn new(steps: usize) -> Self {
        Self {
            loss_trace: Vec::with_capacity(steps),
            score_trace: Vec::with_capacity(steps),
            best: None,
        }
    }

    fn check(e: &Eval, step: usize) -> Result<()> {
        if !e.loss.is_finite() || !e.score.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss {} / score {} at step {step}", e.loss, e.score)));
        }
        Ok(())
    }

    fn offer(&mut self, e: &Eval, series: &[f64]) {
        if self.best.as_ref().is_none_or(|(l, _, _)| e.loss < *l) {
            self.best = Some((e.loss, series.to_vec(), e.logits.clone()));
        }
    }

    fn record(&mut self, e: &Eval, series: &[f64], step: usize) -> Result<()> {
        Self::check(e, step)?;
        self.loss_trace.push(e.loss);
        self.score_trace.push(e.score);
        self.offer(e, series);
        Ok(())
    }

    fn finish(
        self,
        cfg: DreamConfig,
        class: usize,
        target: Option<TargetSpec>,
        seed: SeedProvenance,
        state: &DreamState,
        overshoot_count: usize,
    ) -> DreamResult {
        let (best_loss, series, logits) = self.best.expect("at least one evaluated step");
        let (predicted_class, confidence) = prediction(&logits);
        DreamResult {
            format: DREAM_RESULT_FORMAT.to_string(),
            variant: cfg.variant,
            class,
            config: cfg,
            target,
            seed,
            series,
            steps_used: self.loss_trace.len(),
            loss_trace: self.loss_trace,
            score_trace: self.score_trace,
            reinit_count: state.reinit_count,
            overshoot_count,
            best_loss,
            logits,
            predicted_class,
            confidence,
        }
    }
}

fn prepare(model: &ModelWeights, cfg: &DreamConfig, want: Variant, class: usize, scale: &DataScale) -> Result<DreamConfig> {
    if cfg.variant != want {
        return Err(Error::invalid(format!("config variant is {}, expected {want}", cfg.variant)));
    }
    if class >= model.config().num_classes {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            model.config().num_classes
        )));
    }
    cfg.resolve(scale)
}

fn bounds(cfg: &DreamConfig) -> (f64, f64) {
    let [lo, hi] = cfg.clamp.expect("resolved config has bounds");
    (lo, hi)
}

fn given(strategy: SeedStrategy) -> SeedProvenance {
    SeedProvenance {
        strategy,
        train_index: None,
    }
}

/// Gradient ascent on the class score of `c` starting from `seed`. After
/// each step the series goes through l2 decay, random scaling, smoothing,
/// periodic blur, clamping and the plateau reset, in that order. Returns the
/// highest-scoring series seen.
pub fn dream_ascent(model: &ModelWeights, seed: &[f64], c: usize, cfg: &DreamConfig, scale: &DataScale) -> Result<DreamResult> {
    let cfg = prepare(model, cfg, Variant::Ascent, c, scale)?;
    let (lo, hi) = bounds(&cfg);
    let blur_every = cfg.blur_every.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = DreamState::new(clamp_to_bounds(seed, lo, hi)?);
    let mut rec = Recorder::new(cfg.steps);

    for step in 0..cfg.steps {
        let e = evaluate(model, &state.series, c, None, &cfg)?;
        rec.record(&e, &state.series, step)?;
        let mut x: Vec<f64> = state.series.iter().zip(&e.grad).map(|(v, g)| v - cfg.lr * g).collect();
        if cfg.l2_decay > 0.0 {
            x = l2_decay(&x, cfg.l2_decay)?;
        }
        if cfg.scale_jitter > 0.0 {
            x = random_scale(&x, cfg.scale_jitter, cfg.scale_whole_series, &mut rng)?;
        }
        x = match cfg.smoothing {
            Smoothing::None => x,
            Smoothing::MovingAverage => moving_average_smooth(&x, cfg.ma_window)?,
            Smoothing::Exponential => exponential_smooth(&x, cfg.exp_gamma, !cfg.exp_single_pass)?,
        };
        if blur_every > 0 && (step + 1) % blur_every == 0 {
            x = gaussian_blur_1d(&x, cfg.sigma)?;
        }
        state.series = clamp_to_bounds(&x, lo, hi)?;
        if reinit_on_plateau(
            &mut state,
            &rec.loss_trace,
            cfg.plateau_window,
            cfg.plateau_eps,
            cfg.reinit_noise_std.unwrap_or(0.0),
            &mut rng,
        )? {
            state.series = clamp_to_bounds(&state.series, lo, hi)?;
        }
    }
    let e = evaluate(model, &state.series, c, None, &cfg)?;
    Recorder::check(&e, cfg.steps)?;
    rec.offer(&e, &state.series);
    Ok(rec.finish(cfg, c, None, given(SeedStrategy::GivenSeries), &state, 0))
}

/// Adam on the target-matching loss toward `spec`, clamping after each step.
/// Returns the lowest-loss series seen.
pub fn dream_target(
    model: &ModelWeights,
    seed: &[f64],
    spec: &TargetSpec,
    cfg: &DreamConfig,
    scale: &DataScale,
) -> Result<DreamResult> {
    let cfg = prepare(model, cfg, Variant::Target, spec.class, scale)?;
    if spec.logits.len() != model.config().num_classes {
        return Err(Error::shape(format!(
            "target has {} logits, model has {} classes",
            spec.logits.len(),
            model.config().num_classes
        )));
    }
    if spec.score == 0.0 {
        return Err(Error::invalid("target class score is zero"));
    }
    let (lo, hi) = bounds(&cfg);
    let blur_every = cfg.blur_every.unwrap_or(0);
    let mut adam = crate::optim::Adam::new(cfg.lr, 0.9, 0.999, 1e-8, &[seed.len()]);
    let state = DreamState::new(clamp_to_bounds(seed, lo, hi)?);
    let mut x = state.series.clone();
    let mut rec = Recorder::new(cfg.steps);
    let mut converged = false;

    for step in 0..cfg.steps {
        let e = evaluate(model, &x, spec.class, Some(spec), &cfg)?;
        rec.record(&e, &x, step)?;
        if e.loss <= cfg.converge_tol {
            converged = true;
            break;
        }
        adam.tick();
        adam.update(0, &mut x, &e.grad);
        if blur_every > 0 && (step + 1) % blur_every == 0 {
            x = gaussian_blur_1d(&x, cfg.sigma)?;
        }
        x = clamp_to_bounds(&x, lo, hi)?;
    }
    if !converged {
        let e = evaluate(model, &x, spec.class, Some(spec), &cfg)?;
        Recorder::check(&e, cfg.steps)?;
        rec.offer(&e, &x);
    }
    Ok(rec.finish(cfg, spec.class, Some(spec.clone()), given(SeedStrategy::GivenSeries), &state, 0))
}

/// Frozen model and training data shared by many runs, with the training
/// logits computed once.
pub struct DreamContext<'a> {
    model: &'a ModelWeights,
    train: &'a Dataset,
    scale: DataScale,
    by_class: Vec<Vec<(usize, Vec<f64>)>>,
}

impl<'a> DreamContext<'a> {
    pub fn new(model: &'a ModelWeights, train: &'a Dataset) -> Result<Self> {
        let series: Vec<&[f64]> = train.series().iter().map(|s| s.values.as_slice()).collect();
        let logits = model.logits_batch(&series)?;
        let mut by_class = vec![Vec::new(); model.config().num_classes.max(train.num_classes())];
        for (i, (s, l)) in train.series().iter().zip(logits).enumerate() {
            by_class[s.label].push((i, l));
        }
        Ok(Self {
            model,
            train,
            scale: DataScale::from(train.stats()),
            by_class,
        })
    }

    pub fn model(&self) -> &ModelWeights {
        self.model
    }

    pub fn train(&self) -> &Dataset {
        self.train
    }

    pub fn scale(&self) -> &DataScale {
        &self.scale
    }

    pub fn target(&self, c: usize, mode: super::TargetMode, k: f64) -> Result<TargetSpec> {
        let logits = self.by_class.get(c).map(Vec::as_slice).unwrap_or(&[]);
        target_from_logits(logits, c, mode, k)
    }
}

/// Plain gradient descent on the full objective toward the class-`c` target
/// built per `cfg.mode`, from a seed chosen per `cfg.seed_strategy`
/// (`given` supplies the series for the given-series strategy). Each step:
/// update, periodic blur, clamp, overshoot noise when the class score
/// exceeded the target, plateau reset, clamp. Returns the lowest-loss series.
pub fn sequence_dream(
    model: &ModelWeights,
    train: &Dataset,
    c: usize,
    cfg: &DreamConfig,
    given: Option<&[f64]>,
) -> Result<DreamResult> {
    sequence_dream_in(&DreamContext::new(model, train)?, c, cfg, given)
}

/// [`sequence_dream`] against a prepared context.
pub fn sequence_dream_in(ctx: &DreamContext<'_>, c: usize, cfg: &DreamConfig, given: Option<&[f64]>) -> Result<DreamResult> {
    let model = ctx.model;
    let cfg = prepare(model, cfg, Variant::Sd, c, &ctx.scale)?;
    let (lo, hi) = bounds(&cfg);
    let blur_every = cfg.blur_every.unwrap_or(0);
    let overshoot_std = cfg.overshoot_noise_std.unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let spec = ctx.target(c, cfg.mode, cfg.target_multiplier)?;
    if spec.score == 0.0 {
        return Err(Error::invalid("target class score is zero"));
    }
    let empty = Vec::new();
    let logits = ctx.by_class.get(c).unwrap_or(&empty);
    let seed = seed_from_logits(ctx.train, logits, &spec, cfg.seed_strategy, given, &mut rng)?;
    let mut state = DreamState::new(clamp_to_bounds(&seed.series, lo, hi)?);
    let mut rec = Recorder::new(cfg.steps);
    let mut overshoots = 0;
    let mut converged = false;

    for step in 0..cfg.steps {
        let e = evaluate(model, &state.series, c, Some(&spec), &cfg)?;
        rec.record(&e, &state.series, step)?;
        if e.loss <= cfg.converge_tol {
            converged = true;
            break;
        }
        let mut x: Vec<f64> = state.series.iter().zip(&e.grad).map(|(v, g)| v - cfg.lr * g).collect();
        if blur_every > 0 && (step + 1) % blur_every == 0 {
            x = gaussian_blur_1d(&x, cfg.sigma)?;
        }
        x = clamp_to_bounds(&x, lo, hi)?;
        if e.score > spec.score && overshoot_std > 0.0 {
            add_noise(&mut x, overshoot_std, &mut rng)?;
            overshoots += 1;
        }
        state.series = x;
        reinit_on_plateau(
            &mut state,
            &rec.loss_trace,
            cfg.plateau_window,
            cfg.plateau_eps,
            cfg.reinit_noise_std.unwrap_or(0.0),
            &mut rng,
        )?;
        state.series = clamp_to_bounds(&state.series, lo, hi)?;
    }
    if !converged {
        let e = evaluate(model, &state.series, c, Some(&spec), &cfg)?;
        Recorder::check(&e, cfg.steps)?;
        rec.offer(&e, &state.series);
    }
    Ok(rec.finish(cfg, c, Some(spec), seed.provenance, &state, overshoots))
}
