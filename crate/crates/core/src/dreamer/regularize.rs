//! Penalty terms and loss-free input regularizers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

fn need_two(ts: &[f64], what: &str) -> Result<()> {
    if ts.len() < 2 {
        return Err(Error::invalid(format!("{what} needs at least 2 time points, got {}", ts.len())));
    }
    Ok(())
}

/// Total variation `sum_{i=1}^{m-1} |t_{i+1} - t_i|^beta`.
pub fn tv(ts: &[f64], beta: f64) -> Result<f64> {
    need_two(ts, "tv")?;
    if !(beta >= 1.0) {
        return Err(Error::invalid(format!("tv exponent must be >= 1, got {beta}")));
    }
    Ok(ts.windows(2).map(|w| (w[1] - w[0]).abs().powf(beta)).sum())
}

/// Mean absolute consecutive difference.
pub fn sm(ts: &[f64]) -> Result<f64> {
    need_two(ts, "sm")?;
    let total: f64 = ts.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(total / (ts.len() - 1) as f64)
}

/// Length-normalized alpha norm `(1/m) sum |t_i|^alpha`.
pub fn alpha_norm(ts: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    if ts.is_empty() {
        return Ok(0.0);
    }
    Ok(ts.iter().map(|v| v.abs().powf(alpha)).sum::<f64>() / ts.len() as f64)
}

// Tape versions of the three penalties, for `x` of shape [.., m].

pub(crate) fn tv_var(tape: &mut Tape, x: Var, beta: f64) -> Result<Var> {
    let d = tape.diff(x)?;
    let p = tape.abs_pow(d, beta)?;
    tape.sum(p)
}

pub(crate) fn sm_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.diff(x)?;
    let a = tape.abs_pow(d, 1.0)?;
    tape.mean(a)
}

pub(crate) fn alpha_norm_var(tape: &mut Tape, x: Var, alpha: f64) -> Result<Var> {
    let p = tape.abs_pow(x, alpha)?;
    tape.mean(p)
}

pub fn clamp_to_bounds(ts: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("clamp bounds need lo < hi, got [{lo}, {hi}]")));
    }
    Ok(ts.iter().map(|v| v.clamp(lo, hi)).collect())
}

/// Shrinks every value by `(1 - rate)`.
pub fn l2_decay(ts: &[f64], rate: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("l2 decay rate must lie in [0, 1), got {rate}")));
    }
    Ok(ts.iter().map(|v| (1.0 - rate) * v).collect())
}

/// Multiplies each value by an independent factor from `U[1 - s, 1 + s]`,
/// or the whole series by one shared factor when `whole_series` is set.
pub fn random_scale<R: Rng + ?Sized>(ts: &[f64], s: f64, whole_series: bool, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid(format!("scale jitter must lie in [0, 1), got {s}")));
    }
    if whole_series {
        let f = rng.random_range(1.0 - s..=1.0 + s);
        return Ok(ts.iter().map(|v| v * f).collect());
    }
    Ok(ts.iter().map(|v| v * rng.random_range(1.0 - s..=1.0 + s)).collect())
}

/// Centered moving average; the window shrinks to the available points at
/// the edges.
pub fn moving_average_smooth(ts: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("moving average window must be odd, got {window}")));
    }
    Ok(crate::dataset::centered_moving_average(ts, window))
}

/// Exponential smoothing `s_i = gamma * t_i + (1 - gamma) * s_{i-1}`. With
/// `zero_phase` the recursion is run again backward over the result so the
/// output carries no lag.
pub fn exponential_smooth(ts: &[f64], gamma: f64, zero_phase: bool) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("smoothing gamma must lie in (0, 1], got {gamma}")));
    }
    let mut out = ts.to_vec();
    for i in 1..out.len() {
        out[i] = gamma * out[i] + (1.0 - gamma) * out[i - 1];
    }
    if zero_phase {
        for i in (0..out.len().saturating_sub(1)).rev() {
            out[i] = gamma * out[i] + (1.0 - gamma) * out[i + 1];
        }
    }
    Ok(out)
}

/// Normalized Gaussian kernel truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// Index into `[0, m)` under half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, m: usize) -> usize {
    let period = 2 * m as isize;
    let r = i.rem_euclid(period);
    if r < m as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Convolution with [`gaussian_kernel`] and reflective edge padding.
pub fn gaussian_blur_1d(ts: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let m = ts.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    Ok((0..m as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * ts[reflect(i + k as isize - radius, m)])
                .sum()
        })
        .collect())
}

/// Mutable state of one optimization run that the plateau reset touches.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamState {
    pub series: Vec<f64>,
    pub reinit_count: usize,
    /// Trace length at the last reset.
    pub last_reinit: Option<usize>,
}

impl DreamState {
    pub fn new(series: Vec<f64>) -> Self {
        Self {
            series,
            reinit_count: 0,
            last_reinit: None,
        }
    }
}

/// True when the best loss improved by less than `eps` (relative) over the
/// last `window` entries of `trace`.
pub fn is_plateau(trace: &[f64], window: usize, eps: f64) -> bool {
    if window == 0 || trace.len() < window {
        return false;
    }
    let before = trace[..=trace.len() - window].iter().cloned().fold(f64::INFINITY, f64::min);
    let now = trace.iter().cloned().fold(f64::INFINITY, f64::min);
    let rel = (before - now) / before.abs().max(1e-12);
    rel < eps
}

/// Adds `N(0, noise_std)` to the series when the loss trace has plateaued.
/// Resets are at least `window` steps apart. Returns whether it fired.
pub fn reinit_on_plateau<R: Rng + ?Sized>(
    state: &mut DreamState,
    trace: &[f64],
    window: usize,
    eps: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<bool> {
    if let Some(last) = state.last_reinit {
        if trace.len() < last + window {
            return Ok(false);
        }
    }
    if !is_plateau(trace, window, eps) {
        return Ok(false);
    }
    add_noise(&mut state.series, noise_std, rng)?;
    state.reinit_count += 1;
    state.last_reinit = Some(trace.len());
    Ok(true)
}

pub(crate) fn add_noise<R: Rng + ?Sized>(series: &mut [f64], std: f64, rng: &mut R) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(format!("noise std {std}: {e}")))?;
    series.iter_mut().for_each(|v| *v += normal.sample(rng));
    Ok(())
}
