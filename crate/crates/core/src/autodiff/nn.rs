//! Network layers recorded on the tape. Layer inputs are `[C, L]` for a
//! single series or `[B, C, L]` for a batch.

use super::tape::{Accumulator, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn unpopulated() -> Self {
        Self::default()
    }

    pub fn is_populated(&self) -> bool {
        !self.mean.is_empty()
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize by batch statistics and fold them into `stats`.
    Train {
        stats: &'a mut RunningStats,
        momentum: f64,
    },
    /// Normalize by the stored running statistics only.
    Eval(&'a RunningStats),
}

/// Splits `[C, L]` / `[B, C, L]` into `(B, C, L)`.
fn bcl(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::shape(format!("{op}: expected [C, L] or [B, C, L], got {shape:?}"))),
    }
}

/// Splits `[n]` / `[B, n]` into `(B, n)`.
fn bn_rows(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        _ => Err(Error::shape(format!("{op}: expected [n] or [B, n], got {shape:?}"))),
    }
}

fn any_rg(tape: &Tape, idx: &[usize]) -> bool {
    idx.iter().any(|&i| tape.rg(i))
}

impl Tape {
    /// "Same"-padded cross-correlation: `out[o][i] = bias[o] + sum_c sum_k
    /// weight[o][c][k] * x_padded[c][i + k]` with `(K - 1) / 2` zeros per side.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let (xs, ws, bs) = (self.t(xi).shape(), self.t(wi).shape(), self.t(bi).shape());
        let (b, cin, l) = bcl(xs, "conv1d")?;
        let [cout, wcin, k] = *ws else {
            return Err(Error::shape(format!("conv1d: weight must be [Cout, Cin, K], got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv1d: input {xs:?} has {cin} channels but weight {ws:?} expects {wcin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv1d: kernel size {k} must be odd")));
        }
        if bs != [cout] {
            return Err(Error::shape(format!("conv1d: bias {bs:?} does not match weight {ws:?}")));
        }
        let (xv, wv, bv) = (self.t(xi).data(), self.t(wi).data(), self.t(bi).data());
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; b * cout * l];
        for bb in 0..b {
            for o in 0..cout {
                let orow = &mut out[(bb * cout + o) * l..][..l];
                orow.fill(bv[o]);
                for c in 0..cin {
                    let xrow = &xv[(bb * cin + c) * l..][..l];
                    let wrow = &wv[(o * cin + c) * k..][..k];
                    for (kk, &w) in wrow.iter().enumerate() {
                        let (lo, hi, shift) = window(kk as isize - pad, l);
                        if lo >= hi {
                            continue;
                        }
                        for (y, xval) in orow[lo..hi].iter_mut().zip(&xrow[(lo as isize + shift) as usize..]) {
                            *y += w * xval;
                        }
                    }
                }
            }
        }
        let mut shape = xs.to_vec();
        let n = shape.len();
        shape[n - 2] = cout;
        let rg = any_rg(self, &[xi, wi, bi]);
        let t = Tensor::new(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Conv1d { x: xi, w: wi, b: bi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.t(xi);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?.with_requires_grad(self.rg(xi));
        Ok(self.push(t, Op::Relu { x: xi }))
    }

    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xs = self.t(xi).shape();
        let (b, c, l) = bcl(xs, "batchnorm1d")?;
        if self.t(gi).shape() != [c] || self.t(bi).shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm1d: gamma {:?} / beta {:?} do not match input {xs:?}",
                self.t(gi).shape(),
                self.t(bi).shape()
            )));
        }
        let xv = self.t(xi).data();
        let n = (b * l) as f64;
        let train = matches!(mode, BatchNormMode::Train { .. });
        let (mean, var) = match mode {
            BatchNormMode::Eval(stats) => {
                if !stats.is_populated() {
                    return Err(Error::invalid("batchnorm1d: eval mode with unpopulated running stats"));
                }
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::shape(format!(
                        "batchnorm1d: running stats have {} channels, input has {c}",
                        stats.mean.len()
                    )));
                }
                (stats.mean.clone(), stats.var.clone())
            }
            BatchNormMode::Train { stats, momentum } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let rows = (0..b).map(|bb| &xv[(bb * c + ch) * l..][..l]);
                    let m = rows.clone().flatten().sum::<f64>() / n;
                    let v = rows.flatten().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                if stats.is_populated() {
                    if stats.mean.len() != c {
                        return Err(Error::shape(format!(
                            "batchnorm1d: running stats have {} channels, input has {c}",
                            stats.mean.len()
                        )));
                    }
                    for ch in 0..c {
                        stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                        stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
                    }
                } else {
                    stats.mean = mean.clone();
                    stats.var = var.iter().map(|v| v * unbias).collect();
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.t(gi).data(), self.t(bi).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bb in 0..b {
            for ch in 0..c {
                let off = (bb * c + ch) * l;
                for j in off..off + l {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    out[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        let rg = any_rg(self, &[xi, gi, bi]);
        let t = Tensor::new(xs.to_vec(), out)?.with_requires_grad(rg);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Per-channel mean over time: `[C, L] -> [C]`, `[B, C, L] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.t(xi).shape();
        let (_, _, l) = bcl(xs, "global_avg_pool")?;
        let data = self
            .t(xi)
            .data()
            .chunks_exact(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let shape = xs[..xs.len() - 1].to_vec();
        let t = Tensor::new(shape, data)?.with_requires_grad(self.rg(xi));
        Ok(self.push(t, Op::AvgPool { x: xi }))
    }

    /// `W x + b` for `x` of shape `[n]` or `[B, n]` and `W` of shape `[k, n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let (xs, ws) = (self.t(xi).shape(), self.t(wi).shape());
        let (b, n) = bn_rows(xs, "linear")?;
        let [k, wn] = *ws else {
            return Err(Error::shape(format!("linear: weight must be [k, n], got {ws:?}")));
        };
        if wn != n || self.t(bi).shape() != [k] {
            return Err(Error::shape(format!(
                "linear: input {xs:?}, weight {ws:?} and bias {:?} do not conform",
                self.t(bi).shape()
            )));
        }
        let (xv, wv, bv) = (self.t(xi).data(), self.t(wi).data(), self.t(bi).data());
        let mut out = Vec::with_capacity(b * k);
        for row in xv.chunks_exact(n) {
            for j in 0..k {
                let w = &wv[j * n..][..n];
                out.push(bv[j] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = k;
        let rg = any_rg(self, &[xi, wi, bi]);
        let t = Tensor::new(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Linear { x: xi, w: wi, b: bi }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (b, k) = bn_rows(self.t(li).shape(), "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &y) in self.t(li).data().chunks_exact(k).zip(labels) {
            let p = softmax(row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(p);
        }
        loss /= b as f64;
        let t = Tensor::new(vec![1], vec![loss])?.with_requires_grad(self.rg(li));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Valid output range `[lo, hi)` for tap offset `shift` so that
/// `i + shift` stays inside `[0, l)`.
fn window(shift: isize, l: usize) -> (usize, usize, isize) {
    let lo = (-shift).max(0) as usize;
    let hi = (l as isize - shift).clamp(0, l as isize) as usize;
    (lo.min(hi), hi, shift)
}

pub(crate) fn conv1d_backward(acc: &mut Accumulator<'_>, x: usize, w: usize, b: usize, g: &[f64]) {
    let tape = acc.tape;
    let (bsz, cin, l) = bcl(tape.t(x).shape(), "conv1d").expect("checked in forward");
    let [cout, _, k] = *tape.t(w).shape() else { unreachable!() };
    let (xv, wv) = (tape.t(x).data(), tape.t(w).data());
    let pad = (k / 2) as isize;
    acc.with(b, |db| {
        for bb in 0..bsz {
            for o in 0..cout {
                db[o] += g[(bb * cout + o) * l..][..l].iter().sum::<f64>();
            }
        }
    });
    acc.with(w, |dw| {
        for bb in 0..bsz {
            for o in 0..cout {
                let grow = &g[(bb * cout + o) * l..][..l];
                for c in 0..cin {
                    let xrow = &xv[(bb * cin + c) * l..][..l];
                    for kk in 0..k {
                        let (lo, hi, shift) = window(kk as isize - pad, l);
                        if lo >= hi {
                            continue;
                        }
                        let s: f64 = grow[lo..hi]
                            .iter()
                            .zip(&xrow[(lo as isize + shift) as usize..])
                            .map(|(a, b)| a * b)
                            .sum();
                        dw[(o * cin + c) * k + kk] += s;
                    }
                }
            }
        }
    });
    acc.with(x, |dx| {
        for bb in 0..bsz {
            for o in 0..cout {
                let grow = &g[(bb * cout + o) * l..][..l];
                for c in 0..cin {
                    let dxrow = &mut dx[(bb * cin + c) * l..][..l];
                    for kk in 0..k {
                        let wval = wv[(o * cin + c) * k + kk];
                        let (lo, hi, shift) = window(kk as isize - pad, l);
                        if lo >= hi {
                            continue;
                        }
                        let start = (lo as isize + shift) as usize;
                        for (d, gi) in dxrow[start..start + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                            *d += wval * gi;
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward(
    acc: &mut Accumulator<'_>,
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
) {
    let tape = acc.tape;
    let (b, c, l) = bcl(tape.t(x).shape(), "batchnorm1d").expect("checked in forward");
    let gv = tape.t(gamma).data();
    let n = (b * l) as f64;
    // per-channel sums of g and g * xhat
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for bb in 0..b {
        for ch in 0..c {
            let off = (bb * c + ch) * l;
            for j in off..off + l {
                sg[ch] += g[j];
                sgx[ch] += g[j] * xhat[j];
            }
        }
    }
    acc.with(gamma, |d| d.iter_mut().zip(&sgx).for_each(|(d, s)| *d += s));
    acc.with(beta, |d| d.iter_mut().zip(&sg).for_each(|(d, s)| *d += s));
    acc.with(x, |dx| {
        for bb in 0..b {
            for ch in 0..c {
                let off = (bb * c + ch) * l;
                let scale = gv[ch] * inv_std[ch];
                for j in off..off + l {
                    dx[j] += if train {
                        scale / n * (n * g[j] - sg[ch] - xhat[j] * sgx[ch])
                    } else {
                        scale * g[j]
                    };
                }
            }
        }
    });
}

pub(crate) fn avg_pool_backward(acc: &mut Accumulator<'_>, x: usize, g: &[f64]) {
    let l = *acc.tape.t(x).shape().last().unwrap();
    acc.with(x, |dx| {
        for (row, gi) in dx.chunks_exact_mut(l).zip(g) {
            row.iter_mut().for_each(|d| *d += gi / l as f64);
        }
    });
}

pub(crate) fn linear_backward(acc: &mut Accumulator<'_>, x: usize, w: usize, b: usize, g: &[f64]) {
    let tape = acc.tape;
    let [k, n] = *tape.t(w).shape() else { unreachable!() };
    let (xv, wv) = (tape.t(x).data(), tape.t(w).data());
    acc.with(b, |db| {
        for grow in g.chunks_exact(k) {
            db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
        }
    });
    acc.with(w, |dw| {
        for (grow, xrow) in g.chunks_exact(k).zip(xv.chunks_exact(n)) {
            for j in 0..k {
                let d = &mut dw[j * n..][..n];
                d.iter_mut().zip(xrow).for_each(|(d, x)| *d += grow[j] * x);
            }
        }
    });
    acc.with(x, |dx| {
        for (grow, dxrow) in g.chunks_exact(k).zip(dx.chunks_exact_mut(n)) {
            for j in 0..k {
                let wr = &wv[j * n..][..n];
                dxrow.iter_mut().zip(wr).for_each(|(d, w)| *d += grow[j] * w);
            }
        }
    });
}

pub(crate) fn cross_entropy_backward(
    acc: &mut Accumulator<'_>,
    logits: usize,
    labels: &[usize],
    probs: &[f64],
    g: &[f64],
) {
    let b = labels.len();
    let k = probs.len() / b;
    acc.with(logits, |d| {
        for (r, &y) in labels.iter().enumerate() {
            for j in 0..k {
                let onehot = if j == y { 1.0 } else { 0.0 };
                d[r * k + j] += g[0] * (probs[r * k + j] - onehot) / b as f64;
            }
        }
    });
}
