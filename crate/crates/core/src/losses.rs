//! Speaker identification losses and the within-sample variability-invariant
//! losses tying a noisy embedding to its clean counterpart.

use crate::error::{Error, Result};
use crate::nn::Real;

/// A scalar loss with one gradient per input, in argument order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grads: Vec<Vec<T>>,
}

/// `-log softmax(logits)[label]`, stabilized by max subtraction.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<LossValue<T>> {
    if label >= logits.len() {
        return Err(Error::Loss(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = sum.ln() + max - logits[label].f64();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, e)| T::of(e / sum - if j == label { 1.0 } else { 0.0 }))
        .collect();
    Ok(LossValue { value: T::of(value.max(0.0)), grads: vec![grad] })
}

/// Mean cross-entropy over a `[n, n_classes]` logit batch; the gradient is
/// with respect to the flattened logits.
pub fn identification_loss_on<T: Real>(logits: &[T], labels: &[usize], n_classes: usize) -> Result<LossValue<T>> {
    if labels.is_empty() || logits.len() != labels.len() * n_classes {
        return Err(Error::Loss(format!(
            "{} logits do not form {} rows of {n_classes}",
            logits.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks_exact(n_classes).zip(labels) {
        let l = cross_entropy(row, y)?;
        total += l.value.f64();
        grad.extend(l.grads[0].iter().map(|g| T::of(g.f64() / n)));
    }
    Ok(LossValue { value: T::of(total / n), grads: vec![grad] })
}

/// Chebyshev polynomial `T_m(c) = cos(m * acos c)` and its derivative.
fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    match m {
        1 => (c, 1.0),
        2 => (2.0 * c * c - 1.0, 4.0 * c),
        3 => (4.0 * c.powi(3) - 3.0 * c, 12.0 * c * c - 3.0),
        4 => (8.0 * c.powi(4) - 8.0 * c * c + 1.0, 32.0 * c.powi(3) - 16.0 * c),
        _ => unreachable!("margin validated to 1..=4"),
    }
}

/// Margin-warped target angle function `psi(theta) = (-1)^k cos(m theta) - 2k`
/// for `theta` in `[k pi/m, (k+1) pi/m]`, expressed in `c = cos theta`.
/// Returns `(psi, d psi / d c)`.
pub fn psi(m: u32, c: f64) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m - 1);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let (t, dt) = chebyshev(m, c);
    (sign * t - 2.0 * k as f64, sign * dt)
}

/// Angular-margin softmax over raw class weights `weight` (`[n_classes, p]`,
/// each row normalized inside the loss).
///
/// Non-target logits are `|f| cos(theta_j)`; the target logit is
/// `|f| (lambda cos(theta_y) + psi(theta_y)) / (1 + lambda)`. Gradients are
/// returned for `f` and then for `weight`.
pub fn a_softmax<T: Real>(f: &[T], label: usize, weight: &[T], margin: u32, lambda: f64) -> Result<LossValue<T>> {
    if !(1..=4).contains(&margin) {
        return Err(Error::Loss(format!("A-softmax margin must be 1..=4, got {margin}")));
    }
    if lambda < 0.0 {
        return Err(Error::Loss("A-softmax annealing weight must be non-negative".into()));
    }
    let p = f.len();
    if p == 0 || !weight.len().is_multiple_of(p) {
        return Err(Error::Loss("A-softmax weight is not a multiple of the embedding size".into()));
    }
    let n_classes = weight.len() / p;
    if label >= n_classes {
        return Err(Error::Loss(format!("label {label} out of range for {n_classes} classes")));
    }
    let fv: Vec<f64> = f.iter().map(|v| v.f64()).collect();
    let fnorm = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Err(Error::Loss("A-softmax on a zero-norm embedding".into()));
    }
    let mut what = Vec::with_capacity(n_classes);
    let mut wnorms = Vec::with_capacity(n_classes);
    for row in weight.chunks_exact(p) {
        let r: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Loss("A-softmax class weight has zero norm".into()));
        }
        wnorms.push(n);
        what.push(r.into_iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let dots: Vec<f64> = what.iter().map(|w| w.iter().zip(&fv).map(|(a, b)| a * b).sum()).collect();
    let cos_y = (dots[label] / fnorm).clamp(-1.0, 1.0);
    let (ps, dps) = psi(margin, cos_y);
    let phi = (lambda * cos_y + ps) / (1.0 + lambda);
    let dphi = (lambda + dps) / (1.0 + lambda);
    let mut logits = dots.clone();
    logits[label] = fnorm * phi;
    let ce = cross_entropy(&logits, label)?;
    let dl = &ce.grads[0];

    let mut df = vec![0.0; p];
    let mut dwhat = vec![vec![0.0; p]; n_classes];
    for j in 0..n_classes {
        if j == label {
            continue;
        }
        // logit_j = what_j . f
        for i in 0..p {
            df[i] += dl[j] * what[j][i];
            dwhat[j][i] = dl[j] * fv[i];
        }
    }
    // logit_y = |f| phi(c), c = what_y . f / |f|
    let g = dl[label];
    for i in 0..p {
        df[i] += g * (phi * fv[i] / fnorm + dphi * (what[label][i] - cos_y * fv[i] / fnorm));
        dwhat[label][i] = g * dphi * fv[i];
    }
    // back through w_hat = w / |w|
    let mut dw = Vec::with_capacity(weight.len());
    for j in 0..n_classes {
        let proj: f64 = what[j].iter().zip(&dwhat[j]).map(|(a, b)| a * b).sum();
        dw.extend((0..p).map(|i| T::of((dwhat[j][i] - what[j][i] * proj) / wnorms[j])));
    }
    Ok(LossValue {
        value: T::of(ce.value),
        grads: vec![df.into_iter().map(T::of).collect(), dw],
    })
}

/// Logits used for prediction with an A-softmax head: `|f| cos(theta_j)`.
pub fn a_softmax_logits<T: Real>(f: &[T], weight: &[T]) -> Vec<T> {
    let p = f.len();
    weight
        .chunks_exact(p)
        .map(|row| {
            let n = row.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
            let d: f64 = row.iter().zip(f).map(|(a, b)| a.f64() * b.f64()).sum();
            T::of(if n > 0.0 { d / n } else { 0.0 })
        })
        .collect()
}

fn check_pair<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Loss(format!("embedding dimensions differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `(1/p) |f_c - f_n|^2`. Gradients: clean first, noisy second.
pub fn mse_within<T: Real>(clean: &[T], noisy: &[T]) -> Result<LossValue<T>> {
    check_pair(clean, noisy)?;
    let p = clean.len() as f64;
    let diff: Vec<f64> = clean.iter().zip(noisy).map(|(c, n)| c.f64() - n.f64()).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / p;
    let dc: Vec<T> = diff.iter().map(|d| T::of(2.0 * d / p)).collect();
    let dn: Vec<T> = diff.iter().map(|d| T::of(-2.0 * d / p)).collect();
    Ok(LossValue { value: T::of(value), grads: vec![dc, dn] })
}

/// `1 - cos(f_c, f_n)`. Gradients: clean first, noisy second.
pub fn cosine_within<T: Real>(clean: &[T], noisy: &[T]) -> Result<LossValue<T>> {
    check_pair(clean, noisy)?;
    let a: Vec<f64> = clean.iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = noisy.iter().map(|v| v.f64()).collect();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Loss("cosine loss on a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let da = a.iter().zip(&b).map(|(x, y)| T::of(-(y / (na * nb) - cos * x / (na * na)))).collect();
    let db = a.iter().zip(&b).map(|(x, y)| T::of(-(x / (na * nb) - cos * y / (nb * nb)))).collect();
    Ok(LossValue { value: T::of((1.0 - cos).max(0.0)), grads: vec![da, db] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WithinLoss {
    None,
    Mse,
    Cosine,
}

impl std::str::FromStr for WithinLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WithinLoss::None),
            "mse" => Ok(WithinLoss::Mse),
            "cosine" | "cos" => Ok(WithinLoss::Cosine),
            other => Err(Error::Config(format!("unknown within-sample loss '{other}'"))),
        }
    }
}

/// Mean within-sample loss over `pairs` clean/noisy rows of width `p`.
/// Gradients are for the clean batch then the noisy batch.
pub fn within_batch<T: Real>(kind: WithinLoss, clean: &[T], noisy: &[T], p: usize) -> Result<LossValue<T>> {
    if clean.len() != noisy.len() || p == 0 || !clean.len().is_multiple_of(p) || clean.is_empty() {
        return Err(Error::Loss("within-sample batch shapes disagree".into()));
    }
    let pairs = clean.len() / p;
    let mut value = 0.0;
    let mut dc = Vec::with_capacity(clean.len());
    let mut dn = Vec::with_capacity(clean.len());
    for (c, n) in clean.chunks_exact(p).zip(noisy.chunks_exact(p)) {
        let l = match kind {
            WithinLoss::Mse => mse_within(c, n)?,
            WithinLoss::Cosine => cosine_within(c, n)?,
            WithinLoss::None => return Err(Error::Loss("no within-sample loss configured".into())),
        };
        value += l.value.f64();
        dc.extend(l.grads[0].iter().map(|g| T::of(g.f64() / pairs as f64)));
        dn.extend(l.grads[1].iter().map(|g| T::of(g.f64() / pairs as f64)));
    }
    Ok(LossValue { value: T::of(value / pairs as f64), grads: vec![dc, dn] })
}
