//! Fused segmentation and detection losses.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Grads, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing constant of the Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

fn clamp_p<T: Real>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

fn is_tampered<T: Real>(t: T) -> bool {
    t > T::lit(0.5)
}

fn check_pair<T: Real>(op: &'static str, pred: &Tensor<T>, target: &[T], samples: usize) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(TensorError::Shape { op, lhs: pred.shape().to_vec(), rhs: vec![target.len()] });
    }
    if samples == 0 || pred.len() % samples != 0 {
        return Err(TensorError::Dimension { op, msg: format!("{} values cannot split into {samples} samples", pred.len()) });
    }
    Ok(pred.len() / samples)
}

/// Per-sample region weights: `(w_pristine / n_pristine, w_tampered / n_tampered)`.
fn region_weights<T: Real>(target: &[T]) -> Result<(T, T)> {
    let n1 = target.iter().filter(|&&t| is_tampered(t)).count();
    let n0 = target.len() - n1;
    let (w0, w1) = match (n0 > 0, n1 > 0) {
        (true, true) => (0.5, 0.5),
        (true, false) => (1.0, 0.0),
        (false, true) => (0.0, 1.0),
        (false, false) => {
            return Err(TensorError::Precondition { op: "balanced_bce", msg: "mask has no pixels".into() });
        }
    };
    let per = |w: f64, n: usize| if n == 0 { T::zero() } else { T::lit(w / n as f64) };
    Ok((per(w0, n0), per(w1, n1)))
}

fn bce_term<T: Real>(p: T, tampered: bool) -> T {
    if tampered {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

impl<T: Real> Graph<T> {
    /// Balanced BCE: per sample, the mean BCE over pristine pixels and the mean
    /// BCE over tampered pixels are averaged; a sample with only one region
    /// uses that region's mean. Returns the mean over `samples`.
    pub fn balanced_bce(&mut self, pred: Var, target: &[T], samples: usize) -> Result<Var> {
        let pv = self.value(pred);
        let n = check_pair("balanced_bce", pv, target, samples)?;
        let mut total = T::zero();
        for (ps, ts) in pv.data().chunks_exact(n).zip(target.chunks_exact(n)) {
            let (w0, w1) = region_weights(ts)?;
            for (&p, &t) in ps.iter().zip(ts) {
                let tampered = is_tampered(t);
                let w = if tampered { w1 } else { w0 };
                total += w * bce_term(clamp_p(p).0, tampered);
            }
        }
        let value = Tensor::scalar(total / T::from_usize(samples).unwrap());
        Ok(self.push(value, Op::BalancedBce { pred, target: Arc::from(target), samples }, &[pred]))
    }

    /// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`, averaged over samples.
    pub fn dice_loss(&mut self, pred: Var, target: &[T], samples: usize) -> Result<Var> {
        let pv = self.value(pred);
        let n = check_pair("dice", pv, target, samples)?;
        let eps = T::lit(DICE_SMOOTH);
        let mut total = T::zero();
        for (ps, ts) in pv.data().chunks_exact(n).zip(target.chunks_exact(n)) {
            let inter: T = ps.iter().zip(ts).map(|(&p, &t)| p * t).sum();
            let denom = ps.iter().copied().sum::<T>() + ts.iter().copied().sum::<T>() + eps;
            total += T::one() - (T::lit(2.0) * inter + eps) / denom;
        }
        let value = Tensor::scalar(total / T::from_usize(samples).unwrap());
        Ok(self.push(value, Op::Dice { pred, target: Arc::from(target), samples }, &[pred]))
    }

    /// Mean binary cross-entropy.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        check_pair("bce", pv, target, 1)?;
        let total: T = pv.data().iter().zip(target).map(|(&p, &t)| bce_soft(clamp_p(p).0, t)).sum();
        let value = Tensor::scalar(total / T::from_usize(pv.len()).unwrap());
        Ok(self.push(value, Op::Bce { pred, target: Arc::from(target) }, &[pred]))
    }
}

fn bce_soft<T: Real>(p: T, t: T) -> T {
    -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
}

pub(crate) fn balanced_bce_backward<T: Real>(grads: &mut Grads<'_, T>, g: T, pred: Var, target: &[T], samples: usize) {
    let pv = grads.value(pred);
    let Some(gp) = grads.slot(pred) else { return };
    let n = pv.len() / samples;
    let scale = g / T::from_usize(samples).unwrap();
    for ((ps, ts), gs) in pv.data().chunks_exact(n).zip(target.chunks_exact(n)).zip(gp.chunks_exact_mut(n)) {
        let (w0, w1) = region_weights(ts).expect("validated in forward");
        for ((&p, &t), acc) in ps.iter().zip(ts).zip(gs.iter_mut()) {
            let (pc, inside) = clamp_p(p);
            if !inside {
                continue;
            }
            *acc += if is_tampered(t) { -scale * w1 / pc } else { scale * w0 / (T::one() - pc) };
        }
    }
}

pub(crate) fn dice_backward<T: Real>(grads: &mut Grads<'_, T>, g: T, pred: Var, target: &[T], samples: usize) {
    let pv = grads.value(pred);
    let Some(gp) = grads.slot(pred) else { return };
    let n = pv.len() / samples;
    let eps = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let scale = g / T::from_usize(samples).unwrap();
    for ((ps, ts), gs) in pv.data().chunks_exact(n).zip(target.chunks_exact(n)).zip(gp.chunks_exact_mut(n)) {
        let num = two * ps.iter().zip(ts).map(|(&p, &t)| p * t).sum::<T>() + eps;
        let den = ps.iter().copied().sum::<T>() + ts.iter().copied().sum::<T>() + eps;
        let inv = T::one() / (den * den);
        for (&t, acc) in ts.iter().zip(gs.iter_mut()) {
            *acc -= scale * (two * t * den - num) * inv;
        }
    }
}

pub(crate) fn bce_backward<T: Real>(grads: &mut Grads<'_, T>, g: T, pred: Var, target: &[T]) {
    let pv = grads.value(pred);
    let Some(gp) = grads.slot(pred) else { return };
    let scale = g / T::from_usize(pv.len()).unwrap();
    for ((&p, &t), acc) in pv.data().iter().zip(target).zip(gp.iter_mut()) {
        let (pc, inside) = clamp_p(p);
        if inside {
            *acc += scale * (pc - t) / (pc * (T::one() - pc));
        }
    }
}
