//! Pure vector functions shared by the loss, target and decoding code.

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Temperature-scaled softmax. `-inf` logits are masked and map to exactly 0.
pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, temperature, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into<T: Scalar>(logits: &[T], temperature: T, out: &mut [T]) -> Result<()> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| *v != T::neg_infinity())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::EmptySupport);
    }
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = if z == T::neg_infinity() {
            T::zero()
        } else {
            ((z - max) / temperature).exp()
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Numerically stable `log softmax` at unit temperature.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| *v != T::neg_infinity())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::EmptySupport);
    }
    let lse = logits
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<T>()
        .ln()
        + max;
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// `-sum_k target_k * log_probs_k`; zero-target entries contribute exactly 0.
pub fn soft_cross_entropy<T: Scalar>(log_probs: &[T], target: &[T]) -> Result<T> {
    if log_probs.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "log_probs has {} entries, target has {}",
            log_probs.len(),
            target.len()
        )));
    }
    Ok(log_probs
        .iter()
        .zip(target)
        .filter(|(_, &q)| q != T::zero())
        .map(|(&lp, &q)| -q * lp)
        .sum())
}

/// Shannon entropy in nats.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| -v * v.ln())
        .sum()
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
