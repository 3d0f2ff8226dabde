//! Losses returning `(mean loss, d loss / d prediction)`.

use super::layers::softmax_in_place;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mse over an empty tensor".into()));
    }
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss += d * d;
        grad.push(two * d / n);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// `-ln softmax(logits)[class]`, evaluated through log-sum-exp.
pub fn sparse_cce<T: Scalar>(logits: &[T], class: usize) -> Result<T> {
    if class >= logits.len() {
        return Err(Error::Validation(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    Ok(lse - logits[class])
}

/// Mean sparse categorical cross-entropy over a `[batch, classes]` logit
/// tensor; the gradient is `(softmax - onehot) / batch`.
pub fn sparse_cce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = match logits.shape() {
        [n, c] => [*n, *c],
        s => return Err(Error::Shape(format!("expected [batch, classes] logits, got {s:?}"))),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = logits.data().to_vec();
    for (row, &label) in grad.chunks_exact_mut(classes).zip(labels) {
        loss += sparse_cce(row, label)?;
        softmax_in_place(row);
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean `-ln p[label]` over an already-normalized probability tensor.
pub fn sparse_cce_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = match probs.shape() {
        [n, c] => [*n, *c],
        s => return Err(Error::Shape(format!("expected [batch, classes] probabilities, got {s:?}"))),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::of(n as f64);
    let tiny = T::min_positive_value();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); probs.len()];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Validation(format!("class {label} out of range for {classes} classes")));
        }
        let p = probs.data()[i * classes + label].max(tiny);
        loss -= p.ln();
        grad[i * classes + label] = -inv_n / p;
    }
    Ok((loss * inv_n, Tensor::new(probs.shape().to_vec(), grad)?))
}
