use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

fn softmax_scaled(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax(logits / tau_s)`.
pub fn student_dist(logits: &[f64], tau_s: f64) -> Vec<f64> {
    softmax_scaled(logits, tau_s)
}

/// `softmax((logits - center) / tau_t)`.
pub fn teacher_dist(logits: &[f64], tau_t: f64, center: &Center) -> Vec<f64> {
    let shifted: Vec<f64> = logits.iter().zip(&center.c).map(|(&l, &c)| l - c as f64).collect();
    softmax_scaled(&shifted, tau_t)
}

/// Teacher distributions for every row of a `[..., K]` logit tensor.
pub fn teacher_probs<T: Scalar>(logits: &Tensor<T>, tau_t: f64, center: &Center) -> Result<Tensor<T>> {
    let k = *logits.shape().last().unwrap_or(&0);
    if k != center.c.len() {
        return Err(Error::shape(
            "teacher_probs",
            format!("logits {:?} with center of {}", logits.shape(), center.c.len()),
        ));
    }
    // Float64 internally: the result is a constant target, and centering in
    // float32 would lose shift invariance for large logits.
    let mut out = Vec::with_capacity(logits.len());
    let mut row = vec![0f64; k];
    for src in logits.data().chunks(k) {
        for ((r, &l), &c) in row.iter_mut().zip(src).zip(&center.c) {
            *r = (l.as_f64() - c as f64) / tau_t;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        out.extend(row.iter().map(|&v| T::from_f64((v - max).exp() / sum)));
    }
    Tensor::new(logits.shape(), out)
}

/// Running center subtracted from teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub c: Vec<f32>,
}

impl Center {
    pub fn zeros(k: usize) -> Self {
        Self { c: vec![0.0; k] }
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// `momentum * prev + (1 - momentum) * mean of the rows of cls_logits` (`[N, K]`).
pub fn update_center<T: Scalar>(cls_logits: &Tensor<T>, prev: &Center, momentum: f64) -> Result<Center> {
    let k = prev.c.len();
    if cls_logits.shape().len() != 2 || cls_logits.shape()[1] != k || cls_logits.shape()[0] == 0 {
        return Err(Error::shape(
            "update_center",
            format!("logits {:?} for a center of {k}", cls_logits.shape()),
        ));
    }
    let n = cls_logits.shape()[0] as f64;
    let mut mean = vec![0.0f64; k];
    for row in cls_logits.data().chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    let c = prev
        .c
        .iter()
        .zip(&mean)
        .map(|(&p, &m)| (momentum * p as f64 + (1.0 - momentum) * m / n) as f32)
        .collect();
    Ok(Center { c })
}
