//! AdamW with decoupled weight decay, and the EMA teacher update.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments and the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step. `decay[i]` selects which tensors get weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    wd: f64,
    decay: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || decay.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments, {} decay flags",
                params.len(),
                grads.len(),
                state.m.len(),
                decay.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let p = &mut params[i];
        let g = &grads[i];
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let shrink = if decay[i] { 1.0 - lr * wd } else { 1.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].as_f64();
            let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * gj;
            let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            *pj = T::from_f64(pj.as_f64() * shrink - lr * update);
        }
    }
    Ok(())
}

/// `teacher ← λ·teacher + (1 − λ)·student`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Domain(format!("EMA coefficient {lam} outside [0, 1]")));
    }
    if teacher.config != student.config || teacher.tensors.len() != student.tensors.len() {
        return Err(Error::shape("ema_update", "teacher and student layouts differ"));
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        if t.shape() != s.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{:?} vs {:?}", t.shape(), s.shape()),
            ));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = T::from_f64(lam * tv.as_f64() + (1.0 - lam) * sv.as_f64());
        }
    }
    Ok(())
}
