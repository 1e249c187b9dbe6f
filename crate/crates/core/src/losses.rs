//! Cross-entropy between teacher and student token distributions, aggregated
//! over matched tokens four ways:
//!
//! | kind | per-pair aggregate over matched tokens `p = 0..MP` |
//! |------|------------------------------------------------------|
//! | DINO | CLS term only                                        |
//! | PWML | mean of all terms                                    |
//! | PWSL | sum of all terms                                     |
//! | PWLL | `λ · CLS + (1 − λ) · mean of patch terms`            |
//!
//! Every kind then averages over images and (teacher view, student view) pairs.
//! Views are 0-indexed here: teacher views `0, 1` are the two global crops and
//! student views `0, 1` are the same crops, so pairs `(0, 0)` and `(1, 1)` are skipped.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{match_patches, Correspondence, CropRecord};
use crate::model::{teacher_probs, Center};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Dino,
    Pwml,
    Pwsl,
    /// Weight on the CLS term.
    Pwll(f64),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Pwll(l) if !(0.0..=1.0).contains(&l) => {
                Err(Error::Config(format!("PWLL lambda {l} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dino => "dino",
            LossKind::Pwml => "pwml",
            LossKind::Pwsl => "pwsl",
            LossKind::Pwll(_) => "pwll",
        }
    }

    /// Weight of each matched-token term of one pair with `mp` matches.
    pub fn weights(&self, mp: usize) -> Vec<f64> {
        assert!(mp >= 1, "a correspondence always holds the CLS pair");
        match *self {
            LossKind::Dino => {
                let mut w = vec![0.0; mp];
                w[0] = 1.0;
                w
            }
            LossKind::Pwml => vec![1.0 / mp as f64; mp],
            LossKind::Pwsl => vec![1.0; mp],
            LossKind::Pwll(lambda) => {
                let mut w = vec![(1.0 - lambda) / (mp.max(2) - 1) as f64; mp];
                w[0] = lambda;
                w
            }
        }
    }

    /// Number of leading correspondence entries that carry weight.
    fn active(&self, mp: usize) -> usize {
        match self {
            LossKind::Dino => 1,
            _ => mp,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `dino`, `pwml`, `pwsl`, `pwll` (λ = 0.2) or `pwll:<λ>`.
impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "dino" => LossKind::Dino,
            "pwml" => LossKind::Pwml,
            "pwsl" => LossKind::Pwsl,
            "pwll" => LossKind::Pwll(0.2),
            other => match other.strip_prefix("pwll:") {
                Some(l) => LossKind::Pwll(
                    l.parse()
                        .map_err(|e| Error::Config(format!("PWLL lambda {l:?}: {e}")))?,
                ),
                None => return Err(Error::Config(format!("unknown loss {s:?}"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// `-Σ a_k log b_k`.
pub fn cross_entropy(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} vs {} entries", a.len(), b.len()),
        ));
    }
    let mut total = 0.0;
    for (&ak, &bk) in a.iter().zip(b) {
        if bk <= 0.0 {
            return Err(Error::Domain(format!("cross-entropy target probability {bk}")));
        }
        total -= ak * bk.ln();
    }
    Ok(total)
}

/// Every (teacher view, student view) pair except a view with itself.
pub fn enumerate_pairs(n_teacher_globals: usize, n_student_views: usize) -> Vec<(usize, usize)> {
    (0..n_teacher_globals)
        .flat_map(|i| (0..n_student_views).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .collect()
}

/// Correspondence between teacher view `teacher` and student view `student`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrespondence {
    pub teacher: usize,
    pub student: usize,
    pub corr: Correspondence,
}

/// Matches every loss pair once from the batch-shared crop records
/// (`crops[0..2]` global, the rest local).
pub fn pair_correspondences(crops: &[CropRecord], patch: usize) -> Result<Vec<PairCorrespondence>> {
    if crops.len() < 2 {
        return Err(Error::Config(format!("{} crops, need at least 2 globals", crops.len())));
    }
    enumerate_pairs(2, crops.len())
        .into_iter()
        .map(|(i, j)| {
            Ok(PairCorrespondence {
                teacher: i,
                student: j,
                corr: match_patches(&crops[i], &crops[j], patch, patch)?,
            })
        })
        .collect()
}

/// Distributions of one image: teacher rows per global view, student rows per
/// view, each `[tokens, K]` with row 0 the CLS token.
#[derive(Debug, Clone)]
pub struct ViewOutputs {
    pub teacher: Vec<Tensor<f64>>,
    pub student: Vec<Tensor<f64>>,
    pub pairs: Vec<PairCorrespondence>,
}

impl ViewOutputs {
    fn term(&self, pair: &PairCorrespondence, p: usize) -> Result<f64> {
        let (ta, sb) = pair.corr.pairs()[p];
        let t = self
            .teacher
            .get(pair.teacher)
            .ok_or_else(|| Error::Domain(format!("no teacher view {}", pair.teacher)))?;
        let s = self
            .student
            .get(pair.student)
            .ok_or_else(|| Error::Domain(format!("no student view {}", pair.student)))?;
        if ta >= t.shape()[0] || sb >= s.shape()[0] {
            return Err(Error::Domain(format!(
                "token pair ({ta}, {sb}) outside views of {} and {} tokens",
                t.shape()[0],
                s.shape()[0]
            )));
        }
        cross_entropy(t.row(ta), s.row(sb))
    }
}

/// Loss of `kind` over a batch of per-image outputs.
pub fn loss_value(kind: LossKind, batch: &[ViewOutputs]) -> Result<f64> {
    kind.validate()?;
    let mut total = 0.0;
    let mut terms = 0usize;
    for img in batch {
        for pair in &img.pairs {
            let mp = pair.corr.mp();
            let w = kind.weights(mp);
            for (p, wp) in w.iter().enumerate().take(kind.active(mp)) {
                if *wp != 0.0 {
                    total += wp * img.term(pair, p)?;
                }
            }
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::Domain("loss over an empty batch".into()));
    }
    Ok(total / terms as f64)
}

pub fn dino_loss(batch: &[ViewOutputs]) -> Result<f64> {
    loss_value(LossKind::Dino, batch)
}

pub fn pwml(batch: &[ViewOutputs]) -> Result<f64> {
    loss_value(LossKind::Pwml, batch)
}

pub fn pwsl(batch: &[ViewOutputs]) -> Result<f64> {
    loss_value(LossKind::Pwsl, batch)
}

pub fn pwll(batch: &[ViewOutputs], lambda: f64) -> Result<f64> {
    loss_value(LossKind::Pwll(lambda), batch)
}

/// Result of [`batched_loss`].
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub loss: Var,
    /// (teacher view, student view) pairs per image.
    pub pair_terms: usize,
    /// Cross-entropy evaluations across the batch.
    pub ce_terms: usize,
    /// Mean entropy of the teacher CLS distributions.
    pub teacher_cls_entropy: f64,
}

/// Vectorized loss for a batch whose images share crop geometry.
///
/// `teacher_logits[i]` is `[B, 1 + T_i, K]` for global view `i` and is detached
/// here; `student_logits[j]` is `[B, 1 + T_j, K]` for every view.
#[allow(clippy::too_many_arguments)]
pub fn batched_loss<T: Scalar>(
    g: &mut Graph<T>,
    kind: LossKind,
    teacher_logits: &[Var],
    center: &Center,
    tau_t: f64,
    student_logits: &[Var],
    tau_s: f64,
    pairs: &[PairCorrespondence],
) -> Result<BatchLoss> {
    kind.validate()?;
    if pairs.is_empty() {
        return Err(Error::Domain("no view pairs".into()));
    }
    let batch = g.shape(student_logits[0])[0];
    let mut probs = Vec::with_capacity(teacher_logits.len());
    let mut entropy = 0.0;
    for &t in teacher_logits {
        let p = teacher_probs(g.value(t), tau_t, center)?;
        let k = p.shape()[2];
        let tokens = p.shape()[1];
        for b in 0..batch {
            let row = &p.data()[b * tokens * k..b * tokens * k + k];
            entropy -= row
                .iter()
                .filter(|v| v.as_f64() > 0.0)
                .map(|v| v.as_f64() * v.as_f64().ln())
                .sum::<f64>();
        }
        probs.push(g.constant(p));
    }
    entropy /= (batch * teacher_logits.len()) as f64;

    let mut log_student: Vec<Option<Var>> = vec![None; student_logits.len()];
    let mut total: Option<Var> = None;
    let mut ce_terms = 0;
    for pair in pairs {
        let mp = pair.corr.mp();
        let active = kind.active(mp);
        let corr = pair.corr.truncated(active);
        let ls = match log_student[pair.student] {
            Some(v) => v,
            None => {
                let scaled = g.scale(student_logits[pair.student], 1.0 / tau_s);
                let v = g.log_softmax(scaled);
                log_student[pair.student] = Some(v);
                v
            }
        };
        let t = g.gather(probs[pair.teacher], 1, &corr.side_a())?;
        let s = g.gather(ls, 1, &corr.side_b())?;
        let prod = g.mul(s, t)?;
        let neg_ce = g.sum(prod, 2)?;
        let weights = Tensor::from_f64(&[active], &kind.weights(mp)[..active])?;
        let w = g.constant(weights);
        let weighted = g.mul(neg_ce, w)?;
        let term = g.sum_all(weighted);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        ce_terms += batch * active;
    }
    let loss = g.scale(total.expect("pairs is non-empty"), -1.0 / (batch * pairs.len()) as f64);
    Ok(BatchLoss {
        loss,
        pair_terms: pairs.len(),
        ce_terms,
        teacher_cls_entropy: entropy,
    })
}
