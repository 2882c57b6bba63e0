//! Pairwise ranking losses over one score vector.
//!
//! Both losses compare every negative label `v` against every positive label
//! `u` and only ever see score differences `f_v - f_u`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("no positive label")]
    EmptyPositiveSet,
    #[error("no negative label")]
    EmptyNegativeSet,
    #[error("logit {index} is not finite")]
    NonFiniteLogit { index: usize },
    #[error("relevance covers {expected} labels but {found} logits were given")]
    LengthMismatch { expected: usize, found: usize },
    #[error("every image in the batch was skipped")]
    AllImagesSkipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `log(1 + sum exp(f_v - f_u))`.
    #[default]
    Smooth,
    /// `max_{v,u} max(0, 1 + f_v - f_u)`, the single worst pair.
    Hinge,
    /// `sum_{v,u} max(0, 1 + f_v - f_u)`.
    HingeSum,
}

/// Positive labels `Y` and their complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceSets {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl RelevanceSets {
    /// From a 0/1 row, one entry per label.
    pub fn from_row(row: &[u8]) -> Self {
        let (mut positives, mut negatives) = (Vec::new(), Vec::new());
        for (i, &b) in row.iter().enumerate() {
            if b != 0 {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        Self { positives, negatives }
    }

    /// From positive indices among `n` labels; duplicates and out-of-range
    /// indices are ignored.
    pub fn new(positives: &[usize], n: usize) -> Self {
        let mut row = vec![0u8; n];
        for &p in positives {
            if p < n {
                row[p] = 1;
            }
        }
        Self::from_row(&row)
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    pub fn num_labels(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    /// Whether a ranking loss is defined (at least one label on each side).
    pub fn is_rankable(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }

    fn check(&self, logits: &[f64]) -> Result<(), LossError> {
        if logits.len() != self.num_labels() {
            return Err(LossError::LengthMismatch {
                expected: self.num_labels(),
                found: logits.len(),
            });
        }
        if self.positives.is_empty() {
            return Err(LossError::EmptyPositiveSet);
        }
        if self.negatives.is_empty() {
            return Err(LossError::EmptyNegativeSet);
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteLogit { index });
        }
        Ok(())
    }
}

/// Loss value and its gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn first_extreme(indices: &[usize], logits: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = indices[0];
    for &i in &indices[1..] {
        if better(logits[i], logits[best]) {
            best = i;
        }
    }
    best
}

/// The pair `(v, u)` maximizing `1 + f_v - f_u`, with that value.
///
/// Ties go to the first pair in a scan over `v` ascending, then `u` ascending.
pub fn hinge_worst_pair(logits: &[f64], rel: &RelevanceSets) -> Result<(usize, usize, f64), LossError> {
    rel.check(logits)?;
    let margin = |v: usize, u: usize| 1.0 + logits[v] - logits[u];
    let u_low = first_extreme(&rel.positives, logits, |a, b| a < b);
    let v_high = first_extreme(&rel.negatives, logits, |a, b| a > b);
    let best = margin(v_high, u_low);
    // Rounding can make an earlier pair reach the same value.
    let v = *rel
        .negatives
        .iter()
        .find(|&&v| margin(v, u_low) == best)
        .expect("v_high attains the maximum");
    let u = *rel
        .positives
        .iter()
        .find(|&&u| margin(v, u) == best)
        .expect("u_low attains the maximum");
    Ok((v, u, best))
}

/// Worst-pair hinge ranking loss with its subgradient: `+1` at the selected
/// negative, `-1` at the selected positive, zero when the margin is satisfied.
pub fn hinge_rank_loss(logits: &[f64], rel: &RelevanceSets) -> Result<LossValue, LossError> {
    let (v, u, value) = hinge_worst_pair(logits, rel)?;
    let mut grad = vec![0.0; logits.len()];
    if value > 0.0 {
        grad[v] = 1.0;
        grad[u] = -1.0;
        Ok(LossValue { loss: value, grad })
    } else {
        Ok(LossValue { loss: 0.0, grad })
    }
}

/// Hinge loss summed over all pairs instead of taking the worst one.
pub fn hinge_sum_rank_loss(logits: &[f64], rel: &RelevanceSets) -> Result<LossValue, LossError> {
    rel.check(logits)?;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for &v in &rel.negatives {
        for &u in &rel.positives {
            let m = 1.0 + logits[v] - logits[u];
            if m > 0.0 {
                loss += m;
                grad[v] += 1.0;
                grad[u] -= 1.0;
            }
        }
    }
    Ok(LossValue { loss, grad })
}

/// `log(1 + sum_{v not in Y, u in Y} exp(f_v - f_u))` and its exact gradient.
///
/// The pair sum factors as `(sum_v e^{f_v}) (sum_u e^{-f_u})`; each factor is
/// shifted by its extreme logit so that nothing overflows.
pub fn smooth_rank_loss(logits: &[f64], rel: &RelevanceSets) -> Result<LossValue, LossError> {
    rel.check(logits)?;
    let top_negative = rel
        .negatives
        .iter()
        .map(|&v| logits[v])
        .fold(f64::NEG_INFINITY, f64::max);
    let low_positive = rel.positives.iter().map(|&u| logits[u]).fold(f64::INFINITY, f64::min);
    let shift = top_negative - low_positive;

    let neg_terms: Vec<f64> = rel
        .negatives
        .iter()
        .map(|&v| (logits[v] - top_negative).exp())
        .collect();
    let pos_terms: Vec<f64> = rel
        .positives
        .iter()
        .map(|&u| (low_positive - logits[u]).exp())
        .collect();
    let neg_sum: f64 = neg_terms.iter().sum();
    let pos_sum: f64 = pos_terms.iter().sum();
    let pair_sum = neg_sum * pos_sum;

    let loss = if shift > 0.0 {
        shift + ((-shift).exp() + pair_sum).ln()
    } else {
        (shift.exp() * pair_sum).ln_1p()
    };
    // 1 / (e^{-shift} + pair_sum) = e^{shift} / (1 + sum of all pair terms)
    let scale = 1.0 / ((-shift).exp() + pair_sum);
    let mut grad = vec![0.0; logits.len()];
    for (&v, t) in rel.negatives.iter().zip(&neg_terms) {
        grad[v] = t * pos_sum * scale;
    }
    for (&u, t) in rel.positives.iter().zip(&pos_terms) {
        grad[u] = -t * neg_sum * scale;
    }
    Ok(LossValue { loss, grad })
}

pub fn rank_loss(kind: LossKind, logits: &[f64], rel: &RelevanceSets) -> Result<LossValue, LossError> {
    match kind {
        LossKind::Smooth => smooth_rank_loss(logits, rel),
        LossKind::Hinge => hinge_rank_loss(logits, rel),
        LossKind::HingeSum => hinge_sum_rank_loss(logits, rel),
    }
}

/// Mean loss over the rankable images of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    /// Gradient of `mean` w.r.t. every logit; zero rows for skipped images.
    pub grads: Vec<Vec<f64>>,
    /// Per-image loss, `None` for skipped images.
    pub losses: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Images whose relevance set is empty or complete are skipped and counted;
/// the mean and its gradient run over the remaining ones.
pub fn batch_loss(logits: &[Vec<f64>], relevance: &[RelevanceSets], kind: LossKind) -> Result<BatchLoss, LossError> {
    if logits.len() != relevance.len() {
        return Err(LossError::LengthMismatch {
            expected: relevance.len(),
            found: logits.len(),
        });
    }
    let mut values = Vec::with_capacity(logits.len());
    for (l, rel) in logits.iter().zip(relevance) {
        if rel.is_rankable() {
            values.push(Some(rank_loss(kind, l, rel)?));
        } else {
            if l.len() != rel.num_labels() {
                return Err(LossError::LengthMismatch {
                    expected: rel.num_labels(),
                    found: l.len(),
                });
            }
            values.push(None);
        }
    }
    let used = values.iter().flatten().count();
    if used == 0 {
        return Err(LossError::AllImagesSkipped);
    }
    let scale = 1.0 / used as f64;
    let mean = values.iter().flatten().map(|v| v.loss).sum::<f64>() * scale;
    let grads = values
        .iter()
        .zip(logits)
        .map(|(v, l)| match v {
            Some(v) => v.grad.iter().map(|g| g * scale).collect(),
            None => vec![0.0; l.len()],
        })
        .collect();
    Ok(BatchLoss {
        mean,
        grads,
        losses: values.iter().map(|v| v.as_ref().map(|v| v.loss)).collect(),
        skipped: logits.len() - used,
    })
}
