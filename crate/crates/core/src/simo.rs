//! The SimO (similarity-orthogonality) loss.
//!
//! For a batch of embeddings sharing one label `y`, every unique pair `i < j`
//! contributes a squared distance `d_ij = |e_i - e_j|^2` and a squared dot
//! product `o_ij = (e_i . e_j)^2`. The two sums are combined as ratios:
//!
//! ```text
//! L = ( y * Σd / (ε + Σo) + (1 - y) * Σo / (ε + Σd) ) / pairs
//! ```
//!
//! With `y = 1` the loss pulls the batch together while keeping it aligned;
//! with `y = 0` it pushes embeddings apart and towards mutual orthogonality.
//! Fractional labels blend both behaviours linearly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Tape, Tensor, Var};

/// Divisor applied to the combined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNormalization {
    /// Number of unique pairs, `m (m - 1) / 2`.
    PairCount,
    /// Number of embeddings `m`.
    BatchSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimoConfig {
    /// Denominator floor of both ratios.
    pub epsilon: f64,
    /// Orthogonality leaning factor, added to the label of dissimilar batches.
    pub olean: f64,
    pub normalization: PairNormalization,
    /// Multiplier on Σo. `1.0` is the plain loss; `0.0` removes the
    /// orthogonality term entirely (ablation).
    pub orthogonality_weight: f64,
}

impl Default for SimoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            olean: 0.1,
            normalization: PairNormalization::PairCount,
            orthogonality_weight: 1.0,
        }
    }
}

impl SimoConfig {
    pub fn validate(&self) -> Result<(), SimoError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SimoError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(0.0..=0.5).contains(&self.olean) {
            return Err(SimoError::InvalidConfig(format!(
                "olean must lie in [0, 0.5], got {}",
                self.olean
            )));
        }
        if !(self.orthogonality_weight >= 0.0 && self.orthogonality_weight.is_finite()) {
            return Err(SimoError::InvalidConfig(format!(
                "orthogonality_weight must be non-negative, got {}",
                self.orthogonality_weight
            )));
        }
        Ok(())
    }

    /// Label used for dissimilar batches, `0 + olean`.
    pub fn dissimilar_label(&self) -> f64 {
        self.olean
    }

    fn divisor(&self, members: usize) -> f64 {
        match self.normalization {
            PairNormalization::PairCount => (members * (members - 1) / 2) as f64,
            PairNormalization::BatchSize => members as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimoError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("SimO needs at least 2 embeddings per batch, got {0}")]
    TooFewEmbeddings(usize),
    #[error("embedding row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("label must lie in [0, 1], got {0}")]
    InvalidLabel(f64),
    #[error("group {group} has {found} embeddings, expected {expected}")]
    RaggedGroups {
        group: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid SimO configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Squared distance and squared dot product of one embedding pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub d: f64,
    pub o: f64,
}

pub fn pair_terms(a: &[f64], b: &[f64]) -> Result<PairTerms, SimoError> {
    if a.len() != b.len() {
        return Err(SimoError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut d = 0.0;
    let mut dot = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        d += (x - y) * (x - y);
        dot += x * y;
    }
    Ok(PairTerms { d, o: dot * dot })
}

/// Index lists of all pairs `i < j` over `0..m`, in lexicographic order.
pub fn unique_pairs(m: usize) -> (Vec<usize>, Vec<usize>) {
    let cap = m * m.saturating_sub(1) / 2;
    let (mut left, mut right) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
    for i in 0..m {
        for j in i + 1..m {
            left.push(i);
            right.push(j);
        }
    }
    (left, right)
}

fn check_label(y: f64) -> Result<(), SimoError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(SimoError::InvalidLabel(y));
    }
    Ok(())
}

/// Records the SimO loss over the rows `members` of `source`.
///
/// `members` lists row indices of a rank-2 node; the loss treats those rows as
/// one batch with label `y`.
pub fn simo_loss_rows(
    tape: &mut Tape,
    source: Var,
    members: &[usize],
    y: f64,
    config: &SimoConfig,
) -> Result<Var, SimoError> {
    config.validate()?;
    check_label(y)?;
    let m = members.len();
    if m < 2 {
        return Err(SimoError::TooFewEmbeddings(m));
    }
    {
        let values = tape.value(source);
        if values.rank() != 2 {
            return Err(DiffError::Rank {
                op: crate::diff::OpKind::GatherRows,
                expected: 2,
                shape: values.shape().to_vec(),
            }
            .into());
        }
        if let Some(&bad) = members
            .iter()
            .find(|&&r| r < values.rows() && !values.row(r).iter().all(|v| v.is_finite()))
        {
            return Err(SimoError::NonFinite(bad));
        }
    }

    let (left, right) = unique_pairs(m);
    let left: Vec<usize> = left.into_iter().map(|i| members[i]).collect();
    let right: Vec<usize> = right.into_iter().map(|j| members[j]).collect();
    let e1 = tape.gather_rows(source, &left)?;
    let e2 = tape.gather_rows(source, &right)?;

    let diff = tape.sub(e1, e2)?;
    let sq = tape.square(diff)?;
    let d = tape.row_sum(sq)?;
    let sum_d = tape.sum(d)?;

    let prod = tape.mul(e1, e2)?;
    let dots = tape.row_sum(prod)?;
    let o = tape.square(dots)?;
    let mut sum_o = tape.sum(o)?;
    if config.orthogonality_weight != 1.0 {
        sum_o = tape.scale(sum_o, config.orthogonality_weight)?;
    }

    let inv_o = tape.reciprocal_eps(sum_o, config.epsilon)?;
    let attract = tape.mul(sum_d, inv_o)?;
    let inv_d = tape.reciprocal_eps(sum_d, config.epsilon)?;
    let repel = tape.mul(sum_o, inv_d)?;

    let attract = tape.scale(attract, y)?;
    let repel = tape.scale(repel, 1.0 - y)?;
    let total = tape.add(attract, repel)?;
    Ok(tape.div_const(total, config.divisor(m))?)
}

/// Records the SimO loss over all rows of `embeddings`.
pub fn simo_loss_var(
    tape: &mut Tape,
    embeddings: Var,
    y: f64,
    config: &SimoConfig,
) -> Result<Var, SimoError> {
    let rows = tape.value(embeddings).rows();
    let members: Vec<usize> = (0..rows).collect();
    simo_loss_rows(tape, embeddings, &members, y, config)
}

/// Records the sum of per-group SimO losses. Every group must have the same
/// size.
pub fn grouped_loss_var(
    tape: &mut Tape,
    source: Var,
    groups: &[Vec<usize>],
    y: f64,
    config: &SimoConfig,
) -> Result<Var, SimoError> {
    let expected = groups.first().map_or(0, Vec::len);
    if let Some((group, g)) = groups.iter().enumerate().find(|(_, g)| g.len() != expected) {
        return Err(SimoError::RaggedGroups {
            group,
            expected,
            found: g.len(),
        });
    }
    let mut total: Option<Var> = None;
    for members in groups {
        let loss = simo_loss_rows(tape, source, members, y, config)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    total.ok_or(SimoError::TooFewEmbeddings(0))
}

/// SimO loss value of an `m x dim` embedding matrix.
pub fn simo_loss(embeddings: &Tensor, y: f64, config: &SimoConfig) -> Result<f64, SimoError> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let loss = simo_loss_var(&mut tape, e, y, config)?;
    Ok(tape.value(loss).item())
}

/// Sum of SimO losses over equally sized groups of embeddings.
pub fn grouped_loss(groups: &[Tensor], y: f64, config: &SimoConfig) -> Result<f64, SimoError> {
    let Some(first) = groups.first() else {
        return Err(SimoError::TooFewEmbeddings(0));
    };
    let (m, dim) = (first.rows(), first.cols());
    let mut rows = Vec::with_capacity(groups.len() * m * dim);
    let mut members = Vec::with_capacity(groups.len());
    for (g, t) in groups.iter().enumerate() {
        if t.rows() != m {
            return Err(SimoError::RaggedGroups {
                group: g,
                expected: m,
                found: t.rows(),
            });
        }
        if t.cols() != dim {
            return Err(SimoError::DimensionMismatch {
                left: dim,
                right: t.cols(),
            });
        }
        rows.extend_from_slice(t.data());
        members.push((g * m..(g + 1) * m).collect::<Vec<_>>());
    }
    let stacked = Tensor::matrix(groups.len() * m, dim, rows)?;
    let mut tape = Tape::new();
    let source = tape.constant(stacked);
    let loss = grouped_loss_var(&mut tape, source, &members, y, config)?;
    Ok(tape.value(loss).item())
}
