//! Classification loss, pair-separation loss, and the in-batch pairing rule
//! that feeds the latter.
//!
//! Batches interleave cover/stego pairs: cover i sits at row 2i, its stego
//! at row 2i+1. The pairing plan pushes each cover away from its own stego
//! (different-class pairs) while pulling same-class neighbors together in a
//! ring, so every sample participates with O(batch) total pairs.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// Mixing weights for the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 3.0,
            lambda: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

pub fn cover_row(i: usize) -> usize {
    2 * i
}

pub fn stego_row(i: usize) -> usize {
    2 * i + 1
}

/// Row labels for an interleaved batch of `b` pairs: cover 0, stego 1.
pub fn interleaved_labels(b: usize) -> Vec<u8> {
    (0..2 * b).map(|r| (r % 2) as u8).collect()
}

/// (row_a, row_b, y) triples; y = 1 marks a different-class pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairingPlan {
    pub pairs: Vec<(usize, usize, u8)>,
}

/// For `b` cover/stego pairs: b different-class pairs (cover i, stego i),
/// then b cover-ring pairs, then b stego-ring pairs.
pub fn make_pairs(b: usize) -> Result<PairingPlan> {
    if b < 2 {
        return Err(Error::Config(format!(
            "pairing needs at least 2 cover/stego pairs per batch, got {b}"
        )));
    }
    let mut pairs = Vec::with_capacity(3 * b);
    for i in 0..b {
        pairs.push((cover_row(i), stego_row(i), 1));
    }
    for i in 0..b {
        pairs.push((cover_row(i), cover_row((i + 1) % b), 0));
    }
    for i in 0..b {
        pairs.push((stego_row(i), stego_row((i + 1) % b), 0));
    }
    Ok(PairingPlan { pairs })
}

/// Mean cross-entropy of sigmoid(logits) against the labels, plus lambda
/// times the mean pair-separation loss over [`make_pairs`]. `logits` holds
/// one value per row; `features` is the [rows, D] pre-classifier matrix.
pub fn combined_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[u8],
    features: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (rows, _) = tape.value(features).dims2("combined_loss")?;
    if tape.value(logits).numel() != rows || labels.len() != rows {
        return Err(Error::dim(
            "combined_loss",
            format!(
                "{} logits, {} labels, {rows} feature rows",
                tape.value(logits).numel(),
                labels.len()
            ),
        ));
    }
    if rows % 2 != 0 {
        return Err(Error::dim(
            "combined_loss",
            format!("{rows} rows do not interleave cover/stego pairs"),
        ));
    }
    let plan = make_pairs(rows / 2)?;
    let p = tape.sigmoid(logits);
    let ce = tape.cross_entropy(p, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let mut terms = Vec::with_capacity(plan.pairs.len());
    for &(i, j, y) in &plan.pairs {
        let a = tape.row_select(features, i)?;
        let b = tape.row_select(features, j)?;
        terms.push(tape.contrastive(a, b, y, cfg.margin)?);
    }
    let count = terms.len() as f64;
    let total = tape.sum_scalars(&terms)?;
    let mean = tape.scalar_mul(total, 1.0 / count);
    let scaled = tape.scalar_mul(mean, cfg.lambda);
    tape.add(ce, scaled)
}
