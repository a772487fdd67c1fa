//! Training objectives: smoothed identity loss, object-query decorrelation,
//! and the contrast / reverse triplet pair, combined into the total loss.
//!
//! Every loss is a pure function of tape tensors and stays differentiable
//! end to end. Batch reduction defaults to plain sums; switch to means via
//! [`Reduction`] if loss magnitudes need to be batch-size independent.

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::error::{Error, Result};

/// Guard inside the Euclidean distance square root.
const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// What the decorrelation constraint is applied to: the shared learnable
/// query embeddings (one evaluation scaled by batch size) or each image's
/// decoder outputs. The formula superscripts queries per image while defining
/// them as shared embeddings; both readings are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecorrelationTarget {
    SharedQueries,
    DecoderOutputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Label-smoothing constant.
    pub epsilon: f64,
    /// Decorrelation penalty factor.
    pub alpha: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Reverse-triplet scale factor.
    pub lambda: f64,
    pub reduction: Reduction,
    pub decorrelation_target: DecorrelationTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            alpha: 1.0,
            margin: 0.3,
            lambda: 1.0,
            reduction: Reduction::Sum,
            decorrelation_target: DecorrelationTarget::SharedQueries,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0, 1), got {}", self.epsilon)));
        }
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "alpha and lambda must be non-negative, got {} / {}",
                self.alpha, self.lambda
            )));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Anchor / positive / negative feature nodes for one triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletFeatures {
    pub anchor: TensorId,
    pub positive: TensorId,
    pub negative: TensorId,
}

/// Cross entropy against label-smoothed targets, computed with log-sum-exp.
///
/// `logits` is batch x classes; targets put `1 - eps + eps/M` on the true
/// class and `eps/M` elsewhere. Reduction sums over the batch by default.
pub fn id_loss<E: Scalar>(
    tape: &mut Tape<E>,
    logits: TensorId,
    labels: &[usize],
    epsilon: f64,
    reduction: Reduction,
) -> Result<TensorId> {
    let (batch, classes) = match tape.shape(logits) {
        [b, m] => (*b, *m),
        s => {
            return Err(Error::Contract(format!(
                "id_loss expects batch x classes logits, got {s:?}"
            )))
        }
    };
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} identities"
        )));
    }
    let off = E::from_f64(epsilon / classes as f64);
    let on = E::from_f64(1.0 - epsilon + epsilon / classes as f64);
    let mut targets = vec![off; batch * classes];
    for (n, &y) in labels.iter().enumerate() {
        targets[n * classes + y] = on;
    }
    let targets = tape.constant(&[batch, classes], targets)?;

    // -sum_n sum_m q_m log softmax(z_n)_m  ==  sum_n [lse(z_n) - <q_n, z_n>]
    // because the smoothed targets sum to one per sample.
    let lse = tape.logsumexp(logits)?;
    let lse_total = tape.sum(lse);
    let dot = tape.inner_product(logits, targets)?;
    let mut loss = tape.sub(lse_total, dot)?;
    if reduction == Reduction::Mean {
        loss = tape.scale(loss, 1.0 / batch as f64);
    }
    Ok(loss)
}

/// Sum of absolute pairwise cosine similarities between query rows, diagonal
/// excluded, scaled by `alpha * batch_size`.
///
/// The diagonal terms are constants with zero gradient, so dropping them
/// changes nothing about the optimization and lets the loss reach zero at
/// orthogonality. The per-image sum collapses to the `batch_size` factor
/// because the queries are shared across images.
pub fn decorrelation_loss<E: Scalar>(
    tape: &mut Tape<E>,
    queries: TensorId,
    alpha: f64,
    batch_size: usize,
) -> Result<TensorId> {
    let scale = alpha * batch_size as f64;
    decorrelation_term(tape, queries, scale)
}

/// Decorrelation applied to each image's decoder outputs and summed.
pub fn decorrelation_loss_per_image<E: Scalar>(
    tape: &mut Tape<E>,
    decoder_outputs: &[TensorId],
    alpha: f64,
) -> Result<TensorId> {
    let mut total = tape.scalar(E::zero());
    for &f in decoder_outputs {
        let term = decorrelation_term(tape, f, alpha)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn decorrelation_term<E: Scalar>(tape: &mut Tape<E>, rows: TensorId, scale: f64) -> Result<TensorId> {
    let (nq, _d) = match tape.shape(rows) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::Contract(format!(
                "decorrelation expects a queries x dim matrix, got {s:?}"
            )))
        }
    };
    for (r, row) in tape.value(rows).chunks(tape.shape(rows)[1]).enumerate() {
        let sq: f64 = row.iter().map(|&v| v.to_f64() * v.to_f64()).sum();
        if sq.sqrt() < 1e-9 {
            return Err(Error::Numeric(format!("query row {r} has (near-)zero norm")));
        }
    }
    let normalized = tape.l2_normalize(rows)?;
    let normalized_t = tape.transpose(normalized)?;
    let cosines = tape.matmul(normalized, normalized_t)?;
    let magnitudes = tape.abs(cosines);
    let mut mask = vec![E::one(); nq * nq];
    for i in 0..nq {
        mask[i * nq + i] = E::zero();
    }
    let mask = tape.constant(&[nq, nq], mask)?;
    let off_diagonal = tape.inner_product(magnitudes, mask)?;
    Ok(tape.scale(off_diagonal, scale))
}

/// Euclidean distance between two equal-length feature vectors.
pub fn pair_distance<E: Scalar>(tape: &mut Tape<E>, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.value(a).len() != tape.value(b).len() {
        return Err(Error::Contract(format!(
            "distance between features of length {} and {}",
            tape.value(a).len(),
            tape.value(b).len()
        )));
    }
    let diff = tape.sub(a, b)?;
    let sq = tape.inner_product(diff, diff)?;
    let guarded = tape.offset(sq, DIST_EPS);
    Ok(tape.sqrt(guarded))
}

fn hinge<E: Scalar>(
    tape: &mut Tape<E>,
    pull: TensorId,
    push: TensorId,
    margin: f64,
) -> Result<TensorId> {
    let gap = tape.sub(pull, push)?;
    let shifted = tape.offset(gap, margin);
    Ok(tape.relu(shifted))
}

/// Contrast triplet loss: `sum [margin + D(a,p) - D(a,n)]_+` over triplets,
/// with Euclidean distance on L2-normalized features.
pub fn triplet_loss<E: Scalar>(
    tape: &mut Tape<E>,
    triplets: &[TripletFeatures],
    margin: f64,
    reduction: Reduction,
) -> Result<TensorId> {
    triplet_sum(tape, triplets, margin, reduction, false)
}

/// Reverse triplet loss: positive/negative roles swapped, pulling the
/// occlusion embeddings of same-obstacle pairs together and pushing
/// same-identity pairs apart.
pub fn reverse_triplet_loss<E: Scalar>(
    tape: &mut Tape<E>,
    triplets: &[TripletFeatures],
    margin: f64,
    reduction: Reduction,
) -> Result<TensorId> {
    triplet_sum(tape, triplets, margin, reduction, true)
}

fn triplet_sum<E: Scalar>(
    tape: &mut Tape<E>,
    triplets: &[TripletFeatures],
    margin: f64,
    reduction: Reduction,
    reversed: bool,
) -> Result<TensorId> {
    let mut total = tape.scalar(E::zero());
    for t in triplets {
        let a = tape.l2_normalize(t.anchor)?;
        let p = tape.l2_normalize(t.positive)?;
        let n = tape.l2_normalize(t.negative)?;
        let d_ap = pair_distance(tape, a, p)?;
        let d_an = pair_distance(tape, a, n)?;
        let term = if reversed {
            hinge(tape, d_an, d_ap, margin)?
        } else {
            hinge(tape, d_ap, d_an, margin)?
        };
        total = tape.add(total, term)?;
    }
    if reduction == Reduction::Mean && !triplets.is_empty() {
        total = tape.scale(total, 1.0 / triplets.len() as f64);
    }
    Ok(total)
}

/// The four components in the order they are logged.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub id: TensorId,
    pub decorrelation: TensorId,
    pub triplet: TensorId,
    pub reverse_triplet: TensorId,
}

/// Total objective: `L_ce + L_o + L_tri + lambda * L_rtri`.
pub fn total_loss<E: Scalar>(
    tape: &mut Tape<E>,
    components: LossComponents,
    lambda: f64,
) -> Result<TensorId> {
    let mut acc = tape.add(components.id, components.decorrelation)?;
    acc = tape.add(acc, components.triplet)?;
    let scaled = tape.scale(components.reverse_triplet, lambda);
    tape.add(acc, scaled)
}
