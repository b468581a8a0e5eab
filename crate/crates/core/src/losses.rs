//! Training objectives: sentiment similarity, self-supervised and
//! hard-label contrastive losses, the soft valence-weighted contrastive
//! loss, masked-language-model cross-entropy, and the combined objective.
//!
//! Conventions shared by every contrastive loss here:
//! - representations are L2-normalized inside the loss, not by the encoder;
//! - similarity logits are dot products divided by the temperature;
//! - an anchor is never its own candidate;
//! - losses are sums over anchors, not means.

use thiserror::Error;

use crate::affect::{ValenceRating, VALENCE_MAX, VALENCE_MIN};
use crate::autodiff::{concat_rows, Var};
use crate::tensor::{NumericError, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("lambda weights must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("loss component {name} is not finite or negative: {value}")]
    BadComponent { name: &'static str, value: f64 },
    #[error("sentinel (masked) valence passed where a rating is required")]
    MaskedValence,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("batch has {reps} representation rows but {valences} valences")]
    LengthMismatch { reps: usize, valences: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Discrete polarity label used by the hard-label baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    /// Threshold a valence rating at `threshold` (the scale midpoint 5 by
    /// convention): above is positive, below negative, equal neutral.
    pub fn from_valence(v: f64, threshold: f64) -> Polarity {
        if v > threshold {
            Polarity::Positive
        } else if v < threshold {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }
}

/// Marks where a contrastive batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrigin {
    WordLevel,
    SentenceLevel,
}

/// Representations plus aligned valences for one contrastive evaluation.
/// Sentinel valences must be filtered out upstream; construction rejects
/// them.
pub struct ContrastiveBatch<'t> {
    pub reps: Var<'t>,
    pub valences: Vec<f64>,
    pub origin: BatchOrigin,
}

impl<'t> ContrastiveBatch<'t> {
    pub fn new(
        reps: Var<'t>,
        valences: &[ValenceRating],
        origin: BatchOrigin,
    ) -> Result<Self, LossError> {
        let m = reps.value().rows()?;
        if m != valences.len() {
            return Err(LossError::LengthMismatch {
                reps: m,
                valences: valences.len(),
            });
        }
        let mut vals = Vec::with_capacity(m);
        for v in valences {
            if v.is_sentinel() {
                return Err(LossError::MaskedValence);
            }
            vals.push(v.value());
        }
        Ok(ContrastiveBatch {
            reps,
            valences: vals,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.valences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valences.is_empty()
    }
}

/// Normalized absolute similarity of two valence ratings:
/// `1 - |y1 - y2| / (y_max - y_min)`, in [0, 1], symmetric.
pub fn sentiment_similarity(y1: ValenceRating, y2: ValenceRating) -> Result<f64, LossError> {
    if y1.is_sentinel() || y2.is_sentinel() {
        return Err(LossError::MaskedValence);
    }
    Ok(delta(y1.value(), y2.value()))
}

/// `sentiment_similarity` on already-validated raw values.
pub(crate) fn delta(y1: f64, y2: f64) -> f64 {
    1.0 - (y1 - y2).abs() / (VALENCE_MAX - VALENCE_MIN)
}

/// Soft weight matrix: `W[i][j] = delta(i, j) / sum_l delta(i, l)` over
/// candidates, with the anchor's own slot zeroed and rows with zero total
/// similarity left all-zero (those anchors contribute nothing).
pub(crate) fn soft_weight_matrix(anchor_vals: &[f64], cand_vals: &[f64]) -> Tensor {
    let n = anchor_vals.len();
    let m = cand_vals.len();
    let mut w = vec![0.0; n * m];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..m {
            if j == i {
                continue; // anchors are the leading candidate block
            }
            let d = delta(anchor_vals[i], cand_vals[j]);
            w[i * m + j] = d;
            row_sum += d;
        }
        if row_sum > 0.0 {
            for j in 0..m {
                w[i * m + j] /= row_sum;
            }
        } else {
            for j in 0..m {
                w[i * m + j] = 0.0;
            }
        }
    }
    Tensor::new(vec![n, m], w).expect("weight matrix construction cannot fail")
}

/// Hard-label weight matrix: `1/|P(i)|` on same-label rows, 0 elsewhere.
/// Returns `None` if no anchor has a positive.
fn supervised_weight_matrix(labels: &[Polarity]) -> Option<Tensor> {
    let m = labels.len();
    let mut w = vec![0.0; m * m];
    let mut any = false;
    for i in 0..m {
        let positives: Vec<usize> = (0..m)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        any = true;
        let share = 1.0 / positives.len() as f64;
        for p in positives {
            w[i * m + p] = share;
        }
    }
    if any {
        Some(Tensor::new(vec![m, m], w).expect("weight matrix construction cannot fail"))
    } else {
        None
    }
}

/// Shared core: `-sum_ij W[i][j] * log softmax_j(sim[i] / tau)` where the
/// candidate set is the anchors themselves plus optional detached extras,
/// and each anchor's own slot is masked out of the softmax.
fn weighted_nce<'t>(
    reps: Var<'t>,
    extra: Option<&Tensor>,
    weights: Tensor,
    tau: f64,
) -> Result<Var<'t>, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let m = reps.value().rows()?;
    let all = match extra {
        Some(q) => {
            let q_const = reps.tape().constant(q.clone());
            concat_rows(&[reps, q_const])?
        }
        None => reps,
    };
    let normed = all.l2_normalize_rows()?;
    let anchors = if extra.is_some() {
        let anchor_rows: Vec<usize> = (0..m).collect();
        normed.gather_rows(&anchor_rows)?
    } else {
        normed
    };
    let self_slots: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).collect();
    let logp = anchors
        .matmul(normed.transpose()?)?
        .scale(1.0 / tau)?
        .mask_entries(&self_slots)?
        .log_softmax_rows()?;
    let w = reps.tape().constant(weights);
    Ok(logp.mul(w)?.sum_all()?.neg()?)
}

/// Self-supervised contrastive loss. Row `i` of `candidates` is the positive
/// for anchor `i`; any candidate rows beyond the anchor count act as extra
/// negatives. The candidate pool for every anchor is the full candidate
/// matrix (anchors themselves are not candidates).
pub fn loss_selfsup_cl<'t>(
    anchors: Var<'t>,
    candidates: Var<'t>,
    tau: f64,
) -> Result<Var<'t>, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let n = anchors.value().rows()?;
    let m = candidates.value().rows()?;
    if n == 0 || m < n {
        return Err(LossError::DegenerateBatch(
            "need one candidate row per anchor",
        ));
    }
    let an = anchors.l2_normalize_rows()?;
    let cn = candidates.l2_normalize_rows()?;
    let logp = an
        .matmul(cn.transpose()?)?
        .scale(1.0 / tau)?
        .log_softmax_rows()?;
    let diag: Vec<usize> = (0..n).collect();
    Ok(logp.pick_per_row(&diag)?.sum_all()?.neg()?)
}

/// Supervised contrastive loss with hard polarity labels. Anchors whose
/// label is shared by no other row are skipped; a batch where every anchor
/// is skipped is degenerate.
pub fn loss_supervised_cl<'t>(
    reps: Var<'t>,
    labels: &[Polarity],
    tau: f64,
) -> Result<Var<'t>, LossError> {
    let m = reps.value().rows()?;
    if m != labels.len() {
        return Err(LossError::LengthMismatch {
            reps: m,
            valences: labels.len(),
        });
    }
    if m < 2 {
        return Err(LossError::DegenerateBatch("need at least two rows"));
    }
    let weights = supervised_weight_matrix(labels)
        .ok_or(LossError::DegenerateBatch("no anchor has a same-label positive"))?;
    weighted_nce(reps, None, weights, tau)
}

/// Soft sentiment-weighted contrastive loss over in-batch candidates: the
/// cross-entropy between the per-anchor valence-similarity distribution and
/// the softmax of representation similarities.
pub fn loss_soft_cl<'t>(batch: &ContrastiveBatch<'t>, tau: f64) -> Result<Var<'t>, LossError> {
    if batch.len() < 2 {
        return Err(LossError::DegenerateBatch("need at least two rows"));
    }
    let weights = soft_weight_matrix(&batch.valences, &batch.valences);
    weighted_nce(batch.reps, None, weights, tau)
}

/// Soft contrastive loss over the union of in-batch rows and detached
/// extra candidates (the momentum queue). With no extras this is exactly
/// [`loss_soft_cl`]. Gradient never flows into `extra`.
pub fn loss_soft_cl_with_candidates<'t>(
    batch: &ContrastiveBatch<'t>,
    extra: Option<(&Tensor, &[f64])>,
    tau: f64,
) -> Result<Var<'t>, LossError> {
    let q = extra.map_or(0, |(t, _)| t.rows().unwrap_or(0));
    if batch.len() + q < 2 {
        return Err(LossError::DegenerateBatch("empty candidate set"));
    }
    match extra {
        None | Some((_, &[])) => loss_soft_cl(batch, tau),
        Some((queue_reps, queue_vals)) => {
            if queue_reps.rows()? != queue_vals.len() {
                return Err(LossError::LengthMismatch {
                    reps: queue_reps.rows()?,
                    valences: queue_vals.len(),
                });
            }
            let mut cand_vals = batch.valences.clone();
            cand_vals.extend_from_slice(queue_vals);
            let weights = soft_weight_matrix(&batch.valences, &cand_vals);
            weighted_nce(batch.reps, Some(queue_reps), weights, tau)
        }
    }
}

/// Mean cross-entropy over masked positions. Zero masked positions
/// contribute a constant 0 (the caller decides whether to warn).
pub fn loss_mlm<'t>(logits: Var<'t>, targets: &[u32]) -> Result<Var<'t>, LossError> {
    let n = logits.value().rows()?;
    if n != targets.len() {
        return Err(LossError::LengthMismatch {
            reps: n,
            valences: targets.len(),
        });
    }
    if n == 0 {
        return Ok(logits.tape().scalar_const(0.0));
    }
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(logits
        .log_softmax_rows()?
        .pick_per_row(&cols)?
        .mean_all()?
        .neg()?)
}

/// MLM, word-level and sentence-level components with the weighted total.
/// `total == mlm + lambda1 * word_mcl + lambda2 * sent_mcl` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub word_mcl: f64,
    pub sent_mcl: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Combine components with the balance weights (defaults 0.25 / 0.25).
pub fn loss_combined(
    mlm: f64,
    word_mcl: f64,
    sent_mcl: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown, LossError> {
    for (name, value) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(value >= 0.0) {
            return Err(LossError::BadLambda(if name == "lambda1" {
                lambda1
            } else {
                lambda2
            }));
        }
    }
    for (name, value) in [("mlm", mlm), ("word_mcl", word_mcl), ("sent_mcl", sent_mcl)] {
        if !value.is_finite() || value < 0.0 {
            return Err(LossError::BadComponent { name, value });
        }
    }
    Ok(LossBreakdown {
        mlm,
        word_mcl,
        sent_mcl,
        total: mlm + lambda1 * word_mcl + lambda2 * sent_mcl,
        lambda1,
        lambda2,
    })
}

pub const DEFAULT_LAMBDA1: f64 = 0.25;
pub const DEFAULT_LAMBDA2: f64 = 0.25;

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{grad_check, NamedTensors};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ── Independent oracles ──────────────────────────────────────────
    //
    // Naive double-loop implementations, deliberately avoiding the tape,
    // matrix ops, and the max-subtraction trick.

    fn oracle_normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.iter().map(|v| v / norm).collect()
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub(crate) fn oracle_selfsup(anchors: &[Vec<f64>], cands: &[Vec<f64>], tau: f64) -> f64 {
        let an = oracle_normalize(anchors);
        let cn = oracle_normalize(cands);
        let mut loss = 0.0;
        for (i, a) in an.iter().enumerate() {
            let denom: f64 = cn.iter().map(|c| (dot(a, c) / tau).exp()).sum();
            let num = (dot(a, &cn[i]) / tau).exp();
            loss -= (num / denom).ln();
        }
        loss
    }

    pub(crate) fn oracle_supervised(reps: &[Vec<f64>], labels: &[Polarity], tau: f64) -> f64 {
        let h = oracle_normalize(reps);
        let m = h.len();
        let mut loss = 0.0;
        for i in 0..m {
            let positives: Vec<usize> =
                (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if positives.is_empty() {
                continue;
            }
            let denom: f64 = (0..m)
                .filter(|&k| k != i)
                .map(|k| (dot(&h[i], &h[k]) / tau).exp())
                .sum();
            for &p in &positives {
                let num = (dot(&h[i], &h[p]) / tau).exp();
                loss -= (num / denom).ln() / positives.len() as f64;
            }
        }
        loss
    }

    pub(crate) fn oracle_soft(
        reps: &[Vec<f64>],
        valences: &[f64],
        queue_reps: &[Vec<f64>],
        queue_vals: &[f64],
        tau: f64,
    ) -> f64 {
        let mut all: Vec<Vec<f64>> = reps.to_vec();
        all.extend(queue_reps.iter().cloned());
        let mut all_vals = valences.to_vec();
        all_vals.extend_from_slice(queue_vals);
        let h = oracle_normalize(&all);
        let m = reps.len();
        let total = all.len();
        let mut loss = 0.0;
        for i in 0..m {
            let cands: Vec<usize> = (0..total).filter(|&j| j != i).collect();
            let delta_sum: f64 = cands.iter().map(|&j| delta(valences[i], all_vals[j])).sum();
            if delta_sum == 0.0 {
                continue;
            }
            let denom: f64 = cands
                .iter()
                .map(|&k| (dot(&h[i], &h[k]) / tau).exp())
                .sum();
            for &j in &cands {
                let weight = delta(valences[i], all_vals[j]) / delta_sum;
                let p = (dot(&h[i], &h[j]) / tau).exp() / denom;
                loss -= weight * p.ln();
            }
        }
        loss
    }

    pub(crate) fn oracle_mlm(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
        let mut loss = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            loss -= (row[t].exp() / denom).ln();
        }
        loss / logits.len() as f64
    }

    // ── Helpers ──────────────────────────────────────────────────────

    fn rand_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn rand_valences(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.gen_range(1.0..=9.0)).collect()
    }

    fn leaf_rows<'t>(tape: &'t Tape, rows: &[Vec<f64>]) -> Var<'t> {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    fn batch_from<'t>(tape: &'t Tape, rows: &[Vec<f64>], vals: &[f64]) -> ContrastiveBatch<'t> {
        let ratings: Vec<ValenceRating> =
            vals.iter().map(|&v| ValenceRating::rated(v).unwrap()).collect();
        ContrastiveBatch::new(leaf_rows(tape, rows), &ratings, BatchOrigin::SentenceLevel).unwrap()
    }

    fn r(v: f64) -> ValenceRating {
        ValenceRating::rated(v).unwrap()
    }

    // ── sentiment_similarity ─────────────────────────────────────────

    #[test]
    fn similarity_of_footnote_values() {
        let d = sentiment_similarity(r(4.14), r(3.24)).unwrap();
        assert!((d - 0.8875).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn similarity_is_one_for_equal_and_zero_for_extremes() {
        for v in [1.0, 3.3, 5.0, 9.0] {
            assert_eq!(sentiment_similarity(r(v), r(v)).unwrap(), 1.0);
        }
        assert_eq!(sentiment_similarity(r(1.0), r(9.0)).unwrap(), 0.0);
        assert_eq!(sentiment_similarity(r(9.0), r(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn similarity_rejects_sentinel() {
        assert!(matches!(
            sentiment_similarity(ValenceRating::SENTINEL, r(5.0)),
            Err(LossError::MaskedValence)
        ));
    }

    #[test]
    fn similarity_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = rng.gen_range(1.0..=9.0);
            let b = rng.gen_range(1.0..=9.0);
            assert_eq!(
                sentiment_similarity(r(a), r(b)).unwrap(),
                sentiment_similarity(r(b), r(a)).unwrap()
            );
        }
    }

    // ── loss_selfsup_cl ──────────────────────────────────────────────

    #[test]
    fn selfsup_lone_identical_pair_is_zero() {
        let tape = Tape::new();
        let a = leaf_rows(&tape, &[vec![1.0, 0.0]]);
        let p = leaf_rows(&tape, &[vec![1.0, 0.0]]);
        let loss = loss_selfsup_cl(a, p, 0.7).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn selfsup_orthogonal_anchor_with_one_negative_is_log_two() {
        let tape = Tape::new();
        let a = leaf_rows(&tape, &[vec![1.0, 0.0, 0.0]]);
        let cands = leaf_rows(&tape, &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let loss = loss_selfsup_cl(a, cands, 1.0).unwrap().item().unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn selfsup_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let anchors = rand_rows(&mut rng, 6, 8);
            let cands = rand_rows(&mut rng, 6, 8);
            let tau = rng.gen_range(0.1..1.0);
            let expected = oracle_selfsup(&anchors, &cands, tau);
            let tape = Tape::new();
            let got = loss_selfsup_cl(leaf_rows(&tape, &anchors), leaf_rows(&tape, &cands), tau)
                .unwrap()
                .item()
                .unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn selfsup_rejects_bad_temperature() {
        let tape = Tape::new();
        let a = leaf_rows(&tape, &[vec![1.0, 0.0]]);
        assert!(matches!(
            loss_selfsup_cl(a, a, 0.0),
            Err(LossError::BadTemperature(_))
        ));
    }

    // ── loss_supervised_cl ───────────────────────────────────────────

    #[test]
    fn supervised_two_identical_same_label_rows_is_zero() {
        let tape = Tape::new();
        let reps = leaf_rows(&tape, &[vec![0.3, 0.4], vec![0.3, 0.4]]);
        let loss = loss_supervised_cl(reps, &[Polarity::Positive; 2], 0.5)
            .unwrap()
            .item()
            .unwrap();
        assert!(loss.abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn supervised_uniform_logits_give_four_log_three() {
        let tape = Tape::new();
        let reps = leaf_rows(&tape, &vec![vec![0.2, 0.1]; 4]);
        let labels = [
            Polarity::Positive,
            Polarity::Positive,
            Polarity::Negative,
            Polarity::Negative,
        ];
        let loss = loss_supervised_cl(reps, &labels, 1.0).unwrap().item().unwrap();
        assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-10, "got {loss}");
    }

    #[test]
    fn supervised_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let polarities = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];
        for _ in 0..20 {
            let reps = rand_rows(&mut rng, 8, 8);
            let labels: Vec<Polarity> =
                (0..8).map(|_| polarities[rng.gen_range(0..3)]).collect();
            if supervised_weight_matrix(&labels).is_none() {
                continue;
            }
            let tau = rng.gen_range(0.1..1.0);
            let expected = oracle_supervised(&reps, &labels, tau);
            let tape = Tape::new();
            let got = loss_supervised_cl(leaf_rows(&tape, &reps), &labels, tau)
                .unwrap()
                .item()
                .unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn supervised_all_anchors_skipped_is_degenerate() {
        let tape = Tape::new();
        let reps = leaf_rows(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            loss_supervised_cl(reps, &[Polarity::Positive, Polarity::Negative], 1.0),
            Err(LossError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn supervised_skipped_anchor_contributes_zero() {
        // Third row's label is unique: full loss equals the two-row loss of
        // the paired block against the full candidate set.
        let rows = vec![vec![0.9, 0.1], vec![0.7, 0.3], vec![-0.5, 0.8]];
        let labels = [Polarity::Positive, Polarity::Positive, Polarity::Negative];
        let expected = oracle_supervised(&rows, &labels, 0.4);
        let tape = Tape::new();
        let got = loss_supervised_cl(leaf_rows(&tape, &rows), &labels, 0.4)
            .unwrap()
            .item()
            .unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    // ── loss_soft_cl ─────────────────────────────────────────────────

    #[test]
    fn soft_uniform_case_is_three_log_two() {
        let tape = Tape::new();
        let batch = batch_from(&tape, &vec![vec![0.5, 0.5]; 3], &[6.0, 6.0, 6.0]);
        let loss = loss_soft_cl(&batch, 1.0).unwrap().item().unwrap();
        assert!((loss - 3.0 * 2f64.ln()).abs() < 1e-10, "got {loss}");
    }

    #[test]
    fn soft_with_indicator_weights_equals_supervised() {
        // Valences at the scale endpoints make delta exactly 1 within a
        // group and exactly 0 across, collapsing the soft weights to the
        // hard-label form.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let reps = rand_rows(&mut rng, 6, 8);
            let vals = [1.0, 1.0, 1.0, 9.0, 9.0, 9.0];
            let labels: Vec<Polarity> =
                vals.iter().map(|&v| Polarity::from_valence(v, 5.0)).collect();
            let tau = rng.gen_range(0.1..1.0);
            let tape = Tape::new();
            let soft = loss_soft_cl(&batch_from(&tape, &reps, &vals), tau)
                .unwrap()
                .item()
                .unwrap();
            let hard = loss_supervised_cl(leaf_rows(&tape, &reps), &labels, tau)
                .unwrap()
                .item()
                .unwrap();
            assert!((soft - hard).abs() < 1e-10, "{soft} vs {hard}");
        }
    }

    #[test]
    fn soft_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let reps = rand_rows(&mut rng, 6, 8);
            let vals = rand_valences(&mut rng, 6);
            let tau = rng.gen_range(0.1..1.0);
            let expected = oracle_soft(&reps, &vals, &[], &[], tau);
            let tape = Tape::new();
            let got = loss_soft_cl(&batch_from(&tape, &reps, &vals), tau)
                .unwrap()
                .item()
                .unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn soft_zero_delta_anchors_contribute_zero_not_nan() {
        let tape = Tape::new();
        let batch = batch_from(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 9.0]);
        let loss = loss_soft_cl(&batch, 0.5).unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn soft_rejects_single_row() {
        let tape = Tape::new();
        let batch = batch_from(&tape, &[vec![1.0, 0.0]], &[5.0]);
        assert!(matches!(
            loss_soft_cl(&batch, 0.5),
            Err(LossError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn soft_weight_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let vals = rand_valences(&mut rng, 7);
            let w = soft_weight_matrix(&vals, &vals);
            for i in 0..7 {
                let row = w.row(i).unwrap();
                assert!(row.iter().all(|&x| x >= 0.0));
                assert_eq!(row[i], 0.0);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
        }
    }

    // ── invariances shared by the contrastive losses ─────────────────

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let reps = rand_rows(&mut rng, 6, 8);
        let vals = rand_valences(&mut rng, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let reps_p: Vec<Vec<f64>> = perm.iter().map(|&i| reps[i].clone()).collect();
        let vals_p: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();

        let tape = Tape::new();
        let a = loss_soft_cl(&batch_from(&tape, &reps, &vals), 0.3)
            .unwrap()
            .item()
            .unwrap();
        let b = loss_soft_cl(&batch_from(&tape, &reps_p, &vals_p), 0.3)
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b).abs() < 1e-10);

        let labels: Vec<Polarity> =
            vals.iter().map(|&v| Polarity::from_valence(v, 5.0)).collect();
        let labels_p: Vec<Polarity> = perm.iter().map(|&i| labels[i]).collect();
        let a = loss_supervised_cl(leaf_rows(&tape, &reps), &labels, 0.3)
            .unwrap()
            .item()
            .unwrap();
        let b = loss_supervised_cl(leaf_rows(&tape, &reps_p), &labels_p, 0.3)
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn losses_ignore_positive_rescaling_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let reps = rand_rows(&mut rng, 5, 6);
        let vals = rand_valences(&mut rng, 5);
        let scales = [0.01, 1.0, 7.3, 120.0, 0.5];
        let scaled: Vec<Vec<f64>> = reps
            .iter()
            .zip(scales)
            .map(|(row, s)| row.iter().map(|v| v * s).collect())
            .collect();
        let tape = Tape::new();
        let a = loss_soft_cl(&batch_from(&tape, &reps, &vals), 0.4)
            .unwrap()
            .item()
            .unwrap();
        let b = loss_soft_cl(&batch_from(&tape, &scaled, &vals), 0.4)
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn sharper_temperature_does_not_increase_loss_on_aligned_batch() {
        // Anchor at valence 1 with its nearest-valence candidate also the
        // nearest in angle; the far candidate sits at the opposite end of
        // the scale so its weight is tiny.
        let theta = |deg: f64| {
            let rad = deg.to_radians();
            vec![rad.cos(), rad.sin()]
        };
        let reps = vec![theta(0.0), theta(15.0), theta(70.0)];
        let vals = [1.0, 1.5, 9.0];
        let tape = Tape::new();
        let at = |tau: f64| {
            loss_soft_cl(&batch_from(&tape, &reps, &vals), tau)
                .unwrap()
                .item()
                .unwrap()
        };
        assert!(at(0.1) <= at(1.0), "0.1: {}, 1.0: {}", at(0.1), at(1.0));
        assert!(at(0.4) <= at(1.0));
    }

    // ── loss_mlm ─────────────────────────────────────────────────────

    #[test]
    fn mlm_uniform_logits_cost_log_vocab() {
        let tape = Tape::new();
        let logits = leaf_rows(&tape, &vec![vec![0.0; 11]; 3]);
        let loss = loss_mlm(logits, &[0, 5, 10]).unwrap().item().unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn mlm_confident_correct_logits_cost_near_zero() {
        let tape = Tape::new();
        let mut rows = vec![vec![0.0; 7]; 2];
        rows[0][3] = 25.0;
        rows[1][6] = 25.0;
        let loss = loss_mlm(leaf_rows(&tape, &rows), &[3, 6]).unwrap().item().unwrap();
        assert!(loss < 1e-8, "got {loss}");
    }

    #[test]
    fn mlm_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..20 {
            let logits = rand_rows(&mut rng, 5, 11);
            let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..11)).collect();
            let expected = oracle_mlm(&logits, &targets);
            let tape = Tape::new();
            let t32: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
            let got = loss_mlm(leaf_rows(&tape, &logits), &t32).unwrap().item().unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn mlm_zero_masked_positions_contribute_zero() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![0, 7]));
        let loss = loss_mlm(logits, &[]).unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    // ── loss_combined ────────────────────────────────────────────────

    #[test]
    fn combined_reduces_to_mlm_when_lambdas_are_zero() {
        let b = loss_combined(2.5, 4.0, 8.0, 0.0, 0.0).unwrap();
        assert_eq!(b.total, b.mlm);
    }

    #[test]
    fn combined_weighted_sum_is_exact() {
        let b = loss_combined(2.0, 4.0, 8.0, 0.25, 0.25).unwrap();
        assert_eq!(b.total, 5.0);
        assert_eq!(b.total, b.mlm + b.lambda1 * b.word_mcl + b.lambda2 * b.sent_mcl);
    }

    #[test]
    fn combined_rejects_negative_lambda_and_nonfinite_components() {
        assert!(matches!(
            loss_combined(1.0, 1.0, 1.0, -0.1, 0.25),
            Err(LossError::BadLambda(_))
        ));
        assert!(matches!(
            loss_combined(f64::NAN, 1.0, 1.0, 0.25, 0.25),
            Err(LossError::BadComponent { .. })
        ));
    }

    // ── gradients ────────────────────────────────────────────────────

    #[test]
    fn soft_loss_gradient_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let reps = rand_rows(&mut rng, 4, 8);
        let vals = rand_valences(&mut rng, 4);
        let mut params = NamedTensors::new();
        params.insert("reps".into(), Tensor::from_rows(&reps).unwrap());
        let report = grad_check(
            move |_tape, vars| {
                let ratings: Vec<ValenceRating> =
                    vals.iter().map(|&v| ValenceRating::rated(v).unwrap()).collect();
                let batch =
                    ContrastiveBatch::new(vars["reps"], &ratings, BatchOrigin::WordLevel)
                        .map_err(|_| NumericError::NonFinite { op: "batch" })?;
                loss_soft_cl(&batch, 0.3).map_err(|_| NumericError::NonFinite { op: "loss" })
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
