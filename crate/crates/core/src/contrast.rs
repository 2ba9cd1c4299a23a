//! Reliable sample selection and the training objective.
//!
//! The candidate pool for contrastive pairs combines every truly labeled
//! node with unlabeled nodes whose predicted class probability exceeds a
//! confidence threshold τ (strictly). Labeled nodes anchor the loss; each
//! anchor's positives are the candidates sharing its (true or pseudo)
//! label — including the anchor's own other-view feature, which guarantees
//! at least one positive per anchor.
//!
//! Similarity is cosine divided by the temperature `T`; all logarithms are
//! natural. The total objective is the unweighted sum of the symmetric
//! two-view contrastive loss and the cross-entropy over labeled nodes.

use std::sync::Arc;

use crate::numkit::{full_mask, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// The candidate pool and anchor bookkeeping for one epoch's contrastive
/// loss. Indices refer to positions in the node batch the probabilities
/// were computed over.
#[derive(Debug, Clone)]
pub struct ReliableSet {
    /// Batch indices of the anchors (truly labeled nodes with ≥ 1 positive).
    pub anchors: Vec<usize>,
    /// 0-based class of each anchor.
    pub anchor_labels: Vec<usize>,
    /// Batch indices of all candidates, in node order.
    pub candidates: Vec<usize>,
    /// 0-based class of each candidate (true label or accepted pseudo-label).
    pub candidate_labels: Vec<usize>,
    /// Whether each candidate entered via the threshold rather than a label.
    pub candidate_is_pseudo: Vec<bool>,
    /// Per anchor: positions in `candidates` sharing the anchor's label.
    pub positives: Vec<Vec<usize>>,
    /// Pseudo-accepted node counts per class (diagnostics).
    pub pseudo_accepted_per_class: Vec<usize>,
    /// Labeled nodes dropped for lack of positives (diagnostics; zero under
    /// the self-positive convention, kept for visibility).
    pub skipped_anchors: usize,
    pub tau: f64,
}

impl ReliableSet {
    pub fn pseudo_accepted_total(&self) -> usize {
        self.pseudo_accepted_per_class.iter().sum()
    }
}

/// Builds the reliable set from batch labels (0 = unlabeled, `c` = class
/// `c − 1`) and an `[n, classes]` probability matrix from the no-gradient
/// evaluation pass. `tau` must lie strictly between chance (`1/classes`)
/// and 1.
pub fn build_reliable_set(labels: &[u16], pseudo_probs: &Tensor, tau: f64) -> Result<ReliableSet> {
    if pseudo_probs.ndim() != 2 || pseudo_probs.shape()[0] != labels.len() {
        return Err(Error::contract(format!(
            "build_reliable_set: probability matrix {:?} does not match {} labels",
            pseudo_probs.shape(),
            labels.len()
        )));
    }
    let classes = pseudo_probs.shape()[1];
    if classes < 2 {
        return Err(Error::contract("build_reliable_set: need at least 2 classes"));
    }
    if !(tau > 1.0 / classes as f64 && tau < 1.0) {
        return Err(Error::config(format!(
            "threshold tau = {tau} must lie in (1/{classes}, 1)"
        )));
    }
    pseudo_probs.check_finite("build_reliable_set")?;

    let mut candidates = Vec::new();
    let mut candidate_labels = Vec::new();
    let mut candidate_is_pseudo = Vec::new();
    let mut pseudo_accepted_per_class = vec![0usize; classes];
    for (i, &label) in labels.iter().enumerate() {
        if label != 0 {
            if label as usize > classes {
                return Err(Error::contract(format!(
                    "build_reliable_set: label {label} at node {i} exceeds {classes} classes"
                )));
            }
            candidates.push(i);
            candidate_labels.push(label as usize - 1);
            candidate_is_pseudo.push(false);
        } else {
            let row = pseudo_probs.row(i);
            let (mut best, mut best_p) = (0usize, row[0]);
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            if best_p > tau {
                candidates.push(i);
                candidate_labels.push(best);
                candidate_is_pseudo.push(true);
                pseudo_accepted_per_class[best] += 1;
            }
        }
    }

    let mut anchors = Vec::new();
    let mut anchor_labels = Vec::new();
    let mut positives = Vec::new();
    let mut skipped_anchors = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let class = label as usize - 1;
        let pos: Vec<usize> = candidate_labels
            .iter()
            .enumerate()
            .filter(|&(_, &cl)| cl == class)
            .map(|(j, _)| j)
            .collect();
        if pos.is_empty() {
            skipped_anchors += 1;
            continue;
        }
        anchors.push(i);
        anchor_labels.push(class);
        positives.push(pos);
    }

    Ok(ReliableSet {
        anchors,
        anchor_labels,
        candidates,
        candidate_labels,
        candidate_is_pseudo,
        positives,
        pseudo_accepted_per_class,
        skipped_anchors,
        tau,
    })
}

// ── plain scalar losses ────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::contract(format!("{what}: zero-norm feature vector")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn lse(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi + vals.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
}

/// One anchor's loss against a candidate pool in the other view:
/// `−ln( Σ_{positives} exp(cos/T) / Σ_{all} exp(cos/T) )`, stabilized.
pub fn contrastive_pair_loss(
    anchor: &[f64],
    anchor_class: usize,
    candidates: &Tensor,
    candidate_labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    if candidates.ndim() != 2 || candidates.shape()[0] != candidate_labels.len() {
        return Err(Error::contract(format!(
            "contrastive_pair_loss: candidate matrix {:?} does not match {} labels",
            candidates.shape(),
            candidate_labels.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature {temperature} must be positive")));
    }
    let m = candidate_labels.len();
    let mut sims = Vec::with_capacity(m);
    for j in 0..m {
        sims.push(cosine(anchor, candidates.row(j), "contrastive_pair_loss")? / temperature);
    }
    let positives: Vec<f64> = sims
        .iter()
        .zip(candidate_labels)
        .filter(|&(_, &c)| c == anchor_class)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() {
        return Err(Error::contract(
            "contrastive_pair_loss: anchor has no positive candidates",
        ));
    }
    Ok(lse(sims.iter().copied()) - lse(positives.into_iter()))
}

/// Symmetric two-view contrastive loss averaged over anchors:
/// `(1/2n) Σ_i [ℓ(h_j^i → H_p) + ℓ(h_p^i → H_j)]`. Zero when the reliable
/// set has no anchors.
pub fn contrastive_total(
    h_j: &Tensor,
    h_p: &Tensor,
    set: &ReliableSet,
    temperature: f64,
) -> Result<f64> {
    if set.anchors.is_empty() {
        return Ok(0.0);
    }
    let gather = |src: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let f = src.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        Tensor::from_vec(&[idx.len(), f], data)
    };
    let cand_j = gather(h_j, &set.candidates)?;
    let cand_p = gather(h_p, &set.candidates)?;

    let mut acc = 0.0;
    for (&node, &class) in set.anchors.iter().zip(&set.anchor_labels) {
        acc += contrastive_pair_loss(h_j.row(node), class, &cand_p, &set.candidate_labels, temperature)?;
        acc += contrastive_pair_loss(h_p.row(node), class, &cand_j, &set.candidate_labels, temperature)?;
    }
    Ok(acc / (2.0 * set.anchors.len() as f64))
}

/// Mean negative log-likelihood of `targets` (0-based classes) under the
/// logits, log-sum-exp stabilized.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::contract(format!(
            "cross_entropy: logits {:?} do not match {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::contract("cross_entropy: no targets"));
    }
    let classes = logits.shape()[1];
    let mut acc = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::contract(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        acc += lse(row.iter().copied()) - row[t];
    }
    Ok(acc / targets.len() as f64)
}

/// The three objective scalars; the total is the exact sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub l_c: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

impl LossTerms {
    pub fn new(l_c: f64, l_ce: f64) -> Self {
        LossTerms { l_c, l_ce, l_total: l_c + l_ce }
    }
}

// ── tape builders (differentiable path) ────────────────────────────────

/// Records the symmetric contrastive loss on the tape and returns the
/// scalar value id. `h_j` / `h_p` are `[n_batch, f]` feature matrices.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    h_j: ValueId,
    h_p: ValueId,
    set: &ReliableSet,
    temperature: f64,
) -> Result<ValueId> {
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature {temperature} must be positive")));
    }
    if set.anchors.is_empty() {
        return Ok(tape.constant(&Tensor::zeros(&[1])));
    }
    let n = set.anchors.len();
    let m = set.candidates.len();
    let anchors = Arc::new(set.anchors.clone());
    let cands = Arc::new(set.candidates.clone());
    let pos_mask = Arc::new(set.positives.clone());
    let all_mask = Arc::new(full_mask(n, m));

    let view = |tape: &mut Tape, a_src: ValueId, c_src: ValueId| -> Result<ValueId> {
        let a = tape.gather_rows(a_src, Arc::clone(&anchors))?;
        let c = tape.gather_rows(c_src, Arc::clone(&cands))?;
        let a_n = tape.l2_normalize_rows(a)?;
        let c_n = tape.l2_normalize_rows(c)?;
        let sims = tape.matmul_nt(a_n, c_n)?;
        let scaled = tape.scale(sims, 1.0 / temperature)?;
        let lse_all = tape.masked_lse_rows(scaled, Arc::clone(&all_mask))?;
        let lse_pos = tape.masked_lse_rows(scaled, Arc::clone(&pos_mask))?;
        let diff = tape.sub(lse_all, lse_pos)?;
        tape.sum_all(diff)
    };

    let term_jp = view(tape, h_j, h_p)?;
    let term_pj = view(tape, h_p, h_j)?;
    let sum = tape.add(term_jp, term_pj)?;
    tape.scale(sum, 1.0 / (2.0 * n as f64))
}

/// Records the mean cross-entropy of the rows `batch_rows` of `logits`
/// against 0-based `targets` and returns the scalar value id.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: ValueId,
    batch_rows: &[usize],
    targets: &[usize],
) -> Result<ValueId> {
    if batch_rows.len() != targets.len() || targets.is_empty() {
        return Err(Error::contract(format!(
            "cross_entropy_on_tape: {} rows vs {} targets",
            batch_rows.len(),
            targets.len()
        )));
    }
    let picked = tape.gather_rows(logits, Arc::new(batch_rows.to_vec()))?;
    let logp = tape.log_softmax_rows(picked)?;
    let own = tape.pick_per_row(logp, Arc::new(targets.to_vec()))?;
    let total = tape.sum_all(own)?;
    tape.scale(total, -1.0 / targets.len() as f64)
}
