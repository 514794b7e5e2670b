//! Phrase induction from syntactic heights.
//!
//! For a target word `i`, the induced phrase is the run of following words
//! `i+1..=j` that ends at the first word higher than the target and higher
//! than its own successor (or at the sentence end). The soft version replaces
//! both comparisons with tempered HardTanh probabilities, so membership of
//! candidate `j` is the running product of "no boundary before `j`" factors.
//! Headword attention then weights candidates by `height · membership + c`.
//!
//! Two routes are provided: plain functions over one [`HeightProfile`] and a
//! batched, differentiable version over a whole BPTT window on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::height::HeightProfile;
use crate::ops::{check_rate, check_temperature, sample_mask};
use crate::tape::{hardtanh_value, Tape, Var};
use crate::tensor::Tensor;

/// Denominator below which attention falls back to uniform weights.
pub const ATTENTION_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    /// HardTanh temperature `a`.
    pub temperature: f64,
    /// Attention smoothing constant `c`.
    pub smoothing: f64,
    /// Longest candidate span scanned after a target.
    pub max_len: usize,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig { temperature: 10.0, smoothing: 1.0, max_len: 20 }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing constant must be >= 0, got {}", self.smoothing)));
        }
        if self.max_len < 1 {
            return Err(Error::Config("maximum phrase length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Probability that `j` is higher than the target `i`.
///
/// # Panics
/// If `i >= j` or either index is out of range.
pub fn psc1_prob(h: &HeightProfile, i: usize, j: usize, temperature: f64) -> f64 {
    assert!(i < j, "psc1 needs i < j (got {i}, {j})");
    0.5 * (hardtanh_value(h.get(j) - h.get(i), temperature) + 1.0)
}

/// Probability that `j` is higher than its successor; 1 at the final position.
pub fn psc2_prob(h: &HeightProfile, j: usize, temperature: f64) -> f64 {
    if j + 1 >= h.len() {
        return 1.0;
    }
    0.5 * (hardtanh_value(h.get(j) - h.get(j + 1), temperature) + 1.0)
}

/// Last candidate index scanned for target `i`, or `None` if `i` is final.
pub fn candidate_end(len: usize, i: usize, max_len: usize) -> Option<usize> {
    (i + 1 < len).then(|| (i + max_len).min(len - 1))
}

/// Soft membership of candidates `i+1..=min(i+max_len, last)`. The first entry
/// is exactly 1; entry `j` multiplies in `1 - psc1(j-1)·psc2(j-1)`.
pub fn membership_probs(h: &HeightProfile, i: usize, cfg: &InductionConfig) -> Vec<f64> {
    let Some(end) = candidate_end(h.len(), i, cfg.max_len) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(end - i);
    let mut acc = 1.0;
    out.push(acc);
    for k in i + 2..=end {
        let m = k - 1;
        acc *= 1.0 - psc1_prob(h, i, m, cfg.temperature) * psc2_prob(h, m, cfg.temperature);
        out.push(acc);
    }
    out
}

/// Last index of the phrase induced by `i`: the first `j > i` with
/// `h_j > h_i` and `h_j > h_{j+1}`, or the final position if none exists.
/// `None` if `i` is the final position.
pub fn hard_segment(h: &HeightProfile, i: usize) -> Option<usize> {
    let last = h.len().checked_sub(1)?;
    if i >= last {
        return None;
    }
    (i + 1..last)
        .find(|&j| h.get(j) > h.get(i) && h.get(j) > h.get(j + 1))
        .or(Some(last))
}

/// Headword attention over candidates given their heights and memberships.
pub fn phrase_attention(heights: &[f64], p_ind: &[f64], cfg: &InductionConfig) -> Vec<f64> {
    debug_assert_eq!(heights.len(), p_ind.len());
    let w: Vec<f64> = heights.iter().zip(p_ind).map(|(h, p)| h * p + cfg.smoothing).collect();
    let sum: f64 = w.iter().sum();
    if !(sum >= ATTENTION_GUARD) {
        return vec![1.0 / w.len() as f64; w.len()];
    }
    w.into_iter().map(|x| x / sum).collect()
}

/// `s = W_s · Σ_j α_j e_{token_j}`, followed by inverted dropout in training.
pub fn phrase_embedding(
    alpha: &[f64],
    token_ids: &[usize],
    table: &Tensor,
    projection: &Tensor,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_rate(dropout)?;
    if alpha.len() != token_ids.len() {
        return Err(Error::dim("phrase_embedding", format!("{} weights for {} tokens", alpha.len(), token_ids.len())));
    }
    let d = table.cols();
    if projection.shape().len() != 2 || projection.shape()[1] != d {
        return Err(Error::dim("phrase_embedding", format!("projection {:?} for width {d}", projection.shape())));
    }
    let mut pooled = vec![0.0; d];
    for (&a, &tok) in alpha.iter().zip(token_ids) {
        if tok >= table.rows() {
            return Err(Error::Corpus(format!("token id {tok} outside embedding table")));
        }
        pooled.iter_mut().zip(table.row(tok)).for_each(|(p, e)| *p += a * e);
    }
    let mut s: Vec<f64> = (0..projection.rows())
        .map(|r| projection.row(r).iter().zip(&pooled).map(|(w, p)| w * p).sum())
        .collect();
    if training && dropout > 0.0 {
        let mask = sample_mask(s.len(), dropout, rng);
        s.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    }
    Ok(s)
}

/// Induced phrase of one target word.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InducedPhrase {
    pub target: usize,
    /// Candidate positions `target+1..=end`.
    pub candidates: Vec<usize>,
    pub p_ind: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Last index of the hard segmentation.
    pub span_end: usize,
}

/// Induced phrases for every non-final word of one sentence.
pub fn induce_sentence(h: &HeightProfile, cfg: &InductionConfig) -> Vec<InducedPhrase> {
    (0..h.len())
        .filter_map(|i| {
            let end = candidate_end(h.len(), i, cfg.max_len)?;
            let p_ind = membership_probs(h, i, cfg);
            let heights = &h.heights[i + 1..=end];
            let alpha = phrase_attention(heights, &p_ind, cfg);
            Some(InducedPhrase {
                target: i,
                candidates: (i + 1..=end).collect(),
                p_ind,
                alpha,
                span_end: hard_segment(h, i)?,
            })
        })
        .collect()
}

/// Index layout of all non-empty induced phrases in one BPTT window.
///
/// Rows are time-major (`row = t·batch + b`). Targets that are `<eos>`, or
/// whose next token is `<eos>`, have no phrase. Candidates never cross
/// `<eos>`, never exceed `max_len` and never leave the window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhrasePlan {
    /// Row of each context with a non-empty phrase.
    pub contexts: Vec<usize>,
    /// Segment boundaries into `candidates`; `contexts.len() + 1` entries.
    pub offsets: Vec<usize>,
    /// Row of each candidate word.
    pub candidates: Vec<usize>,
    pub candidate_tokens: Vec<usize>,
    factor_mid: Vec<usize>,
    factor_target: Vec<usize>,
    factor_next: Vec<usize>,
    /// Contexts whose candidate scan was cut by the window edge.
    pub truncated: usize,
}

impl PhrasePlan {
    pub fn build(inputs: &[usize], seq_len: usize, batch: usize, eos: usize, max_len: usize) -> Self {
        debug_assert_eq!(inputs.len(), seq_len * batch);
        let mut plan = PhrasePlan { offsets: vec![0], ..Default::default() };
        let row = |t: usize, b: usize| t * batch + b;
        for t in 0..seq_len {
            for b in 0..batch {
                if inputs[row(t, b)] == eos {
                    continue;
                }
                let sentence_end = (t + 1..seq_len).find(|&k| inputs[row(k, b)] == eos);
                let limit = sentence_end.unwrap_or(seq_len);
                if t + 1 >= limit {
                    continue;
                }
                let end = (t + max_len).min(limit - 1);
                if sentence_end.is_none() && t + max_len > seq_len - 1 {
                    plan.truncated += 1;
                }
                plan.contexts.push(row(t, b));
                for k in t + 1..=end {
                    plan.candidates.push(row(k, b));
                    plan.candidate_tokens.push(inputs[row(k, b)]);
                    if k > t + 1 {
                        plan.factor_mid.push(row(k - 1, b));
                        plan.factor_target.push(row(t, b));
                        plan.factor_next.push(row(k, b));
                    }
                }
                plan.offsets.push(plan.candidates.len());
            }
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn segment_lens(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Membership and attention for every phrase in a plan, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct InducedBatch {
    /// Flat `[candidates]`, segmented by the plan's offsets.
    pub p_ind: Var,
    pub alpha: Var,
}

/// Differentiable phrase induction over window heights `[T·B]`.
pub fn induce_on_tape(tape: &mut Tape<'_>, heights: Var, plan: &PhrasePlan, cfg: &InductionConfig) -> Result<InducedBatch> {
    cfg.validate()?;
    if plan.is_empty() {
        return Err(Error::dim("induce_on_tape", "plan has no phrases"));
    }
    let a = cfg.temperature;
    let mid = tape.gather(heights, &plan.factor_mid)?;
    let target = tape.gather(heights, &plan.factor_target)?;
    let next = tape.gather(heights, &plan.factor_next)?;
    let above_target = tape.sub(mid, target)?;
    let above_next = tape.sub(mid, next)?;
    let psc1 = prob_from_diff(tape, above_target, a)?;
    let psc2 = prob_from_diff(tape, above_next, a)?;
    let boundary = tape.mul(psc1, psc2)?;
    let keep = tape.scale(boundary, -1.0);
    let keep = tape.add_scalar(keep, 1.0);
    let p_ind = tape.segment_cumprod(keep, &plan.segment_lens())?;

    let hc = tape.gather(heights, &plan.candidates)?;
    let w = tape.mul(hc, p_ind)?;
    let w = tape.add_scalar(w, cfg.smoothing);
    let alpha = tape.segment_normalize(w, &plan.offsets, ATTENTION_GUARD)?;
    Ok(InducedBatch { p_ind, alpha })
}

fn prob_from_diff(tape: &mut Tape<'_>, diff: Var, temperature: f64) -> Result<Var> {
    let ht = tape.hardtanh(diff, temperature)?;
    let half = tape.scale(ht, 0.5);
    Ok(tape.add_scalar(half, 0.5))
}

/// Phrase embeddings `[phrases, D_s]` from attention weights, the embedding
/// table `[V, D]` and projection `W_s: [D_s, D]`.
#[allow(clippy::too_many_arguments)]
pub fn phrase_embeddings_on_tape(
    tape: &mut Tape<'_>,
    alpha: Var,
    table: Var,
    projection: Var,
    plan: &PhrasePlan,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let rows = tape.gather_rows(table, &plan.candidate_tokens)?;
    let pooled = tape.segment_weighted_sum(alpha, rows, &plan.offsets)?;
    let s = tape.matmul_nt(pooled, projection)?;
    tape.dropout(s, dropout, training, rng)
}
