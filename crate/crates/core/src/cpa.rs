//! Context-phrase alignment loss with in-window negative sampling.
//!
//! `l_i = 1 - σ(c_i·s_i) + (1/n) Σ_k σ(c_i·s_k^neg)`, averaged over the
//! contexts of a window that have a non-empty induced phrase, and added to
//! the word loss with weight `γ`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::logistic;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpaConfig {
    pub negatives: usize,
    pub gamma: f64,
    /// Treat negative phrase embeddings as constants.
    pub stop_grad_negatives: bool,
}

impl Default for CpaConfig {
    fn default() -> Self {
        CpaConfig { negatives: 1, gamma: 0.5, stop_grad_negatives: false }
    }
}

impl CpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives < 1 {
            return Err(Error::Config("need at least one negative sample".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn dot(c: &[f64], s: &[f64]) -> Result<f64> {
    if c.len() != s.len() {
        return Err(Error::Config(format!(
            "context width {} differs from phrase width {}",
            c.len(),
            s.len()
        )));
    }
    Ok(c.iter().zip(s).map(|(a, b)| a * b).sum())
}

/// `σ(c·s)`.
pub fn alignment_prob(c: &[f64], s: &[f64]) -> Result<f64> {
    Ok(logistic(dot(c, s)?))
}

/// `n` distinct phrase indices other than `i`, drawn uniformly from
/// `0..num_phrases`. `None` when fewer than `n + 1` phrases exist.
pub fn sample_negatives(num_phrases: usize, i: usize, n: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    if n == 0 || num_phrases < n + 1 || i >= num_phrases {
        return None;
    }
    let picked = index::sample(rng, num_phrases - 1, n);
    Some(picked.into_iter().map(|k| if k >= i { k + 1 } else { k }).collect())
}

/// Alignment loss of one context.
pub fn cpa_loss(c: &[f64], s: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Config("alignment loss needs at least one negative".into()));
    }
    let mut neg = 0.0;
    for s_neg in negatives {
        neg += alignment_prob(c, s_neg)?;
    }
    Ok(1.0 - alignment_prob(c, s)? + neg / negatives.len() as f64)
}

/// `l_lm + γ·l_cpa`.
pub fn total_loss(lm: f64, cpa: f64, gamma: f64) -> Result<f64> {
    if !lm.is_finite() || !cpa.is_finite() || !gamma.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss terms: lm {lm}, cpa {cpa}, gamma {gamma}")));
    }
    Ok(lm + gamma * cpa)
}

/// Alignment loss of one window.
#[derive(Clone, Debug)]
pub struct WindowCpa {
    /// Scalar mean loss over scored contexts.
    pub loss: Var,
    pub scored: usize,
    /// Negative indices per scored phrase, `negatives` entries each.
    pub negatives: Vec<usize>,
}

/// Tape-level window loss. `context_rows: [P, H]` are the contexts of the
/// `P` phrases and `phrases: [P, H]` their embeddings. Returns `None` when the
/// window holds fewer than `negatives + 1` phrases.
pub fn window_cpa_loss(
    tape: &mut Tape<'_>,
    context_rows: Var,
    phrases: Var,
    cfg: &CpaConfig,
    rng: &mut impl Rng,
) -> Result<Option<WindowCpa>> {
    cfg.validate()?;
    let (p, h) = (tape.shape(phrases)[0], tape.shape(phrases)[1]);
    if tape.shape(context_rows) != [p, h] {
        return Err(Error::Config(format!(
            "context rows {:?} do not match phrase embeddings {:?}",
            tape.shape(context_rows),
            tape.shape(phrases)
        )));
    }
    let n = cfg.negatives;
    let mut negatives = Vec::with_capacity(p * n);
    for i in 0..p {
        match sample_negatives(p, i, n, rng) {
            Some(idx) => negatives.extend(idx),
            None => return Ok(None),
        }
    }
    let pos = tape.row_dot(context_rows, phrases)?;
    let pos = tape.sigmoid(pos);
    let repeated: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let c_rep = tape.gather_rows(context_rows, &repeated)?;
    let neg_src = if cfg.stop_grad_negatives { tape.detach(phrases) } else { phrases };
    let s_neg = tape.gather_rows(neg_src, &negatives)?;
    let neg = tape.row_dot(c_rep, s_neg)?;
    let neg = tape.sigmoid(neg);

    let pos_sum = tape.sum(pos);
    let neg_sum = tape.sum(neg);
    let pos_term = tape.scale(pos_sum, -1.0 / p as f64);
    let neg_term = tape.scale(neg_sum, 1.0 / (p * n) as f64);
    let loss = tape.add(pos_term, neg_term)?;
    let loss = tape.add_scalar(loss, 1.0);
    Ok(Some(WindowCpa { loss, scored: p, negatives }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alignment_reference_values() {
        assert_eq!(alignment_prob(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.5);
        let v = (3.0f64.ln()).sqrt();
        assert!((alignment_prob(&[v], &[v]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(alignment_prob(&[1.0], &[1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn loss_limits() {
        let z = [0.0, 0.0];
        assert_eq!(cpa_loss(&z, &z, &[&z]).unwrap(), 1.0);
        let c = [50.0];
        let l = cpa_loss(&c, &[50.0], &[&[-50.0], &[-40.0]]).unwrap();
        assert!(l < 1e-300);
    }

    #[test]
    fn two_phrases_pick_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_negatives(2, 0, 1, &mut rng), Some(vec![1]));
            assert_eq!(sample_negatives(2, 1, 1, &mut rng), Some(vec![0]));
        }
        assert_eq!(sample_negatives(2, 0, 2, &mut rng), None);
    }

    #[test]
    fn total_loss_rules() {
        assert_eq!(total_loss(2.5, 0.7, 0.0).unwrap(), 2.5);
        assert_eq!(total_loss(2.5, 0.75, 0.5).unwrap(), 2.875);
        assert!(matches!(total_loss(f64::NAN, 0.5, 0.5), Err(Error::Numeric(_))));
    }
}
