//! Per-sentence phrase structure dumps from a trained model.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, UNK};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::height::HeightProfile;
use crate::induction::induce_sentence;
use crate::model::PhraseModel;
use crate::params::ParamStore;
use crate::tape::Tape;

/// Schema tag written into every record.
pub const FORMAT: &str = "phrase-lm-induce/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub target: usize,
    /// Candidate positions, `target+1..`.
    pub candidates: Vec<usize>,
    /// Last position of the hard segmentation.
    pub span_end: usize,
    pub p_ind: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub format: String,
    /// Tokens as the model sees them; out-of-vocabulary words become `<unk>`.
    pub tokens: Vec<String>,
    pub heights: Vec<f64>,
    pub phrases: Vec<PhraseRecord>,
}

impl SentenceRecord {
    pub fn check(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Format { what: "induce record", detail });
        if self.format != FORMAT {
            return bad(format!("unsupported format {:?}", self.format));
        }
        if self.heights.len() != self.tokens.len() {
            return bad(format!("{} heights for {} tokens", self.heights.len(), self.tokens.len()));
        }
        for p in &self.phrases {
            let n = p.candidates.len();
            if p.target >= self.tokens.len()
                || p.p_ind.len() != n
                || p.alpha.len() != n
                || p.candidates.iter().any(|&c| c <= p.target || c >= self.tokens.len())
                || p.span_end <= p.target
                || p.span_end >= self.tokens.len()
            {
                return bad(format!("inconsistent phrase for target {}", p.target));
            }
        }
        Ok(())
    }
}

/// Heights of one encoded sentence.
pub fn sentence_heights(model: &PhraseModel, store: &ParamStore, ids: &[usize]) -> Result<HeightProfile> {
    if ids.is_empty() {
        return Ok(HeightProfile::new(Vec::new()));
    }
    let mut tape = Tape::new();
    let table = tape.param(store, model.height_embedding.unwrap_or(model.lm.embedding));
    let x = tape.gather_rows(table, ids)?;
    let h = model.height.forward(&mut tape, store, x, 1)?;
    Ok(HeightProfile::new(tape.value(h).to_vec()))
}

pub fn induce_line(model: &PhraseModel, store: &ParamStore, vocab: &Vocab, line: &str) -> Result<SentenceRecord> {
    let ids = vocab.encode_sentence(line);
    let profile = sentence_heights(model, store, &ids)?;
    let phrases = induce_sentence(&profile, &model.induction)
        .into_iter()
        .map(|p| PhraseRecord { target: p.target, candidates: p.candidates, span_end: p.span_end, p_ind: p.p_ind, alpha: p.alpha })
        .collect();
    let tokens = ids.iter().map(|&i| vocab.token(i).unwrap_or(UNK).to_string()).collect();
    Ok(SentenceRecord { format: FORMAT.into(), tokens, heights: profile.heights, phrases })
}

/// One record per input line, in input order.
pub fn induce_text(model: &PhraseModel, store: &ParamStore, vocab: &Vocab, text: &str, exec: Exec) -> Result<Vec<SentenceRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    exec.map(&lines, |line| induce_line(model, store, vocab, line)).into_iter().collect()
}

pub fn to_json_lines(records: &[SentenceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format { what: "induce record", detail: e.to_string() })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_json_lines(text: &str) -> Result<Vec<SentenceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: SentenceRecord = serde_json::from_str(l)
                .map_err(|e| Error::Format { what: "induce record", detail: format!("line {}: {e}", n + 1) })?;
            r.check()?;
            Ok(r)
        })
        .collect()
}
