//! Vocabulary construction, corpus encoding and BPTT batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub mod synthetic;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Closed vocabulary with dense 0-based ids. `<unk>` and `<eos>` are always
/// present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    unk: usize,
    eos: usize,
}

impl Vocab {
    /// Vocabulary with ids in the given order; reserved tokens are appended if absent.
    pub fn from_tokens(mut tokens: Vec<String>) -> Result<Self> {
        for reserved in [UNK, EOS] {
            if !tokens.iter().any(|t| t == reserved) {
                tokens.push(reserved.to_string());
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let unk = ids[UNK];
        let eos = ids[EOS];
        Ok(Vocab { ids, tokens, unk, eos })
    }

    /// Builds a vocabulary from whitespace-tokenized text, one sentence per
    /// line. Ids follow first appearance; `<eos>` closes every line.
    pub fn build(text: &str) -> Result<Self> {
        Self::build_capped(text, None)
    }

    /// Like [`Vocab::build`], but keeps only the `cap` most frequent types
    /// (reserved tokens included); everything else encodes as `<unk>`.
    pub fn build_capped(text: &str, cap: Option<usize>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut any = false;
        for line in text.lines() {
            for tok in line.split_whitespace().chain(std::iter::once(EOS)) {
                any |= tok != EOS;
                let n = counts.len();
                let e = counts.entry(tok).or_insert_with(|| {
                    order.push(tok.to_string());
                    (n, 0)
                });
                e.1 += 1;
            }
        }
        if !any {
            return Err(Error::Corpus("empty token stream".into()));
        }
        if let Some(cap) = cap {
            if cap < 2 {
                return Err(Error::Config(format!("vocabulary cap {cap} leaves no room for <unk> and <eos>")));
            }
            let reserved = |t: &str| t == UNK || t == EOS;
            let words = order.iter().filter(|t| !reserved(t)).count();
            if words > cap - 2 {
                let mut ranked: Vec<&String> = order.iter().filter(|t| !reserved(t)).collect();
                // frequency descending, ties by first appearance
                ranked.sort_by_key(|t| {
                    let (first, count) = counts[t.as_str()];
                    (std::cmp::Reverse(count), first)
                });
                ranked.truncate(cap - 2);
                let mut keep: Vec<&String> = ranked;
                keep.extend(order.iter().filter(|t| reserved(t)));
                keep.sort_by_key(|t| counts[t.as_str()].0);
                order = keep.into_iter().cloned().collect();
            }
        }
        Self::from_tokens(order)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(self.unk)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes whitespace-tokenized lines, appending `<eos>` to each.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for line in text.lines() {
            out.extend(line.split_whitespace().map(|t| self.id(t)));
            out.push(self.eos);
        }
        out
    }

    /// Encodes one sentence without a trailing `<eos>`.
    pub fn encode_sentence(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    /// Newline-delimited token list; the id of a token is its line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::Corpus("empty vocabulary file".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Train/valid/test id sequences over one vocabulary built from the train split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    pub fn from_texts(train: &str, valid: &str, test: &str, cap: Option<usize>) -> Result<Self> {
        let vocab = Vocab::build_capped(train, cap)?;
        Ok(Corpus { train: vocab.encode(train), valid: vocab.encode(valid), test: vocab.encode(test), vocab })
    }

    pub fn load(train: &Path, valid: Option<&Path>, test: Option<&Path>, cap: Option<usize>) -> Result<Self> {
        let read_opt = |p: Option<&Path>| p.map(read_text).transpose().map(Option::unwrap_or_default);
        Self::from_texts(&read_text(train)?, &read_opt(valid)?, &read_opt(test)?, cap)
    }
}

/// One BPTT window: `inputs` and `targets` are `[seq_len, batch]`, time-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
    pub batch: usize,
}

impl Window {
    pub fn input(&self, t: usize, b: usize) -> usize {
        self.inputs[t * self.batch + b]
    }

    pub fn target(&self, t: usize, b: usize) -> usize {
        self.targets[t * self.batch + b]
    }

    /// Inputs of stream `b` in time order.
    pub fn stream_inputs(&self, b: usize) -> Vec<usize> {
        (0..self.seq_len).map(|t| self.input(t, b)).collect()
    }

    pub fn stream_targets(&self, b: usize) -> Vec<usize> {
        (0..self.seq_len).map(|t| self.target(t, b)).collect()
    }

    pub fn tokens(&self) -> usize {
        self.seq_len * self.batch
    }
}

/// An id sequence folded column-wise into `batch` parallel streams.
#[derive(Clone, Debug)]
pub struct BatchStream {
    data: Vec<usize>,
    batch: usize,
    steps: usize,
    bptt: usize,
}

impl BatchStream {
    /// Trailing tokens that do not fill the fold are dropped.
    pub fn new(ids: &[usize], batch: usize, bptt: usize) -> Result<Self> {
        if batch < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if bptt < 1 {
            return Err(Error::Config("bptt length must be at least 1".into()));
        }
        if ids.len() < batch * 2 {
            return Err(Error::Corpus(format!("{} tokens cannot fill {batch} streams of length 2", ids.len())));
        }
        let steps = ids.len() / batch;
        // time-major: data[t * batch + b] = stream b at time t
        let mut data = vec![0; steps * batch];
        for b in 0..batch {
            for t in 0..steps {
                data[t * batch + b] = ids[b * steps + t];
            }
        }
        Ok(BatchStream { data, batch, steps, bptt })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Length of each stream.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stream(&self, b: usize) -> Vec<usize> {
        (0..self.steps).map(|t| self.data[t * self.batch + b]).collect()
    }

    pub fn num_windows(&self) -> usize {
        (self.steps - 1).div_ceil(self.bptt)
    }

    pub fn window(&self, index: usize) -> Option<Window> {
        let start = index * self.bptt;
        if start + 1 >= self.steps {
            return None;
        }
        let seq_len = self.bptt.min(self.steps - 1 - start);
        let b = self.batch;
        Some(Window {
            inputs: self.data[start * b..(start + seq_len) * b].to_vec(),
            targets: self.data[(start + 1) * b..(start + 1 + seq_len) * b].to_vec(),
            seq_len,
            batch: b,
        })
    }

    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.num_windows()).filter_map(|i| self.window(i))
    }

    /// Restricts the stream to columns `cols`, keeping the window length.
    pub fn columns(&self, cols: std::ops::Range<usize>) -> BatchStream {
        let batch = cols.len();
        let mut data = Vec::with_capacity(self.steps * batch);
        for t in 0..self.steps {
            data.extend_from_slice(&self.data[t * self.batch + cols.start..t * self.batch + cols.end]);
        }
        BatchStream { data, batch, steps: self.steps, bptt: self.bptt }
    }
}

/// Folds `ids` into `batch_size` streams and cuts BPTT windows of `bptt_len`.
pub fn batchify(ids: &[usize], batch_size: usize, bptt_len: usize) -> Result<BatchStream> {
    BatchStream::new(ids, batch_size, bptt_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_vocab_and_encoding() {
        let v = Vocab::build("a b a\n").unwrap();
        assert_eq!(v.len(), 4);
        for t in ["a", "b", UNK, EOS] {
            assert!(v.contains(t));
        }
        assert_eq!(v.encode("a b a\n"), vec![v.id("a"), v.id("b"), v.id("a"), v.eos()]);
        assert_eq!(v.id("zebra"), v.unk());
        assert_eq!(v.encode("a zebra\n"), vec![v.id("a"), v.unk(), v.eos()]);
    }

    #[test]
    fn ids_are_dense_and_roundtrip_through_text() {
        let v = Vocab::build("x y\nz <unk> x\n").unwrap();
        let ids: Vec<usize> = v.tokens().iter().map(|t| v.id(t)).collect();
        assert_eq!(ids, (0..v.len()).collect::<Vec<_>>());
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn empty_stream_is_corpus_error() {
        assert!(matches!(Vocab::build(""), Err(Error::Corpus(_))));
        assert!(matches!(Vocab::build("\n\n"), Err(Error::Corpus(_))));
    }

    #[test]
    fn capped_vocab_keeps_most_frequent() {
        let v = Vocab::build_capped("a a a b b c\n", Some(4)).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.contains("a") && v.contains("b"));
        assert!(!v.contains("c"));
        assert_eq!(v.id("c"), v.unk());
    }

    #[test]
    fn batchify_direct_construction() {
        let ids: Vec<usize> = (1..=12).collect();
        let s = batchify(&ids, 2, 3).unwrap();
        assert_eq!(s.stream(0), (1..=6).collect::<Vec<_>>());
        assert_eq!(s.stream(1), (7..=12).collect::<Vec<_>>());
        let w = s.window(0).unwrap();
        assert_eq!(w.stream_inputs(0), vec![1, 2, 3]);
        assert_eq!(w.stream_inputs(1), vec![7, 8, 9]);
        assert_eq!(w.stream_targets(0), vec![2, 3, 4]);
        assert_eq!(w.stream_targets(1), vec![8, 9, 10]);
        let w = s.window(1).unwrap();
        assert_eq!(w.seq_len, 2);
        assert_eq!(w.stream_targets(1), vec![11, 12]);
        assert!(s.window(2).is_none());
    }

    #[test]
    fn batch_of_one_is_sequential() {
        let ids: Vec<usize> = (0..10).collect();
        let s = batchify(&ids, 1, 4).unwrap();
        let inputs: Vec<usize> = s.windows().flat_map(|w| w.inputs).collect();
        assert_eq!(inputs, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn batchify_rejects_bad_arguments() {
        assert!(matches!(batchify(&[1, 2, 3], 0, 2), Err(Error::Config(_))));
        assert!(matches!(batchify(&[1, 2, 3], 2, 2), Err(Error::Corpus(_))));
    }
}
