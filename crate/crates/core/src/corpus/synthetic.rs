//! Seeded toy-English generator with nested noun/prepositional phrases.
//! Used for smoke training runs, examples and tests when no real corpus is
//! at hand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETS: &[&str] = &["the", "a", "every", "some"];
const ADJS: &[&str] = &["morning", "early", "late", "cheap", "long", "small", "direct", "new"];
const NOUNS: &[&str] = &[
    "flights", "airline", "pilot", "crew", "ticket", "passengers", "city", "storm", "airport", "gate", "manager",
    "market",
];
const NAMES: &[&str] = &["houston", "denver", "boston", "united", "delta", "chicago"];
const VERBS_T: &[&str] = &["canceled", "booked", "delayed", "expected", "served", "moved"];
const VERBS_I: &[&str] = &["arrived", "left", "waited", "landed"];
const PREPS: &[&str] = &["to", "from", "in", "with", "near"];

struct Grammar<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Grammar<'_> {
    fn pick(&mut self, words: &[&'static str]) -> &'static str {
        words.choose(self.rng).expect("non-empty word list")
    }

    fn noun_phrase(&mut self, depth: usize, out: &mut Vec<&'static str>) {
        if self.rng.gen_bool(0.25) {
            out.push(self.pick(NAMES));
            return;
        }
        out.push(self.pick(DETS));
        if self.rng.gen_bool(0.5) {
            out.push(self.pick(ADJS));
        }
        out.push(self.pick(NOUNS));
        if depth < 2 && self.rng.gen_bool(0.3) {
            out.push(self.pick(PREPS));
            self.noun_phrase(depth + 1, out);
        }
    }

    fn sentence(&mut self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.noun_phrase(0, &mut out);
        if self.rng.gen_bool(0.7) {
            out.push(self.pick(VERBS_T));
            self.noun_phrase(0, &mut out);
        } else {
            out.push(self.pick(VERBS_I));
        }
        if self.rng.gen_bool(0.3) {
            out.push(self.pick(PREPS));
            self.noun_phrase(1, &mut out);
        }
        out
    }
}

/// `sentences` lines of generated text, one sentence per line.
pub fn generate(sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grammar { rng: &mut rng };
    let mut text = String::new();
    for _ in 0..sentences {
        text.push_str(&g.sentence().join(" "));
        text.push('\n');
    }
    text
}

/// Generated text of at least `tokens` tokens (counting one `<eos>` per line).
pub fn generate_tokens(tokens: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grammar { rng: &mut rng };
    let mut text = String::new();
    let mut count = 0;
    while count < tokens {
        let s = g.sentence();
        count += s.len() + 1;
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    text
}
