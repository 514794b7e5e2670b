//! SGD training with gradient clipping, the non-monotone switch to averaged
//! SGD, perplexity evaluation and checkpointing.
//!
//! Every stochastic choice draws from a generator derived from
//! `(seed, stream, epoch)`: initialisation, LM dropout and the alignment
//! objective (phrase dropout and negative sampling) never share a stream, so
//! turning the alignment term on or off leaves the LM's randomness untouched.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{Optimizer, TrainConfig};
use crate::corpus::{synthetic, BatchStream, Corpus, Vocab, Window};
use crate::cpa::{window_cpa_loss, CpaConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{lm_loss, LmOutput, LmState};
use crate::model::PhraseModel;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

const STREAM_INIT_LM: u64 = 0;
const STREAM_INIT_PHRASE: u64 = 1;
const STREAM_LM: u64 = 2;
const STREAM_CPA: u64 = 3;
const SYNTHETIC_SEED: u64 = 0x5eed;

/// Generator for one `(seed, stream, epoch)` triple.
pub fn rng_stream(seed: u64, stream: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | (epoch & 0xffff_ffff));
    rng
}

/// Reads the corpus named by the config, or generates the toy corpus.
pub fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    if let Some(n) = cfg.synthetic_tokens {
        let held_out = (n / 10).max(50);
        return Corpus::from_texts(
            &synthetic::generate_tokens(n, SYNTHETIC_SEED),
            &synthetic::generate_tokens(held_out, SYNTHETIC_SEED + 1),
            &synthetic::generate_tokens(held_out, SYNTHETIC_SEED + 2),
            cfg.vocab_cap,
        );
    }
    let train = cfg.train_path.as_deref().ok_or_else(|| Error::Config("train_path is not set".into()))?;
    let corpus = Corpus::load(train, cfg.valid_path.as_deref(), cfg.test_path.as_deref(), cfg.vocab_cap)?;
    if corpus.valid.len() < 2 * cfg.eval_batch_size {
        return Err(Error::Corpus(format!(
            "validation split has {} tokens, too few for eval batch {}",
            corpus.valid.len(),
            cfg.eval_batch_size
        )));
    }
    Ok(corpus)
}

/// Builds a freshly initialised model for `vocab` words.
pub fn init_model(cfg: &TrainConfig, vocab: usize) -> Result<(PhraseModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut lm_rng = rng_stream(cfg.seed, STREAM_INIT_LM, 0);
    let mut phrase_rng = rng_stream(cfg.seed, STREAM_INIT_PHRASE, 0);
    let model = PhraseModel::new(&mut store, cfg, vocab, &mut lm_rng, &mut phrase_rng)?;
    Ok((model, store))
}

/// Auxiliary term of a window objective.
#[derive(Clone, Debug, Default)]
pub struct Auxiliary {
    pub loss: Option<Var>,
    pub weight: f64,
    /// Contexts that received an alignment term.
    pub scored: usize,
    /// Contexts with a phrase in windows too small to sample negatives.
    pub skipped: usize,
    /// Contexts whose candidate scan was cut by the window edge.
    pub truncated: usize,
}

/// What is optimised on top of the word loss.
pub trait Objective: Sync {
    #[allow(clippy::too_many_arguments)]
    fn auxiliary<'a>(
        &self,
        model: &PhraseModel,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        out: &LmOutput,
        window: &Window,
        eos: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Auxiliary>;
}

/// Plain language modelling; the phrase pipeline is never instantiated.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordOnly;

impl Objective for WordOnly {
    fn auxiliary<'a>(
        &self,
        _: &PhraseModel,
        _: &mut Tape<'a>,
        _: &'a ParamStore,
        _: &LmOutput,
        _: &Window,
        _: usize,
        _: bool,
        _: &mut ChaCha8Rng,
    ) -> Result<Auxiliary> {
        Ok(Auxiliary::default())
    }
}

/// Word loss plus `γ` times the context-phrase alignment loss.
#[derive(Clone, Copy, Debug)]
pub struct WithPhraseAlignment(pub CpaConfig);

impl Objective for WithPhraseAlignment {
    fn auxiliary<'a>(
        &self,
        model: &PhraseModel,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        out: &LmOutput,
        window: &Window,
        eos: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Auxiliary> {
        let Some(ph) = model.phrases(tape, store, out, &window.inputs, window.batch, eos, training, rng)? else {
            return Ok(Auxiliary::default());
        };
        let truncated = ph.plan.truncated;
        Ok(match window_cpa_loss(tape, ph.contexts, ph.embeddings, &self.0, rng)? {
            Some(w) => Auxiliary { loss: Some(w.loss), weight: self.0.gamma, scored: w.scored, skipped: 0, truncated },
            None => Auxiliary { skipped: ph.plan.len(), truncated, ..Default::default() },
        })
    }
}

/// Loss nodes of one window.
#[derive(Clone, Debug)]
pub struct WindowTerms {
    pub total: Var,
    pub lm: Var,
    pub aux: Auxiliary,
    pub state: LmState,
}

/// Forward pass of one window: `l = l_lm + γ·l_cpa`.
#[allow(clippy::too_many_arguments)]
pub fn window_loss<'a, O: Objective>(
    model: &PhraseModel,
    objective: &O,
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    window: &Window,
    state: &LmState,
    eos: usize,
    training: bool,
    lm_rng: &mut ChaCha8Rng,
    aux_rng: &mut ChaCha8Rng,
) -> Result<WindowTerms> {
    let out = model.lm.forward(tape, store, &window.inputs, window.batch, state, training, lm_rng)?;
    let lm = lm_loss(tape, out.logits, &window.targets)?;
    let aux = objective.auxiliary(model, tape, store, &out, window, eos, training, aux_rng)?;
    let total = match aux.loss {
        Some(cpa) => {
            let weighted = tape.scale(cpa, aux.weight);
            tape.add(lm, weighted)?
        }
        None => lm,
    };
    Ok(WindowTerms { total, lm, aux, state: out.state })
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied factor (1 when no clipping was needed).
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, name, t) in store.iter() {
        for g in t.grad().unwrap_or_default() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    store.iter_mut().for_each(|(_, t)| t.scale_grad(scale));
    Ok(scale)
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store.iter().flat_map(|(_, _, t)| t.grad().unwrap_or_default()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Non-monotone trigger: switch once none of the last `window - 1`
/// validation losses beats the best loss recorded before them.
pub fn asgd_maybe_switch(history: &[f64], window: usize) -> bool {
    let len = history.len();
    if window == 0 || len < window {
        return false;
    }
    let split = len + 1 - window;
    let best_before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    best_recent >= best_before
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsgdTrigger {
    pub window: usize,
    pub history: Vec<f64>,
    pub switched: bool,
}

impl AsgdTrigger {
    pub fn new(window: usize) -> Self {
        AsgdTrigger { window, history: Vec::new(), switched: false }
    }

    /// Records a validation loss; true exactly once, on the switching call.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.history.push(val_loss);
        if self.switched || !asgd_maybe_switch(&self.history, self.window) {
            return false;
        }
        self.switched = true;
        true
    }
}

/// Running average of parameter iterates.
#[derive(Clone, Debug)]
pub struct Averager {
    pub values: ParamStore,
    pub count: u64,
}

impl Averager {
    pub fn new(store: &ParamStore) -> Self {
        Averager { values: store.clone(), count: 0 }
    }

    pub fn update(&mut self, store: &ParamStore) {
        self.count += 1;
        let k = self.count as f64;
        for ((_, avg), (_, _, p)) in self.values.iter_mut().zip(store.iter()) {
            avg.data_mut().iter_mut().zip(p.data()).for_each(|(a, p)| *a += (p - *a) / k);
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EpochStats {
    pub lm_loss: f64,
    pub cpa_loss: Option<f64>,
    pub tokens: usize,
    pub windows: usize,
    pub cpa_contexts: usize,
    pub cpa_skipped: usize,
    pub truncated: usize,
    pub clipped_windows: usize,
    pub mean_grad_norm: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean cross-entropy per token, in nats.
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
    /// Phrases induced along the way (0 when induction is off).
    pub phrases: usize,
}

/// Word-level perplexity of `ids`, with dropout off. Each of the `batch`
/// streams is evaluated independently and the per-stream sums are reduced in
/// stream order, so the result does not depend on `exec`. With
/// `with_induction`, heights and phrases are computed for every window too.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_ppl(
    model: &PhraseModel,
    store: &ParamStore,
    ids: &[usize],
    batch: usize,
    bptt: usize,
    eos: usize,
    exec: Exec,
    with_induction: bool,
) -> Result<EvalResult> {
    let stream = BatchStream::new(ids, batch, bptt)?;
    let shards = exec.map_range(batch, |b| -> Result<(f64, usize, usize)> {
        let column = stream.columns(b..b + 1);
        let mut state = LmState::zeros(&model.lm.cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut sum, mut tokens, mut phrases) = (0.0, 0, 0);
        for w in column.windows() {
            let mut tape = Tape::new();
            let out = model.lm.forward(&mut tape, store, &w.inputs, 1, &state, false, &mut rng)?;
            let loss = tape.cross_entropy_sum(out.logits, &w.targets)?;
            sum += tape.scalar(loss);
            tokens += w.tokens();
            if with_induction {
                if let Some(ph) = model.phrases(&mut tape, store, &out, &w.inputs, 1, eos, false, &mut rng)? {
                    phrases += ph.plan.len();
                }
            }
            state = out.state;
        }
        Ok((sum, tokens, phrases))
    });
    let (mut sum, mut tokens, mut phrases) = (0.0, 0, 0);
    for shard in shards {
        let (s, t, p) = shard?;
        sum += s;
        tokens += t;
        phrases += p;
    }
    if tokens == 0 {
        return Err(Error::Corpus("nothing to evaluate".into()));
    }
    let loss = sum / tokens as f64;
    Ok(EvalResult { loss, ppl: loss.exp(), tokens, phrases })
}

/// One line of the metrics file. Only deterministic quantities go here so
/// reruns produce byte-identical files; throughput is reported separately.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub averaging: bool,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub cpa_loss: Option<f64>,
    pub cpa_contexts: usize,
    pub cpa_skipped: usize,
    pub truncated_phrases: usize,
    pub clipped_windows: usize,
    pub mean_grad_norm: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer<O: Objective> {
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub model: PhraseModel,
    pub store: ParamStore,
    pub objective: O,
    pub state: TrainState,
    pub asgd: AsgdTrigger,
    pub average: Option<Averager>,
}

impl<O: Objective> Trainer<O> {
    pub fn new(cfg: TrainConfig, vocab: Vocab, objective: O) -> Result<Self> {
        cfg.validate_model()?;
        let (model, store) = init_model(&cfg, vocab.len())?;
        let asgd = AsgdTrigger::new(cfg.asgd_window);
        Ok(Trainer { cfg, vocab, model, store, objective, state: TrainState::default(), asgd, average: None })
    }

    /// Continues from a checkpoint; `cfg` may change schedule settings but
    /// must describe the same architecture.
    pub fn resume(ck: Checkpoint, cfg: TrainConfig, objective: O) -> Result<Self> {
        let mut t = Trainer::new(cfg, ck.vocab, objective)?;
        t.store.copy_values_from(&ck.params)?;
        t.asgd = AsgdTrigger {
            window: t.cfg.asgd_window,
            history: ck.state.val_history.clone(),
            switched: ck.state.asgd_switched,
        };
        t.average = match ck.average {
            Some(values) => {
                let mut avg = Averager::new(&t.store);
                avg.values.copy_values_from(&values)?;
                avg.count = ck.state.average_count;
                Some(avg)
            }
            None => None,
        };
        t.state = ck.state;
        Ok(t)
    }

    pub fn eos(&self) -> usize {
        self.vocab.eos()
    }

    /// Parameters used for evaluation: the running average once it exists.
    pub fn eval_params(&self) -> &ParamStore {
        match &self.average {
            Some(avg) if avg.count > 0 => &avg.values,
            _ => &self.store,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.asgd_switched = self.asgd.switched;
        state.average_count = self.average.as_ref().map_or(0, |a| a.count);
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            state,
            params: self.store.clone(),
            average: self.average.as_ref().filter(|a| a.count > 0).map(|a| a.values.clone()),
        }
    }

    pub fn evaluate(&self, ids: &[usize], with_induction: bool) -> Result<EvalResult> {
        evaluate_ppl(
            &self.model,
            self.eval_params(),
            ids,
            self.cfg.eval_batch_size,
            self.cfg.bptt,
            self.eos(),
            self.cfg.exec,
            with_induction,
        )
    }

    /// One pass over `stream`, carrying the recurrent state across windows.
    pub fn train_epoch(&mut self, stream: &BatchStream) -> Result<EpochStats> {
        let epoch = self.state.epoch as u64;
        let mut lm_rng = rng_stream(self.cfg.seed, STREAM_LM, epoch);
        let mut aux_rng = rng_stream(self.cfg.seed, STREAM_CPA, epoch);
        let mut state = LmState::zeros(&self.model.lm.cfg, stream.batch());
        let mut stats = EpochStats::default();
        let (mut lm_sum, mut cpa_sum, mut cpa_windows, mut norm_sum) = (0.0, 0.0, 0usize, 0.0);
        let started = Instant::now();

        for (i, window) in stream.windows().enumerate() {
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("window {i}: {m}")),
                other => other,
            };
            let (grads, terms, lm, cpa) = {
                let mut tape = Tape::new();
                let terms = window_loss(
                    &self.model,
                    &self.objective,
                    &mut tape,
                    &self.store,
                    &window,
                    &state,
                    self.vocab.eos(),
                    true,
                    &mut lm_rng,
                    &mut aux_rng,
                )
                .map_err(at)?;
                let total = tape.scalar(terms.total);
                if !total.is_finite() {
                    return Err(Error::Numeric(format!("window {i}: loss is {total}")));
                }
                let lm = tape.scalar(terms.lm);
                let cpa = terms.aux.loss.map(|v| tape.scalar(v));
                (tape.backward(terms.total).map_err(at)?, terms, lm, cpa)
            };
            self.store.zero_grads();
            grads.accumulate_into(&mut self.store)?;
            let norm = grad_norm(&self.store);
            if clip_gradients(&mut self.store, self.cfg.clip_norm).map_err(at)? < 1.0 {
                stats.clipped_windows += 1;
            }
            let lr = self.cfg.lr;
            self.store.iter_mut().for_each(|(_, t)| t.descend(lr));
            if let Some(avg) = self.average.as_mut() {
                avg.update(&self.store);
            }

            let tokens = window.tokens();
            lm_sum += lm * tokens as f64;
            stats.tokens += tokens;
            stats.windows += 1;
            norm_sum += norm;
            if let Some(c) = cpa {
                cpa_sum += c;
                cpa_windows += 1;
            }
            stats.cpa_contexts += terms.aux.scored;
            stats.cpa_skipped += terms.aux.skipped;
            stats.truncated += terms.aux.truncated;
            state = terms.state;
        }
        self.state.epoch += 1;
        if stats.windows == 0 {
            return Err(Error::Corpus("training stream has no windows".into()));
        }
        stats.lm_loss = lm_sum / stats.tokens as f64;
        stats.cpa_loss = (cpa_windows > 0).then(|| cpa_sum / cpa_windows as f64);
        stats.mean_grad_norm = norm_sum / stats.windows as f64;
        stats.tokens_per_sec = stats.tokens as f64 / started.elapsed().as_secs_f64().max(1e-9);
        Ok(stats)
    }

    fn start_averaging(&mut self) {
        self.asgd.switched = true;
        if self.average.is_none() {
            self.average = Some(Averager::new(&self.store));
        }
    }

    /// Trains until `epochs + finetune_epochs` epochs are complete, writing
    /// `metrics.jsonl`, `best.ckpt` and `last.ckpt` under `out_dir`.
    /// `on_epoch` sees each record together with the raw epoch statistics.
    pub fn fit(&mut self, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochRecord, &EpochStats)) -> Result<EvalResult> {
        let out = self.cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let metrics_path = out.join("metrics.jsonl");
        let mut metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .append(self.state.epoch > 0)
            .truncate(self.state.epoch == 0)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let stream = BatchStream::new(&corpus.train, self.cfg.batch_size, self.cfg.bptt)?;
        let total = self.cfg.epochs + self.cfg.finetune_epochs;

        while self.state.epoch < total {
            if self.state.epoch >= self.cfg.epochs && self.cfg.optimizer == Optimizer::Asgd {
                self.start_averaging();
            }
            let stats = self.train_epoch(&stream)?;
            let val = self.evaluate(&corpus.valid, false)?;
            if self.cfg.optimizer == Optimizer::Asgd && self.asgd.observe(val.loss) {
                self.start_averaging();
            }
            self.state.val_history = self.asgd.history.clone();
            let best = self.state.best_val.is_none_or(|b| val.loss < b);
            if best {
                self.state.best_val = Some(val.loss);
            }
            let record = EpochRecord {
                epoch: self.state.epoch,
                lr: self.cfg.lr,
                averaging: self.average.is_some(),
                train_loss: stats.lm_loss,
                train_ppl: stats.lm_loss.exp(),
                cpa_loss: stats.cpa_loss,
                cpa_contexts: stats.cpa_contexts,
                cpa_skipped: stats.cpa_skipped,
                truncated_phrases: stats.truncated,
                clipped_windows: stats.clipped_windows,
                mean_grad_norm: stats.mean_grad_norm,
                val_loss: val.loss,
                val_ppl: val.ppl,
                best,
            };
            let line = serde_json::to_string(&record).map_err(|e| Error::Format { what: "metrics", detail: e.to_string() })?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            let ck = self.checkpoint();
            if best {
                ck.save(&out.join("best.ckpt"))?;
            }
            ck.save(&out.join("last.ckpt"))?;
            on_epoch(&record, &stats);
        }
        let best = Checkpoint::load(&out.join("best.ckpt"))?;
        let (model, store) = best.model()?;
        evaluate_ppl(
            &model,
            &store,
            &corpus.valid,
            self.cfg.eval_batch_size,
            self.cfg.bptt,
            self.eos(),
            self.cfg.exec,
            false,
        )
    }
}
