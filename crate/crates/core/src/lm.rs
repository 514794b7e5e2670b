//! Multi-layer LSTM language model with a tied softmax decoder.
//!
//! The first `context_layer` layers act as the phrase generator: the raw
//! output of that layer is the context embedding used by the alignment loss.
//! The final layer has width `D` so the decoder can reuse the embedding table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{check_rate, sample_mask};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Layer (1-based) whose output is the context embedding.
    pub context_layer: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub dropout_output: f64,
    /// Reuse one dropout mask across all time steps of a window.
    pub variational: bool,
    /// DropConnect rate on the recurrent matrices.
    pub weight_drop: f64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.emb_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("vocab must be >= 2 and dimensions >= 1".into()));
        }
        if self.layers < 2 || self.context_layer < 1 || self.context_layer >= self.layers {
            return Err(Error::Config(format!(
                "need 1 <= context layer < layers, got {} of {}",
                self.context_layer, self.layers
            )));
        }
        for r in [self.dropout_input, self.dropout_hidden, self.dropout_output, self.weight_drop] {
            check_rate(r)?;
        }
        Ok(())
    }

    /// Output width of layer `l` (0-based).
    pub fn layer_width(&self, l: usize) -> usize {
        if l + 1 == self.layers {
            self.emb_dim
        } else {
            self.hidden
        }
    }

    pub fn context_dim(&self) -> usize {
        self.layer_width(self.context_layer - 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[4H, in]`, gate blocks ordered input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[4H, H]`.
    pub w_hh: ParamId,
    /// `[4H]`.
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    /// `E: [V, D]`, shared by the input lookup and the decoder.
    pub embedding: ParamId,
    pub layers: Vec<LstmLayer>,
    pub decoder_bias: ParamId,
}

/// Recurrent state per layer, `(h, c)` each `[B, H_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl LmState {
    pub fn zeros(cfg: &LmConfig, batch: usize) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let w = cfg.layer_width(l);
                (Tensor::zeros(&[batch, w]), Tensor::zeros(&[batch, w]))
            })
            .collect();
        LmState { layers }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.rows())
    }
}

/// Result of one forward pass over a `[T·B]` window.
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// `[T·B, V]`.
    pub logits: Var,
    /// Raw output of the context layer, `[T·B, H_c]`.
    pub context: Var,
    /// Embedding rows of the inputs before dropout, `[T·B, D]`.
    pub embedded: Var,
    /// Embedding table node, shared with the decoder.
    pub table: Var,
    pub state: LmState,
}

fn uniform(shape: &[usize], range: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-range..=range)).collect()).expect("consistent shape")
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, cfg: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add("embedding.weight", uniform(&[cfg.vocab, cfg.emb_dim], 0.1, rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut input_dim = cfg.emb_dim;
        for l in 0..cfg.layers {
            let h = cfg.layer_width(l);
            let range = 1.0 / (h as f64).sqrt();
            let w_ih = store.add(format!("lstm{l}.w_ih"), uniform(&[4 * h, input_dim], range, rng));
            let w_hh = store.add(format!("lstm{l}.w_hh"), uniform(&[4 * h, h], range, rng));
            let bias = store.add(format!("lstm{l}.bias"), uniform(&[4 * h], range, rng));
            layers.push(LstmLayer { input_dim, hidden_dim: h, w_ih, w_hh, bias });
            input_dim = h;
        }
        let decoder_bias = store.add("decoder.bias", Tensor::zeros(&[cfg.vocab]));
        Ok(LanguageModel { cfg, embedding, layers, decoder_bias })
    }

    /// Zero the last layer and the decoder bias so every prediction is uniform.
    pub fn zero_output_path(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("at least two layers");
        for id in [last.w_ih, last.w_hh, last.bias, self.decoder_bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Forward over time-major `inputs` (`row = t·batch + b`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        inputs: &[usize],
        batch: usize,
        state: &LmState,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<LmOutput> {
        if batch == 0 || !inputs.len().is_multiple_of(batch) || inputs.is_empty() {
            return Err(Error::dim("lm forward", format!("{} inputs for batch {batch}", inputs.len())));
        }
        if state.layers.len() != self.layers.len() || state.batch() != batch {
            return Err(Error::dim("lm forward", "state does not match model or batch"));
        }
        if let Some(&bad) = inputs.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::Corpus(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab)));
        }
        let steps = inputs.len() / batch;
        let table = tape.param(store, self.embedding);
        let embedded = tape.gather_rows(table, inputs)?;
        let mut x = self.drop(tape, embedded, self.cfg.dropout_input, steps, batch, training, rng)?;

        let mut context = None;
        let mut new_state = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, h, c) = self.run_layer(tape, store, layer, x, &state.layers[l], steps, batch, training, rng)?;
            new_state.push((h, c));
            if l + 1 == self.cfg.context_layer {
                context = Some(out);
            }
            let rate = if l + 1 == self.layers.len() { self.cfg.dropout_output } else { self.cfg.dropout_hidden };
            x = self.drop(tape, out, rate, steps, batch, training, rng)?;
        }
        let logits = tape.matmul_nt(x, table)?;
        let bias = tape.param(store, self.decoder_bias);
        let logits = tape.add_row_bias(logits, bias)?;
        Ok(LmOutput {
            logits,
            context: context.expect("context layer below the top"),
            embedded,
            table,
            state: LmState { layers: new_state },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn drop(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        rate: f64,
        steps: usize,
        batch: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !self.cfg.variational || !training || rate == 0.0 {
            return tape.dropout(x, rate, training, rng);
        }
        let width = tape.shape(x)[1];
        let mask = sample_mask(batch * width, rate, rng);
        let tiled: Vec<f64> = (0..steps).flat_map(|_| mask.iter().copied()).collect();
        Ok(tape.apply_mask(x, tiled))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layer<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layer: &LstmLayer,
        x: Var,
        init: &(Tensor, Tensor),
        steps: usize,
        batch: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Tensor, Tensor)> {
        let hd = layer.hidden_dim;
        let w_ih = tape.param(store, layer.w_ih);
        let mut w_hh = tape.param(store, layer.w_hh);
        if training && self.cfg.weight_drop > 0.0 {
            w_hh = tape.dropout(w_hh, self.cfg.weight_drop, true, rng)?;
        }
        let bias = tape.param(store, layer.bias);
        let proj = tape.matmul_nt(x, w_ih)?;
        let proj = tape.add_row_bias(proj, bias)?;

        let mut h = tape.constant(init.0.clone());
        let mut c = tape.constant(init.1.clone());
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xg = tape.slice_rows(proj, t * batch, batch)?;
            let hg = tape.matmul_nt(h, w_hh)?;
            let gates = tape.add(xg, hg)?;
            let i = tape.slice_cols(gates, 0, hd)?;
            let f = tape.slice_cols(gates, hd, hd)?;
            let g = tape.slice_cols(gates, 2 * hd, hd)?;
            let o = tape.slice_cols(gates, 3 * hd, hd)?;
            let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outs.push(h);
        }
        let out = tape.concat_rows(&outs)?;
        Ok((out, tape.tensor(h), tape.tensor(c)))
    }
}

/// Mean next-token cross-entropy over all rows.
pub fn lm_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}
