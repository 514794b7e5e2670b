//! Syntactic heights from a causal convolution over word embeddings.
//!
//! `d_i = W_d · [x_{i-n}, …, x_i] + b_d` and `h_i = W_h · ReLU(d_i) + b_h`,
//! with zero rows standing in for positions before the start of a window.
//! `depth > 1` stacks further convolution + ReLU stages before the readout.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::causal_conv1d;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter handles of the height network.
#[derive(Clone, Debug)]
pub struct HeightNet {
    /// Number of past tokens seen in addition to the current one.
    pub window: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `(W_d, b_d)` per convolution stage; `W_d` is `[(window+1)·in, hidden]`.
    pub convs: Vec<(ParamId, ParamId)>,
    /// `W_h: [1, hidden]`.
    pub readout: ParamId,
    /// `b_h: [1]`.
    pub readout_bias: ParamId,
}

/// Per-token heights of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeightProfile {
    pub heights: Vec<f64>,
}

impl HeightProfile {
    pub fn new(heights: Vec<f64>) -> Self {
        HeightProfile { heights }
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.heights[i]
    }
}

fn uniform(shape: &[usize], range: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-range..range)).collect()).expect("consistent shape")
}

impl HeightNet {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden_dim: usize,
        window: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 || hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Config("height net needs depth, input and hidden sizes of at least 1".into()));
        }
        let mut convs = Vec::with_capacity(depth);
        let mut fan_in_dim = input_dim;
        for l in 0..depth {
            let fan_in = (window + 1) * fan_in_dim;
            let range = 1.0 / (fan_in as f64).sqrt();
            let w = store.add(format!("height.conv{l}.weight"), uniform(&[fan_in, hidden_dim], range, rng));
            let b = store.add(format!("height.conv{l}.bias"), Tensor::zeros(&[hidden_dim]));
            convs.push((w, b));
            fan_in_dim = hidden_dim;
        }
        let range = 1.0 / (hidden_dim as f64).sqrt();
        let readout = store.add("height.readout.weight", uniform(&[1, hidden_dim], range, rng));
        let readout_bias = store.add("height.readout.bias", Tensor::zeros(&[1]));
        Ok(HeightNet { window, input_dim, hidden_dim, convs, readout, readout_bias })
    }

    /// Heights for `x: [T·B, D]` (time-major rows); returns `[T·B]`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, batch: usize) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.convs {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let d = if batch == 1 {
                causal_conv1d(tape, h, wv, bv, self.window)?
            } else {
                let unfolded = tape.causal_unfold(h, self.window, batch)?;
                let z = tape.matmul(unfolded, wv)?;
                tape.add_row_bias(z, bv)?
            };
            h = tape.relu(d);
        }
        let wh = tape.param(store, self.readout);
        let bh = tape.param(store, self.readout_bias);
        let z = tape.matmul_nt(h, wh)?;
        let z = tape.add_row_bias(z, bh)?;
        let rows = tape.shape(z)[0];
        tape.reshape(z, &[rows])
    }
}

/// Heights of a single sequence of embeddings `[T, D]`.
pub fn syntactic_heights(embeddings: &Tensor, store: &ParamStore, net: &HeightNet) -> Result<HeightProfile> {
    if embeddings.shape().len() != 2 || embeddings.shape()[1] != net.input_dim {
        return Err(Error::dim("syntactic_heights", format!("embeddings {:?}", embeddings.shape())));
    }
    if embeddings.shape()[0] == 0 {
        return Err(Error::dim("syntactic_heights", "empty sequence"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(embeddings.clone());
    let h = net.forward(&mut tape, store, x, 1)?;
    Ok(HeightProfile::new(tape.value(h).to_vec()))
}
