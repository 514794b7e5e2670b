//! The full model: language model, height network and phrase projection.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::height::HeightNet;
use crate::induction::{induce_on_tape, phrase_embeddings_on_tape, InducedBatch, InductionConfig, PhrasePlan};
use crate::lm::{LanguageModel, LmOutput};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PhraseModel {
    pub lm: LanguageModel,
    pub height: HeightNet,
    /// Separate height-net input table; `None` shares the LM embedding.
    pub height_embedding: Option<ParamId>,
    /// `W_s: [H_c, D]`, maps pooled embeddings into the context space.
    pub projection: ParamId,
    pub induction: InductionConfig,
    pub phrase_dropout: f64,
}

/// Induced phrases of one window, on the tape.
#[derive(Clone, Debug)]
pub struct PhraseWindow {
    pub plan: PhrasePlan,
    /// `[T·B]`.
    pub heights: Var,
    pub induced: InducedBatch,
    /// `[P, H_c]`.
    pub embeddings: Var,
    /// Context rows aligned with `embeddings`, `[P, H_c]`.
    pub contexts: Var,
}

impl PhraseModel {
    /// Parameters are created in a fixed order (LM, height net, projection),
    /// each from its own generator, so the LM initialisation does not depend
    /// on the phrase components.
    pub fn new(
        store: &mut ParamStore,
        cfg: &TrainConfig,
        vocab: usize,
        lm_rng: &mut impl Rng,
        phrase_rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate_model()?;
        let lm_cfg = cfg.lm(vocab);
        let context_dim = lm_cfg.context_dim();
        let lm = LanguageModel::new(store, lm_cfg, lm_rng)?;
        let height_embedding = cfg.separate_height_embedding.then(|| {
            let n = vocab * cfg.emb_dim;
            let data = (0..n).map(|_| phrase_rng.gen_range(-0.1..=0.1)).collect();
            store.add("height.embedding", Tensor::new(vec![vocab, cfg.emb_dim], data).expect("shape"))
        });
        let height = HeightNet::new(
            store,
            cfg.emb_dim,
            cfg.height_hidden(),
            cfg.height_window,
            cfg.height_depth,
            phrase_rng,
        )?;
        let range = 1.0 / (cfg.emb_dim as f64).sqrt();
        let w = (0..context_dim * cfg.emb_dim).map(|_| phrase_rng.gen_range(-range..=range)).collect();
        let projection = store.add("phrase.projection", Tensor::new(vec![context_dim, cfg.emb_dim], w)?);
        Ok(PhraseModel {
            lm,
            height,
            height_embedding,
            projection,
            induction: cfg.induction(),
            phrase_dropout: cfg.dropout_phrase,
        })
    }

    /// Heights of a window, from the undropped embedding rows.
    pub fn heights<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        out: &LmOutput,
        inputs: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let x = match self.height_embedding {
            Some(id) => {
                let table = tape.param(store, id);
                tape.gather_rows(table, inputs)?
            }
            None => out.embedded,
        };
        self.height.forward(tape, store, x, batch)
    }

    /// Heights, soft phrases and phrase embeddings for a window. `None` when
    /// the window has no target with a non-empty phrase.
    #[allow(clippy::too_many_arguments)]
    pub fn phrases<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        out: &LmOutput,
        inputs: &[usize],
        batch: usize,
        eos: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Option<PhraseWindow>> {
        let steps = inputs.len() / batch;
        let plan = PhrasePlan::build(inputs, steps, batch, eos, self.induction.max_len);
        if plan.is_empty() {
            return Ok(None);
        }
        let heights = self.heights(tape, store, out, inputs, batch)?;
        let induced = induce_on_tape(tape, heights, &plan, &self.induction)?;
        let projection = tape.param(store, self.projection);
        let embeddings =
            phrase_embeddings_on_tape(tape, induced.alpha, out.table, projection, &plan, self.phrase_dropout, training, rng)?;
        let contexts = tape.gather_rows(out.context, &plan.contexts)?;
        Ok(Some(PhraseWindow { plan, heights, induced, embeddings, contexts }))
    }
}
