//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, vocabulary, trainer state and a table of named tensors),
//! then every tensor's values as little-endian `f64` in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::PhraseModel;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"PHRASELM";
pub const VERSION: u32 = 1;
const FORMAT: &str = "phrase-lm-checkpoint";

/// Trainer bookkeeping needed to resume a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best_val: Option<f64>,
    pub asgd_switched: bool,
    pub average_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: TrainConfig,
    vocab: Vec<String>,
    state: TrainState,
    params: Vec<Entry>,
    average: Option<Vec<Entry>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub state: TrainState,
    /// Current SGD iterate.
    pub params: ParamStore,
    /// Running average once averaged SGD has started.
    pub average: Option<ParamStore>,
}

fn entries(store: &ParamStore) -> Vec<Entry> {
    store.iter().map(|(_, name, t)| Entry { name: name.to_string(), shape: t.shape().to_vec() }).collect()
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

impl Checkpoint {
    /// Parameters used for evaluation: the average when present.
    pub fn eval_params(&self) -> &ParamStore {
        self.average.as_ref().unwrap_or(&self.params)
    }

    /// Rebuilds the model skeleton matching the stored configuration.
    pub fn model(&self) -> Result<(PhraseModel, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let model = PhraseModel::new(&mut store, &self.config, self.vocab.len(), &mut rng, &mut rng2)?;
        store.copy_values_from(self.eval_params())?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            state: self.state.clone(),
            params: entries(&self.params),
            average: self.average.as_ref().map(entries),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let total = self.params.num_scalars() + self.average.as_ref().map_or(0, ParamStore::num_scalars);
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in std::iter::once(&self.params).chain(&self.average) {
            for (_, _, t) in store.iter() {
                t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format_err(e.to_string()))?;
        if header.format != FORMAT {
            return Err(format_err(format!("unexpected format tag {:?}", header.format)));
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        let mut blob = bytes[20 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read = |table: &[Entry]| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for e in table {
                let n: usize = e.shape.iter().product();
                let data: Vec<f64> = blob.by_ref().take(n).collect();
                if data.len() != n {
                    return Err(format_err(format!("truncated data for {}", e.name)));
                }
                store.add(e.name.clone(), crate::tensor::Tensor::new(e.shape.clone(), data)?);
            }
            Ok(store)
        };
        let params = read(&header.params)?;
        let average = header.average.as_deref().map(&mut read).transpose()?;
        if blob.next().is_some() || !(bytes.len() - 20 - len).is_multiple_of(8) {
            return Err(format_err("trailing bytes after parameter data"));
        }
        Ok(Checkpoint { config: header.config, vocab, state: header.state, params, average })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
