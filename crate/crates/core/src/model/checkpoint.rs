//! Checkpoint container.
//!
//! ```text
//! magic  u32 LE
//! hlen   u64 LE    length of the JSON header
//! header JSON      config, mode, vocabulary, rng state, tensor index
//! data   f32 LE    tensors in index order, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ModelMode};
use crate::nn::{ParamStore, Tensor};
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: u32 = 0x454E_4731;

/// Enough of a ChaCha8 stream to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal word position; does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|e| bad(&e.to_string()))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    mode: ModelMode,
    vocab: Vocab,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, rng: Option<&ChaCha8Rng>) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let header = Header {
        config: model.config.clone(),
        mode: model.mode,
        vocab: model.vocab.clone(),
        rng: rng.map(RngState::capture),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.params.n_values());
    buf.extend_from_slice(&CHECKPOINT_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &x in &t.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let bad = |m: String| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("truncated header".into()));
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:#010x}")));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..12usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut vocab = header.vocab;
    vocab.reindex();
    if vocab.len() != header.config.vocab_size {
        return Err(ModelError::VocabMismatch { expected: header.config.vocab_size, got: vocab.len() });
    }
    header.config.validate()?;
    let mut data = &bytes[12 + hlen..];
    let mut params = ParamStore::new();
    for e in header.tensors {
        let n = e.rows * e.cols;
        if data.len() < 4 * n {
            return Err(bad(format!("tensor {} truncated", e.name)));
        }
        let values: Vec<f64> = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        data = &data[4 * n..];
        params.insert(e.name, Tensor::from_vec(e.rows, e.cols, values));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    let model = Model { config: header.config, mode: header.mode, vocab, params };
    Ok(Checkpoint { model, rng: header.rng })
}
