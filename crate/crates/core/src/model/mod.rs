//! Video perceiver, causal comment decoder and the token / scalar heads.
//!
//! Layout of one decoder input sequence:
//!
//! ```text
//! [q_0 .. q_{P-1}] [BOS] [t_1 .. t_n] [PAD ..]
//! ```
//!
//! where `q_i` are the perceiver's soft prompts. The hidden state at input
//! position `P + j` predicts token `t_{j+1}`; the scalar heads read the hidden
//! state of the last token, which is the end token for scored comments.
//! Attention is causal, so right padding never changes earlier positions.

mod checkpoint;
mod decode;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::FeatureTensor;
use crate::nn::{AttnSpec, Graph, ParamStore, Tensor, Var};
use crate::text::{Vocab, BOS, EOS, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use decode::{DecodeParams, Generation, Strategy};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature dim {got} does not match the configured {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("video of {frames}x{patches} patches exceeds the configured {max_frames}x{max_patches}")]
    VideoTooLarge { frames: usize, patches: usize, max_frames: usize, max_patches: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("comment has {len} tokens, the model takes at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty comment has no final position to score")]
    EmptyComment,
    #[error("operation needs a {expected} model, got {got}")]
    WrongMode { expected: &'static str, got: ModelMode },
    #[error("vocabulary has {got} entries, config says {expected}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub perceiver_layers: usize,
    pub d_model: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    /// Filled from the vocabulary when a model is built.
    pub vocab_size: usize,
    /// Longest token sequence the decoder reads, end token included.
    pub max_comment_len: usize,
    pub max_frames: usize,
    pub max_patches: usize,
    pub feature_dim: usize,
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 40,
            perceiver_layers: 8,
            d_model: 128,
            decoder_layers: 4,
            n_heads: 4,
            vocab_size: 0,
            max_comment_len: 16,
            max_frames: 4,
            max_patches: 4,
            feature_dim: 32,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.max_comment_len < 1 {
            return bad("max_comment_len must be at least 1");
        }
        if self.max_frames == 0 || self.max_patches == 0 || self.feature_dim == 0 {
            return bad("feature shape maxima must be positive");
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Generator,
    Reward,
    Policy,
    Value,
}

impl ModelMode {
    pub fn has_token_head(self) -> bool {
        matches!(self, Self::Generator | Self::Policy)
    }

    pub fn has_scalar_head(self) -> bool {
        matches!(self, Self::Reward | Self::Value)
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Generator => "generator",
            Self::Reward => "reward",
            Self::Policy => "policy",
            Self::Value => "value",
        };
        f.write_str(s)
    }
}

pub const SCALAR_HEAD: &str = "head.scalar";
pub const VALUE_HEAD: &str = "head.value";
const TOKEN_HEAD: &str = "head.token";

/// Decoder activations for a batch of right-padded sequences.
pub struct Forward {
    pub hidden: Var,
    /// Rows per sequence: prompts, BOS and the longest token list.
    pub seq_len: usize,
    pub prefix: usize,
    pub lens: Vec<usize>,
}

impl Forward {
    /// Hidden-state row that predicts token `j` of sequence `i`.
    pub fn predict_row(&self, i: usize, j: usize) -> u32 {
        (i * self.seq_len + self.prefix + j) as u32
    }

    /// Hidden-state row holding the last token of sequence `i`.
    pub fn last_row(&self, i: usize) -> u32 {
        (i * self.seq_len + self.prefix + self.lens[i]) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub vocab: Vocab,
    pub params: ParamStore,
}

fn linear_params<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) {
    p.gaussian(&format!("{name}.w"), fan_in, fan_out, std, rng);
    p.constant(&format!("{name}.b"), 1, fan_out, 0.0);
}

fn norm_params(p: &mut ParamStore, name: &str, d: usize) {
    p.constant(&format!("{name}.g"), 1, d, 1.0);
    p.constant(&format!("{name}.b"), 1, d, 0.0);
}

impl Model {
    /// Fresh parameters for `mode`. `config.vocab_size` is taken from `vocab`.
    pub fn new<R: Rng + ?Sized>(mut config: ModelConfig, mode: ModelMode, vocab: Vocab, rng: &mut R) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let d = config.d_model;
        let ff = d * config.ff_mult;
        let w_std = 1.0 / (d as f64).sqrt();
        let out_std = w_std / ((2 * (config.perceiver_layers + config.decoder_layers)).max(1) as f64).sqrt();
        let mut p = ParamStore::new();

        p.gaussian("perceiver.pos", config.max_frames * config.max_patches, config.feature_dim, 0.1, rng);
        linear_params(&mut p, "perceiver.proj", config.feature_dim, d, 1.0 / (config.feature_dim as f64).sqrt(), rng);
        p.gaussian("perceiver.queries", config.n_queries, d, 1.0, rng);
        for i in 0..config.perceiver_layers {
            let n = format!("perceiver.{i}");
            norm_params(&mut p, &format!("{n}.ln_q"), d);
            norm_params(&mut p, &format!("{n}.ln_kv"), d);
            for part in ["q", "k", "v"] {
                linear_params(&mut p, &format!("{n}.attn.{part}"), d, d, w_std, rng);
            }
            linear_params(&mut p, &format!("{n}.attn.o"), d, d, out_std, rng);
            norm_params(&mut p, &format!("{n}.ln_ff"), d);
            linear_params(&mut p, &format!("{n}.ff.1"), d, ff, w_std, rng);
            linear_params(&mut p, &format!("{n}.ff.2"), ff, d, out_std, rng);
        }
        norm_params(&mut p, "perceiver.ln_out", d);

        p.gaussian("decoder.tok_emb", config.vocab_size, d, 1.0, rng);
        p.gaussian("decoder.pos_emb", config.max_comment_len + 1, d, 0.1, rng);
        for i in 0..config.decoder_layers {
            let n = format!("decoder.{i}");
            norm_params(&mut p, &format!("{n}.ln1"), d);
            for part in ["q", "k", "v"] {
                linear_params(&mut p, &format!("{n}.attn.{part}"), d, d, w_std, rng);
            }
            linear_params(&mut p, &format!("{n}.attn.o"), d, d, out_std, rng);
            norm_params(&mut p, &format!("{n}.ln2"), d);
            linear_params(&mut p, &format!("{n}.ff.1"), d, ff, w_std, rng);
            linear_params(&mut p, &format!("{n}.ff.2"), ff, d, out_std, rng);
        }
        norm_params(&mut p, "decoder.ln_f", d);

        if mode.has_token_head() {
            linear_params(&mut p, TOKEN_HEAD, d, config.vocab_size, 0.02, rng);
        }
        if mode.has_scalar_head() {
            linear_params(&mut p, SCALAR_HEAD, d, 1, 0.02, rng);
        }
        if mode == ModelMode::Policy {
            linear_params(&mut p, VALUE_HEAD, d, 1, 0.02, rng);
        }
        Ok(Self { config, mode, vocab, params: p })
    }

    /// A reward model sharing this generator's backbone with a fresh scalar head.
    pub fn to_reward<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut m = self.clone();
        m.params.remove(&format!("{TOKEN_HEAD}.w"));
        m.params.remove(&format!("{TOKEN_HEAD}.b"));
        linear_params(&mut m.params, SCALAR_HEAD, self.config.d_model, 1, 0.02, rng);
        m.mode = ModelMode::Reward;
        m
    }

    /// A policy initialised from this generator, with a value head copied from
    /// `reward`'s scalar head.
    pub fn to_policy(&self, reward: &Model) -> Result<Self, ModelError> {
        self.expect_token_head()?;
        reward.expect_scalar_head()?;
        let mut m = self.clone();
        for part in ["w", "b"] {
            let t = reward.params.get(&format!("{SCALAR_HEAD}.{part}")).expect("scalar head").clone();
            m.params.insert(format!("{VALUE_HEAD}.{part}"), t);
        }
        m.mode = ModelMode::Policy;
        Ok(m)
    }

    /// The generator part of a policy (value head dropped).
    pub fn to_generator(&self) -> Result<Self, ModelError> {
        self.expect_token_head()?;
        let mut m = self.clone();
        m.params.remove(&format!("{VALUE_HEAD}.w"));
        m.params.remove(&format!("{VALUE_HEAD}.b"));
        m.mode = ModelMode::Generator;
        Ok(m)
    }

    pub(crate) fn expect_token_head(&self) -> Result<(), ModelError> {
        if self.mode.has_token_head() {
            Ok(())
        } else {
            Err(ModelError::WrongMode { expected: "generator or policy", got: self.mode })
        }
    }

    pub(crate) fn expect_scalar_head(&self) -> Result<(), ModelError> {
        if self.mode.has_scalar_head() {
            Ok(())
        } else {
            Err(ModelError::WrongMode { expected: "reward or value", got: self.mode })
        }
    }

    fn check_video(&self, f: &FeatureTensor) -> Result<(), ModelError> {
        let c = &self.config;
        if f.dim() != c.feature_dim {
            return Err(ModelError::FeatureDim { expected: c.feature_dim, got: f.dim() });
        }
        if f.frames() > c.max_frames || f.patches() > c.max_patches {
            return Err(ModelError::VideoTooLarge {
                frames: f.frames(),
                patches: f.patches(),
                max_frames: c.max_frames,
                max_patches: c.max_patches,
            });
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_comment_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_comment_len });
        }
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ModelError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Soft prompts for each video, stacked: `(videos·n_queries) × d_model`.
    pub fn perceive_graph(&self, g: &mut Graph, videos: &[&FeatureTensor]) -> Result<Var, ModelError> {
        let c = &self.config;
        for f in videos {
            self.check_video(f)?;
        }
        let nq = c.n_queries;
        let kv_len = videos.iter().map(|f| f.frames() * f.patches()).max().unwrap_or(0);
        let n = videos.len();
        let mut feats = Tensor::zeros(n * kv_len, c.feature_dim);
        let mut pos_index = vec![(0u32, 0u32); n * kv_len];
        let mut mask = vec![false; n * kv_len];
        for (b, f) in videos.iter().enumerate() {
            for t in 0..f.frames() {
                for l in 0..f.patches() {
                    let row = b * kv_len + t * f.patches() + l;
                    for (dst, src) in feats.row_mut(row).iter_mut().zip(f.patch(t, l)) {
                        *dst = *src as f64;
                    }
                    pos_index[row] = (0, (t * c.max_patches + l) as u32);
                    mask[row] = true;
                }
            }
        }
        let x = g.input(feats);
        let pos_table = g.param("perceiver.pos");
        let pos = g.gather_rows(&[pos_table], pos_index);
        let x = g.add(x, pos);
        let kv = g.linear(x, "perceiver.proj.w", "perceiver.proj.b");
        let queries = g.param("perceiver.queries");
        let mut q = g.gather_rows(&[queries], (0..n).flat_map(|_| 0..nq as u32).map(|i| (0, i)).collect());
        for i in 0..c.perceiver_layers {
            let p = format!("perceiver.{i}");
            let h = g.layer_norm(q, &format!("{p}.ln_q.g"), &format!("{p}.ln_q.b"));
            let kvn = g.layer_norm(kv, &format!("{p}.ln_kv.g"), &format!("{p}.ln_kv.b"));
            let qq = g.linear(h, &format!("{p}.attn.q.w"), &format!("{p}.attn.q.b"));
            let kk = g.linear(kvn, &format!("{p}.attn.k.w"), &format!("{p}.attn.k.b"));
            let vv = g.linear(kvn, &format!("{p}.attn.v.w"), &format!("{p}.attn.v.b"));
            let spec = AttnSpec { batch: n, q_len: nq, kv_len, heads: c.n_heads, causal: false, key_mask: Some(mask.clone()) };
            let a = g.attention(qq, kk, vv, spec);
            let a = g.linear(a, &format!("{p}.attn.o.w"), &format!("{p}.attn.o.b"));
            q = g.add(q, a);
            q = self.feed_forward(g, q, &p, "ln_ff");
        }
        Ok(g.layer_norm(q, "perceiver.ln_out.g", "perceiver.ln_out.b"))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, prefix: &str, norm: &str) -> Var {
        let h = g.layer_norm(x, &format!("{prefix}.{norm}.g"), &format!("{prefix}.{norm}.b"));
        let h = g.linear(h, &format!("{prefix}.ff.1.w"), &format!("{prefix}.ff.1.b"));
        let h = g.gelu(h);
        let h = g.linear(h, &format!("{prefix}.ff.2.w"), &format!("{prefix}.ff.2.b"));
        g.add(x, h)
    }

    /// `n_queries × d_model` soft prompts of one video.
    pub fn perceive(&self, video: &FeatureTensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference(&self.params);
        let v = self.perceive_graph(&mut g, &[video])?;
        Ok(g.value(v).clone())
    }

    /// Runs the decoder over `seqs`, each `(index of its video's prompts, tokens)`.
    /// `prompts` stacks `n_queries` rows per video.
    pub fn decode_graph(&self, g: &mut Graph, prompts: Var, seqs: &[(usize, &[u32])]) -> Result<Forward, ModelError> {
        let c = &self.config;
        for (_, t) in seqs {
            self.check_tokens(t)?;
        }
        let p = c.n_queries;
        let text_len = 1 + seqs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let seq_len = p + text_len;
        let b = seqs.len();
        let mut ids = Vec::with_capacity(b * text_len);
        for (_, t) in seqs {
            ids.push((0, BOS));
            ids.extend(t.iter().map(|&x| (0, x)));
            ids.extend(std::iter::repeat_n((0, PAD), text_len - 1 - t.len()));
        }
        let tok_table = g.param("decoder.tok_emb");
        let tok = g.gather_rows(&[tok_table], ids);
        let pos_table = g.param("decoder.pos_emb");
        let pos = g.gather_rows(&[pos_table], (0..b).flat_map(|_| 0..text_len as u32).map(|i| (0, i)).collect());
        let text = g.add(tok, pos);
        let mut index = Vec::with_capacity(b * seq_len);
        for (i, (video, _)) in seqs.iter().enumerate() {
            index.extend((0..p).map(|s| (0, (video * p + s) as u32)));
            index.extend((0..text_len).map(|s| (1, (i * text_len + s) as u32)));
        }
        let mut x = g.gather_rows(&[prompts, text], index);
        for i in 0..c.decoder_layers {
            let n = format!("decoder.{i}");
            let h = g.layer_norm(x, &format!("{n}.ln1.g"), &format!("{n}.ln1.b"));
            let q = g.linear(h, &format!("{n}.attn.q.w"), &format!("{n}.attn.q.b"));
            let k = g.linear(h, &format!("{n}.attn.k.w"), &format!("{n}.attn.k.b"));
            let v = g.linear(h, &format!("{n}.attn.v.w"), &format!("{n}.attn.v.b"));
            let spec = AttnSpec { batch: b, q_len: seq_len, kv_len: seq_len, heads: c.n_heads, causal: true, key_mask: None };
            let a = g.attention(q, k, v, spec);
            let a = g.linear(a, &format!("{n}.attn.o.w"), &format!("{n}.attn.o.b"));
            x = g.add(x, a);
            x = self.feed_forward(g, x, &n, "ln2");
        }
        let hidden = g.layer_norm(x, "decoder.ln_f.g", "decoder.ln_f.b");
        Ok(Forward { hidden, seq_len, prefix: p, lens: seqs.iter().map(|(_, t)| t.len()).collect() })
    }

    /// Log-softmax over the vocabulary at the given hidden rows.
    pub fn token_log_softmax(&self, g: &mut Graph, fwd: &Forward, rows: Vec<u32>) -> Result<Var, ModelError> {
        self.expect_token_head()?;
        let h = g.gather_rows(&[fwd.hidden], rows.into_iter().map(|r| (0, r)).collect());
        let logits = g.linear(h, "head.token.w", "head.token.b");
        Ok(g.log_softmax(logits))
    }

    /// Column of teacher-forced log-probabilities, every token of every
    /// sequence in order.
    pub fn sequence_log_probs(&self, g: &mut Graph, fwd: &Forward, seqs: &[(usize, &[u32])]) -> Result<Var, ModelError> {
        let mut rows = Vec::new();
        let mut picks = Vec::new();
        for (i, (_, t)) in seqs.iter().enumerate() {
            for (j, &tok) in t.iter().enumerate() {
                picks.push((rows.len() as u32, tok));
                rows.push(fwd.predict_row(i, j));
            }
        }
        let ls = self.token_log_softmax(g, fwd, rows)?;
        Ok(g.pick(ls, picks))
    }

    /// `head` (`head.scalar` or `head.value`) applied at the given hidden rows.
    pub fn scalar_at(&self, g: &mut Graph, hidden: Var, rows: Vec<u32>, head: &str) -> Var {
        let h = g.gather_rows(&[hidden], rows.into_iter().map(|r| (0, r)).collect());
        g.linear(h, &format!("{head}.w"), &format!("{head}.b"))
    }

    /// Teacher-forced log-probability of each token of `tokens`.
    pub fn log_probs(&self, video: &FeatureTensor, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.expect_token_head()?;
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.params);
        let prompts = self.perceive_graph(&mut g, &[video])?;
        let seqs = [(0, tokens)];
        let fwd = self.decode_graph(&mut g, prompts, &seqs)?;
        let lp = self.sequence_log_probs(&mut g, &fwd, &seqs)?;
        Ok(g.value(lp).data.clone())
    }

    /// Log-probabilities over the whole vocabulary for the token after `prefix`.
    pub fn next_token_log_probs(&self, video: &FeatureTensor, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.expect_token_head()?;
        let mut g = Graph::inference(&self.params);
        let prompts = self.perceive_graph(&mut g, &[video])?;
        let fwd = self.decode_graph(&mut g, prompts, &[(0, prefix)])?;
        let ls = self.token_log_softmax(&mut g, &fwd, vec![fwd.predict_row(0, prefix.len())])?;
        Ok(g.value(ls).data.clone())
    }

    /// Cuts `tokens` at the first end token, which is kept or appended.
    pub fn scoring_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>, ModelError> {
        let mut t: Vec<u32> = tokens.iter().copied().take_while(|&x| x != EOS).collect();
        if t.is_empty() {
            return Err(ModelError::EmptyComment);
        }
        t.truncate(self.config.max_comment_len - 1);
        t.push(EOS);
        Ok(t)
    }

    /// Scalar score of each `(video, comment tokens)` item.
    pub fn reward_scores(&self, items: &[(&FeatureTensor, &[u32])]) -> Result<Vec<f64>, ModelError> {
        self.expect_scalar_head()?;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(128) {
            let tokens = chunk.iter().map(|(_, t)| self.scoring_tokens(t)).collect::<Result<Vec<_>, _>>()?;
            let videos: Vec<&FeatureTensor> = chunk.iter().map(|(v, _)| *v).collect();
            let mut g = Graph::inference(&self.params);
            let prompts = self.perceive_graph(&mut g, &videos)?;
            let seqs: Vec<(usize, &[u32])> = tokens.iter().enumerate().map(|(i, t)| (i, t.as_slice())).collect();
            let fwd = self.decode_graph(&mut g, prompts, &seqs)?;
            let rows = (0..seqs.len()).map(|i| fwd.last_row(i)).collect();
            let s = self.scalar_at(&mut g, fwd.hidden, rows, SCALAR_HEAD);
            out.extend_from_slice(&g.value(s).data);
        }
        Ok(out)
    }

    pub fn reward_score(&self, video: &FeatureTensor, tokens: &[u32]) -> Result<f64, ModelError> {
        Ok(self.reward_scores(&[(video, tokens)])?[0])
    }

    /// Final-layer embedding the scalar head reads for this item.
    pub fn final_embedding(&self, video: &FeatureTensor, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let t = self.scoring_tokens(tokens)?;
        let mut g = Graph::inference(&self.params);
        let prompts = self.perceive_graph(&mut g, &[video])?;
        let fwd = self.decode_graph(&mut g, prompts, &[(0, &t)])?;
        Ok(g.value(fwd.hidden).row(fwd.last_row(0) as usize).to_vec())
    }

    /// Encodes text for the decoder: vocabulary ids, truncated, end token appended.
    pub fn encode_comment(&self, text: &str) -> Vec<u32> {
        let mut t = self.vocab.encode(text);
        t.truncate(self.config.max_comment_len - 1);
        t.push(EOS);
        t
    }
}
