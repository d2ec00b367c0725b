//! Base sentence-embedding model.
//!
//! A hashing tokenizer feeds token plus position embeddings into a stack of
//! post-norm transformer layers; the pooled hidden state is the sentence
//! vector. All parameters live in a flat path-keyed map so freezing,
//! checkpointing, and optimizer bookkeeping can treat them uniformly.
//!
//! Adapter modules attach through [`LayerAdapter`]: the encoder calls
//! `adapt` on each sublayer output before the residual add, and `finish`
//! once after the last layer, which is enough to express both in-layer
//! bottlenecks and side networks fused at the end.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const PAD_ID: usize = 0;
pub const SEP_ID: usize = 1;
/// Reserved ids below the hashed-token range.
pub const RESERVED_IDS: usize = 2;
/// Additive attention-score penalty for padded key positions; large enough
/// that the masked softmax weight underflows to exactly zero.
const MASK_PENALTY: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
    #[error("parameter '{path}' has shape {actual:?}, expected {expected:?}")]
    ParameterShape {
        path: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected parameter '{0}' not part of this geometry")]
    UnexpectedParameter(String),
    #[error("bad token sequence: {0}")]
    BadSequence(String),
    #[error("adapter incompatible with encoder: {0}")]
    AdapterGeometry(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// First-token hidden state.
    Cls,
    /// Mean over non-padding positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |msg: String| Err(EncoderError::Config(msg));
        if self.vocab_size <= RESERVED_IDS {
            return err(format!(
                "vocab_size must exceed the {RESERVED_IDS} reserved ids, got {}",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("d_model, n_layers, n_heads, d_ff must all be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.max_len == 0 {
            return err("max_len must be at least 1".into());
        }
        Ok(())
    }

    /// Expected parameter paths and shapes for this geometry, in path order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.d_model;
        let mut shapes = BTreeMap::new();
        shapes.insert("embeddings.token".into(), vec![self.vocab_size, d]);
        shapes.insert("embeddings.position".into(), vec![self.max_len, d]);
        shapes.insert("embeddings.ln.scale".into(), vec![d]);
        shapes.insert("embeddings.ln.shift".into(), vec![d]);
        for i in 0..self.n_layers {
            let p = |name: &str| format!("layer.{i}.{name}");
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.insert(p(&format!("attention.{w}")), vec![d, d]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                shapes.insert(p(&format!("attention.{b}")), vec![d]);
            }
            shapes.insert(p("attention.ln.scale"), vec![d]);
            shapes.insert(p("attention.ln.shift"), vec![d]);
            shapes.insert(p("ff.w1"), vec![d, self.d_ff]);
            shapes.insert(p("ff.b1"), vec![self.d_ff]);
            shapes.insert(p("ff.w2"), vec![self.d_ff, d]);
            shapes.insert(p("ff.b2"), vec![d]);
            shapes.insert(p("ff.ln.scale"), vec![d]);
            shapes.insert(p("ff.ln.shift"), vec![d]);
        }
        shapes
    }
}

// ── Tokenizer ───────────────────────────────────────────────────────────

/// Literal separator recognized by the tokenizer (case-insensitive).
pub const SEP_TOKEN: &str = "[sep]";
const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

// FNV-1a; hand-rolled because the hash must be stable across platforms and
// releases (checkpoint compatibility), which DefaultHasher does not promise.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercase, split into alphanumeric runs, hash each into
/// `[RESERVED_IDS, vocab_size)`. The literal `[sep]` (any case) becomes
/// [`SEP_ID`]; text with no tokens at all becomes a single separator.
/// Output never exceeds `max_len` ids and never contains [`PAD_ID`].
pub fn tokenize(text: &str, config: &EncoderConfig) -> Vec<usize> {
    let lowered = text.to_lowercase();
    let hash_range = (config.vocab_size - RESERVED_IDS) as u64;
    let mut ids = Vec::new();
    for segment in SegmentBySep::new(&lowered) {
        match segment {
            Segment::Sep => ids.push(SEP_ID),
            Segment::Text(t) => {
                for word in t.split(|c: char| !c.is_alphanumeric()) {
                    if word.is_empty() {
                        continue;
                    }
                    ids.push(RESERVED_IDS + (fnv1a(word.as_bytes()) % hash_range) as usize);
                }
            }
        }
        if ids.len() >= config.max_len {
            break;
        }
    }
    if ids.is_empty() {
        ids.push(SEP_ID);
    }
    ids.truncate(config.max_len);
    ids
}

enum Segment<'a> {
    Sep,
    Text(&'a str),
}

/// Splits lowercased text around literal `[sep]` occurrences.
struct SegmentBySep<'a> {
    rest: &'a str,
    pending_sep: bool,
}

impl<'a> SegmentBySep<'a> {
    fn new(text: &'a str) -> Self {
        SegmentBySep {
            rest: text,
            pending_sep: false,
        }
    }
}

impl<'a> Iterator for SegmentBySep<'a> {
    type Item = Segment<'a>;

    fn next(&mut self) -> Option<Segment<'a>> {
        if self.pending_sep {
            self.pending_sep = false;
            return Some(Segment::Sep);
        }
        if self.rest.is_empty() {
            return None;
        }
        match self.rest.find(SEP_TOKEN) {
            Some(0) => {
                self.rest = &self.rest[SEP_TOKEN.len()..];
                Some(Segment::Sep)
            }
            Some(pos) => {
                let (head, tail) = self.rest.split_at(pos);
                self.rest = &tail[SEP_TOKEN.len()..];
                self.pending_sep = true;
                Some(Segment::Text(head))
            }
            None => {
                let head = self.rest;
                self.rest = "";
                Some(Segment::Text(head))
            }
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// The full parameter set of one encoder, keyed by stable path strings.
#[derive(Debug, Clone)]
pub struct BaseParameters {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl BaseParameters {
    /// Fresh seeded initialization: Gaussian weights (std 0.02), zero
    /// biases and shifts, unit norm scales. Starts frozen.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let d = config.d_model;
        let ones = |n: usize| Tensor::new(vec![1.0; n], vec![n]).expect("positive dim");
        // Insertion below follows one fixed textual order, so a given seed
        // always produces the same weights regardless of map semantics.
        tensors.insert(
            "embeddings.token".into(),
            Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng)?,
        );
        tensors.insert(
            "embeddings.position".into(),
            Tensor::randn(vec![config.max_len, d], INIT_STD, &mut rng)?,
        );
        tensors.insert("embeddings.ln.scale".into(), ones(d));
        tensors.insert("embeddings.ln.shift".into(), Tensor::zeros(vec![d])?);
        for i in 0..config.n_layers {
            let p = |name: &str| format!("layer.{i}.{name}");
            for w in ["wq", "wk", "wv", "wo"] {
                tensors.insert(
                    p(&format!("attention.{w}")),
                    Tensor::randn(vec![d, d], INIT_STD, &mut rng)?,
                );
            }
            for b in ["bq", "bk", "bv", "bo"] {
                tensors.insert(p(&format!("attention.{b}")), Tensor::zeros(vec![d])?);
            }
            tensors.insert(p("attention.ln.scale"), ones(d));
            tensors.insert(p("attention.ln.shift"), Tensor::zeros(vec![d])?);
            tensors.insert(
                p("ff.w1"),
                Tensor::randn(vec![d, config.d_ff], INIT_STD, &mut rng)?,
            );
            tensors.insert(p("ff.b1"), Tensor::zeros(vec![config.d_ff])?);
            tensors.insert(
                p("ff.w2"),
                Tensor::randn(vec![config.d_ff, d], INIT_STD, &mut rng)?,
            );
            tensors.insert(p("ff.b2"), Tensor::zeros(vec![d])?);
            tensors.insert(p("ff.ln.scale"), ones(d));
            tensors.insert(p("ff.ln.shift"), Tensor::zeros(vec![d])?);
        }
        let mut params = BaseParameters {
            config: config.clone(),
            tensors,
            frozen: true,
        };
        params.set_frozen(true);
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen parameters never receive gradients; unfreezing marks every
    /// tensor trainable (full fine-tune mode).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for tensor in self.tensors.values_mut() {
            tensor.set_requires_grad(!frozen);
        }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn tensor(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    /// Every expected path present with the expected shape, nothing extra.
    pub fn validate_shapes(&self) -> Result<(), EncoderError> {
        let expected = self.config.parameter_shapes();
        for (path, shape) in &expected {
            match self.tensors.get(path) {
                None => return Err(EncoderError::MissingParameter(path.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(EncoderError::ParameterShape {
                        path: path.clone(),
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(EncoderError::UnexpectedParameter(extra.clone()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("base"));
        meta.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        meta.insert("frozen".into(), json!(self.frozen));
        Checkpoint::new(meta, self.tensors.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        match ckpt.meta_str("kind") {
            Some("base") => {}
            other => {
                return Err(EncoderError::Config(format!(
                    "checkpoint kind {:?} is not a base encoder",
                    other
                )))
            }
        }
        let config: EncoderConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| EncoderError::Config("checkpoint missing config".into()))?,
        )
        .map_err(|e| EncoderError::Config(format!("bad checkpoint config: {e}")))?;
        config.validate()?;
        let frozen = ckpt
            .meta
            .get("frozen")
            .and_then(Value::as_bool)
            .unwrap_or(true);
        let mut params = BaseParameters {
            config,
            tensors: ckpt.tensors.clone(),
            frozen,
        };
        params.validate_shapes()?;
        params.set_frozen(frozen);
        Ok(params)
    }
}

// ── Adapter attachment ──────────────────────────────────────────────────

/// Where in a transformer layer an adapter transformation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookSite {
    /// On the attention output, before its residual add and norm.
    PostAttention,
    /// On the feed-forward output, before its residual add and norm.
    PostFeedForward,
}

/// Trainable module attached to a frozen encoder.
///
/// `adapt` may transform each sublayer output in place of the identity;
/// `finish` sees all per-layer hidden states and may replace the final one
/// (how side networks merge back in). Both default to pass-through.
pub trait LayerAdapter {
    /// Trainable tensors, path-keyed; bound onto the tape each forward.
    fn parameters(&self) -> &BTreeMap<String, Tensor>;

    /// Check this adapter was built for the given encoder geometry.
    fn validate_for(&self, config: &EncoderConfig) -> Result<(), String>;

    fn adapt(
        &self,
        _tape: &mut Tape,
        _vars: &BTreeMap<String, Var>,
        _layer: usize,
        _site: HookSite,
        hidden: Var,
    ) -> Result<Var, EncoderError> {
        Ok(hidden)
    }

    fn finish(
        &self,
        _tape: &mut Tape,
        _vars: &BTreeMap<String, Var>,
        _mask: Option<Var>,
        _layer_outputs: &[Var],
        final_hidden: Var,
    ) -> Result<Var, EncoderError> {
        Ok(final_hidden)
    }
}

// ── Embeddings ──────────────────────────────────────────────────────────

/// One pooled sentence vector.
#[derive(Debug, Clone)]
pub struct SentenceEmbedding {
    pub vector: Tensor,
    pub source_id: String,
}

/// A gradient-recording batch forward: pooled vars plus the parameter
/// bindings needed to read gradients back out by path.
pub struct TracedBatch {
    /// One pooled `[d_model]` var per input sequence, input order.
    pub embeddings: Vec<Var>,
    pub base_vars: BTreeMap<String, Var>,
    pub adapter_vars: BTreeMap<String, Var>,
}

/// Validated pairing of base parameters with an optional adapter.
///
/// Construction checks all shapes and geometry so `encode` itself cannot
/// fail on configuration, only on malformed token sequences.
pub struct Encoder<'a> {
    base: &'a BaseParameters,
    adapter: Option<&'a dyn LayerAdapter>,
}

impl<'a> Encoder<'a> {
    pub fn new(base: &'a BaseParameters) -> Result<Self, EncoderError> {
        base.config.validate()?;
        base.validate_shapes()?;
        Ok(Encoder {
            base,
            adapter: None,
        })
    }

    pub fn with_adapter(
        base: &'a BaseParameters,
        adapter: &'a dyn LayerAdapter,
    ) -> Result<Self, EncoderError> {
        let mut encoder = Encoder::new(base)?;
        adapter
            .validate_for(&base.config)
            .map_err(EncoderError::AdapterGeometry)?;
        encoder.adapter = Some(adapter);
        Ok(encoder)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.base.config
    }

    /// Tokenize and embed a batch of texts on a throwaway tape.
    pub fn encode(&self, texts: &[String]) -> Result<Vec<SentenceEmbedding>, EncoderError> {
        let ids: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| tokenize(t, &self.base.config))
            .collect();
        let mut tape = Tape::new();
        let traced = self.encode_traced(&mut tape, &ids)?;
        traced
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, &var)| {
                Ok(SentenceEmbedding {
                    vector: tape.to_tensor(var),
                    source_id: i.to_string(),
                })
            })
            .collect()
    }

    /// Run the batch on a caller-supplied tape so a loss can be stacked on
    /// top. Parameters are bound once and shared by every sequence, which
    /// is what accumulates their gradients across the batch.
    pub fn encode_traced(
        &self,
        tape: &mut Tape,
        ids_batch: &[Vec<usize>],
    ) -> Result<TracedBatch, EncoderError> {
        self.encode_traced_impl(tape, ids_batch, None)
    }

    /// Like `encode_traced`, but one named parameter (base or adapter) is
    /// taken from an existing tape var instead of being bound from the
    /// stored tensor. This is how gradient checks drive the whole encoder
    /// as a function of a single parameter.
    pub fn encode_traced_with_override(
        &self,
        tape: &mut Tape,
        ids_batch: &[Vec<usize>],
        path: &str,
        var: Var,
    ) -> Result<TracedBatch, EncoderError> {
        self.encode_traced_impl(tape, ids_batch, Some((path, var)))
    }

    fn encode_traced_impl(
        &self,
        tape: &mut Tape,
        ids_batch: &[Vec<usize>],
        override_param: Option<(&str, Var)>,
    ) -> Result<TracedBatch, EncoderError> {
        let bind = |tape: &mut Tape,
                    path: &str,
                    tensor: &Tensor,
                    used: &mut bool|
         -> Result<Var, EncoderError> {
            match override_param {
                Some((p, v)) if p == path => {
                    if tape.shape(v) != tensor.shape() {
                        return Err(EncoderError::ParameterShape {
                            path: path.to_string(),
                            expected: tensor.shape().to_vec(),
                            actual: tape.shape(v).to_vec(),
                        });
                    }
                    *used = true;
                    Ok(v)
                }
                _ => Ok(tape.leaf(tensor)?),
            }
        };

        let mut used = false;
        let mut base_vars = BTreeMap::new();
        for (path, tensor) in &self.base.tensors {
            let v = bind(tape, path, tensor, &mut used)?;
            base_vars.insert(path.clone(), v);
        }
        let mut adapter_vars = BTreeMap::new();
        if let Some(adapter) = self.adapter {
            for (path, tensor) in adapter.parameters() {
                let v = bind(tape, path, tensor, &mut used)?;
                adapter_vars.insert(path.clone(), v);
            }
        }
        if let Some((p, _)) = override_param {
            if !used {
                return Err(EncoderError::MissingParameter(p.to_string()));
            }
        }
        let mut embeddings = Vec::with_capacity(ids_batch.len());
        for ids in ids_batch {
            embeddings.push(self.forward_sequence(tape, &base_vars, &adapter_vars, ids)?);
        }
        Ok(TracedBatch {
            embeddings,
            base_vars,
            adapter_vars,
        })
    }

    fn forward_sequence(
        &self,
        tape: &mut Tape,
        base: &BTreeMap<String, Var>,
        adapter_vars: &BTreeMap<String, Var>,
        ids: &[usize],
    ) -> Result<Var, EncoderError> {
        let config = &self.base.config;
        let real_len = validate_ids(ids, config)?;
        let seq = ids.len();

        let var = |path: &str| -> Result<Var, EncoderError> {
            base.get(path)
                .copied()
                .ok_or_else(|| EncoderError::MissingParameter(path.to_string()))
        };

        let tok = tape.embed_lookup(var("embeddings.token")?, ids)?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.embed_lookup(var("embeddings.position")?, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = ln_affine(
            tape,
            x,
            var("embeddings.ln.scale")?,
            var("embeddings.ln.shift")?,
        )?;

        // Additive key mask: padded positions score MASK_PENALTY, which
        // underflows to weight zero after softmax.
        let mask = if real_len < seq {
            let penalties: Vec<f64> = (0..seq)
                .map(|j| if j < real_len { 0.0 } else { MASK_PENALTY })
                .collect();
            Some(tape.constant(penalties, vec![seq])?)
        } else {
            None
        };

        let mut layer_outputs = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            x = self.forward_layer(tape, base, adapter_vars, layer, x, mask)?;
            layer_outputs.push(x);
        }

        if let Some(adapter) = self.adapter {
            x = adapter.finish(tape, adapter_vars, mask, &layer_outputs, x)?;
        }

        // Pooling as a selector-row matmul keeps it on the tape.
        let weights: Vec<f64> = match config.pooling {
            Pooling::Cls => (0..seq).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
            Pooling::Mean => (0..seq)
                .map(|j| if j < real_len { 1.0 / real_len as f64 } else { 0.0 })
                .collect(),
        };
        let selector = tape.constant(weights, vec![1, seq])?;
        let pooled = tape.matmul(selector, x)?;
        Ok(tape.reshape(pooled, vec![config.d_model])?)
    }

    fn forward_layer(
        &self,
        tape: &mut Tape,
        base: &BTreeMap<String, Var>,
        adapter_vars: &BTreeMap<String, Var>,
        layer: usize,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var, EncoderError> {
        let config = &self.base.config;
        let var = |name: &str| -> Result<Var, EncoderError> {
            let path = format!("layer.{layer}.{name}");
            base.get(&path)
                .copied()
                .ok_or(EncoderError::MissingParameter(path))
        };

        let attn = multi_head_attention(
            tape,
            x,
            AttentionWeights {
                wq: var("attention.wq")?,
                bq: var("attention.bq")?,
                wk: var("attention.wk")?,
                bk: var("attention.bk")?,
                wv: var("attention.wv")?,
                bv: var("attention.bv")?,
                wo: var("attention.wo")?,
                bo: var("attention.bo")?,
            },
            config.n_heads,
            mask,
        )?;
        let attn = match self.adapter {
            Some(a) => a.adapt(tape, adapter_vars, layer, HookSite::PostAttention, attn)?,
            None => attn,
        };
        let x = {
            let sum = tape.add(x, attn)?;
            ln_affine(
                tape,
                sum,
                var("attention.ln.scale")?,
                var("attention.ln.shift")?,
            )?
        };

        let ff = ff_block(
            tape,
            x,
            var("ff.w1")?,
            var("ff.b1")?,
            var("ff.w2")?,
            var("ff.b2")?,
        )?;
        let ff = match self.adapter {
            Some(a) => a.adapt(tape, adapter_vars, layer, HookSite::PostFeedForward, ff)?,
            None => ff,
        };
        let sum = tape.add(x, ff)?;
        ln_affine(tape, sum, var("ff.ln.scale")?, var("ff.ln.shift")?)
    }
}

pub(crate) struct AttentionWeights {
    pub(crate) wq: Var,
    pub(crate) bq: Var,
    pub(crate) wk: Var,
    pub(crate) bk: Var,
    pub(crate) wv: Var,
    pub(crate) bv: Var,
    pub(crate) wo: Var,
    pub(crate) bo: Var,
}

/// Bidirectional scaled dot-product attention over `[seq, d]`, with an
/// optional additive key mask of shape `[seq]`. Shared by the base encoder
/// and side-network adapter layers.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    w: AttentionWeights,
    n_heads: usize,
    mask: Option<Var>,
) -> Result<Var, EncoderError> {
    let d = *tape.shape(x).last().expect("shapes are non-empty");
    let dh = d / n_heads;
    let q = {
        let p = tape.matmul(x, w.wq)?;
        tape.add(p, w.bq)?
    };
    let k = {
        let p = tape.matmul(x, w.wk)?;
        tape.add(p, w.bk)?
    };
    let v = {
        let p = tape.matmul(x, w.wv)?;
        tape.add(p, w.bv)?
    };
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_lastdim(q, h * dh, dh)?;
        let kh = tape.slice_lastdim(k, h * dh, dh)?;
        let vh = tape.slice_lastdim(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let concat = tape.concat_lastdim(&heads)?;
    let out = tape.matmul(concat, w.wo)?;
    Ok(tape.add(out, w.bo)?)
}

/// Position-wise feed-forward: `gelu(x W1 + b1) W2 + b2`.
pub(crate) fn ff_block(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, EncoderError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, w2)?;
    Ok(tape.add(h, b2)?)
}

/// Layer norm followed by learned elementwise scale and shift.
pub(crate) fn ln_affine(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    shift: Var,
) -> Result<Var, EncoderError> {
    let normed = tape.layernorm_lastdim(x)?;
    let scaled = tape.mul(normed, scale)?;
    Ok(tape.add(scaled, shift)?)
}

fn validate_ids(ids: &[usize], config: &EncoderConfig) -> Result<usize, EncoderError> {
    if ids.is_empty() {
        return Err(EncoderError::BadSequence("empty token sequence".into()));
    }
    if ids.len() > config.max_len {
        return Err(EncoderError::BadSequence(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(EncoderError::BadSequence(format!(
            "token id {bad} outside vocab of {}",
            config.vocab_size
        )));
    }
    let real_len = ids.iter().take_while(|&&id| id != PAD_ID).count();
    if real_len == 0 {
        return Err(EncoderError::BadSequence(
            "sequence starts with padding".into(),
        ));
    }
    if ids[real_len..].iter().any(|&id| id != PAD_ID) {
        return Err(EncoderError::BadSequence(
            "padding may only appear as a trailing run".into(),
        ));
    }
    Ok(real_len)
}
