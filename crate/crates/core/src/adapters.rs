//! Trainable adapter modules over a frozen encoder.
//!
//! Three shapes are supported. Bottleneck adapters (the houlsby and
//! pfeiffer kinds) insert a down-project / nonlinearity / up-project block
//! with a residual around it into each transformer layer: houlsby after
//! both the attention and feed-forward sublayers, pfeiffer after the
//! feed-forward only. The side-network kind (k_adapter) leaves the base
//! forward untouched and runs its own small transformer stack off selected
//! base hidden states, fused with the final base state at the end.
//!
//! All adapters are identity-initialized: up-projections (and the fusion's
//! adapter half) start at exactly zero, so an injected model reproduces the
//! base model until training moves the weights.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{
    ff_block, ln_affine, multi_head_attention, AttentionWeights, BaseParameters, Encoder,
    EncoderConfig, EncoderError, HookSite, LayerAdapter,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter config: {0}")]
    Config(String),
    #[error("adapter/encoder geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Houlsby,
    Pfeiffer,
    KAdapter,
}

impl AdapterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::Houlsby => "houlsby",
            AdapterKind::Pfeiffer => "pfeiffer",
            AdapterKind::KAdapter => "k_adapter",
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    AfterAttentionAndFf,
    AfterFfOnly,
}

/// Geometry of one bottleneck block, shared by every insertion point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub bottleneck_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub insertion: Insertion,
}

impl BottleneckConfig {
    /// Conventional geometry for a kind: bottleneck at `d_model / 8`
    /// (at least 1), gelu, insertion sites fixed by the kind.
    pub fn default_for(kind: AdapterKind, encoder: &EncoderConfig) -> Result<Self, AdapterError> {
        let insertion = match kind {
            AdapterKind::Houlsby => Insertion::AfterAttentionAndFf,
            AdapterKind::Pfeiffer => Insertion::AfterFfOnly,
            AdapterKind::KAdapter => {
                return Err(AdapterError::Config(
                    "k_adapter does not take a bottleneck config".into(),
                ))
            }
        };
        Ok(BottleneckConfig {
            bottleneck_dim: (encoder.d_model / 8).max(1),
            nonlinearity: Nonlinearity::Gelu,
            insertion,
        })
    }

    pub fn validate(&self, kind: AdapterKind, encoder: &EncoderConfig) -> Result<(), AdapterError> {
        if self.bottleneck_dim == 0 {
            return Err(AdapterError::Config("bottleneck_dim must be positive".into()));
        }
        if self.bottleneck_dim >= encoder.d_model {
            return Err(AdapterError::Config(format!(
                "bottleneck_dim {} must be smaller than d_model {}",
                self.bottleneck_dim, encoder.d_model
            )));
        }
        match (kind, self.insertion) {
            (AdapterKind::Houlsby, Insertion::AfterAttentionAndFf) => Ok(()),
            (AdapterKind::Pfeiffer, Insertion::AfterFfOnly) => Ok(()),
            (AdapterKind::KAdapter, _) => Err(AdapterError::Config(
                "k_adapter does not take a bottleneck config".into(),
            )),
            (kind, insertion) => Err(AdapterError::Config(format!(
                "{kind} requires its canonical insertion sites, got {insertion:?}"
            ))),
        }
    }

    fn sites(&self) -> &'static [&'static str] {
        match self.insertion {
            Insertion::AfterAttentionAndFf => &["attn", "ff"],
            Insertion::AfterFfOnly => &["ff"],
        }
    }
}

/// Geometry of the side network: `k` adapter layers, each holding
/// `n_transformer_layers` transformer layers between two projections with a
/// skip connection across the whole block. Layer `i` reads the base hidden
/// state after base layer `injection_points[i]`.
///
/// The internal transformer layers run at `adapter_d_model` width with the
/// encoder's head count and a feed-forward width of `4 * adapter_d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAdapterConfig {
    pub k: usize,
    pub n_transformer_layers: usize,
    pub injection_points: Vec<usize>,
    pub adapter_d_model: usize,
}

impl KAdapterConfig {
    /// Conventional geometry: three adapter layers (fewer on shallow
    /// encoders) of two transformer layers each, injection points spread
    /// evenly, side width equal to the base width.
    pub fn default_for(encoder: &EncoderConfig) -> Self {
        let k = encoder.n_layers.min(3);
        let injection_points = (0..k)
            .map(|i| ((i + 1) * encoder.n_layers) / k - 1)
            .collect();
        KAdapterConfig {
            k,
            n_transformer_layers: 2,
            injection_points,
            adapter_d_model: encoder.d_model,
        }
    }

    pub fn inner_d_ff(&self) -> usize {
        4 * self.adapter_d_model
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<(), AdapterError> {
        if self.k == 0 || self.n_transformer_layers == 0 || self.adapter_d_model == 0 {
            return Err(AdapterError::Config(
                "k, n_transformer_layers, adapter_d_model must all be positive".into(),
            ));
        }
        if self.injection_points.len() != self.k {
            return Err(AdapterError::Config(format!(
                "expected {} injection points, got {}",
                self.k,
                self.injection_points.len()
            )));
        }
        if !self.injection_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(AdapterError::Config(
                "injection_points must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = self
            .injection_points
            .iter()
            .find(|&&p| p >= encoder.n_layers)
        {
            return Err(AdapterError::Config(format!(
                "injection point {bad} outside encoder depth {}",
                encoder.n_layers
            )));
        }
        if !self.adapter_d_model.is_multiple_of(encoder.n_heads) {
            return Err(AdapterError::Config(format!(
                "adapter_d_model {} must be divisible by the encoder head count {}",
                self.adapter_d_model, encoder.n_heads
            )));
        }
        Ok(())
    }
}

/// Kind-specific geometry, serialized into adapter checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterConfig {
    Bottleneck(BottleneckConfig),
    KAdapter(KAdapterConfig),
}

impl AdapterConfig {
    fn to_json(&self) -> Value {
        match self {
            AdapterConfig::Bottleneck(c) => serde_json::to_value(c).expect("config serializes"),
            AdapterConfig::KAdapter(c) => serde_json::to_value(c).expect("config serializes"),
        }
    }
}

/// The trainable parameter set Φ of one adapter, plus its identity.
#[derive(Debug, Clone)]
pub struct AdapterParameters {
    kind: AdapterKind,
    domain_label: String,
    config: AdapterConfig,
    /// Geometry of the encoder this adapter was built for.
    encoder: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Deterministically build a fresh adapter for an encoder geometry.
///
/// Up-projections and the fusion's adapter half start at exactly zero, so
/// injecting a fresh adapter reproduces the base model's outputs; the
/// remaining weights draw from a seeded Gaussian (std 0.02).
pub fn build_adapter(
    kind: AdapterKind,
    encoder: &EncoderConfig,
    config: AdapterConfig,
    domain_label: &str,
    seed: u64,
) -> Result<AdapterParameters, AdapterError> {
    encoder
        .validate()
        .map_err(|e| AdapterError::Geometry(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    match (&config, kind) {
        (AdapterConfig::Bottleneck(c), AdapterKind::Houlsby | AdapterKind::Pfeiffer) => {
            c.validate(kind, encoder)?;
            let d = encoder.d_model;
            let b = c.bottleneck_dim;
            for layer in 0..encoder.n_layers {
                for site in c.sites() {
                    let p = |name: &str| format!("adapter.layer.{layer}.{site}.{name}");
                    tensors.insert(
                        p("down.weight"),
                        Tensor::randn(vec![d, b], INIT_STD, &mut rng)?,
                    );
                    tensors.insert(p("down.bias"), Tensor::zeros(vec![b])?);
                    tensors.insert(p("up.weight"), Tensor::zeros(vec![b, d])?);
                    tensors.insert(p("up.bias"), Tensor::zeros(vec![d])?);
                }
            }
        }
        (AdapterConfig::KAdapter(c), AdapterKind::KAdapter) => {
            c.validate(encoder)?;
            let d = encoder.d_model;
            let a = c.adapter_d_model;
            let a_ff = c.inner_d_ff();
            let ones = |n: usize| Tensor::new(vec![1.0; n], vec![n]).expect("positive dim");
            for i in 0..c.k {
                let kp = |name: &str| format!("adapter.klayer.{i}.{name}");
                tensors.insert(
                    kp("proj_in.weight"),
                    Tensor::randn(vec![d, a], INIT_STD, &mut rng)?,
                );
                tensors.insert(kp("proj_in.bias"), Tensor::zeros(vec![a])?);
                for j in 0..c.n_transformer_layers {
                    let p = |name: &str| format!("adapter.klayer.{i}.tlayer.{j}.{name}");
                    for w in ["wq", "wk", "wv", "wo"] {
                        tensors.insert(
                            p(&format!("attention.{w}")),
                            Tensor::randn(vec![a, a], INIT_STD, &mut rng)?,
                        );
                    }
                    for bias in ["bq", "bk", "bv", "bo"] {
                        tensors.insert(p(&format!("attention.{bias}")), Tensor::zeros(vec![a])?);
                    }
                    tensors.insert(p("attention.ln.scale"), ones(a));
                    tensors.insert(p("attention.ln.shift"), Tensor::zeros(vec![a])?);
                    tensors.insert(
                        p("ff.w1"),
                        Tensor::randn(vec![a, a_ff], INIT_STD, &mut rng)?,
                    );
                    tensors.insert(p("ff.b1"), Tensor::zeros(vec![a_ff])?);
                    tensors.insert(
                        p("ff.w2"),
                        Tensor::randn(vec![a_ff, a], INIT_STD, &mut rng)?,
                    );
                    tensors.insert(p("ff.b2"), Tensor::zeros(vec![a])?);
                    tensors.insert(p("ff.ln.scale"), ones(a));
                    tensors.insert(p("ff.ln.shift"), Tensor::zeros(vec![a])?);
                }
                tensors.insert(
                    kp("proj_out.weight"),
                    Tensor::randn(vec![a, d], INIT_STD, &mut rng)?,
                );
                tensors.insert(kp("proj_out.bias"), Tensor::zeros(vec![d])?);
            }
            // Fusion starts as a projection onto the base half of the
            // concatenation: output == base hidden state exactly.
            let mut fusion = vec![0.0; 2 * d * d];
            for j in 0..d {
                fusion[j * d + j] = 1.0;
            }
            tensors.insert(
                "adapter.fusion.weight".into(),
                Tensor::new(fusion, vec![2 * d, d])?,
            );
            tensors.insert("adapter.fusion.bias".into(), Tensor::zeros(vec![d])?);
        }
        (AdapterConfig::Bottleneck(_), AdapterKind::KAdapter) => {
            return Err(AdapterError::Config(
                "k_adapter requires a KAdapterConfig".into(),
            ))
        }
        (AdapterConfig::KAdapter(_), kind) => {
            return Err(AdapterError::Config(format!(
                "{kind} requires a BottleneckConfig"
            )))
        }
    }
    for tensor in tensors.values_mut() {
        tensor.set_requires_grad(true);
    }
    Ok(AdapterParameters {
        kind,
        domain_label: domain_label.to_string(),
        config,
        encoder: encoder.clone(),
        tensors,
    })
}

/// Compose a frozen base with an adapter into one validated forward pass.
pub fn inject<'a>(
    base: &'a BaseParameters,
    adapter: &'a AdapterParameters,
) -> Result<Encoder<'a>, EncoderError> {
    Encoder::with_adapter(base, adapter)
}

impl AdapterParameters {
    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn domain_label(&self) -> &str {
        &self.domain_label
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    /// Geometry of the encoder this adapter was built for.
    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
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

    /// Only Φ goes into the file; the base travels separately and any base
    /// checkpoint with matching geometry can host this adapter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("adapter"));
        meta.insert("adapter_kind".into(), json!(self.kind));
        meta.insert("domain_label".into(), json!(self.domain_label));
        meta.insert("config".into(), self.config.to_json());
        meta.insert(
            "encoder_config".into(),
            serde_json::to_value(&self.encoder).expect("config serializes"),
        );
        Checkpoint::new(meta, self.tensors.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AdapterError> {
        match ckpt.meta_str("kind") {
            Some("adapter") => {}
            other => {
                return Err(AdapterError::Config(format!(
                    "checkpoint kind {other:?} is not an adapter"
                )))
            }
        }
        let kind: AdapterKind = serde_json::from_value(
            ckpt.meta
                .get("adapter_kind")
                .cloned()
                .ok_or_else(|| AdapterError::Config("checkpoint missing adapter_kind".into()))?,
        )
        .map_err(|e| AdapterError::Config(format!("bad adapter_kind: {e}")))?;
        let domain_label = ckpt
            .meta_str("domain_label")
            .ok_or_else(|| AdapterError::Config("checkpoint missing domain_label".into()))?
            .to_string();
        let config_json = ckpt
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| AdapterError::Config("checkpoint missing config".into()))?;
        let config = match kind {
            AdapterKind::Houlsby | AdapterKind::Pfeiffer => AdapterConfig::Bottleneck(
                serde_json::from_value(config_json)
                    .map_err(|e| AdapterError::Config(format!("bad bottleneck config: {e}")))?,
            ),
            AdapterKind::KAdapter => AdapterConfig::KAdapter(
                serde_json::from_value(config_json)
                    .map_err(|e| AdapterError::Config(format!("bad side-network config: {e}")))?,
            ),
        };
        let encoder: EncoderConfig = serde_json::from_value(
            ckpt.meta
                .get("encoder_config")
                .cloned()
                .ok_or_else(|| AdapterError::Config("checkpoint missing encoder_config".into()))?,
        )
        .map_err(|e| AdapterError::Config(format!("bad encoder_config: {e}")))?;
        let mut tensors = ckpt.tensors.clone();
        for tensor in tensors.values_mut() {
            tensor.set_requires_grad(true);
        }
        let params = AdapterParameters {
            kind,
            domain_label,
            config,
            encoder,
            tensors,
        };
        params
            .validate_geometry(&params.encoder.clone())
            .map_err(AdapterError::Geometry)?;
        Ok(params)
    }

    /// Structural check against an encoder geometry: config invariants,
    /// expected paths, expected shapes.
    fn validate_geometry(&self, encoder: &EncoderConfig) -> Result<(), String> {
        let stringify = |e: AdapterError| e.to_string();
        match (&self.config, self.kind) {
            (AdapterConfig::Bottleneck(c), AdapterKind::Houlsby | AdapterKind::Pfeiffer) => {
                c.validate(self.kind, encoder).map_err(stringify)?
            }
            (AdapterConfig::KAdapter(c), AdapterKind::KAdapter) => {
                c.validate(encoder).map_err(stringify)?
            }
            _ => return Err(format!("config does not match adapter kind {}", self.kind)),
        }
        if self.encoder != *encoder {
            return Err(format!(
                "adapter was built for a different encoder geometry ({:?} vs {:?})",
                self.encoder, encoder
            ));
        }
        let reference = build_adapter(self.kind, encoder, self.config.clone(), "probe", 0)
            .map_err(stringify)?;
        for (path, tensor) in &reference.tensors {
            match self.tensors.get(path) {
                None => return Err(format!("missing adapter parameter '{path}'")),
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(format!(
                        "adapter parameter '{path}' has shape {:?}, expected {:?}",
                        t.shape(),
                        tensor.shape()
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !reference.tensors.contains_key(*k))
        {
            return Err(format!("unexpected adapter parameter '{extra}'"));
        }
        Ok(())
    }

    fn var(vars: &BTreeMap<String, Var>, path: &str) -> Result<Var, EncoderError> {
        vars.get(path)
            .copied()
            .ok_or_else(|| EncoderError::MissingParameter(path.to_string()))
    }

    fn bottleneck_block(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        prefix: &str,
        nonlinearity: Nonlinearity,
        hidden: Var,
    ) -> Result<Var, EncoderError> {
        let v = |name: &str| Self::var(vars, &format!("{prefix}.{name}"));
        let h = tape.matmul(hidden, v("down.weight")?)?;
        let h = tape.add(h, v("down.bias")?)?;
        let h = match nonlinearity {
            Nonlinearity::Relu => tape.relu(h)?,
            Nonlinearity::Gelu => tape.gelu(h)?,
        };
        let h = tape.matmul(h, v("up.weight")?)?;
        let h = tape.add(h, v("up.bias")?)?;
        Ok(tape.add(hidden, h)?)
    }

    fn side_network(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        config: &KAdapterConfig,
        mask: Option<Var>,
        layer_outputs: &[Var],
        final_hidden: Var,
    ) -> Result<Var, EncoderError> {
        let mut prev: Option<Var> = None;
        for (i, &inj) in config.injection_points.iter().enumerate() {
            let base_hidden = layer_outputs[inj];
            let input = match prev {
                Some(p) => tape.add(base_hidden, p)?,
                None => base_hidden,
            };
            let kp = |name: &str| format!("adapter.klayer.{i}.{name}");
            let mut x = {
                let h = tape.matmul(input, Self::var(vars, &kp("proj_in.weight"))?)?;
                tape.add(h, Self::var(vars, &kp("proj_in.bias"))?)?
            };
            for j in 0..config.n_transformer_layers {
                let p = |name: &str| format!("adapter.klayer.{i}.tlayer.{j}.{name}");
                let v = |name: &str| Self::var(vars, &p(name));
                let attn = multi_head_attention(
                    tape,
                    x,
                    AttentionWeights {
                        wq: v("attention.wq")?,
                        bq: v("attention.bq")?,
                        wk: v("attention.wk")?,
                        bk: v("attention.bk")?,
                        wv: v("attention.wv")?,
                        bv: v("attention.bv")?,
                        wo: v("attention.wo")?,
                        bo: v("attention.bo")?,
                    },
                    self.encoder.n_heads,
                    mask,
                )?;
                let sum = tape.add(x, attn)?;
                x = ln_affine(
                    tape,
                    sum,
                    v("attention.ln.scale")?,
                    v("attention.ln.shift")?,
                )?;
                let ff = ff_block(tape, x, v("ff.w1")?, v("ff.b1")?, v("ff.w2")?, v("ff.b2")?)?;
                let sum = tape.add(x, ff)?;
                x = ln_affine(tape, sum, v("ff.ln.scale")?, v("ff.ln.shift")?)?;
            }
            let out = {
                let h = tape.matmul(x, Self::var(vars, &kp("proj_out.weight"))?)?;
                tape.add(h, Self::var(vars, &kp("proj_out.bias"))?)?
            };
            // Skip connection across the whole adapter layer.
            prev = Some(tape.add(out, input)?);
        }
        let adapter_last = prev.expect("validated k >= 1");
        let cat = tape.concat_lastdim(&[final_hidden, adapter_last])?;
        let fused = tape.matmul(cat, Self::var(vars, "adapter.fusion.weight")?)?;
        Ok(tape.add(fused, Self::var(vars, "adapter.fusion.bias")?)?)
    }
}

impl LayerAdapter for AdapterParameters {
    fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    fn validate_for(&self, config: &EncoderConfig) -> Result<(), String> {
        self.validate_geometry(config)
    }

    fn adapt(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        layer: usize,
        site: HookSite,
        hidden: Var,
    ) -> Result<Var, EncoderError> {
        let AdapterConfig::Bottleneck(config) = &self.config else {
            return Ok(hidden);
        };
        let site_name = match (site, config.insertion) {
            (HookSite::PostAttention, Insertion::AfterAttentionAndFf) => "attn",
            (HookSite::PostFeedForward, _) => "ff",
            (HookSite::PostAttention, Insertion::AfterFfOnly) => return Ok(hidden),
        };
        let prefix = format!("adapter.layer.{layer}.{site_name}");
        self.bottleneck_block(tape, vars, &prefix, config.nonlinearity, hidden)
    }

    fn finish(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        mask: Option<Var>,
        layer_outputs: &[Var],
        final_hidden: Var,
    ) -> Result<Var, EncoderError> {
        let AdapterConfig::KAdapter(config) = &self.config else {
            return Ok(final_hidden);
        };
        self.side_network(tape, vars, config, mask, layer_outputs, final_hidden)
    }
}

// ── Parameter accounting ────────────────────────────────────────────────

/// Exact parameter tally with a per-tensor breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub by_path: BTreeMap<String, usize>,
}

/// Count every element of every tensor in a parameter map.
pub fn count_parameters(tensors: &BTreeMap<String, Tensor>) -> ParameterCount {
    let by_path: BTreeMap<String, usize> = tensors
        .iter()
        .map(|(path, t)| (path.clone(), t.numel()))
        .collect();
    ParameterCount {
        total: by_path.values().sum(),
        by_path,
    }
}

/// Fraction of trainable (adapter) parameters relative to a base size.
pub fn trainable_ratio(adapter_count: usize, base_count: usize) -> f64 {
    adapter_count as f64 / base_count as f64
}

/// Closed-form size of a bottleneck adapter build: per block
/// `(d*b + b) + (b*d + d)`, times sites per layer, times layers.
pub fn bottleneck_parameter_count(encoder: &EncoderConfig, config: &BottleneckConfig) -> usize {
    let d = encoder.d_model;
    let b = config.bottleneck_dim;
    let per_block = (d * b + b) + (b * d + d);
    let sites = match config.insertion {
        Insertion::AfterAttentionAndFf => 2,
        Insertion::AfterFfOnly => 1,
    };
    per_block * sites * encoder.n_layers
}

/// Closed-form size of a side-network build: per adapter layer two
/// projections plus N transformer layers at the side width, plus the final
/// fusion dense layer.
pub fn k_adapter_parameter_count(encoder: &EncoderConfig, config: &KAdapterConfig) -> usize {
    let d = encoder.d_model;
    let a = config.adapter_d_model;
    let a_ff = config.inner_d_ff();
    let proj = (d * a + a) + (a * d + d);
    let per_tlayer = 4 * (a * a + a)      // attention projections
        + 2 * a                            // attention layer norm
        + (a * a_ff + a_ff) + (a_ff * a + a) // feed-forward
        + 2 * a; // feed-forward layer norm
    let fusion = 2 * d * d + d;
    config.k * (proj + config.n_transformer_layers * per_tlayer) + fusion
}

/// Conventional trainable-parameter counts for full-size (110M base)
/// encoders with each adapter family's usual configuration. Kept for
/// ordering and scale context only; the configurations behind them are
/// not reproduced here.
pub mod reference {
    pub const BASE_FULL_SIZE: usize = 110_000_000;
    pub const HOULSBY_FULL_SIZE: usize = 4_000_000;
    pub const PFEIFFER_FULL_SIZE: usize = 10_000_000;
    pub const K_ADAPTER_FULL_SIZE: usize = 47_000_000;
}
