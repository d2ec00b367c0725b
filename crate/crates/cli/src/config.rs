//! Run configuration: JSON file sections merged under CLI flags.
//!
//! Precedence is flag > config file > built-in default. Every field in
//! the file is optional; unknown keys are rejected so typos surface as
//! validation errors instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use attune::{
    AdapterConfig, AdapterKind, BottleneckConfig, EncoderConfig, Insertion, KAdapterConfig,
    LossConfig, LossKind, Nonlinearity, Pooling, TrainConfig, TrainMode,
};

use crate::commands::CliError;

pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_DOMAIN_LABEL: &str = "domain";

/// Desk-scale geometry used when no encoder section is supplied.
pub fn default_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 4096,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_len: 48,
        pooling: Pooling::Cls,
    }
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub encoder: Option<EncoderConfig>,
    pub adapter: Option<AdapterSection>,
    pub train: Option<TrainSection>,
    pub paths: Option<PathsSection>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: Option<AdapterKind>,
    pub bottleneck_dim: Option<usize>,
    pub nonlinearity: Option<Nonlinearity>,
    pub insertion: Option<Insertion>,
    pub k: Option<usize>,
    pub n_transformer_layers: Option<usize>,
    pub adapter_d_model: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub margin: Option<f64>,
    pub temperature: Option<f64>,
    pub mode: Option<TrainMode>,
    pub domain_label: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_triplets: Option<PathBuf>,
    pub test_triplets: Option<PathBuf>,
    pub base_in: Option<PathBuf>,
    pub base_out: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("config {} is invalid: {e}", path.display()))
        })
    }
}

/// Flag-level overrides for the train command, all optional.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub margin: Option<f64>,
    pub temperature: Option<f64>,
    pub mode: Option<TrainMode>,
    pub adapter_kind: Option<AdapterKind>,
    pub bottleneck_dim: Option<usize>,
    pub domain_label: Option<String>,
    pub train_triplets: Option<PathBuf>,
    pub test_triplets: Option<PathBuf>,
    pub base_in: Option<PathBuf>,
    pub base_out: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

/// A fully resolved training run: nothing optional left except paths
/// that are genuinely optional for the mode.
///
/// The adapter config is deliberately not built here: when the base
/// comes from a checkpoint its geometry wins over any encoder section,
/// so the adapter must be sized against the loaded config. Call
/// [`build_adapter_config`] once the real geometry is known.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// True when the config file carried an explicit encoder section,
    /// which must then agree with any loaded base checkpoint.
    pub encoder_explicit: bool,
    pub adapter_kind: AdapterKind,
    pub adapter_section: AdapterSection,
    pub flag_bottleneck: Option<usize>,
    pub train: TrainConfig,
    pub train_triplets: PathBuf,
    pub test_triplets: PathBuf,
    pub base_in: Option<PathBuf>,
    pub base_out: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

pub fn resolve(file: RunConfig, flags: TrainOverrides) -> Result<ResolvedRun, CliError> {
    let val = |msg: String| CliError::Validation(msg);

    let seed = flags
        .seed
        .or(file.seed)
        .ok_or_else(|| val("seed is mandatory: pass --seed or set \"seed\" in the config".into()))?;

    let encoder_explicit = file.encoder.is_some();
    let encoder = file.encoder.unwrap_or_else(default_encoder);
    encoder.validate().map_err(|e| val(e.to_string()))?;

    let ft = file.train.unwrap_or_default();
    let mode = flags.mode.or(ft.mode).unwrap_or(TrainMode::AdapterOnly);
    let train = TrainConfig {
        epochs: flags.epochs.or(ft.epochs).unwrap_or(DEFAULT_EPOCHS),
        learning_rate: flags
            .learning_rate
            .or(ft.learning_rate)
            .unwrap_or(DEFAULT_LEARNING_RATE),
        batch_size: flags.batch_size.or(ft.batch_size).unwrap_or(DEFAULT_BATCH_SIZE),
        loss: flags.loss.or(ft.loss).unwrap_or(LossKind::Triplet),
        loss_config: LossConfig {
            margin: flags.margin.or(ft.margin).unwrap_or(DEFAULT_MARGIN),
            temperature: flags
                .temperature
                .or(ft.temperature)
                .unwrap_or(DEFAULT_TEMPERATURE),
        },
        mode,
        seed,
        domain_label: flags
            .domain_label
            .or(ft.domain_label)
            .unwrap_or_else(|| DEFAULT_DOMAIN_LABEL.to_string()),
    };
    train.validate().map_err(|e| val(e.to_string()))?;

    let fa = file.adapter.unwrap_or_default();
    let adapter_kind = flags
        .adapter_kind
        .or(fa.kind)
        .unwrap_or(AdapterKind::Houlsby);

    let fp = file.paths.unwrap_or_default();
    let need = |flag: Option<PathBuf>, file: Option<PathBuf>, what: &str| {
        flag.or(file).ok_or_else(|| {
            val(format!(
                "{what} is required: pass the flag or set it under \"paths\""
            ))
        })
    };
    let train_triplets = need(flags.train_triplets, fp.train_triplets, "--train-triplets")?;
    let test_triplets = need(flags.test_triplets, fp.test_triplets, "--test-triplets")?;
    let checkpoint_out = flags.checkpoint_out.or(fp.checkpoint_out);
    if mode != TrainMode::FrozenEval && checkpoint_out.is_none() {
        return Err(val(
            "--checkpoint-out is required unless mode is frozen_eval".into(),
        ));
    }

    for (path, what) in [
        (Some(&train_triplets), "train triplets"),
        (Some(&test_triplets), "test triplets"),
        (flags.base_in.as_ref().or(fp.base_in.as_ref()), "base checkpoint"),
    ]
    .into_iter()
    .filter_map(|(p, w)| p.map(|p| (p, w)))
    {
        if !path.exists() {
            return Err(val(format!(
                "{what} file {} does not exist",
                path.display()
            )));
        }
    }

    Ok(ResolvedRun {
        seed,
        encoder,
        encoder_explicit,
        adapter_kind,
        adapter_section: fa,
        flag_bottleneck: flags.bottleneck_dim,
        train,
        train_triplets,
        test_triplets,
        base_in: flags.base_in.or(fp.base_in),
        base_out: flags.base_out.or(fp.base_out),
        checkpoint_out,
        report_out: flags.report_out.or(fp.report_out),
    })
}

pub fn build_adapter_config(
    kind: AdapterKind,
    encoder: &EncoderConfig,
    section: &AdapterSection,
    flag_bottleneck: Option<usize>,
) -> Result<AdapterConfig, CliError> {
    let val = |e: attune::AdapterError| CliError::Validation(e.to_string());
    match kind {
        AdapterKind::Houlsby | AdapterKind::Pfeiffer => {
            let defaults = BottleneckConfig::default_for(kind, encoder).map_err(val)?;
            let config = BottleneckConfig {
                bottleneck_dim: flag_bottleneck
                    .or(section.bottleneck_dim)
                    .unwrap_or(defaults.bottleneck_dim),
                nonlinearity: section.nonlinearity.unwrap_or(defaults.nonlinearity),
                insertion: section.insertion.unwrap_or(defaults.insertion),
            };
            config.validate(kind, encoder).map_err(val)?;
            Ok(AdapterConfig::Bottleneck(config))
        }
        AdapterKind::KAdapter => {
            let defaults = KAdapterConfig::default_for(encoder);
            let k = section.k.unwrap_or(defaults.k);
            let config = KAdapterConfig {
                k,
                n_transformer_layers: section
                    .n_transformer_layers
                    .unwrap_or(defaults.n_transformer_layers),
                // Injection points always respread for the chosen k.
                injection_points: (0..k).map(|i| ((i + 1) * encoder.n_layers) / k.max(1) - 1).collect(),
                adapter_d_model: section.adapter_d_model.unwrap_or(defaults.adapter_d_model),
            };
            config.validate(encoder).map_err(val)?;
            Ok(AdapterConfig::KAdapter(config))
        }
    }
}
