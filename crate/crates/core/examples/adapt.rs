//! Minimal end-to-end run: synthesize a citation corpus, train a
//! bottleneck adapter against a frozen base, and compare retrieval
//! scores before and after. Takes roughly half a minute.
//!
//!     cargo run --release -p attune --example adapt

use attune::{
    build_adapter, build_citation_triplets, evaluate, generate_synthetic_corpus, inject, split,
    train, triplets_to_tasks, AdapterConfig, AdapterKind, BaseParameters, BottleneckConfig,
    CorpusProfile, Encoder, EncoderConfig, Insertion, LossConfig, LossKind, Nonlinearity,
    Pooling, TrainConfig, TrainMode, TripletDataset,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 42;
    let corpus = generate_synthetic_corpus(4, 50, &CorpusProfile::default(), seed)?;
    let triplets = build_citation_triplets(&corpus, seed)?;
    let (train_side, test_side) = split(&triplets, 0.9, seed)?;
    println!(
        "corpus: {} docs, {} triplets ({} train / {} test)",
        corpus.len(),
        train_side.len() + test_side.len(),
        train_side.len(),
        test_side.len()
    );
    let dataset = TripletDataset::new("citations".into(), train_side, test_side, seed)?;

    let encoder_config = EncoderConfig {
        vocab_size: 4096,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_len: 48,
        pooling: Pooling::Mean,
    };
    let mut base = BaseParameters::init(&encoder_config, seed)?;
    let mut adapter = build_adapter(
        AdapterKind::Houlsby,
        &encoder_config,
        AdapterConfig::Bottleneck(BottleneckConfig {
            bottleneck_dim: 8,
            nonlinearity: Nonlinearity::Gelu,
            insertion: Insertion::AfterAttentionAndFf,
        }),
        "citations",
        seed,
    )?;

    let config = TrainConfig {
        epochs: 15,
        learning_rate: 3e-2,
        batch_size: 16,
        loss: LossKind::Contrastive,
        loss_config: LossConfig::default(),
        mode: TrainMode::AdapterOnly,
        seed,
        domain_label: "citations".into(),
    };
    let report = train(&mut base, Some(&mut adapter), &dataset, &config, None)?;
    println!(
        "trained {} parameters ({:.2}% of the encoder) for {} epochs, loss {:.4} -> {:.4}",
        report.trainable_parameters,
        100.0 * report.trainable_ratio,
        config.epochs,
        report.epoch_mean_losses.first().unwrap(),
        report.epoch_mean_losses.last().unwrap()
    );

    let tasks = triplets_to_tasks(&dataset.test, 8, seed)?;
    let frozen = Encoder::new(&base)?;
    let adapted = inject(&base, &adapter)?;
    let before = evaluate("out-of-the-box", &frozen, &tasks.tasks)?;
    let after = evaluate("houlsby:citations", &adapted, &tasks.tasks)?;
    println!(
        "retrieval MAP over {} queries: {:.4} frozen -> {:.4} adapted",
        tasks.tasks.len(),
        before.map_score,
        after.map_score
    );
    Ok(())
}
