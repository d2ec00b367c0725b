//! Corpus types, triplet construction, synthetic corpus generation, and
//! train/test splitting.
//!
//! Two triplet sources: citation graphs, where the positive is a directly
//! cited document and the negative is cited by the positive but not by the
//! anchor; and similar-sentence pairs, where the negative is sampled from
//! a text pool excluding the anchor's known-similar partners.
//!
//! On-disk formats are JSON Lines, one record per line, unknown fields
//! ignored, malformed lines reported with their line number.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::SEP_TOKEN;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("pair list is empty")]
    EmptyPairs,
    #[error("document {id}: {message}")]
    CorpusInvariant { id: String, message: String },
    #[error("sentence pair {index}: id_a and id_b are both {id}")]
    SelfPair { index: usize, id: String },
    #[error("{path} line {line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("generator config: {0}")]
    Config(String),
    #[error("split needs at least 2 triplets, got {0}")]
    TooFewTriplets(usize),
    #[error("split needs at least 2 distinct anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("split ratio must be strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("train and test share anchor {0}")]
    AnchorLeak(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A document node in a citation graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub cites: Vec<String>,
}

/// Two texts known to be similar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id_a: String,
    pub id_b: String,
    pub text_a: String,
    pub text_b: String,
}

/// Source ids behind a triplet's three texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

/// One training example: anchor, similar text, dissimilar text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "anchor")]
    pub anchor_text: String,
    #[serde(rename = "positive")]
    pub positive_text: String,
    #[serde(rename = "negative")]
    pub negative_text: String,
    pub provenance: Provenance,
}

/// A domain's triplets split into train and test at anchor granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletDataset {
    pub domain_label: String,
    pub train: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub split_seed: u64,
}

impl TripletDataset {
    /// Both sides non-empty and no anchor id appears on both sides.
    pub fn new(
        domain_label: String,
        train: Vec<Triplet>,
        test: Vec<Triplet>,
        split_seed: u64,
    ) -> Result<Self, DataError> {
        if train.is_empty() || test.is_empty() {
            return Err(DataError::TooFewTriplets(train.len() + test.len()));
        }
        let train_anchors: BTreeSet<&str> = train
            .iter()
            .map(|t| t.provenance.anchor_id.as_str())
            .collect();
        for t in &test {
            if train_anchors.contains(t.provenance.anchor_id.as_str()) {
                return Err(DataError::AnchorLeak(t.provenance.anchor_id.clone()));
            }
        }
        Ok(TripletDataset {
            domain_label,
            train,
            test,
            split_seed,
        })
    }
}

/// The text a document contributes to training: title and abstract joined
/// by the separator token the tokenizer recognizes.
pub fn document_text(doc: &Document) -> String {
    format!("{} {} {}", doc.title, SEP_TOKEN, doc.abstract_text)
}

/// No duplicate ids, no self-citations, every cited id resolves.
pub fn validate_corpus(corpus: &[Document]) -> Result<(), DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut ids = BTreeSet::new();
    for doc in corpus {
        if !ids.insert(doc.id.as_str()) {
            return Err(DataError::CorpusInvariant {
                id: doc.id.clone(),
                message: "duplicate document id".into(),
            });
        }
    }
    for doc in corpus {
        for cited in &doc.cites {
            if cited == &doc.id {
                return Err(DataError::CorpusInvariant {
                    id: doc.id.clone(),
                    message: "document cites itself".into(),
                });
            }
            if !ids.contains(cited.as_str()) {
                return Err(DataError::CorpusInvariant {
                    id: doc.id.clone(),
                    message: format!("cites unknown document {cited}"),
                });
            }
        }
    }
    Ok(())
}

/// Build triplets from a citation graph.
///
/// For each (anchor, directly cited positive) pair, the negative is drawn
/// uniformly from the positive's citations minus the anchor's citations
/// minus the anchor itself; one triplet per pair. Anchors are visited in
/// sorted id order, so output is deterministic under the seed.
pub fn build_citation_triplets(corpus: &[Document], seed: u64) -> Result<Vec<Triplet>, DataError> {
    validate_corpus(corpus)?;
    let by_id: BTreeMap<&str, &Document> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (&anchor_id, &anchor) in &by_id {
        let anchor_cites: BTreeSet<&str> = anchor.cites.iter().map(String::as_str).collect();
        let anchor_text = document_text(anchor);
        for positive_id in &anchor.cites {
            let positive = by_id[positive_id.as_str()];
            let positive_text = document_text(positive);
            if positive_text == anchor_text {
                continue;
            }
            let candidates: Vec<&Document> = positive
                .cites
                .iter()
                .filter(|n| n.as_str() != anchor_id && !anchor_cites.contains(n.as_str()))
                .map(|n| by_id[n.as_str()])
                .filter(|n| {
                    let t = document_text(n);
                    t != anchor_text && t != positive_text
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let negative = candidates[rng.gen_range(0..candidates.len())];
            out.push(Triplet {
                anchor_text: anchor_text.clone(),
                positive_text,
                negative_text: document_text(negative),
                provenance: Provenance {
                    anchor_id: anchor_id.to_string(),
                    positive_id: positive_id.clone(),
                    negative_id: negative.id.clone(),
                },
            });
        }
    }
    Ok(out)
}

/// Triplets built from similar pairs plus how many pairs had no usable
/// negative and were skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTripletBuild {
    pub triplets: Vec<Triplet>,
    pub skipped: usize,
}

/// Build triplets from similar-sentence pairs.
///
/// Each pair (a, b) yields (a, b, negative) with the negative sampled
/// uniformly from `all_texts`, excluding the two pair texts and any text
/// recorded as a similar partner of the anchor in some pair. Pairs with
/// no valid candidate are skipped and counted.
pub fn build_pair_triplets(
    pairs: &[SentencePair],
    all_texts: &[String],
    seed: u64,
) -> Result<PairTripletBuild, DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyPairs);
    }
    for (index, pair) in pairs.iter().enumerate() {
        if pair.id_a == pair.id_b {
            return Err(DataError::SelfPair {
                index,
                id: pair.id_a.clone(),
            });
        }
    }
    let mut partners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for pair in pairs {
        partners
            .entry(pair.text_a.as_str())
            .or_default()
            .insert(pair.text_b.as_str());
        partners
            .entry(pair.text_b.as_str())
            .or_default()
            .insert(pair.text_a.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for pair in pairs {
        let anchor_partners = &partners[pair.text_a.as_str()];
        let candidates: Vec<usize> = (0..all_texts.len())
            .filter(|&i| {
                let t = all_texts[i].as_str();
                t != pair.text_a && t != pair.text_b && !anchor_partners.contains(t)
            })
            .collect();
        if pair.text_a == pair.text_b || candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let chosen = candidates[rng.gen_range(0..candidates.len())];
        triplets.push(Triplet {
            anchor_text: pair.text_a.clone(),
            positive_text: pair.text_b.clone(),
            negative_text: all_texts[chosen].clone(),
            provenance: Provenance {
                anchor_id: pair.id_a.clone(),
                positive_id: pair.id_b.clone(),
                negative_id: format!("texts[{chosen}]"),
            },
        });
    }
    Ok(PairTripletBuild { triplets, skipped })
}

/// Shape of the synthetic citation corpus generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    /// Topic-specific vocabulary size.
    pub vocab_per_topic: usize,
    /// Vocabulary shared across all topics.
    pub shared_vocab: usize,
    /// Probability that a drawn token is topic-specific rather than shared.
    pub topic_token_rate: f64,
    pub title_len: usize,
    pub abstract_len: usize,
    /// Citation targets drawn per document (deduplicated, so the realized
    /// count can be lower).
    pub citations_per_doc: usize,
    /// Probability that a citation crosses into another topic.
    pub cross_topic_rate: f64,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        CorpusProfile {
            vocab_per_topic: 40,
            shared_vocab: 20,
            topic_token_rate: 0.8,
            title_len: 4,
            abstract_len: 24,
            citations_per_doc: 3,
            cross_topic_rate: 0.1,
        }
    }
}

impl CorpusProfile {
    fn validate(&self) -> Result<(), DataError> {
        if self.vocab_per_topic == 0 || self.shared_vocab == 0 {
            return Err(DataError::Config("vocabulary sizes must be ≥ 1".into()));
        }
        if self.title_len == 0 || self.abstract_len == 0 {
            return Err(DataError::Config("text lengths must be ≥ 1".into()));
        }
        if self.citations_per_doc == 0 {
            return Err(DataError::Config("citations_per_doc must be ≥ 1".into()));
        }
        for (name, rate) in [
            ("topic_token_rate", self.topic_token_rate),
            ("cross_topic_rate", self.cross_topic_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(DataError::Config(format!(
                    "{name} must be in [0, 1], got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Generate a topic-clustered citation corpus.
///
/// Documents within a topic share a token distribution; citations stay
/// inside the topic except at `cross_topic_rate`. Output satisfies the
/// corpus invariants and is deterministic under the seed.
pub fn generate_synthetic_corpus(
    n_topics: usize,
    docs_per_topic: usize,
    profile: &CorpusProfile,
    seed: u64,
) -> Result<Vec<Document>, DataError> {
    if n_topics < 2 {
        return Err(DataError::Config(format!(
            "n_topics must be ≥ 2, got {n_topics}"
        )));
    }
    if docs_per_topic < 3 {
        return Err(DataError::Config(format!(
            "docs_per_topic must be ≥ 3, got {docs_per_topic}"
        )));
    }
    profile.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc_id = |topic: usize, index: usize| format!("t{topic:02}d{index:03}");

    let mut docs = Vec::with_capacity(n_topics * docs_per_topic);
    for topic in 0..n_topics {
        for index in 0..docs_per_topic {
            let draw_text = |len: usize, rng: &mut ChaCha8Rng| -> String {
                let tokens: Vec<String> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(profile.topic_token_rate) {
                            format!("t{}w{}", topic, rng.gen_range(0..profile.vocab_per_topic))
                        } else {
                            format!("common{}", rng.gen_range(0..profile.shared_vocab))
                        }
                    })
                    .collect();
                tokens.join(" ")
            };
            let title = draw_text(profile.title_len, &mut rng);
            let abstract_text = draw_text(profile.abstract_len, &mut rng);

            let mut cites = BTreeSet::new();
            let mut attempts = 0;
            while cites.len() < profile.citations_per_doc && attempts < 20 * profile.citations_per_doc
            {
                attempts += 1;
                let cross = n_topics > 1 && rng.gen_bool(profile.cross_topic_rate);
                let (target_topic, target_index) = if cross {
                    let mut t = rng.gen_range(0..n_topics - 1);
                    if t >= topic {
                        t += 1;
                    }
                    (t, rng.gen_range(0..docs_per_topic))
                } else {
                    (topic, rng.gen_range(0..docs_per_topic))
                };
                if target_topic == topic && target_index == index {
                    continue;
                }
                cites.insert(doc_id(target_topic, target_index));
            }

            docs.push(Document {
                id: doc_id(topic, index),
                title,
                abstract_text,
                cites: cites.into_iter().collect(),
            });
        }
    }
    validate_corpus(&docs)?;
    Ok(docs)
}

/// Split triplets into train and test at anchor granularity.
///
/// Anchors are shuffled under the seed and assigned greedily: a group goes
/// to train while that keeps the train side within the ceiling of
/// `ratio × total`. Both sides end non-empty.
pub fn split(
    triplets: &[Triplet],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Triplet>, Vec<Triplet>), DataError> {
    if triplets.len() < 2 {
        return Err(DataError::TooFewTriplets(triplets.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut groups: BTreeMap<&str, Vec<&Triplet>> = BTreeMap::new();
    for t in triplets {
        groups
            .entry(t.provenance.anchor_id.as_str())
            .or_default()
            .push(t);
    }
    if groups.len() < 2 {
        return Err(DataError::TooFewAnchors(groups.len()));
    }

    let mut anchors: Vec<&str> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    anchors.shuffle(&mut rng);

    let ceiling = (ratio * triplets.len() as f64).ceil() as usize;
    let mut train: Vec<Triplet> = Vec::new();
    let mut test: Vec<Triplet> = Vec::new();
    for anchor in anchors {
        let group = &groups[anchor];
        if train.len() + group.len() <= ceiling {
            train.extend(group.iter().map(|&t| t.clone()));
        } else {
            test.extend(group.iter().map(|&t| t.clone()));
        }
    }
    // Greedy fill can leave one side empty (all groups fit under the
    // ceiling, or the first group alone exceeds it); rebalance one group.
    if test.is_empty() {
        let last_anchor = train.last().expect("train non-empty").provenance.anchor_id.clone();
        let moved: Vec<Triplet> = train
            .iter()
            .filter(|t| t.provenance.anchor_id == last_anchor)
            .cloned()
            .collect();
        train.retain(|t| t.provenance.anchor_id != last_anchor);
        test = moved;
    } else if train.is_empty() {
        let first_anchor = test[0].provenance.anchor_id.clone();
        let moved: Vec<Triplet> = test
            .iter()
            .filter(|t| t.provenance.anchor_id == first_anchor)
            .cloned()
            .collect();
        test.retain(|t| t.provenance.anchor_id != first_anchor);
        train = moved;
    }
    Ok((train, test))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Load documents and enforce the corpus invariants.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, DataError> {
    let docs: Vec<Document> = read_jsonl(path)?;
    validate_corpus(&docs)?;
    Ok(docs)
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<(), DataError> {
    write_jsonl(path, docs)
}

pub fn load_pairs(path: &Path) -> Result<Vec<SentencePair>, DataError> {
    read_jsonl(path)
}

pub fn save_pairs(path: &Path, pairs: &[SentencePair]) -> Result<(), DataError> {
    write_jsonl(path, pairs)
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>, DataError> {
    read_jsonl(path)
}

pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<(), DataError> {
    write_jsonl(path, triplets)
}
