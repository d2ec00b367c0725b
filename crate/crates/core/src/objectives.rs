//! Training losses over embedding triplets.
//!
//! Two objectives: a triplet margin loss on L2 distances, and an in-batch
//! contrastive loss on temperature-scaled cosine similarities where every
//! positive and negative in the batch serves as a candidate for every
//! anchor (the anchor's own terms included).
//!
//! Each loss comes in two forms: a traced builder over tape vars, which is
//! what training composes after a traced encode, and a plain evaluator over
//! stored embeddings that runs the same graph on a throwaway tape.

use thiserror::Error;

use crate::encoder::SentenceEmbedding;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss config: {0}")]
    Config(String),
    #[error("triplet batch must be non-empty")]
    EmptyBatch,
    #[error("triplet lists have unequal lengths: {anchors} anchors, {positives} positives, {negatives} negatives")]
    LengthMismatch {
        anchors: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("embedding dimension mismatch: {role} {index} has shape {actual:?}, expected {expected:?}")]
    DimensionMismatch {
        role: &'static str,
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{role} {index} has zero norm; cosine similarity is undefined for it")]
    ZeroNorm { role: &'static str, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Margin and temperature hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            temperature: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(LossError::Config(format!(
                "margin must be finite and nonnegative, got {}",
                self.margin
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Config(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Equal-length anchor/positive/negative embedding lists.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Vec<SentenceEmbedding>,
    pub positives: Vec<SentenceEmbedding>,
    pub negatives: Vec<SentenceEmbedding>,
}

/// Anchor, positive, and negative vars bound on one tape.
type BoundBatch = (Vec<Var>, Vec<Var>, Vec<Var>);

impl TripletBatch {
    pub fn new(
        anchors: Vec<SentenceEmbedding>,
        positives: Vec<SentenceEmbedding>,
        negatives: Vec<SentenceEmbedding>,
    ) -> Result<Self, LossError> {
        let batch = TripletBatch {
            anchors,
            positives,
            negatives,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.anchors.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if self.anchors.len() != self.positives.len()
            || self.anchors.len() != self.negatives.len()
        {
            return Err(LossError::LengthMismatch {
                anchors: self.anchors.len(),
                positives: self.positives.len(),
                negatives: self.negatives.len(),
            });
        }
        let expected = self.anchors[0].vector.shape().to_vec();
        for (role, list) in [
            ("anchor", &self.anchors),
            ("positive", &self.positives),
            ("negative", &self.negatives),
        ] {
            for (index, e) in list.iter().enumerate() {
                if e.vector.shape() != expected.as_slice() {
                    return Err(LossError::DimensionMismatch {
                        role,
                        index,
                        expected,
                        actual: e.vector.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Push the whole batch onto a tape as non-trainable leaves,
    /// returning anchor, positive, and negative vars in batch order.
    fn bind(&self, tape: &mut Tape) -> Result<BoundBatch, LossError> {
        let mut bind_list = |list: &[SentenceEmbedding]| -> Result<Vec<Var>, LossError> {
            list.iter().map(|e| Ok(tape.leaf(&e.vector)?)).collect()
        };
        let a = bind_list(&self.anchors)?;
        let p = bind_list(&self.positives)?;
        let n = bind_list(&self.negatives)?;
        Ok((a, p, n))
    }
}

/// Mean over triplets of `max(‖a − p‖₂ − ‖a − n‖₂ + margin, 0)`.
pub fn triplet_margin_loss(
    batch: &TripletBatch,
    config: &LossConfig,
) -> Result<crate::tensor::Tensor, LossError> {
    batch.validate()?;
    let mut tape = Tape::new();
    let (a, p, n) = batch.bind(&mut tape)?;
    let loss = triplet_margin_loss_traced(&mut tape, &a, &p, &n, config)?;
    Ok(tape.to_tensor(loss))
}

/// Mean over anchors of the in-batch contrastive objective.
pub fn contrastive_loss(
    batch: &TripletBatch,
    config: &LossConfig,
) -> Result<crate::tensor::Tensor, LossError> {
    batch.validate()?;
    let mut tape = Tape::new();
    let (a, p, n) = batch.bind(&mut tape)?;
    let loss = contrastive_loss_traced(&mut tape, &a, &p, &n, config)?;
    Ok(tape.to_tensor(loss))
}

fn validate_vars(
    tape: &Tape,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
) -> Result<(), LossError> {
    if anchors.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(LossError::LengthMismatch {
            anchors: anchors.len(),
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let expected = tape.shape(anchors[0]).to_vec();
    for (role, list) in [
        ("anchor", anchors),
        ("positive", positives),
        ("negative", negatives),
    ] {
        for (index, &v) in list.iter().enumerate() {
            if tape.shape(v) != expected.as_slice() {
                return Err(LossError::DimensionMismatch {
                    role,
                    index,
                    expected,
                    actual: tape.shape(v).to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// Triplet margin loss over vars already on the tape; gradients flow into
/// all three embedding lists.
pub fn triplet_margin_loss_traced(
    tape: &mut Tape,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    config: &LossConfig,
) -> Result<Var, LossError> {
    config.validate()?;
    validate_vars(tape, anchors, positives, negatives)?;
    let margin = tape.scalar(config.margin)?;
    let mut terms = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let dp = {
            let diff = tape.sub(anchors[i], positives[i])?;
            tape.l2_norm(diff)?
        };
        let dn = {
            let diff = tape.sub(anchors[i], negatives[i])?;
            tape.l2_norm(diff)?
        };
        let gap = tape.sub(dp, dn)?;
        let shifted = tape.add(gap, margin)?;
        terms.push(tape.max_with_zero(shifted)?);
    }
    let stacked = tape.concat_lastdim(&terms)?;
    Ok(tape.mean(stacked)?)
}

/// In-batch contrastive loss over vars already on the tape.
///
/// For each anchor the denominator runs over every positive and every
/// negative in the batch, the anchor's own pair included. The per-anchor
/// term −log(e^{s⁺}/Σⱼe^{sⱼ}) is built as log1p(Σ_{j≠own} e^{sⱼ−s⁺}),
/// which stays strictly positive even when the softmax saturates; when
/// some sⱼ−s⁺ is large enough that its exp would overflow, the term falls
/// back to a max-shifted log-sum-exp (the loss is huge there, so the
/// saturation concern is moot).
pub fn contrastive_loss_traced(
    tape: &mut Tape,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    config: &LossConfig,
) -> Result<Var, LossError> {
    config.validate()?;
    validate_vars(tape, anchors, positives, negatives)?;
    let n = anchors.len();

    // Norms once per embedding, reused across all pair similarities.
    let mut norm_of = |list: &[Var], role: &'static str| -> Result<Vec<Var>, LossError> {
        list.iter()
            .enumerate()
            .map(|(index, &v)| {
                let norm = tape.l2_norm(v)?;
                if tape.value(norm)[0] == 0.0 {
                    return Err(LossError::ZeroNorm { role, index });
                }
                Ok(norm)
            })
            .collect()
    };
    let a_norms = norm_of(anchors, "anchor")?;
    let p_norms = norm_of(positives, "positive")?;
    let n_norms = norm_of(negatives, "negative")?;

    let inv_tau = 1.0 / config.temperature;
    let scaled_sim = |tape: &mut Tape, x: Var, xn: Var, y: Var, yn: Var| -> Result<Var, LossError> {
        let d = tape.dot(x, y)?;
        let denom = tape.mul(xn, yn)?;
        let cos = tape.div(d, denom)?;
        Ok(tape.scale(cos, inv_tau)?)
    };

    // exp(x) stays comfortably inside f64 range below this.
    const SAFE_EXP_ARG: f64 = 500.0;

    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let mut scores = Vec::with_capacity(2 * n);
        let mut own_positive = None;
        for j in 0..n {
            let sp = scaled_sim(tape, anchors[i], a_norms[i], positives[j], p_norms[j])?;
            if j == i {
                own_positive = Some(sp);
            }
            scores.push(sp);
            scores.push(scaled_sim(
                tape,
                anchors[i],
                a_norms[i],
                negatives[j],
                n_norms[j],
            )?);
        }
        let own_positive = own_positive.expect("loop visits j == i");

        let own_value = tape.value(own_positive)[0];
        let row_max = scores
            .iter()
            .map(|&s| tape.value(s)[0])
            .fold(f64::NEG_INFINITY, f64::max);

        let term = if row_max - own_value <= SAFE_EXP_ARG {
            // log1p(Σ_{j≠own} e^{sⱼ − s⁺}); differentiating this rewritten
            // form gives the same gradient as LSE − s⁺.
            let mut rest = Vec::with_capacity(scores.len() - 1);
            for s in scores {
                if s == own_positive {
                    continue;
                }
                let centered = tape.sub(s, own_positive)?;
                rest.push(tape.exp(centered)?);
            }
            let stacked = tape.concat_lastdim(&rest)?;
            let total = tape.sum(stacked)?;
            tape.log1p(total)?
        } else {
            // Constant max shift; exact near zero is unreachable here
            // because the row maximum dominates the own-positive term.
            let shift = tape.scalar(row_max)?;
            let mut shifted_exps = Vec::with_capacity(scores.len());
            for s in scores {
                let centered = tape.sub(s, shift)?;
                shifted_exps.push(tape.exp(centered)?);
            }
            let stacked = tape.concat_lastdim(&shifted_exps)?;
            let total = tape.sum(stacked)?;
            let log_total = tape.log(total)?;
            let lse = tape.add(log_total, shift)?;
            tape.sub(lse, own_positive)?
        };
        per_anchor.push(term);
    }
    let stacked = tape.concat_lastdim(&per_anchor)?;
    Ok(tape.mean(stacked)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(data: Vec<f64>) -> SentenceEmbedding {
        let dim = data.len();
        SentenceEmbedding {
            vector: Tensor::new(data, vec![dim]).unwrap(),
            source_id: String::new(),
        }
    }

    fn batch(
        a: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
        n: Vec<Vec<f64>>,
    ) -> TripletBatch {
        TripletBatch::new(
            a.into_iter().map(emb).collect(),
            p.into_iter().map(emb).collect(),
            n.into_iter().map(emb).collect(),
        )
        .unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> TripletBatch {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let a = draw(rng);
        let p = draw(rng);
        let neg = draw(rng);
        batch(a, p, neg)
    }

    // Scalar re-implementations with plain loops, sharing no code with the
    // tape builders; these are the oracles the builders must match.
    fn oracle_triplet(batch: &TripletBatch, margin: f64) -> f64 {
        let n = batch.len();
        let mut total = 0.0;
        for i in 0..n {
            let a = batch.anchors[i].vector.data();
            let p = batch.positives[i].vector.data();
            let ng = batch.negatives[i].vector.data();
            let dp: f64 = a
                .iter()
                .zip(p)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dn: f64 = a
                .iter()
                .zip(ng)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            total += (dp - dn + margin).max(0.0);
        }
        total / n as f64
    }

    fn oracle_contrastive(batch: &TripletBatch, tau: f64) -> f64 {
        let cos = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let n = batch.len();
        let mut total = 0.0;
        for i in 0..n {
            let a = batch.anchors[i].vector.data();
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cos(a, batch.positives[j].vector.data()) / tau).exp();
                denom += (cos(a, batch.negatives[j].vector.data()) / tau).exp();
            }
            let own = (cos(a, batch.positives[i].vector.data()) / tau).exp();
            total += -(own / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn triplet_clamps_to_zero_when_negative_is_far() {
        let b = batch(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        );
        let loss = triplet_margin_loss(&b, &LossConfig::default()).unwrap();
        assert_eq!(loss.data()[0], 0.0);
    }

    #[test]
    fn triplet_equal_distances_yield_exactly_the_margin() {
        let b = batch(
            vec![vec![0.0, 0.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        );
        let loss = triplet_margin_loss(&b, &LossConfig::default()).unwrap();
        assert_eq!(loss.data()[0], 1.0);
    }

    #[test]
    fn triplet_hand_evaluated_case() {
        // distances 5 and 1 with margin 1: 5 - 1 + 1 = 5.
        let b = batch(
            vec![vec![0.0, 0.0]],
            vec![vec![3.0, 4.0]],
            vec![vec![0.0, 1.0]],
        );
        let loss = triplet_margin_loss(&b, &LossConfig::default()).unwrap();
        assert!((loss.data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_symmetric_single_triplet_is_ln_2() {
        // Both similarities are zero, so the two denominator terms are
        // equal and the loss is ln 2 for any temperature.
        let b = batch(
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![0.0, -1.0]],
        );
        for tau in [0.05, 0.5, 3.0] {
            let loss = contrastive_loss(
                &b,
                &LossConfig {
                    temperature: tau,
                    ..LossConfig::default()
                },
            )
            .unwrap();
            assert!(
                (loss.data()[0] - std::f64::consts::LN_2).abs() < 1e-12,
                "tau {tau}"
            );
        }
    }

    #[test]
    fn contrastive_saturates_but_stays_positive() {
        // sim(a, p) = 1 and sim(a, n) = -1, so at tau = 0.05 the scores are
        // +20 and -20 and the loss is ln(1 + e^{-40}): tiny but nonzero.
        let b = batch(
            vec![vec![1.0, 0.0]],
            vec![vec![2.0, 0.0]],
            vec![vec![-1.0, 0.0]],
        );
        let loss = contrastive_loss(&b, &LossConfig::default()).unwrap().data()[0];
        let expected = (-40.0f64).exp().ln_1p();
        assert!(loss > 0.0);
        assert!(loss < 1e-17);
        assert!((loss - expected).abs() < 1e-30, "{loss} vs {expected}");
    }

    #[test]
    fn both_losses_match_scalar_oracles_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let config = LossConfig::default();
        for n in [1usize, 2, 3, 8] {
            let b = random_batch(&mut rng, n, 6);
            let l1 = triplet_margin_loss(&b, &config).unwrap().data()[0];
            assert!((l1 - oracle_triplet(&b, config.margin)).abs() < 1e-12, "n={n}");
            let l2 = contrastive_loss(&b, &config).unwrap().data()[0];
            assert!(
                (l2 - oracle_contrastive(&b, config.temperature)).abs() < 1e-10,
                "n={n}: {l2} vs {}",
                oracle_contrastive(&b, config.temperature)
            );
        }
    }

    #[test]
    fn losses_are_batch_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 5, 4);
        let perm = [3usize, 0, 4, 2, 1];
        let permuted = TripletBatch::new(
            perm.iter().map(|&i| b.anchors[i].clone()).collect(),
            perm.iter().map(|&i| b.positives[i].clone()).collect(),
            perm.iter().map(|&i| b.negatives[i].clone()).collect(),
        )
        .unwrap();
        let config = LossConfig::default();
        let l1a = triplet_margin_loss(&b, &config).unwrap().data()[0];
        let l1b = triplet_margin_loss(&permuted, &config).unwrap().data()[0];
        assert!((l1a - l1b).abs() < 1e-12);
        let l2a = contrastive_loss(&b, &config).unwrap().data()[0];
        let l2b = contrastive_loss(&permuted, &config).unwrap().data()[0];
        assert!((l2a - l2b).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_scale_invariant_per_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = random_batch(&mut rng, 3, 5);
        let config = LossConfig::default();
        let base = contrastive_loss(&b, &config).unwrap().data()[0];
        let mut scaled = b.clone();
        for v in scaled.anchors[1].vector.data_mut() {
            *v *= 37.5;
        }
        for v in scaled.negatives[2].vector.data_mut() {
            *v *= 0.004;
        }
        let after = contrastive_loss(&scaled, &config).unwrap().data()[0];
        assert!((base - after).abs() < 1e-10, "{base} vs {after}");
    }

    #[test]
    fn zero_norm_embedding_is_named_in_the_error() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        );
        let err = contrastive_loss(&b, &LossConfig::default()).unwrap_err();
        match err {
            LossError::ZeroNorm { role, index } => {
                assert_eq!(role, "positive");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
        // The margin loss is distance-based and accepts zero vectors.
        assert!(triplet_margin_loss(&b, &LossConfig::default()).is_ok());
    }

    #[test]
    fn malformed_batches_are_rejected() {
        assert!(matches!(
            TripletBatch::new(vec![], vec![], vec![]),
            Err(LossError::EmptyBatch)
        ));
        assert!(matches!(
            TripletBatch::new(
                vec![emb(vec![1.0])],
                vec![emb(vec![1.0]), emb(vec![2.0])],
                vec![emb(vec![1.0])]
            ),
            Err(LossError::LengthMismatch { .. })
        ));
        assert!(matches!(
            TripletBatch::new(
                vec![emb(vec![1.0, 2.0])],
                vec![emb(vec![1.0])],
                vec![emb(vec![1.0, 2.0])]
            ),
            Err(LossError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let b = batch(vec![vec![1.0]], vec![vec![2.0]], vec![vec![3.0]]);
        let bad_margin = LossConfig {
            margin: -0.5,
            temperature: 0.05,
        };
        assert!(matches!(
            triplet_margin_loss(&b, &bad_margin),
            Err(LossError::Config(_))
        ));
        for temperature in [0.0, -2.0, f64::NAN] {
            let bad = LossConfig {
                margin: 1.0,
                temperature,
            };
            assert!(matches!(
                contrastive_loss(&b, &bad),
                Err(LossError::Config(_))
            ));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Pack the batch into one [3n, dim] leaf; rows are split back out
        // with per-row lookups so the whole batch is a single checked input.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 3;
        let dim = 4;
        let data: Vec<f64> = (0..3 * n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let packed = Tensor::new(data, vec![3 * n, dim]).unwrap().with_requires_grad(true);
        let config = LossConfig::default();

        for use_contrastive in [false, true] {
            let err = crate::tensor::finite_difference_check(
                |tape, leaf| {
                    let row = |tape: &mut Tape, i: usize| -> Result<Var, TensorError> {
                        let r = tape.embed_lookup(leaf, &[i])?;
                        tape.reshape(r, vec![dim])
                    };
                    let mut a = Vec::new();
                    let mut p = Vec::new();
                    let mut ng = Vec::new();
                    for i in 0..n {
                        a.push(row(tape, i)?);
                        p.push(row(tape, n + i)?);
                        ng.push(row(tape, 2 * n + i)?);
                    }
                    let loss = if use_contrastive {
                        contrastive_loss_traced(tape, &a, &p, &ng, &config)
                    } else {
                        triplet_margin_loss_traced(tape, &a, &p, &ng, &config)
                    };
                    loss.map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        other => TensorError::InvalidArgument {
                            op: "loss",
                            message: other.to_string(),
                        },
                    })
                },
                &packed,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "contrastive={use_contrastive}: rel err {err}");
        }
    }
}
