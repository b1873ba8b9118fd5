//! Contrastive ranking loss, gradient-descent training and held-out evaluation.

use std::collections::HashMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, TokenId, TrainingPair};
use super::encoder::{featurize, Encoder, Gradient};
use super::{rng_for, Result, SimError};
use crate::metrics::{self, dot, softmax_nll, EvalSample, MetricsError, RankedJudgments};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub negatives_per_query: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    /// Sampled negatives per test query when measuring contrastive entropy.
    pub eval_negatives: usize,
    /// Fixes the evaluation negatives so every model sees the same test set.
    pub eval_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 64,
            negatives_per_query: 8,
            learning_rate: DEFAULT_LEARNING_RATE,
            eval_every: 100,
            eval_negatives: 256,
            eval_seed: 0,
            seed: 42,
        }
    }
}

/// Tuned on the default desk-scale corpus with plain gradient descent.
pub const DEFAULT_LEARNING_RATE: f64 = 0.3;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("negatives_per_query", self.negatives_per_query),
            ("eval_every", self.eval_every),
            ("eval_negatives", self.eval_negatives),
        ] {
            if v == 0 {
                return Err(SimError::Config(format!("{what} must be at least 1")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Identity of a passage text: a document, optionally with a span cut out.
type PassageKey = (usize, Option<(usize, usize)>);

/// Mean softmax cross-entropy of each query's positive against its sampled
/// negatives plus the other in-batch positives, and its gradient.
///
/// In-batch positives that share the query's positive document, or that
/// repeat one of its sampled negatives, are skipped, so duplicated pairs in a
/// batch do not turn into false negatives.
pub fn contrastive_loss_and_grad(
    encoder: &Encoder,
    batch: &[TrainingPair],
    negatives: &[Vec<usize>],
    corpus: &Corpus,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(SimError::Config("empty batch".into()));
    }
    if negatives.len() != batch.len() {
        return Err(SimError::Config(format!(
            "{} negative lists for {} pairs",
            negatives.len(),
            batch.len()
        )));
    }
    for (pair, negs) in batch.iter().zip(negatives) {
        pair.validate(corpus)?;
        if negs.is_empty() {
            return Err(SimError::MissingNegatives);
        }
        if let Some(&bad) = negs
            .iter()
            .find(|&&j| j >= corpus.len() || j == pair.positive_doc_index)
        {
            return Err(SimError::Config(format!(
                "negative {bad} is out of range or equals the positive {}",
                pair.positive_doc_index
            )));
        }
    }

    // rows: queries first, then each distinct passage text once
    let b = batch.len();
    let mut texts: Vec<std::borrow::Cow<'_, [TokenId]>> = batch
        .iter()
        .map(|p| std::borrow::Cow::Borrowed(p.query_tokens.as_slice()))
        .collect();
    let mut rows: HashMap<PassageKey, usize> = HashMap::new();
    let pos_rows: Vec<usize> = batch
        .iter()
        .map(|p| {
            intern(&mut rows, &mut texts, (p.positive_doc_index, p.removed_span), || {
                p.positive_tokens(corpus)
            })
        })
        .collect();
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(b);
    for (pair, negs) in batch.iter().zip(negatives) {
        let mut list = vec![pos_rows[candidates.len()]];
        for &j in negs {
            list.push(intern(&mut rows, &mut texts, (j, None), || {
                std::borrow::Cow::Borrowed(corpus.document(j))
            }));
        }
        for (other, row) in batch.iter().zip(&pos_rows) {
            if other.positive_doc_index != pair.positive_doc_index && !list.contains(row) {
                list.push(*row);
            }
        }
        candidates.push(list);
    }

    let features: Vec<_> = texts.iter().map(|t| featurize(t, encoder.feature_dim())).collect();
    let fwd = encoder.forward(&features);
    let emb = fwd.embeddings();
    let dim = encoder.embedding_dim();
    let row = |r: usize| &emb[r * dim..(r + 1) * dim];

    let mut loss = 0.0;
    let mut d_emb = vec![0.0; emb.len()];
    let scale = 1.0 / b as f64;
    let mut scores = Vec::new();
    for (i, cand) in candidates.iter().enumerate() {
        let q = row(i);
        scores.clear();
        scores.extend(cand.iter().map(|&r| dot(q, row(r))));
        loss += softmax_nll(scores[0], &scores[1..]);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (c, (&r, &s)) in cand.iter().zip(&scores).enumerate() {
            let p = (s - max).exp() / z;
            let g = scale * (p - if c == 0 { 1.0 } else { 0.0 });
            for k in 0..dim {
                d_emb[i * dim + k] += g * emb[r * dim + k];
                d_emb[r * dim + k] += g * emb[i * dim + k];
            }
        }
    }
    let grad = encoder.backward(&features, &fwd, d_emb);
    Ok((loss * scale, grad))
}

fn intern<'a>(
    rows: &mut HashMap<PassageKey, usize>,
    texts: &mut Vec<std::borrow::Cow<'a, [TokenId]>>,
    key: PassageKey,
    tokens: impl FnOnce() -> std::borrow::Cow<'a, [TokenId]>,
) -> usize {
    *rows.entry(key).or_insert_with(|| {
        texts.push(tokens());
        texts.len() - 1
    })
}

/// Uniform sample of `count` distinct documents other than `exclude`.
pub(crate) fn sample_negatives<R: rand::Rng>(
    rng: &mut R,
    corpus_len: usize,
    exclude: usize,
    count: usize,
) -> Vec<usize> {
    index::sample(rng, corpus_len - 1, count)
        .into_iter()
        .map(|j| if j >= exclude { j + 1 } else { j })
        .collect()
}

/// Per-query negatives used by [`evaluate_entropy`]; depend only on
/// `(seed, query index, positive)`.
pub fn evaluation_negatives(
    corpus_len: usize,
    positive: usize,
    query_index: usize,
    n_negatives: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = rng_for(&[seed, query_index as u64, 0xE7A1]);
    sample_negatives(&mut rng, corpus_len, positive, n_negatives)
}

/// Mean contrastive entropy over `test_pairs` with `n_negatives` sampled
/// negatives per query, scored against the full positive documents.
pub fn evaluate_entropy(
    encoder: &Encoder,
    test_pairs: &[TrainingPair],
    corpus: &Corpus,
    n_negatives: usize,
    seed: u64,
) -> Result<f64> {
    let doc_embeddings = encode_corpus(encoder, corpus)?;
    evaluate_entropy_with(encoder, test_pairs, corpus, &doc_embeddings, n_negatives, seed)
}

fn evaluate_entropy_with(
    encoder: &Encoder,
    test_pairs: &[TrainingPair],
    corpus: &Corpus,
    doc_embeddings: &[f64],
    n_negatives: usize,
    seed: u64,
) -> Result<f64> {
    if test_pairs.is_empty() {
        return Err(SimError::Config("no test pairs".into()));
    }
    if n_negatives == 0 || n_negatives + 1 > corpus.len() {
        return Err(SimError::Config(format!(
            "n_negatives {n_negatives} must lie in [1, corpus size - 1 = {}]",
            corpus.len().saturating_sub(1)
        )));
    }
    let dim = encoder.embedding_dim();
    let doc = |j: usize| &doc_embeddings[j * dim..(j + 1) * dim];
    let queries: Vec<&[TokenId]> = test_pairs.iter().map(|p| p.query_tokens.as_slice()).collect();
    for p in test_pairs {
        p.validate(corpus)?;
    }
    let q_emb = encoder.encode_batch(&queries)?;
    let samples = test_pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = &q_emb[i * dim..(i + 1) * dim];
            let negs = evaluation_negatives(corpus.len(), p.positive_doc_index, i, n_negatives, seed);
            EvalSample::new(
                dot(q, doc(p.positive_doc_index)),
                negs.iter().map(|&j| dot(q, doc(j))).collect(),
            )
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(metrics::mean_contrastive_entropy(&samples)?)
}

fn encode_corpus(encoder: &Encoder, corpus: &Corpus) -> Result<Vec<f64>> {
    let docs: Vec<&[TokenId]> = corpus.documents().iter().map(Vec::as_slice).collect();
    encoder.encode_batch(&docs)
}

/// Mean binary-relevance ranking quality of `test_pairs` when each query
/// ranks the whole corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub ndcg: f64,
    pub map: f64,
    pub recall: f64,
    pub k: usize,
    pub recall_k: usize,
}

pub fn evaluate_ranking(
    encoder: &Encoder,
    test_pairs: &[TrainingPair],
    corpus: &Corpus,
    k: usize,
    recall_k: usize,
) -> Result<RankingSummary> {
    if test_pairs.is_empty() {
        return Err(SimError::Config("no test pairs".into()));
    }
    let doc_embeddings = encode_corpus(encoder, corpus)?;
    let dim = encoder.embedding_dim();
    let queries: Vec<&[TokenId]> = test_pairs.iter().map(|p| p.query_tokens.as_slice()).collect();
    let q_emb = encoder.encode_batch(&queries)?;
    let (mut ndcg, mut map, mut recall) = (0.0, 0.0, 0.0);
    for (i, p) in test_pairs.iter().enumerate() {
        p.validate(corpus)?;
        let q = &q_emb[i * dim..(i + 1) * dim];
        let scores: Vec<f64> = doc_embeddings.chunks_exact(dim).map(|d| dot(q, d)).collect();
        let judged = RankedJudgments::from_scores(&scores, &[p.positive_doc_index])?;
        ndcg += metrics::ndcg_at_k(&judged, k)?;
        map += metrics::map_at_k(&judged, k)?;
        recall += metrics::recall_at_k(&judged, recall_k)?;
    }
    let n = test_pairs.len() as f64;
    Ok(RankingSummary {
        ndcg: ndcg / n,
        map: map / n,
        recall: recall / n,
        k,
        recall_k,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub encoder: Encoder,
    /// Parameters at the evaluation with the lowest entropy.
    pub best_encoder: Encoder,
    pub best_eval_entropy: f64,
    pub best_step: usize,
    /// `(step, entropy)` for every evaluation, starting at step 0.
    pub trace: Vec<(usize, f64)>,
}

fn diverged(e: SimError, step: usize) -> SimError {
    match e {
        SimError::Metrics(MetricsError::NonFinite(_)) => SimError::Diverged { step },
        other => other,
    }
}

/// Fixed-rate minibatch gradient descent for exactly `config.steps` steps.
///
/// Evaluates before training, every `eval_every` steps and after the last
/// step; reports the lowest entropy seen rather than the final one.
pub fn train(
    encoder: Encoder,
    pairs: &[TrainingPair],
    corpus: &Corpus,
    config: &TrainConfig,
    test_pairs: &[TrainingPair],
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(SimError::Config("no training pairs".into()));
    }
    if test_pairs.is_empty() {
        return Err(SimError::Config("no test pairs".into()));
    }
    if config.negatives_per_query + 1 > corpus.len() {
        return Err(SimError::Config(format!(
            "negatives_per_query {} needs a corpus of at least {} documents",
            config.negatives_per_query,
            config.negatives_per_query + 1
        )));
    }
    for p in pairs {
        p.validate(corpus)?;
    }

    let evaluate = |enc: &Encoder| -> Result<f64> {
        let docs = encode_corpus(enc, corpus)?;
        evaluate_entropy_with(enc, test_pairs, corpus, &docs, config.eval_negatives, config.eval_seed)
    };

    let mut encoder = encoder;
    let initial = evaluate(&encoder)?;
    let mut trace = vec![(0, initial)];
    let mut best_encoder = encoder.clone();
    let mut best = (initial, 0usize);

    let mut rng = rng_for(&[config.seed, 0x7EA1]);
    let batch_size = config.batch_size.min(pairs.len());
    let mut batch = Vec::with_capacity(batch_size);
    for step in 1..=config.steps {
        batch.clear();
        batch.extend(
            index::sample(&mut rng, pairs.len(), batch_size)
                .into_iter()
                .map(|i| pairs[i].clone()),
        );
        let negatives: Vec<Vec<usize>> = batch
            .iter()
            .map(|p| sample_negatives(&mut rng, corpus.len(), p.positive_doc_index, config.negatives_per_query))
            .collect();
        let (loss, grad) =
            contrastive_loss_and_grad(&encoder, &batch, &negatives, corpus).map_err(|e| diverged(e, step))?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(SimError::Diverged { step });
        }
        encoder.apply_gradient(&grad, config.learning_rate);

        if step % config.eval_every == 0 || step == config.steps {
            let entropy = evaluate(&encoder).map_err(|e| diverged(e, step))?;
            if !entropy.is_finite() {
                return Err(SimError::Diverged { step });
            }
            trace.push((step, entropy));
            if entropy < best.0 {
                best = (entropy, step);
                best_encoder = encoder.clone();
            }
        }
    }
    Ok(TrainOutcome {
        encoder,
        best_encoder,
        best_eval_entropy: best.0,
        best_step: best.1,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::super::corpus::{generate_corpus, ict_pairs, AnnotationMethod};
    use super::super::encoder::init_encoder;
    use super::*;

    fn small_corpus() -> Corpus {
        generate_corpus(512, 8, 300, (10, 20), 4).unwrap()
    }

    #[test]
    fn uniform_scores_give_log_m_plus_one() {
        let c = small_corpus();
        let enc = Encoder::affine_only(64, 4, vec![0.0; 4]).unwrap();
        let pairs = ict_pairs(&c, 1, 3, false, 1).unwrap();
        for m in [1usize, 5, 17] {
            let negs = vec![sample_negatives(
                &mut rng_for(&[m as u64]),
                c.len(),
                pairs[0].positive_doc_index,
                m,
            )];
            let (loss, grad) = contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap();
            assert!((loss - ((m + 1) as f64).ln()).abs() < 1e-12);
            assert!(grad.flatten().iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let c = small_corpus();
        let enc = init_encoder(64, &[8], 4, 3).unwrap();
        let pairs = ict_pairs(&c, 3, 4, false, 2).unwrap();
        let mut rng = rng_for(&[9]);
        let negs: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| sample_negatives(&mut rng, c.len(), p.positive_doc_index, 4))
            .collect();
        let (once, g1) = contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap();
        let twice_pairs: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        let twice_negs: Vec<_> = negs.iter().chain(&negs).cloned().collect();
        let (twice, g2) = contrastive_loss_and_grad(&enc, &twice_pairs, &twice_negs, &c).unwrap();
        assert!((once - twice).abs() < 1e-12, "{once} vs {twice}");
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_missing_negatives() {
        let c = small_corpus();
        let enc = init_encoder(64, &[], 4, 3).unwrap();
        let pairs = ict_pairs(&c, 2, 4, false, 2).unwrap();
        let negs = vec![vec![(pairs[0].positive_doc_index + 1) % c.len()], vec![]];
        assert_eq!(
            contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap_err(),
            SimError::MissingNegatives
        );
        let own = vec![vec![pairs[0].positive_doc_index], vec![0]];
        assert!(contrastive_loss_and_grad(&enc, &pairs, &own, &c).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_with_removed_spans() {
        let c = small_corpus();
        let mut enc = init_encoder(32, &[8], 4, 11).unwrap();
        let pairs = ict_pairs(&c, 3, 4, true, 5).unwrap();
        let mut rng = rng_for(&[2]);
        let negs: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| sample_negatives(&mut rng, c.len(), p.positive_doc_index, 3))
            .collect();
        let (_, grad) = contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap();
        let analytic = grad.flatten();
        let base = enc.parameters();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            enc.set_parameters(&p).unwrap();
            let up = contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap().0;
            p[i] -= 2.0 * eps;
            enc.set_parameters(&p).unwrap();
            let down = contrastive_loss_and_grad(&enc, &pairs, &negs, &c).unwrap().0;
            let numeric = (up - down) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn untrained_uniform_encoder_entropy() {
        let c = small_corpus();
        let enc = Encoder::affine_only(64, 4, vec![0.3, 0.0, -0.2, 1.0]).unwrap();
        let test = ict_pairs(&c, 20, 4, false, 3).unwrap();
        let v = evaluate_entropy(&enc, &test, &c, 256, 0).unwrap();
        assert!((v - 257f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_negatives_remove_sampling_variance() {
        let c = small_corpus();
        let enc = init_encoder(64, &[8], 4, 1).unwrap();
        let test = ict_pairs(&c, 10, 4, false, 3).unwrap();
        let all = c.len() - 1;
        let a = evaluate_entropy(&enc, &test, &c, all, 0).unwrap();
        let b = evaluate_entropy(&enc, &test, &c, all, 99).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(evaluate_entropy(&enc, &test, &c, c.len(), 0).is_err());
        assert!(evaluate_entropy(&enc, &test, &c, 0, 0).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let c = small_corpus();
        let enc = init_encoder(64, &[8], 4, 1).unwrap();
        let test = ict_pairs(&c, 10, 4, false, 3).unwrap();
        let a = evaluate_entropy(&enc, &test, &c, 50, 5).unwrap();
        assert_eq!(a.to_bits(), evaluate_entropy(&enc, &test, &c, 50, 5).unwrap().to_bits());
    }

    #[test]
    fn zero_learning_rate_keeps_initial_evaluation() {
        let c = small_corpus();
        let enc = init_encoder(64, &[8], 4, 1).unwrap();
        let train_pairs = ict_pairs(&c, 100, 4, false, 3).unwrap();
        let test = ict_pairs(&c, 10, 4, false, 4).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 8,
            learning_rate: 0.0,
            eval_every: 2,
            eval_negatives: 32,
            ..Default::default()
        };
        let out = train(enc.clone(), &train_pairs, &c, &cfg, &test).unwrap();
        let initial = evaluate_entropy(&enc, &test, &c, 32, cfg.eval_seed).unwrap();
        assert_eq!(out.best_eval_entropy, initial);
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.encoder, enc);
    }

    #[test]
    fn train_rejects_zero_steps() {
        let c = small_corpus();
        let enc = init_encoder(64, &[], 4, 1).unwrap();
        let pairs = ict_pairs(&c, 10, 4, false, 3).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(train(enc, &pairs, &c, &cfg, &pairs).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let c = small_corpus();
        let enc = init_encoder(64, &[16], 4, 1).unwrap();
        let pairs = ict_pairs(&c, 50, 4, false, 3).unwrap();
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 8,
            learning_rate: 1e300,
            eval_every: 1,
            eval_negatives: 16,
            ..Default::default()
        };
        match train(enc, &pairs, &c, &cfg, &pairs[..5]) {
            Err(SimError::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn constant_encoder_ranks_by_document_id() {
        // all scores tie, so the positive lands at rank = its index + 1
        let c = small_corpus();
        let enc = Encoder::affine_only(64, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let test = ict_pairs(&c, 6, 4, false, 3).unwrap();
        assert_eq!(test[0].annotation_method, AnnotationMethod::Ict);
        let r = evaluate_ranking(&enc, &test, &c, 10, 100).unwrap();
        let mut ndcg = 0.0;
        let mut recall = 0.0;
        for p in &test {
            let rank = p.positive_doc_index + 1;
            if rank <= 10 {
                ndcg += 1.0 / ((rank + 1) as f64).log2();
            }
            if rank <= 100 {
                recall += 1.0;
            }
        }
        assert!((r.ndcg - ndcg / 6.0).abs() < 1e-12);
        assert!((r.recall - recall / 6.0).abs() < 1e-12);
    }
}
