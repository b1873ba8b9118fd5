use drscale::toysim::{
    self, corrupt_labels, evaluate_entropy, evaluation_negatives, generate_corpus, ict_pairs, init_encoder,
    AnnotationMethod, Corpus, CorpusConfig, Encoder, GridSpec, TrainConfig,
};
use proptest::prelude::*;

fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(256, 8, 300, (12, 30), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corpus_respects_its_shape(
        topics in 1usize..8,
        extra_vocab in 0usize..200,
        n_docs in 100usize..400,
        min_len in 8usize..20,
        spread in 0usize..20,
        seed: u64,
    ) {
        let vocab = topics * 16 + extra_vocab;
        let c = generate_corpus(vocab, topics, n_docs, (min_len, min_len + spread), seed).unwrap();
        prop_assert_eq!(c.len(), n_docs);
        prop_assert!(c.documents().iter().all(|d| (min_len..=min_len + spread).contains(&d.len())));
        prop_assert!(c.documents().iter().flatten().all(|&t| (t as usize) < vocab));
        prop_assert!(c.topics().iter().all(|&t| t < topics));
        prop_assert_eq!(c, generate_corpus(vocab, topics, n_docs, (min_len, min_len + spread), seed).unwrap());
    }

    #[test]
    fn ict_queries_are_spans_of_distinct_positives(seed: u64, n in 1usize..300, span in 2usize..11) {
        let c = small_corpus(3);
        let pairs = ict_pairs(&c, n, span, false, seed).unwrap();
        prop_assert_eq!(pairs.len(), n);
        let mut docs: Vec<usize> = pairs.iter().map(|p| p.positive_doc_index).collect();
        docs.sort_unstable();
        docs.dedup();
        prop_assert_eq!(docs.len(), n);
        for p in &pairs {
            prop_assert_eq!(p.query_tokens.len(), span);
            prop_assert_eq!(p.annotation_method, AnnotationMethod::Ict);
            let doc = c.document(p.positive_doc_index);
            prop_assert!(doc.windows(span).any(|w| w == p.query_tokens.as_slice()));
        }
    }

    #[test]
    fn ict_pairs_are_prefix_stable(seed: u64, a in 1usize..300, b in 1usize..300) {
        let c = small_corpus(5);
        let (lo, hi) = (a.min(b), a.max(b));
        let short = ict_pairs(&c, lo, 6, false, seed).unwrap();
        let long = ict_pairs(&c, hi, 6, false, seed).unwrap();
        prop_assert_eq!(&short[..], &long[..lo]);
    }

    #[test]
    fn removed_spans_point_at_the_query(seed: u64) {
        let c = small_corpus(9);
        for p in ict_pairs(&c, 50, 5, true, seed).unwrap() {
            let (start, end) = p.removed_span.unwrap();
            prop_assert_eq!(&c.document(p.positive_doc_index)[start..end], p.query_tokens.as_slice());
            prop_assert_eq!(p.positive_tokens(&c).len(), c.document(p.positive_doc_index).len() - 5);
        }
    }

    #[test]
    fn corruption_moves_only_labels(seed: u64, rate in 0.0f64..=1.0) {
        let c = small_corpus(11);
        let clean = ict_pairs(&c, 200, 6, false, 1).unwrap();
        let noisy = corrupt_labels(&clean, rate, &c, seed).unwrap();
        prop_assert_eq!(noisy.len(), clean.len());
        let mut moved = 0usize;
        for (a, b) in clean.iter().zip(&noisy) {
            prop_assert_eq!(&a.query_tokens, &b.query_tokens);
            prop_assert!(b.positive_doc_index < c.len());
            if a.positive_doc_index != b.positive_doc_index {
                moved += 1;
            }
        }
        if rate == 0.0 {
            prop_assert_eq!(&noisy, &clean);
        } else {
            prop_assert!(noisy.iter().all(|p| p.annotation_method == AnnotationMethod::NoisyIct));
        }
        if rate == 1.0 {
            prop_assert_eq!(moved, clean.len());
        }
        // binomial(200, rate) within 6 standard deviations
        let sd = (200.0 * rate * (1.0 - rate)).sqrt();
        prop_assert!((moved as f64 - 200.0 * rate).abs() <= 6.0 * sd + 1e-9);
    }

    #[test]
    fn features_are_unit_norm_buckets(tokens in prop::collection::vec(0u32..1024, 1..60), dim in 1usize..300) {
        let enc = init_encoder(dim, &[], 4, 0).unwrap();
        let f = enc.featurize(&tokens).unwrap();
        let norm: f64 = f.entries().iter().map(|(_, v)| v * v).sum();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let mut buckets: Vec<usize> = f.entries().iter().map(|(i, _)| *i).collect();
        prop_assert!(buckets.iter().all(|&i| i < dim));
        let n = buckets.len();
        buckets.dedup();
        prop_assert_eq!(buckets.len(), n);
        for &t in &tokens {
            prop_assert!(f.entries().iter().any(|(i, _)| *i == toysim::token_bucket(t, dim)));
        }
    }

    #[test]
    fn parameter_count_formula(dim in 1usize..64, widths in prop::collection::vec(1usize..32, 0..3), emb in 1usize..16) {
        let enc = init_encoder(dim, &widths, emb, 1).unwrap();
        let mut expected = 0;
        let mut inputs = dim;
        for &w in widths.iter().chain(std::iter::once(&emb)) {
            expected += (inputs + 1) * w;
            inputs = w;
        }
        prop_assert_eq!(enc.param_count(), expected);
        prop_assert_eq!(enc.parameters().len(), expected);
        prop_assert_eq!(enc.hidden_widths(), widths);
    }

    #[test]
    fn evaluation_negatives_exclude_the_positive(len in 10usize..500, seed: u64, q in 0usize..1000, m in 1usize..9) {
        let positive = q % len;
        let negs = evaluation_negatives(len, positive, q, m, seed);
        prop_assert_eq!(negs.len(), m);
        prop_assert!(!negs.contains(&positive));
        prop_assert!(negs.iter().all(|&d| d < len));
        let mut sorted = negs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        prop_assert_eq!(negs, evaluation_negatives(len, positive, q, m, seed));
    }
}

#[test]
fn constant_encoder_scores_ln_m_plus_one() {
    let c = small_corpus(2);
    let pairs = ict_pairs(&c, 40, 6, false, 4).unwrap();
    let enc = Encoder::affine_only(64, 8, vec![0.3; 8]).unwrap();
    for m in [1usize, 8, 256] {
        let e = evaluate_entropy(&enc, &pairs, &c, m, 0).unwrap();
        assert!((e - ((m + 1) as f64).ln()).abs() < 1e-12, "m = {m}: {e}");
    }
}

fn tiny_grid() -> GridSpec {
    GridSpec {
        corpus: CorpusConfig {
            vocab_size: 128,
            topic_count: 4,
            n_docs: 300,
            doc_len_min: 12,
            doc_len_max: 24,
            seed: 3,
        },
        feature_dim: 32,
        embedding_dim: 8,
        architectures: vec![vec![], vec![8]],
        data_sizes: vec![40, 10],
        seeds: vec![2, 1],
        train: TrainConfig {
            steps: 30,
            batch_size: 8,
            negatives_per_query: 2,
            learning_rate: 0.3,
            eval_every: 10,
            eval_negatives: 16,
            eval_seed: 0,
            seed: 42,
        },
        test_pairs: 50,
        ranking_k: 5,
        recall_k: 20,
        ..GridSpec::default()
    }
}

#[test]
fn grid_rows_cover_every_cell_in_order() {
    let spec = tiny_grid();
    let records = toysim::run_grid(&spec).unwrap();
    assert_eq!(records.len(), 8);
    let cells: Vec<(u64, u64, u64)> = records.iter().map(|r| (r.model_size, r.data_size, r.seed)).collect();
    let linear = init_encoder(32, &[], 8, 0).unwrap().param_count() as u64;
    let hidden = init_encoder(32, &[8], 8, 0).unwrap().param_count() as u64;
    let mut expected = Vec::new();
    for n in [linear, hidden] {
        for d in [10, 40] {
            for s in [1, 2] {
                expected.push((n, d, s));
            }
        }
    }
    assert_eq!(cells, expected);
    assert!(records
        .iter()
        .all(|r| r.contrastive_entropy.is_finite() && r.contrastive_entropy > 0.0));
    assert_eq!(
        toysim::records_to_csv(&records),
        toysim::records_to_csv(&toysim::run_grid(&spec).unwrap())
    );
}

#[test]
fn best_checkpoint_never_worse_than_initial() {
    let cells = toysim::run_grid_detailed(&tiny_grid()).unwrap();
    for c in cells {
        assert!(c.record.contrastive_entropy <= c.initial_entropy, "{}", c.cell);
    }
}

#[test]
fn noisy_grid_keeps_clean_queries() {
    let mut spec = tiny_grid();
    spec.annotation.method = AnnotationMethod::NoisyIct;
    spec.annotation.noise_rate = 0.5;
    let data = spec.prepare().unwrap();
    let noisy = spec.training_pairs(&data, 1).unwrap();
    spec.annotation.method = AnnotationMethod::Ict;
    spec.annotation.noise_rate = 0.0;
    let clean = spec.training_pairs(&data, 1).unwrap();
    assert_eq!(noisy.len(), clean.len());
    assert!(noisy.iter().zip(&clean).all(|(a, b)| a.query_tokens == b.query_tokens));
    assert!(noisy
        .iter()
        .zip(&clean)
        .any(|(a, b)| a.positive_doc_index != b.positive_doc_index));
}
