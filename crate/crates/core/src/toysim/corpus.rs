//! Topic-structured synthetic corpora and inverse-cloze weak supervision.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, Result, SimError};

pub type TokenId = u32;

/// Latent-topic corpus of token-id documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    documents: Vec<Vec<TokenId>>,
    topics: Vec<usize>,
    vocab_size: usize,
    topic_count: usize,
    seed: u64,
}

impl Corpus {
    pub fn documents(&self) -> &[Vec<TokenId>] {
        &self.documents
    }

    pub fn document(&self, index: usize) -> &[TokenId] {
        &self.documents[index]
    }

    /// Latent topic each document was drawn from.
    pub fn topics(&self) -> &[usize] {
        &self.topics
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn topic_count(&self) -> usize {
        self.topic_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shortest_document(&self) -> usize {
        self.documents.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Share of tokens drawn from the document's own topic block.
pub const TOPIC_TOKEN_SHARE: f64 = 0.8;
pub const MIN_DOC_LEN: usize = 8;
pub const MIN_DOCS: usize = 100;

/// Each document picks a topic uniformly; topic `t` owns the token block
/// `[t * w, (t + 1) * w)` with `w = vocab_size / topic_count`. Tokens come
/// from that block with probability 0.8 and uniformly from the vocabulary
/// otherwise. Lengths are uniform on the inclusive `doc_len_range`.
pub fn generate_corpus(
    vocab_size: usize,
    topic_count: usize,
    n_docs: usize,
    doc_len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    if topic_count == 0 {
        return Err(SimError::Config("topic_count must be at least 1".into()));
    }
    if vocab_size < topic_count * 16 {
        return Err(SimError::Config(format!(
            "vocab_size {vocab_size} must be at least 16 * topic_count = {}",
            topic_count * 16
        )));
    }
    if vocab_size > TokenId::MAX as usize {
        return Err(SimError::Config(format!("vocab_size {vocab_size} too large")));
    }
    if n_docs < MIN_DOCS {
        return Err(SimError::Config(format!("n_docs {n_docs} must be at least {MIN_DOCS}")));
    }
    let (min_len, max_len) = doc_len_range;
    if min_len < MIN_DOC_LEN || max_len < min_len {
        return Err(SimError::Config(format!(
            "invalid document length range ({min_len}, {max_len}); need {MIN_DOC_LEN} <= min <= max"
        )));
    }

    let block = vocab_size / topic_count;
    let mut rng = rng_for(&[seed, 0xC0_4905]);
    let mut documents = Vec::with_capacity(n_docs);
    let mut topics = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let topic = rng.gen_range(0..topic_count);
        let len = rng.gen_range(min_len..=max_len);
        let doc = (0..len)
            .map(|_| {
                let id = if rng.gen_bool(TOPIC_TOKEN_SHARE) {
                    topic * block + rng.gen_range(0..block)
                } else {
                    rng.gen_range(0..vocab_size)
                };
                id as TokenId
            })
            .collect();
        documents.push(doc);
        topics.push(topic);
    }
    Ok(Corpus {
        documents,
        topics,
        vocab_size,
        topic_count,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMethod {
    Ict,
    NoisyIct,
    External,
}

impl AnnotationMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ict => "ict",
            Self::NoisyIct => "noisy_ict",
            Self::External => "external",
        }
    }
}

impl std::fmt::Display for AnnotationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnnotationMethod {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ict" => Ok(Self::Ict),
            "noisy_ict" => Ok(Self::NoisyIct),
            "external" => Ok(Self::External),
            other => Err(SimError::Config(format!("unknown annotation method {other:?}"))),
        }
    }
}

fn external() -> AnnotationMethod {
    AnnotationMethod::External
}

/// A (query, positive passage) pair.
///
/// `removed_span` marks a token range cut out of the positive document when it
/// is encoded for training; evaluation always uses the full document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_tokens: Vec<TokenId>,
    pub positive_doc_index: usize,
    #[serde(default = "external")]
    pub annotation_method: AnnotationMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_span: Option<(usize, usize)>,
}

impl TrainingPair {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.query_tokens.is_empty() {
            return Err(SimError::Config("training pair has an empty query".into()));
        }
        if self.positive_doc_index >= corpus.len() {
            return Err(SimError::Config(format!(
                "positive_doc_index {} outside corpus of {} documents",
                self.positive_doc_index,
                corpus.len()
            )));
        }
        if let Some((start, end)) = self.removed_span {
            let len = corpus.document(self.positive_doc_index).len();
            if start >= end || end > len || end - start >= len {
                return Err(SimError::Config(format!(
                    "removed span {start}..{end} invalid for document of length {len}"
                )));
            }
        }
        if let Some(&t) = self.query_tokens.iter().find(|&&t| t as usize >= corpus.vocab_size()) {
            return Err(SimError::Config(format!("query token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Tokens of the positive passage as seen during training.
    pub fn positive_tokens<'c>(&self, corpus: &'c Corpus) -> std::borrow::Cow<'c, [TokenId]> {
        let doc = corpus.document(self.positive_doc_index);
        match self.removed_span {
            None => std::borrow::Cow::Borrowed(doc),
            Some((s, e)) => std::borrow::Cow::Owned(doc[..s].iter().chain(&doc[e..]).copied().collect()),
        }
    }
}

/// Slices `span_len` tokens at `offset` out of `doc` as a pseudo-query.
pub fn extract_span(doc: &[TokenId], offset: usize, span_len: usize) -> Result<Vec<TokenId>> {
    if span_len >= doc.len() || offset + span_len > doc.len() {
        return Err(SimError::Config(format!(
            "span {offset}+{span_len} does not fit strictly inside a document of length {}",
            doc.len()
        )));
    }
    Ok(doc[offset..offset + span_len].to_vec())
}

/// Inverse-cloze pairs over the whole corpus.
pub fn ict_pairs(
    corpus: &Corpus,
    n_pairs: usize,
    span_len: usize,
    remove_span: bool,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let pool: Vec<usize> = (0..corpus.len()).collect();
    ict_pairs_from(corpus, &pool, n_pairs, span_len, remove_span, seed)
}

/// Inverse-cloze pairs from `n_pairs` distinct documents of `pool`: each query
/// is a contiguous span of `span_len` tokens of its positive document.
pub fn ict_pairs_from(
    corpus: &Corpus,
    pool: &[usize],
    n_pairs: usize,
    span_len: usize,
    remove_span: bool,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if n_pairs > pool.len() {
        return Err(SimError::Config(format!(
            "n_pairs {n_pairs} exceeds the {} available documents",
            pool.len()
        )));
    }
    if let Some(&bad) = pool.iter().find(|&&d| d >= corpus.len()) {
        return Err(SimError::Config(format!("document index {bad} outside corpus")));
    }
    let shortest = pool.iter().map(|&d| corpus.document(d).len()).min().unwrap_or(0);
    if span_len < 2 || span_len + 1 > shortest.max(1) {
        return Err(SimError::Config(format!(
            "span_len {span_len} must lie in [2, shortest document - 1 = {}]",
            shortest.saturating_sub(1)
        )));
    }
    // full permutation plus a separate offset stream: the first k pairs do not
    // depend on n_pairs
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng_for(&[seed, 0x1C7]));
    let mut rng = rng_for(&[seed, 0x0FF5]);
    order[..n_pairs]
        .iter()
        .map(|&slot| {
            let doc_index = pool[slot];
            let doc = corpus.document(doc_index);
            let offset = rng.gen_range(0..=doc.len() - span_len);
            Ok(TrainingPair {
                query_tokens: extract_span(doc, offset, span_len)?,
                positive_doc_index: doc_index,
                annotation_method: AnnotationMethod::Ict,
                removed_span: remove_span.then_some((offset, offset + span_len)),
            })
        })
        .collect()
}

/// With probability `noise_rate` per pair, points the pair at a uniformly
/// chosen different document. When `noise_rate > 0` every pair is relabelled
/// `noisy_ict`.
pub fn corrupt_labels(
    pairs: &[TrainingPair],
    noise_rate: f64,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(SimError::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
    }
    if noise_rate == 0.0 {
        return Ok(pairs.to_vec());
    }
    if corpus.len() < 2 {
        return Err(SimError::Config("need at least two documents to corrupt labels".into()));
    }
    let mut rng = rng_for(&[seed, 0xBAD]);
    Ok(pairs
        .iter()
        .map(|p| {
            let mut out = p.clone();
            out.annotation_method = AnnotationMethod::NoisyIct;
            if rng.gen_bool(noise_rate) {
                let j = rng.gen_range(0..corpus.len() - 1);
                out.positive_doc_index = if j >= p.positive_doc_index { j + 1 } else { j };
                out.removed_span = None;
            }
            out
        })
        .collect())
}
