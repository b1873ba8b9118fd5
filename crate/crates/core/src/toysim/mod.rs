//! Desk-scale dense-retrieval simulator.
//!
//! Generates topic-structured corpora, derives inverse-cloze training pairs
//! (optionally with corrupted labels), trains a shared dual encoder with the
//! contrastive ranking loss and reports the best held-out contrastive entropy
//! per `(architecture, data size, seed)` cell. The resulting [`RunRecord`]s
//! feed the law fits in [`crate::lawfit`].

mod corpus;
mod encoder;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    corrupt_labels, extract_span, generate_corpus, ict_pairs, ict_pairs_from, AnnotationMethod, Corpus, TokenId,
    TrainingPair, MIN_DOCS, MIN_DOC_LEN, TOPIC_TOKEN_SHARE,
};
pub use encoder::{init_encoder, token_bucket, Encoder, Features, Gradient, Layer};
pub use train::{
    contrastive_loss_and_grad, evaluate_entropy, evaluate_ranking, evaluation_negatives, train, RankingSummary,
    TrainConfig, TrainOutcome, DEFAULT_LEARNING_RATE,
};

use crate::metrics::MetricsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("every pair needs at least one negative")]
    MissingNegatives,
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hashes a coordinate tuple into a 64-bit stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5DEE_CE66_D1CE_5EEDu64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// One trained model: `(N, D, method, seed, best held-out entropy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_size: u64,
    pub data_size: u64,
    pub annotation_method: AnnotationMethod,
    pub seed: u64,
    pub contrastive_entropy: f64,
}

pub const RUN_RECORD_HEADER: &str = "model_size,data_size,annotation_method,seed,contrastive_entropy";

/// CSV with [`RUN_RECORD_HEADER`]; floats use shortest round-trip formatting.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUN_RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model_size, r.data_size, r.annotation_method, r.seed, r.contrastive_entropy
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SimError::Config(format!("run-record CSV: {e}")))?
        .clone();
    let expected: Vec<&str> = RUN_RECORD_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(SimError::Config(format!(
            "run-record CSV header must be `{RUN_RECORD_HEADER}`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RunRecord>().enumerate() {
        let r = row.map_err(|e| SimError::Config(format!("run-record CSV row {}: {e}", i + 2)))?;
        if r.model_size == 0
            || r.data_size == 0
            || !(r.contrastive_entropy >= 0.0)
            || !r.contrastive_entropy.is_finite()
        {
            return Err(SimError::Config(format!(
                "run-record CSV row {}: values out of range",
                i + 2
            )));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub topic_count: usize,
    pub n_docs: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            topic_count: 16,
            n_docs: 5_000,
            doc_len_min: 16,
            doc_len_max: 48,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn generate(&self) -> Result<Corpus> {
        generate_corpus(
            self.vocab_size,
            self.topic_count,
            self.n_docs,
            (self.doc_len_min, self.doc_len_max),
            self.seed,
        )
    }
}

/// How training pairs are produced for a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub method: AnnotationMethod,
    pub noise_rate: f64,
    pub span_len: usize,
    pub remove_span: bool,
    /// Required for [`AnnotationMethod::External`]; used in order, prefixes
    /// give the smaller data sizes.
    pub external_pairs: Option<Vec<TrainingPair>>,
}

impl Default for Annotation {
    fn default() -> Self {
        Self {
            method: AnnotationMethod::Ict,
            noise_rate: 0.0,
            span_len: 8,
            remove_span: false,
            external_pairs: None,
        }
    }
}

/// A full `(architecture x data size x seed)` experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub corpus: CorpusConfig,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub architectures: Vec<Vec<usize>>,
    pub data_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `train.seed` is the master seed every cell stream is derived from.
    pub train: TrainConfig,
    pub annotation: Annotation,
    /// Held-out documents turned into ICT test queries.
    pub test_pairs: usize,
    pub ranking_k: usize,
    pub recall_k: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            feature_dim: 256,
            embedding_dim: 32,
            architectures: vec![vec![]],
            data_sizes: vec![1_000],
            seeds: vec![1],
            train: TrainConfig::default(),
            annotation: Annotation::default(),
            test_pairs: 200,
            ranking_k: 10,
            recall_k: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellId {
    pub architecture: usize,
    pub data_size: usize,
    pub seed: u64,
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "architecture #{} / data_size {} / seed {}",
            self.architecture, self.data_size, self.seed
        )
    }
}

/// A finished cell with the ranking quality of its best checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub cell: CellId,
    pub record: RunRecord,
    pub ranking: RankingSummary,
    pub best_step: usize,
    pub initial_entropy: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cell {cell} failed: {source}")]
pub struct GridError {
    pub cell: CellId,
    pub source: SimError,
    pub completed: Vec<CellReport>,
}

/// Shared inputs of every cell: corpus, held-out test queries and the
/// per-seed training pair lists.
pub struct GridData {
    pub corpus: Corpus,
    pub test_pairs: Vec<TrainingPair>,
    pub train_pool: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.data_sizes.is_empty() || self.seeds.is_empty() {
            return Err(SimError::Config(
                "architectures, data_sizes and seeds must be non-empty".into(),
            ));
        }
        if self.data_sizes.contains(&0) {
            return Err(SimError::Config("data sizes must be at least 1".into()));
        }
        if self.test_pairs == 0 || self.ranking_k == 0 || self.recall_k == 0 {
            return Err(SimError::Config(
                "test_pairs, ranking_k and recall_k must be positive".into(),
            ));
        }
        self.train.validate()
    }

    fn max_data_size(&self) -> usize {
        self.data_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Generates the corpus and the held-out split. The first `test_pairs`
    /// documents of a corpus-seeded permutation are reserved for testing.
    pub fn prepare(&self) -> Result<GridData> {
        self.validate()?;
        let corpus = self.corpus.generate()?;
        if self.test_pairs >= corpus.len() {
            return Err(SimError::Config(format!(
                "test_pairs {} leaves no training documents in a corpus of {}",
                self.test_pairs,
                corpus.len()
            )));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(&[self.corpus.seed, 0x5B1, 0x17]));
        }
        let (test_docs, pool) = order.split_at(self.test_pairs);
        let test_pairs = ict_pairs_from(
            &corpus,
            test_docs,
            test_docs.len(),
            self.annotation.span_len,
            false,
            derive_seed(&[self.corpus.seed, 0x7E57]),
        )?;
        let mut train_pool = pool.to_vec();
        train_pool.sort_unstable();
        Ok(GridData {
            corpus,
            test_pairs,
            train_pool,
        })
    }

    /// Training pairs for one grid seed, long enough for the largest data size.
    /// Smaller data sizes use prefixes of this list.
    pub fn training_pairs(&self, data: &GridData, seed: u64) -> Result<Vec<TrainingPair>> {
        let need = self.max_data_size();
        let master = self.train.seed;
        let pairs = match self.annotation.method {
            AnnotationMethod::External => {
                let ext = self
                    .annotation
                    .external_pairs
                    .as_ref()
                    .ok_or_else(|| SimError::Config("external annotation requires pairs".into()))?;
                if ext.len() < need {
                    return Err(SimError::Config(format!(
                        "{} external pairs cannot cover data size {need}",
                        ext.len()
                    )));
                }
                let mut pairs = ext[..need].to_vec();
                for p in &mut pairs {
                    p.validate(&data.corpus)?;
                    p.annotation_method = AnnotationMethod::External;
                }
                pairs
            }
            AnnotationMethod::Ict | AnnotationMethod::NoisyIct => ict_pairs_from(
                &data.corpus,
                &data.train_pool,
                need,
                self.annotation.span_len,
                self.annotation.remove_span,
                derive_seed(&[master, seed, 0x1C7]),
            )?,
        };
        corrupt_labels(
            &pairs,
            self.annotation.noise_rate,
            &data.corpus,
            derive_seed(&[master, seed, 0xC0]),
        )
    }

    fn method(&self) -> AnnotationMethod {
        match self.annotation.method {
            AnnotationMethod::External => AnnotationMethod::External,
            _ if self.annotation.noise_rate > 0.0 => AnnotationMethod::NoisyIct,
            m => m,
        }
    }

    /// Trains and evaluates a single cell.
    pub fn run_cell(&self, data: &GridData, pairs: &[TrainingPair], cell: CellId) -> Result<CellReport> {
        let widths = self
            .architectures
            .get(cell.architecture)
            .ok_or_else(|| SimError::Config(format!("no architecture #{}", cell.architecture)))?;
        if cell.data_size > pairs.len() || cell.data_size == 0 {
            return Err(SimError::Config(format!(
                "data size {} outside the {} available pairs",
                cell.data_size,
                pairs.len()
            )));
        }
        let master = self.train.seed;
        let encoder = init_encoder(
            self.feature_dim,
            widths,
            self.embedding_dim,
            derive_seed(&[master, cell.architecture as u64, cell.seed, 0x1A17]),
        )?;
        let model_size = encoder.param_count() as u64;
        let config = TrainConfig {
            seed: derive_seed(&[master, cell.architecture as u64, cell.data_size as u64, cell.seed]),
            ..self.train
        };
        let outcome = train(
            encoder,
            &pairs[..cell.data_size],
            &data.corpus,
            &config,
            &data.test_pairs,
        )?;
        let ranking = evaluate_ranking(
            &outcome.best_encoder,
            &data.test_pairs,
            &data.corpus,
            self.ranking_k,
            self.recall_k,
        )?;
        Ok(CellReport {
            cell,
            record: RunRecord {
                model_size,
                data_size: cell.data_size as u64,
                annotation_method: self.method(),
                seed: cell.seed,
                contrastive_entropy: outcome.best_eval_entropy,
            },
            ranking,
            best_step: outcome.best_step,
            initial_entropy: outcome.trace[0].1,
        })
    }

    /// Cells in row order: architecture (as listed), then data size and seed ascending.
    pub fn cells(&self) -> Vec<CellId> {
        let mut sizes = self.data_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut cells = Vec::new();
        for architecture in 0..self.architectures.len() {
            for &data_size in &sizes {
                for &seed in &seeds {
                    cells.push(CellId {
                        architecture,
                        data_size,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

/// Runs every cell and keeps the per-cell ranking metrics.
///
/// On failure the first failing cell is reported together with every cell that
/// did complete.
pub fn run_grid_detailed(spec: &GridSpec) -> std::result::Result<Vec<CellReport>, GridError> {
    let first = CellId {
        architecture: 0,
        data_size: spec.data_sizes.first().copied().unwrap_or(0),
        seed: spec.seeds.first().copied().unwrap_or(0),
    };
    let fail = |cell, source, completed| GridError {
        cell,
        source,
        completed,
    };
    let data = spec.prepare().map_err(|e| fail(first, e, Vec::new()))?;

    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut pairs_by_seed = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let pairs = spec
            .training_pairs(&data, seed)
            .map_err(|e| fail(CellId { seed, ..first }, e, Vec::new()))?;
        pairs_by_seed.push((seed, pairs));
    }

    let mut completed = Vec::new();
    let mut failure = None;
    for cell in spec.cells() {
        let pairs = &pairs_by_seed
            .iter()
            .find(|(s, _)| *s == cell.seed)
            .expect("pairs for every seed")
            .1;
        match spec.run_cell(&data, pairs, cell) {
            Ok(report) => completed.push(report),
            Err(e) => {
                if failure.is_none() {
                    failure = Some((cell, e));
                }
            }
        }
    }
    match failure {
        None => Ok(completed),
        Some((cell, source)) => Err(fail(cell, source, completed)),
    }
}

/// One [`RunRecord`] per `(architecture, data size, seed)` cell.
pub fn run_grid(spec: &GridSpec) -> std::result::Result<Vec<RunRecord>, GridError> {
    run_grid_detailed(spec).map(|cells| cells.into_iter().map(|c| c.record).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_coordinates() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[1]), derive_seed(&[1, 0]));
        assert_eq!(derive_seed(&[3, 4]), derive_seed(&[3, 4]));
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            RunRecord {
                model_size: 8224,
                data_size: 500,
                annotation_method: AnnotationMethod::Ict,
                seed: 1,
                contrastive_entropy: 1.234_567_890_123,
            },
            RunRecord {
                model_size: 18592,
                data_size: 4000,
                annotation_method: AnnotationMethod::NoisyIct,
                seed: 2,
                contrastive_entropy: 0.1,
            },
        ];
        let text = records_to_csv(&records);
        assert!(text.starts_with(RUN_RECORD_HEADER));
        assert_eq!(records_from_csv(&text).unwrap(), records);
        assert!(records_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn cells_follow_row_order() {
        let spec = GridSpec {
            architectures: vec![vec![], vec![4]],
            data_sizes: vec![40, 20],
            seeds: vec![3, 1],
            ..Default::default()
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(
            cells[0],
            CellId {
                architecture: 0,
                data_size: 20,
                seed: 1
            }
        );
        assert_eq!(
            cells[7],
            CellId {
                architecture: 1,
                data_size: 40,
                seed: 3
            }
        );
    }

    fn tiny_spec() -> GridSpec {
        GridSpec {
            corpus: CorpusConfig {
                vocab_size: 256,
                topic_count: 8,
                n_docs: 300,
                doc_len_min: 12,
                doc_len_max: 24,
                seed: 5,
            },
            feature_dim: 64,
            embedding_dim: 8,
            architectures: vec![vec![], vec![16], vec![32]],
            data_sizes: vec![20, 40, 60, 80],
            seeds: vec![1, 2],
            train: TrainConfig {
                steps: 10,
                batch_size: 8,
                negatives_per_query: 4,
                eval_every: 5,
                eval_negatives: 32,
                ..Default::default()
            },
            annotation: Annotation {
                span_len: 4,
                ..Default::default()
            },
            test_pairs: 20,
            ..Default::default()
        }
    }

    #[test]
    fn grid_cardinality_and_prefixes() {
        let spec = tiny_spec();
        let records = run_grid(&spec).unwrap();
        assert_eq!(records.len(), 24);
        let data = spec.prepare().unwrap();
        let pairs = spec.training_pairs(&data, 1).unwrap();
        assert_eq!(pairs.len(), 80);
        let shorter = GridSpec {
            data_sizes: vec![20, 40],
            ..spec.clone()
        };
        assert_eq!(shorter.training_pairs(&data, 1).unwrap()[..], pairs[..40]);
        // test documents are never training positives
        let test_docs: Vec<usize> = data.test_pairs.iter().map(|p| p.positive_doc_index).collect();
        assert!(pairs.iter().all(|p| !test_docs.contains(&p.positive_doc_index)));
    }

    #[test]
    fn single_cell_equals_direct_training() {
        let spec = GridSpec {
            architectures: vec![vec![16]],
            data_sizes: vec![40],
            seeds: vec![2],
            ..tiny_spec()
        };
        let records = run_grid(&spec).unwrap();
        let data = spec.prepare().unwrap();
        let pairs = spec.training_pairs(&data, 2).unwrap();
        let master = spec.train.seed;
        let enc = init_encoder(64, &[16], 8, derive_seed(&[master, 0, 2, 0x1A17])).unwrap();
        let cfg = TrainConfig {
            seed: derive_seed(&[master, 0, 40, 2]),
            ..spec.train
        };
        let out = train(enc.clone(), &pairs[..40], &data.corpus, &cfg, &data.test_pairs).unwrap();
        assert_eq!(records[0].contrastive_entropy, out.best_eval_entropy);
        let direct = evaluate_entropy(&out.best_encoder, &data.test_pairs, &data.corpus, 32, cfg.eval_seed).unwrap();
        assert_eq!(direct, out.best_eval_entropy);
        assert_eq!(records[0].model_size, enc.param_count() as u64);
    }

    #[test]
    fn grid_failure_keeps_completed_cells() {
        let mut spec = tiny_spec();
        spec.architectures = vec![vec![8]];
        spec.data_sizes = vec![20];
        spec.seeds = vec![1];
        spec.train.learning_rate = 1e300;
        let err = run_grid_detailed(&spec).unwrap_err();
        assert!(matches!(err.source, SimError::Diverged { .. }));
        assert!(err.completed.is_empty());

        let mut spec = tiny_spec();
        spec.corpus.n_docs = 120;
        spec.test_pairs = 20;
        spec.data_sizes = vec![500];
        assert!(run_grid(&spec).is_err());
    }

    #[test]
    fn noisy_grid_labels_records() {
        let mut spec = tiny_spec();
        spec.architectures = vec![vec![]];
        spec.data_sizes = vec![20];
        spec.seeds = vec![1];
        spec.annotation.noise_rate = 0.5;
        let records = run_grid(&spec).unwrap();
        assert_eq!(records[0].annotation_method, AnnotationMethod::NoisyIct);
    }
}
