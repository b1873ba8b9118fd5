//! The `drscale` command line.
//!
//! Exit codes: 0 on success, 2 for unusable input (bad flags, files, schemas),
//! 3 when a computation fails on valid input.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{self, BudgetError, CostFactorInputs, CostModel};
use crate::lawfit::{self, FitError, FitSpace, JointLawFit, JointObservation, Observation, PowerLawFit};
use crate::metrics::{self, EvalSample};
use crate::toysim::{
    self, Annotation, AnnotationMethod, CellReport, CorpusConfig, GridSpec, RunRecord, SimError, TrainConfig,
    TrainingPair,
};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Compute(_) => EXIT_COMPUTE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(msg: impl std::fmt::Display) -> CliError {
    CliError::Input(msg.to_string())
}

fn compute(msg: impl std::fmt::Display) -> CliError {
    CliError::Compute(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "drscale",
    version,
    about = "Scaling laws, budgets and a toy simulator for dense retrieval"
)]
pub struct Cli {
    /// Write the result here instead of standard output
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Master seed for every simulator stream
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Model,
    Data,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a grid of toy dual encoders and write run records (CSV)
    Simulate {
        /// Grid configuration (JSON)
        config: PathBuf,
        /// Also write per-cell ranking metrics of the best checkpoints (CSV)
        #[arg(long)]
        metrics_output: Option<PathBuf>,
    },
    /// Fit loss = (scale / x)^exponent + floor along one axis of a run-record CSV
    Fit {
        records: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Keep only rows with this data size
        #[arg(long)]
        data_size: Option<u64>,
        /// Keep only rows with this model size
        #[arg(long)]
        model_size: Option<u64>,
        /// Keep only rows with this annotation method
        #[arg(long)]
        method: Option<AnnotationMethod>,
    },
    /// Fit the joint model/data law to a run-record CSV
    FitJoint {
        records: PathBuf,
        #[arg(long)]
        method: Option<AnnotationMethod>,
    },
    /// Evaluate a fitted law (`--x` for single fits, `--n` and `--d` for joint fits)
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        x: Option<f64>,
        #[arg(long)]
        n: Option<f64>,
        #[arg(long)]
        d: Option<f64>,
    },
    /// Loss-optimal model size and data size for a dollar budget
    Allocate {
        #[arg(long)]
        fit: PathBuf,
        #[command(flatten)]
        costs: CostArgs,
        #[arg(long, allow_negative_numbers = true)]
        budget: f64,
        #[arg(long)]
        include_inference: bool,
    },
    /// Predicted loss along a log grid of model sizes at a fixed budget (CSV)
    BudgetCurve {
        #[arg(long)]
        fit: PathBuf,
        #[command(flatten)]
        costs: CostArgs,
        #[arg(long, allow_negative_numbers = true)]
        budget: f64,
        #[arg(long)]
        include_inference: bool,
        /// Smallest model size (default 1e3)
        #[arg(long)]
        n_min: Option<f64>,
        /// Largest model size (default: budget / per-parameter cost)
        #[arg(long)]
        n_max: Option<f64>,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Per-pair and per-parameter dollar costs
    DeriveCosts(DeriveArgs),
    /// Contrastive entropy per query from a score file (JSON lines)
    Eval { scores: PathBuf },
    /// Correlate entropy (first column) with a ranking metric (second column)
    Correlate { table: PathBuf },
}

/// Cost factors for `allocate` and `budget-curve`; unset factors fall back to
/// the defaults of `derive-costs`.
#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    /// Cost model JSON as written by `derive-costs`
    #[arg(long, conflicts_with_all = ["z_data", "z_train", "z_infer"])]
    pub costs: Option<PathBuf>,
    /// Dollars per annotated pair
    #[arg(long, allow_negative_numbers = true)]
    pub z_data: Option<f64>,
    /// Training dollars per parameter
    #[arg(long, allow_negative_numbers = true)]
    pub z_train: Option<f64>,
    /// Corpus-encoding dollars per parameter
    #[arg(long, allow_negative_numbers = true)]
    pub z_infer: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DeriveArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub dollars_per_pair: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub query_tokens: Option<u64>,
    #[arg(long)]
    pub passage_tokens: Option<u64>,
    #[arg(long)]
    pub passages_per_step: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub flops_per_param_train: Option<u64>,
    #[arg(long)]
    pub flops_per_param_infer: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gpu_dollars_per_hour: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gpu_peak_flops: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub utilization: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub corpus_pages: Option<f64>,
    #[arg(long)]
    pub tokens_per_page: Option<u64>,
}

impl DeriveArgs {
    pub fn inputs(&self) -> CostFactorInputs {
        let d = CostFactorInputs::default();
        CostFactorInputs {
            dollars_per_pair: self.dollars_per_pair.unwrap_or(d.dollars_per_pair),
            steps: self.steps.unwrap_or(d.steps),
            query_tokens: self.query_tokens.unwrap_or(d.query_tokens),
            passage_tokens: self.passage_tokens.unwrap_or(d.passage_tokens),
            passages_per_step: self.passages_per_step.unwrap_or(d.passages_per_step),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            flops_per_param_train: self.flops_per_param_train.unwrap_or(d.flops_per_param_train),
            flops_per_param_infer: self.flops_per_param_infer.unwrap_or(d.flops_per_param_infer),
            gpu_dollars_per_hour: self.gpu_dollars_per_hour.unwrap_or(d.gpu_dollars_per_hour),
            gpu_peak_flops: self.gpu_peak_flops.unwrap_or(d.gpu_peak_flops),
            utilization: self.utilization.unwrap_or(d.utilization),
            corpus_pages: self.corpus_pages.unwrap_or(d.corpus_pages),
            tokens_per_page: self.tokens_per_page.unwrap_or(d.tokens_per_page),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleParams {
    pub scale: f64,
    pub exponent: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub floor: f64,
}

/// The on-disk form of a fitted law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitDocument {
    Single {
        params: SingleParams,
        r_squared: f64,
        fit_space: FitSpace,
        n_points: usize,
    },
    Joint {
        params: JointParams,
        rmse: f64,
        fit_space: FitSpace,
        n_points: usize,
    },
}

impl FitDocument {
    pub fn from_single(fit: &PowerLawFit, n_points: usize) -> Self {
        Self::Single {
            params: SingleParams {
                scale: fit.scale,
                exponent: fit.exponent,
                floor: fit.floor,
            },
            r_squared: fit.r_squared,
            fit_space: fit.fit_space,
            n_points,
        }
    }

    pub fn from_joint(fit: &JointLawFit, n_points: usize) -> Self {
        Self::Joint {
            params: JointParams {
                a: fit.a,
                b: fit.b,
                alpha: fit.alpha,
                beta: fit.beta,
                floor: fit.floor,
            },
            rmse: fit.rmse,
            fit_space: FitSpace::LogResidual,
            n_points,
        }
    }

    pub fn single(&self) -> Option<PowerLawFit> {
        match *self {
            Self::Single {
                params,
                r_squared,
                fit_space,
                ..
            } => Some(PowerLawFit {
                scale: params.scale,
                exponent: params.exponent,
                floor: params.floor,
                r_squared,
                fit_space,
            }),
            Self::Joint { .. } => None,
        }
    }

    pub fn joint(&self) -> Option<JointLawFit> {
        match *self {
            Self::Joint { params, rmse, .. } => Some(JointLawFit {
                a: params.a,
                b: params.b,
                alpha: params.alpha,
                beta: params.beta,
                floor: params.floor,
                rmse,
            }),
            Self::Single { .. } => None,
        }
    }

    pub fn n_points(&self) -> usize {
        match *self {
            Self::Single { n_points, .. } | Self::Joint { n_points, .. } => n_points,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fit documents hold finite numbers");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| input(format!("fit JSON: {e}")))?;
        let valid = match (doc.single(), doc.joint()) {
            (Some(f), _) => f.validate(),
            (_, Some(f)) => f.validate(),
            _ => unreachable!(),
        };
        valid.map_err(|e| input(format!("fit JSON: {e}")))?;
        Ok(doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutput {
    pub n_star: f64,
    pub d_star: f64,
    pub predicted_loss: f64,
    pub total_cost: f64,
    pub include_inference: bool,
    /// Whole pairs that fit in the budget at `n_star`.
    pub d_star_rounded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub negatives_per_query: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub eval_negatives: usize,
    pub eval_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            negatives_per_query: t.negatives_per_query,
            learning_rate: t.learning_rate,
            eval_every: t.eval_every,
            eval_negatives: t.eval_negatives,
            eval_seed: t.eval_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub method: AnnotationMethod,
    pub noise_rate: f64,
    pub span_len: usize,
    pub remove_span: bool,
    /// JSON lines of `{"query_tokens": [...], "positive_doc_index": k}`,
    /// relative to the config file.
    pub pairs_path: Option<PathBuf>,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        let a = Annotation::default();
        Self {
            method: a.method,
            noise_rate: a.noise_rate,
            span_len: a.span_len,
            remove_span: a.remove_span,
            pairs_path: None,
        }
    }
}

fn default_feature_dim() -> usize {
    GridSpec::default().feature_dim
}
fn default_embedding_dim() -> usize {
    GridSpec::default().embedding_dim
}
fn default_test_pairs() -> usize {
    GridSpec::default().test_pairs
}
fn default_ranking_k() -> usize {
    GridSpec::default().ranking_k
}
fn default_recall_k() -> usize {
    GridSpec::default().recall_k
}

/// `simulate` configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Hidden-layer widths per architecture; `[]` is a linear encoder.
    pub architectures: Vec<Vec<usize>>,
    pub data_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_test_pairs")]
    pub test_pairs: usize,
    #[serde(default = "default_ranking_k")]
    pub ranking_k: usize,
    #[serde(default = "default_recall_k")]
    pub recall_k: usize,
}

impl SimulateConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| input(format!("simulate config: {e}")))
    }

    /// Resolves the grid; `base_dir` anchors a relative `pairs_path`.
    pub fn to_spec(&self, master_seed: u64, base_dir: &Path) -> Result<GridSpec> {
        let a = &self.annotation;
        let external_pairs = match (a.method, &a.pairs_path) {
            (AnnotationMethod::External, Some(path)) => Some(load_pairs(&base_dir.join(path))?),
            (AnnotationMethod::External, None) => {
                return Err(input("annotation.method external needs annotation.pairs_path"))
            }
            (_, Some(_)) => return Err(input("annotation.pairs_path is only used with method external")),
            (_, None) => None,
        };
        if a.method == AnnotationMethod::NoisyIct && a.noise_rate <= 0.0 {
            return Err(input("annotation.method noisy_ict needs noise_rate > 0"));
        }
        let t = self.train;
        let spec = GridSpec {
            corpus: self.corpus,
            feature_dim: self.feature_dim,
            embedding_dim: self.embedding_dim,
            architectures: self.architectures.clone(),
            data_sizes: self.data_sizes.clone(),
            seeds: self.seeds.clone(),
            train: TrainConfig {
                steps: t.steps,
                batch_size: t.batch_size,
                negatives_per_query: t.negatives_per_query,
                learning_rate: t.learning_rate,
                eval_every: t.eval_every,
                eval_negatives: t.eval_negatives,
                eval_seed: t.eval_seed,
                seed: master_seed,
            },
            annotation: Annotation {
                method: a.method,
                noise_rate: a.noise_rate,
                span_len: a.span_len,
                remove_span: a.remove_span,
                external_pairs,
            },
            test_pairs: self.test_pairs,
            ranking_k: self.ranking_k,
            recall_k: self.recall_k,
        };
        spec.validate().map_err(|e| input(format!("simulate config: {e}")))?;
        Ok(spec)
    }
}

/// Reads annotation pairs, one JSON object per line; blank lines are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let text = read(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut pair: TrainingPair =
            serde_json::from_str(line).map_err(|e| input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        pair.annotation_method = AnnotationMethod::External;
        pairs.push(pair);
    }
    Ok(pairs)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

fn fit_error(e: FitError) -> CliError {
    match e {
        FitError::TooFewPoints { .. }
        | FitError::TooFewDistinct { .. }
        | FitError::NonPositive { .. }
        | FitError::LengthMismatch { .. } => input(e),
        other => compute(other),
    }
}

fn fit_cannot_fit(e: FitError) -> CliError {
    match e {
        FitError::NotConverged { ref best, evaluations } => compute(format!(
            "{e}; best after {evaluations} evaluations: a={} b={} alpha={} beta={} floor={} rmse={}",
            best.a, best.b, best.alpha, best.beta, best.floor, best.rmse
        )),
        other => fit_error(other),
    }
}

/// Cells as CSV with the ranking quality of each best checkpoint.
pub fn cell_metrics_csv(cells: &[CellReport]) -> String {
    let mut out =
        String::from("model_size,data_size,annotation_method,seed,contrastive_entropy,ndcg,map,recall,k,recall_k\n");
    for c in cells {
        let r = &c.record;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.model_size,
            r.data_size,
            r.annotation_method,
            r.seed,
            r.contrastive_entropy,
            c.ranking.ndcg,
            c.ranking.map,
            c.ranking.recall,
            c.ranking.k,
            c.ranking.recall_k
        ));
    }
    out
}

fn cmd_simulate(config: &Path, metrics_output: Option<&Path>, seed: u64) -> Result<String> {
    let cfg = SimulateConfig::parse(&read(config)?)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let spec = cfg.to_spec(seed, base)?;
    let cells = toysim::run_grid_detailed(&spec).map_err(|e| match e.source {
        SimError::Config(_) => input(&e),
        _ => compute(&e),
    })?;
    if let Some(path) = metrics_output {
        write(path, &cell_metrics_csv(&cells))?;
    }
    let records: Vec<RunRecord> = cells.into_iter().map(|c| c.record).collect();
    Ok(toysim::records_to_csv(&records))
}

fn load_records(path: &Path, method: Option<AnnotationMethod>) -> Result<Vec<RunRecord>> {
    let records = toysim::records_from_csv(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let records: Vec<RunRecord> = match method {
        Some(m) => records.into_iter().filter(|r| r.annotation_method == m).collect(),
        None => records,
    };
    let mut methods: Vec<AnnotationMethod> = records.iter().map(|r| r.annotation_method).collect();
    methods.sort();
    methods.dedup();
    if methods.len() > 1 {
        return Err(input(format!(
            "rows mix annotation methods {methods:?}; choose one with --method"
        )));
    }
    Ok(records)
}

type RecordKey = fn(&RunRecord) -> u64;

fn cmd_fit(
    path: &Path,
    axis: Axis,
    data_size: Option<u64>,
    model_size: Option<u64>,
    method: Option<AnnotationMethod>,
) -> Result<String> {
    let rows: Vec<RunRecord> = load_records(path, method)?
        .into_iter()
        .filter(|r| data_size.is_none_or(|d| r.data_size == d))
        .filter(|r| model_size.is_none_or(|n| r.model_size == n))
        .collect();
    let (x_of, other_of, other_flag): (RecordKey, RecordKey, &str) = match axis {
        Axis::Model => (|r| r.model_size, |r| r.data_size, "--data-size"),
        Axis::Data => (|r| r.data_size, |r| r.model_size, "--model-size"),
    };
    let mut others: Vec<u64> = rows.iter().map(other_of).collect();
    others.sort_unstable();
    others.dedup();
    if others.len() > 1 {
        return Err(input(format!(
            "rows span {} values of the fixed axis ({others:?}); choose one with {other_flag}",
            others.len()
        )));
    }
    // best loss over seeds
    let mut best: BTreeMap<u64, f64> = BTreeMap::new();
    for r in &rows {
        let slot = best.entry(x_of(r)).or_insert(f64::INFINITY);
        *slot = slot.min(r.contrastive_entropy);
    }
    if best.len() < 3 {
        return Err(input(format!(
            "need at least 3 distinct sizes after filtering, got {}",
            best.len()
        )));
    }
    let points: Vec<Observation> = best.iter().map(|(&x, &l)| Observation::new(x as f64, l)).collect();
    let fit = lawfit::fit_single_law(&points).map_err(|e| match e {
        FitError::NonPositive { .. } => input(e),
        other => compute(other),
    })?;
    Ok(FitDocument::from_single(&fit, points.len()).to_json())
}

fn cmd_fit_joint(path: &Path, method: Option<AnnotationMethod>) -> Result<String> {
    let rows = load_records(path, method)?;
    let mut best: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for r in &rows {
        let slot = best.entry((r.model_size, r.data_size)).or_insert(f64::INFINITY);
        *slot = slot.min(r.contrastive_entropy);
    }
    let points: Vec<JointObservation> = best
        .iter()
        .map(|(&(n, d), &l)| JointObservation::new(n as f64, d as f64, l))
        .collect();
    let fit = lawfit::fit_joint_law(&points).map_err(fit_cannot_fit)?;
    Ok(FitDocument::from_joint(&fit, points.len()).to_json())
}

fn load_fit(path: &Path) -> Result<FitDocument> {
    FitDocument::parse(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_predict(path: &Path, x: Option<f64>, n: Option<f64>, d: Option<f64>) -> Result<String> {
    let doc = load_fit(path)?;
    let value = match (doc.single(), doc.joint(), x, n, d) {
        (Some(fit), _, Some(x), None, None) => lawfit::predict_single(&fit, x),
        (Some(_), ..) => return Err(input("a single-law fit takes --x only")),
        (_, Some(fit), None, Some(n), Some(d)) => lawfit::predict_joint(&fit, n, d),
        _ => return Err(input("a joint fit takes --n and --d only")),
    };
    let value = value.map_err(input)?;
    Ok(format!("{value}\n"))
}

fn budget_error(e: BudgetError) -> CliError {
    match e {
        BudgetError::InvalidBounds(..) | BudgetError::EmptyGrid => input(e),
        other => compute(other),
    }
}

fn resolve_costs(args: &CostArgs, include_inference: bool) -> Result<CostModel> {
    let model = match &args.costs {
        Some(path) => {
            let m: CostModel =
                serde_json::from_str(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
            m
        }
        None => {
            let base = budget::derive_cost_factors(&CostFactorInputs::default()).expect("default inputs are valid");
            CostModel {
                z_data: args.z_data.unwrap_or(base.z_data),
                z_train: args.z_train.unwrap_or(base.z_train),
                z_infer: args.z_infer.unwrap_or(base.z_infer),
                include_inference,
            }
        }
    };
    let model = model.with_inference(include_inference);
    model.validate().map_err(input)?;
    Ok(model)
}

fn joint_fit_required(path: &Path) -> Result<JointLawFit> {
    load_fit(path)?
        .joint()
        .ok_or_else(|| input(format!("{}: joint fit required", path.display())))
}

pub fn allocate(law: &JointLawFit, model: &CostModel, budget: f64) -> Result<AllocationOutput> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(compute(format!("budget must be positive and finite, got {budget}")));
    }
    let bounds = budget::default_n_bounds(model, budget);
    let a = budget::optimal_allocation(law, model, budget, bounds).map_err(compute)?;
    Ok(AllocationOutput {
        n_star: a.n_star,
        d_star: a.d_star,
        predicted_loss: a.predicted_loss,
        total_cost: a.total_cost,
        include_inference: model.include_inference,
        d_star_rounded: a.d_star.floor() as u64,
    })
}

fn cmd_allocate(fit: &Path, costs: &CostArgs, budget_dollars: f64, include_inference: bool) -> Result<String> {
    let law = joint_fit_required(fit)?;
    let model = resolve_costs(costs, include_inference)?;
    let out = allocate(&law, &model, budget_dollars)?;
    Ok(serde_json::to_string_pretty(&out).expect("finite allocation") + "\n")
}

#[allow(clippy::too_many_arguments)]
fn cmd_budget_curve(
    fit: &Path,
    costs: &CostArgs,
    budget_dollars: f64,
    include_inference: bool,
    n_min: Option<f64>,
    n_max: Option<f64>,
    points: usize,
) -> Result<String> {
    let law = joint_fit_required(fit)?;
    let model = resolve_costs(costs, include_inference)?;
    if !(budget_dollars > 0.0 && budget_dollars.is_finite()) {
        return Err(compute(format!(
            "budget must be positive and finite, got {budget_dollars}"
        )));
    }
    let (lo, hi) = budget::default_n_bounds(&model, budget_dollars);
    let grid = budget::log_grid(n_min.unwrap_or(lo), n_max.unwrap_or(hi), points).map_err(input)?;
    let curve = budget::budget_curve(&law, &model, budget_dollars, &grid).map_err(budget_error)?;
    let mut out = String::from("n,predicted_loss,feasible\n");
    for p in curve {
        match p.predicted_loss {
            Some(l) => out.push_str(&format!("{},{l},true\n", p.n)),
            None => out.push_str(&format!("{},,false\n", p.n)),
        }
    }
    Ok(out)
}

/// Rounds to `digits` significant digits.
pub fn round_significant(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .expect("formatted float parses")
}

fn cmd_derive_costs(args: &DeriveArgs) -> Result<String> {
    let inputs = args.inputs();
    let m = budget::derive_cost_factors(&inputs).map_err(input)?;
    let rounded = CostModel {
        z_data: round_significant(m.z_data, 6),
        z_train: round_significant(m.z_train, 6),
        z_infer: round_significant(m.z_infer, 6),
        include_inference: m.include_inference,
    };
    Ok(serde_json::to_string_pretty(&rounded).expect("finite costs") + "\n")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    qid: String,
    positive: f64,
    negatives: Vec<f64>,
}

pub const MEAN_ROW: &str = "__mean__";

fn cmd_eval(path: &Path) -> Result<String> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| input(format!("{}:{}: {e}", path.display(), i + 1));
        let s: ScoreLine = serde_json::from_str(line).map_err(|e| at(&e))?;
        if s.qid == MEAN_ROW {
            return Err(at(&format!("qid {MEAN_ROW} is reserved")));
        }
        let sample = EvalSample::new(s.positive, s.negatives).map_err(|e| at(&e))?;
        let entropy = metrics::contrastive_entropy(&sample).map_err(|e| at(&e))?;
        rows.push((s.qid, entropy));
    }
    if rows.is_empty() {
        return Err(input(format!("{}: no score lines", path.display())));
    }
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |a: &str, b: &str| w.write_record([a, b]).map_err(compute);
    put("qid", "contrastive_entropy")?;
    for (qid, v) in &rows {
        put(qid, &v.to_string())?;
    }
    put(MEAN_ROW, &mean.to_string())?;
    let bytes = w.into_inner().map_err(compute)?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

fn cmd_correlate(path: &Path) -> Result<String> {
    let text = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let width = reader
        .headers()
        .map_err(|e| input(format!("{}: {e}", path.display())))?
        .len();
    if width != 2 {
        return Err(input(format!("{}: expected 2 columns, found {width}", path.display())));
    }
    let (mut entropies, mut values) = (Vec::new(), Vec::new());
    for (i, row) in reader.records().enumerate() {
        let at = |e: &dyn std::fmt::Display| input(format!("{}: row {}: {e}", path.display(), i + 2));
        let row = row.map_err(|e| at(&e))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| at(&format!("{s:?}: {e}")));
        entropies.push(num(&row[0])?);
        values.push(num(&row[1])?);
    }
    let report = metrics::correlate(&entropies, &values).map_err(input)?;
    Ok(serde_json::to_string_pretty(&report).expect("finite report") + "\n")
}

/// Executes a parsed command and returns what should be written to the output.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Simulate { config, metrics_output } => cmd_simulate(config, metrics_output.as_deref(), cli.seed),
        Command::Fit {
            records,
            axis,
            data_size,
            model_size,
            method,
        } => cmd_fit(records, *axis, *data_size, *model_size, *method),
        Command::FitJoint { records, method } => cmd_fit_joint(records, *method),
        Command::Predict { fit, x, n, d } => cmd_predict(fit, *x, *n, *d),
        Command::Allocate {
            fit,
            costs,
            budget,
            include_inference,
        } => cmd_allocate(fit, costs, *budget, *include_inference),
        Command::BudgetCurve {
            fit,
            costs,
            budget,
            include_inference,
            n_min,
            n_max,
            points,
        } => cmd_budget_curve(fit, costs, *budget, *include_inference, *n_min, *n_max, *points),
        Command::DeriveCosts(args) => cmd_derive_costs(args),
        Command::Eval { scores } => cmd_eval(scores),
        Command::Correlate { table } => cmd_correlate(table),
    }
}

/// Parses `args`, runs the command, writes the result and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    let result = run(&cli).and_then(|text| match &cli.output {
        Some(path) => write(path, &text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| input(format!("cannot write output: {e}")))
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("drscale: {e}");
            e.exit_code()
        }
    }
}
