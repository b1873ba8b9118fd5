//! Lifecycle cost model and budget-constrained choice of model size.
//!
//! Total cost is linear: `Z(N, D) = z_data * D + z_train * N (+ z_infer * N)`.
//! For a fixed model size the predicted loss strictly decreases in `D`, so at
//! the optimum the whole remaining budget goes to annotation and the search
//! reduces to one dimension in `N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lawfit::{predict_joint, FitError, JointLawFit};
use crate::optim::golden_section;

/// Coarse grid resolution of [`optimal_allocation`].
pub const COARSE_GRID: usize = 400;
/// Relative tolerance in `n` of the golden-section refinement.
pub const N_REL_TOL: f64 = 1e-6;
/// Lower end of the default model-size search range.
pub const DEFAULT_MIN_PARAMS: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what} must be non-negative and finite, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("utilization must lie in (0, 1], got {0}")]
    Utilization(f64),
    #[error("model exhausts budget: n = {n} leaves {pairs} pairs")]
    ModelExhaustsBudget { n: f64, pairs: f64 },
    #[error("budget {budget} cannot fund any model in [{lo}, {hi}] with at least one pair")]
    Infeasible { budget: f64, lo: f64, hi: f64 },
    #[error("invalid bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("empty model-size grid")]
    EmptyGrid,
    #[error(transparent)]
    Law(#[from] FitError),
}

pub type Result<T> = std::result::Result<T, BudgetError>;

fn positive(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BudgetError::NonPositive { what, value })
    }
}

/// Dollar cost factors per annotated pair and per model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub z_data: f64,
    pub z_train: f64,
    pub z_infer: f64,
    #[serde(default)]
    pub include_inference: bool,
}

impl CostModel {
    pub fn new(z_data: f64, z_train: f64, z_infer: f64, include_inference: bool) -> Result<Self> {
        let model = Self {
            z_data,
            z_train,
            z_infer,
            include_inference,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        positive("z_data", self.z_data)?;
        positive("z_train", self.z_train)?;
        if !(self.z_infer >= 0.0 && self.z_infer.is_finite()) {
            return Err(BudgetError::Negative {
                what: "z_infer",
                value: self.z_infer,
            });
        }
        Ok(())
    }

    pub fn with_inference(self, include_inference: bool) -> Self {
        Self {
            include_inference,
            ..self
        }
    }

    /// Dollars per model parameter under the active cost terms.
    pub fn per_parameter(&self) -> f64 {
        if self.include_inference {
            self.z_train + self.z_infer
        } else {
            self.z_train
        }
    }
}

/// Inputs from which the per-parameter compute costs are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFactorInputs {
    pub dollars_per_pair: f64,
    pub steps: u64,
    pub query_tokens: u64,
    pub passage_tokens: u64,
    pub passages_per_step: u64,
    pub batch_size: u64,
    pub flops_per_param_train: u64,
    pub flops_per_param_infer: u64,
    pub gpu_dollars_per_hour: f64,
    pub gpu_peak_flops: f64,
    pub utilization: f64,
    pub corpus_pages: f64,
    pub tokens_per_page: u64,
}

impl Default for CostFactorInputs {
    /// Single-A100 training, web-scale corpus encoding, human annotation.
    fn default() -> Self {
        Self {
            dollars_per_pair: 0.6,
            steps: 10_000,
            query_tokens: 30,
            passage_tokens: 60,
            passages_per_step: 2,
            batch_size: 256,
            flops_per_param_train: 6,
            flops_per_param_infer: 2,
            gpu_dollars_per_hour: 3.93,
            gpu_peak_flops: 312e12,
            utilization: 0.25,
            corpus_pages: 30e12,
            tokens_per_page: 512,
        }
    }
}

impl CostFactorInputs {
    pub fn validate(&self) -> Result<()> {
        positive("dollars_per_pair", self.dollars_per_pair)?;
        for (what, v) in [
            ("steps", self.steps),
            ("query_tokens", self.query_tokens),
            ("passage_tokens", self.passage_tokens),
            ("passages_per_step", self.passages_per_step),
            ("batch_size", self.batch_size),
            ("flops_per_param_train", self.flops_per_param_train),
            ("flops_per_param_infer", self.flops_per_param_infer),
            ("tokens_per_page", self.tokens_per_page),
        ] {
            if v == 0 {
                return Err(BudgetError::NonPositive { what, value: 0.0 });
            }
        }
        positive("gpu_dollars_per_hour", self.gpu_dollars_per_hour)?;
        positive("gpu_peak_flops", self.gpu_peak_flops)?;
        positive("corpus_pages", self.corpus_pages)?;
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(BudgetError::Utilization(self.utilization));
        }
        Ok(())
    }
}

/// Converts hardware prices and workload sizes into per-pair and
/// per-parameter dollar factors. Inference is off in the returned model.
pub fn derive_cost_factors(inputs: &CostFactorInputs) -> Result<CostModel> {
    inputs.validate()?;
    let dollars_per_flop = inputs.gpu_dollars_per_hour / (inputs.gpu_peak_flops * 3600.0 * inputs.utilization);
    let tokens_per_step = (inputs.query_tokens + inputs.passages_per_step * inputs.passage_tokens) as f64;
    let z_train = inputs.steps as f64
        * tokens_per_step
        * inputs.batch_size as f64
        * inputs.flops_per_param_train as f64
        * dollars_per_flop;
    let z_infer =
        inputs.corpus_pages * inputs.tokens_per_page as f64 * inputs.flops_per_param_infer as f64 * dollars_per_flop;
    CostModel::new(inputs.dollars_per_pair, z_train, z_infer, false)
}

pub fn total_cost(model: &CostModel, n: f64, d: f64) -> Result<f64> {
    positive("n", n)?;
    positive("d", d)?;
    Ok(model.z_data * d + model.per_parameter() * n)
}

/// Annotated pairs affordable after paying for an `n`-parameter model.
pub fn data_for_budget(model: &CostModel, n: f64, budget: f64) -> Result<f64> {
    positive("n", n)?;
    positive("budget", budget)?;
    let pairs = (budget - model.per_parameter() * n) / model.z_data;
    if !(pairs >= 1.0) {
        return Err(BudgetError::ModelExhaustsBudget { n, pairs });
    }
    Ok(pairs)
}

/// Largest model size that still leaves budget for one pair.
pub fn max_feasible_params(model: &CostModel, budget: f64) -> f64 {
    (budget - model.z_data) / model.per_parameter()
}

/// `(1e3, budget / per-parameter cost)`.
pub fn default_n_bounds(model: &CostModel, budget: f64) -> (f64, f64) {
    (DEFAULT_MIN_PARAMS, budget / model.per_parameter())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub n_star: f64,
    pub d_star: f64,
    pub predicted_loss: f64,
    pub total_cost: f64,
}

fn loss_at(law: &JointLawFit, model: &CostModel, n: f64, budget: f64) -> Result<f64> {
    let d = data_for_budget(model, n, budget)?;
    Ok(predict_joint(law, n, d)?)
}

fn log_space(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == points {
                hi
            } else {
                (a + (b - a) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Minimizes predicted loss over model size with the budget fully spent.
///
/// A 400-point log-spaced grid over the feasible part of `n_bounds` locates
/// the basin; golden-section search in `ln n` refines it.
pub fn optimal_allocation(
    law: &JointLawFit,
    model: &CostModel,
    budget: f64,
    n_bounds: (f64, f64),
) -> Result<Allocation> {
    law.validate()?;
    model.validate()?;
    positive("budget", budget)?;
    let (lo, hi) = n_bounds;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(BudgetError::InvalidBounds(lo, hi));
    }
    let hi = hi.min(max_feasible_params(model, budget));
    if !(hi >= lo) {
        return Err(BudgetError::Infeasible {
            budget,
            lo,
            hi: n_bounds.1,
        });
    }

    let grid = log_space(lo, hi, COARSE_GRID);
    let losses: Vec<f64> = grid
        .iter()
        .map(|&n| loss_at(law, model, n, budget).unwrap_or(f64::INFINITY))
        .collect();
    // strict < keeps the smaller n on ties
    let mut best_i = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best_i] {
            best_i = i;
        }
    }
    if !losses[best_i].is_finite() {
        return Err(BudgetError::Infeasible {
            budget,
            lo,
            hi: n_bounds.1,
        });
    }
    let left = grid[best_i.saturating_sub(1)];
    let right = grid[(best_i + 1).min(grid.len() - 1)];
    let (ln_n, refined) = golden_section(
        |t| loss_at(law, model, t.exp(), budget).unwrap_or(f64::INFINITY),
        left.ln(),
        right.ln(),
        N_REL_TOL,
    );
    let n_star = if refined < losses[best_i] {
        ln_n.exp().clamp(lo, hi)
    } else {
        grid[best_i]
    };
    let d_star = data_for_budget(model, n_star, budget)?;
    Ok(Allocation {
        n_star,
        d_star,
        predicted_loss: predict_joint(law, n_star, d_star)?,
        total_cost: total_cost(model, n_star, d_star)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: f64,
    /// `None` when `n` leaves less than one affordable pair.
    pub predicted_loss: Option<f64>,
}

impl CurvePoint {
    pub fn feasible(&self) -> bool {
        self.predicted_loss.is_some()
    }
}

/// Predicted loss at each grid size with the rest of the budget spent on data.
pub fn budget_curve(law: &JointLawFit, model: &CostModel, budget: f64, n_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    law.validate()?;
    model.validate()?;
    positive("budget", budget)?;
    if n_grid.is_empty() {
        return Err(BudgetError::EmptyGrid);
    }
    n_grid
        .iter()
        .map(|&n| {
            positive("n", n)?;
            let predicted_loss = match data_for_budget(model, n, budget) {
                Ok(d) => Some(predict_joint(law, n, d)?),
                Err(BudgetError::ModelExhaustsBudget { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(CurvePoint { n, predicted_loss })
        })
        .collect()
}

/// Log-spaced grid helper for curves and oracles.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    positive("lo", lo)?;
    positive("hi", hi)?;
    if points == 0 {
        return Err(BudgetError::EmptyGrid);
    }
    if hi < lo {
        return Err(BudgetError::InvalidBounds(lo, hi));
    }
    Ok(log_space(lo, hi, points))
}
