//! Power-law fits of contrastive entropy against model size and data size.
//!
//! Single-variable law: `L(x) = (scale / x)^exponent + floor`.
//! Joint law: `L(n, d) = ((a / n)^(alpha / beta) + b / d)^beta + floor`.
//!
//! Both fits work with log residuals. The single law is linear in
//! `log(L - floor)` vs `log(x)` once the floor is fixed, so the floor is found
//! by a one-dimensional search around an ordinary least-squares inner solve.
//! The joint law has ridges along which `(a, alpha)` trade off, so it is fit
//! with multi-start Nelder–Mead and judged by its predictions rather than its
//! coefficients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{golden_section, nelder_mead, NelderMeadOptions};

/// Floors are kept strictly below the smallest observed loss by this factor.
pub const FLOOR_CAP: f64 = 0.999;
/// Absolute tolerance of the floor search.
pub const FLOOR_TOL: f64 = 1e-10;
/// Number of evenly spaced floors scanned before the golden-section refinement.
const FLOOR_SCAN: usize = 64;
/// Nelder–Mead evaluation budget per start of the joint fit.
pub const JOINT_MAX_EVALUATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("need at least {need} distinct {axis} values, got {got}")]
    TooFewDistinct {
        axis: &'static str,
        need: usize,
        got: usize,
    },
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("non-decreasing trend, power law with positive exponent not supported")]
    NonDecreasingTrend,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("observed values have zero variance")]
    ZeroVariance,
    #[error("invalid fit: {0}")]
    InvalidFit(&'static str),
    #[error("joint fit did not converge within {evaluations} evaluations per start; best so far {best:?}")]
    NotConverged { best: Box<JointLawFit>, evaluations: usize },
}

pub type Result<T> = std::result::Result<T, FitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSpace {
    LogResidual,
}

/// One `(size, loss)` point; size is parameters or annotated pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub loss: f64,
}

impl Observation {
    pub fn new(x: f64, loss: f64) -> Self {
        Self { x, loss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointObservation {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

impl JointObservation {
    pub fn new(n: f64, d: f64, loss: f64) -> Self {
        Self { n, d, loss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub scale: f64,
    pub exponent: f64,
    pub floor: f64,
    pub r_squared: f64,
    pub fit_space: FitSpace,
}

impl PowerLawFit {
    /// A law with known coefficients, e.g. one reported elsewhere.
    pub fn from_coefficients(scale: f64, exponent: f64, floor: f64) -> Self {
        Self {
            scale,
            exponent,
            floor,
            r_squared: 1.0,
            fit_space: FitSpace::LogResidual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(FitError::InvalidFit("scale must be positive"));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(FitError::InvalidFit("exponent must be positive"));
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err(FitError::InvalidFit("floor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLawFit {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub floor: f64,
    pub rmse: f64,
}

impl JointLawFit {
    pub fn from_coefficients(a: f64, b: f64, alpha: f64, beta: f64, floor: f64) -> Self {
        Self {
            a,
            b,
            alpha,
            beta,
            floor,
            rmse: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.a, "a must be positive"),
            (self.b, "b must be positive"),
            (self.alpha, "alpha must be positive"),
            (self.beta, "beta must be positive"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FitError::InvalidFit(what));
            }
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err(FitError::InvalidFit("floor must be non-negative"));
        }
        Ok(())
    }

    /// The model-size law this joint law converges to as data grows without bound.
    pub fn model_marginal(&self) -> PowerLawFit {
        PowerLawFit::from_coefficients(self.a, self.alpha, self.floor)
    }

    /// The data-size law this joint law converges to as the model grows without bound.
    pub fn data_marginal(&self) -> PowerLawFit {
        PowerLawFit::from_coefficients(self.b, self.beta, self.floor)
    }
}

fn positive(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(FitError::NonPositive { what, value })
    }
}

pub fn predict_single(fit: &PowerLawFit, x: f64) -> Result<f64> {
    positive("x", x)?;
    Ok((fit.scale / x).powf(fit.exponent) + fit.floor)
}

pub fn predict_joint(fit: &JointLawFit, n: f64, d: f64) -> Result<f64> {
    positive("n", n)?;
    positive("d", d)?;
    Ok(joint_value(fit.a, fit.b, fit.alpha, fit.beta, fit.floor, n, d))
}

#[inline]
fn joint_value(a: f64, b: f64, alpha: f64, beta: f64, floor: f64, n: f64, d: f64) -> f64 {
    ((a / n).powf(alpha / beta) + b / d).powf(beta) + floor
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(FitError::LengthMismatch {
            left: observed.len(),
            right: predicted.len(),
        });
    }
    if observed.len() < 2 {
        return Err(FitError::TooFewPoints {
            need: 2,
            got: observed.len(),
        });
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(FitError::ZeroVariance);
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

struct LineFit {
    slope: f64,
    intercept: f64,
    /// SS_res / SS_tot, i.e. 1 - R².
    unexplained: f64,
}

fn ols(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let unexplained = if syy > 0.0 { ss_res / syy } else { f64::INFINITY };
    LineFit {
        slope,
        intercept,
        unexplained,
    }
}

fn log_line_at_floor(log_x: &[f64], losses: &[f64], floor: f64) -> LineFit {
    let ys: Vec<f64> = losses.iter().map(|l| (l - floor).ln()).collect();
    ols(log_x, &ys)
}

/// Fits `L(x) = (scale / x)^exponent + floor`.
///
/// The floor is chosen on `[0, 0.999 * min(loss)]` to maximize R² of the
/// log-linear regression of `log(L - floor)` on `log(x)`: a uniform scan picks
/// the bracket, golden-section search refines it.
pub fn fit_single_law(points: &[Observation]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    for p in points {
        positive("x", p.x)?;
        positive("loss", p.loss)?;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.loss.total_cmp(&b.loss)));
    let mut distinct: Vec<f64> = sorted.iter().map(|p| p.x).collect();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(FitError::TooFewDistinct {
            axis: "x",
            need: 3,
            got: distinct.len(),
        });
    }

    let log_x: Vec<f64> = sorted.iter().map(|p| p.x.ln()).collect();
    let losses: Vec<f64> = sorted.iter().map(|p| p.loss).collect();
    let min_loss = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = FLOOR_CAP * min_loss;

    let objective = |floor: f64| {
        let v = log_line_at_floor(&log_x, &losses, floor).unexplained;
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let step = hi / FLOOR_SCAN as f64;
    let (best_i, _) = (0..=FLOOR_SCAN)
        .map(|i| (i, objective(i as f64 * step)))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let lo = best_i.saturating_sub(1) as f64 * step;
    let up = ((best_i + 1).min(FLOOR_SCAN) as f64 * step).min(hi);
    let (floor, _) = golden_section(objective, lo, up, FLOOR_TOL);

    let line = log_line_at_floor(&log_x, &losses, floor);
    if !(line.slope < 0.0) {
        return Err(FitError::NonDecreasingTrend);
    }
    let exponent = -line.slope;
    let scale = (line.intercept / exponent).exp();
    Ok(PowerLawFit {
        scale,
        exponent,
        floor,
        r_squared: 1.0 - line.unexplained,
        fit_space: FitSpace::LogResidual,
    })
}

/// Per-start diagnostics of a joint fit.
#[derive(Debug, Clone)]
pub struct JointFitReport {
    pub fit: JointLawFit,
    pub starts: Vec<StartOutcome>,
    pub best_start: usize,
}

#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub initial: [f64; 5],
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Fits the joint law by multi-start Nelder–Mead on log residuals.
pub fn fit_joint_law(points: &[JointObservation]) -> Result<JointLawFit> {
    fit_joint_law_report(points).map(|r| r.fit)
}

pub fn fit_joint_law_report(points: &[JointObservation]) -> Result<JointFitReport> {
    if points.len() < 8 {
        return Err(FitError::TooFewPoints {
            need: 8,
            got: points.len(),
        });
    }
    for p in points {
        positive("n", p.n)?;
        positive("d", p.d)?;
        positive("loss", p.loss)?;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.n.total_cmp(&b.n)
            .then(a.d.total_cmp(&b.d))
            .then(a.loss.total_cmp(&b.loss))
    });
    let distinct_n = distinct(sorted.iter().map(|p| p.n));
    let distinct_d = distinct(sorted.iter().map(|p| p.d));
    if distinct_n.len() < 3 {
        return Err(FitError::TooFewDistinct {
            axis: "n",
            need: 3,
            got: distinct_n.len(),
        });
    }
    if distinct_d.len() < 3 {
        return Err(FitError::TooFewDistinct {
            axis: "d",
            need: 3,
            got: distinct_d.len(),
        });
    }

    let min_loss = sorted.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let floor_cap = FLOOR_CAP * min_loss;
    let log_loss: Vec<f64> = sorted.iter().map(|p| p.loss.ln()).collect();
    let objective = |theta: &[f64]| -> f64 {
        let (a, b, alpha, beta) = (theta[0].exp(), theta[1].exp(), theta[2].exp(), theta[3].exp());
        let floor = theta[4].clamp(0.0, floor_cap);
        let mut ss = 0.0;
        for (p, ll) in sorted.iter().zip(&log_loss) {
            let pred = joint_value(a, b, alpha, beta, floor, p.n, p.d);
            if !(pred > 0.0 && pred.is_finite()) {
                return f64::INFINITY;
            }
            ss += (ll - pred.ln()).powi(2);
        }
        ss
    };

    let starts = joint_starts(&sorted, floor_cap);
    let opts = NelderMeadOptions {
        max_evaluations: JOINT_MAX_EVALUATIONS,
        ..Default::default()
    };
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for (i, start) in starts.iter().enumerate() {
        let steps = [1.0, 1.0, 0.3, 0.3, 0.25 * floor_cap];
        let result = nelder_mead(objective, start, &steps, &opts);
        // reduce by objective, then lowest start index
        if best.as_ref().is_none_or(|(_, _, v)| result.value < *v) {
            best = Some((i, result.x.clone(), result.value));
        }
        outcomes.push(StartOutcome {
            initial: *start,
            objective: result.value,
            evaluations: result.evaluations,
            converged: result.converged,
        });
    }
    let (best_start, theta, value) = best.expect("at least one start");
    let fit = JointLawFit {
        a: theta[0].exp(),
        b: theta[1].exp(),
        alpha: theta[2].exp(),
        beta: theta[3].exp(),
        floor: theta[4].clamp(0.0, floor_cap),
        rmse: (value / sorted.len() as f64).sqrt(),
    };
    if !outcomes[best_start].converged {
        return Err(FitError::NotConverged {
            best: Box::new(fit),
            evaluations: JOINT_MAX_EVALUATIONS,
        });
    }
    Ok(JointFitReport {
        fit,
        starts: outcomes,
        best_start,
    })
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Best-loss slice along one axis: for every distinct `key`, the point with the
/// largest `other` (ties by lowest loss).
fn marginal_slice(points: &[JointObservation], model_axis: bool) -> Vec<Observation> {
    let key = |p: &JointObservation| if model_axis { p.n } else { p.d };
    let other = |p: &JointObservation| if model_axis { p.d } else { p.n };
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    for p in points {
        match out.iter_mut().find(|(k, _, _)| *k == key(p)) {
            Some(slot) => {
                if other(p) > slot.1 || (other(p) == slot.1 && p.loss < slot.2) {
                    *slot = (key(p), other(p), p.loss);
                }
            }
            None => out.push((key(p), other(p), p.loss)),
        }
    }
    out.into_iter().map(|(k, _, l)| Observation::new(k, l)).collect()
}

/// Eight deterministic starting points in `(ln a, ln b, ln alpha, ln beta, floor)`.
fn joint_starts(points: &[JointObservation], floor_cap: f64) -> Vec<[f64; 5]> {
    let geo_mean = |vals: Vec<f64>| (vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp();
    let model = fit_single_law(&marginal_slice(points, true)).ok();
    let data = fit_single_law(&marginal_slice(points, false)).ok();
    let (a0, alpha0) = model.map_or_else(
        || (geo_mean(points.iter().map(|p| p.n).collect()), 0.5),
        |f| (f.scale, f.exponent),
    );
    let (b0, beta0) = data.map_or_else(
        || (geo_mean(points.iter().map(|p| p.d).collect()), 1.0),
        |f| (f.scale, f.exponent),
    );
    let marginal_floor = match (model, data) {
        (Some(m), Some(d)) => m.floor.min(d.floor),
        (Some(m), None) => m.floor,
        (None, Some(d)) => d.floor,
        (None, None) => 0.5 * floor_cap,
    }
    .min(floor_cap);

    let floors = [0.0, 0.5 * marginal_floor, marginal_floor];
    let mut starts = Vec::with_capacity(8);
    for (alpha, beta, n_floors) in [(alpha0, beta0, 3), (alpha0, 1.0, 3), (0.5, 1.0, 2)] {
        for &floor in &floors[..n_floors] {
            starts.push([a0.ln(), b0.ln(), alpha.ln(), beta.ln(), floor]);
        }
    }
    starts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn predict_single_examples() {
        let msmarco = PowerLawFit::from_coefficients(3.22e4, 0.53, 0.04);
        assert!((predict_single(&msmarco, 3.22e4).unwrap() - 1.04).abs() < 1e-12);
        let unit = PowerLawFit::from_coefficients(1.0, 1.0, 0.0);
        assert_eq!(predict_single(&unit, 4.0).unwrap(), 0.25);
        let data = PowerLawFit::from_coefficients(3.49e3, 1.05, 0.05);
        assert!((predict_single(&data, 3.49e3).unwrap() - 1.05).abs() < 1e-12);
        assert!(predict_single(&unit, 0.0).is_err());
        assert!(predict_single(&unit, -1.0).is_err());
    }

    #[test]
    fn predict_joint_examples() {
        let law = JointLawFit::from_coefficients(3.6e4, 7.1e3, 0.56, 1.31, 0.03);
        // direct evaluation, recomputed by hand:
        // (3.6e4/82e6)^(0.56/1.31) = 0.0036296..., 7.1e3/5e5 = 0.0142
        let direct = ((3.6e4f64 / 82e6).powf(0.56 / 1.31) + 7.1e3 / 5e5).powf(1.31) + 0.03;
        let v = predict_joint(&law, 82e6, 5e5).unwrap();
        assert_eq!(v, direct);
        assert!((v - 0.0502).abs() < 5e-5, "{v}");
        let far = predict_joint(&law, 3.6e4, 1e18).unwrap();
        assert!((far - 1.03).abs() < 1e-9);
        let zero_floor = JointLawFit::from_coefficients(3.6e4, 7.1e3, 0.56, 1.31, 0.0);
        assert!(predict_joint(&zero_floor, 1e30, 1e30).unwrap() < 1e-10);
        assert!(predict_joint(&law, 0.0, 1.0).is_err());
        assert!(predict_joint(&law, 1.0, -3.0).is_err());
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -3.0);
        assert!(r_squared(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(r_squared(&[2.0, 2.0], &[1.0, 2.0]).unwrap_err(), FitError::ZeroVariance);
    }

    #[test]
    fn fit_single_rejects_bad_input() {
        let two = [Observation::new(1.0, 1.0), Observation::new(2.0, 0.5)];
        assert!(matches!(fit_single_law(&two), Err(FitError::TooFewPoints { .. })));
        let dup = [
            Observation::new(1.0, 1.0),
            Observation::new(1.0, 0.9),
            Observation::new(2.0, 0.5),
        ];
        assert!(matches!(fit_single_law(&dup), Err(FitError::TooFewDistinct { .. })));
        let neg = [
            Observation::new(1.0, 1.0),
            Observation::new(2.0, -0.5),
            Observation::new(3.0, 0.2),
        ];
        assert!(matches!(fit_single_law(&neg), Err(FitError::NonPositive { .. })));
    }

    #[test]
    fn fit_single_rejects_increasing_trend() {
        let pts: Vec<_> = (1..=6).map(|i| Observation::new(i as f64, 0.1 * i as f64)).collect();
        assert_eq!(fit_single_law(&pts).unwrap_err(), FitError::NonDecreasingTrend);
    }

    #[test]
    fn fit_single_noiseless_recovery() {
        let truth = PowerLawFit::from_coefficients(3.22e4, 0.53, 0.04);
        let pts: Vec<_> = (0..10)
            .map(|i| {
                let x = 0.5e6 * (87e6f64 / 0.5e6).powf(i as f64 / 9.0);
                Observation::new(x, predict_single(&truth, x).unwrap())
            })
            .collect();
        let fit = fit_single_law(&pts).unwrap();
        assert!((fit.exponent - 0.53).abs() < 1e-3, "{fit:?}");
        assert!((fit.floor - 0.04).abs() < 1e-4, "{fit:?}");
        assert!(fit.r_squared >= 1.0 - 1e-9);
        for p in &pts {
            assert!(rel(predict_single(&fit, p.x).unwrap(), p.loss) < 1e-6);
        }
    }

    #[test]
    fn joint_rejects_bad_input() {
        let few: Vec<_> = (0..4)
            .map(|i| JointObservation::new(1.0 + i as f64, 2.0 + i as f64, 1.0))
            .collect();
        assert!(matches!(fit_joint_law(&few), Err(FitError::TooFewPoints { .. })));
        let narrow: Vec<_> = (0..9)
            .map(|i| JointObservation::new(1.0 + (i % 2) as f64, 1.0 + i as f64, 1.0 / (1.0 + i as f64)))
            .collect();
        assert!(matches!(
            fit_joint_law(&narrow),
            Err(FitError::TooFewDistinct { axis: "n", .. })
        ));
    }

    #[test]
    fn joint_marginal_consistency() {
        let law = JointLawFit::from_coefficients(3.6e4, 7.1e3, 0.56, 1.31, 0.03);
        for n in [1e6, 1e7, 1e8] {
            let full = predict_joint(&law, n, 1e15).unwrap();
            let marginal = predict_single(&law.model_marginal(), n).unwrap();
            assert!((full - marginal).abs() / full <= 1e-6);
        }
    }

    #[test]
    fn joint_starts_are_eight_and_deterministic() {
        let law = JointLawFit::from_coefficients(3.6e4, 7.1e3, 0.56, 1.31, 0.03);
        let mut pts = Vec::new();
        for n in [1e6, 1e7, 1e8] {
            for d in [1e4, 1e5, 5e5] {
                pts.push(JointObservation::new(n, d, predict_joint(&law, n, d).unwrap()));
            }
        }
        let a = joint_starts(&pts, 0.03);
        assert_eq!(a.len(), 8);
        assert_eq!(a, joint_starts(&pts, 0.03));
    }
}
