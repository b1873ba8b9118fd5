//! Oracles shared by the integration tests. Everything here is computed from
//! the closed-form laws directly, without going through the library.
#![allow(dead_code)]

use drscale::lawfit::{JointObservation, Observation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `(A, alpha, floor)` of the reported model-size laws.
pub const MODEL_LAW_MSMARCO: (f64, f64, f64) = (3.22e4, 0.53, 0.04);
pub const MODEL_LAW_T2RANKING: (f64, f64, f64) = (9.89e6, 0.53, 0.14);
/// `(B, beta, floor)` of the reported data-size laws.
pub const DATA_LAW_MSMARCO: (f64, f64, f64) = (3.49e3, 1.05, 0.05);
pub const DATA_LAW_T2RANKING: (f64, f64, f64) = (6.04e4, 0.50, 0.15);
/// `(A, B, alpha, beta, floor)` of the reported joint law.
pub const JOINT_LAW: (f64, f64, f64, f64, f64) = (3.6e4, 7.1e3, 0.56, 1.31, 0.03);
/// Reported cost factors: dollars per pair, per parameter trained, per parameter
/// for corpus encoding.
pub const REFERENCE_COSTS: (f64, f64, f64) = (0.6, 3.22e-8, 0.43);

pub fn single_law(law: (f64, f64, f64), x: f64) -> f64 {
    (law.0 / x).powf(law.1) + law.2
}

pub fn joint_law(law: (f64, f64, f64, f64, f64), n: f64, d: f64) -> f64 {
    let (a, b, alpha, beta, floor) = law;
    ((a / n).powf(alpha / beta) + b / d).powf(beta) + floor
}

pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Multiplies the reducible part `L - floor` by `1 + eps`, `eps ~ N(0, sigma)`.
pub struct Noise {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Noise {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, sigma).unwrap(),
        }
    }

    pub fn apply(&mut self, loss: f64, floor: f64) -> f64 {
        floor + (loss - floor) * (1.0 + self.normal.sample(&mut self.rng))
    }
}

pub fn single_law_points(law: (f64, f64, f64), xs: &[f64], noise: Option<&mut Noise>) -> Vec<Observation> {
    let mut noise = noise;
    xs.iter()
        .map(|&x| {
            let clean = single_law(law, x);
            let loss = match noise.as_deref_mut() {
                Some(n) => n.apply(clean, law.2),
                None => clean,
            };
            Observation::new(x, loss)
        })
        .collect()
}

pub fn joint_grid(
    law: (f64, f64, f64, f64, f64),
    ns: &[f64],
    ds: &[f64],
    mut noise: Option<&mut Noise>,
) -> Vec<JointObservation> {
    let mut out = Vec::new();
    for &n in ns {
        for &d in ds {
            let clean = joint_law(law, n, d);
            let loss = match noise.as_deref_mut() {
                Some(z) => z.apply(clean, law.4),
                None => clean,
            };
            out.push(JointObservation::new(n, d, loss));
        }
    }
    out
}

/// Budget fully spent on data at model size `n`, or `None` when the model
/// alone uses it up.
pub fn pairs_left(costs: (f64, f64, f64), include_inference: bool, n: f64, budget: f64) -> Option<f64> {
    let per_param = costs.1 + if include_inference { costs.2 } else { 0.0 };
    let d = (budget - per_param * n) / costs.0;
    (d > 0.0).then_some(d)
}

/// Minimum predicted loss over `points` log-spaced model sizes between 1e3 and
/// the largest affordable size. Returns `(n, loss)`.
pub fn brute_force_allocation(
    law: (f64, f64, f64, f64, f64),
    costs: (f64, f64, f64),
    include_inference: bool,
    budget: f64,
    points: usize,
) -> (f64, f64) {
    let per_param = costs.1 + if include_inference { costs.2 } else { 0.0 };
    let hi = (budget - costs.0) / per_param;
    let mut best = (f64::NAN, f64::INFINITY);
    for n in log_spaced(1e3, hi, points) {
        if let Some(d) = pairs_left(costs, include_inference, n, budget) {
            let l = joint_law(law, n, d);
            if l < best.1 {
                best = (n, l);
            }
        }
    }
    best
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}
