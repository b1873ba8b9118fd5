//! Derivative-free minimizers used by the law fits and the budget optimizer.

/// Golden-section search for a minimum of a unimodal `f` on `[lo, hi]`.
///
/// Stops once the bracket is narrower than `tol`; returns the best evaluated
/// abscissa and its value.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let (fa, fb) = (f(a), f(b));
    let mut best = if fa.total_cmp(&fb).is_le() { (a, fa) } else { (b, fb) };
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best.1 {
            best = (x, v);
        }
    }
    // 200 iterations shrink any bracket by 0.618^200 ~ 1e-42
    for _ in 0..200 {
        if (b - a) <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Absolute tolerance on the spread of simplex values.
    pub f_tol_abs: f64,
    /// Relative tolerance on the spread of simplex values.
    pub f_tol_rel: f64,
    /// Largest vertex distance (infinity norm) from the best vertex.
    pub x_tol: f64,
    /// Number of fresh-simplex restarts from the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 10_000,
            f_tol_abs: 1e-16,
            f_tol_rel: 1e-12,
            x_tol: 1e-7,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead simplex minimization with standard coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
///
/// The initial simplex is `x0` plus one vertex per axis offset by `steps[i]`.
/// Non-finite objective values are treated as +inf.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), steps.len());
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    let mut best_value = f64::INFINITY;
    let mut converged = false;
    for round in 0..=opts.restarts {
        let (x, v, ok) = simplex_run(&mut eval, &mut evals, &start, steps, opts);
        let improved = v < best_value - (opts.f_tol_abs + opts.f_tol_rel * v.abs());
        if v <= best_value {
            best_value = v;
            start = x;
        }
        converged = ok;
        if !ok || (round > 0 && !improved) {
            break;
        }
    }
    NelderMeadResult {
        x: start,
        value: best_value,
        evaluations: evals,
        converged,
    }
}

fn simplex_run<E>(
    eval: &mut E,
    evals: &mut usize,
    x0: &[f64],
    steps: &[f64],
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, bool)
where
    E: FnMut(&[f64], &mut usize) -> f64,
{
    let dim = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v0 = eval(x0, evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let v = eval(&x, evals);
        simplex.push((x, v));
    }

    loop {
        // stable sort keeps earlier vertices first on ties
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread = if worst.is_finite() { worst - best } else { f64::INFINITY };
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol_abs + opts.f_tol_rel * best.abs() && diameter <= opts.x_tol {
            return (simplex[0].0.clone(), best, true);
        }
        if *evals >= opts.max_evaluations {
            return (simplex[0].0.clone(), best, false);
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr, evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[dim].1 {
            let xc = along(0.5);
            let fc = eval(&xc, evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, evals);
            (xc, fc)
        };
        if fc < simplex[dim].1.min(fr) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = anchor.iter().zip(&vertex.0).map(|(a, v)| a + 0.5 * (v - a)).collect();
            let v = eval(&x, evals);
            *vertex = (x, v);
        }
    }
}
