//! Monte Carlo optimal-control machinery: the backward adjoint equation
//! solved by cross-path least-squares regression, the directional derivative
//! of the cost functional it induces, the damped projected fixed-point
//! iteration that produces the optimal supply policy, and strong/randomized
//! cost evaluation.
//!
//! The adjoint pair `(p, q)` satisfies
//! `dp = -[Aᵀp + (2β/N)(X - Y)] dt + q dW`, `p_T = (2α/N)(X_T - Y)`,
//! and the optimal control is the projected pointwise minimizer
//! `θ* = Π_Θ(-(1/2λ) Σ_j u_j p_j)`.

use std::sync::Arc;

use crate::error::Error;
use crate::linalg::Mat;
use crate::model::{project_theta, terminal_cost, DriftVol, Scenario};
use crate::par::ordered_par_map;
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::sde::{simulate_paths, ControlSpec, NoiseBundle, PathBundle};
use crate::Result;

/// A Monte Carlo estimate together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<S> {
    pub value: S,
    pub se: S,
}

/// Regression configuration for the backward pass.
///
/// The default affine basis `{1, X_1..X_N, Y_1..Y_N}` is exact for the
/// adjoint whenever the projection is inactive; the quadratic augmentation
/// `{X_i²}` absorbs constraint-activation curvature.
#[derive(Debug, Clone, Copy)]
pub struct RegressionBasis {
    pub quadratic: bool,
    /// Base ridge, scaled by `trace(Gram)/B`; always applied.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            quadratic: false,
            ridge: 1e-8,
        }
    }
}

/// Regression-estimated adjoint along a simulated path bundle.
#[derive(Debug, Clone)]
pub struct AdjointSolution<S> {
    n_paths: usize,
    n_banks: usize,
    steps: usize,
    /// `(path * (steps+1) + knot) * n_banks + bank`.
    p: Vec<S>,
    /// `((path * steps + step) * n_banks + bank) * (n_banks+1) + brownian`,
    /// present only when requested.
    q: Option<Vec<S>>,
    /// Cross-path RMS regression residual per step.
    pub residual_norms: Vec<S>,
    /// Number of steps where the base ridge was insufficient and a stronger
    /// regularization was applied.
    pub ridge_fallbacks: usize,
    /// Empirical `sup_t E|p_t|²`.
    pub sup_second_moment: S,
}

impl<S: Scalar> AdjointSolution<S> {
    pub fn p(&self, path: usize, knot: usize, bank: usize) -> S {
        self.p[(path * (self.steps + 1) + knot) * self.n_banks + bank]
    }

    pub fn q(&self, path: usize, step: usize, bank: usize, brownian: usize) -> Option<S> {
        self.q.as_ref().map(|q| {
            q[((path * self.steps + step) * self.n_banks + bank) * (self.n_banks + 1) + brownian]
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Design matrix columns for the regression at one time knot. Near-constant
/// columns (deterministic targets, degenerate states) carry no information
/// beyond the intercept and are dropped; the drop count is returned.
fn build_design<S: Scalar>(
    paths: &PathBundle<S>,
    targets: &[S],
    knot: usize,
    quadratic: bool,
) -> (Vec<Vec<S>>, usize) {
    let n = paths.n_banks();
    let n_paths = paths.n_paths();
    let mut columns: Vec<Vec<S>> = Vec::new();
    columns.push(vec![S::one(); n_paths]);
    let mut candidates: Vec<Vec<S>> = Vec::new();
    for bank in 0..n {
        candidates.push(
            (0..n_paths)
                .map(|p| paths.state(p, knot, bank))
                .collect(),
        );
    }
    for &y in targets {
        candidates.push(vec![y; n_paths]);
    }
    if quadratic {
        for bank in 0..n {
            candidates.push(
                (0..n_paths)
                    .map(|p| {
                        let x = paths.state(p, knot, bank);
                        x * x
                    })
                    .collect(),
            );
        }
    }
    let mut dropped = 0;
    for col in candidates {
        let mean = col.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize(n_paths);
        let scale = col
            .iter()
            .fold(S::zero(), |a, &b| a.max((b - mean).abs()));
        if scale > S::of(1e-12) {
            columns.push(col);
        } else {
            dropped += 1;
        }
    }
    (columns, dropped)
}

/// Least squares across paths: returns the fitted values for each response.
/// The Gram matrix is always ridge-stabilized; if its Cholesky factorization
/// still fails the ridge is escalated and the fallback recorded.
fn regress_fitted<S: Scalar>(
    columns: &[Vec<S>],
    responses: &[Vec<S>],
    base_ridge: f64,
    fallbacks: &mut usize,
) -> Result<Vec<Vec<S>>> {
    let b = columns.len();
    let n_paths = columns[0].len();
    let mut gram = Mat::zeros(b, b);
    for i in 0..b {
        for j in i..b {
            let acc = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(&x, &y)| x * y)
                .fold(S::zero(), |a, t| a + t);
            gram[(i, j)] = acc;
            gram[(j, i)] = acc;
        }
    }
    let trace_scale = gram.trace() / S::from_usize(b);
    let mut ridge = S::of(base_ridge) * trace_scale;
    let factor = loop {
        let shifted = gram.add(&Mat::identity(b).scale(ridge));
        match shifted.cholesky() {
            Some(l) => break l,
            None => {
                *fallbacks += 1;
                ridge = (ridge * S::of(1e4)).max(S::of(1e-10));
                if ridge > trace_scale {
                    return Err(Error::numerical(
                        "regression Gram matrix unsalvageable by ridge escalation",
                    ));
                }
            }
        }
    };
    let mut fitted = Vec::with_capacity(responses.len());
    for resp in responses {
        let rhs: Vec<S> = (0..b)
            .map(|i| {
                let mut acc = S::zero();
                for p in 0..n_paths {
                    acc = acc + columns[i][p] * resp[p];
                }
                acc
            })
            .collect();
        let coef = Mat::cholesky_solve(&factor, &rhs);
        let values: Vec<S> = (0..n_paths)
            .map(|p| {
                let mut acc = S::zero();
                for i in 0..b {
                    acc = acc + coef[i] * columns[i][p];
                }
                acc
            })
            .collect();
        fitted.push(values);
    }
    Ok(fitted)
}

/// Backward recursion for the adjoint first component (and optionally the
/// martingale integrand) along simulated paths.
///
/// At each step the conditional expectation `E[p_{k+1} | X_k, Y]` is the
/// cross-path regression fit, and
/// `p_k = p̂ + [Aᵀ p̂ + (2β/N)(X_k - Y)] dt`.
pub fn backward_adjoint<S: Scalar>(
    paths: &PathBundle<S>,
    scn: &Scenario<S>,
    basis: &RegressionBasis,
    noise_for_q: Option<&NoiseBundle<S>>,
) -> Result<AdjointSolution<S>> {
    let n = scn.n_banks();
    if paths.n_banks() != n {
        return Err(Error::dimension(format!(
            "path bundle has {} banks, scenario has {n}",
            paths.n_banks()
        )));
    }
    let steps = paths.grid().steps();
    let n_paths = paths.n_paths();
    let dt = paths.grid().dt();
    let targets = scn.targets();
    let dv = DriftVol::assemble(scn)?;
    let a_t = dv.drift.transpose();
    let two_alpha_over_n = S::of(2.0) * scn.alpha / S::from_usize(n);
    let two_beta_over_n = S::of(2.0) * scn.beta / S::from_usize(n);

    let mut p = vec![S::zero(); n_paths * (steps + 1) * n];
    for path in 0..n_paths {
        for bank in 0..n {
            p[(path * (steps + 1) + steps) * n + bank] =
                two_alpha_over_n * (paths.state(path, steps, bank) - targets[bank]);
        }
    }
    let mut q = noise_for_q.map(|_| vec![S::zero(); n_paths * steps * n * (n + 1)]);
    let mut residual_norms = vec![S::zero(); steps];
    let mut fallbacks = 0usize;

    for k in (0..steps).rev() {
        let (columns, _dropped) = build_design(paths, &targets, k, basis.quadratic);
        // Responses: the next-knot adjoint components.
        let responses: Vec<Vec<S>> = (0..n)
            .map(|bank| {
                (0..n_paths)
                    .map(|path| p[(path * (steps + 1) + k + 1) * n + bank])
                    .collect()
            })
            .collect();
        let fitted = regress_fitted(&columns, &responses, basis.ridge, &mut fallbacks)?;

        let mut residual_acc = S::zero();
        for path in 0..n_paths {
            let p_hat: Vec<S> = (0..n).map(|bank| fitted[bank][path]).collect();
            let drift_term = a_t.matvec(&p_hat);
            for bank in 0..n {
                let resid = responses[bank][path] - p_hat[bank];
                residual_acc = residual_acc + resid * resid;
                let state_term =
                    two_beta_over_n * (paths.state(path, k, bank) - targets[bank]);
                p[(path * (steps + 1) + k) * n + bank] =
                    p_hat[bank] + (drift_term[bank] + state_term) * dt;
            }
        }
        residual_norms[k] = (residual_acc / S::from_usize(n_paths * n)).sqrt();

        if let (Some(q_store), Some(noise)) = (q.as_mut(), noise_for_q) {
            // q_k^{i,j} = E[p_{k+1}^i ΔW^j | X_k] / dt, fitted per path.
            let mut q_responses = Vec::with_capacity(n * (n + 1));
            for response in &responses {
                for brownian in 0..=n {
                    q_responses.push(
                        (0..n_paths)
                            .map(|path| response[path] * noise.dw(path, brownian, k) / dt)
                            .collect::<Vec<S>>(),
                    );
                }
            }
            let q_fitted = regress_fitted(&columns, &q_responses, basis.ridge, &mut fallbacks)?;
            for path in 0..n_paths {
                for bank in 0..n {
                    for brownian in 0..=n {
                        q_store[((path * steps + k) * n + bank) * (n + 1) + brownian] =
                            q_fitted[bank * (n + 1) + brownian][path];
                    }
                }
            }
        }
    }

    let mut sup_second_moment = S::zero();
    for k in 0..=steps {
        let mut acc = S::zero();
        for path in 0..n_paths {
            for bank in 0..n {
                let v = p[(path * (steps + 1) + k) * n + bank];
                acc = acc + v * v;
            }
        }
        sup_second_moment = sup_second_moment.max(acc / S::from_usize(n_paths));
    }

    Ok(AdjointSolution {
        n_paths,
        n_banks: n,
        steps,
        p,
        q,
        residual_norms,
        ridge_fallbacks: fallbacks,
        sup_second_moment,
    })
}

/// Monte Carlo estimate of the objective
/// `E[L_N(X_T, Y) + ∫ R_N(X_t, Y; θ_t) dt]` with a trapezoidal quadrature in
/// the state cost and the exact rectangle rule for the piecewise-constant
/// control cost.
pub fn evaluate_strong_cost<S: Scalar>(
    control: &ControlSpec<S>,
    scn: &Scenario<S>,
    noise: &NoiseBundle<S>,
) -> Result<Estimate<S>> {
    let paths = simulate_paths(scn, control, noise)?;
    Ok(cost_of_bundle(&paths, scn))
}

/// Cost of an already-simulated bundle; shares the quadrature with
/// [`evaluate_strong_cost`].
pub fn cost_of_bundle<S: Scalar>(paths: &PathBundle<S>, scn: &Scenario<S>) -> Estimate<S> {
    let steps = paths.grid().steps();
    let dt = paths.grid().dt();
    let targets = scn.targets();
    let per_path = ordered_par_map(paths.n_paths(), |p| {
        let mut state_integral = S::zero();
        for k in 0..=steps {
            let weight = if k == 0 || k == steps {
                S::of(0.5)
            } else {
                S::one()
            };
            let stage = terminal_cost(paths.state_slice(p, k), &targets, scn.beta)
                .expect("dimensions checked");
            state_integral = state_integral + weight * stage * dt;
        }
        let mut control_integral = S::zero();
        for k in 0..steps {
            let th = paths.theta(p, k);
            control_integral = control_integral + th * th * dt;
        }
        let terminal = terminal_cost(paths.state_slice(p, steps), &targets, scn.alpha)
            .expect("dimensions checked");
        (terminal + state_integral + scn.lambda * control_integral).to_f64()
    });
    let (mean, se) = mean_se(&per_path);
    Estimate {
        value: S::of(mean),
        se: S::of(se),
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Gâteaux derivative of the cost at `theta` in the given direction:
/// `E ∫ η_t d_t dt` with `η = 2λθ + Σ_i u_i p^i`, the adjoint solved under
/// `theta` on the supplied noise.
pub fn gateaux_derivative<S: Scalar>(
    theta: &ControlSpec<S>,
    direction: &ControlSpec<S>,
    scn: &Scenario<S>,
    noise: &NoiseBundle<S>,
    basis: &RegressionBasis,
) -> Result<Estimate<S>> {
    let paths = simulate_paths(scn, theta, noise)?;
    let adjoint = backward_adjoint(&paths, scn, basis, None)?;
    let steps = paths.grid().steps();
    let dt = paths.grid().dt();
    let supply = scn.supply_vector();
    let targets = scn.targets();
    let two_lambda = S::of(2.0) * scn.lambda;

    // The perturbation endpoint θ + d must stay admissible.
    for path in 0..paths.n_paths() {
        for k in 0..steps {
            let t = paths.grid().knot(k);
            let d = direction.eval(path, k, t, paths.state_slice(path, k), &targets);
            let endpoint = paths.theta(path, k) + d;
            if !(endpoint >= scn.theta_lo && endpoint <= scn.theta_hi) {
                return Err(Error::admissibility(format!(
                    "perturbation endpoint {endpoint} leaves Θ at path {path}, step {k}"
                )));
            }
        }
    }

    let per_path = ordered_par_map(paths.n_paths(), |path| {
        let mut acc = S::zero();
        for k in 0..steps {
            let t = paths.grid().knot(k);
            let d = direction.eval(path, k, t, paths.state_slice(path, k), &targets);
            let mut eta = two_lambda * paths.theta(path, k);
            for (i, &u) in supply.iter().enumerate() {
                eta = eta + u * adjoint.p(path, k, i);
            }
            acc = acc + eta * d * dt;
        }
        acc.to_f64()
    });
    let (mean, se) = mean_se(&per_path);
    Ok(Estimate {
        value: S::of(mean),
        se: S::of(se),
    })
}

#[derive(Debug, Clone)]
pub struct PicardOptions<S> {
    /// Damping δ in (0, 1]: `θ' = (1-δ) θ + δ Π_Θ(target)`.
    pub damping: S,
    /// Stop when the discrete H² distance between iterates drops below this.
    pub tol: S,
    pub max_iter: usize,
    pub basis: RegressionBasis,
}

impl<S: Scalar> Default for PicardOptions<S> {
    fn default() -> Self {
        PicardOptions {
            damping: S::of(0.5),
            tol: S::of(1e-4),
            max_iter: 40,
            basis: RegressionBasis::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct TraceRow<S> {
    pub iter: usize,
    pub cost: S,
    pub se: S,
    pub step_norm: S,
    pub damping: S,
}

/// Per-iteration record of the fixed-point optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerTrace<S> {
    pub rows: Vec<TraceRow<S>>,
    pub stop: StopReason,
}

#[derive(Debug, Clone)]
pub struct PicardOutcome<S> {
    /// Optimal open-loop control, one path per noise path.
    pub control: ControlSpec<S>,
    pub cost: Estimate<S>,
    pub trace: OptimizerTrace<S>,
    /// Adjoint diagnostics of the final iterate.
    pub ridge_fallbacks: usize,
}

/// Damped projected fixed-point iteration on the adjoint representation of
/// the optimal control:
/// `θ^{k+1} = (1-δ) θ^k + δ Π_Θ(-(1/2λ) Σ_j u_j p_j^k)` pathwise per step.
///
/// Non-convergence at `max_iter` is not an error; the best iterate by cost
/// is returned with the stop reason recorded.
pub fn optimize_picard<S: Scalar>(
    scn: &Scenario<S>,
    noise: &NoiseBundle<S>,
    opts: &PicardOptions<S>,
) -> Result<PicardOutcome<S>> {
    scn.validate()?;
    if !(opts.damping > S::zero() && opts.damping <= S::one()) {
        return Err(Error::config(format!(
            "damping {} must lie in (0, 1]",
            opts.damping
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::config("max_iter must be >= 1"));
    }
    let n_paths = noise.n_paths();
    let steps = noise.steps();
    let dt = noise.dt();
    let supply = scn.supply_vector();
    let two_lambda = S::of(2.0) * scn.lambda;
    let start = scn.clamp_theta(S::zero());
    let mut theta: Vec<Vec<S>> = vec![vec![start; steps]; n_paths];

    let mut rows: Vec<TraceRow<S>> = Vec::new();
    let mut best: Option<(S, Vec<Vec<S>>, Estimate<S>)> = None;
    let mut stop = StopReason::MaxIter;
    let mut fallbacks = 0usize;

    for iter in 0..opts.max_iter {
        let spec = ControlSpec::open_loop(theta.clone());
        let paths = simulate_paths(scn, &spec, noise)?;
        let cost = cost_of_bundle(&paths, scn);
        let adjoint = backward_adjoint(&paths, scn, &opts.basis, None)?;
        fallbacks = adjoint.ridge_fallbacks;

        let one_minus = S::one() - opts.damping;
        let next: Vec<Vec<S>> = ordered_par_map(n_paths, |path| {
            (0..steps)
                .map(|k| {
                    let mut weighted = S::zero();
                    for (i, &u) in supply.iter().enumerate() {
                        weighted = weighted + u * adjoint.p(path, k, i);
                    }
                    let target = project_theta(-weighted / two_lambda, scn.theta_lo, scn.theta_hi)
                        .expect("validated interval");
                    one_minus * theta[path][k] + opts.damping * target
                })
                .collect()
        });

        // Discrete H² distance between successive iterates.
        let sq_sum = crate::par::det_par_sum(n_paths, |path| {
            let mut acc = 0.0;
            for k in 0..steps {
                let d = (next[path][k] - theta[path][k]).to_f64();
                acc += d * d * dt.to_f64();
            }
            acc
        });
        let step_norm = S::of((sq_sum / n_paths as f64).sqrt());

        rows.push(TraceRow {
            iter,
            cost: cost.value,
            se: cost.se,
            step_norm,
            damping: opts.damping,
        });
        if best.as_ref().is_none_or(|(c, _, _)| cost.value < *c) {
            best = Some((cost.value, theta.clone(), cost));
        }
        theta = next;
        if step_norm < opts.tol {
            stop = StopReason::Converged;
            break;
        }
    }

    let (final_theta, final_cost) = match stop {
        StopReason::Converged => {
            let spec = ControlSpec::open_loop(theta.clone());
            let cost = evaluate_strong_cost(&spec, scn, noise)?;
            (theta, cost)
        }
        StopReason::MaxIter => {
            let (_, best_theta, best_cost) = best.expect("at least one iteration");
            (best_theta, best_cost)
        }
    };

    Ok(PicardOutcome {
        control: ControlSpec::open_loop(final_theta),
        cost: final_cost,
        trace: OptimizerTrace { rows, stop },
        ridge_fallbacks: fallbacks,
    })
}

/// A randomized (weak) control: a point mass at one control rule or a finite
/// mixture sampled per path from an auxiliary uniform stream.
#[derive(Debug, Clone)]
pub enum RandomizedPolicy<S> {
    Point(ControlSpec<S>),
    /// `(weight, rule)` pairs; weights need not be normalized.
    Mixture(Vec<(f64, ControlSpec<S>)>),
}

impl<S: Scalar> RandomizedPolicy<S> {
    /// Index of the mixture component the auxiliary uniform stream assigns
    /// to a path (0 for a point mass).
    pub fn component_for(&self, path: usize, seed: u64) -> Result<usize> {
        match self {
            RandomizedPolicy::Point(_) => Ok(0),
            RandomizedPolicy::Mixture(components) => {
                if components.is_empty() {
                    return Err(Error::config("mixture policy with no components"));
                }
                let total: f64 = components.iter().map(|(w, _)| *w).sum();
                if !(total > 0.0) || components.iter().any(|(w, _)| *w < 0.0) {
                    return Err(Error::config(
                        "mixture weights must be nonnegative with positive sum",
                    ));
                }
                let mut stream = rng::stream_rng(seed, domain::POLICY, path as u64, 0);
                let u = rng::next_uniform(&mut stream) * total;
                let mut acc = 0.0;
                for (idx, (w, _)) in components.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return Ok(idx);
                    }
                }
                Ok(components.len() - 1)
            }
        }
    }

    /// Resolve the policy into a concrete per-path control rule using the
    /// auxiliary uniform stream keyed by `seed`.
    pub fn realize(&self, n_paths: usize, seed: u64) -> Result<ControlSpec<S>> {
        match self {
            RandomizedPolicy::Point(spec) => Ok(spec.clone()),
            RandomizedPolicy::Mixture(components) => {
                let assignment: Vec<usize> = (0..n_paths)
                    .map(|path| self.component_for(path, seed))
                    .collect::<Result<_>>()?;
                let specs: Vec<ControlSpec<S>> =
                    components.iter().map(|(_, s)| s.clone()).collect();
                let assignment = Arc::new(assignment);
                let specs = Arc::new(specs);
                Ok(ControlSpec::per_path(move |path, step, t, x, y| {
                    specs[assignment[path]].eval(path, step, t, x, y)
                }))
            }
        }
    }
}

/// Monte Carlo value of the randomized objective: the policy is realized on
/// the auxiliary stream and evaluated on the same noise as the strong cost,
/// so a point mass reproduces the strong value exactly.
pub fn evaluate_weak_cost<S: Scalar>(
    policy: &RandomizedPolicy<S>,
    scn: &Scenario<S>,
    noise: &NoiseBundle<S>,
) -> Result<Estimate<S>> {
    let spec = policy.realize(noise.n_paths(), noise.seed())?;
    evaluate_strong_cost(&spec, scn, noise)
}
