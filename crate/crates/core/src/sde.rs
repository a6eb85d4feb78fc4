//! Forward simulation of the controlled N-bank system: deterministically
//! seeded Brownian increments and the Euler–Maruyama scheme
//! `X_{k+1} = X_k + (A X_k + theta_k u) dt + Sigma dW_k`,
//! plus the moment diagnostics behind the uniform-in-control bounds.

use std::sync::Arc;

use crate::error::Error;
use crate::model::{DriftVol, Scenario};
use crate::par::ordered_par_map;
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::Result;

/// Uniform time grid `0 = t_0 < ... < t_M = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    steps: usize,
    dt: S,
    knots: Vec<S>,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(horizon: S, steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) {
            return Err(Error::config(format!("horizon T = {horizon} must be > 0")));
        }
        if steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        let m = S::from_usize(steps);
        let knots = (0..=steps)
            .map(|k| horizon * S::from_usize(k) / m)
            .collect();
        Ok(TimeGrid {
            horizon,
            steps,
            dt: horizon / m,
            knots,
        })
    }

    pub fn for_scenario(scn: &Scenario<S>) -> Self {
        TimeGrid::new(scn.horizon, scn.steps).expect("validated scenario")
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    pub fn knots(&self) -> &[S] {
        &self.knots
    }

    pub fn knot(&self, k: usize) -> S {
        self.knots[k]
    }

    /// Index of the grid knot closest to `t`.
    pub fn nearest_knot(&self, t: S) -> usize {
        let frac = (t / self.horizon * S::from_usize(self.steps))
            .round()
            .to_f64();
        (frac.max(0.0) as usize).min(self.steps)
    }
}

/// Brownian increments for every (path, Brownian index, step) triple.
///
/// Index 0 is the common noise; index `i >= 1` is bank `i-1`. Each
/// `(path, index)` pair owns a dedicated counter-based stream, so any slice
/// regenerates bit-identically and streams are mutually independent.
#[derive(Debug, Clone)]
pub struct NoiseBundle<S> {
    n_paths: usize,
    n_banks: usize,
    steps: usize,
    dt: S,
    seed: u64,
    /// Layout: `((path * (n_banks+1) + brownian) * steps + step)`.
    increments: Vec<S>,
}

impl<S: Scalar> NoiseBundle<S> {
    /// Draw `Normal(0, dt)` increments for all paths and Brownian indices.
    pub fn generate(grid: &TimeGrid<S>, n_banks: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if n_banks == 0 {
            return Err(Error::config("noise bundle needs at least one bank"));
        }
        if n_paths == 0 {
            return Err(Error::config("noise bundle needs at least one path"));
        }
        let steps = grid.steps();
        let sqrt_dt = grid.dt().sqrt();
        let width = (n_banks + 1) * steps;
        let rows: Vec<Vec<S>> = ordered_par_map(n_paths, |path| {
            let mut row = Vec::with_capacity(width);
            for brownian in 0..=n_banks {
                let mut stream = rng::stream_rng(seed, domain::NOISE, path as u64, brownian as u64);
                for _ in 0..steps {
                    row.push(S::of(rng::next_normal(&mut stream)) * sqrt_dt);
                }
            }
            row
        });
        Ok(NoiseBundle {
            n_paths,
            n_banks,
            steps,
            dt: grid.dt(),
            seed,
            increments: rows.into_iter().flatten().collect(),
        })
    }

    pub fn for_scenario(scn: &Scenario<S>) -> Result<Self> {
        let grid = TimeGrid::for_scenario(scn);
        NoiseBundle::generate(&grid, scn.n_banks(), scn.mc_paths, scn.seed)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_banks(&self) -> usize {
        self.n_banks
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increment of Brownian `brownian` (0 = common) on `[t_k, t_{k+1})`.
    pub fn dw(&self, path: usize, brownian: usize, step: usize) -> S {
        self.increments[(path * (self.n_banks + 1) + brownian) * self.steps + step]
    }
}

/// `(t, states, targets) -> θ`.
pub type FeedbackRule<S> = dyn Fn(S, &[S], &[S]) -> S + Send + Sync;
/// `(path, step, t, states, targets) -> θ`.
pub type PerPathRule<S> = dyn Fn(usize, usize, S, &[S], &[S]) -> S + Send + Sync;

/// A control rule for the forward simulation. Feedback rules see
/// `(t, states, targets)`; open-loop controls are read per (path, step);
/// per-path rules additionally see the path and step index, which lets
/// randomized policies dispatch a different rule on every path.
#[derive(Clone)]
pub enum ControlSpec<S> {
    Constant(S),
    Feedback(Arc<FeedbackRule<S>>),
    /// `values[path][step]`.
    OpenLoop(Arc<Vec<Vec<S>>>),
    PerPath(Arc<PerPathRule<S>>),
}

impl<S: Scalar> ControlSpec<S> {
    pub fn feedback(f: impl Fn(S, &[S], &[S]) -> S + Send + Sync + 'static) -> Self {
        ControlSpec::Feedback(Arc::new(f))
    }

    pub fn open_loop(values: Vec<Vec<S>>) -> Self {
        ControlSpec::OpenLoop(Arc::new(values))
    }

    pub fn per_path(f: impl Fn(usize, usize, S, &[S], &[S]) -> S + Send + Sync + 'static) -> Self {
        ControlSpec::PerPath(Arc::new(f))
    }

    pub fn eval(&self, path: usize, step: usize, t: S, x: &[S], y: &[S]) -> S {
        match self {
            ControlSpec::Constant(c) => *c,
            ControlSpec::Feedback(f) => f(t, x, y),
            ControlSpec::OpenLoop(v) => v[path][step],
            ControlSpec::PerPath(f) => f(path, step, t, x, y),
        }
    }
}

impl<S: std::fmt::Debug> std::fmt::Debug for ControlSpec<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlSpec::Constant(c) => write!(f, "Constant({c:?})"),
            ControlSpec::Feedback(_) => write!(f, "Feedback(..)"),
            ControlSpec::OpenLoop(v) => write!(f, "OpenLoop({} paths)", v.len()),
            ControlSpec::PerPath(_) => write!(f, "PerPath(..)"),
        }
    }
}

/// Simulated state and control trajectories on a shared grid.
#[derive(Debug, Clone)]
pub struct PathBundle<S> {
    n_paths: usize,
    n_banks: usize,
    grid: TimeGrid<S>,
    /// Layout: `(path * (steps+1) + knot) * n_banks + bank`.
    states: Vec<S>,
    /// Layout: `path * steps + step`; the control applied on `[t_k, t_{k+1})`.
    thetas: Vec<S>,
}

impl<S: Scalar> PathBundle<S> {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_banks(&self) -> usize {
        self.n_banks
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn state(&self, path: usize, knot: usize, bank: usize) -> S {
        self.states[(path * (self.grid.steps() + 1) + knot) * self.n_banks + bank]
    }

    /// All bank states of one path at one knot.
    pub fn state_slice(&self, path: usize, knot: usize) -> &[S] {
        let base = (path * (self.grid.steps() + 1) + knot) * self.n_banks;
        &self.states[base..base + self.n_banks]
    }

    pub fn theta(&self, path: usize, step: usize) -> S {
        self.thetas[path * self.grid.steps() + step]
    }

    /// Per-path control paths, cloneable into an open-loop spec.
    pub fn thetas_by_path(&self) -> Vec<Vec<S>> {
        (0..self.n_paths)
            .map(|p| {
                let base = p * self.grid.steps();
                self.thetas[base..base + self.grid.steps()].to_vec()
            })
            .collect()
    }
}

/// Euler–Maruyama forward simulation under the given control.
///
/// Controls that leave the policy interval abort with an admissibility
/// error; admissibility is a model assumption, not a tolerance.
pub fn simulate_paths<S: Scalar>(
    scn: &Scenario<S>,
    control: &ControlSpec<S>,
    noise: &NoiseBundle<S>,
) -> Result<PathBundle<S>> {
    scn.validate()?;
    let n = scn.n_banks();
    if noise.n_banks() != n {
        return Err(Error::dimension(format!(
            "noise bundle has {} banks, scenario has {n}",
            noise.n_banks()
        )));
    }
    if noise.steps() != scn.steps {
        return Err(Error::dimension(format!(
            "noise bundle has {} steps, scenario has {}",
            noise.steps(),
            scn.steps
        )));
    }
    if let ControlSpec::OpenLoop(values) = control {
        if values.len() < noise.n_paths() || values.iter().any(|v| v.len() != scn.steps) {
            return Err(Error::dimension(
                "open-loop control does not cover every (path, step)".to_string(),
            ));
        }
    }
    let grid = TimeGrid::for_scenario(scn);
    let dv = DriftVol::assemble(scn)?;
    let x0 = scn.initial_states();
    let targets = scn.targets();
    let steps = scn.steps;
    let dt = grid.dt();
    let n_paths = noise.n_paths();

    let per_path: Vec<Result<(Vec<S>, Vec<S>)>> = ordered_par_map(n_paths, |path| {
        let mut states = Vec::with_capacity((steps + 1) * n);
        let mut thetas = Vec::with_capacity(steps);
        let mut x = x0.clone();
        states.extend_from_slice(&x);
        for k in 0..steps {
            let t = grid.knot(k);
            let theta = control.eval(path, k, t, &x, &targets);
            if !(theta >= scn.theta_lo && theta <= scn.theta_hi) {
                return Err(Error::admissibility(format!(
                    "control value {theta} at path {path}, step {k} lies outside Θ = [{}, {}]",
                    scn.theta_lo, scn.theta_hi
                )));
            }
            thetas.push(theta);
            let drift = dv.drift.matvec(&x);
            let dw0 = noise.dw(path, 0, k);
            for i in 0..n {
                let diffusion = scn.sigma0 * dw0 + scn.banks[i].sigma * noise.dw(path, i + 1, k);
                x[i] = x[i] + (drift[i] + theta * dv.supply[i]) * dt + diffusion;
            }
            states.extend_from_slice(&x);
        }
        Ok((states, thetas))
    });

    let mut states = Vec::with_capacity(n_paths * (steps + 1) * n);
    let mut thetas = Vec::with_capacity(n_paths * steps);
    for row in per_path {
        let (s, t) = row?;
        states.extend(s);
        thetas.extend(t);
    }
    Ok(PathBundle {
        n_paths,
        n_banks: n,
        grid,
        states,
        thetas,
    })
}

/// Empirical moment diagnostics of a simulated bundle.
#[derive(Debug, Clone)]
pub struct MomentReport<S> {
    /// Per-bank estimate of `E[ sup_t |X_t|^(2+rho) ]`.
    pub sup_moment: Vec<S>,
    /// `(delta, E[ sup_{|t-s|<=delta} |X_t - X_s|^2 ])` pairs, averaged over
    /// banks, for a decreasing ladder of window widths.
    pub modulus: Vec<(S, S)>,
}

/// Sup-over-time moments and the modulus-of-continuity statistic; both are
/// the empirical faces of the uniform moment bounds of the state process.
pub fn moment_report<S: Scalar>(paths: &PathBundle<S>, rho_exp: S) -> Result<MomentReport<S>> {
    if paths.n_paths() == 0 {
        return Err(Error::config("moment report of an empty bundle"));
    }
    let n = paths.n_banks();
    let steps = paths.grid().steps();
    let exponent = S::of(2.0) + rho_exp;
    let n_paths = S::from_usize(paths.n_paths());

    let mut sup_moment = vec![S::zero(); n];
    for (i, slot) in sup_moment.iter_mut().enumerate() {
        let mut acc = S::zero();
        for p in 0..paths.n_paths() {
            let mut sup = S::zero();
            for k in 0..=steps {
                sup = sup.max(paths.state(p, k, i).abs());
            }
            acc = acc + sup.powf(exponent);
        }
        *slot = acc / n_paths;
    }

    // Window ladder T/8, T/16, T/32, T/64 expressed in whole steps.
    let mut modulus = Vec::new();
    for div in [8usize, 16, 32, 64] {
        let window = (steps / div).max(1);
        let delta = paths.grid().dt() * S::from_usize(window);
        let mut acc = S::zero();
        for p in 0..paths.n_paths() {
            let mut sup = S::zero();
            for k in 0..=steps {
                let hi = (k + window).min(steps);
                for l in k + 1..=hi {
                    for i in 0..n {
                        let d = paths.state(p, l, i) - paths.state(p, k, i);
                        sup = sup.max(d * d);
                    }
                }
            }
            acc = acc + sup;
        }
        modulus.push((delta, acc / n_paths));
    }
    Ok(MomentReport {
        sup_moment,
        modulus,
    })
}

/// Open-loop control that is constant in time and across paths.
pub fn constant_open_loop<S: Scalar>(value: S, n_paths: usize, steps: usize) -> ControlSpec<S> {
    ControlSpec::open_loop(vec![vec![value; steps]; n_paths])
}

/// Draw a random admissible piecewise-constant open-loop control; used by
/// the uniform-in-control diagnostics and the optimality checks.
pub fn random_admissible_control<S: Scalar>(
    scn: &Scenario<S>,
    n_paths: usize,
    seed: u64,
) -> ControlSpec<S> {
    let lo = scn.theta_lo.to_f64();
    let hi = scn.theta_hi.to_f64();
    let values = (0..n_paths)
        .map(|p| {
            let mut rng = rng::stream_rng(seed, domain::CONTROL, p as u64, 0);
            (0..scn.steps)
                .map(|_| S::of(lo + (hi - lo) * rng::next_uniform(&mut rng)))
                .collect()
        })
        .collect();
    ControlSpec::open_loop(values)
}

#[cfg(test)]
pub(crate) fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}
