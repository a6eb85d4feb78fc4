//! The mean-field limit of the interbank system: particle simulation of the
//! conditional dynamics under common noise, the fixed-point (Picard) sweep
//! whose contraction drives uniqueness, the infinitesimal generator, the
//! measure-equation residual test, and the limiting cost functional.
//!
//! All particles of one realization share the common-noise path and the
//! control path; the conditional law given that shared randomness is
//! approximated by the cross-particle empirical measure.

use std::sync::Arc;

use crate::error::Error;
use crate::measures::{multiset_mean, EmpiricalMeasure, EmpiricalMeasureFlow};
use crate::model::{BankType, InitialDatum};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::sde::TimeGrid;
use crate::Result;

/// Sampling law for (type, initial datum) pairs; the data-generating
/// mechanism of the mean-field model and of i.i.d. finite systems drawn
/// from it.
#[derive(Debug, Clone)]
pub struct LimitLaw<S> {
    pub types: TypeLaw<S>,
    pub initials: InitLaw<S>,
    /// Whether the initial state marginal has a density; uniqueness-backed
    /// diagnostics are skipped for atomic laws.
    pub continuous_density: bool,
    /// A_s1 bound the sampled types must respect.
    pub k_bound: S,
}

#[derive(Debug, Clone)]
pub enum TypeLaw<S> {
    Fixed(BankType<S>),
    /// Independent uniforms per field on the given closed intervals.
    UniformBox {
        rate: (S, S),
        supply: (S, S),
        sigma: (S, S),
    },
}

#[derive(Debug, Clone)]
pub enum InitLaw<S> {
    Fixed { x0: S, target: S },
    /// Independent normals; a zero standard deviation degenerates to a point.
    Normal {
        x0_mean: S,
        x0_sd: S,
        y_mean: S,
        y_sd: S,
    },
}

impl<S: Scalar> LimitLaw<S> {
    pub fn new(types: TypeLaw<S>, initials: InitLaw<S>, k_bound: S) -> Result<Self> {
        match &types {
            TypeLaw::Fixed(b) => {
                if !(b.supply > S::zero()) || b.rate < S::zero() || b.sigma < S::zero() {
                    return Err(Error::config(
                        "violates assumption A_s1: fixed type must have u > 0, a >= 0, sigma >= 0",
                    ));
                }
                if b.rate > k_bound || b.supply > k_bound || b.sigma > k_bound {
                    return Err(Error::config(
                        "violates assumption A_s1: fixed type exceeds the bound K",
                    ));
                }
            }
            TypeLaw::UniformBox {
                rate,
                supply,
                sigma,
            } => {
                for (name, (lo, hi)) in [("a", rate), ("u", supply), ("sigma", sigma)] {
                    if !(lo <= hi) {
                        return Err(Error::config(format!(
                            "type law field {name}: empty interval"
                        )));
                    }
                    if *hi > k_bound || *lo < S::zero() {
                        return Err(Error::config(format!(
                            "violates assumption A_s1: type law field {name} leaves [0, K]"
                        )));
                    }
                }
                if !(supply.0 > S::zero()) {
                    return Err(Error::config(
                        "violates assumption A_s1: supply intensity must stay > 0",
                    ));
                }
            }
        }
        let continuous_density = match &initials {
            InitLaw::Fixed { .. } => false,
            InitLaw::Normal { x0_sd, .. } => *x0_sd > S::zero(),
        };
        Ok(LimitLaw {
            types,
            initials,
            continuous_density,
            k_bound,
        })
    }

    /// Deterministic draw of the `index`-th (type, initial) pair. Draws nest:
    /// the first N of a larger sample coincide with a smaller one.
    pub fn sample(&self, index: u64, seed: u64) -> (BankType<S>, InitialDatum<S>) {
        let mut stream = rng::stream_rng(seed, domain::LAW, index, 0);
        let bank = match &self.types {
            TypeLaw::Fixed(b) => *b,
            TypeLaw::UniformBox {
                rate,
                supply,
                sigma,
            } => {
                let mut draw = |lo: S, hi: S| lo + (hi - lo) * S::of(rng::next_uniform(&mut stream));
                BankType::new(
                    draw(rate.0, rate.1),
                    draw(supply.0, supply.1),
                    draw(sigma.0, sigma.1),
                )
            }
        };
        let init = match &self.initials {
            InitLaw::Fixed { x0, target } => InitialDatum::new(*x0, *target),
            InitLaw::Normal {
                x0_mean,
                x0_sd,
                y_mean,
                y_sd,
            } => {
                let z0 = S::of(rng::next_normal(&mut stream));
                let z1 = S::of(rng::next_normal(&mut stream));
                InitialDatum::new(*x0_mean + *x0_sd * z0, *y_mean + *y_sd * z1)
            }
        };
        (bank, init)
    }

    pub fn sample_many(&self, n: usize, seed: u64) -> (Vec<BankType<S>>, Vec<InitialDatum<S>>) {
        let mut banks = Vec::with_capacity(n);
        let mut inits = Vec::with_capacity(n);
        for i in 0..n {
            let (b, d) = self.sample(i as u64, seed);
            banks.push(b);
            inits.push(d);
        }
        (banks, inits)
    }

    /// True when every draw is the same point (no type or initial spread).
    pub fn is_degenerate(&self) -> bool {
        let type_point = matches!(self.types, TypeLaw::Fixed(_));
        let init_point = match &self.initials {
            InitLaw::Fixed { .. } => true,
            InitLaw::Normal { x0_sd, y_sd, .. } => *x0_sd == S::zero() && *y_sd == S::zero(),
        };
        type_point && init_point
    }
}

/// Control input of the mean-field simulation; realized per step on the grid.
#[derive(Clone)]
pub enum MfControl<S> {
    Constant(S),
    /// One value per step.
    Path(Arc<Vec<S>>),
    TimeFn(Arc<dyn Fn(S) -> S + Send + Sync>),
}

impl<S: Scalar> MfControl<S> {
    pub fn path(values: Vec<S>) -> Self {
        MfControl::Path(Arc::new(values))
    }

    fn at(&self, step: usize, t: S) -> S {
        match self {
            MfControl::Constant(c) => *c,
            MfControl::Path(v) => v[step],
            MfControl::TimeFn(f) => f(t),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for MfControl<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MfControl::Constant(c) => write!(f, "Constant({c})"),
            MfControl::Path(v) => write!(f, "Path({} steps)", v.len()),
            MfControl::TimeFn(_) => write!(f, "TimeFn(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkvMode {
    /// Cross-particle empirical mean recomputed inside the time loop.
    Direct,
    /// Iterated fixed-point sweeps; stops when the mean path settles.
    Picard,
}

#[derive(Debug, Clone, Copy)]
pub struct MkvDiagnostics<S> {
    pub sweeps: usize,
    pub converged: bool,
    pub final_change: S,
}

/// One realization of the interacting particle system: per-particle types,
/// targets and state paths, plus the common noise and control they share.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble<S> {
    pub types: Vec<BankType<S>>,
    pub targets: Vec<S>,
    grid: TimeGrid<S>,
    sigma0: S,
    /// `states[particle][knot]`.
    states: Vec<Vec<S>>,
    /// Common-noise increments per step.
    common_dw: Vec<S>,
    /// Idiosyncratic increments per particle per step.
    idio_dw: Vec<Vec<S>>,
    /// Realized control per step.
    theta: Vec<S>,
    pub diagnostics: Option<MkvDiagnostics<S>>,
}

impl<S: Scalar> ParticleEnsemble<S> {
    pub fn n_particles(&self) -> usize {
        self.states.len()
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn sigma0(&self) -> S {
        self.sigma0
    }

    pub fn states(&self, particle: usize) -> &[S] {
        &self.states[particle]
    }

    pub fn state_paths(&self) -> &[Vec<S>] {
        &self.states
    }

    pub fn theta_path(&self) -> &[S] {
        &self.theta
    }

    pub fn common_increments(&self) -> &[S] {
        &self.common_dw
    }

    /// Cross-particle empirical mean at every knot.
    pub fn mean_path(&self) -> Vec<S> {
        (0..=self.grid.steps())
            .map(|k| multiset_mean(self.states.iter().map(|path| path[k])))
            .collect()
    }

    /// Empirical measure at one knot.
    pub fn measure_at(&self, knot: usize) -> EmpiricalMeasure<S> {
        EmpiricalMeasure::from_state(
            &self.types,
            &self.targets,
            &self
                .states
                .iter()
                .map(|path| path[knot])
                .collect::<Vec<_>>(),
        )
        .expect("nonempty ensemble")
    }

    pub fn to_flow(&self) -> EmpiricalMeasureFlow<S> {
        let states_per_knot: Vec<Vec<S>> = (0..=self.grid.steps())
            .map(|k| self.states.iter().map(|path| path[k]).collect())
            .collect();
        EmpiricalMeasureFlow::from_states(
            &self.types,
            &self.targets,
            &states_per_knot,
            self.grid.knots(),
        )
        .expect("matched dimensions")
    }

    /// Reorder particles; the ensemble statistics must not change.
    pub fn permuted(&self, perm: &[usize]) -> ParticleEnsemble<S> {
        ParticleEnsemble {
            types: perm.iter().map(|&i| self.types[i]).collect(),
            targets: perm.iter().map(|&i| self.targets[i]).collect(),
            grid: self.grid.clone(),
            sigma0: self.sigma0,
            states: perm.iter().map(|&i| self.states[i].clone()).collect(),
            common_dw: self.common_dw.clone(),
            idio_dw: perm.iter().map(|&i| self.idio_dw[i].clone()).collect(),
            theta: self.theta.clone(),
            diagnostics: self.diagnostics,
        }
    }
}

/// Infinitesimal generator of the conditional dynamics applied to a test
/// function: `[a (∫z m(dz) - x) + u θ] φ'(x) + ((σ² + σ₀²)/2) φ''(x)`.
pub fn generator_apply<S: Scalar>(
    phi: &TestFn<S>,
    m: &EmpiricalMeasure<S>,
    theta: S,
    bank: &BankType<S>,
    sigma0: S,
    x: S,
) -> S {
    let drift = bank.rate * (m.mean_state() - x) + bank.supply * theta;
    let diffusion = (bank.sigma * bank.sigma + sigma0 * sigma0) * S::of(0.5);
    drift * (phi.d1)(x) + diffusion * (phi.d2)(x)
}

/// Simulate the conditional mean-field particle system.
///
/// `rep` selects the common-noise realization; streams are keyed exactly as
/// the finite-bank simulator keys its paths, so an N-bank run and an
/// M-particle run with the same seed share their first `min(N, M)`
/// idiosyncratic streams and the common stream.
#[allow(clippy::too_many_arguments)]
pub fn simulate_mkv<S: Scalar>(
    law: &LimitLaw<S>,
    theta: &MfControl<S>,
    sigma0: S,
    n_particles: usize,
    grid: &TimeGrid<S>,
    seed: u64,
    rep: u64,
    mode: MkvMode,
) -> Result<ParticleEnsemble<S>> {
    if n_particles < 2 {
        return Err(Error::config(
            "mean-field simulation needs at least two particles",
        ));
    }
    if !(sigma0 >= S::zero()) {
        return Err(Error::config(format!("sigma0 = {sigma0} must be >= 0")));
    }
    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let (types, inits) = law.sample_many(n_particles, seed);
    let targets: Vec<S> = inits.iter().map(|d| d.target).collect();

    let mut common_stream = rng::stream_rng(seed, domain::NOISE, rep, 0);
    let common_dw: Vec<S> = (0..steps)
        .map(|_| S::of(rng::next_normal(&mut common_stream)) * sqrt_dt)
        .collect();
    let idio_dw: Vec<Vec<S>> = (0..n_particles)
        .map(|i| {
            let mut stream = rng::stream_rng(seed, domain::NOISE, rep, (i + 1) as u64);
            (0..steps)
                .map(|_| S::of(rng::next_normal(&mut stream)) * sqrt_dt)
                .collect()
        })
        .collect();
    let theta_path: Vec<S> = (0..steps).map(|k| theta.at(k, grid.knot(k))).collect();

    let x0: Vec<S> = inits.iter().map(|d| d.x0).collect();
    let mut ensemble = ParticleEnsemble {
        types,
        targets,
        grid: grid.clone(),
        sigma0,
        states: vec![Vec::new(); n_particles],
        common_dw,
        idio_dw,
        theta: theta_path,
        diagnostics: None,
    };

    match mode {
        MkvMode::Direct => {
            let mut states: Vec<Vec<S>> = x0
                .iter()
                .map(|&x| {
                    let mut v = Vec::with_capacity(steps + 1);
                    v.push(x);
                    v
                })
                .collect();
            for k in 0..steps {
                let mean = multiset_mean(states.iter().map(|p| p[k]));
                for (i, path) in states.iter_mut().enumerate() {
                    let x = path[k];
                    let b = &ensemble.types[i];
                    let drift =
                        b.rate * (mean - x) + b.supply * ensemble.theta[k];
                    let next = x
                        + drift * grid.dt()
                        + b.sigma * ensemble.idio_dw[i][k]
                        + sigma0 * ensemble.common_dw[k];
                    path.push(next);
                }
            }
            ensemble.states = states;
        }
        MkvMode::Picard => {
            // Start from frozen initial states and iterate the integral map;
            // its fixed point satisfies the direct recursion exactly.
            let mut current: Vec<Vec<S>> =
                x0.iter().map(|&x| vec![x; steps + 1]).collect();
            let scale = S::one() + multiset_mean(x0.iter().map(|x| x.abs()));
            let tol = S::of(1e-4) * scale;
            let max_sweeps = 100;
            let mut diagnostics = MkvDiagnostics {
                sweeps: 0,
                converged: false,
                final_change: S::infinity(),
            };
            let mut prev_mean: Vec<S> =
                (0..=steps).map(|k| multiset_mean(current.iter().map(|p| p[k]))).collect();
            for sweep in 1..=max_sweeps {
                let next = picard_sweep_states(&ensemble, &current, &x0);
                let mean: Vec<S> = (0..=steps)
                    .map(|k| multiset_mean(next.iter().map(|p| p[k])))
                    .collect();
                let change = mean
                    .iter()
                    .zip(&prev_mean)
                    .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs()));
                current = next;
                prev_mean = mean;
                diagnostics.sweeps = sweep;
                diagnostics.final_change = change;
                if change < tol {
                    diagnostics.converged = true;
                    break;
                }
            }
            ensemble.states = current;
            ensemble.diagnostics = Some(diagnostics);
        }
    }
    Ok(ensemble)
}

/// One sweep of the fixed-point map: re-integrate every particle from the
/// ensemble's initial data with the drift read off the *input* trajectories
/// (their states and their cross-particle mean), keeping the noise fixed.
/// The initial datum is part of the data, not of the iterated variable.
pub fn picard_sweep<S: Scalar>(
    ensemble: &ParticleEnsemble<S>,
    input_states: &[Vec<S>],
) -> Vec<Vec<S>> {
    let x0: Vec<S> = ensemble.states.iter().map(|p| p[0]).collect();
    picard_sweep_states(ensemble, input_states, &x0)
}

fn picard_sweep_states<S: Scalar>(
    ensemble: &ParticleEnsemble<S>,
    input: &[Vec<S>],
    x0: &[S],
) -> Vec<Vec<S>> {
    let steps = ensemble.grid.steps();
    let dt = ensemble.grid.dt();
    let means: Vec<S> = (0..=steps)
        .map(|k| multiset_mean(input.iter().map(|p| p[k])))
        .collect();
    (0..input.len())
        .map(|i| {
            let b = &ensemble.types[i];
            let mut path = Vec::with_capacity(steps + 1);
            let mut x = x0[i];
            path.push(x);
            for k in 0..steps {
                let drift = b.rate * (means[k] - input[i][k]) + b.supply * ensemble.theta[k];
                x = x + drift * dt
                    + b.sigma * ensemble.idio_dw[i][k]
                    + ensemble.sigma0 * ensemble.common_dw[k];
                path.push(x);
            }
            path
        })
        .collect()
}

/// Discounted pathwise L¹ distance `E ∫ e^{-rt} |X¹_t - X²_t| dt` between two
/// matched ensembles of state paths (trapezoid in time, mean over particles).
pub fn contraction_norm<S: Scalar>(
    x1: &[Vec<S>],
    x2: &[Vec<S>],
    r: S,
    grid: &TimeGrid<S>,
) -> Result<S> {
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(Error::dimension(format!(
            "contraction norm: {} vs {} paths",
            x1.len(),
            x2.len()
        )));
    }
    if !(r > S::zero()) {
        return Err(Error::config(format!("discount rate r = {r} must be > 0")));
    }
    let steps = grid.steps();
    if x1.iter().chain(x2).any(|p| p.len() != steps + 1) {
        return Err(Error::dimension(
            "contraction norm: path length does not match the grid".to_string(),
        ));
    }
    let dt = grid.dt();
    let per_particle: Vec<S> = (0..x1.len())
        .map(|i| {
            let mut acc = S::zero();
            for k in 0..=steps {
                let w = if k == 0 || k == steps {
                    S::of(0.5)
                } else {
                    S::one()
                };
                let t = grid.knot(k);
                acc = acc + w * (-r * t).exp() * (x1[i][k] - x2[i][k]).abs() * dt;
            }
            acc
        })
        .collect();
    Ok(multiset_mean(per_particle))
}

/// A twice-differentiable test function with analytic derivatives.
#[derive(Clone)]
pub struct TestFn<S> {
    pub name: String,
    pub f: Arc<dyn Fn(S) -> S + Send + Sync>,
    pub d1: Arc<dyn Fn(S) -> S + Send + Sync>,
    pub d2: Arc<dyn Fn(S) -> S + Send + Sync>,
}

impl<S> std::fmt::Debug for TestFn<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFn({})", self.name)
    }
}

impl<S: Scalar> TestFn<S> {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(S) -> S + Send + Sync + 'static,
        d1: impl Fn(S) -> S + Send + Sync + 'static,
        d2: impl Fn(S) -> S + Send + Sync + 'static,
    ) -> Self {
        TestFn {
            name: name.into(),
            f: Arc::new(f),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
        }
    }

    pub fn constant(c: f64) -> Self {
        TestFn::new(
            format!("const_{c}"),
            move |_| S::of(c),
            |_| S::zero(),
            |_| S::zero(),
        )
    }

    pub fn identity() -> Self {
        TestFn::new("x", |x| x, |_| S::one(), |_| S::zero())
    }

    pub fn square() -> Self {
        TestFn::new("x^2", |x: S| x * x, |x: S| S::of(2.0) * x, |_| S::of(2.0))
    }
}

/// Default bounded family for the measure-equation residual:
/// `sin(kx/s), cos(kx/s)` for `k = 1, 2, 3` plus `tanh(x/s)`, all smooth and
/// bounded with analytic derivatives.
pub fn default_phi_family<S: Scalar>(scale: S) -> Vec<TestFn<S>> {
    let mut family = Vec::new();
    let s = if scale > S::of(1e-12) { scale } else { S::one() };
    for k in 1..=3 {
        let w = S::from_usize(k) / s;
        family.push(TestFn::new(
            format!("sin_{k}"),
            move |x: S| (w * x).sin(),
            move |x: S| w * (w * x).cos(),
            move |x: S| -w * w * (w * x).sin(),
        ));
        family.push(TestFn::new(
            format!("cos_{k}"),
            move |x: S| (w * x).cos(),
            move |x: S| -w * (w * x).sin(),
            move |x: S| -w * w * (w * x).cos(),
        ));
    }
    let w = S::one() / s;
    family.push(TestFn::new(
        "tanh",
        move |x: S| (w * x).tanh(),
        move |x: S| {
            let c = (w * x).cosh();
            w / (c * c)
        },
        move |x: S| {
            let t = (w * x).tanh();
            let c = (w * x).cosh();
            S::of(-2.0) * w * w * t / (c * c)
        },
    ));
    family
}

/// Residuals of the measure-valued equation along one flow realization.
#[derive(Debug, Clone)]
pub struct ResidualReport<S> {
    pub phi_names: Vec<String>,
    /// `residuals[phi][knot]`.
    pub residuals: Vec<Vec<S>>,
    /// `sup_t |Res(φ, t)|` per test function.
    pub sup_abs: Vec<S>,
}

/// Evaluate, for every test function, the defect
/// `⟨μ_t, φ⟩ - ⟨μ_0, φ⟩ - Σ_k ⟨μ_k, 𝒜 φ⟩ Δt - σ₀ Σ_k ⟨μ_k, φ'⟩ ΔW⁰_k`
/// at every knot of the flow.
pub fn sfpk_residual<S: Scalar>(
    flow: &EmpiricalMeasureFlow<S>,
    theta_path: &[S],
    common_increments: &[S],
    sigma0: S,
    phi_family: &[TestFn<S>],
) -> Result<ResidualReport<S>> {
    let knots = flow.len();
    if knots < 2 {
        return Err(Error::config("residual needs at least two knots"));
    }
    let steps = knots - 1;
    if theta_path.len() != steps || common_increments.len() != steps {
        return Err(Error::dimension(format!(
            "residual: flow has {steps} steps, control has {} , noise has {}",
            theta_path.len(),
            common_increments.len()
        )));
    }
    if phi_family.is_empty() {
        return Err(Error::config("empty test-function family"));
    }
    let dt = flow.knots()[1] - flow.knots()[0];
    let mut residuals = Vec::with_capacity(phi_family.len());
    let mut sup_abs = Vec::with_capacity(phi_family.len());
    for phi in phi_family {
        let mut series = Vec::with_capacity(knots);
        let initial = flow.at(0).bracket(|x| (phi.f)(x));
        let mut drift_acc = S::zero();
        let mut noise_acc = S::zero();
        series.push(flow.at(0).bracket(|x| (phi.f)(x)) - initial);
        for k in 0..steps {
            let measure = flow.at(k);
            let mean = measure.mean_state();
            // ⟨μ, 𝒜φ⟩ with the atom's own type in the generator.
            let gen_bracket = multiset_mean(measure.atoms().iter().map(|a| {
                let drift = a[0] * (mean - a[4]) + a[1] * theta_path[k];
                let diffusion = (a[2] * a[2] + sigma0 * sigma0) * S::of(0.5);
                drift * (phi.d1)(a[4]) + diffusion * (phi.d2)(a[4])
            }));
            drift_acc = drift_acc + gen_bracket * dt;
            noise_acc =
                noise_acc + measure.bracket(|x| (phi.d1)(x)) * common_increments[k];
            let value = flow.at(k + 1).bracket(|x| (phi.f)(x));
            series.push(value - initial - drift_acc - sigma0 * noise_acc);
        }
        let sup = series
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()));
        residuals.push(series);
        sup_abs.push(sup);
    }
    Ok(ResidualReport {
        phi_names: phi_family.iter().map(|p| p.name.clone()).collect(),
        residuals,
        sup_abs,
    })
}

/// Mean-field cost over common-noise repetitions:
/// `α Ê⟨μ_T, L⟩ + β Σ_k Ê⟨μ_k, L⟩ Δt + λ Ê ∫ θ²`, trapezoid in time.
pub fn evaluate_mf_cost<S: Scalar>(
    ensembles: &[ParticleEnsemble<S>],
    alpha: S,
    beta: S,
    lambda: S,
) -> Result<crate::control::Estimate<S>> {
    if ensembles.is_empty() {
        return Err(Error::config("mean-field cost of zero repetitions"));
    }
    let per_rep: Vec<f64> = ensembles
        .iter()
        .map(|ens| {
            let steps = ens.grid().steps();
            let dt = ens.grid().dt();
            let mut state_integral = S::zero();
            for k in 0..=steps {
                let w = if k == 0 || k == steps {
                    S::of(0.5)
                } else {
                    S::one()
                };
                state_integral = state_integral + w * ens.measure_at(k).mean_squared_gap() * dt;
            }
            let mut control_integral = S::zero();
            for k in 0..steps {
                let th = ens.theta_path()[k];
                control_integral = control_integral + th * th * dt;
            }
            let terminal = ens.measure_at(steps).mean_squared_gap();
            (alpha * terminal + beta * state_integral + lambda * control_integral).to_f64()
        })
        .collect();
    let n = per_rep.len();
    let mean = per_rep.iter().sum::<f64>() / n as f64;
    let se = if n == 1 {
        0.0
    } else {
        let var = per_rep.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    };
    Ok(crate::control::Estimate {
        value: S::of(mean),
        se: S::of(se),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_uniform, stream_rng};

    fn fixed_law(a: f64, sigma: f64, x0: f64) -> LimitLaw<f64> {
        LimitLaw::new(
            TypeLaw::Fixed(BankType::new(a, 1.0, sigma)),
            InitLaw::Fixed { x0, target: 0.0 },
            100.0,
        )
        .unwrap()
    }

    fn iid_law() -> LimitLaw<f64> {
        LimitLaw::new(
            TypeLaw::UniformBox {
                rate: (0.5, 1.5),
                supply: (0.8, 1.2),
                sigma: (0.1, 0.3),
            },
            InitLaw::Normal {
                x0_mean: 0.5,
                x0_sd: 0.4,
                y_mean: 0.0,
                y_sd: 0.2,
            },
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn law_draws_nest_and_respect_bounds() {
        let law = iid_law();
        assert!(law.continuous_density);
        assert!(!law.is_degenerate());
        let (b8, i8) = law.sample_many(8, 42);
        let (b32, i32_) = law.sample_many(32, 42);
        assert_eq!(&b8[..], &b32[..8]);
        assert_eq!(&i8[..], &i32_[..8]);
        for b in &b32 {
            assert!(b.rate >= 0.5 && b.rate <= 1.5);
            assert!(b.supply >= 0.8 && b.supply <= 1.2);
            assert!(b.sigma >= 0.1 && b.sigma <= 0.3);
        }
        assert!(fixed_law(1.0, 0.2, 0.0).is_degenerate());
    }

    #[test]
    fn generator_examples() {
        let m = EmpiricalMeasure::new(vec![[1.0, 1.0, 0.2, 0.0, 0.0], [1.0, 1.0, 0.2, 0.0, 2.0]])
            .unwrap();
        // mean of the state marginal is 1.
        let bank = BankType::new(0.7, 1.3, 0.5);
        let sigma0 = 0.3;
        let x = 0.25;
        let theta = 0.9;
        assert_eq!(
            generator_apply(&TestFn::constant(4.0), &m, theta, &bank, sigma0, x),
            0.0
        );
        let drift: f64 = 0.7 * (1.0 - x) + 1.3 * theta;
        let lin = generator_apply(&TestFn::identity(), &m, theta, &bank, sigma0, x);
        assert!((lin - drift).abs() < 1e-15);
        let quad = generator_apply(&TestFn::square(), &m, theta, &bank, sigma0, x);
        let expect: f64 = 2.0 * x * drift + (0.5 * 0.5 + 0.3 * 0.3);
        assert!((quad - expect).abs() < 1e-15);
    }

    #[test]
    fn frozen_dynamics_keep_particles_constant() {
        let law = fixed_law(0.0, 0.0, 1.5);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.0),
            0.0,
            8,
            &grid,
            3,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        for i in 0..8 {
            assert!(ens.states(i).iter().all(|&x| x == 1.5));
        }
    }

    #[test]
    fn common_noise_only_keeps_particles_identical() {
        // σ_i = 0 and identical initials: the mean-reversion term vanishes by
        // symmetry and every particle follows X₀ + u∫θ + σ₀ W⁰ exactly.
        let law = fixed_law(1.0, 0.0, 0.5);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let theta = 0.3;
        let sigma0 = 0.4;
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(theta),
            sigma0,
            16,
            &grid,
            7,
            2,
            MkvMode::Direct,
        )
        .unwrap();
        let mut w0 = 0.0;
        for k in 0..=32 {
            let expect = 0.5 + theta * grid.knot(k) + sigma0 * w0;
            for i in 0..16 {
                assert!(
                    (ens.states(i)[k] - expect).abs() < 1e-12,
                    "particle {i} knot {k}"
                );
            }
            if k < 32 {
                w0 += ens.common_increments()[k];
            }
        }
    }

    #[test]
    fn mean_path_tracks_supplied_control() {
        // Homogeneous types, no common noise: the ensemble mean follows
        // m_0 + u ∫θ up to idiosyncratic averaging error O(M^{-1/2}).
        let law = fixed_law(1.2, 0.3, 1.0);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let m = 4000;
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(-0.5),
            0.0,
            m,
            &grid,
            11,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        let mean = ens.mean_path();
        for k in [8usize, 16, 32] {
            let expect = 1.0 - 0.5 * grid.knot(k);
            let tol = 4.0 * 0.3 / (m as f64).sqrt();
            assert!(
                (mean[k] - expect).abs() < tol,
                "knot {k}: mean {} vs {expect}",
                mean[k]
            );
        }
    }

    #[test]
    fn picard_mode_reaches_the_direct_fixed_point() {
        let law = iid_law();
        let grid = TimeGrid::new(1.0, 24).unwrap();
        let direct = simulate_mkv(
            &law,
            &MfControl::Constant(0.2),
            0.15,
            64,
            &grid,
            5,
            1,
            MkvMode::Direct,
        )
        .unwrap();
        let picard = simulate_mkv(
            &law,
            &MfControl::Constant(0.2),
            0.15,
            64,
            &grid,
            5,
            1,
            MkvMode::Picard,
        )
        .unwrap();
        let diag = picard.diagnostics.unwrap();
        assert!(diag.converged, "picard did not settle: {diag:?}");
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            for k in 0..=24 {
                worst = worst.max((direct.states(i)[k] - picard.states(i)[k]).abs());
            }
        }
        assert!(worst < 1e-3, "fixed-point gap {worst}");
    }

    #[test]
    fn contraction_norm_basics() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let x1 = vec![vec![1.0; 9]; 4];
        let x2 = vec![vec![0.0; 9]; 4];
        assert_eq!(contraction_norm(&x1, &x1, 2.0, &grid).unwrap(), 0.0);
        let d_small_r = contraction_norm(&x1, &x2, 1.0, &grid).unwrap();
        let d_big_r = contraction_norm(&x1, &x2, 4.0, &grid).unwrap();
        assert!(d_small_r > d_big_r, "norm must decrease in r");
        assert!(contraction_norm(&x1, &x2[..2], 1.0, &grid).is_err());
    }

    #[test]
    fn one_picard_sweep_contracts_at_rate_2k_over_r() {
        let law = iid_law();
        let k_bound = 1.5; // largest rate the law can draw
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let r = 4.0 * k_bound;
        let bound = 2.0 * k_bound / r + 0.05;
        let mut rng = stream_rng(21, 60, 0, 0);
        for trial in 0..10 {
            let ens = simulate_mkv(
                &law,
                &MfControl::Constant(0.1),
                0.2,
                128,
                &grid,
                100 + trial,
                0,
                MkvMode::Direct,
            )
            .unwrap();
            let base = ens.state_paths().to_vec();
            let perturbed: Vec<Vec<f64>> = base
                .iter()
                .map(|path| {
                    let offset = 2.0 * next_uniform(&mut rng) - 1.0;
                    path.iter()
                        .enumerate()
                        .map(|(k, &x)| x + offset * (k as f64 / 32.0).sin())
                        .collect()
                })
                .collect();
            let sweep_base = picard_sweep(&ens, &base);
            let sweep_pert = picard_sweep(&ens, &perturbed);
            let num = contraction_norm(&sweep_base, &sweep_pert, r, &grid).unwrap();
            let den = contraction_norm(&base, &perturbed, r, &grid).unwrap();
            let ratio = num / den;
            assert!(ratio <= bound, "trial {trial}: ratio {ratio} > {bound}");
        }
    }

    #[test]
    fn sfpk_residual_constant_phi_is_exactly_zero() {
        let law = iid_law();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.1),
            0.2,
            32,
            &grid,
            9,
            4,
            MkvMode::Direct,
        )
        .unwrap();
        let report = sfpk_residual(
            &ens.to_flow(),
            ens.theta_path(),
            ens.common_increments(),
            ens.sigma0(),
            &[TestFn::constant(2.5)],
        )
        .unwrap();
        assert!(report.residuals[0].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn sfpk_residual_identity_recovers_idiosyncratic_average() {
        // With a = u = 0 and φ(x) = x the residual telescopes to
        // (1/M) Σ_i σ_i W^i_t exactly on the grid.
        let law = LimitLaw::new(
            TypeLaw::Fixed(BankType::new(0.0, 1.0, 0.5)),
            InitLaw::Fixed { x0: 0.3, target: 0.0 },
            100.0,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let m = 32;
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.0),
            0.25,
            m,
            &grid,
            13,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        // Zero the supply effect by keeping θ = 0; rate is already 0.
        let report = sfpk_residual(
            &ens.to_flow(),
            ens.theta_path(),
            ens.common_increments(),
            ens.sigma0(),
            &[TestFn::identity()],
        )
        .unwrap();
        for k in [4usize, 9, 16] {
            let mut expect = 0.0;
            for i in 0..m {
                let mut w = 0.0;
                for step in 0..k {
                    w += ens.idio_dw[i][step];
                }
                expect += 0.5 * w;
            }
            expect /= m as f64;
            assert!(
                (report.residuals[0][k] - expect).abs() < 1e-12,
                "knot {k}: {} vs {expect}",
                report.residuals[0][k]
            );
        }
    }

    #[test]
    fn sfpk_residual_martingale_mean_is_centered() {
        let law = iid_law();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let phi = default_phi_family(1.0);
        let reps = 40;
        let mut terminal: Vec<Vec<f64>> = vec![Vec::new(); phi.len()];
        for rep in 0..reps {
            let ens = simulate_mkv(
                &law,
                &MfControl::Constant(0.1),
                0.2,
                64,
                &grid,
                77,
                rep,
                MkvMode::Direct,
            )
            .unwrap();
            let report = sfpk_residual(
                &ens.to_flow(),
                ens.theta_path(),
                ens.common_increments(),
                ens.sigma0(),
                &phi,
            )
            .unwrap();
            for (j, series) in report.residuals.iter().enumerate() {
                terminal[j].push(*series.last().unwrap());
            }
        }
        for (j, samples) in terminal.iter().enumerate() {
            let mean = samples.iter().sum::<f64>() / reps as f64;
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (reps as f64 - 1.0);
            let se = (var / reps as f64).sqrt();
            assert!(
                mean.abs() <= 3.0 * se + 1e-12,
                "phi {j}: terminal residual mean {mean} vs se {se}"
            );
        }
    }

    #[test]
    fn ensembles_are_exchangeable_bit_for_bit() {
        let law = iid_law();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.2),
            0.15,
            24,
            &grid,
            31,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        let mut perm: Vec<usize> = (0..24).collect();
        perm.reverse();
        perm.swap(3, 11);
        let permuted = ens.permuted(&perm);
        let phi = TestFn::square();
        for k in 0..=8 {
            assert_eq!(
                ens.measure_at(k).bracket(|x| (phi.f)(x)),
                permuted.measure_at(k).bracket(|x| (phi.f)(x)),
            );
        }
        let a = evaluate_mf_cost(&[ens], 1.0, 0.5, 1.0).unwrap();
        let b = evaluate_mf_cost(&[permuted], 1.0, 0.5, 1.0).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn mf_cost_examples() {
        // α = β = 0 leaves the pure control cost.
        let law = fixed_law(1.0, 0.2, 0.7);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.5),
            0.1,
            16,
            &grid,
            3,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        let cost = evaluate_mf_cost(&[ens], 0.0, 0.0, 2.0).unwrap();
        assert!((cost.value - 2.0 * 0.25).abs() < 1e-12);

        // Deterministic degenerate law: every particle is the scalar path.
        let law = fixed_law(0.0, 0.0, 1.0);
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.0),
            0.0,
            8,
            &grid,
            3,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        let cost = evaluate_mf_cost(&[ens], 1.0, 0.0, 1.0).unwrap();
        assert_eq!(cost.value, 1.0);
        assert_eq!(cost.se, 0.0);
    }
}
