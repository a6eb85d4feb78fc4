//! Problem data: bank types, targets, scenario parameters, the drift and
//! volatility structure of the reserve system, the cost functions, and the
//! projection onto the policy interval.
//!
//! A bank `i` carries the type vector `(a_i, u_i, sigma_i)`: its
//! borrow/lend rate, its sensitivity to the centrally supplied money rate,
//! and its idiosyncratic volatility. The state `X^i` mean-reverts to the
//! system average at rate `a_i`, is pushed by `u_i * theta_t`, and is driven
//! by its own noise plus a common noise of volatility `sigma0`.

use crate::error::Error;
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::Result;

/// Per-bank parameter triple; all entries strictly positive and bounded by
/// the scenario-wide constant `K` (assumption A_s1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankType<S> {
    /// Borrow/lend mean-reversion rate (1/time).
    pub rate: S,
    /// Monetary-supply intensity (dimensionless).
    pub supply: S,
    /// Idiosyncratic volatility (state units / sqrt(time)).
    pub sigma: S,
}

impl<S: Scalar> BankType<S> {
    pub fn new(rate: S, supply: S, sigma: S) -> Self {
        BankType {
            rate,
            supply,
            sigma,
        }
    }

    /// Enforce the A_s1 bounds. The supply intensity must be strictly
    /// positive; the rate and volatility may degenerate to zero so the
    /// closed-form oracle scenarios (no mean reversion, no diffusion) stay
    /// expressible.
    fn validate(&self, idx: usize, k_bound: S) -> Result<()> {
        if !(self.supply > S::zero()) || !self.supply.is_finite() {
            return Err(Error::config(format!(
                "violates assumption A_s1: bank {idx} has u = {} (must be > 0)",
                self.supply
            )));
        }
        for (name, v) in [("a", self.rate), ("u", self.supply), ("sigma", self.sigma)] {
            if !(v >= S::zero()) || !v.is_finite() {
                return Err(Error::config(format!(
                    "violates assumption A_s1: bank {idx} has {name} = {v} (must be >= 0)"
                )));
            }
            if v > k_bound {
                return Err(Error::config(format!(
                    "violates assumption A_s1: bank {idx} has {name} = {v} above the global bound K = {k_bound}"
                )));
            }
        }
        Ok(())
    }
}

/// Initial log-reserve and target steady reserve level of one bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialDatum<S> {
    pub x0: S,
    /// Target steady reserve level the bank is steered toward.
    pub target: S,
}

impl<S: Scalar> InitialDatum<S> {
    pub fn new(x0: S, target: S) -> Self {
        InitialDatum { x0, target }
    }
}

/// A full problem instance. Construct through [`Scenario::new`] (or the
/// config parser), which enforces the model assumptions.
#[derive(Debug, Clone)]
pub struct Scenario<S> {
    pub banks: Vec<BankType<S>>,
    pub init: Vec<InitialDatum<S>>,
    /// Common-noise volatility, >= 0.
    pub sigma0: S,
    /// Terminal-cost weight.
    pub alpha: S,
    /// Running state-cost weight.
    pub beta: S,
    /// Control-cost weight.
    pub lambda: S,
    /// Policy interval bounds (assumption A_Θ: a compact convex subset of
    /// the reals, i.e. a closed bounded interval).
    pub theta_lo: S,
    pub theta_hi: S,
    /// Time horizon.
    pub horizon: S,
    /// Time-grid resolution.
    pub steps: usize,
    /// Monte Carlo path budget.
    pub mc_paths: usize,
    pub seed: u64,
    /// Extra moment exponent used by diagnostics (the `rho` in the
    /// `(2+rho)`-moment bound of A_s1).
    pub rho_exp: S,
    /// Global parameter bound `K` of A_s1.
    pub k_bound: S,
}

impl<S: Scalar> Scenario<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        banks: Vec<BankType<S>>,
        init: Vec<InitialDatum<S>>,
        sigma0: S,
        alpha: S,
        beta: S,
        lambda: S,
        theta_lo: S,
        theta_hi: S,
        horizon: S,
        steps: usize,
        mc_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        let scn = Scenario {
            banks,
            init,
            sigma0,
            alpha,
            beta,
            lambda,
            theta_lo,
            theta_hi,
            horizon,
            steps,
            mc_paths,
            seed,
            rho_exp: S::one(),
            k_bound: S::of(DEFAULT_K_BOUND),
        };
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.banks.is_empty() {
            return Err(Error::config("scenario has no banks (need N >= 1)"));
        }
        if self.banks.len() != self.init.len() {
            return Err(Error::dimension(format!(
                "{} banks but {} initial data",
                self.banks.len(),
                self.init.len()
            )));
        }
        for (i, b) in self.banks.iter().enumerate() {
            b.validate(i, self.k_bound)?;
        }
        for (i, d) in self.init.iter().enumerate() {
            if !d.x0.is_finite() || !d.target.is_finite() {
                return Err(Error::config(format!("bank {i} has non-finite initial datum")));
            }
        }
        if !(self.sigma0 >= S::zero()) {
            return Err(Error::config(format!(
                "sigma0 = {} must be >= 0",
                self.sigma0
            )));
        }
        // The control weight divides the feedback formulas, so it must stay
        // strictly positive; the state weights may vanish (pure control-cost
        // scenarios are used by the oracles).
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= S::zero()) {
                return Err(Error::config(format!(
                    "cost weight {name} = {v} must be >= 0"
                )));
            }
        }
        if !(self.lambda > S::zero()) {
            return Err(Error::config(format!(
                "cost weight lambda = {} must be > 0",
                self.lambda
            )));
        }
        if self.theta_lo > self.theta_hi {
            return Err(Error::config(format!(
                "violates assumption A_Θ: theta_lo = {} exceeds theta_hi = {} (policy interval empty)",
                self.theta_lo, self.theta_hi
            )));
        }
        if !self.theta_lo.is_finite() || !self.theta_hi.is_finite() {
            return Err(Error::config(
                "violates assumption A_Θ: policy interval must be compact (finite bounds)",
            ));
        }
        if !(self.horizon > S::zero()) {
            return Err(Error::config(format!(
                "horizon T = {} must be > 0",
                self.horizon
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.mc_paths == 0 {
            return Err(Error::config("mc_paths must be >= 1"));
        }
        if !(self.rho_exp > S::zero()) {
            return Err(Error::config(format!(
                "rho_exp = {} must be > 0",
                self.rho_exp
            )));
        }
        Ok(())
    }

    pub fn n_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn supply_vector(&self) -> Vec<S> {
        self.banks.iter().map(|b| b.supply).collect()
    }

    pub fn targets(&self) -> Vec<S> {
        self.init.iter().map(|d| d.target).collect()
    }

    pub fn initial_states(&self) -> Vec<S> {
        self.init.iter().map(|d| d.x0).collect()
    }

    pub fn clamp_theta(&self, theta: S) -> S {
        project_theta(theta, self.theta_lo, self.theta_hi).expect("validated interval")
    }

    /// True when the policy interval degenerates to a single point.
    pub fn theta_degenerate(&self) -> bool {
        self.theta_lo == self.theta_hi
    }
}

/// Default A_s1 bound used when a scenario file does not set one.
pub const DEFAULT_K_BOUND: f64 = 100.0;

/// Assembled drift/volatility structure of the N-bank system.
#[derive(Debug, Clone)]
pub struct DriftVol<S> {
    /// N x N mean-reversion matrix; every row sums to zero.
    pub drift: Mat<S>,
    /// Length-N supply vector multiplying the control.
    pub supply: Vec<S>,
    /// N x (N+1) volatility matrix: column 0 is the common noise, the
    /// diagonal block the idiosyncratic noises.
    pub vol: Mat<S>,
}

impl<S: Scalar> DriftVol<S> {
    pub fn assemble(scn: &Scenario<S>) -> Result<Self> {
        Ok(DriftVol {
            drift: build_drift_matrix(&scn.banks)?,
            supply: scn.supply_vector(),
            vol: build_vol_matrix(&scn.banks, scn.sigma0)?,
        })
    }
}

/// Mean-reversion drift matrix: `A[i][i] = (1-N) a_i / N`, `A[i][j] = a_i / N`
/// for `j != i`. The diagonal is formed as the negated off-diagonal row sum so
/// rows cancel exactly in floating point.
pub fn build_drift_matrix<S: Scalar>(banks: &[BankType<S>]) -> Result<Mat<S>> {
    if banks.is_empty() {
        return Err(Error::config("cannot build drift matrix for zero banks"));
    }
    let n = banks.len();
    let n_s = S::from_usize(n);
    let mut a = Mat::zeros(n, n);
    for (i, bank) in banks.iter().enumerate() {
        let off = bank.rate / n_s;
        let mut row_sum = S::zero();
        for j in 0..n {
            if j != i {
                a[(i, j)] = off;
                row_sum = row_sum + off;
            }
        }
        a[(i, i)] = -row_sum;
    }
    Ok(a)
}

/// Volatility matrix: first column `sigma0`, then the idiosyncratic diagonal.
pub fn build_vol_matrix<S: Scalar>(banks: &[BankType<S>], sigma0: S) -> Result<Mat<S>> {
    if banks.is_empty() {
        return Err(Error::config("cannot build volatility matrix for zero banks"));
    }
    if !(sigma0 >= S::zero()) {
        return Err(Error::config(format!("sigma0 = {sigma0} must be >= 0")));
    }
    let n = banks.len();
    let mut sig = Mat::zeros(n, n + 1);
    for (i, bank) in banks.iter().enumerate() {
        sig[(i, 0)] = sigma0;
        sig[(i, i + 1)] = bank.sigma;
    }
    Ok(sig)
}

/// Terminal cost `(alpha/N) * sum_i |x_i - y_i|^2`.
pub fn terminal_cost<S: Scalar>(x: &[S], y: &[S], alpha: S) -> Result<S> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dimension(format!(
            "terminal_cost: state length {} vs target length {}",
            x.len(),
            y.len()
        )));
    }
    let n = S::from_usize(x.len());
    let sum = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (xi - yi) * (xi - yi))
        .fold(S::zero(), |acc, t| acc + t);
    Ok(alpha / n * sum)
}

/// Running cost `(beta/N) * sum_i |x_i - y_i|^2 + lambda * theta^2`.
pub fn running_cost<S: Scalar>(x: &[S], y: &[S], theta: S, beta: S, lambda: S) -> Result<S> {
    let state_part = terminal_cost(x, y, beta)?;
    Ok(state_part + lambda * theta * theta)
}

/// Euclidean projection onto the policy interval `[lo, hi]`.
pub fn project_theta<S: Scalar>(theta_raw: S, lo: S, hi: S) -> Result<S> {
    if lo > hi {
        return Err(Error::config(format!(
            "violates assumption A_Θ: theta_lo = {lo} exceeds theta_hi = {hi}"
        )));
    }
    Ok(theta_raw.max(lo).min(hi))
}
