//! Ground-truth solvers for the linear-quadratic structure of the control
//! problem: the Riccati ODE system obtained from the quadratic value-function
//! ansatz (policy interval ignored), and a one-dimensional finite-difference
//! dynamic-programming solver that honors the interval. Both are independent
//! of the Monte Carlo optimizer and of each other, and serve as its
//! validation oracles.
//!
//! With `z = x - y`, the ansatz `V = zᵀPz + 2rᵀz + s` reduces the
//! dynamic-programming PDE to the backward system
//!
//! ```text
//! -dP/dt = AᵀP + PA - (1/λ) P u uᵀ P + (β/N) I
//! -dr/dt = (Aᵀ - (1/λ) P u uᵀ) r + P A y
//! -ds/dt = tr(ΣΣᵀ P) + 2 rᵀ A y - (1/λ)(uᵀ r)²
//! ```
//!
//! with `P(T) = (α/N) I`, `r(T) = 0`, `s(T) = 0`.

use crate::error::Error;
use crate::linalg::{solve_tridiagonal, Mat};
use crate::model::{project_theta, DriftVol, Scenario};
use crate::scalar::Scalar;
use crate::sde::TimeGrid;
use crate::Result;

/// Backward Riccati solution stored on the scenario grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution<S> {
    grid: TimeGrid<S>,
    /// Symmetric PSD matrix path, one entry per knot.
    p: Vec<Mat<S>>,
    r: Vec<Vec<S>>,
    s: Vec<S>,
    supply: Vec<S>,
    lambda: S,
}

impl<S: Scalar> RiccatiSolution<S> {
    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn p_at(&self, knot: usize) -> &Mat<S> {
        &self.p[knot]
    }

    pub fn r_at(&self, knot: usize) -> &[S] {
        &self.r[knot]
    }

    pub fn s_at(&self, knot: usize) -> S {
        self.s[knot]
    }

    /// Value `E[V(0, x0; y)] = (x0-y)ᵀ P(0) (x0-y) + 2 r(0)ᵀ (x0-y) + s(0)`.
    pub fn value(&self, x0: &[S], y: &[S]) -> Result<S> {
        let n = self.p[0].rows();
        if x0.len() != n || y.len() != n {
            return Err(Error::dimension(format!(
                "riccati value: expected vectors of length {n}, got {} and {}",
                x0.len(),
                y.len()
            )));
        }
        let z: Vec<S> = x0.iter().zip(y).map(|(&a, &b)| a - b).collect();
        let pz = self.p[0].matvec(&z);
        let quad = dot(&z, &pz);
        let lin = S::of(2.0) * dot(&self.r[0], &z);
        Ok(quad + lin + self.s[0])
    }

    /// Projected feedback `Π_Θ( -(1/λ) uᵀ (P(t)(x-y) + r(t)) )`; `t` is
    /// resolved to the nearest grid knot.
    pub fn feedback(&self, t: S, x: &[S], y: &[S], theta_lo: S, theta_hi: S) -> Result<S> {
        let k = self.grid.nearest_knot(t);
        let z: Vec<S> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
        let mut pz = self.p[k].matvec(&z);
        for (v, r) in pz.iter_mut().zip(&self.r[k]) {
            *v = *v + *r;
        }
        let raw = -dot(&self.supply, &pz) / self.lambda;
        project_theta(raw, theta_lo, theta_hi)
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x * y)
        .fold(S::zero(), |acc, t| acc + t)
}

/// `tr(A B)` without forming the product.
fn trace_prod<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> S {
    let n = a.rows();
    let mut acc = S::zero();
    for i in 0..n {
        for j in 0..n {
            acc = acc + a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

struct RicState<S> {
    p: Mat<S>,
    r: Vec<S>,
    s: S,
}

impl<S: Scalar> RicState<S> {
    fn axpy(&self, h: S, d: &RicState<S>) -> RicState<S> {
        RicState {
            p: self.p.add(&d.p.scale(h)),
            r: self.r.iter().zip(&d.r).map(|(&a, &b)| a + h * b).collect(),
            s: self.s + h * d.s,
        }
    }
}

/// Solve the backward Riccati system with the classical four-stage
/// Runge–Kutta method on the scenario grid.
pub fn solve_riccati<S: Scalar>(scn: &Scenario<S>) -> Result<RiccatiSolution<S>> {
    scn.validate()?;
    let n = scn.n_banks();
    let n_s = S::from_usize(n);
    let grid = TimeGrid::for_scenario(scn);
    let dv = DriftVol::assemble(scn)?;
    let a = dv.drift.clone();
    let a_t = a.transpose();
    let u = dv.supply.clone();
    let y = scn.targets();
    let ay = a.matvec(&y);
    let sig_sig_t = dv.vol.matmul(&dv.vol.transpose());
    let lambda = scn.lambda;
    let beta_over_n = scn.beta / n_s;
    let two = S::of(2.0);

    let deriv = |state: &RicState<S>| -> RicState<S> {
        let p = &state.p;
        let pa = p.matmul(&a);
        let atp = a_t.matmul(p);
        let pu = p.matvec(&u);
        let mut dp = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let quad = pu[i] * pu[j] / lambda;
                let diag = if i == j { beta_over_n } else { S::zero() };
                dp[(i, j)] = -(atp[(i, j)] + pa[(i, j)] - quad + diag);
            }
        }
        let u_dot_r = dot(&u, &state.r);
        let at_r = a_t.matvec(&state.r);
        let p_ay = p.matvec(&ay);
        let dr: Vec<S> = (0..n)
            .map(|i| -(at_r[i] - u_dot_r / lambda * pu[i] + p_ay[i]))
            .collect();
        let ds =
            -(trace_prod(&sig_sig_t, p) + two * dot(&state.r, &ay) - u_dot_r * u_dot_r / lambda);
        RicState { p: dp, r: dr, s: ds }
    };

    let steps = grid.steps();
    let h = -grid.dt();
    let mut state = RicState {
        p: Mat::identity(n).scale(scn.alpha / n_s),
        r: vec![S::zero(); n],
        s: S::zero(),
    };
    let mut p_path = vec![Mat::zeros(0, 0); steps + 1];
    let mut r_path = vec![Vec::new(); steps + 1];
    let mut s_path = vec![S::zero(); steps + 1];
    p_path[steps] = state.p.clone();
    r_path[steps] = state.r.clone();
    s_path[steps] = state.s;

    let half = S::of(0.5);
    let sixth = S::of(1.0 / 6.0);
    for k in (0..steps).rev() {
        let k1 = deriv(&state);
        let k2 = deriv(&state.axpy(h * half, &k1));
        let k3 = deriv(&state.axpy(h * half, &k2));
        let k4 = deriv(&state.axpy(h, &k3));
        let p_sum = k1
            .p
            .add(&k2.p.scale(two))
            .add(&k3.p.scale(two))
            .add(&k4.p);
        let next_p = state.p.add(&p_sum.scale(h * sixth)).symmetrize();
        let next_r: Vec<S> = (0..n)
            .map(|i| state.r[i] + h * sixth * (k1.r[i] + two * k2.r[i] + two * k3.r[i] + k4.r[i]))
            .collect();
        let next_s = state.s + h * sixth * (k1.s + two * k2.s + two * k3.s + k4.s);
        state = RicState {
            p: next_p,
            r: next_r,
            s: next_s,
        };
        if !state.s.is_finite() || state.p.max_abs() > S::of(1e12) {
            return Err(Error::numerical(format!(
                "riccati integration blew up at knot {k}"
            )));
        }
        // P must stay symmetric PSD: Cholesky of P + 1e-10 I succeeds iff
        // the smallest eigenvalue exceeds -1e-10.
        let shifted = state.p.add(&Mat::identity(n).scale(S::of(1e-10)));
        if shifted.cholesky().is_none() {
            return Err(Error::numerical(format!(
                "riccati P lost positive semidefiniteness at knot {k}"
            )));
        }
        p_path[k] = state.p.clone();
        r_path[k] = state.r.clone();
        s_path[k] = state.s;
    }

    Ok(RiccatiSolution {
        grid,
        p: p_path,
        r: r_path,
        s: s_path,
        supply: u,
        lambda,
    })
}

/// Discretization scheme for the 1-D dynamic-programming solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HjbScheme {
    /// Positive-coefficient explicit update behind a CFL guard.
    Explicit,
    /// Backward Euler with implicit transport and diffusion; unconditionally
    /// stable.
    Implicit,
}

#[derive(Debug, Clone)]
pub struct HjbOptions<S> {
    /// Number of space intervals (nodes = intervals + 1).
    pub space_intervals: usize,
    /// Half-width of the space domain around the target; `None` picks
    /// `|x0-y| + 6 sqrt((σ²+σ₀²) T) + |u| max|Θ| T`.
    pub radius: Option<S>,
    pub scheme: HjbScheme,
}

impl<S: Scalar> Default for HjbOptions<S> {
    fn default() -> Self {
        HjbOptions {
            space_intervals: 400,
            radius: None,
            scheme: HjbScheme::Explicit,
        }
    }
}

/// Value and feedback surfaces of the 1-D solver.
#[derive(Debug, Clone)]
pub struct HjbSurface1D<S> {
    grid: TimeGrid<S>,
    xs: Vec<S>,
    /// `value[knot][node]`.
    value: Vec<Vec<S>>,
    /// Minimizing control at each (knot, node); always inside the interval.
    feedback: Vec<Vec<S>>,
}

impl<S: Scalar> HjbSurface1D<S> {
    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn nodes(&self) -> &[S] {
        &self.xs
    }

    pub fn value_grid(&self) -> &[Vec<S>] {
        &self.value
    }

    pub fn feedback_grid(&self) -> &[Vec<S>] {
        &self.feedback
    }

    /// Linear interpolation of `V(t_k, x)` in space.
    pub fn value_at(&self, knot: usize, x: S) -> S {
        let xs = &self.xs;
        let row = &self.value[knot];
        if x <= xs[0] {
            return row[0];
        }
        if x >= xs[xs.len() - 1] {
            return row[xs.len() - 1];
        }
        let dx = xs[1] - xs[0];
        let pos = ((x - xs[0]) / dx).to_f64().floor() as usize;
        let pos = pos.min(xs.len() - 2);
        let w = (x - xs[pos]) / dx;
        row[pos] * (S::one() - w) + row[pos + 1] * w
    }

    pub fn initial_value(&self, x: S) -> S {
        self.value_at(0, x)
    }
}

/// Quadratic extrapolation ghost `V[-1]` from the first three nodes.
fn ghost<S: Scalar>(v0: S, v1: S, v2: S) -> S {
    S::of(3.0) * v0 - S::of(3.0) * v1 + v2
}

/// Backward finite-difference solution of the one-bank dynamic-programming
/// equation with the control restricted to the policy interval.
///
/// The minimizer at each node is the clamp of `-u V_x / (2λ)` with a central
/// `V_x`; the transport term switches between central and one-sided stencils
/// node by node so all scheme coefficients stay nonnegative.
pub fn solve_hjb_1d<S: Scalar>(scn: &Scenario<S>, opts: &HjbOptions<S>) -> Result<HjbSurface1D<S>> {
    scn.validate()?;
    if scn.n_banks() != 1 {
        return Err(Error::config(format!(
            "the finite-difference solver is one-dimensional; scenario has {} banks",
            scn.n_banks()
        )));
    }
    if opts.space_intervals < 8 {
        return Err(Error::config("need at least 8 space intervals"));
    }
    let bank = scn.banks[0];
    let x0 = scn.init[0].x0;
    let y = scn.init[0].target;
    let diffusion = (bank.sigma * bank.sigma + scn.sigma0 * scn.sigma0) * S::of(0.5);
    let theta_abs = scn.theta_lo.abs().max(scn.theta_hi.abs());
    let radius = opts.radius.unwrap_or_else(|| {
        let spread = S::of(6.0) * (S::of(2.0) * diffusion * scn.horizon).sqrt();
        ((x0 - y).abs() + spread + bank.supply.abs() * theta_abs * scn.horizon).max(S::one())
    });

    let grid = TimeGrid::for_scenario(scn);
    let m = opts.space_intervals;
    let dx = S::of(2.0) * radius / S::from_usize(m);
    let xs: Vec<S> = (0..=m)
        .map(|i| y - radius + dx * S::from_usize(i))
        .collect();
    let dt = grid.dt();

    let max_speed = bank.supply.abs() * theta_abs;
    if opts.scheme == HjbScheme::Explicit {
        let parabolic = S::of(2.0) * diffusion * dt / (dx * dx);
        let advective = max_speed * dt / dx;
        if parabolic + advective > S::one() {
            return Err(Error::config(format!(
                "explicit scheme violates the CFL condition \
                 (2 D dt/dx² + |u θ| dt/dx = {} > 1); increase steps or switch to the implicit scheme",
                parabolic + advective
            )));
        }
    }

    let steps = grid.steps();
    let mut value = vec![vec![S::zero(); m + 1]; steps + 1];
    let mut feedback = vec![vec![S::zero(); m + 1]; steps + 1];
    for (i, &x) in xs.iter().enumerate() {
        value[steps][i] = scn.alpha * (x - y) * (x - y);
    }

    let two = S::of(2.0);
    let policy = |vx: S| -> S {
        project_theta(
            -bank.supply * vx / (two * scn.lambda),
            scn.theta_lo,
            scn.theta_hi,
        )
        .expect("validated interval")
    };
    let neighbor_values = |row: &[S], i: usize| -> (S, S) {
        let left = if i == 0 {
            ghost(row[0], row[1], row[2])
        } else {
            row[i - 1]
        };
        let right = if i == m {
            ghost(row[m], row[m - 1], row[m - 2])
        } else {
            row[i + 1]
        };
        (left, right)
    };

    // Terminal feedback row, for completeness of the exported surface.
    for (i, slot) in feedback[steps].iter_mut().enumerate() {
        let (left, right) = neighbor_values(&value[steps], i);
        *slot = policy((right - left) / (two * dx));
    }

    for k in (0..steps).rev() {
        let (lo_rows, hi_rows) = value.split_at_mut(k + 1);
        let prev = &hi_rows[0];
        let cur = &mut lo_rows[k];
        let fb = &mut feedback[k];
        match opts.scheme {
            HjbScheme::Explicit => {
                for i in 0..=m {
                    let (left, right) = neighbor_values(prev, i);
                    let vx_central = (right - left) / (two * dx);
                    let theta = policy(vx_central);
                    fb[i] = theta;
                    let speed = bank.supply * theta;
                    let use_central = speed.abs() * dx <= two * diffusion;
                    let vx = if use_central {
                        vx_central
                    } else if speed > S::zero() {
                        (right - prev[i]) / dx
                    } else {
                        (prev[i] - left) / dx
                    };
                    let vxx = (right - two * prev[i] + left) / (dx * dx);
                    let running =
                        scn.beta * (xs[i] - y) * (xs[i] - y) + scn.lambda * theta * theta;
                    cur[i] = prev[i] + dt * (speed * vx + diffusion * vxx + running);
                }
            }
            HjbScheme::Implicit => {
                // Policy from the known level; transport and diffusion
                // implicit in the unknown level via a tridiagonal solve.
                let mut lower = vec![S::zero(); m + 1];
                let mut diag = vec![S::zero(); m + 1];
                let mut upper = vec![S::zero(); m + 1];
                let mut rhs = vec![S::zero(); m + 1];
                let d_coef = diffusion * dt / (dx * dx);
                for i in 0..=m {
                    let (left, right) = neighbor_values(prev, i);
                    let theta = policy((right - left) / (two * dx));
                    fb[i] = theta;
                    let speed = bank.supply * theta;
                    let running =
                        scn.beta * (xs[i] - y) * (xs[i] - y) + scn.lambda * theta * theta;
                    let use_central = speed.abs() * dx <= two * diffusion;
                    // Coefficients of V_{i-1} and V_{i+1} in the transport term.
                    let (wl, wr) = if use_central {
                        (-speed * dt / (two * dx), speed * dt / (two * dx))
                    } else if speed > S::zero() {
                        (S::zero(), speed * dt / dx)
                    } else {
                        (-speed * dt / dx, S::zero())
                    };
                    lower[i] = -(d_coef + wl);
                    diag[i] = S::one() + two * d_coef + wl + wr;
                    upper[i] = -(d_coef + wr);
                    rhs[i] = prev[i] + dt * running;
                }
                // Fold the extrapolation ghosts into the boundary rows. The
                // ghost touches a third column; its coupling is lagged to the
                // known level to keep the system tridiagonal.
                {
                    let g = lower[0];
                    lower[0] = S::zero();
                    diag[0] = diag[0] + S::of(3.0) * g;
                    upper[0] = upper[0] - S::of(3.0) * g;
                    rhs[0] = rhs[0] - g * prev[2];
                }
                {
                    let g = upper[m];
                    upper[m] = S::zero();
                    diag[m] = diag[m] + S::of(3.0) * g;
                    lower[m] = lower[m] - S::of(3.0) * g;
                    rhs[m] = rhs[m] - g * prev[m - 2];
                }
                let solved = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
                cur.copy_from_slice(&solved);
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "finite-difference sweep produced non-finite values at knot {k}"
            )));
        }
    }

    Ok(HjbSurface1D {
        grid,
        xs,
        value,
        feedback,
    })
}
