//! Acceptance suite: every release-gating property as one test with a
//! printed pass line. Tolerances are pinned here, next to the analytic
//! oracles that justify them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use interbank::control::{
    evaluate_strong_cost, gateaux_derivative, optimize_picard, PicardOptions, RegressionBasis,
};
use interbank::experiments::{gamma_study, objective_convergence};
use interbank::lq::{solve_hjb_1d, solve_riccati, HjbOptions, HjbScheme};
use interbank::meanfield::{
    contraction_norm, default_phi_family, evaluate_mf_cost, picard_sweep, sfpk_residual,
    simulate_mkv, InitLaw, LimitLaw, MfControl, MkvMode, TypeLaw,
};
use interbank::measures::{wasserstein2, EmpiricalMeasure};
use interbank::model::{BankType, InitialDatum, Scenario};
use interbank::rng::{next_uniform, stream_rng};
use interbank::sde::{random_admissible_control, simulate_paths, ControlSpec, NoiseBundle, TimeGrid};
use interbank::control::RandomizedPolicy;

type Real = f64;

fn scalar_scenario(theta_lo: Real, theta_hi: Real, steps: usize, paths: usize) -> Scenario<Real> {
    Scenario::new(
        vec![BankType::new(0.0, 1.0, 0.0)],
        vec![InitialDatum::new(1.0, 0.0)],
        0.0,
        1.0,
        0.0,
        1.0,
        theta_lo,
        theta_hi,
        1.0,
        steps,
        paths,
        2024,
    )
    .unwrap()
}

fn iid_law() -> LimitLaw<Real> {
    LimitLaw::new(
        TypeLaw::UniformBox {
            rate: (0.5, 1.5),
            supply: (0.9, 1.1),
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
fn acceptance_01_scalar_lq_oracle() {
    // Minimizing |x(1)|² + ∫θ² with dx = θ dt from x(0) = 1 costs exactly
    // 1/2 at the constant control θ ≡ -1/2 (Euler–Lagrange closed form).
    let started = std::time::Instant::now();
    let scn = scalar_scenario(-10.0, 10.0, 64, 10_000);
    let ric = solve_riccati(&scn).unwrap();
    let value = ric.value(&[1.0], &[0.0]).unwrap();
    assert!(
        (value - 0.5).abs() <= 1e-6,
        "riccati value {value} vs 1/2"
    );

    let noise = NoiseBundle::for_scenario(&scn).unwrap();
    let outcome = optimize_picard(&scn, &noise, &PicardOptions::default()).unwrap();
    assert!(
        (outcome.cost.value - 0.5).abs() <= 0.02 * 0.5,
        "optimizer cost {} vs 1/2 within 2%",
        outcome.cost.value
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "runtime {secs:.1}s exceeds 30s");
    println!(
        "acceptance 01 (scalar LQ oracle): PASS riccati={value:.9} optimizer={:.6} [{secs:.1}s]",
        outcome.cost.value
    );
}

#[test]
fn acceptance_02_constrained_optimum() {
    // With Θ = [-0.1, 0.1] the clamped constant θ ≡ -0.1 is optimal:
    // (1 - 0.1)² + 0.1² = 0.82.
    let scn = scalar_scenario(-0.1, 0.1, 200, 10_000);
    let noise = NoiseBundle::for_scenario(&scn).unwrap();
    let outcome = optimize_picard(&scn, &noise, &PicardOptions::default()).unwrap();
    assert!(
        (outcome.cost.value - 0.82).abs() <= 1e-2,
        "optimizer clamped cost {}",
        outcome.cost.value
    );
    let surf = solve_hjb_1d(&scn, &HjbOptions::default()).unwrap();
    let pde = surf.initial_value(1.0);
    assert!((pde - 0.82).abs() <= 1e-2, "pde clamped value {pde}");
    println!(
        "acceptance 02 (constrained optimum): PASS optimizer={:.6} pde={pde:.6}",
        outcome.cost.value
    );
}

#[test]
fn acceptance_03_hjb_riccati_agreement() {
    // β > 0 stochastic tracking problem, projection inactive; 400 x 400 grid.
    let scn: Scenario<Real> = Scenario::new(
        vec![BankType::new(0.0, 1.0, 0.2)],
        vec![InitialDatum::new(1.0, 0.0)],
        0.1,
        1.0,
        0.5,
        1.0,
        -2.0,
        2.0,
        1.0,
        400,
        10,
        2024,
    )
    .unwrap();
    let started = std::time::Instant::now();
    let ric = solve_riccati(&scn).unwrap().value(&[1.0], &[0.0]).unwrap();
    let surf = solve_hjb_1d(
        &scn,
        &HjbOptions {
            space_intervals: 400,
            radius: None,
            scheme: HjbScheme::Explicit,
        },
    )
    .unwrap();
    let pde = surf.initial_value(1.0);
    let rel: Real = ((pde - ric) / ric).abs();
    assert!(rel < 1e-3, "pde {pde} vs riccati {ric}: rel gap {rel:.2e}");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 60s");
    println!("acceptance 03 (pde/riccati agreement): PASS rel_gap={rel:.2e} [{secs:.1}s]");
}

#[test]
fn acceptance_04_gateaux_gradient_check() {
    // Deterministic scalar case with common random numbers: the finite
    // difference of the cost converges linearly in ε to the adjoint-based
    // directional derivative.
    let scn = scalar_scenario(-10.0, 10.0, 64, 256);
    let noise = NoiseBundle::for_scenario(&scn).unwrap();
    let theta = ControlSpec::Constant(0.0);
    let direction = ControlSpec::Constant(1.0);
    let gat = gateaux_derivative(&theta, &direction, &scn, &noise, &RegressionBasis::default())
        .unwrap()
        .value;
    let base = evaluate_strong_cost(&theta, &scn, &noise).unwrap().value;
    let mut errors = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let bumped = evaluate_strong_cost(&ControlSpec::Constant(eps), &scn, &noise)
            .unwrap()
            .value;
        let fd = (bumped - base) / eps;
        errors.push((fd - gat).abs() / gat.abs());
    }
    assert!(
        errors[2] < 1e-2,
        "relative error at eps=1e-3 is {}",
        errors[2]
    );
    // Linear decrease: each decade of ε drops the error by roughly 10x.
    for w in errors.windows(2) {
        let ratio = w[1] / w[0];
        assert!(
            (0.02..0.5).contains(&ratio),
            "error sequence {errors:?} is not linear in eps"
        );
    }
    println!(
        "acceptance 04 (gradient check): PASS errors={:?}",
        errors
            .iter()
            .map(|e| format!("{e:.2e}"))
            .collect::<Vec<_>>()
    );
}

#[test]
fn acceptance_05_optimality_sandwich() {
    // Four heterogeneous banks, wide interval: the optimizer's value is not
    // beaten by any of 50 random admissible controls beyond Monte Carlo noise.
    let started = std::time::Instant::now();
    let banks = vec![
        BankType::new(0.6, 0.9, 0.15),
        BankType::new(1.0, 1.0, 0.20),
        BankType::new(1.4, 1.1, 0.25),
        BankType::new(1.8, 1.2, 0.30),
    ];
    let init = vec![
        InitialDatum::new(1.0, 0.0),
        InitialDatum::new(0.5, 0.1),
        InitialDatum::new(-0.5, 0.0),
        InitialDatum::new(0.0, -0.1),
    ];
    let scn = Scenario::new(
        banks, init, 0.1, 1.0, 0.5, 1.0, -3.0, 3.0, 1.0, 50, 10_000, 2024,
    )
    .unwrap();
    let noise = NoiseBundle::for_scenario(&scn).unwrap();
    let outcome = optimize_picard(&scn, &noise, &PicardOptions::default()).unwrap();
    let mut worst_margin = f64::INFINITY;
    for trial in 0..50 {
        let control = random_admissible_control(&scn, noise.n_paths(), 7000 + trial);
        let cost = evaluate_strong_cost(&control, &scn, &noise).unwrap();
        let margin = cost.value + 3.0 * cost.se - outcome.cost.value;
        worst_margin = worst_margin.min(margin);
        assert!(
            outcome.cost.value <= cost.value + 3.0 * cost.se,
            "random control {trial} beat the optimizer: {} vs {}",
            cost.value,
            outcome.cost.value
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "runtime {secs:.1}s exceeds 5 minutes");
    println!(
        "acceptance 05 (optimality sandwich): PASS worst_margin={worst_margin:.4} [{secs:.1}s]"
    );
}

#[test]
fn acceptance_06_increment_covariance_structure() {
    // Drift-free system: increment covariance is σ₀² dt off the diagonal and
    // (σ₀² + σ_i²) dt on it.
    let sigma = [0.2, 0.3, 0.4];
    let sigma0: Real = 0.15;
    let steps = 8;
    let n_paths = 100_000;
    let banks: Vec<BankType<Real>> = sigma.iter().map(|&s| BankType::new(0.0, 1.0, s)).collect();
    let init = vec![InitialDatum::new(0.0, 0.0); 3];
    let scn = Scenario::new(
        banks, init, sigma0, 1.0, 0.0, 1.0, -1.0, 1.0, 1.0, steps, n_paths, 2024,
    )
    .unwrap();
    let noise = NoiseBundle::for_scenario(&scn).unwrap();
    let paths = simulate_paths(&scn, &ControlSpec::Constant(0.0), &noise).unwrap();
    let dt = 1.0 / steps as Real;

    let check = |i: usize, j: usize, expect: Real| {
        // Mean and standard error of the product of increments, pooled over
        // paths and (independent) steps.
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let count = (n_paths * steps) as Real;
        for p in 0..n_paths {
            for k in 0..steps {
                let di = paths.state(p, k + 1, i) - paths.state(p, k, i);
                let dj = paths.state(p, k + 1, j) - paths.state(p, k, j);
                let prod = di * dj;
                sum += prod;
                sumsq += prod * prod;
            }
        }
        let mean = sum / count;
        let var = sumsq / count - mean * mean;
        let se = (var / count).sqrt();
        assert!(
            (mean - expect).abs() <= 3.0 * se,
            "cov[{i},{j}] = {mean:.3e} vs {expect:.3e} (se {se:.2e})"
        );
        (mean, se)
    };
    for (i, &s_i) in sigma.iter().enumerate() {
        check(i, i, (sigma0 * sigma0 + s_i * s_i) * dt);
        for j in 0..i {
            check(i, j, sigma0 * sigma0 * dt);
        }
    }
    println!("acceptance 06 (increment covariance): PASS all pairs within 3 SE");
}

#[test]
fn acceptance_07_sfpk_residual_decay() {
    // The measure-equation defect is a martingale of variance O(1/N):
    // its sup-time RMS at N=800 sits strictly below the one at N=100, and
    // the terminal mean is centered for every test function.
    let law = iid_law();
    let sigma0 = 0.2;
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let reps = 30u64;
    let seed = 2024;

    // One shared test-function family: scaled by the pooled terminal spread
    // of the large system.
    let mut terminal = Vec::new();
    let mut big_ensembles = Vec::new();
    for rep in 0..reps {
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.0),
            sigma0,
            800,
            &grid,
            seed,
            rep,
            MkvMode::Direct,
        )
        .unwrap();
        for p in 0..ens.n_particles() {
            terminal.push(ens.states(p)[25]);
        }
        big_ensembles.push(ens);
    }
    let mean = terminal.iter().sum::<Real>() / terminal.len() as Real;
    let std = (terminal.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>()
        / terminal.len() as Real)
        .sqrt();
    let family = default_phi_family(std.max(1e-6));

    let stats = |n: usize| -> (Real, Real, Vec<Vec<Real>>) {
        let mut per_rep = Vec::new();
        let mut terminal_by_phi: Vec<Vec<Real>> = vec![Vec::new(); family.len()];
        for rep in 0..reps {
            let ens = if n == 800 {
                big_ensembles[rep as usize].clone()
            } else {
                simulate_mkv(
                    &law,
                    &MfControl::Constant(0.0),
                    sigma0,
                    n,
                    &grid,
                    seed,
                    rep,
                    MkvMode::Direct,
                )
                .unwrap()
            };
            let report = sfpk_residual(
                &ens.to_flow(),
                ens.theta_path(),
                ens.common_increments(),
                sigma0,
                &family,
            )
            .unwrap();
            let mean_sq = report.sup_abs.iter().map(|s| s * s).sum::<Real>()
                / family.len() as Real;
            per_rep.push(mean_sq.sqrt());
            for (j, series) in report.residuals.iter().enumerate() {
                terminal_by_phi[j].push(*series.last().unwrap());
            }
        }
        let m = per_rep.iter().sum::<Real>() / reps as Real;
        let var = per_rep.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / (reps as Real - 1.0);
        (m, (var / reps as Real).sqrt(), terminal_by_phi)
    };

    let (rms_small, se_small, _) = stats(100);
    let (rms_big, se_big, terminal_by_phi) = stats(800);
    assert!(
        rms_big + 2.0 * (se_big + se_small) < rms_small,
        "sup-time RMS did not decay: N=100 {rms_small:.4} (se {se_small:.4}) vs N=800 {rms_big:.4} (se {se_big:.4})"
    );
    for (j, samples) in terminal_by_phi.iter().enumerate() {
        let m = samples.iter().sum::<Real>() / samples.len() as Real;
        let var = samples.iter().map(|v| (v - m) * (v - m)).sum::<Real>()
            / (samples.len() as Real - 1.0);
        let se = (var / samples.len() as Real).sqrt();
        assert!(
            m.abs() <= 3.0 * se,
            "phi {} terminal residual mean {m:.3e} exceeds 3 se {se:.3e}",
            family[j].name
        );
    }
    println!(
        "acceptance 07 (measure-equation residual): PASS rms N=100 {rms_small:.4} -> N=800 {rms_big:.4}"
    );
}

#[test]
fn acceptance_08_contraction_rate() {
    // One fixed-point sweep contracts the discounted pathwise norm at rate
    // 2K/r; at r = 4K the empirical ratio stays below 0.55 in all trials.
    let law = iid_law();
    let k_bound = 1.5;
    let r = 4.0 * k_bound;
    let bound = 2.0 * k_bound / r + 0.05;
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let mut rng = stream_rng(2024, 90, 0, 0);
    let mut worst: Real = 0.0;
    for trial in 0..20 {
        let ens = simulate_mkv(
            &law,
            &MfControl::Constant(0.1),
            0.2,
            128,
            &grid,
            3000 + trial,
            0,
            MkvMode::Direct,
        )
        .unwrap();
        let base = ens.state_paths().to_vec();
        let perturbed: Vec<Vec<Real>> = base
            .iter()
            .map(|path| {
                let amp = 0.2 + 1.8 * next_uniform(&mut rng);
                let phase = next_uniform(&mut rng);
                path.iter()
                    .enumerate()
                    .map(|(k, &x)| x + amp * ((k as Real / 32.0 + phase) * 3.0).sin())
                    .collect()
            })
            .collect();
        let num = contraction_norm(
            &picard_sweep(&ens, &base),
            &picard_sweep(&ens, &perturbed),
            r,
            &grid,
        )
        .unwrap();
        let den = contraction_norm(&base, &perturbed, r, &grid).unwrap();
        let ratio = num / den;
        worst = worst.max(ratio);
        assert!(ratio <= bound, "trial {trial}: ratio {ratio:.4} > {bound}");
    }
    println!("acceptance 08 (contraction rate): PASS worst ratio {worst:.4} <= {bound}");
}

#[test]
fn acceptance_09_cost_functional_convergence() {
    // Fixed θ ≡ 0: the finite-system cost approaches the particle-limit
    // cost; the comparison couples every system size to the same reference
    // realizations for variance reduction.
    let law = iid_law();
    let sigma0 = 0.2;
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let (alpha, beta, lambda) = (1.0, 1.0, 1.0);
    let reps = 48u64;
    let m_ref = 800;
    let seed = 2024;

    let gap_stats = |n: usize| -> (Real, Real) {
        let diffs: Vec<Real> = (0..reps)
            .map(|rep| {
                let small = simulate_mkv(
                    &law,
                    &MfControl::Constant(0.0),
                    sigma0,
                    n,
                    &grid,
                    seed,
                    rep,
                    MkvMode::Direct,
                )
                .unwrap();
                let big = simulate_mkv(
                    &law,
                    &MfControl::Constant(0.0),
                    sigma0,
                    m_ref,
                    &grid,
                    seed,
                    rep,
                    MkvMode::Direct,
                )
                .unwrap();
                let c_small = evaluate_mf_cost(&[small], alpha, beta, lambda).unwrap().value;
                let c_big = evaluate_mf_cost(&[big], alpha, beta, lambda).unwrap().value;
                c_small - c_big
            })
            .collect();
        let mean = diffs.iter().sum::<Real>() / reps as Real;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<Real>()
            / (reps as Real - 1.0);
        (mean.abs(), (var / reps as Real).sqrt())
    };
    let (gap_small, se_small) = gap_stats(50);
    let (gap_big, se_big) = gap_stats(400);
    assert!(
        gap_big < gap_small + 2.0 * (se_small + se_big),
        "cost gap did not decrease: N=50 {gap_small:.5} (se {se_small:.5}) vs N=400 {gap_big:.5} (se {se_big:.5})"
    );

    // Degenerate deterministic law: exact equality at every size.
    let degenerate = LimitLaw::new(
        TypeLaw::Fixed(BankType::new(1.0, 1.0, 0.0)),
        InitLaw::Fixed { x0: 1.0, target: 0.0 },
        100.0,
    )
    .unwrap();
    let template = Scenario::new(
        vec![BankType::new(1.0, 1.0, 0.0)],
        vec![InitialDatum::new(1.0, 0.0)],
        0.0,
        alpha,
        beta,
        lambda,
        -3.0,
        3.0,
        1.0,
        25,
        16,
        seed,
    )
    .unwrap();
    let policy = RandomizedPolicy::Point(ControlSpec::Constant(0.0));
    let report =
        objective_convergence(&template, &degenerate, &policy, &[50, 400], 400, 4).unwrap();
    let limit = report.rows.last().unwrap().value;
    for row in &report.rows[..2] {
        assert!(
            (row.value - limit).abs() <= 1e-12,
            "degenerate law: N={} cost {} vs limit {limit}",
            row.n,
            row.value
        );
    }
    println!(
        "acceptance 09 (cost convergence): PASS gap N=50 {gap_small:.5} -> N=400 {gap_big:.5}; degenerate exact"
    );
}

#[test]
fn acceptance_10_gamma_convergence() {
    let started = std::time::Instant::now();
    // Optimal-value study on an i.i.d. law: successive gaps |V_N - V_2N|
    // non-increasing within 2 SE.
    let template = Scenario::new(
        vec![BankType::new(1.0, 1.0, 0.2)],
        vec![InitialDatum::new(1.0, 0.0)],
        0.1,
        1.0,
        0.5,
        1.0,
        -3.0,
        3.0,
        1.0,
        32,
        1000,
        2024,
    )
    .unwrap();
    let opts = PicardOptions {
        max_iter: 30,
        ..PicardOptions::default()
    };
    let report = gamma_study(&template, &iid_law(), &[8, 16, 32, 64], 256, &opts).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.rows.len(), 5);
    let gaps: Vec<(Real, Real)> = report.rows[1..4]
        .iter()
        .zip(&report.rows[..3])
        .map(|(row, prev)| (row.aux, row.se + prev.se))
        .collect();
    for pair in gaps.windows(2) {
        let (gap_a, se_a) = pair[0];
        let (gap_b, se_b) = pair[1];
        assert!(
            gap_b <= gap_a + 2.0 * (se_a + se_b),
            "gaps failed to shrink: {gap_a:.4} then {gap_b:.4} (ses {se_a:.4}, {se_b:.4})"
        );
    }

    // Degenerate symmetric law: full symmetry reduces every size to the
    // scalar analytic optimum 1/2. The runs are deterministic (se = 0), so
    // the band is the solver's fixed-point/discretization allowance.
    let degenerate = LimitLaw::new(
        TypeLaw::Fixed(BankType::new(1.0, 1.0, 0.0)),
        InitLaw::Fixed { x0: 1.0, target: 0.0 },
        100.0,
    )
    .unwrap();
    let mut sym_template = template.clone();
    sym_template.sigma0 = 0.0;
    sym_template.beta = 0.0;
    sym_template.mc_paths = 64;
    sym_template.steps = 64;
    let sym = gamma_study(&sym_template, &degenerate, &[8, 16, 32, 64], 256, &opts).unwrap();
    const DEGENERATE_ALLOWANCE: Real = 5e-3;
    for row in &sym.rows {
        assert!(
            (row.value - 0.5).abs() <= 3.0 * row.se + DEGENERATE_ALLOWANCE,
            "degenerate study at N={}: {} vs 1/2",
            row.n,
            row.value
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "runtime {secs:.1}s exceeds 30 minutes");
    println!(
        "acceptance 10 (value convergence): PASS gaps={:?} degenerate ok [{secs:.1}s]",
        gaps.iter().map(|g| format!("{:.4}", g.0)).collect::<Vec<_>>()
    );
}

#[test]
fn acceptance_11_metric_correctness() {
    // Exact assignment against brute-force permutation minimum on 500 random
    // instances with up to seven atoms, and the triangle inequality on 100
    // random triples.
    let mut rng = stream_rng(2024, 91, 0, 0);
    let random_measure = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        EmpiricalMeasure::new(
            (0..n)
                .map(|_| {
                    [
                        next_uniform(rng),
                        next_uniform(rng),
                        next_uniform(rng),
                        2.0 * next_uniform(rng) - 1.0,
                        4.0 * next_uniform(rng) - 2.0,
                    ]
                })
                .collect(),
        )
        .unwrap()
    };
    for trial in 0..500 {
        let n = 1 + trial % 7;
        let mu = random_measure(&mut rng, n);
        let nu = random_measure(&mut rng, n);
        let fast = wasserstein2(&mu, &nu).unwrap();
        assert!(fast.exact);
        let brute = brute_force_w2(&mu, &nu);
        assert!(
            (fast.value - brute).abs() <= 1e-10,
            "trial {trial} (n={n}): assignment {} vs brute force {brute}",
            fast.value
        );
    }
    for trial in 0..100 {
        let n = 2 + trial % 5;
        let a = random_measure(&mut rng, n);
        let b = random_measure(&mut rng, n);
        let c = random_measure(&mut rng, n);
        let dab = wasserstein2(&a, &b).unwrap().value;
        let dac = wasserstein2(&a, &c).unwrap().value;
        let dcb = wasserstein2(&c, &b).unwrap().value;
        assert!(
            dab <= dac + dcb + 1e-12,
            "triangle violated: {dab} > {dac} + {dcb}"
        );
    }
    println!("acceptance 11 (metric correctness): PASS 500 exact instances, 100 triples");
}

fn brute_force_w2(mu: &EmpiricalMeasure<Real>, nu: &EmpiricalMeasure<Real>) -> Real {
    #[allow(clippy::manual_is_multiple_of)]
    fn heaps(k: usize, perm: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
        if k <= 1 {
            visit(perm);
            return;
        }
        for i in 0..k - 1 {
            heaps(k - 1, perm, visit);
            if k % 2 == 0 {
                perm.swap(i, k - 1);
            } else {
                perm.swap(0, k - 1);
            }
        }
        heaps(k - 1, perm, visit);
    }
    let n = mu.len();
    let a = mu.atoms();
    let b = nu.atoms();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    heaps(n, &mut perm, &mut |p: &[usize]| {
        let total: Real = p
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                (0..5)
                    .map(|c| (a[i][c] - b[j][c]) * (a[i][c] - b[j][c]))
                    .sum::<Real>()
            })
            .sum();
        best = best.min(total);
    });
    (best / n as Real).sqrt()
}

#[test]
fn acceptance_12_cli_determinism() {
    // Every subcommand, run twice with the same config and seed but
    // different thread counts, produces byte-identical CSV and SVG outputs.
    let bin = env!("CARGO_BIN_EXE_interbank");
    let work = std::env::temp_dir().join(format!("acc12-{}", std::process::id()));
    std::fs::create_dir_all(&work).unwrap();

    let scalar_cfg = work.join("scalar.toml");
    std::fs::write(
        &scalar_cfg,
        r#"
[banks]
a = [0.0]
u = [1.0]
sigma = [0.2]

[init]
x0 = [1.0]
y = [0.0]

[noise]
sigma0 = 0.1

[cost]
alpha = 1.0
beta = 0.5
lambda = 1.0

[theta]
lo = -2.0
hi = 2.0

[time]
horizon = 1.0
steps = 16

[mc]
paths = 64
reps = 3
seed = 13

[hjb]
space_intervals = 80
scheme = "implicit"
"#,
    )
    .unwrap();

    let law_cfg = work.join("law.toml");
    std::fs::write(
        &law_cfg,
        r#"
[banks]
[banks.sampler]
law = "uniform"
count = 4
a = [0.5, 1.5]
u = [0.9, 1.1]
sigma = [0.1, 0.3]

[init]
[init.sampler]
law = "normal"
x0_mean = 1.0
x0_sd = 0.3
y_mean = 0.0

[noise]
sigma0 = 0.15

[cost]
alpha = 1.0
beta = 0.5
lambda = 1.0

[theta]
lo = -2.0
hi = 2.0

[time]
horizon = 1.0
steps = 16

[mc]
paths = 64
reps = 3
seed = 13

[study]
ns = [2, 4]
m_ref = 8

[meanfield]
particles = 16
"#,
    )
    .unwrap();

    let cases: Vec<(&str, &Path)> = vec![
        ("simulate", &scalar_cfg),
        ("optimize", &scalar_cfg),
        ("riccati", &scalar_cfg),
        ("hjb1d", &scalar_cfg),
        ("grad-check", &scalar_cfg),
        ("metrics", &scalar_cfg),
        ("fpk-check", &scalar_cfg),
        ("meanfield", &law_cfg),
        ("gamma-study", &law_cfg),
    ];

    for (sub, cfg) in cases {
        let mut outputs: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
        for (run, threads) in [(0, "1"), (1, "4")] {
            let out = work.join(format!("{sub}-{run}"));
            let status = Command::new(bin)
                .args([
                    sub,
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                ])
                .env("RAYON_NUM_THREADS", threads)
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{sub} run {run} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            let mut files = BTreeMap::new();
            for entry in std::fs::read_dir(&out).unwrap() {
                let path = entry.unwrap().path();
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if name.ends_with(".csv") || name.ends_with(".svg") {
                    files.insert(name, std::fs::read(&path).unwrap());
                }
            }
            assert!(!files.is_empty(), "{sub} produced no tabular outputs");
            outputs.push(files);
        }
        assert_eq!(
            outputs[0].keys().collect::<Vec<_>>(),
            outputs[1].keys().collect::<Vec<_>>(),
            "{sub}: output sets differ"
        );
        for (name, bytes) in &outputs[0] {
            assert_eq!(
                bytes,
                outputs[1].get(name).unwrap(),
                "{sub}: {name} differs between runs"
            );
        }
    }
    std::fs::remove_dir_all(&work).ok();
    println!("acceptance 12 (cli determinism): PASS 9 subcommands byte-identical");
}
