//! Command-line surface: batch subcommands that read a scenario file, run
//! one of the toolkit's operations, and write deterministic CSV outputs plus
//! a JSON manifest into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{parse_scenario, resolve, ResolvedConfig};
use crate::control::{
    evaluate_strong_cost, gateaux_derivative, optimize_picard, StopReason,
};
use crate::error::Error;
use crate::experiments::gamma_study;
use crate::lq::{solve_hjb_1d, solve_riccati};
use crate::meanfield::{default_phi_family, evaluate_mf_cost, sfpk_residual, simulate_mkv, MfControl};
use crate::measures::{
    composite_metrics, flow_distance, wasserstein2, CanonicalPoint, EmpiricalMeasureFlow,
    HatSPoint,
};
use crate::model::Scenario;
use crate::report::{study_csv, study_svg, write_csv, Cell, RunManifest};
use crate::sde::{moment_report, simulate_paths, ControlSpec, NoiseBundle, PathBundle};
use crate::Real;
use crate::Result;

const USAGE: &str = "\
interbank - simulation and optimal money-supply control of interbank networks

USAGE:
  interbank <SUBCOMMAND> --config PATH [--out DIR] [--seed INT] [--paths INT]

SUBCOMMANDS:
  simulate     forward-simulate the bank system; writes paths.csv, moments.csv
  optimize     fixed-point optimizer; writes trace.csv, summary.csv
  riccati      backward ODE oracle; writes riccati.csv, summary.csv
  hjb1d        one-bank finite-difference oracle; writes surface.csv, summary.csv
  meanfield    particle simulation of the mean-field limit; writes ensemble.csv, summary.csv
  fpk-check    measure-equation residual test; writes residuals.csv, summary.csv
  grad-check   directional-derivative check; writes gradcheck.csv
  gamma-study  optimal-value convergence study; writes study.csv, study.svg
  metrics      transport-metric table on coupled simulations; writes metrics.csv

FLAGS:
  --config PATH   scenario file (TOML; required)
  --out DIR       output directory (default: out)
  --seed INT      override the scenario seed
  --paths INT     override the Monte Carlo path budget
";

struct CliArgs {
    subcommand: String,
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    paths: Option<usize>,
}

fn parse_args(args: &[String]) -> std::result::Result<CliArgs, String> {
    if args.is_empty() {
        return Err("missing subcommand".to_string());
    }
    let subcommand = args[0].clone();
    let known = [
        "simulate",
        "optimize",
        "riccati",
        "hjb1d",
        "meanfield",
        "fpk-check",
        "grad-check",
        "gamma-study",
        "metrics",
    ];
    if !known.contains(&subcommand.as_str()) {
        return Err(format!("unknown subcommand {subcommand:?}"));
    }
    let mut config = None;
    let mut out = PathBuf::from("out");
    let mut seed = None;
    let mut paths = None;
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| format!("missing value for {flag}"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value()?)),
            "--out" => out = PathBuf::from(value()?),
            "--seed" => {
                seed = Some(
                    value()?
                        .parse::<u64>()
                        .map_err(|e| format!("--seed: {e}"))?,
                )
            }
            "--paths" => {
                paths = Some(
                    value()?
                        .parse::<usize>()
                        .map_err(|e| format!("--paths: {e}"))?,
                )
            }
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    let config = config.ok_or_else(|| "missing required flag --config".to_string())?;
    Ok(CliArgs {
        subcommand,
        config,
        out,
        seed,
        paths,
    })
}

/// Entry point behind `main`: returns the process exit code. Usage problems
/// exit 2; run failures exit 1 with a machine-readable error line.
pub fn run_command(args: &[String]) -> i32 {
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return 2;
        }
    };
    match execute(&parsed, args) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                Error::Config(_) => "config",
                Error::Dimension(_) => "dimension",
                Error::Admissibility(_) => "admissibility",
                Error::Numerical(_) => "numerical",
                Error::Io { .. } => "io",
                Error::Parse(_) => "parse",
            };
            let payload = serde_json::json!({"error": {"kind": kind, "message": e.to_string()}});
            eprintln!("{payload}");
            1
        }
    }
}

fn execute(cli: &CliArgs, raw_args: &[String]) -> Result<()> {
    let started = Instant::now();
    let file_cfg = parse_scenario(&cli.config)?;
    let cfg = resolve(file_cfg.file, cli.seed, cli.paths)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::io(cli.out.display().to_string(), e))?;

    let outputs = match cli.subcommand.as_str() {
        "simulate" => cmd_simulate(&cfg, &cli.out)?,
        "optimize" => cmd_optimize(&cfg, &cli.out)?,
        "riccati" => cmd_riccati(&cfg, &cli.out)?,
        "hjb1d" => cmd_hjb1d(&cfg, &cli.out)?,
        "meanfield" => cmd_meanfield(&cfg, &cli.out)?,
        "fpk-check" => cmd_fpk_check(&cfg, &cli.out)?,
        "grad-check" => cmd_grad_check(&cfg, &cli.out)?,
        "gamma-study" => cmd_gamma_study(&cfg, &cli.out)?,
        "metrics" => cmd_metrics(&cfg, &cli.out)?,
        _ => unreachable!("subcommand validated in parse_args"),
    };

    let resolved_config = serde_json::json!({
        "file": serde_json::to_value(&cfg.file)
            .map_err(|e| Error::Parse(format!("manifest config: {e}")))?,
        "resolved": {
            "damping": cfg.solver.damping,
            "tol": cfg.solver.tol,
            "max_iter": cfg.solver.max_iter,
            "basis": if cfg.solver.basis.quadratic { "quadratic" } else { "affine" },
            "rho_exp": cfg.scenario.rho_exp,
            "k_bound": cfg.scenario.k_bound,
            "reps": cfg.reps,
            "study_ns": cfg.study_ns,
            "study_m_ref": cfg.study_m_ref,
            "mkv_particles": cfg.mkv_particles,
        },
    });
    let manifest = RunManifest {
        command: format!("interbank {}", raw_args.join(" ")),
        subcommand: cli.subcommand.clone(),
        config_path: cli.config.display().to_string(),
        resolved_config,
        seed: cfg.scenario.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_clock_ms: started.elapsed().as_millis(),
    };
    manifest.write(&cli.out)?;
    Ok(())
}

fn path_flow(paths: &PathBundle<Real>, scn: &Scenario<Real>, path: usize) -> EmpiricalMeasureFlow<Real> {
    let states_per_knot: Vec<Vec<Real>> = (0..=paths.grid().steps())
        .map(|k| paths.state_slice(path, k).to_vec())
        .collect();
    EmpiricalMeasureFlow::from_states(
        &scn.banks,
        &scn.targets(),
        &states_per_knot,
        paths.grid().knots(),
    )
    .expect("matched dimensions")
}

fn cmd_simulate(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let noise = NoiseBundle::for_scenario(scn)?;
    let paths = simulate_paths(scn, &cfg.control, &noise)?;
    let steps = paths.grid().steps();
    let mut rows = Vec::new();
    for p in 0..paths.n_paths() {
        for k in 0..=steps {
            // θ is piecewise constant; the terminal knot repeats the last step.
            let theta = paths.theta(p, k.min(steps - 1));
            for bank in 0..paths.n_banks() {
                rows.push(vec![
                    Cell::Uint(p as u64),
                    Cell::Float(paths.grid().knot(k)),
                    Cell::Uint(bank as u64),
                    Cell::Float(paths.state(p, k, bank)),
                    Cell::Float(theta),
                ]);
            }
        }
    }
    let paths_csv = out.join("paths.csv");
    write_csv(&paths_csv, &["path", "t", "bank", "X", "theta"], &rows)?;

    let report = moment_report(&paths, scn.rho_exp)?;
    let mut rows = Vec::new();
    for (i, v) in report.sup_moment.iter().enumerate() {
        rows.push(vec![
            Cell::Str("sup_moment".into()),
            Cell::Float(i as f64),
            Cell::Float(*v),
        ]);
    }
    for (delta, v) in &report.modulus {
        rows.push(vec![
            Cell::Str("modulus".into()),
            Cell::Float(*delta),
            Cell::Float(*v),
        ]);
    }
    let moments_csv = out.join("moments.csv");
    write_csv(&moments_csv, &["stat", "key", "value"], &rows)?;
    Ok(vec![paths_csv, moments_csv])
}

fn cmd_optimize(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let noise = NoiseBundle::for_scenario(scn)?;
    let outcome = optimize_picard(scn, &noise, &cfg.solver)?;
    let rows: Vec<Vec<Cell>> = outcome
        .trace
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Uint(r.iter as u64),
                Cell::Float(r.cost),
                Cell::Float(r.se),
                Cell::Float(r.step_norm),
                Cell::Float(r.damping),
            ]
        })
        .collect();
    let trace_csv = out.join("trace.csv");
    write_csv(
        &trace_csv,
        &["iter", "cost", "se", "step_norm", "damping"],
        &rows,
    )?;
    let summary_csv = out.join("summary.csv");
    write_csv(
        &summary_csv,
        &["key", "value"],
        &[
            vec![Cell::Str("cost".into()), Cell::Float(outcome.cost.value)],
            vec![Cell::Str("se".into()), Cell::Float(outcome.cost.se)],
            vec![
                Cell::Str("stop_reason".into()),
                Cell::Str(
                    match outcome.trace.stop {
                        StopReason::Converged => "converged",
                        StopReason::MaxIter => "max_iter",
                    }
                    .into(),
                ),
            ],
            vec![
                Cell::Str("iterations".into()),
                Cell::Uint(outcome.trace.rows.len() as u64),
            ],
            vec![
                Cell::Str("ridge_fallbacks".into()),
                Cell::Uint(outcome.ridge_fallbacks as u64),
            ],
        ],
    )?;
    println!(
        "optimal cost {} (se {}) after {} iterations",
        outcome.cost.value,
        outcome.cost.se,
        outcome.trace.rows.len()
    );
    Ok(vec![trace_csv, summary_csv])
}

fn cmd_riccati(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let sol = solve_riccati(scn)?;
    let steps = sol.grid().steps();
    let rows: Vec<Vec<Cell>> = (0..=steps)
        .map(|k| {
            let r = sol.r_at(k);
            let r_norm = r.iter().map(|v| v * v).sum::<Real>().sqrt();
            vec![
                Cell::Float(sol.grid().knot(k)),
                Cell::Float(sol.p_at(k).trace()),
                Cell::Float(r_norm),
                Cell::Float(sol.s_at(k)),
            ]
        })
        .collect();
    let riccati_csv = out.join("riccati.csv");
    write_csv(&riccati_csv, &["t", "p_trace", "r_norm", "s"], &rows)?;
    let value = sol.value(&scn.initial_states(), &scn.targets())?;
    let summary_csv = out.join("summary.csv");
    write_csv(
        &summary_csv,
        &["key", "value"],
        &[vec![Cell::Str("value".into()), Cell::Float(value)]],
    )?;
    println!("riccati value {value}");
    Ok(vec![riccati_csv, summary_csv])
}

fn cmd_hjb1d(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let surf = solve_hjb_1d(scn, &cfg.hjb)?;
    let mut rows = Vec::new();
    for (k, row) in surf.value_grid().iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            rows.push(vec![
                Cell::Float(surf.grid().knot(k)),
                Cell::Float(surf.nodes()[i]),
                Cell::Float(*v),
                Cell::Float(surf.feedback_grid()[k][i]),
            ]);
        }
    }
    let surface_csv = out.join("surface.csv");
    write_csv(&surface_csv, &["t", "x", "V", "theta_star"], &rows)?;
    let value = surf.initial_value(scn.init[0].x0);
    let summary_csv = out.join("summary.csv");
    write_csv(
        &summary_csv,
        &["key", "value"],
        &[vec![Cell::Str("value_at_x0".into()), Cell::Float(value)]],
    )?;
    println!("dynamic-programming value at x0: {value}");
    Ok(vec![surface_csv, summary_csv])
}

fn mf_theta(cfg: &ResolvedConfig) -> Result<MfControl<Real>> {
    match &cfg.control {
        ControlSpec::Constant(c) => Ok(MfControl::Constant(*c)),
        _ => Err(Error::config(
            "mean-field runs need a constant control section",
        )),
    }
}

fn cmd_meanfield(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let law = cfg.law.clone().ok_or_else(|| {
        Error::config("meanfield needs sampled banks/init ([banks.sampler] and [init.sampler])")
    })?;
    let grid = crate::sde::TimeGrid::new(scn.horizon, scn.steps)?;
    let theta = mf_theta(cfg)?;
    let mut rows = Vec::new();
    let mut ensembles = Vec::new();
    for rep in 0..cfg.reps {
        let ens = simulate_mkv(
            &law,
            &theta,
            scn.sigma0,
            cfg.mkv_particles,
            &grid,
            scn.seed,
            rep as u64,
            cfg.mkv_mode,
        )?;
        for k in 0..=grid.steps() {
            let measure = ens.measure_at(k);
            let mean = measure.mean_state();
            let var = measure
                .atoms()
                .iter()
                .map(|a| (a[4] - mean) * (a[4] - mean))
                .sum::<Real>()
                / cfg.mkv_particles as Real;
            rows.push(vec![
                Cell::Uint(rep as u64),
                Cell::Float(grid.knot(k)),
                Cell::Float(mean),
                Cell::Float(var),
                Cell::Float(measure.mean_squared_gap()),
            ]);
        }
        ensembles.push(ens);
    }
    let ensemble_csv = out.join("ensemble.csv");
    write_csv(
        &ensemble_csv,
        &["rep", "t", "mean_X", "var_X", "bracket_L"],
        &rows,
    )?;
    let cost = evaluate_mf_cost(&ensembles, scn.alpha, scn.beta, scn.lambda)?;
    let summary_csv = out.join("summary.csv");
    write_csv(
        &summary_csv,
        &["key", "value"],
        &[
            vec![Cell::Str("cost".into()), Cell::Float(cost.value)],
            vec![Cell::Str("se".into()), Cell::Float(cost.se)],
        ],
    )?;
    println!("mean-field cost {} (se {})", cost.value, cost.se);
    Ok(vec![ensemble_csv, summary_csv])
}

fn cmd_fpk_check(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut scn = cfg.scenario.clone();
    // One simulated path per repetition.
    scn.mc_paths = cfg.reps;
    let noise = NoiseBundle::for_scenario(&scn)?;
    let paths = simulate_paths(&scn, &cfg.control, &noise)?;
    let steps = paths.grid().steps();

    // Scale of the default family: pooled standard deviation of X_T.
    let mut terminal = Vec::new();
    for p in 0..paths.n_paths() {
        terminal.extend(paths.state_slice(p, steps).iter().copied());
    }
    let mean = terminal.iter().sum::<Real>() / terminal.len() as Real;
    let std = (terminal.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>()
        / terminal.len() as Real)
        .sqrt();
    let family = default_phi_family(std.max(1e-6));

    let mut rows = Vec::new();
    let mut sup_sq = vec![0.0; family.len()];
    let mut term_samples: Vec<Vec<Real>> = vec![Vec::new(); family.len()];
    for rep in 0..cfg.reps {
        let flow = path_flow(&paths, &scn, rep);
        let theta_path: Vec<Real> = (0..steps).map(|k| paths.theta(rep, k)).collect();
        let dw0: Vec<Real> = (0..steps).map(|k| noise.dw(rep, 0, k)).collect();
        let report = sfpk_residual(&flow, &theta_path, &dw0, scn.sigma0, &family)?;
        for (j, series) in report.residuals.iter().enumerate() {
            for (k, value) in series.iter().enumerate() {
                rows.push(vec![
                    Cell::Str(report.phi_names[j].clone()),
                    Cell::Float(paths.grid().knot(k)),
                    Cell::Float(*value),
                    Cell::Uint(rep as u64),
                ]);
            }
            sup_sq[j] += report.sup_abs[j] * report.sup_abs[j];
            term_samples[j].push(*series.last().unwrap());
        }
    }
    let residuals_csv = out.join("residuals.csv");
    write_csv(&residuals_csv, &["phi_id", "t", "residual", "rep"], &rows)?;

    let mut rows = Vec::new();
    for (j, name) in family.iter().map(|p| p.name.clone()).enumerate() {
        let rms = (sup_sq[j] / cfg.reps as Real).sqrt();
        let samples = &term_samples[j];
        let m = samples.iter().sum::<Real>() / samples.len() as Real;
        let se = if samples.len() > 1 {
            let var = samples.iter().map(|v| (v - m) * (v - m)).sum::<Real>()
                / (samples.len() as Real - 1.0);
            (var / samples.len() as Real).sqrt()
        } else {
            0.0
        };
        rows.push(vec![
            Cell::Str(name),
            Cell::Float(rms),
            Cell::Float(m),
            Cell::Float(se),
        ]);
    }
    let summary_csv = out.join("summary.csv");
    write_csv(
        &summary_csv,
        &["phi_id", "sup_rms", "terminal_mean", "terminal_se"],
        &rows,
    )?;
    Ok(vec![residuals_csv, summary_csv])
}

fn cmd_grad_check(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let scn = &cfg.scenario;
    let noise = NoiseBundle::for_scenario(scn)?;
    let theta = cfg.control.clone();
    // A unit direction that keeps θ + εh admissible at the largest ε probed.
    let head = match &theta {
        ControlSpec::Constant(c) => *c,
        _ => 0.0,
    };
    let eps_list = [1e-1, 1e-2, 1e-3];
    let direction = if head + eps_list[0] <= scn.theta_hi {
        1.0
    } else {
        -1.0
    };
    let gateaux = gateaux_derivative(
        &theta,
        &ControlSpec::Constant(direction),
        scn,
        &noise,
        &cfg.solver.basis,
    )?;
    let base = evaluate_strong_cost(&theta, scn, &noise)?;
    let mut rows = Vec::new();
    for &eps in &eps_list {
        let shifted = match &theta {
            ControlSpec::Constant(c) => ControlSpec::Constant(c + eps * direction),
            _ => {
                return Err(Error::config(
                    "grad-check needs a constant control section",
                ))
            }
        };
        let bumped = evaluate_strong_cost(&shifted, scn, &noise)?;
        let fd = (bumped.value - base.value) / eps;
        let rel_err = (fd - gateaux.value).abs() / gateaux.value.abs().max(1e-12);
        rows.push(vec![
            Cell::Float(eps),
            Cell::Float(fd),
            Cell::Float(gateaux.value),
            Cell::Float(rel_err),
        ]);
    }
    let csv = out.join("gradcheck.csv");
    write_csv(
        &csv,
        &["epsilon", "fd_derivative", "gateaux", "rel_err"],
        &rows,
    )?;
    Ok(vec![csv])
}

fn cmd_gamma_study(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let law = cfg.law.clone().ok_or_else(|| {
        Error::config("gamma-study needs sampled banks/init ([banks.sampler] and [init.sampler])")
    })?;
    let report = gamma_study(
        &cfg.scenario,
        &law,
        &cfg.study_ns,
        cfg.study_m_ref,
        &cfg.solver,
    )?;
    let csv = out.join("study.csv");
    study_csv(&report, &csv)?;
    let svg = out.join("study.svg");
    study_svg(&report, &svg)?;
    for failure in &report.failures {
        eprintln!("warning: {failure}");
    }
    println!(
        "gamma study: {} rows, fingerprint {}",
        report.rows.len(),
        report.fingerprint
    );
    Ok(vec![csv, svg])
}

fn cmd_metrics(cfg: &ResolvedConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut scn = cfg.scenario.clone();
    scn.mc_paths = 2;
    let noise = NoiseBundle::for_scenario(&scn)?;
    let paths = simulate_paths(&scn, &cfg.control, &noise)?;
    let steps = paths.grid().steps();
    let flow_a = path_flow(&paths, &scn, 0);
    let flow_b = path_flow(&paths, &scn, 1);

    let mut rows = Vec::new();
    for k in 0..=steps {
        let d = wasserstein2(flow_a.at(k), flow_b.at(k))?;
        rows.push(vec![
            Cell::Str(format!("knot_{k}")),
            Cell::Str("w2".into()),
            Cell::Float(d.value),
            Cell::Uint(d.exact as u64),
            Cell::Float(0.0),
        ]);
    }
    let d_s = flow_distance(&flow_a, &flow_b)?;
    rows.push(vec![
        Cell::Str("flow".into()),
        Cell::Str("d_S".into()),
        Cell::Float(d_s.value),
        Cell::Uint(d_s.exact as u64),
        Cell::Float(0.0),
    ]);

    // Composite metrics between the two coupled realizations.
    let cum = |path: usize, brownian: usize| -> Vec<Real> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(0.0);
        for k in 0..steps {
            acc += noise.dw(path, brownian, k);
            out.push(acc);
        }
        out
    };
    let point = |path: usize, flow: &EmpiricalMeasureFlow<Real>| -> (HatSPoint<Real>, CanonicalPoint<Real>) {
        let control: Vec<Real> = (0..steps).map(|k| paths.theta(path, k)).collect();
        let hat = HatSPoint {
            init: flow.at(0).clone(),
            control: control.clone(),
            flow: flow.clone(),
            dt: paths.grid().dt(),
        };
        let canonical = CanonicalPoint {
            initials: scn
                .init
                .iter()
                .map(|d| [d.x0, d.target])
                .collect(),
            common: cum(path, 0),
            idiosyncratic: (0..scn.n_banks()).map(|i| cum(path, i + 1)).collect(),
            control,
            dt: paths.grid().dt(),
        };
        (hat, canonical)
    };
    let (hat_a, can_a) = point(0, &flow_a);
    let (hat_b, can_b) = point(1, &flow_b);
    let truncation = 20;
    let metrics = composite_metrics(&hat_a, &hat_b, &can_a, &can_b, truncation)?;
    for (name, value) in [
        ("d1", metrics.d1),
        ("d2", metrics.d2),
        ("d3", metrics.d3),
        ("d4", metrics.d4),
        ("d_omega", metrics.d_omega),
        ("d_hatS", metrics.d_hat_s),
    ] {
        rows.push(vec![
            Cell::Str("pair_0_1".into()),
            Cell::Str(name.into()),
            Cell::Float(value),
            Cell::Uint(1),
            Cell::Float(metrics.tail_bound),
        ]);
    }
    let csv = out.join("metrics.csv");
    write_csv(
        &csv,
        &["id", "metric", "value", "exact_flag", "tail_bound"],
        &rows,
    )?;
    Ok(vec![csv])
}
