//! Scenario files: sectioned TOML, strict about unknown keys, validated
//! against the model assumptions on load. Defaults (damping 0.5, tolerance
//! 1e-4, moment exponent 1) are filled in at resolve time and echoed into
//! the run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{PicardOptions, RegressionBasis};
use crate::error::Error;
use crate::lq::{HjbOptions, HjbScheme};
use crate::meanfield::{InitLaw, LimitLaw, MkvMode, TypeLaw};
use crate::model::{BankType, InitialDatum, Scenario, DEFAULT_K_BOUND};
use crate::sde::ControlSpec;
use crate::Real;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub banks: BanksSection,
    pub init: InitSection,
    pub noise: NoiseSection,
    pub cost: CostSection,
    pub theta: ThetaSection,
    pub time: TimeSection,
    pub mc: McSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meanfield: Option<MeanfieldSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanksSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_bound: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<TypeSamplerSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSamplerSection {
    /// "fixed" (one-point ranges) or "uniform".
    pub law: String,
    pub count: usize,
    /// One value (fixed) or [lo, hi] (uniform) per field.
    pub a: Vec<Real>,
    pub u: Vec<Real>,
    pub sigma: Vec<Real>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<InitSamplerSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSamplerSection {
    /// "fixed" or "normal".
    pub law: String,
    pub x0_mean: Real,
    #[serde(default)]
    pub x0_sd: Real,
    pub y_mean: Real,
    #[serde(default)]
    pub y_sd: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma0: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub alpha: Real,
    pub beta: Real,
    pub lambda: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub lo: Real,
    pub hi: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: Real,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub paths: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_exp: Option<Real>,
}

fn default_reps() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// "affine" (default) or "quadratic".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub ns: Vec<usize>,
    pub m_ref: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// "constant" is the only file-expressible rule.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub value: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_intervals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<Real>,
    /// "explicit" (default) or "implicit".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldSection {
    pub particles: usize,
    /// "direct" (default) or "picard".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

/// Everything a run needs, with defaults resolved.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub file: ScenarioFile,
    pub scenario: Scenario<Real>,
    /// Sampling law; present when either section used a sampler, in which
    /// case explicit draws were materialized into the scenario.
    pub law: Option<LimitLaw<Real>>,
    pub solver: PicardOptions<Real>,
    pub hjb: HjbOptions<Real>,
    pub control: ControlSpec<Real>,
    pub study_ns: Vec<usize>,
    pub study_m_ref: usize,
    pub mkv_particles: usize,
    pub mkv_mode: MkvMode,
    pub reps: usize,
}

pub fn parse_scenario(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<ResolvedConfig> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Parse(format!("scenario file: {e}")))?;
    resolve(file, None, None)
}

/// Apply CLI overrides and validate.
pub fn resolve(
    file: ScenarioFile,
    seed_override: Option<u64>,
    paths_override: Option<usize>,
) -> Result<ResolvedConfig> {
    let mut file = file;
    if let Some(seed) = seed_override {
        file.mc.seed = seed;
    }
    if let Some(paths) = paths_override {
        file.mc.paths = paths;
    }
    let seed = file.mc.seed;
    let k_bound = file.banks.k_bound.unwrap_or(DEFAULT_K_BOUND);

    // Bank types: explicit lists or a sampler.
    let (banks, type_law) = match (&file.banks.sampler, &file.banks.a) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "banks: give either explicit lists or a sampler, not both",
            ))
        }
        (Some(sampler), None) => {
            let law = type_law_from(sampler, k_bound)?;
            (None, Some((law, sampler.count)))
        }
        (None, Some(a)) => {
            let u = file
                .banks
                .u
                .as_ref()
                .ok_or_else(|| Error::config("banks: missing key u"))?;
            let sigma = file
                .banks
                .sigma
                .as_ref()
                .ok_or_else(|| Error::config("banks: missing key sigma"))?;
            if a.len() != u.len() || a.len() != sigma.len() {
                return Err(Error::dimension(
                    "banks: a, u, sigma must have equal lengths".to_string(),
                ));
            }
            let banks: Vec<BankType<Real>> = a
                .iter()
                .zip(u)
                .zip(sigma)
                .map(|((&a, &u), &s)| BankType::new(a, u, s))
                .collect();
            (Some(banks), None)
        }
        (None, None) => {
            return Err(Error::config(
                "banks: missing key a (or a sampler table)",
            ))
        }
    };

    // Initial data: explicit lists or a sampler.
    let (init, init_law) = match (&file.init.sampler, &file.init.x0) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "init: give either explicit lists or a sampler, not both",
            ))
        }
        (Some(sampler), None) => (None, Some(init_law_from(sampler)?)),
        (None, Some(x0)) => {
            let y = file
                .init
                .y
                .as_ref()
                .ok_or_else(|| Error::config("init: missing key y"))?;
            if x0.len() != y.len() {
                return Err(Error::dimension(
                    "init: x0 and y must have equal lengths".to_string(),
                ));
            }
            let init: Vec<InitialDatum<Real>> = x0
                .iter()
                .zip(y)
                .map(|(&x, &y)| InitialDatum::new(x, y))
                .collect();
            (Some(init), None)
        }
        (None, None) => {
            return Err(Error::config(
                "init: missing key x0 (or a sampler table)",
            ))
        }
    };

    // A sampled side pairs with a law on the other side; an explicit side
    // becomes a degenerate law only when both sides are explicit and equal
    // in length.
    let (banks, init, law) = match (banks, init, type_law, init_law) {
        (Some(b), Some(i), None, None) => {
            if b.len() != i.len() {
                return Err(Error::dimension(format!(
                    "{} banks but {} initial data",
                    b.len(),
                    i.len()
                )));
            }
            (b, i, None)
        }
        (None, None, Some((tl, count)), Some(il)) => {
            let law = LimitLaw::new(tl, il, k_bound)?;
            let (b, i) = law.sample_many(count, seed);
            (b, i, Some(law))
        }
        (Some(b), None, None, Some(il)) => {
            if b.is_empty() {
                return Err(Error::config("banks: empty list"));
            }
            let tl = TypeLaw::Fixed(b[0]);
            let law = LimitLaw::new(tl, il, k_bound)?;
            let i: Vec<InitialDatum<Real>> = (0..b.len())
                .map(|idx| law.sample(idx as u64, seed).1)
                .collect();
            (b, i, Some(law))
        }
        (None, Some(i), Some((tl, count)), None) => {
            if i.len() != count {
                return Err(Error::dimension(format!(
                    "init lists {} entries but the bank sampler draws {count}",
                    i.len()
                )));
            }
            let law = LimitLaw::new(
                tl,
                InitLaw::Fixed {
                    x0: i[0].x0,
                    target: i[0].target,
                },
                k_bound,
            )?;
            let b: Vec<BankType<Real>> = (0..count)
                .map(|idx| law.sample(idx as u64, seed).0)
                .collect();
            (b, i, Some(law))
        }
        // Each side is either explicit or sampled, never both and never
        // neither; the earlier matches enforce that.
        _ => unreachable!("banks/init resolution is exhaustive by construction"),
    };

    let mut scenario = Scenario::new(
        banks,
        init,
        file.noise.sigma0,
        file.cost.alpha,
        file.cost.beta,
        file.cost.lambda,
        file.theta.lo,
        file.theta.hi,
        file.time.horizon,
        file.time.steps,
        file.mc.paths,
        seed,
    )?;
    scenario.k_bound = k_bound;
    if let Some(rho) = file.mc.rho_exp {
        scenario.rho_exp = rho;
    }
    scenario.validate()?;

    let solver = {
        let section = file.solver.clone().unwrap_or(SolverSection {
            damping: None,
            tol: None,
            max_iter: None,
            basis: None,
        });
        let quadratic = match section.basis.as_deref() {
            None | Some("affine") => false,
            Some("quadratic") => true,
            Some(other) => {
                return Err(Error::config(format!(
                    "solver.basis: unknown basis {other:?} (expected \"affine\" or \"quadratic\")"
                )))
            }
        };
        PicardOptions {
            damping: section.damping.unwrap_or(0.5),
            tol: section.tol.unwrap_or(1e-4),
            max_iter: section.max_iter.unwrap_or(40),
            basis: RegressionBasis {
                quadratic,
                ..RegressionBasis::default()
            },
        }
    };

    let hjb = {
        let section = file.hjb.clone().unwrap_or(HjbSection {
            space_intervals: None,
            radius: None,
            scheme: None,
        });
        let scheme = match section.scheme.as_deref() {
            None | Some("explicit") => HjbScheme::Explicit,
            Some("implicit") => HjbScheme::Implicit,
            Some(other) => {
                return Err(Error::config(format!(
                    "hjb.scheme: unknown scheme {other:?} (expected \"explicit\" or \"implicit\")"
                )))
            }
        };
        HjbOptions {
            space_intervals: section.space_intervals.unwrap_or(400),
            radius: section.radius,
            scheme,
        }
    };

    let control = match &file.control {
        None => ControlSpec::Constant(scenario.clamp_theta(0.0)),
        Some(section) => match section.kind.as_str() {
            "constant" => {
                let v = section.value;
                if v < scenario.theta_lo || v > scenario.theta_hi {
                    return Err(Error::admissibility(format!(
                        "control.value {v} lies outside Θ = [{}, {}]",
                        scenario.theta_lo, scenario.theta_hi
                    )));
                }
                ControlSpec::Constant(v)
            }
            other => {
                return Err(Error::config(format!(
                    "control.type: unknown type {other:?} (expected \"constant\")"
                )))
            }
        },
    };

    let (study_ns, study_m_ref) = match &file.study {
        Some(s) => (s.ns.clone(), s.m_ref),
        None => (vec![8, 16, 32, 64], 256),
    };
    let (mkv_particles, mkv_mode) = match &file.meanfield {
        Some(s) => {
            let mode = match s.mode.as_deref() {
                None | Some("direct") => MkvMode::Direct,
                Some("picard") => MkvMode::Picard,
                Some(other) => {
                    return Err(Error::config(format!(
                        "meanfield.mode: unknown mode {other:?} (expected \"direct\" or \"picard\")"
                    )))
                }
            };
            (s.particles, mode)
        }
        None => (study_m_ref, MkvMode::Direct),
    };

    let reps = file.mc.reps;
    if reps == 0 {
        return Err(Error::config("mc.reps must be >= 1"));
    }

    Ok(ResolvedConfig {
        file,
        scenario,
        law,
        solver,
        hjb,
        control,
        study_ns,
        study_m_ref,
        mkv_particles,
        mkv_mode,
        reps,
    })
}

fn type_law_from(section: &TypeSamplerSection, k_bound: Real) -> Result<TypeLaw<Real>> {
    let range = |name: &str, v: &[Real]| -> Result<(Real, Real)> {
        match v {
            [x] => Ok((*x, *x)),
            [lo, hi] => Ok((*lo, *hi)),
            _ => Err(Error::config(format!(
                "banks.sampler.{name}: expected one value or [lo, hi]"
            ))),
        }
    };
    if section.count == 0 {
        return Err(Error::config("banks.sampler.count must be >= 1"));
    }
    match section.law.as_str() {
        "fixed" => {
            let a = range("a", &section.a)?;
            let u = range("u", &section.u)?;
            let s = range("sigma", &section.sigma)?;
            if a.0 != a.1 || u.0 != u.1 || s.0 != s.1 {
                return Err(Error::config(
                    "banks.sampler: law \"fixed\" takes single values",
                ));
            }
            let _ = k_bound;
            Ok(TypeLaw::Fixed(BankType::new(a.0, u.0, s.0)))
        }
        "uniform" => Ok(TypeLaw::UniformBox {
            rate: range("a", &section.a)?,
            supply: range("u", &section.u)?,
            sigma: range("sigma", &section.sigma)?,
        }),
        other => Err(Error::config(format!(
            "banks.sampler.law: unknown law {other:?} (expected \"fixed\" or \"uniform\")"
        ))),
    }
}

fn init_law_from(section: &InitSamplerSection) -> Result<InitLaw<Real>> {
    match section.law.as_str() {
        "fixed" => Ok(InitLaw::Fixed {
            x0: section.x0_mean,
            target: section.y_mean,
        }),
        "normal" => {
            if section.x0_sd < 0.0 || section.y_sd < 0.0 {
                return Err(Error::config(
                    "init.sampler: standard deviations must be >= 0",
                ));
            }
            Ok(InitLaw::Normal {
                x0_mean: section.x0_mean,
                x0_sd: section.x0_sd,
                y_mean: section.y_mean,
                y_sd: section.y_sd,
            })
        }
        other => Err(Error::config(format!(
            "init.sampler.law: unknown law {other:?} (expected \"fixed\" or \"normal\")"
        ))),
    }
}

/// Serialize a scenario file back to TOML (used by round-trip checks and by
/// the manifest).
pub fn to_toml_string(file: &ScenarioFile) -> Result<String> {
    toml::to_string(file).map_err(|e| Error::Parse(format!("serialize scenario: {e}")))
}
