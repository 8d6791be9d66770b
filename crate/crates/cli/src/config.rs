//! Experiment configuration: structured TOML with strict key checking.
//! Every referenced parameter is validated before any compute starts.

use anyhow::{bail, Context, Result};
use avgpde::control::{ControlObjective, ControlProblem, GeometrySpec};
use avgpde::kernels::{EquationKind, MultiplierKernel, ParameterLaw};
use avgpde::spectral::{Endpoint, ObservationOperator, SpectralState};
use num_complex::Complex64;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: Option<KernelSection>,
    pub geometry: Option<GeometrySection>,
    pub problem: Option<ProblemSection>,
    pub solver: Option<SolverSection>,
    pub multiplier: Option<MultiplierSection>,
    pub propagate: Option<PropagateSection>,
    pub observability: Option<ObservabilitySection>,
    pub fractional: Option<FractionalSection>,
    pub transport: Option<TransportSection>,
    pub mc: Option<McSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub law: String,
    pub kind: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub interior: Option<Vec<[f64; 2]>>,
    pub boundary: Option<String>,
    pub time_set: Vec<[f64; 2]>,
    pub horizon: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub n_modes: usize,
    /// coefficient triples (mode, re, im); omitted modes are zero
    pub y0: Vec<(usize, f64, f64)>,
    pub objective: String,
    pub y1: Option<Vec<(usize, f64, f64)>>,
    pub epsilon: Option<f64>,
    pub projection_dim: Option<usize>,
    pub s_v: Option<f64>,
    pub u_smoothing: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub cg_tol: Option<f64>,
    pub cg_maxit: Option<usize>,
    /// closed-loop acceptance threshold, relative to the data norms
    pub target_rel_tol: Option<f64>,
    /// 0 disables the Monte Carlo closed-loop verification
    pub mc_verify_samples: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierSection {
    pub modes: Vec<usize>,
    pub times: Vec<f64>,
    pub mc_samples: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateSection {
    pub grid_nodes: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservabilitySection {
    pub fit_window: [f64; 2],
    pub fit_modes: Vec<usize>,
    pub telescope_a: f64,
    /// 0 selects 1.05 * max(1, eq-(5.28-eq3) bound) automatically
    pub telescope_b_ratio: Option<f64>,
    pub telescope_violation_factor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionalSection {
    pub gamma: f64,
    pub n_list: Vec<usize>,
    pub window: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    pub sigma: f64,
    pub time: f64,
    pub grid_h: Vec<f64>,
    pub half_width: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub sample_count: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("cannot parse config")?;
        Ok(cfg)
    }

    pub fn kernel(&self) -> Result<MultiplierKernel> {
        let section = self.kernel.as_ref().context("missing [kernel] section")?;
        let law: ParameterLaw = section.law.parse()?;
        let kind: EquationKind = section.kind.parse()?;
        Ok(MultiplierKernel::new(law, kind)?)
    }

    pub fn geometry(&self) -> Result<GeometrySpec> {
        let section = self.geometry.as_ref().context("missing [geometry] section")?;
        let observation = match (&section.interior, &section.boundary) {
            (Some(iv), None) => {
                ObservationOperator::interior(iv.iter().map(|&[a, b]| (a, b)).collect())?
            }
            (None, Some(side)) => match side.as_str() {
                "left" => ObservationOperator::Boundary(Endpoint::Left),
                "right" => ObservationOperator::Boundary(Endpoint::Right),
                other => bail!("boundary must be 'left' or 'right', got '{other}'"),
            },
            _ => bail!("geometry needs exactly one of 'interior' or 'boundary'"),
        };
        let time_set = section.time_set.iter().map(|&[a, b]| (a, b)).collect();
        Ok(GeometrySpec::new(observation, time_set, section.horizon)?)
    }

    pub fn control_problem(&self) -> Result<ControlProblem> {
        let section = self.problem.as_ref().context("missing [problem] section")?;
        let kernel = self.kernel()?;
        let geometry = self.geometry()?;
        let n = section.n_modes;
        let y0 = state_from_triples(&section.y0, n)?;
        let objective = match section.objective.as_str() {
            "null" => ControlObjective::Null,
            "exact" => {
                let y1 = section.y1.as_ref().context("exact objective needs y1")?;
                ControlObjective::Exact { y1: state_from_triples(y1, n)? }
            }
            "approx" => {
                let y1 = section.y1.as_ref().context("approx objective needs y1")?;
                ControlObjective::Approx {
                    y1: state_from_triples(y1, n)?,
                    epsilon: section.epsilon.context("approx objective needs epsilon")?,
                    projection_dim: section
                        .projection_dim
                        .context("approx objective needs projection_dim")?,
                }
            }
            other => bail!("unknown objective '{other}'"),
        };
        let mut problem = ControlProblem::new(kernel, geometry, n, y0, objective)?;
        if let Some(s_v) = section.s_v {
            problem = problem.with_space_ladder(s_v);
        }
        if let Some(s_u) = section.u_smoothing {
            problem = problem.with_u_smoothing(s_u);
        }
        Ok(problem)
    }
}

pub fn state_from_triples(triples: &[(usize, f64, f64)], n: usize) -> Result<SpectralState> {
    let mut state = SpectralState::zero(n);
    for &(mode, re, im) in triples {
        if mode == 0 || mode > n {
            bail!("mode index {mode} outside 1..={n}");
        }
        state.coeffs[mode - 1] = Complex64::new(re, im);
    }
    Ok(state)
}
