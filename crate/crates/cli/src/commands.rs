//! Command implementations. Each command reads its config sections, runs
//! the corresponding pipeline, writes CSV/JSON artifacts plus a manifest,
//! and reports a pass/fail verdict for the exit code.

use crate::config::ExperimentConfig;
use anyhow::{Context, Result};
use avgpde::control::{
    assemble_gramian, default_cg_maxit, duality_gap, finite_dim_averaged_demo,
    minimal_norm_check, solve_dual, DEFAULT_CG_TOL,
};
use avgpde::dynamics::{propagate_free, TimeGrid, TransportGrid};
use avgpde::kernels::MultiplierKernel;
use avgpde::mc::{
    compare_multiplier, compare_second_moment, mc_controlled_average, McComparison, McConfig,
};
use avgpde::observe::{
    averaged_observability_constant, build_telescope, fractional_study, spectral_inequality_fit,
    thresholds_at_modes, ObservabilityFlavor,
};
use avgpde::spectral::{EigenBasis, ObservationOperator};
use serde::Serialize;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Outcome levels mapped to exit codes by main.
pub enum Verdict {
    Ok,
    TargetMissed(String),
}

#[derive(Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    seed: u64,
    version: String,
    wall_time_s: f64,
    checks: Vec<Check>,
}

pub struct Runner {
    pub out_dir: std::path::PathBuf,
    pub config_text: String,
    pub seed: u64,
    started: Instant,
    checks: Vec<Check>,
}

impl Runner {
    pub fn new(out_dir: &Path, config_text: String, seed: u64) -> Result<Self> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        Ok(Runner {
            out_dir: out_dir.to_path_buf(),
            config_text,
            seed,
            started: Instant::now(),
            checks: Vec::new(),
        })
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check { name: name.to_string(), pass, detail });
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }

    pub fn finish(mut self, command: &str) -> Result<Verdict> {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        hasher.update(self.config_text.as_bytes());
        let hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        let all_pass = self.checks.iter().all(|c| c.pass);
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: hash,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            checks: std::mem::take(&mut self.checks),
        };
        self.write_json("manifest.json", &manifest)?;
        if all_pass {
            Ok(Verdict::Ok)
        } else {
            Ok(Verdict::TargetMissed(failed.join("; ")))
        }
    }
}

/// The standard validation grid used across the Monte Carlo gates.
pub fn standard_grid() -> (Vec<f64>, Vec<f64>) {
    let lambdas = vec![PI * PI, 4.0 * PI * PI, 25.0 * PI * PI];
    let times = vec![0.05, 0.3, 1.0];
    (lambdas, times)
}

pub fn cmd_multiplier(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let kernel = cfg.kernel()?;
    let section = cfg.multiplier.as_ref().context("missing [multiplier] section")?;
    let mut csv = String::from("law,kind,j,t,re,im\n");
    for &j in &section.modes {
        let lam = EigenBasis::eigenvalue(j);
        for &t in &section.times {
            let m = kernel.multiplier(lam, t)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                kernel.law, kernel.kind, j, t, m.re, m.im
            ));
        }
    }
    runner.write("multipliers.csv", &csv)?;

    // t = 0 column sanity
    let all_ones = section
        .modes
        .iter()
        .all(|&j| kernel.multiplier(EigenBasis::eigenvalue(j), 0.0).unwrap().re == 1.0);
    runner.check("t0_column_is_one", all_ones, "m(lambda, 0) = 1".into());

    let samples = section.mc_samples.unwrap_or(100_000);
    let mc = McConfig::new(samples, runner.seed);
    let mut rows = Vec::new();
    for &j in &section.modes {
        let lam = EigenBasis::eigenvalue(j);
        for &t in &section.times {
            rows.push(compare_multiplier(&kernel, lam, t, &mc));
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    runner.write_json("mc_report.json", &rows)?;
    runner.check("mc_agreement", pass, format!("{} comparisons", rows.len()));
    Ok(())
}

pub fn cmd_propagate(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let problem = cfg.control_problem()?;
    let nodes = cfg.propagate.as_ref().map(|p| p.grid_nodes).unwrap_or(21);
    let grid = TimeGrid::uniform(problem.geometry.horizon, nodes.max(2), 8);
    let traj = propagate_free(&problem.y0, &problem.kernel, &grid);
    runner.write("trajectory.csv", &traj.to_csv())?;
    runner.check(
        "initial_state_reproduced",
        traj.states[0]
            .coeffs
            .iter()
            .zip(&problem.y0.coeffs)
            .all(|(a, b)| (a - b).norm() <= 1e-14),
        "trajectory starts at y0".into(),
    );
    Ok(())
}

#[derive(Serialize)]
struct ControlReport {
    cg_iterations: usize,
    cg_converged: bool,
    final_residual: f64,
    control_norm: f64,
    duality_gap: f64,
    duality_gap_rel: f64,
    achieved_error: f64,
    achieved_error_rel: f64,
    target_rel_tol: f64,
    gramian_quad_nodes: usize,
    gramian_underresolved: bool,
    mc_closed_loop_norm: Option<f64>,
    mc_clt_bound: Option<f64>,
    minimal_norm_worst_margin: f64,
}

pub fn cmd_control(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let problem = cfg.control_problem()?;
    let solver = cfg.solver.as_ref();
    let cg_tol = solver.and_then(|s| s.cg_tol).unwrap_or(DEFAULT_CG_TOL);
    let cg_maxit = solver
        .and_then(|s| s.cg_maxit)
        .unwrap_or_else(|| default_cg_maxit(problem.n_modes));
    let target_rel_tol = solver.and_then(|s| s.target_rel_tol).unwrap_or(1e-6);
    let mc_samples = solver.and_then(|s| s.mc_verify_samples).unwrap_or(0);

    let gramian = assemble_gramian(&problem)?;
    let solution = solve_dual(&problem, &gramian, cg_tol, cg_maxit)?;
    if !solution.diagnostics.converged {
        anyhow::bail!(
            "conjugate gradients failed to converge: residual {} after {} iterations",
            solution.diagnostics.final_residual,
            solution.diagnostics.cg_iterations
        );
    }

    runner.write("control.csv", &solution.control.to_csv())?;

    // scale for the relative closed-loop verdict
    let target = problem.target();
    let scale = problem.y0.sobolev_norm(problem.s_v) + target.sobolev_norm(problem.s_v);
    let rel = solution.diagnostics.achieved_error / scale.max(1e-300);
    let u2 = solution.diagnostics.control_norm.powi(2);
    let gap = duality_gap(&solution, &gramian);
    let minimal = minimal_norm_check(&problem, &gramian, &solution, 8, runner.seed ^ 0x5eed)?;

    let (mc_norm, mc_bound) = if mc_samples > 0 {
        let mc = McConfig::new(mc_samples, runner.seed);
        let est = mc_controlled_average(&problem, &solution.control, &mc);
        let miss: f64 = est
            .mean
            .coeffs
            .iter()
            .zip(&target.coeffs)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        (Some(miss), Some(est.clt_bound()))
    } else {
        (None, None)
    };

    let report = ControlReport {
        cg_iterations: solution.diagnostics.cg_iterations,
        cg_converged: solution.diagnostics.converged,
        final_residual: solution.diagnostics.final_residual,
        control_norm: solution.diagnostics.control_norm,
        duality_gap: gap,
        duality_gap_rel: gap / u2.max(1e-300),
        achieved_error: solution.diagnostics.achieved_error,
        achieved_error_rel: rel,
        target_rel_tol,
        gramian_quad_nodes: gramian.metadata.quad_nodes,
        gramian_underresolved: gramian.metadata.underresolved,
        mc_closed_loop_norm: mc_norm,
        mc_clt_bound: mc_bound,
        minimal_norm_worst_margin: minimal.worst_margin,
    };
    runner.write_json("diagnostics.json", &report)?;

    runner.check(
        "closed_loop_target",
        rel <= target_rel_tol,
        format!("relative error {rel:.3e} vs tolerance {target_rel_tol:.1e}"),
    );
    runner.check(
        "minimal_norm",
        minimal.all_nonnegative,
        format!("worst margin {:.3e}", minimal.worst_margin),
    );
    if let (Some(norm), Some(bound)) = (mc_norm, mc_bound) {
        runner.check(
            "mc_closed_loop",
            norm <= bound,
            format!("MC miss {norm:.3e} vs CLT bound {bound:.3e}"),
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ObservabilityReport {
    fit_c1: f64,
    fit_offset: f64,
    fit_residual: f64,
    telescope_ratio_bound: f64,
    telescope_b_ratio_used: f64,
    weights_all_nonnegative: bool,
    violation_b_ratio: f64,
    violation_negative_count: usize,
    null_constant: f64,
    exact_constant: f64,
}

pub fn cmd_observability(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let section = cfg.observability.as_ref().context("missing [observability] section")?;
    let geometry = cfg.geometry()?;
    let window = ObservationOperator::interior(vec![(
        section.fit_window[0],
        section.fit_window[1],
    )])?;
    let fit = spectral_inequality_fit(&window, &thresholds_at_modes(&section.fit_modes))?;
    let mut sigma_csv = String::from("r,mode_count,sigma,below_precision\n");
    for s in &fit.samples {
        sigma_csv.push_str(&format!(
            "{},{},{},{}\n",
            s.r, s.mode_count, s.sigma, s.below_precision
        ));
    }
    runner.write("spectral_fit.csv", &sigma_csv)?;
    let monotone = fit.samples.windows(2).all(|w| w[1].sigma <= w[0].sigma * (1.0 + 1e-12));
    runner.check("sigma_nonincreasing", monotone, "sigma(r) nonincreasing".into());

    let a = section.telescope_a;
    let probe = build_telescope(&geometry.time_set, geometry.horizon, a, 2.0, &fit)?;
    let b_ratio = match section.telescope_b_ratio {
        Some(r) if r > 0.0 => r,
        _ => 1.05 * probe.ratio_bound.max(1.0),
    };
    let telescope = build_telescope(&geometry.time_set, geometry.horizon, a, b_ratio, &fit)?;
    let mut tel_csv = String::from("k,node,threshold,weight,measure_margin\n");
    for k in 0..telescope.weights.len() {
        tel_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            k + 1,
            telescope.nodes[k],
            telescope.thresholds[k],
            telescope.weights[k],
            telescope.measure_margins[k]
        ));
    }
    runner.write("telescope.csv", &tel_csv)?;
    let nonneg = telescope.weights.iter().all(|&f| f >= 0.0);
    runner.check(
        "telescope_weights_nonnegative",
        nonneg,
        format!("b/a = {b_ratio:.3} vs bound {:.3}", telescope.ratio_bound),
    );

    let violation_factor = section.telescope_violation_factor.unwrap_or(10.0);
    let bad_ratio = (telescope.ratio_bound / violation_factor).max(1e-3);
    let violated = build_telescope(&geometry.time_set, geometry.horizon, a, bad_ratio, &fit)?;
    let negative_count = violated.weights.iter().filter(|&&f| f < 0.0).count();
    runner.check(
        "telescope_violation_detected",
        negative_count > 0,
        format!("{negative_count} negative weights at b/a = {bad_ratio:.3}"),
    );

    // averaged observability constants for the configured problem
    let problem = cfg.control_problem()?;
    let gramian = assemble_gramian(&problem)?;
    let null = averaged_observability_constant(&problem, &gramian, ObservabilityFlavor::Null);
    let exact = averaged_observability_constant(&problem, &gramian, ObservabilityFlavor::Exact);

    let report = ObservabilityReport {
        fit_c1: fit.c1,
        fit_offset: fit.offset,
        fit_residual: fit.fit_residual,
        telescope_ratio_bound: telescope.ratio_bound,
        telescope_b_ratio_used: b_ratio,
        weights_all_nonnegative: nonneg,
        violation_b_ratio: bad_ratio,
        violation_negative_count: negative_count,
        null_constant: null.value,
        exact_constant: exact.value,
    };
    runner.write_json("observability.json", &report)?;
    Ok(())
}

pub fn cmd_fractional(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let section = cfg.fractional.as_ref().context("missing [fractional] section")?;
    let window =
        ObservationOperator::interior(vec![(section.window[0], section.window[1])])?;
    let study = fractional_study(section.gamma, &section.n_list, 1.0, &window)?;
    let mut csv = String::from("n,deterministic_min_eigenvalue,averaged_null_constant\n");
    for r in &study.records {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.n_modes, r.deterministic_min_eigenvalue, r.averaged_null_constant
        ));
    }
    runner.write("fractional.csv", &csv)?;
    runner.write_json("fractional.json", &study)?;

    let gaps_decrease = study.frequency_gaps.windows(2).all(|w| w[1] < w[0]);
    runner.check("frequency_gaps_decreasing", gaps_decrease, "gaps shrink toward 0".into());
    if study.records.len() >= 2 {
        let first = &study.records[0];
        let last = &study.records[study.records.len() - 1];
        let det_drop = first.deterministic_min_eigenvalue / last.deterministic_min_eigenvalue;
        let span: Vec<f64> = study.records.iter().map(|r| r.averaged_null_constant).collect();
        let band = span.iter().cloned().fold(0.0f64, f64::max)
            / span.iter().cloned().fold(f64::INFINITY, f64::min);
        runner.check(
            "deterministic_collapse",
            det_drop >= 10.0,
            format!("min eigenvalue dropped by {det_drop:.2}x"),
        );
        runner.check(
            "averaged_constant_bounded",
            band <= 2.0,
            format!("null constants span a {band:.2}x band"),
        );
    }
    Ok(())
}

pub fn cmd_transport(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let section = cfg.transport.as_ref().context("missing [transport] section")?;
    let sigma = section.sigma;
    let profile = move |x: f64| (-x * x / (2.0 * sigma * sigma)).exp();
    let mut csv = String::from("h,residual_linf,mass_drift\n");
    let mut residuals = Vec::new();
    for &h in &section.grid_h {
        let grid = TransportGrid::symmetric(section.half_width, h);
        let rep = avgpde::dynamics::transport_average_demo(profile, &grid, section.time);
        csv.push_str(&format!(
            "{},{},{}\n",
            h,
            rep.residual_linf,
            rep.mass_averaged - rep.mass_initial
        ));
        runner.check(
            &format!("mass_conserved_h_{h}"),
            (rep.mass_averaged - rep.mass_initial).abs() <= 1e-10 * rep.mass_initial,
            format!("drift {:.3e}", rep.mass_averaged - rep.mass_initial),
        );
        residuals.push(rep.residual_linf);
    }
    runner.write("transport_residuals.csv", &csv)?;
    for w in residuals.windows(2) {
        let order = (w[0] / w[1]).log2();
        runner.check(
            "heat_stencil_order",
            order >= 1.8,
            format!("observed order {order:.2}"),
        );
    }
    Ok(())
}

pub fn cmd_mc_validate(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<()> {
    let samples = cfg.mc.as_ref().map(|m| m.sample_count).unwrap_or(1_000_000);
    let mc = McConfig::new(samples, runner.seed);
    let (lambdas, times) = standard_grid();
    let mut rows: Vec<McComparison> = Vec::new();
    for kernel in MultiplierKernel::admissible_pairs() {
        for &lam in &lambdas {
            for &t in &times {
                rows.push(compare_multiplier(&kernel, lam, t, &mc));
            }
        }
    }
    // second-moment kernels on the same grid
    for kernel in second_moment_pairs() {
        for &lam in &lambdas {
            for &t in &times {
                rows.push(compare_second_moment(&kernel, lam, t, &mc));
            }
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    let failed = rows.iter().filter(|r| !r.pass).count();
    runner.write_json("mc_report.json", &rows)?;
    runner.check(
        "all_kernels_within_clt",
        pass,
        format!("{} comparisons, {} failed", rows.len(), failed),
    );
    Ok(())
}

pub fn second_moment_pairs() -> Vec<MultiplierKernel> {
    use avgpde::kernels::{EquationKind::*, ParameterLaw::*};
    vec![
        MultiplierKernel::new(Uniform { a: 1.0, b: 2.0 }, Heat).unwrap(),
        MultiplierKernel::new(Exponential, Heat).unwrap(),
        MultiplierKernel::new(Normal, Schrodinger).unwrap(),
        MultiplierKernel::new(Cauchy, Schrodinger).unwrap(),
    ]
}

pub fn cmd_finite_dim(runner: &mut Runner) -> Result<()> {
    let rep = finite_dim_averaged_demo([1.0, 0.0], 1.0);
    runner.write_json("finite_dim.json", &rep)?;
    runner.check(
        "averaged_null_reached",
        rep.averaged_final_norm <= 1e-10,
        format!("final norm {:.3e}", rep.averaged_final_norm),
    );
    runner.check(
        "simultaneous_infeasible",
        rep.simultaneous_residual > 0.1,
        format!("least-squares residual {:.3}", rep.simultaneous_residual),
    );
    Ok(())
}
