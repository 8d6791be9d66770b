//! Propagation of the averaged state (free and controlled), the averaged
//! adjoint trace feeding observability, a parabolic-vs-conservative
//! classifier, and the transport-to-heat averaging demo.

use crate::kernels::MultiplierKernel;
use crate::quad::gauss_legendre;
use crate::spectral::{
    boundary_trace, overlap_matrix, EigenBasis, ObservationOperator, SpectralState,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("time grid invalid: {0}")]
    BadGrid(String),
    #[error("control incompatible with geometry: {0}")]
    BadControl(String),
}

/// Monotone time nodes in [0, T] with a per-interval Gauss order used when
/// trajectories need intermediate Duhamel integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    pub quad_order: usize,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>, quad_order: usize) -> Result<Self, DynamicsError> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(DynamicsError::BadGrid("need nodes starting at 0".into()));
        }
        if quad_order < 2 {
            return Err(DynamicsError::BadGrid("quadrature order must be >= 2".into()));
        }
        for w in nodes.windows(2) {
            if w[1] <= w[0] {
                return Err(DynamicsError::BadGrid("nodes must strictly increase".into()));
            }
        }
        Ok(TimeGrid { nodes, quad_order })
    }

    pub fn uniform(t_final: f64, n_nodes: usize, quad_order: usize) -> Self {
        assert!(n_nodes >= 2 && t_final > 0.0);
        let nodes = (0..n_nodes)
            .map(|i| t_final * i as f64 / (n_nodes - 1) as f64)
            .collect();
        TimeGrid { nodes, quad_order }
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }
}

/// Time-indexed averaged states.
#[derive(Debug, Clone)]
pub struct AveragedTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<SpectralState>,
}

impl AveragedTrajectory {
    pub fn final_state(&self) -> &SpectralState {
        self.states.last().unwrap()
    }

    /// CSV body with columns (t, j, re, im); shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,j,re,im\n");
        for (node, state) in self.grid.nodes.iter().zip(&self.states) {
            for (i, c) in state.coeffs.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", node, i + 1, c.re, c.im));
            }
        }
        out
    }
}

/// Gauss quadrature over a union of time intervals, with uniform panels per
/// interval sized to resolve the kernel: panel width <= 2/lambda_N for
/// decaying kernels (half the 4/lambda_N resolution ceiling, which keeps
/// entry errors an order below the 1e-8 warning threshold), <= 1/lambda_N
/// for conservative ones.
#[derive(Debug, Clone)]
pub struct TimeQuadrature {
    /// (interval index, panel-local nodes), flattened in time order
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// per source interval: (start, panel width, panel count)
    pub panels: Vec<(f64, f64, usize)>,
    pub gauss_order: usize,
}

impl TimeQuadrature {
    pub fn for_kernel(
        intervals: &[(f64, f64)],
        kernel: &MultiplierKernel,
        n_modes: usize,
        gauss_order: usize,
    ) -> Self {
        let lambda_max = EigenBasis::eigenvalue(n_modes);
        let target = if kernel.is_parabolic_type() { 2.0 } else { 1.0 };
        let max_dt = target / lambda_max;
        Self::build(intervals, max_dt, gauss_order)
    }

    pub fn build(intervals: &[(f64, f64)], max_panel_width: f64, gauss_order: usize) -> Self {
        let (gx, gw) = gauss_legendre(gauss_order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut panels = Vec::new();
        for &(a, b) in intervals {
            let len = b - a;
            let count = (len / max_panel_width).ceil().max(1.0) as usize;
            let width = len / count as f64;
            panels.push((a, width, count));
            for p in 0..count {
                let lo = a + p as f64 * width;
                for (x, w) in gx.iter().zip(&gw) {
                    nodes.push(lo + 0.5 * width * (x + 1.0));
                    weights.push(0.5 * width * w);
                }
            }
        }
        TimeQuadrature { nodes, weights, panels, gauss_order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Control DOF: a spectral (or scalar, for boundary) field at every
/// quadrature node of the time set. The physical control is the observed
/// region's localization of this field; the localization operator is
/// applied when the control enters the forward dynamics.
#[derive(Debug, Clone)]
pub struct ControlField {
    pub quadrature: TimeQuadrature,
    pub op: ObservationOperator,
    /// node-major values; inner length = n_modes (interior) or 1 (boundary)
    pub values: Vec<Vec<Complex64>>,
    /// H^{-s_u}-type smoothing exponent folded into the control operator
    pub u_smoothing: f64,
}

impl ControlField {
    pub fn zero(
        quadrature: TimeQuadrature,
        op: ObservationOperator,
        n_modes: usize,
        u_smoothing: f64,
    ) -> Self {
        let dof = if op.is_boundary() { 1 } else { n_modes };
        let values = vec![vec![Complex64::new(0.0, 0.0); dof]; quadrature.len()];
        ControlField { quadrature, op, values, u_smoothing }
    }

    /// Smoothed localization: for interior control
    /// (Bu)_j = theta_j sum_k O_{jk} theta_k u_k, for boundary control
    /// (Bu)_j = theta_j trace_j u. theta_j = lambda_j^{-s_u}.
    pub fn apply_b(&self, node_index: usize, n_modes: usize, out: &mut [Complex64]) {
        let v = &self.values[node_index];
        match &self.op {
            ObservationOperator::Interior(_) => {
                let o = cached_overlap(&self.op, n_modes);
                for j in 0..n_modes {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..n_modes {
                        s += o[(j, k)] * theta(k + 1, self.u_smoothing) * v[k];
                    }
                    out[j] = theta(j + 1, self.u_smoothing) * s;
                }
            }
            ObservationOperator::Boundary(e) => {
                for j in 0..n_modes {
                    out[j] = theta(j + 1, self.u_smoothing) * boundary_trace(j + 1, *e) * v[0];
                }
            }
        }
    }

    /// Squared control norm in the (smoothed) observation inner product,
    /// accumulated with the same quadrature weights as the Gramian.
    pub fn norm_sq(&self, n_modes: usize) -> f64 {
        let mut total = 0.0;
        match &self.op {
            ObservationOperator::Interior(_) => {
                let o = cached_overlap(&self.op, n_modes);
                for (q, v) in self.values.iter().enumerate() {
                    let mut s = 0.0;
                    for j in 0..n_modes {
                        let tj = theta(j + 1, self.u_smoothing);
                        for k in 0..n_modes {
                            let tk = theta(k + 1, self.u_smoothing);
                            s += tj * tk * o[(j, k)] * (v[j] * v[k].conj()).re;
                        }
                    }
                    total += self.quadrature.weights[q] * s;
                }
            }
            ObservationOperator::Boundary(_) => {
                for (q, v) in self.values.iter().enumerate() {
                    total += self.quadrature.weights[q] * v[0].norm_sqr();
                }
            }
        }
        total
    }

    pub fn norm(&self, n_modes: usize) -> f64 {
        self.norm_sq(n_modes).sqrt()
    }

    /// CSV body (t, j, re, im); boundary controls use j = 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,j,re,im\n");
        for (q, v) in self.values.iter().enumerate() {
            let t = self.quadrature.nodes[q];
            if self.op.is_boundary() {
                out.push_str(&format!("{},0,{},{}\n", t, v[0].re, v[0].im));
            } else {
                for (i, c) in v.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{}\n", t, i + 1, c.re, c.im));
                }
            }
        }
        out
    }
}

fn theta(j: usize, s_u: f64) -> f64 {
    if s_u == 0.0 {
        1.0
    } else {
        EigenBasis::eigenvalue(j).powf(-s_u)
    }
}

// The overlap matrix is small and repeatedly needed; memoize per (op, n).
use std::collections::HashMap;
use std::sync::Arc;
use std::sync::Mutex;
use std::sync::OnceLock;

fn cached_overlap(op: &ObservationOperator, n: usize) -> Arc<DMatrix<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<DMatrix<f64>>>>> = OnceLock::new();
    let key = format!("{op:?}#{n}");
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(overlap_matrix(n, op)))
        .clone()
}

/// Free averaged flow: coefficient-wise y_j(t) = m_j(t) y_j(0).
pub fn propagate_free(
    y0: &SpectralState,
    kernel: &MultiplierKernel,
    grid: &TimeGrid,
) -> AveragedTrajectory {
    let states = grid
        .nodes
        .iter()
        .map(|&t| {
            let coeffs = y0
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, a)| kernel.multiplier_unchecked(EigenBasis::eigenvalue(i + 1), t) * a)
                .collect();
            SpectralState::with_index(coeffs, y0.sobolev_index)
        })
        .collect();
    AveragedTrajectory { grid: grid.clone(), states }
}

/// Controlled averaged flow in Duhamel form:
/// y_j(t) = m_j(t) y_j(0) + int_{E and [0,t]} m_j(t-s) (Bu(s))_j ds.
/// At t = T the integral reuses exactly the control's quadrature nodes;
/// interior nodes re-quadrate the truncated panels.
pub fn propagate_controlled(
    y0: &SpectralState,
    kernel: &MultiplierKernel,
    control: &ControlField,
    grid: &TimeGrid,
) -> Result<AveragedTrajectory, DynamicsError> {
    let n = y0.len();
    let t_final = grid.horizon();
    for &t in &control.quadrature.nodes {
        if t > t_final + 1e-12 {
            return Err(DynamicsError::BadControl(format!(
                "control node {t} beyond the horizon {t_final}"
            )));
        }
    }
    let mut bu = vec![vec![Complex64::new(0.0, 0.0); n]; control.quadrature.len()];
    for q in 0..control.quadrature.len() {
        control.apply_b(q, n, &mut bu[q]);
    }
    let lambdas: Vec<f64> = (1..=n).map(EigenBasis::eigenvalue).collect();

    let states = grid
        .nodes
        .iter()
        .map(|&t| {
            let mut coeffs: Vec<Complex64> = y0
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, a)| kernel.multiplier_unchecked(lambdas[i], t) * a)
                .collect();
            for (q, &s) in control.quadrature.nodes.iter().enumerate() {
                if s <= t {
                    let w = control.quadrature.weights[q];
                    for j in 0..n {
                        coeffs[j] += w * kernel.multiplier_unchecked(lambdas[j], t - s) * bu[q][j];
                    }
                }
            }
            SpectralState::with_index(coeffs, y0.sobolev_index)
        })
        .collect();
    Ok(AveragedTrajectory { grid: grid.clone(), states })
}

/// Observed averaged adjoint: for nodes t of the grid inside the time set,
/// the restriction through `op` of sum_j m_j(T-t) z_j e_j. Interior
/// observation returns the overlap-localized coefficient vector; boundary
/// observation returns the scalar trace in slot 0.
pub fn adjoint_average_trace(
    z0: &SpectralState,
    kernel: &MultiplierKernel,
    op: &ObservationOperator,
    grid: &TimeGrid,
) -> Vec<(f64, Vec<Complex64>)> {
    let n = z0.len();
    let t_final = grid.horizon();
    grid.nodes
        .iter()
        .map(|&t| {
            let w: Vec<Complex64> = z0
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    kernel.multiplier_unchecked(EigenBasis::eigenvalue(i + 1), t_final - t) * z
                })
                .collect();
            let observed = match op {
                ObservationOperator::Interior(_) => {
                    let o = cached_overlap(op, n);
                    (0..n)
                        .map(|j| (0..n).map(|k| o[(j, k)] * w[k]).sum())
                        .collect()
                }
                ObservationOperator::Boundary(e) => {
                    vec![w
                        .iter()
                        .enumerate()
                        .map(|(i, c)| c * boundary_trace(i + 1, *e))
                        .sum()]
                }
            };
            (t, observed)
        })
        .collect()
}

/// Verdict of the decay-shape fit at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DynamicsClass {
    ParabolicLike,
    Conservative,
    Indeterminate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierReport {
    pub class: DynamicsClass,
    pub linear_slope: f64,
    pub linear_r2: f64,
    pub loglog_slope: f64,
    pub loglog_r2: f64,
    pub used_envelope: bool,
}

/// Exponential-fit slope threshold: 0.5 per unit sqrt(lambda_max) T.
const CLASSIFIER_EPS0: f64 = 0.5;
const CLASSIFIER_R2_MIN: f64 = 0.9;

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// Classifies the averaged dynamics as parabolic-like (|m| decays at least
/// exponentially in lambda at the horizon) or conservative (at most
/// polynomially). Falls back to a small-envelope sample near the horizon
/// when oscillatory kernels spoil both direct fits.
pub fn classify_dynamics(
    kernel: &MultiplierKernel,
    lambda_max: f64,
    horizon: f64,
) -> ClassifierReport {
    let report = classify_at(kernel, lambda_max, horizon, false);
    if report.class == DynamicsClass::Indeterminate {
        let env = classify_at(kernel, lambda_max, horizon, true);
        if env.class != DynamicsClass::Indeterminate {
            return env;
        }
    }
    report
}

fn classify_at(
    kernel: &MultiplierKernel,
    lambda_max: f64,
    horizon: f64,
    envelope: bool,
) -> ClassifierReport {
    let mut lams = Vec::new();
    let mut mags = Vec::new();
    let mut j = 1;
    loop {
        let lam = EigenBasis::eigenvalue(j);
        if lam > lambda_max {
            break;
        }
        let log_mag = if envelope {
            (0..8)
                .map(|i| {
                    let t = horizon * (0.8 + 0.2 * i as f64 / 7.0);
                    kernel.log_magnitude(lam, t)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            kernel.log_magnitude(lam, horizon)
        };
        if log_mag.is_finite() {
            lams.push(lam);
            mags.push(log_mag);
        }
        j += 1;
    }
    if lams.len() < 3 {
        return ClassifierReport {
            class: DynamicsClass::Indeterminate,
            linear_slope: 0.0,
            linear_r2: 0.0,
            loglog_slope: 0.0,
            loglog_r2: 0.0,
            used_envelope: envelope,
        };
    }
    let (s_lin, _, r2_lin) = linear_fit(&lams, &mags);
    let logs: Vec<f64> = lams.iter().map(|l| l.ln()).collect();
    let (s_log, _, r2_log) = linear_fit(&logs, &mags);
    let threshold = -CLASSIFIER_EPS0 * horizon / lambda_max.sqrt();
    let class = if r2_lin >= CLASSIFIER_R2_MIN && s_lin <= threshold {
        DynamicsClass::ParabolicLike
    } else if r2_log >= CLASSIFIER_R2_MIN {
        DynamicsClass::Conservative
    } else {
        DynamicsClass::Indeterminate
    };
    ClassifierReport {
        class,
        linear_slope: s_lin,
        linear_r2: r2_lin,
        loglog_slope: s_log,
        loglog_r2: r2_log,
        used_envelope: envelope,
    }
}

/// Transport-averaging demo: the expectation of a random constant-velocity
/// transport with standard normal velocity is the Gaussian convolution of
/// the initial profile with variance t^2, and phi(x, t) = y_avg(x, sqrt(2t))
/// satisfies the discrete heat equation up to O(h^2).
#[derive(Debug, Clone, Serialize)]
pub struct TransportDemoReport {
    pub h: f64,
    pub mass_initial: f64,
    pub mass_averaged: f64,
    pub residual_linf: f64,
}

pub struct TransportGrid {
    pub xs: Vec<f64>,
    pub h: f64,
}

impl TransportGrid {
    /// Symmetric grid with spacing h covering |x| <= half_width.
    pub fn symmetric(half_width: f64, h: f64) -> Self {
        let n = (half_width / h).ceil() as i64;
        let xs = (-n..=n).map(|i| i as f64 * h).collect();
        TransportGrid { xs, h }
    }
}

/// Gaussian convolution of the sampled profile with kernel variance t^2,
/// evaluated by trapezoid on the sample grid (spectrally accurate for
/// smooth, decaying profiles).
pub fn gaussian_average(y0: &[f64], grid: &TransportGrid, t: f64) -> Vec<f64> {
    if t == 0.0 {
        return y0.to_vec();
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * t);
    grid.xs
        .iter()
        .map(|&x| {
            let mut s = 0.0;
            for (k, &z) in grid.xs.iter().enumerate() {
                let d = x - z;
                s += y0[k] * (-d * d / (2.0 * t * t)).exp();
            }
            s * grid.h * norm
        })
        .collect()
}

/// Builds phi(x, t) = averaged(x, sqrt(2 t)) and measures the centered
/// finite-difference heat residual phi_t - phi_xx at (grid interior, t).
pub fn transport_average_demo<F>(profile: F, grid: &TransportGrid, t: f64) -> TransportDemoReport
where
    F: Fn(f64) -> f64,
{
    let y0: Vec<f64> = grid.xs.iter().map(|&x| profile(x)).collect();
    let mass0: f64 = y0.iter().sum::<f64>() * grid.h;
    let averaged = gaussian_average(&y0, grid, (2.0 * t).sqrt());
    let mass1: f64 = averaged.iter().sum::<f64>() * grid.h;

    let mut residual: f64 = 0.0;
    if t > 0.0 {
        // phi at t +- dt via fresh convolutions: time derivative is then
        // second order in dt; tie dt to h so refinement drives both
        let dt = grid.h * grid.h;
        let phi_minus = gaussian_average(&y0, grid, (2.0 * (t - dt)).sqrt());
        let phi_plus = gaussian_average(&y0, grid, (2.0 * (t + dt)).sqrt());
        let n = grid.xs.len();
        for i in 1..n - 1 {
            let phi_t = (phi_plus[i] - phi_minus[i]) / (2.0 * dt);
            let phi_xx =
                (averaged[i + 1] - 2.0 * averaged[i] + averaged[i - 1]) / (grid.h * grid.h);
            residual = residual.max((phi_t - phi_xx).abs());
        }
    }
    TransportDemoReport {
        h: grid.h,
        mass_initial: mass0,
        mass_averaged: mass1,
        residual_linf: residual,
    }
}
