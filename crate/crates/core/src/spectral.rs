//! Dirichlet sine eigenbasis on the unit interval: eigenpairs, spectral
//! states with eigenvalue-weighted Sobolev norms, and the observation
//! operators (interior restriction overlaps, boundary normal-derivative
//! traces).

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("mode index must be >= 1, got {0}")]
    BadModeIndex(usize),
    #[error("invalid observation region: {0}")]
    BadRegion(String),
}

/// Dirichlet Laplacian eigenbasis on (0,1), truncated to `mode_count` modes.
///
/// lambda_j = (j pi)^2 and e_j(x) = sqrt(2) sin(j pi x), j = 1..=mode_count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EigenBasis {
    pub mode_count: usize,
}

impl EigenBasis {
    pub fn new(mode_count: usize) -> Self {
        assert!(mode_count >= 1);
        EigenBasis { mode_count }
    }

    /// (j pi)^2 for the 1-based mode index j.
    pub fn eigenvalue(j: usize) -> f64 {
        let jf = j as f64;
        (jf * PI) * (jf * PI)
    }

    /// sqrt(2) sin(j pi x).
    pub fn eigenfunction(j: usize, x: f64) -> f64 {
        std::f64::consts::SQRT_2 * (j as f64 * PI * x).sin()
    }

    /// Eigenvalue together with an evaluator for the eigenfunction.
    pub fn eigen_pair(j: usize) -> Result<(f64, impl Fn(f64) -> f64), SpectralError> {
        if j == 0 {
            return Err(SpectralError::BadModeIndex(j));
        }
        Ok((Self::eigenvalue(j), move |x: f64| Self::eigenfunction(j, x)))
    }

    /// All eigenvalues for modes 1..=mode_count.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.mode_count).map(Self::eigenvalue).collect()
    }
}

/// Complex coefficient vector over the sine basis with a Sobolev index kept
/// for norm bookkeeping. Index s weights mode j by lambda_j^s inside the
/// squared norm; s = 0 is plain l2.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub coeffs: Vec<Complex64>,
    pub sobolev_index: f64,
}

impl SpectralState {
    pub fn new(coeffs: Vec<Complex64>) -> Self {
        SpectralState { coeffs, sobolev_index: 0.0 }
    }

    pub fn with_index(coeffs: Vec<Complex64>, sobolev_index: f64) -> Self {
        SpectralState { coeffs, sobolev_index }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); n])
    }

    /// Unit mass on mode j (1-based), length n.
    pub fn unit_mode(j: usize, n: usize) -> Self {
        assert!(j >= 1 && j <= n);
        let mut c = vec![Complex64::new(0.0, 0.0); n];
        c[j - 1] = Complex64::new(1.0, 0.0);
        Self::new(c)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// (sum_j lambda_j^s |a_j|^2)^(1/2).
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| EigenBasis::eigenvalue(i + 1).powf(s) * a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Norm at the state's stored Sobolev index.
    pub fn norm(&self) -> f64 {
        self.sobolev_norm(self.sobolev_index)
    }

    /// Duality pairing sum_j a_j conj(b_j); independent of the Sobolev index
    /// under the pivot-space convention.
    pub fn dual_pairing(&self, other: &SpectralState) -> Complex64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b.conj())
            .sum()
    }

    /// Evaluates sum_j a_j e_j(x) at a point.
    pub fn evaluate(&self, x: f64) -> Complex64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| a * EigenBasis::eigenfunction(i + 1, x))
            .sum()
    }
}

/// Endpoint of the unit interval used for boundary observation/control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Endpoint {
    Left,
    Right,
}

impl Endpoint {
    pub fn coordinate(self) -> f64 {
        match self {
            Endpoint::Left => 0.0,
            Endpoint::Right => 1.0,
        }
    }
}

/// Where the dynamics is observed (equivalently, where control acts):
/// either a union of interior subintervals of (0,1) or one endpoint trace.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    Interior(Vec<(f64, f64)>),
    Boundary(Endpoint),
}

impl ObservationOperator {
    /// Validates an interior region: subintervals pairwise disjoint, each
    /// contained in (0,1), total length positive.
    pub fn interior(mut intervals: Vec<(f64, f64)>) -> Result<Self, SpectralError> {
        if intervals.is_empty() {
            return Err(SpectralError::BadRegion("empty subinterval list".into()));
        }
        intervals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut total = 0.0;
        let mut prev_end = 0.0;
        for &(a, b) in &intervals {
            if !(a >= 0.0 && b <= 1.0 && a < b) {
                return Err(SpectralError::BadRegion(format!(
                    "subinterval ({a}, {b}) not inside (0,1)"
                )));
            }
            if a < prev_end {
                return Err(SpectralError::BadRegion(format!(
                    "subintervals overlap near x = {a}"
                )));
            }
            prev_end = b;
            total += b - a;
        }
        if total <= 0.0 {
            return Err(SpectralError::BadRegion("total length is zero".into()));
        }
        Ok(ObservationOperator::Interior(intervals))
    }

    pub fn full_domain() -> Self {
        ObservationOperator::Interior(vec![(0.0, 1.0)])
    }

    pub fn total_length(&self) -> f64 {
        match self {
            ObservationOperator::Interior(iv) => iv.iter().map(|(a, b)| b - a).sum(),
            ObservationOperator::Boundary(_) => 0.0,
        }
    }

    pub fn is_boundary(&self) -> bool {
        matches!(self, ObservationOperator::Boundary(_))
    }
}

/// Normal-derivative trace of e_j at an endpoint, with the sign convention
/// fixed so that trace(j, Left) = sqrt(2) j pi and
/// trace(j, Right) = sqrt(2) j pi (-1)^(j+1). Only products of two traces
/// enter Gramians, so the global sign cancels; fixing it keeps reconstructed
/// boundary controls reproducible.
pub fn boundary_trace(j: usize, endpoint: Endpoint) -> f64 {
    let base = std::f64::consts::SQRT_2 * j as f64 * PI;
    match endpoint {
        Endpoint::Left => base,
        Endpoint::Right => {
            if j % 2 == 1 {
                base
            } else {
                -base
            }
        }
    }
}

/// Antiderivative of 2 sin(j pi x) sin(k pi x), split analytically at j = k.
fn overlap_antiderivative(j: usize, k: usize, x: f64) -> f64 {
    if j == k {
        let jf = j as f64;
        x - (2.0 * jf * PI * x).sin() / (2.0 * jf * PI)
    } else {
        let d = (j as f64 - k as f64) * PI;
        let s = (j as f64 + k as f64) * PI;
        (d * x).sin() / d - (s * x).sin() / s
    }
}

/// Inner product of restricted eigenfunctions:
/// Interior: sum over subintervals of int 2 sin(j pi x) sin(k pi x) dx;
/// Boundary: product of the two endpoint traces. Symmetric in (j, k).
pub fn overlap(j: usize, k: usize, op: &ObservationOperator) -> f64 {
    assert!(j >= 1 && k >= 1, "modes are 1-based");
    match op {
        ObservationOperator::Interior(intervals) => intervals
            .iter()
            .map(|&(a, b)| overlap_antiderivative(j, k, b) - overlap_antiderivative(j, k, a))
            .sum(),
        ObservationOperator::Boundary(e) => boundary_trace(j, *e) * boundary_trace(k, *e),
    }
}

/// Dense overlap matrix on modes 1..=n.
pub fn overlap_matrix(n: usize, op: &ObservationOperator) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 1..=n {
        for k in j..=n {
            let v = overlap(j, k, op);
            m[(j - 1, k - 1)] = v;
            m[(k - 1, j - 1)] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_gl;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_pair_values() {
        let (lam, e) = EigenBasis::eigen_pair(1).unwrap();
        assert_abs_diff_eq!(lam, PI * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(e(0.5), std::f64::consts::SQRT_2, epsilon = 1e-12);

        let (lam2, e2) = EigenBasis::eigen_pair(2).unwrap();
        assert_abs_diff_eq!(lam2, 4.0 * PI * PI, epsilon = 1e-11);
        // e_2(0.25) = sqrt(2) sin(pi/2) = sqrt(2)
        assert_abs_diff_eq!(e2(0.25), std::f64::consts::SQRT_2, epsilon = 1e-12);

        let (lam5, _) = EigenBasis::eigen_pair(5).unwrap();
        assert_abs_diff_eq!(lam5, 25.0 * PI * PI, epsilon = 1e-10);

        assert!(EigenBasis::eigen_pair(0).is_err());
    }

    #[test]
    fn orthonormality_by_quadrature() {
        // >= 2(j+k) Gauss nodes resolves the oscillation; delta_{jk} to 1e-12
        for &(j, k) in &[(1usize, 1usize), (1, 2), (3, 3), (7, 11), (32, 32), (64, 63), (64, 64)] {
            let n_nodes = 2 * (j + k) + 8;
            let v = integrate_gl(
                |x| EigenBasis::eigenfunction(j, x) * EigenBasis::eigenfunction(k, x),
                0.0,
                1.0,
                n_nodes,
            );
            let expect = if j == k { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn sobolev_norm_examples() {
        let s1 = SpectralState::unit_mode(1, 4);
        assert_abs_diff_eq!(s1.sobolev_norm(0.0), 1.0, epsilon = 1e-15);
        // weight lambda_1^2 inside the square, norm = lambda_1 = pi^2
        assert_abs_diff_eq!(s1.sobolev_norm(2.0), PI * PI, epsilon = 1e-12);

        // coeffs (1,1) on modes 1,2 at s=-2: sqrt(17)/(4 pi^2), frozen from
        // a 50-digit evaluation
        let s = SpectralState::new(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
        assert_abs_diff_eq!(s.sobolev_norm(-2.0), 0.1044394855674907379, epsilon = 1e-15);
    }

    #[test]
    fn dual_pairing_is_index_free() {
        let mut a = SpectralState::new(vec![
            Complex64::new(1.0, 2.0),
            Complex64::new(-0.5, 0.25),
        ]);
        let b = SpectralState::new(vec![Complex64::new(0.3, -1.0), Complex64::new(2.0, 0.0)]);
        let p0 = a.dual_pairing(&b);
        a.sobolev_index = 2.0;
        assert_eq!(p0, a.dual_pairing(&b));
    }

    #[test]
    fn overlap_examples() {
        let full = ObservationOperator::full_domain();
        assert_abs_diff_eq!(overlap(1, 1, &full), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(overlap(1, 2, &full), 0.0, epsilon = 1e-14);
        let half = ObservationOperator::interior(vec![(0.0, 0.5)]).unwrap();
        assert_abs_diff_eq!(overlap(1, 1, &half), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn overlap_matches_adaptive_quadrature() {
        let op = ObservationOperator::interior(vec![(0.15, 0.4), (0.55, 0.9)]).unwrap();
        for &(j, k) in &[(1usize, 1usize), (2, 5), (9, 9), (17, 23), (64, 64), (48, 64)] {
            let closed = overlap(j, k, &op);
            let mut num = 0.0;
            if let ObservationOperator::Interior(iv) = &op {
                for &(a, b) in iv {
                    // pre-split so each adaptive call sees at most about one
                    // oscillation; plain adaptive Simpson aliases otherwise
                    let pieces = ((b - a) * (j + k + 4) as f64).ceil() as usize;
                    for p in 0..pieces {
                        let lo = a + (b - a) * p as f64 / pieces as f64;
                        let hi = a + (b - a) * (p + 1) as f64 / pieces as f64;
                        num += crate::quad::adaptive_simpson(
                            &|x: f64| {
                                EigenBasis::eigenfunction(j, x) * EigenBasis::eigenfunction(k, x)
                            },
                            lo,
                            hi,
                            1e-13 / pieces as f64,
                        );
                    }
                }
            }
            assert_abs_diff_eq!(closed, num, epsilon = 1e-10);
        }
    }

    #[test]
    fn overlap_symmetry_and_boundary_traces() {
        let op = ObservationOperator::interior(vec![(0.3, 0.8)]).unwrap();
        for j in 1..=12 {
            for k in 1..=12 {
                assert_eq!(overlap(j, k, &op), overlap(k, j, &op));
            }
        }
        assert_abs_diff_eq!(
            boundary_trace(1, Endpoint::Left),
            std::f64::consts::SQRT_2 * PI,
            epsilon = 1e-14
        );
        // (-1)^(j+1) sign at the right endpoint
        assert!(boundary_trace(2, Endpoint::Right) < 0.0);
        assert!(boundary_trace(3, Endpoint::Right) > 0.0);
        // trace product for j=1 at x=0 is 2 pi^2
        let b = ObservationOperator::Boundary(Endpoint::Left);
        assert_abs_diff_eq!(overlap(1, 1, &b), 2.0 * PI * PI, epsilon = 1e-11);
    }

    #[test]
    fn overlap_matrix_positive_definite() {
        // Strictly positive smallest eigenvalue for a nonempty subdomain.
        // The window is generous so that lambda_min stays far above f64
        // noise even at 48 modes; narrow windows push it below machine
        // precision long before that.
        let op = ObservationOperator::interior(vec![(0.05, 0.95)]).unwrap();
        let m = overlap_matrix(48, &op);
        let eig = m.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 1e-6, "min eigenvalue {min} not strictly positive");

        // PSD up to roundoff for a narrow window at the same truncation.
        let op2 = ObservationOperator::interior(vec![(0.3, 0.8)]).unwrap();
        let m2 = overlap_matrix(48, &op2);
        let min2 = m2
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min2 > -1e-12);
    }

    #[test]
    fn interior_region_validation() {
        assert!(ObservationOperator::interior(vec![]).is_err());
        assert!(ObservationOperator::interior(vec![(0.5, 0.4)]).is_err());
        assert!(ObservationOperator::interior(vec![(-0.1, 0.4)]).is_err());
        assert!(ObservationOperator::interior(vec![(0.1, 0.5), (0.4, 0.8)]).is_err());
        assert!(ObservationOperator::interior(vec![(0.6, 0.9), (0.1, 0.4)]).is_ok());
    }
}
