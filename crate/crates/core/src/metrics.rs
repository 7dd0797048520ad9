//! Indicators for comparing a learned ProMP with a reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, spd_cholesky, symmetrize};
use crate::model::ProMPParams;

/// Bhattacharyya distance between `N(mu1, s1)` and `N(mu2, s2)`:
/// `⅛ Δμᵀ S̄⁻¹ Δμ + ½ ln(det S̄ / √(det S1 det S2))`, `S̄ = (S1 + S2)/2`.
pub fn bhattacharyya_gaussian(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu1.len();
    for (got, what) in [(mu2.len(), "mean"), (s1.nrows(), "covariance"), (s2.nrows(), "covariance")] {
        if got != n {
            return Err(Error::DimensionMismatch { what, expected: n, got });
        }
    }
    let mean_cov = (s1 + s2) * 0.5;
    let chol = spd_cholesky(&mean_cov, "bhattacharyya mean covariance")?;
    let diff = mu1 - mu2;
    let mahalanobis = diff.dot(&chol.solve(&diff));
    let ld1 = chol_logdet(&spd_cholesky(s1, "bhattacharyya first covariance")?);
    let ld2 = chol_logdet(&spd_cholesky(s2, "bhattacharyya second covariance")?);
    let db = mahalanobis / 8.0 + 0.5 * (chol_logdet(&chol) - 0.5 * (ld1 + ld2));
    Ok(db.max(0.0))
}

/// `‖ref − est‖_F / ‖ref‖_F` over matching element slices (vectors or matrices).
pub fn frobenius_rel_error(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            what: "frobenius operand",
            expected: reference.len(),
            got: estimate.len(),
        });
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateReference);
    }
    let diff = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// `log10(σ_max / σ_min)` from the singular values; `+∞` when `σ_min = 0`.
pub fn log10_condition_number(s: &DMatrix<f64>) -> f64 {
    let sv = s.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        return f64::INFINITY;
    }
    (max / min).log10()
}

/// The top eigenvalue is not simple, so the first principal axis is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmbiguousPrincipalAxis;

impl std::fmt::Display for AmbiguousPrincipalAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("largest eigenvalue is not simple")
    }
}

impl std::error::Error for AmbiguousPrincipalAxis {}

fn principal_axis(s: &DMatrix<f64>) -> Result<DVector<f64>, AmbiguousPrincipalAxis> {
    let eig = symmetrize(s).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let top = eig.eigenvalues[order[0]];
    if order.len() > 1 {
        let second = eig.eigenvalues[order[1]];
        if top - second <= 1e-10 * top.abs() {
            return Err(AmbiguousPrincipalAxis);
        }
    }
    Ok(eig.eigenvectors.column(order[0]).normalize())
}

/// Angle in degrees, within `[0, 90]`, between the first principal axes.
pub fn pc_rotation_deg(s_prev: &DMatrix<f64>, s_next: &DMatrix<f64>) -> Result<f64, AmbiguousPrincipalAxis> {
    let a = principal_axis(s_prev)?;
    let b = principal_axis(s_next)?;
    let cos = a.dot(&b).abs().min(1.0);
    Ok(cos.acos().to_degrees())
}

/// Which distributions the Bhattacharyya distance compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "space")]
pub enum DistanceSpace {
    /// `N(μ_w, Σ_w)` in `R^{KD}`.
    #[default]
    Weight,
    /// Joint trajectory distribution on an evenly spaced phase grid.
    Trajectory { grid: usize },
}

fn trajectory_gaussian(params: &ProMPParams, grid: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = params.basis.d;
    let kd = params.basis.dim();
    let mut phi = DMatrix::zeros(grid * d, kd);
    for i in 0..grid {
        let z = if grid > 1 { i as f64 / (grid - 1) as f64 } else { 0.5 };
        phi.view_mut((i * d, 0), (d, kd)).copy_from(&params.basis.block_basis(z));
    }
    let mean = &phi * &params.mu_w;
    let mut cov = &phi * &params.sigma_w * phi.transpose();
    for i in 0..grid {
        let mut block = cov.view_mut((i * d, i * d), (d, d));
        block += &params.sigma_y;
    }
    (mean, symmetrize(&cov))
}

/// Bhattacharyya distance between two ProMPs in the chosen space.
pub fn promp_distance(reference: &ProMPParams, estimate: &ProMPParams, space: DistanceSpace) -> Result<f64> {
    match space {
        DistanceSpace::Weight => {
            bhattacharyya_gaussian(&reference.mu_w, &reference.sigma_w, &estimate.mu_w, &estimate.sigma_w)
        }
        DistanceSpace::Trajectory { grid } => {
            if grid == 0 {
                return Err(Error::Config("trajectory grid needs at least one phase".into()));
            }
            let (m1, s1) = trajectory_gaussian(reference, grid);
            let (m2, s2) = trajectory_gaussian(estimate, grid);
            bhattacharyya_gaussian(&m1, &s1, &m2, &s2)
        }
    }
}

/// Per-update evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_b: f64,
    pub e_f_mu: f64,
    pub e_f_sigma: f64,
    pub log_kappa: f64,
    /// Missing for the first update or when a principal axis is ambiguous.
    pub pc_rotation_deg: Option<f64>,
}

impl MetricReport {
    /// Compares `estimate` with `reference`; the rotation is measured against
    /// `previous_sigma_w` when given.
    pub fn compare(
        reference: &ProMPParams,
        estimate: &ProMPParams,
        previous_sigma_w: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        Self::compare_in(reference, estimate, previous_sigma_w, DistanceSpace::Weight)
    }

    pub fn compare_in(
        reference: &ProMPParams,
        estimate: &ProMPParams,
        previous_sigma_w: Option<&DMatrix<f64>>,
        space: DistanceSpace,
    ) -> Result<Self> {
        Ok(Self {
            d_b: promp_distance(reference, estimate, space)?,
            e_f_mu: frobenius_rel_error(reference.mu_w.as_slice(), estimate.mu_w.as_slice())?,
            e_f_sigma: frobenius_rel_error(reference.sigma_w.as_slice(), estimate.sigma_w.as_slice())?,
            log_kappa: log10_condition_number(&estimate.sigma_w),
            pc_rotation_deg: previous_sigma_w.and_then(|prev| pc_rotation_deg(prev, &estimate.sigma_w).ok()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn bhattacharyya_closed_forms() {
        assert_eq!(bhattacharyya_gaussian(&vec1(0.3), &scalar(2.0), &vec1(0.3), &scalar(2.0)).unwrap(), 0.0);
        let mean_only = bhattacharyya_gaussian(&vec1(0.0), &scalar(1.0), &vec1(1.0), &scalar(1.0)).unwrap();
        assert!((mean_only - 0.125).abs() <= 1e-12);
        let var_only = bhattacharyya_gaussian(&vec1(0.0), &scalar(1.0), &vec1(0.0), &scalar(4.0)).unwrap();
        assert!((var_only - 0.5 * 1.25_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn bhattacharyya_matches_overlap_integral() {
        // −ln ∫ √(p q) dx by composite Simpson on [−40, 40].
        let pdf = |x: f64, var: f64| (-(x * x) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let n = 200_000;
        let (a, b) = (-40.0, 40.0);
        let h = (b - a) / n as f64;
        let f = |x: f64| (pdf(x, 1.0) * pdf(x, 4.0)).sqrt();
        let mut sum = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * f(a + i as f64 * h);
        }
        let oracle = -(sum * h / 3.0).ln();
        let got = bhattacharyya_gaussian(&vec1(0.0), &scalar(1.0), &vec1(0.0), &scalar(4.0)).unwrap();
        assert!((got - oracle).abs() < 1e-10);
        assert!((got - 0.111_571_775_657_104_9).abs() < 1e-12);
    }

    #[test]
    fn frobenius_examples() {
        let r = [3.0, 0.0, 0.0, 4.0];
        assert_eq!(frobenius_rel_error(&r, &r).unwrap(), 0.0);
        assert_eq!(frobenius_rel_error(&r, &[0.0; 4]).unwrap(), 1.0);
        assert!((frobenius_rel_error(&r, &[3.0, 0.0, 0.0, 0.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(frobenius_rel_error(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(), Error::DegenerateReference);
    }

    #[test]
    fn condition_number_examples() {
        assert_eq!(log10_condition_number(&DMatrix::identity(30, 30)), 0.0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1e4, 1.0]));
        assert!((log10_condition_number(&d) - 4.0).abs() < 1e-12);
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(log10_condition_number(&singular), f64::INFINITY);
    }

    #[test]
    fn condition_number_matches_eigen_ratio() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let s = &a * a.transpose() + DMatrix::identity(5, 5) * 0.05;
        let eig = s.clone().symmetric_eigen().eigenvalues;
        let oracle = (eig.max() / eig.min()).log10();
        assert!((log10_condition_number(&s) - oracle).abs() < 1e-10);
    }

    #[test]
    fn rotation_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(pc_rotation_deg(&a, &a).unwrap(), 0.0);
        assert!((pc_rotation_deg(&a, &b).unwrap() - 90.0).abs() <= 1e-9);
        assert_eq!(pc_rotation_deg(&DMatrix::identity(3, 3), &a.clone()), Err(AmbiguousPrincipalAxis));
    }

    #[test]
    fn rotation_ignores_eigenvector_sign() {
        for theta in [0.1_f64, 0.7, 1.3, 2.9] {
            let v = DVector::from_vec(vec![theta.cos(), theta.sin(), 0.3]);
            let s1 = &v * v.transpose() * 3.0 + DMatrix::identity(3, 3) * 0.1;
            let w = -&v;
            let s2 = &w * w.transpose() * 3.0 + DMatrix::identity(3, 3) * 0.1;
            assert!(pc_rotation_deg(&s1, &s2).unwrap() < 1e-6);
        }
    }

    #[test]
    fn trajectory_space_is_zero_for_identical() {
        let params = ProMPParams::standard(crate::BasisConfig::new(4, 2).unwrap());
        assert_eq!(promp_distance(&params, &params, DistanceSpace::Trajectory { grid: 5 }).unwrap(), 0.0);
    }

    fn spd(seed: &[f64], n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    proptest! {
        #[test]
        fn bhattacharyya_is_symmetric(
            xs in proptest::collection::vec(-1.0f64..1.0, 16),
            ys in proptest::collection::vec(-1.0f64..1.0, 16),
            m in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let (s1, s2) = (spd(&xs, 4), spd(&ys, 4));
            let mu1 = DVector::from_row_slice(&m[..4]);
            let mu2 = DVector::from_row_slice(&m[4..]);
            let ab = bhattacharyya_gaussian(&mu1, &s1, &mu2, &s2).unwrap();
            let ba = bhattacharyya_gaussian(&mu2, &s2, &mu1, &s1).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn bhattacharyya_is_affine_invariant(
            xs in proptest::collection::vec(-1.0f64..1.0, 9),
            ys in proptest::collection::vec(-1.0f64..1.0, 9),
            m in proptest::collection::vec(-2.0f64..2.0, 6),
            t in proptest::collection::vec(-0.3f64..0.3, 9),
        ) {
            let (s1, s2) = (spd(&xs, 3), spd(&ys, 3));
            let mu1 = DVector::from_row_slice(&m[..3]);
            let mu2 = DVector::from_row_slice(&m[3..]);
            let map = DMatrix::identity(3, 3) + DMatrix::from_row_slice(3, 3, &t);
            let before = bhattacharyya_gaussian(&mu1, &s1, &mu2, &s2).unwrap();
            let after = bhattacharyya_gaussian(
                &(&map * &mu1), &(&map * &s1 * map.transpose()),
                &(&map * &mu2), &(&map * &s2 * map.transpose()),
            ).unwrap();
            prop_assert!((before - after).abs() < 1e-8);
        }

        #[test]
        fn rotation_in_range_and_scale_free(xs in proptest::collection::vec(-1.0f64..1.0, 16),
                                            ys in proptest::collection::vec(-1.0f64..1.0, 16),
                                            c in 0.01f64..100.0) {
            let (s1, s2) = (spd(&xs, 4), spd(&ys, 4));
            if let Ok(angle) = pc_rotation_deg(&s1, &s2) {
                prop_assert!((0.0..=90.0).contains(&angle));
            }
            if let Ok(angle) = pc_rotation_deg(&s1, &(&s1 * c)) {
                prop_assert!(angle < 1e-5);
            }
        }
    }
}
