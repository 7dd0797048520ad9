//! Normalized Gaussian basis functions over the phase variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basis layout shared by every DOF: `k` evenly spaced centers on `[0, 1]`
/// with a common Gaussian bandwidth `width` (in phase² units).
///
/// Weight vectors are `k * d` long and stored DOF-major: entries
/// `[d*k, (d+1)*k)` belong to DOF `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub k: usize,
    pub d: usize,
    pub centers: Vec<f64>,
    pub width: f64,
}

impl BasisConfig {
    /// Default layout with overlap factor 1.
    pub fn new(k: usize, d: usize) -> Result<Self> {
        Self::with_overlap(k, d, 1.0)
    }

    /// Centers at `(i-1)/(k-1)` (a single center sits at 0.5) and bandwidth
    /// `h = spacing² / 2 * overlap`.
    pub fn with_overlap(k: usize, d: usize, overlap: f64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("basis needs k >= 1 and d >= 1, got k={k}, d={d}")));
        }
        if !(overlap > 0.0 && overlap.is_finite()) {
            return Err(Error::Config(format!("overlap factor must be positive, got {overlap}")));
        }
        let (centers, width) = if k == 1 {
            // A single normalized basis function is identically 1; the width is irrelevant.
            (vec![0.5], overlap)
        } else {
            let spacing = 1.0 / (k - 1) as f64;
            let centers = (0..k).map(|i| i as f64 * spacing).collect();
            (centers, spacing * spacing / 2.0 * overlap)
        };
        Ok(Self { k, d, centers, width })
    }

    /// Rebuilds a config from stored parts, checking its invariants.
    pub fn from_parts(k: usize, d: usize, centers: Vec<f64>, width: f64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("basis needs k >= 1 and d >= 1, got k={k}, d={d}")));
        }
        if centers.len() != k {
            return Err(Error::DimensionMismatch { what: "basis centers", expected: k, got: centers.len() });
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Config(format!("basis width must be positive, got {width}")));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("basis centers must be strictly increasing".into()));
        }
        if k > 2 {
            let spacing = centers[1] - centers[0];
            if centers.windows(2).any(|w| ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing.max(1.0)) {
                return Err(Error::Config("basis centers must be evenly spaced".into()));
            }
        }
        Ok(Self { k, d, centers, width })
    }

    /// Length of a weight vector, `k * d`.
    pub fn dim(&self) -> usize {
        self.k * self.d
    }

    /// Normalized basis values at phase `z` (clamped to `[0, 1]`).
    pub fn basis_row(&self, z: f64) -> DVector<f64> {
        let z = z.clamp(0.0, 1.0);
        let sq: Vec<f64> = self.centers.iter().map(|c| (z - c) * (z - c)).collect();
        // Shift by the nearest center so the largest exponent is 0.
        let nearest = sq.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut row = DVector::from_iterator(self.k, sq.iter().map(|s| (-(s - nearest) / (2.0 * self.width)).exp()));
        let total = row.sum();
        row /= total;
        row
    }

    /// Block-diagonal `d × k·d` basis matrix at phase `z`.
    pub fn block_basis(&self, z: f64) -> DMatrix<f64> {
        let row = self.basis_row(z);
        let mut phi = DMatrix::zeros(self.d, self.dim());
        for dof in 0..self.d {
            for j in 0..self.k {
                phi[(dof, dof * self.k + j)] = row[j];
            }
        }
        phi
    }

    /// `T × k` matrix whose rows are the basis rows at each phase.
    pub fn design(&self, phases: &[f64]) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(phases.len(), self.k);
        for (t, &z) in phases.iter().enumerate() {
            psi.set_row(t, &self.basis_row(z).transpose());
        }
        psi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_basis_is_one() {
        let cfg = BasisConfig::new(1, 1).unwrap();
        for z in [0.0, 0.2, 0.77, 1.0] {
            assert_eq!(cfg.basis_row(z).as_slice(), &[1.0]);
        }
    }

    #[test]
    fn two_bases_symmetric_at_midpoint() {
        let cfg = BasisConfig::new(2, 1).unwrap();
        assert_eq!(cfg.centers, vec![0.0, 1.0]);
        let row = cfg.basis_row(0.5);
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] - 0.5).abs() < 1e-15);
    }

    // Frozen from a 50-digit evaluation of exp(-(z-c_k)^2/(2h)), normalized,
    // for K=10, c_k=(k-1)/9, h=(1/9)^2/2, z=0.3.
    const K10_Z03: [f64; 10] = [
        3.84974932600377028e-04,
        3.13565426745382667e-02,
        3.45648700588550628e-01,
        5.15647268245612467e-01,
        1.04107387972245211e-01,
        2.84460137366623206e-03,
        1.05189482075378628e-05,
        5.26422270874986593e-09,
        3.56539152670088659e-13,
        3.26806915478141568e-18,
    ];

    #[test]
    fn k10_row_matches_high_precision_values() {
        let cfg = BasisConfig::new(10, 1).unwrap();
        let row = cfg.basis_row(0.3);
        for (got, want) in row.iter().zip(K10_Z03.iter()) {
            assert!((got - want).abs() <= 1e-15 + 1e-12 * want, "{got} vs {want}");
        }
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_basis_layout() {
        let cfg = BasisConfig::new(3, 2).unwrap();
        let phi = cfg.block_basis(0.4);
        assert_eq!(phi.shape(), (2, 6));
        let row = cfg.basis_row(0.4);
        for j in 0..3 {
            assert_eq!(phi[(0, j)], row[j]);
            assert_eq!(phi[(1, 3 + j)], row[j]);
            assert_eq!(phi[(0, 3 + j)], 0.0);
            assert_eq!(phi[(1, j)], 0.0);
        }
        let one = BasisConfig::new(4, 1).unwrap();
        assert_eq!(one.block_basis(0.3).row(0).transpose(), one.basis_row(0.3));
    }

    #[test]
    fn block_basis_d3_k10_rows_are_shifted_rows() {
        let cfg = BasisConfig::new(10, 3).unwrap();
        let phi = cfg.block_basis(0.3);
        for dof in 0..3 {
            for j in 0..30 {
                let want = if j / 10 == dof { K10_Z03[j % 10] } else { 0.0 };
                assert!((phi[(dof, j)] - want).abs() <= 1e-15 + 1e-12 * want);
            }
        }
    }

    #[test]
    fn out_of_range_phase_is_clamped() {
        let cfg = BasisConfig::new(5, 1).unwrap();
        assert_eq!(cfg.basis_row(-0.1), cfg.basis_row(0.0));
        assert_eq!(cfg.basis_row(1.3), cfg.basis_row(1.0));
    }

    #[test]
    fn from_parts_rejects_uneven_centers() {
        assert!(BasisConfig::from_parts(3, 1, vec![0.0, 0.2, 1.0], 0.1).is_err());
        assert!(BasisConfig::from_parts(3, 1, vec![0.0, 0.5, 1.0], 0.0).is_err());
        assert!(BasisConfig::from_parts(3, 1, vec![0.0, 0.5, 1.0], 0.1).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rows_are_a_partition_of_unity(z in 0.0f64..=1.0, idx in 0usize..5) {
            let k = [1usize, 2, 5, 10, 30][idx];
            let cfg = BasisConfig::new(k, 1).unwrap();
            let row = cfg.basis_row(z);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
