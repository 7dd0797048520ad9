//! The ProMP probability model.
//!
//! A trajectory `y_1..y_T` (each `y_t ∈ R^D`) is generated from a weight
//! vector `w ~ N(μ_w, Σ_w)` through `y_t = Φ_t w + ε_t`, `ε_t ~ N(0, Σ_y)`,
//! where `Φ_t` is the block basis matrix at the phase of step `t`.
//!
//! Because `Φ_t` is block diagonal with one shared row per DOF, the sums
//! `Σ_t Φ_tᵀ A Φ_t` collapse to `A ⊗ G` with `G = Σ_t φ_t φ_tᵀ`. The per-demo
//! quantities needed by every E-step are therefore cached once in a
//! [`DemoSummary`].

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, relative_asymmetry, spd_cholesky, spd_inverse, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Affine map of strictly increasing timestamps onto `[0, 1]`.
pub fn normalize_phase(timestamps: &[f64]) -> Result<Vec<f64>> {
    if timestamps.len() < 2 {
        return Err(Error::DegenerateTrajectory(timestamps.len()));
    }
    if let Some(i) = timestamps.iter().position(|t| !t.is_finite()) {
        return Err(Error::Data(format!("non-finite timestamp at index {i}")));
    }
    if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneTime(i + 1));
    }
    let first = timestamps[0];
    let span = timestamps[timestamps.len() - 1] - first;
    let last = timestamps.len() - 1;
    Ok(timestamps
        .iter()
        .enumerate()
        .map(|(i, t)| match i {
            0 => 0.0,
            i if i == last => 1.0,
            _ => ((t - first) / span).clamp(0.0, 1.0),
        })
        .collect())
}

/// One demonstrated trajectory with its normalized phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub timestamps: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub phases: Vec<f64>,
}

impl Demonstration {
    /// Builds a demonstration from raw time stamps, normalizing the phase.
    pub fn new(timestamps: Vec<f64>, states: Vec<DVector<f64>>) -> Result<Self> {
        let phases = normalize_phase(&timestamps)?;
        Self::check_states(&states, timestamps.len())?;
        Ok(Self { timestamps, states, phases })
    }

    /// Builds a demonstration whose time stamps already are phases.
    pub fn from_phases(phases: Vec<f64>, states: Vec<DVector<f64>>) -> Result<Self> {
        let normalized = normalize_phase(&phases)?;
        Self::check_states(&states, phases.len())?;
        Ok(Self { timestamps: phases, states, phases: normalized })
    }

    fn check_states(states: &[DVector<f64>], len: usize) -> Result<()> {
        if states.len() != len {
            return Err(Error::DimensionMismatch { what: "states per timestamp", expected: len, got: states.len() });
        }
        let d = states[0].len();
        if d == 0 {
            return Err(Error::Data("states must have at least one dimension".into()));
        }
        for s in states {
            if s.len() != d {
                return Err(Error::DimensionMismatch { what: "state dimension", expected: d, got: s.len() });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite state value".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State dimension `D`.
    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `T × D` matrix of states.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |t, d| self.states[t][d])
    }
}

/// Learned skill: weight distribution and observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ProMPParams {
    pub basis: BasisConfig,
    pub mu_w: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_y: DMatrix<f64>,
}

impl ProMPParams {
    /// Checks shapes and symmetry (relative tolerance 1e-10) and symmetrizes.
    pub fn new(basis: BasisConfig, mu_w: DVector<f64>, sigma_w: DMatrix<f64>, sigma_y: DMatrix<f64>) -> Result<Self> {
        let kd = basis.dim();
        if mu_w.len() != kd {
            return Err(Error::DimensionMismatch { what: "mu_w", expected: kd, got: mu_w.len() });
        }
        if sigma_w.shape() != (kd, kd) {
            return Err(Error::DimensionMismatch { what: "sigma_w", expected: kd, got: sigma_w.nrows() });
        }
        if sigma_y.shape() != (basis.d, basis.d) {
            return Err(Error::DimensionMismatch { what: "sigma_y", expected: basis.d, got: sigma_y.nrows() });
        }
        for (m, what) in [(&sigma_w, "sigma_w"), (&sigma_y, "sigma_y")] {
            if relative_asymmetry(m) > 1e-10 {
                return Err(Error::Data(format!("{what} is not symmetric")));
            }
        }
        Ok(Self { mu_w, sigma_w: symmetrize(&sigma_w), sigma_y: symmetrize(&sigma_y), basis })
    }

    /// `μ_w = 0`, `Σ_w = I`, `Σ_y = I`.
    pub fn standard(basis: BasisConfig) -> Self {
        let kd = basis.dim();
        let d = basis.d;
        Self { basis, mu_w: DVector::zeros(kd), sigma_w: DMatrix::identity(kd, kd), sigma_y: DMatrix::identity(d, d) }
    }

    /// Mean trajectory value at phase `z`.
    pub fn mean_at(&self, z: f64) -> DVector<f64> {
        self.basis.block_basis(z) * &self.mu_w
    }
}

/// Posterior over the weights of one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sufficient summary of one demonstration under a fixed basis.
#[derive(Debug, Clone)]
pub(crate) struct DemoSummary {
    /// `Σ_t φ_t φ_tᵀ`, `K × K`.
    pub gram: DMatrix<f64>,
    /// `Σ_t φ_t y_tᵀ`, `K × D`.
    pub psi_y: DMatrix<f64>,
    /// `Σ_t y_t y_tᵀ`, `D × D`.
    pub yy: DMatrix<f64>,
    pub len: usize,
}

impl DemoSummary {
    pub fn new(basis: &BasisConfig, demo: &Demonstration) -> Result<Self> {
        check_demo(basis, demo)?;
        let psi = basis.design(&demo.phases);
        let y = demo.state_matrix();
        let psi_t = psi.transpose();
        Ok(Self { gram: &psi_t * &psi, psi_y: &psi_t * &y, yy: y.transpose() * &y, len: demo.len() })
    }

    /// `Σ_t (y_t − Φ_t w)(y_t − Φ_t w)ᵀ` for weights `w`.
    pub fn residual_scatter(&self, w: &DVector<f64>, k: usize) -> DMatrix<f64> {
        let wm = weights_as_matrix(w, k);
        let cross = wm.transpose() * &self.psi_y;
        let quad = wm.transpose() * &self.gram * &wm;
        symmetrize(&(&self.yy - &cross - cross.transpose() + quad))
    }

    /// `Σ_t Φ_t S Φ_tᵀ` for a weight-space matrix `S`.
    pub fn project_cov(&self, s: &DMatrix<f64>, k: usize, d: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let block = s.view((a * k, b * k), (k, k));
                let v = block.component_mul(&self.gram.transpose()).sum();
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }
}

pub(crate) fn check_demo(basis: &BasisConfig, demo: &Demonstration) -> Result<()> {
    if demo.len() < 2 {
        return Err(Error::DegenerateTrajectory(demo.len()));
    }
    if demo.dim() != basis.d {
        return Err(Error::DimensionMismatch { what: "demonstration DOF", expected: basis.d, got: demo.dim() });
    }
    Ok(())
}

/// Reshapes a DOF-major weight vector into a `K × D` matrix.
pub(crate) fn weights_as_matrix(w: &DVector<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(k, w.len() / k, w.as_slice())
}

/// `Σ_y⁻¹ ⊗ G`, i.e. `Σ_t Φ_tᵀ Σ_y⁻¹ Φ_t`.
fn kron_precision(sigma_y_inv: &DMatrix<f64>, gram: &DMatrix<f64>) -> DMatrix<f64> {
    sigma_y_inv.kronecker(gram)
}

/// `Σ_t Φ_tᵀ Σ_y⁻¹ v_t` given `Σ_t φ_t v_tᵀ` (`K × D`).
fn project_data(psi_v: &DMatrix<f64>, sigma_y_inv: &DMatrix<f64>) -> DVector<f64> {
    let m = psi_v * sigma_y_inv;
    DVector::from_column_slice(m.as_slice())
}

/// Precomputed inverses of the current parameters, reused across demos.
pub(crate) struct Precisions {
    pub sigma_w_inv: DMatrix<f64>,
    pub sigma_y_inv: DMatrix<f64>,
    pub prior_term: DVector<f64>,
}

impl Precisions {
    pub fn new(params: &ProMPParams) -> Result<Self> {
        let sigma_w_inv = spd_inverse(&params.sigma_w, "sigma_w")?;
        let sigma_y_inv = spd_inverse(&params.sigma_y, "sigma_y")?;
        let prior_term = &sigma_w_inv * &params.mu_w;
        Ok(Self { sigma_w_inv, sigma_y_inv, prior_term })
    }
}

pub(crate) fn posterior_from_summary(pre: &Precisions, summary: &DemoSummary) -> Result<WeightPosterior> {
    let precision = &pre.sigma_w_inv + kron_precision(&pre.sigma_y_inv, &summary.gram);
    let chol = spd_cholesky(&precision, "weight posterior precision")?;
    let mut cov = chol.inverse();
    crate::linalg::symmetrize_in_place(&mut cov);
    let rhs = &pre.prior_term + project_data(&summary.psi_y, &pre.sigma_y_inv);
    let mean = chol.solve(&rhs);
    Ok(WeightPosterior { mean, cov })
}

/// Conjugate posterior `p(w | demo, θ)`:
/// `cov = (Σ_w⁻¹ + Σ_t Φ_tᵀ Σ_y⁻¹ Φ_t)⁻¹`, `mean = cov (Σ_w⁻¹ μ_w + Σ_t Φ_tᵀ Σ_y⁻¹ y_t)`.
pub fn weight_posterior(params: &ProMPParams, demo: &Demonstration) -> Result<WeightPosterior> {
    let summary = DemoSummary::new(&params.basis, demo)?;
    posterior_from_summary(&Precisions::new(params)?, &summary)
}

/// Mean `Φ_z μ_w` and covariance `Φ_z Σ_w Φ_zᵀ + Σ_y` of the state at phase `z`.
pub fn marginal_at_phase(params: &ProMPParams, z: f64) -> (DVector<f64>, DMatrix<f64>) {
    let phi = params.basis.block_basis(z);
    let mean = &phi * &params.mu_w;
    let cov = symmetrize(&(&phi * &params.sigma_w * phi.transpose() + &params.sigma_y));
    (mean, cov)
}

/// Square-root factor `L` with `L Lᵀ = A` for a PSD matrix, falling back to a
/// clipped eigendecomposition when Cholesky fails (e.g. exactly zero matrices).
fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(a);
    if let Some(c) = nalgebra::Cholesky::new(sym.clone()) {
        return c.l();
    }
    let eig = sym.symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draws one trajectory on an evenly spaced phase grid; deterministic in `seed`.
pub fn sample_trajectory(params: &ProMPParams, num_steps: usize, seed: u64) -> Result<Demonstration> {
    if num_steps < 2 {
        return Err(Error::DegenerateTrajectory(num_steps));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lw = psd_factor(&params.sigma_w);
    let ly = psd_factor(&params.sigma_y);
    let w = &params.mu_w + &lw * standard_normal(&mut rng, params.basis.dim());
    let phases: Vec<f64> = (0..num_steps).map(|i| i as f64 / (num_steps - 1) as f64).collect();
    let states = phases
        .iter()
        .map(|&z| params.basis.block_basis(z) * &w + &ly * standard_normal(&mut rng, params.basis.d))
        .collect();
    Demonstration::from_phases(phases, states)
}

/// `ln p(demos | θ)` with the weights integrated out.
///
/// Uses the determinant lemma and the Woodbury identity on the stacked design
/// so only `KD × KD` systems are factorized.
pub fn marginal_log_likelihood(params: &ProMPParams, demos: &[Demonstration]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::InsufficientDemos { needed: 1, got: 0 });
    }
    let summaries = demos.iter().map(|d| DemoSummary::new(&params.basis, d)).collect::<Result<Vec<_>>>()?;
    log_likelihood_from_summaries(params, &summaries)
}

pub(crate) fn log_likelihood_from_summaries(params: &ProMPParams, summaries: &[DemoSummary]) -> Result<f64> {
    let k = params.basis.k;
    let d = params.basis.d;
    let chol_w = spd_cholesky(&params.sigma_w, "sigma_w")?;
    let chol_y = spd_cholesky(&params.sigma_y, "sigma_y")?;
    let logdet_w = chol_logdet(&chol_w);
    let logdet_y = chol_logdet(&chol_y);
    let mut sigma_w_inv = chol_w.inverse();
    crate::linalg::symmetrize_in_place(&mut sigma_w_inv);
    let mut sigma_y_inv = chol_y.inverse();
    crate::linalg::symmetrize_in_place(&mut sigma_y_inv);
    let mu = weights_as_matrix(&params.mu_w, k);

    let mut total = 0.0;
    for s in summaries {
        let precision = &sigma_w_inv + kron_precision(&sigma_y_inv, &s.gram);
        let chol_p = spd_cholesky(&precision, "marginal likelihood precision")?;
        let scatter = s.residual_scatter(&params.mu_w, k);
        let data_quad = sigma_y_inv.component_mul(&scatter).sum();
        let b = project_data(&(&s.psi_y - &s.gram * &mu), &sigma_y_inv);
        let correction = b.dot(&chol_p.solve(&b));
        let n_obs = (s.len * d) as f64;
        total += -0.5
            * (n_obs * LN_2PI + logdet_w + chol_logdet(&chol_p) + s.len as f64 * logdet_y + data_quad - correction);
    }
    Ok(total)
}
