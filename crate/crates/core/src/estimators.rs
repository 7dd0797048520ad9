//! Batch ProMP estimators: MLE by per-demo ridge regression, MLE by EM and
//! MAP by EM under a normal-inverse-Wishart prior.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::linalg::{block_diagonal, outer, spd_cholesky, strict_solve, symmetrize, symmetrize_in_place};
use crate::model::{
    log_likelihood_from_summaries, posterior_from_summary, DemoSummary, Demonstration, Precisions, ProMPParams,
    WeightPosterior,
};

/// How the NIW scale matrix `S0` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum S0Mode {
    /// Use [`NiwPrior::s0`] as given.
    Explicit,
    /// Recompute `S0 = (v0 + KD + 1) · blockdiag(Σ_w*)` at every M-step, where
    /// blockdiag keeps only the within-DOF `K × K` blocks.
    #[default]
    BlockdiagOfEmpirical,
}

/// Normal-inverse-Wishart hyperparameters for `(μ_w, Σ_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior {
    pub m0: DVector<f64>,
    pub k0: f64,
    pub v0: f64,
    pub s0: DMatrix<f64>,
    pub s0_mode: S0Mode,
}

impl NiwPrior {
    /// `m0 = 0`, `k0 = 0`, `v0 = KD + 1`, `S0 = (v0 + KD + 1) blockdiag(Σ_w*)`.
    pub fn standard(basis: &BasisConfig) -> Self {
        let kd = basis.dim();
        Self {
            m0: DVector::zeros(kd),
            k0: 0.0,
            v0: kd as f64 + 1.0,
            s0: DMatrix::zeros(kd, kd),
            s0_mode: S0Mode::BlockdiagOfEmpirical,
        }
    }

    pub fn validate(&self, basis: &BasisConfig) -> Result<()> {
        let kd = basis.dim();
        if self.m0.len() != kd {
            return Err(Error::InvalidPrior(format!("m0 has length {}, expected {kd}", self.m0.len())));
        }
        if self.s0.shape() != (kd, kd) {
            return Err(Error::InvalidPrior(format!("S0 must be {kd}x{kd}")));
        }
        if !(self.k0 >= 0.0 && self.k0.is_finite()) {
            return Err(Error::InvalidPrior(format!("k0 must be non-negative, got {}", self.k0)));
        }
        if !(self.v0 > kd as f64 - 1.0 && self.v0.is_finite()) {
            return Err(Error::InvalidPrior(format!("v0 must exceed KD - 1 = {}, got {}", kd as f64 - 1.0, self.v0)));
        }
        if crate::linalg::relative_asymmetry(&self.s0) > 1e-9 {
            return Err(Error::InvalidPrior("S0 is not symmetric".into()));
        }
        Ok(())
    }

    /// The scale matrix in effect for an M-step with empirical covariance `sigma_star`.
    pub fn scale_for(&self, sigma_star: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        match self.s0_mode {
            S0Mode::Explicit => self.s0.clone(),
            S0Mode::BlockdiagOfEmpirical => {
                let kd = sigma_star.nrows() as f64;
                block_diagonal(sigma_star, k) * (self.v0 + kd + 1.0)
            }
        }
    }

    /// Unnormalized `ln p(μ, Σ)`; the constant depends only on the hyperparameters.
    pub fn log_density(&self, mu: &DVector<f64>, sigma: &DMatrix<f64>, s0: &DMatrix<f64>) -> Result<f64> {
        let kd = mu.len() as f64;
        let chol = spd_cholesky(sigma, "sigma_w")?;
        let logdet = crate::linalg::chol_logdet(&chol);
        let trace_term = chol.solve(s0).trace();
        let diff = mu - &self.m0;
        let mean_term = self.k0 * diff.dot(&chol.solve(&diff));
        Ok(-0.5 * ((self.v0 + kd + 2.0) * logdet + trace_term + mean_term))
    }
}

/// `(k0 m0 + n μ*) / (n + k0)`; exactly `μ*` when `k0 = 0`.
pub fn prior_blend(prior: &NiwPrior, n: f64, mu_star: &DVector<f64>) -> DVector<f64> {
    if prior.k0 == 0.0 {
        return mu_star.clone();
    }
    (&prior.m0 * prior.k0 + mu_star * n) / (n + prior.k0)
}

/// Result of a NIW MAP M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MapUpdate {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `S0` as used by this step.
    pub s0: DMatrix<f64>,
}

/// NIW MAP update from the maximum-likelihood quantities `(μ*, Σ*)` of `n` samples:
///
/// `μ = (k0 m0 + n μ*) / (n + k0)`,
/// `Σ = [S0 + n Σ* + k0 n / (k0 + n) (μ* − m0)(μ* − m0)ᵀ] / (n + v0 + KD + 2)`.
///
/// The prior is not validated here.
pub fn niw_map_update(
    prior: &NiwPrior,
    n: f64,
    mu_star: &DVector<f64>,
    sigma_star: &DMatrix<f64>,
    k: usize,
) -> Result<MapUpdate> {
    let kd = mu_star.len() as f64;
    if !(n + prior.k0 > 0.0) {
        return Err(Error::InvalidPrior(format!("k0 + N must be positive, got {}", n + prior.k0)));
    }
    let denom = n + prior.v0 + kd + 2.0;
    if !(denom > 0.0) {
        return Err(Error::InvalidPrior(format!("N + v0 + KD + 2 must be positive, got {denom}")));
    }
    let mu = prior_blend(prior, n, mu_star);
    let s0 = prior.scale_for(sigma_star, k);
    let shift = mu_star - &prior.m0;
    let mut sigma = (&s0 + sigma_star * n + outer(&shift) * (prior.k0 * n / (prior.k0 + n))) / denom;
    symmetrize_in_place(&mut sigma);
    Ok(MapUpdate { mu, sigma, s0 })
}

/// Output of a batch fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFitReport {
    pub params: ProMPParams,
    pub iterations: usize,
    /// Objective after each iteration: the marginal log-likelihood, plus the
    /// log prior density for MAP fits.
    pub log_likelihood_trace: Vec<f64>,
}

/// Starting point of the EM fits.
#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    Ridge { lambda: f64 },
    Params(ProMPParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub iterations: usize,
    /// Stop early once the relative objective change drops below this.
    pub tolerance: Option<f64>,
    /// Re-estimate `Σ_y` in every M-step; otherwise keep the initial value.
    pub update_sigma_y: bool,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { iterations: 5, tolerance: None, update_sigma_y: true, init: EmInit::Ridge { lambda: 1e-12 } }
    }
}

impl EmConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }
}

fn summarize(demos: &[Demonstration], basis: &BasisConfig) -> Result<Vec<DemoSummary>> {
    if demos.len() < 2 {
        return Err(Error::InsufficientDemos { needed: 2, got: demos.len() });
    }
    let mut summaries = demos.iter().map(|d| DemoSummary::new(basis, d)).collect::<Result<Vec<_>>>()?;
    // Canonical order so every reduction is independent of the input order.
    summaries.sort_by(|a, b| {
        lexicographic(a.psi_y.as_slice(), b.psi_y.as_slice())
            .then_with(|| lexicographic(a.yy.as_slice(), b.yy.as_slice()))
            .then_with(|| lexicographic(a.gram.as_slice(), b.gram.as_slice()))
            .then_with(|| a.len.cmp(&b.len))
    });
    Ok(summaries)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// MLE by ridge regression on each demonstration's stacked design:
/// `w_n = (Φ_nᵀ Φ_n + λ I)⁻¹ Φ_nᵀ y_n`, then the sample mean and covariance
/// (denominator N) of the `w_n`, and the pooled residual covariance.
///
/// The reduction runs in a canonical order of the demonstrations, so the
/// output does not depend on the order of `demos`.
pub fn fit_ridge(demos: &[Demonstration], basis: &BasisConfig, lambda: f64) -> Result<BatchFitReport> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge parameter must be non-negative, got {lambda}")));
    }
    let summaries = summarize(demos, basis)?;
    let k = basis.k;
    let regularizer = DMatrix::identity(k, k) * lambda;

    let mut per_demo = Vec::with_capacity(summaries.len());
    for s in &summaries {
        let wm = strict_solve(&(&s.gram + &regularizer), &s.psi_y, "ridge normal equations")?;
        let w = DVector::from_column_slice(wm.as_slice());
        let scatter = s.residual_scatter(&w, k);
        per_demo.push((w, scatter, s.len));
    }

    let n = per_demo.len() as f64;
    let kd = basis.dim();
    let mut mu = DVector::zeros(kd);
    for (w, _, _) in &per_demo {
        mu += w;
    }
    mu /= n;
    let mut sigma_w = DMatrix::zeros(kd, kd);
    let mut sigma_y = DMatrix::zeros(basis.d, basis.d);
    let mut steps = 0usize;
    for (w, scatter, len) in &per_demo {
        sigma_w += outer(&(w - &mu));
        sigma_y += scatter;
        steps += len;
    }
    sigma_w /= n;
    sigma_y /= steps as f64;
    symmetrize_in_place(&mut sigma_w);
    symmetrize_in_place(&mut sigma_y);

    let params = ProMPParams { basis: basis.clone(), mu_w: mu, sigma_w, sigma_y };
    let log_likelihood_trace = log_likelihood_from_summaries(&params, &summaries).into_iter().collect();
    Ok(BatchFitReport { params, iterations: 1, log_likelihood_trace })
}

/// Expected statistics of one E-step over the whole data set.
struct EStep {
    mu_star: DVector<f64>,
    sigma_star: DMatrix<f64>,
    sigma_y: DMatrix<f64>,
}

fn e_step(params: &ProMPParams, summaries: &[DemoSummary]) -> Result<EStep> {
    let k = params.basis.k;
    let d = params.basis.d;
    let kd = params.basis.dim();
    let pre = Precisions::new(params)?;
    let posteriors =
        summaries.iter().map(|s| posterior_from_summary(&pre, s)).collect::<Result<Vec<WeightPosterior>>>()?;

    let n = summaries.len() as f64;
    let mut mu_star = DVector::zeros(kd);
    for p in &posteriors {
        mu_star += &p.mean;
    }
    mu_star /= n;

    let mut sigma_star = DMatrix::zeros(kd, kd);
    let mut sigma_y = DMatrix::zeros(d, d);
    let mut steps = 0usize;
    for (p, s) in posteriors.iter().zip(summaries) {
        sigma_star += &p.cov + outer(&(&p.mean - &mu_star));
        sigma_y += s.residual_scatter(&p.mean, k) + s.project_cov(&p.cov, k, d);
        steps += s.len;
    }
    sigma_star /= n;
    sigma_y /= steps as f64;
    symmetrize_in_place(&mut sigma_star);
    symmetrize_in_place(&mut sigma_y);
    Ok(EStep { mu_star, sigma_star, sigma_y })
}

fn fit_em(
    demos: &[Demonstration],
    basis: &BasisConfig,
    config: &EmConfig,
    prior: Option<&NiwPrior>,
) -> Result<BatchFitReport> {
    if config.iterations == 0 {
        return Err(Error::Config("EM needs at least one iteration".into()));
    }
    if let Some(p) = prior {
        p.validate(basis)?;
    }
    let summaries = summarize(demos, basis)?;
    let mut params = match &config.init {
        EmInit::Ridge { lambda } => fit_ridge(demos, basis, *lambda)?.params,
        EmInit::Params(p) => {
            if &p.basis != basis {
                return Err(Error::Config("initial parameters use a different basis".into()));
            }
            p.clone()
        }
    };
    let n = summaries.len() as f64;
    let mut trace: Vec<f64> = Vec::with_capacity(config.iterations);
    let mut iterations = 0;
    for _ in 0..config.iterations {
        let stats = e_step(&params, &summaries)?;
        let (mu, sigma, s0) = match prior {
            Some(prior) => {
                let up = niw_map_update(prior, n, &stats.mu_star, &stats.sigma_star, basis.k)?;
                (up.mu, up.sigma, Some(up.s0))
            }
            None => (stats.mu_star, stats.sigma_star, None),
        };
        params.mu_w = mu;
        params.sigma_w = sigma;
        if config.update_sigma_y {
            params.sigma_y = stats.sigma_y;
        }
        let mut objective = log_likelihood_from_summaries(&params, &summaries)?;
        if let (Some(prior), Some(s0)) = (prior, s0.as_ref()) {
            objective += prior.log_density(&params.mu_w, &params.sigma_w, s0)?;
        }
        iterations += 1;
        let converged = match (config.tolerance, trace.last()) {
            (Some(tol), Some(prev)) => ((objective - prev) / prev.abs().max(1e-300)).abs() < tol,
            _ => false,
        };
        trace.push(objective);
        if converged {
            break;
        }
    }
    params.sigma_w = symmetrize(&params.sigma_w);
    Ok(BatchFitReport { params, iterations, log_likelihood_trace: trace })
}

/// Maximum-likelihood EM with latent per-demo weights.
pub fn fit_em_mle(demos: &[Demonstration], basis: &BasisConfig, config: &EmConfig) -> Result<BatchFitReport> {
    fit_em(demos, basis, config, None)
}

/// MAP EM: the E-step of [`fit_em_mle`] followed by the NIW M-step.
pub fn fit_em_map(
    demos: &[Demonstration],
    basis: &BasisConfig,
    config: &EmConfig,
    prior: &NiwPrior,
) -> Result<BatchFitReport> {
    fit_em(demos, basis, config, Some(prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_trajectory;

    fn scalar_demo(y: f64) -> Demonstration {
        Demonstration::new(vec![0.0, 1.0], vec![DVector::from_element(1, y); 2]).unwrap()
    }

    #[test]
    fn ridge_needs_two_demos() {
        let basis = BasisConfig::new(1, 1).unwrap();
        assert_eq!(
            fit_ridge(&[scalar_demo(2.0)], &basis, 0.0).unwrap_err(),
            Error::InsufficientDemos { needed: 2, got: 1 }
        );
    }

    #[test]
    fn ridge_shrinks_by_lambda() {
        // Two identical samples y = 2 give ΦᵀΦ = 2, Φᵀy = 4; with λ = 2 the
        // weight is 4 / 4 = 1, i.e. the single-sample (1 + 1)⁻¹·2.
        let basis = BasisConfig::new(1, 1).unwrap();
        let fit = fit_ridge(&[scalar_demo(2.0), scalar_demo(2.0)], &basis, 2.0).unwrap();
        assert!((fit.params.mu_w[0] - 1.0).abs() < 1e-15);
        assert_eq!(fit.params.sigma_w[(0, 0)], 0.0);
    }

    #[test]
    fn ridge_singular_without_regularization() {
        // K = 3 bases but every sample at the same phase cannot pin the weights.
        let basis = BasisConfig::new(3, 1).unwrap();
        let demo = Demonstration {
            timestamps: vec![0.0, 1.0],
            phases: vec![0.5, 0.5],
            states: vec![DVector::from_element(1, 1.0); 2],
        };
        assert!(matches!(fit_ridge(&[demo.clone(), demo], &basis, 0.0), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn map_with_zero_k0_keeps_mle_mean() {
        let basis = BasisConfig::new(3, 2).unwrap();
        let prior = NiwPrior::standard(&basis);
        let mu_star = DVector::from_fn(6, |i, _| i as f64);
        let sigma_star = DMatrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { 0.1 });
        let up = niw_map_update(&prior, 10.0, &mu_star, &sigma_star, 3).unwrap();
        assert_eq!(up.mu, mu_star);
        // S0 = (v0 + KD + 1) blockdiag(Σ*) = 14 blockdiag(Σ*); denominator 10 + 7 + 6 + 2.
        let want = (block_diagonal(&sigma_star, 3) * 14.0 + &sigma_star * 10.0) / 25.0;
        assert!((up.sigma - want).abs().max() < 1e-14);
    }

    #[test]
    fn degenerate_prior_reduces_to_mle_at_formula_level() {
        let basis = BasisConfig::new(2, 1).unwrap();
        let kd = 2.0;
        let prior = NiwPrior {
            m0: DVector::zeros(2),
            k0: 0.0,
            v0: -(kd + 2.0),
            s0: DMatrix::zeros(2, 2),
            s0_mode: S0Mode::Explicit,
        };
        assert!(matches!(prior.validate(&basis), Err(Error::InvalidPrior(_))));
        let mu_star = DVector::from_vec(vec![0.3, -1.0]);
        let sigma_star = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7]);
        let up = niw_map_update(&prior, 7.0, &mu_star, &sigma_star, 2).unwrap();
        assert!((up.sigma - &sigma_star).abs().max() < 1e-15);
        assert_eq!(up.mu, mu_star);
    }

    #[test]
    fn zero_effective_count_is_invalid() {
        let basis = BasisConfig::new(2, 1).unwrap();
        let prior = NiwPrior::standard(&basis);
        let err = niw_map_update(&prior, 0.0, &DVector::zeros(2), &DMatrix::identity(2, 2), 2).unwrap_err();
        assert!(matches!(err, Error::InvalidPrior(_)));
    }

    #[test]
    fn positive_k0_pulls_toward_m0() {
        let basis = BasisConfig::new(1, 1).unwrap();
        let prior = NiwPrior {
            m0: DVector::from_element(1, 10.0),
            k0: 2.0,
            v0: 1.0,
            s0: DMatrix::identity(1, 1),
            s0_mode: S0Mode::Explicit,
        };
        prior.validate(&basis).unwrap();
        let up = niw_map_update(&prior, 8.0, &DVector::zeros(1), &DMatrix::identity(1, 1), 1).unwrap();
        assert!((up.mu[0] - 2.0).abs() < 1e-15);
        // [1 + 8 + 2*8/10 * 100] / (8 + 1 + 1 + 2)
        assert!((up.sigma[(0, 0)] - 169.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn em_rejects_zero_iterations() {
        let basis = BasisConfig::new(2, 1).unwrap();
        let params = ProMPParams::standard(basis.clone());
        let demos: Vec<_> = (0..3).map(|s| sample_trajectory(&params, 10, s).unwrap()).collect();
        assert!(fit_em_mle(&demos, &basis, &EmConfig::with_iterations(0)).is_err());
    }
}
