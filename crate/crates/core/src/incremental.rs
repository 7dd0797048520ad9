//! Stepwise EM for ProMPs with a decaying step size acting as forgetting
//! factor.
//!
//! Each demonstration is visited once. Its expected sufficient statistics
//! `u' = (E[w], E[wwᵀ], E[Σ_t (y_t − Φ_t w)(y_t − Φ_t w)ᵀ])` under the current
//! parameters are blended into the running statistics with weight
//! `δ_N = max((N + 1)^-β, δ_min)`, after which a NIW MAP M-step produces new
//! parameters. The state has a fixed size regardless of how many
//! demonstrations were consumed.
//!
//! Two counters are kept apart on purpose: `eta` is the δ-interpolated
//! normalizer of the statistics (`u1 / eta` is the ML mean) while `n` is the
//! integer update counter used as sample size in the prior blend.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::estimators::{niw_map_update, prior_blend, NiwPrior};
use crate::linalg::{outer, symmetrize_in_place};
use crate::model::{check_demo, posterior_from_summary, DemoSummary, Demonstration, Precisions, ProMPParams};

/// `max((n + 1)^-β, δ_min)`.
pub fn step_size(n: u64, beta: f64, delta_min: f64) -> f64 {
    ((n as f64) + 1.0).powf(-beta).max(delta_min)
}

/// `(1 − δ) · old + δ · new`, the interpolation applied to every statistic.
#[inline]
pub fn interpolate(old: f64, new: f64, delta: f64) -> f64 {
    (1.0 - delta) * old + delta * new
}

fn interpolate_matrix(old: &mut DMatrix<f64>, new: &DMatrix<f64>, delta: f64) {
    old.zip_apply(new, |o, n| *o = interpolate(*o, n, delta));
}

fn interpolate_vector(old: &mut DVector<f64>, new: &DVector<f64>, delta: f64) {
    old.zip_apply(new, |o, n| *o = interpolate(*o, n, delta));
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseConfig {
    /// Step-size reduction power, `0.5 < β ≤ 1`.
    pub beta: f64,
    pub prior: NiwPrior,
    pub init_mu: DVector<f64>,
    pub init_sigma_w: DMatrix<f64>,
    pub init_sigma_y: DMatrix<f64>,
    pub minibatch_size: usize,
    /// Floor on the step size; 0 reproduces the pure power law.
    pub delta_min: f64,
    /// Compute `Σ_w* = u2/η − μ* μ*ᵀ` instead of using the prior-blended mean.
    /// Only observable when `k0 > 0`.
    pub sigma_star_uses_mle_mean: bool,
}

impl StepwiseConfig {
    /// Default prior, `μ_w = 0`, `Σ_w = I`, `Σ_y = I`.
    pub fn new(basis: &BasisConfig, beta: f64) -> Self {
        let kd = basis.dim();
        Self {
            beta,
            prior: NiwPrior::standard(basis),
            init_mu: DVector::zeros(kd),
            init_sigma_w: DMatrix::identity(kd, kd),
            init_sigma_y: DMatrix::identity(basis.d, basis.d),
            minibatch_size: 1,
            delta_min: 0.0,
            sigma_star_uses_mle_mean: false,
        }
    }

    pub fn with_delta_min(mut self, delta_min: f64) -> Self {
        self.delta_min = delta_min;
        self
    }

    pub fn validate(&self, basis: &BasisConfig) -> Result<()> {
        if !(self.beta > 0.5 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0.5, 1], got {}", self.beta)));
        }
        if !(self.delta_min >= 0.0 && self.delta_min < 1.0) {
            return Err(Error::Config(format!("delta_min must lie in [0, 1), got {}", self.delta_min)));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be at least 1".into()));
        }
        self.prior.validate(basis)?;
        ProMPParams::new(basis.clone(), self.init_mu.clone(), self.init_sigma_w.clone(), self.init_sigma_y.clone())
            .map_err(|e| Error::Config(format!("initial parameters: {e}")))?;
        Ok(())
    }
}

/// Telemetry returned by every update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePayload {
    /// Posterior mean of the consumed demonstration (averaged for mini-batches).
    pub w_bar: DVector<f64>,
    /// Step size applied in this update.
    pub delta_used: f64,
    /// Update counter after the post-increment.
    pub n: u64,
}

/// Accumulated statistics and current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseState {
    pub u1: DVector<f64>,
    pub u2: DMatrix<f64>,
    pub u3: DMatrix<f64>,
    pub eta: f64,
    pub t_eff: f64,
    /// Starts at 1 and advances once per update.
    pub n: u64,
    /// Step size for the next update.
    pub delta: f64,
    pub params: ProMPParams,
}

/// Expected sufficient statistics of one demo or the average over a batch.
struct Ess {
    u1: DVector<f64>,
    u2: DMatrix<f64>,
    u3: DMatrix<f64>,
    len: f64,
}

fn expected_statistics(params: &ProMPParams, demos: &[&Demonstration]) -> Result<Ess> {
    let basis = &params.basis;
    let (k, d, kd) = (basis.k, basis.d, basis.dim());
    for demo in demos {
        check_demo(basis, demo)?;
    }
    let pre = Precisions::new(params)?;
    let mut ess = Ess { u1: DVector::zeros(kd), u2: DMatrix::zeros(kd, kd), u3: DMatrix::zeros(d, d), len: 0.0 };
    for demo in demos {
        let summary = DemoSummary::new(basis, demo)?;
        let post = posterior_from_summary(&pre, &summary)?;
        ess.u2 += outer(&post.mean) + &post.cov;
        ess.u3 += summary.residual_scatter(&post.mean, k) + summary.project_cov(&post.cov, k, d);
        ess.u1 += post.mean;
        ess.len += summary.len as f64;
    }
    if demos.len() > 1 {
        let m = demos.len() as f64;
        ess.u1 /= m;
        ess.u2 /= m;
        ess.u3 /= m;
        ess.len /= m;
    }
    Ok(ess)
}

impl StepwiseState {
    /// `u = 0`, `η = 0`, `T = 0`, `N = 1`, `δ = step_size(1)`.
    pub fn init(config: &StepwiseConfig, basis: BasisConfig) -> Result<Self> {
        config.validate(&basis)?;
        let (kd, d) = (basis.dim(), basis.d);
        let params =
            ProMPParams::new(basis, config.init_mu.clone(), config.init_sigma_w.clone(), config.init_sigma_y.clone())?;
        Ok(Self {
            u1: DVector::zeros(kd),
            u2: DMatrix::zeros(kd, kd),
            u3: DMatrix::zeros(d, d),
            eta: 0.0,
            t_eff: 0.0,
            n: 1,
            delta: step_size(1, config.beta, config.delta_min),
            params,
        })
    }

    /// One E-step, interpolation and M-step on a single demonstration.
    ///
    /// On error the state is left untouched.
    pub fn add_demonstration(&mut self, config: &StepwiseConfig, demo: &Demonstration) -> Result<UpdatePayload> {
        self.update(config, &[demo])
    }

    /// Like [`add_demonstration`](Self::add_demonstration) with the statistics
    /// averaged over `demos`; the counter advances once.
    pub fn add_minibatch(&mut self, config: &StepwiseConfig, demos: &[Demonstration]) -> Result<UpdatePayload> {
        if demos.is_empty() {
            return Err(Error::InvalidCount("mini-batch must contain at least one demonstration".into()));
        }
        let refs: Vec<&Demonstration> = demos.iter().collect();
        self.update(config, &refs)
    }

    fn update(&mut self, config: &StepwiseConfig, demos: &[&Demonstration]) -> Result<UpdatePayload> {
        let ess = expected_statistics(&self.params, demos)?;
        let mut next = self.clone();
        let delta = self.delta;

        interpolate_vector(&mut next.u1, &ess.u1, delta);
        interpolate_matrix(&mut next.u2, &ess.u2, delta);
        interpolate_matrix(&mut next.u3, &ess.u3, delta);
        symmetrize_in_place(&mut next.u2);
        symmetrize_in_place(&mut next.u3);
        next.eta = interpolate(self.eta, 1.0, delta);
        next.t_eff = interpolate(self.t_eff, ess.len, delta);

        next.params = m_step(&next, config)?;
        next.n += 1;
        next.delta = step_size(next.n, config.beta, config.delta_min);

        *self = next;
        Ok(UpdatePayload { w_bar: ess.u1, delta_used: delta, n: self.n })
    }

    /// Recomputes the pending step size after a change of `beta` or `delta_min`.
    pub fn reschedule(&mut self, config: &StepwiseConfig) {
        self.delta = step_size(self.n, config.beta, config.delta_min);
    }

    /// Fixed-size little-endian encoding of the whole state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let basis = &self.params.basis;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(basis.k as u64).to_le_bytes());
        out.extend_from_slice(&(basis.d as u64).to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        put(basis.width);
        basis.centers.iter().for_each(|c| put(*c));
        put(self.eta);
        put(self.t_eff);
        put(self.delta);
        for slice in [
            self.u1.as_slice(),
            self.u2.as_slice(),
            self.u3.as_slice(),
            self.params.mu_w.as_slice(),
            self.params.sigma_w.as_slice(),
            self.params.sigma_y.as_slice(),
        ] {
            slice.iter().for_each(|v| put(*v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a stepwise state".into()));
        }
        let k = reader.u64()? as usize;
        let d = reader.u64()? as usize;
        if k == 0 || d == 0 || k.saturating_mul(d) > 1 << 16 {
            return Err(Error::Data(format!("implausible basis size k={k}, d={d}")));
        }
        let n = reader.u64()?;
        let width = reader.f64()?;
        let centers = reader.f64s(k)?;
        let basis = BasisConfig::from_parts(k, d, centers, width)?;
        let kd = k * d;
        let eta = reader.f64()?;
        let t_eff = reader.f64()?;
        let delta = reader.f64()?;
        let u1 = DVector::from_vec(reader.f64s(kd)?);
        let u2 = DMatrix::from_vec(kd, kd, reader.f64s(kd * kd)?);
        let u3 = DMatrix::from_vec(d, d, reader.f64s(d * d)?);
        let mu_w = DVector::from_vec(reader.f64s(kd)?);
        let sigma_w = DMatrix::from_vec(kd, kd, reader.f64s(kd * kd)?);
        let sigma_y = DMatrix::from_vec(d, d, reader.f64s(d * d)?);
        if reader.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after stepwise state".into()));
        }
        Ok(Self { u1, u2, u3, eta, t_eff, n, delta, params: ProMPParams { basis, mu_w, sigma_w, sigma_y } })
    }
}

const MAGIC: &[u8] = b"SEMPROMP1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated stepwise state".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// MAP M-step from interpolated statistics, using the counter `n` before increment.
fn m_step(state: &StepwiseState, config: &StepwiseConfig) -> Result<ProMPParams> {
    let basis = &state.params.basis;
    let prior = &config.prior;
    let n = state.n as f64;
    let mu_star = &state.u1 / state.eta;
    let mu = prior_blend(prior, n, &mu_star);
    let centered_on = if config.sigma_star_uses_mle_mean { &mu_star } else { &mu };
    let mut sigma_star = &state.u2 / state.eta - outer(centered_on);
    symmetrize_in_place(&mut sigma_star);
    let update = niw_map_update(prior, n, &mu_star, &sigma_star, basis.k)?;
    let mut sigma_y = &state.u3 / state.t_eff;
    symmetrize_in_place(&mut sigma_y);
    Ok(ProMPParams { basis: basis.clone(), mu_w: update.mu, sigma_w: update.sigma, sigma_y })
}

/// Streams `demos` through the learner `passes` times without resetting.
/// With `minibatch_size > 1` consecutive chunks form one update each.
pub fn run_passes(
    demos: &[Demonstration],
    config: &StepwiseConfig,
    basis: &BasisConfig,
    passes: usize,
) -> Result<ProMPParams> {
    Ok(run_passes_state(demos, config, basis, passes)?.params)
}

/// As [`run_passes`] but returns the whole state.
pub fn run_passes_state(
    demos: &[Demonstration],
    config: &StepwiseConfig,
    basis: &BasisConfig,
    passes: usize,
) -> Result<StepwiseState> {
    if passes == 0 {
        return Err(Error::Config("passes must be at least 1".into()));
    }
    let mut state = StepwiseState::init(config, basis.clone())?;
    for _ in 0..passes {
        if config.minibatch_size == 1 {
            for demo in demos {
                state.add_demonstration(config, demo)?;
            }
        } else {
            for chunk in demos.chunks(config.minibatch_size) {
                state.add_minibatch(config, chunk)?;
            }
        }
    }
    Ok(state)
}
