//! Synthetic reference ProMPs, sampled data sets and the three evaluation
//! pipelines (algorithm comparison, incremental progress, task-shift
//! adaptation).
//!
//! Seed trajectories imitate a pick-and-place motion: a minimum-jerk profile
//! from a start point to an end point, bent through a via point at mid phase
//! that every trajectory passes tightly, while the end point spreads widely.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::estimators::{fit_em_map, fit_em_mle, fit_ridge, EmConfig, NiwPrior};
use crate::incremental::{run_passes, StepwiseConfig, StepwiseState};
use crate::linalg::{outer, spd_cholesky};
use crate::metrics::{log10_condition_number, promp_distance, DistanceSpace, MetricReport};
use crate::model::{sample_trajectory, Demonstration, ProMPParams};

/// Nominal geometry of the seed trajectories and their per-trajectory jitter
/// (standard deviations, state units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGeometry {
    pub start: Vec<f64>,
    pub via: Vec<f64>,
    pub end: Vec<f64>,
    pub start_jitter: Vec<f64>,
    pub via_jitter: Vec<f64>,
    pub end_jitter: Vec<f64>,
    /// Amplitude of smooth random deviations away from the via point.
    pub wobble: f64,
    /// Independent deviation of every sample; gives the weight covariance
    /// full rank.
    pub sample_noise: f64,
    /// Nominal duration in seconds and its uniform half-range.
    pub duration: f64,
    pub duration_jitter: f64,
}

impl SeedGeometry {
    /// Pick-and-place layout in meters; DOFs beyond three repeat the pattern.
    pub fn pick_and_place(d: usize) -> Self {
        let pick = |v: [f64; 3]| (0..d).map(|i| v[i % 3]).collect::<Vec<_>>();
        Self {
            start: pick([0.45, 0.35, 0.20]),
            via: pick([0.60, 0.00, 0.45]),
            end: pick([0.50, -0.30, 0.20]),
            start_jitter: pick([0.010, 0.010, 0.005]),
            via_jitter: pick([0.003, 0.003, 0.003]),
            end_jitter: pick([0.020, 0.050, 0.010]),
            wobble: 0.02,
            sample_noise: 0.02,
            duration: 2.5,
            duration_jitter: 0.5,
        }
    }

    pub fn without_jitter(mut self) -> Self {
        for v in [&mut self.start_jitter, &mut self.via_jitter, &mut self.end_jitter] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.wobble = 0.0;
        self.sample_noise = 0.0;
        self.duration_jitter = 0.0;
        self
    }
}

/// Recipe for a reference ProMP.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub k: usize,
    pub d: usize,
    pub num_via_trajectories: usize,
    pub samples_per_trajectory: usize,
    pub wishart_dof: f64,
    pub wishart_scale: DMatrix<f64>,
    pub geometry: SeedGeometry,
    pub seed: u64,
}

impl ReferenceSpec {
    /// `K = 10`, `D = 3`, Wishart(D + 2, 1e-4·I) observation noise.
    pub fn preset(seed: u64) -> Self {
        Self::new(10, 3, seed)
    }

    pub fn new(k: usize, d: usize, seed: u64) -> Self {
        Self {
            k,
            d,
            num_via_trajectories: 60,
            samples_per_trajectory: 200,
            wishart_dof: d as f64 + 2.0,
            wishart_scale: DMatrix::identity(d, d) * 1e-4,
            geometry: SeedGeometry::pick_and_place(d),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::Config("reference needs k >= 1 and d >= 1".into()));
        }
        if !(self.wishart_dof > self.d as f64 - 1.0) {
            return Err(Error::Config(format!("wishart_dof must exceed D - 1, got {}", self.wishart_dof)));
        }
        if self.wishart_scale.shape() != (self.d, self.d) {
            return Err(Error::DimensionMismatch {
                what: "wishart_scale",
                expected: self.d,
                got: self.wishart_scale.nrows(),
            });
        }
        if self.samples_per_trajectory < 2 {
            return Err(Error::DegenerateTrajectory(self.samples_per_trajectory));
        }
        let g = &self.geometry;
        for v in [&g.start, &g.via, &g.end, &g.start_jitter, &g.via_jitter, &g.end_jitter] {
            if v.len() != self.d {
                return Err(Error::DimensionMismatch { what: "seed geometry", expected: self.d, got: v.len() });
            }
        }
        if !(g.duration - g.duration_jitter > 0.0) {
            return Err(Error::Config("trajectory durations must stay positive".into()));
        }
        Ok(())
    }
}

fn min_jerk(z: f64) -> f64 {
    z * z * z * (10.0 - 15.0 * z + 6.0 * z * z)
}

/// Smooth bump with value 1 at `z = 0.5` and flat zeros at both ends.
fn mid_bump(z: f64) -> f64 {
    (4.0 * z * (1.0 - z)).powi(3)
}

fn jittered(rng: &mut ChaCha8Rng, nominal: &[f64], sd: &[f64]) -> Vec<f64> {
    nominal
        .iter()
        .zip(sd)
        .map(|(m, s)| m + s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Seed trajectories for the reference; deterministic in `spec.seed`.
pub fn generate_seed_trajectories(spec: &ReferenceSpec) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    let g = &spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_via_trajectories);
    for _ in 0..spec.num_via_trajectories {
        let start = jittered(&mut rng, &g.start, &g.start_jitter);
        let via = jittered(&mut rng, &g.via, &g.via_jitter);
        let end = jittered(&mut rng, &g.end, &g.end_jitter);
        let duration = g.duration + g.duration_jitter * (2.0 * rng.random::<f64>() - 1.0);
        // Four smooth random deviations per DOF, faded out at the via point.
        let wobbles: Vec<Vec<(f64, f64)>> = (0..spec.d)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let c: f64 = rng.random();
                        let a: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                        (c, a * g.wobble)
                    })
                    .collect()
            })
            .collect();
        let steps = spec.samples_per_trajectory;
        let mut timestamps = Vec::with_capacity(steps);
        let mut states = Vec::with_capacity(steps);
        for i in 0..steps {
            let z = i as f64 / (steps - 1) as f64;
            timestamps.push(z * duration);
            let state = DVector::from_fn(spec.d, |dof, _| {
                let base = start[dof] + (end[dof] - start[dof]) * min_jerk(z);
                let bend = via[dof] - (start[dof] + (end[dof] - start[dof]) * 0.5);
                let wobble: f64 =
                    wobbles[dof].iter().map(|(c, a)| a * (-(z - c) * (z - c) / (2.0 * 0.1 * 0.1)).exp()).sum();
                let noise = g.sample_noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                base + bend * mid_bump(z) + wobble * (1.0 - mid_bump(z)) + noise
            });
            states.push(state);
        }
        out.push(Demonstration::new(timestamps, states)?);
    }
    Ok(out)
}

/// Linear interpolation of the states at phase `z`.
fn state_at_phase(demo: &Demonstration, z: f64) -> DVector<f64> {
    let phases = &demo.phases;
    let idx = phases.partition_point(|p| *p <= z);
    if idx == 0 {
        return demo.states[0].clone();
    }
    if idx >= phases.len() {
        return demo.states[phases.len() - 1].clone();
    }
    let (z0, z1) = (phases[idx - 1], phases[idx]);
    let t = if z1 > z0 { (z - z0) / (z1 - z0) } else { 0.0 };
    &demo.states[idx - 1] * (1.0 - t) + &demo.states[idx] * t
}

/// Draws `W ~ Wishart(dof, scale)` by the Bartlett decomposition.
pub fn sample_wishart(dof: f64, scale: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(dof > p as f64 - 1.0) {
        return Err(Error::Config(format!("wishart dof must exceed {}, got {dof}", p as f64 - 1.0)));
    }
    let l = spd_cholesky(scale, "wishart scale")?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::Config(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Reference ProMP from seed trajectories: each trajectory is read at the
/// `K` basis centers and its weights solve the square collocation system;
/// `μ_w`, `Σ_w` are the empirical moments (denominator N) of those weights.
/// `Σ_y` is a Wishart draw divided by its degrees of freedom.
pub fn build_reference_promp(trajectories: &[Demonstration], spec: &ReferenceSpec) -> Result<ProMPParams> {
    spec.validate()?;
    if trajectories.len() < 2 {
        return Err(Error::InsufficientDemos { needed: 2, got: trajectories.len() });
    }
    let basis = BasisConfig::new(spec.k, spec.d)?;
    let collocation = DMatrix::from_fn(spec.k, spec.k, |i, j| basis.basis_row(basis.centers[i])[j]);
    let lu = collocation.lu();
    let kd = basis.dim();
    let mut weights = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        if traj.dim() != spec.d {
            return Err(Error::DimensionMismatch { what: "trajectory DOF", expected: spec.d, got: traj.dim() });
        }
        let samples = DMatrix::from_fn(spec.k, spec.d, |i, dof| state_at_phase(traj, basis.centers[i])[dof]);
        let w = lu.solve(&samples).ok_or(Error::SingularCovariance("collocation system"))?;
        weights.push(DVector::from_column_slice(w.as_slice()));
    }
    let n = weights.len() as f64;
    let mu = weights.iter().fold(DVector::zeros(kd), |acc, w| acc + w) / n;
    let mut sigma_w = weights.iter().fold(DMatrix::zeros(kd, kd), |acc, w| acc + outer(&(w - &mu))) / n;
    crate::linalg::symmetrize_in_place(&mut sigma_w);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5157_4152_5448_0001);
    let sigma_y = sample_wishart(spec.wishart_dof, &spec.wishart_scale, &mut rng)? / spec.wishart_dof;
    ProMPParams::new(basis, mu, sigma_w, crate::linalg::symmetrize(&sigma_y))
}

/// `n` independent trajectories from `reference`; deterministic in `seed`.
pub fn sample_dataset(
    reference: &ProMPParams,
    n: usize,
    steps_per_demo: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if n == 0 {
        return Err(Error::InvalidCount("data set size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_trajectory(reference, steps_per_demo, rng.random())).collect()
}

/// How to build the task-shift data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftDatasetSpec {
    /// Demos in the shifted (final) subset.
    pub split_count: usize,
    /// Trailing time steps averaged into an endpoint.
    pub endpoint_window: usize,
    /// DOF the endpoints are read from.
    pub axis: usize,
    pub seed: u64,
}

impl ShiftDatasetSpec {
    /// 30 of 100 demos, last five steps, Y axis.
    pub fn preset(seed: u64) -> Self {
        Self { split_count: 30, endpoint_window: 5, axis: 1, seed }
    }
}

/// Mean of the last `window` states along `axis`.
pub fn endpoint(demo: &Demonstration, window: usize, axis: usize) -> f64 {
    let window = window.clamp(1, demo.len());
    demo.states[demo.len() - window..].iter().map(|s| s[axis]).sum::<f64>() / window as f64
}

/// Orders demos so the `split_count` largest endpoints come last; each part
/// is shuffled independently.
pub fn make_shifted_dataset(demos: &[Demonstration], spec: &ShiftDatasetSpec) -> Result<Vec<Demonstration>> {
    if spec.split_count == 0 || spec.split_count >= demos.len() {
        return Err(Error::InvalidSplit(format!(
            "split_count must lie in (0, {}), got {}",
            demos.len(),
            spec.split_count
        )));
    }
    if spec.endpoint_window == 0 {
        return Err(Error::InvalidSplit("endpoint_window must be at least 1".into()));
    }
    if let Some(d) = demos.iter().find(|d| spec.axis >= d.dim()) {
        return Err(Error::DimensionMismatch { what: "shift axis", expected: d.dim(), got: spec.axis + 1 });
    }
    let endpoints: Vec<f64> = demos.iter().map(|d| endpoint(d, spec.endpoint_window, spec.axis)).collect();
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.sort_by(|a, b| endpoints[*a].total_cmp(&endpoints[*b]));
    let cut = demos.len() - spec.split_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (before, after) = order.split_at_mut(cut);
    before.shuffle(&mut rng);
    after.shuffle(&mut rng);
    Ok(order.into_iter().map(|i| demos[i].clone()).collect())
}

/// Adds `shift · s(z)` on `axis`, with `s` rising by a minimum-jerk profile
/// over the second half of the phase (the first half is untouched).
pub fn shift_endpoint(demo: &Demonstration, axis: usize, shift: f64) -> Demonstration {
    let mut out = demo.clone();
    for (state, z) in out.states.iter_mut().zip(&demo.phases) {
        let ramp = if *z <= 0.5 { 0.0 } else { min_jerk((z - 0.5) / 0.5) };
        state[axis] += shift * ramp;
    }
    out
}

/// One row of the algorithm comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub algorithm: String,
    pub settings: String,
    /// Missing for the reference row.
    pub d_b: Option<f64>,
    pub log_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, algorithm: &str, settings: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm && r.settings == settings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub lambda: f64,
    pub em_iterations: usize,
    pub beta: f64,
    pub passes: usize,
    pub space: DistanceSpace,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { lambda: 1e-12, em_iterations: 5, beta: 0.75, passes: 5, space: DistanceSpace::Weight }
    }
}

/// Fits every estimator on `dataset` and scores it against `reference`.
pub fn experiment_compare(
    dataset: &[Demonstration],
    reference: &ProMPParams,
    cfg: &CompareConfig,
) -> Result<CompareTable> {
    let basis = &reference.basis;
    let prior = NiwPrior::standard(basis);
    let em = EmConfig::with_iterations(cfg.em_iterations);
    let sem = StepwiseConfig::new(basis, cfg.beta);
    let row = |algorithm: &str, settings: String, params: &ProMPParams| -> Result<CompareRow> {
        Ok(CompareRow {
            algorithm: algorithm.into(),
            settings,
            d_b: Some(promp_distance(reference, params, cfg.space)?),
            log_kappa: log10_condition_number(&params.sigma_w),
        })
    };
    let rows = vec![
        CompareRow {
            algorithm: "Reference".into(),
            settings: "-".into(),
            d_b: None,
            log_kappa: log10_condition_number(&reference.sigma_w),
        },
        row(
            "MLE with Ridge Reg.",
            format!("lambda = {:e}", cfg.lambda),
            &fit_ridge(dataset, basis, cfg.lambda)?.params,
        )?,
        row("MLE with EM", format!("{} Iterations", cfg.em_iterations), &fit_em_mle(dataset, basis, &em)?.params)?,
        row(
            "MAP with EM",
            format!("{} Iterations", cfg.em_iterations),
            &fit_em_map(dataset, basis, &em, &prior)?.params,
        )?,
        row("MAP with sEM", format!("beta = {}", cfg.beta), &run_passes(dataset, &sem, basis, 1)?)?,
        row(
            "MAP with sEM",
            format!("beta = {}, {} Passes", cfg.beta, cfg.passes),
            &run_passes(dataset, &sem, basis, cfg.passes)?,
        )?,
    ];
    Ok(CompareTable { rows })
}

/// Streams `dataset` once and scores the model after every update.
pub fn experiment_progress(
    dataset: &[Demonstration],
    reference: &ProMPParams,
    cfg: &StepwiseConfig,
) -> Result<Vec<MetricReport>> {
    let mut state = StepwiseState::init(cfg, reference.basis.clone())?;
    let mut previous: Option<DMatrix<f64>> = None;
    let mut series = Vec::with_capacity(dataset.len());
    for demo in dataset {
        state.add_demonstration(cfg, demo)?;
        series.push(MetricReport::compare(reference, &state.params, previous.as_ref())?);
        previous = Some(state.params.sigma_w.clone());
    }
    Ok(series)
}

/// Endpoints of the data and of both models after streaming a shifted set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub sem_endpoint: f64,
    pub batch_endpoint: f64,
    pub pre_shift_mean: f64,
    pub post_shift_mean: f64,
    pub post_shift_min: f64,
    pub post_shift_max: f64,
    /// Data endpoint of every demo in stream order.
    pub data_endpoints: Vec<f64>,
    /// Model endpoint after every sEM update.
    pub sem_endpoint_trace: Vec<f64>,
}

impl AdaptationReport {
    /// sEM nearer to the post-shift mean than to the pre-shift mean.
    pub fn sem_follows_shift(&self) -> bool {
        (self.sem_endpoint - self.post_shift_mean).abs() < (self.sem_endpoint - self.pre_shift_mean).abs()
    }

    /// Batch endpoint strictly between the subset means.
    pub fn batch_between_means(&self) -> bool {
        let (lo, hi) = if self.pre_shift_mean < self.post_shift_mean {
            (self.pre_shift_mean, self.post_shift_mean)
        } else {
            (self.post_shift_mean, self.pre_shift_mean)
        };
        lo < self.batch_endpoint && self.batch_endpoint < hi
    }

    pub fn within_post_shift_range(&self, value: f64) -> bool {
        self.post_shift_min <= value && value <= self.post_shift_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    /// Size of the final (shifted) subset.
    pub split_count: usize,
    pub endpoint_window: usize,
    pub axis: usize,
    pub sem: StepwiseConfig,
    pub em: EmConfig,
    pub prior: NiwPrior,
}

impl AdaptationConfig {
    /// sEM with `β = 0.6` against 5-iteration MAP-EM.
    pub fn preset(basis: &BasisConfig, split_count: usize, axis: usize) -> Self {
        Self {
            split_count,
            endpoint_window: 5,
            axis,
            sem: StepwiseConfig::new(basis, 0.6),
            em: EmConfig::with_iterations(5),
            prior: NiwPrior::standard(basis),
        }
    }
}

/// Model endpoint: the mean trajectory averaged over the phases of the last
/// `window` steps of `like`.
fn model_endpoint(params: &ProMPParams, like: &Demonstration, window: usize, axis: usize) -> f64 {
    let window = window.clamp(1, like.len());
    like.phases[like.len() - window..].iter().map(|z| params.mean_at(*z)[axis]).sum::<f64>() / window as f64
}

/// Streams a shifted data set through sEM and compares with batch MAP-EM.
pub fn experiment_adaptation(
    shifted: &[Demonstration],
    basis: &BasisConfig,
    cfg: &AdaptationConfig,
) -> Result<AdaptationReport> {
    if cfg.split_count == 0 || cfg.split_count >= shifted.len() {
        return Err(Error::InvalidSplit(format!("split_count must lie in (0, {})", shifted.len())));
    }
    let data_endpoints: Vec<f64> = shifted.iter().map(|d| endpoint(d, cfg.endpoint_window, cfg.axis)).collect();
    let cut = shifted.len() - cfg.split_count;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let post = &data_endpoints[cut..];

    let mut state = StepwiseState::init(&cfg.sem, basis.clone())?;
    let mut trace = Vec::with_capacity(shifted.len());
    for demo in shifted {
        state.add_demonstration(&cfg.sem, demo)?;
        trace.push(model_endpoint(&state.params, demo, cfg.endpoint_window, cfg.axis));
    }
    let batch = fit_em_map(shifted, basis, &cfg.em, &cfg.prior)?.params;
    let last = &shifted[shifted.len() - 1];

    Ok(AdaptationReport {
        sem_endpoint: model_endpoint(&state.params, last, cfg.endpoint_window, cfg.axis),
        batch_endpoint: model_endpoint(&batch, last, cfg.endpoint_window, cfg.axis),
        pre_shift_mean: mean(&data_endpoints[..cut]),
        post_shift_mean: mean(post),
        post_shift_min: post.iter().cloned().fold(f64::INFINITY, f64::min),
        post_shift_max: post.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        data_endpoints,
        sem_endpoint_trace: trace,
    })
}

/// Seeds for the stages of a preset, derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetSeeds {
    pub reference: u64,
    pub dataset: u64,
    pub shuffle: u64,
}

impl PresetSeeds {
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { reference: rng.random(), dataset: rng.random(), shuffle: rng.random() }
    }
}

/// Reference ProMP and its 100-demo training set for a master seed.
pub fn preset_setup(seed: u64) -> Result<(ProMPParams, Vec<Demonstration>)> {
    let seeds = PresetSeeds::from_master(seed);
    let spec = ReferenceSpec::preset(seeds.reference);
    let reference = build_reference_promp(&generate_seed_trajectories(&spec)?, &spec)?;
    let dataset = sample_dataset(&reference, 100, 100, seeds.dataset)?;
    Ok((reference, dataset))
}

pub fn compare_preset(seed: u64) -> Result<CompareTable> {
    let (reference, dataset) = preset_setup(seed)?;
    experiment_compare(&dataset, &reference, &CompareConfig::default())
}

pub fn progress_preset(seed: u64) -> Result<Vec<MetricReport>> {
    let (reference, dataset) = preset_setup(seed)?;
    experiment_progress(&dataset, &reference, &StepwiseConfig::new(&reference.basis, 0.75))
}

/// 70/30 split of the 100-demo set by Y endpoint.
pub fn adaptation_preset(seed: u64) -> Result<AdaptationReport> {
    let (reference, dataset) = preset_setup(seed)?;
    let spec = ShiftDatasetSpec::preset(PresetSeeds::from_master(seed).shuffle);
    let shifted = make_shifted_dataset(&dataset, &spec)?;
    let cfg = AdaptationConfig::preset(&reference.basis, spec.split_count, spec.axis);
    experiment_adaptation(&shifted, &reference.basis, &cfg)
}

/// 15 demos, then 15 more whose X endpoint is moved by 0.2.
pub fn panda_preset(seed: u64) -> Result<AdaptationReport> {
    let seeds = PresetSeeds::from_master(seed);
    let spec = ReferenceSpec::preset(seeds.reference);
    let reference = build_reference_promp(&generate_seed_trajectories(&spec)?, &spec)?;
    let axis = 0;
    let mut demos = sample_dataset(&reference, 30, 100, seeds.dataset)?;
    for demo in demos.iter_mut().skip(15) {
        *demo = shift_endpoint(demo, axis, 0.2);
    }
    let cfg = AdaptationConfig::preset(&reference.basis, 15, axis);
    experiment_adaptation(&demos, &reference.basis, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> ReferenceSpec {
        ReferenceSpec { num_via_trajectories: 20, samples_per_trajectory: 60, ..ReferenceSpec::new(5, 3, seed) }
    }

    #[test]
    fn zero_jitter_gives_identical_trajectories() {
        let mut spec = small_spec(3);
        spec.geometry = spec.geometry.without_jitter();
        let trajs = generate_seed_trajectories(&spec).unwrap();
        assert!(trajs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn seed_trajectories_are_deterministic() {
        assert_eq!(
            generate_seed_trajectories(&small_spec(9)).unwrap(),
            generate_seed_trajectories(&small_spec(9)).unwrap()
        );
        assert_ne!(
            generate_seed_trajectories(&small_spec(9)).unwrap(),
            generate_seed_trajectories(&small_spec(10)).unwrap()
        );
    }

    #[test]
    fn via_point_is_tighter_than_endpoint() {
        let trajs = generate_seed_trajectories(&small_spec(4)).unwrap();
        let spread = |z: f64, dof: usize| {
            let xs: Vec<f64> = trajs.iter().map(|t| state_at_phase(t, z)[dof]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        for dof in 0..3 {
            assert!(spread(0.5, dof) < spread(1.0, dof), "dof {dof}");
        }
    }

    #[test]
    fn constant_trajectories_give_constant_weights() {
        let spec = small_spec(1);
        let trajs: Vec<Demonstration> = (0..3)
            .map(|_| {
                let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
                let states = vec![DVector::from_vec(vec![0.3, -1.2, 2.0]); 20];
                Demonstration::new(ts, states).unwrap()
            })
            .collect();
        let reference = build_reference_promp(&trajs, &spec).unwrap();
        for (dof, c) in [0.3, -1.2, 2.0].iter().enumerate() {
            for j in 0..spec.k {
                assert!((reference.mu_w[dof * spec.k + j] - c).abs() < 1e-12);
            }
        }
        assert!(reference.sigma_w.abs().max() < 1e-24);
    }

    #[test]
    fn two_trajectories_give_rank_one_covariance() {
        let spec = small_spec(2);
        let trajs = generate_seed_trajectories(&spec).unwrap();
        let reference = build_reference_promp(&trajs[..2], &spec).unwrap();
        let eig = reference.sigma_w.clone().symmetric_eigen().eigenvalues;
        let mut sorted: Vec<f64> = eig.iter().cloned().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[1] <= 1e-12 * sorted[0]);
    }

    #[test]
    fn full_size_shapes() {
        let spec = ReferenceSpec::preset(5);
        let reference = build_reference_promp(&generate_seed_trajectories(&spec).unwrap(), &spec).unwrap();
        assert_eq!(reference.mu_w.len(), 30);
        assert_eq!(reference.sigma_w.shape(), (30, 30));
        assert_eq!(reference.sigma_y.shape(), (3, 3));
        assert!(spd_cholesky(&reference.sigma_y, "y").is_ok());
    }

    #[test]
    fn dataset_sizes_and_seeds() {
        let reference = ProMPParams::standard(BasisConfig::new(4, 3).unwrap());
        let data = sample_dataset(&reference, 100, 40, 1).unwrap();
        assert_eq!(data.len(), 100);
        assert!(data.iter().all(|d| d.len() == 40 && d.dim() == 3));
        assert_ne!(data, sample_dataset(&reference, 100, 40, 2).unwrap());
        assert!(matches!(sample_dataset(&reference, 0, 40, 1), Err(Error::InvalidCount(_))));
    }

    #[test]
    fn shifted_dataset_splits_by_endpoint() {
        let reference = ProMPParams::standard(BasisConfig::new(4, 3).unwrap());
        let data = sample_dataset(&reference, 100, 30, 7).unwrap();
        let spec = ShiftDatasetSpec::preset(3);
        let shifted = make_shifted_dataset(&data, &spec).unwrap();
        let ends: Vec<f64> = shifted.iter().map(|d| endpoint(d, 5, 1)).collect();
        let min_last = ends[70..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(ends[..70].iter().all(|e| *e <= min_last));

        let mut a: Vec<Vec<u64>> = data.iter().map(|d| d.states.iter().map(|s| s[0].to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = shifted.iter().map(|d| d.states.iter().map(|s| s[0].to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let bad = ShiftDatasetSpec { split_count: 100, ..spec };
        assert!(matches!(make_shifted_dataset(&data, &bad), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn single_step_window_reads_last_state() {
        let demo = Demonstration::new(
            vec![0.0, 1.0, 2.0],
            vec![
                DVector::from_vec(vec![0.0, 1.0]),
                DVector::from_vec(vec![0.0, 2.0]),
                DVector::from_vec(vec![0.0, 7.5]),
            ],
        )
        .unwrap();
        assert_eq!(endpoint(&demo, 1, 1), 7.5);
        assert_eq!(endpoint(&demo, 2, 1), 4.75);
    }

    #[test]
    fn wishart_mean_is_dof_times_scale() {
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += sample_wishart(4.0, &scale, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        assert!((mean - &scale * 4.0).abs().max() < 0.15);
    }
}
