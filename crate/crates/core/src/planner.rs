//! Sampling-based planner over the safe discrete dynamics
//!
//! ```text
//! x_{k+1} = x_k + [f(x_k) + g(x_k) u*(x_k, v_k)] Ts,    v_k = mu_k + eps_k
//! ```
//!
//! Each tick draws `K` Gaussian noise sequences, rolls them out through the
//! safety filter, weights them by `exp(-(J - min J) / lambda)` and moves the
//! mean sequence by the weighted noise average. Because every rollout
//! passes through the filter, every sampled trajectory stays in the safe set.
//!
//! Noise comes from counter-based streams keyed by `(tick, sample)` and all
//! reductions run in sample order, so results do not depend on the number
//! of worker threads.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::cbf::CompositeCbf;
use crate::dynamics::{check_len, ControlVec, StateVec, SystemModel};
use crate::error::{Error, Result};

/// Slack on `h` and the lower cascade members when auditing sampled or
/// executed states; covers discretization drift of the continuous-time
/// invariance argument.
pub const SAFETY_SLACK: f64 = 1e-6;

/// Terminal cost `phi` and running cost `psi`.
pub trait CostSpec: Send + Sync {
    fn terminal(&self, x: &StateVec) -> f64;
    fn running(&self, x: &StateVec, v: &ControlVec) -> f64;

    /// Distance to the cost's target, if it has one. Used for early stopping.
    fn goal_distance(&self, _x: &StateVec) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    samples: usize,
    horizon: usize,
    lambda: f64,
    sigma: DMatrix<f64>,
    sigma_factor: DMatrix<f64>,
    sigma_chol: Cholesky<f64, Dyn>,
    ts: f64,
    include_s_correction: bool,
}

impl PlannerConfig {
    /// Validates the parameters and factorizes `sigma = L L^T` once.
    pub fn new(
        samples: usize,
        horizon: usize,
        lambda: f64,
        sigma: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        if samples == 0 || samples > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "sample count must be in 1..=2^32-1, got {samples}"
            )));
        }
        if horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "planning step must be > 0, got {ts}"
            )));
        }
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "sigma must be a non-empty square matrix".into(),
            ));
        }
        if sigma.iter().any(|v| !v.is_finite()) || (&sigma - sigma.transpose()).amax() > 0.0 {
            return Err(Error::InvalidConfig(
                "sigma must be finite and symmetric".into(),
            ));
        }
        let sigma_chol = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::InvalidConfig("sigma must be positive definite".into()))?;
        let sigma_factor = sigma_chol.l();
        Ok(Self {
            samples,
            horizon,
            lambda,
            sigma,
            sigma_factor,
            sigma_chol,
            ts,
            include_s_correction: false,
        })
    }

    pub fn with_s_correction(mut self, on: bool) -> Self {
        self.include_s_correction = on;
        self
    }

    pub fn with_samples(self, samples: usize) -> Result<Self> {
        let s = self.include_s_correction;
        Ok(
            Self::new(samples, self.horizon, self.lambda, self.sigma, self.ts)?
                .with_s_correction(s),
        )
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    /// Lower-triangular `L` with `L L^T = sigma`.
    pub fn sigma_factor(&self) -> &DMatrix<f64> {
        &self.sigma_factor
    }
    pub fn ts(&self) -> f64 {
        self.ts
    }
    pub fn control_dim(&self) -> usize {
        self.sigma.nrows()
    }
    pub fn include_s_correction(&self) -> bool {
        self.include_s_correction
    }
}

/// Mean control sequence `(mu_0, ..., mu_{N-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanControlSequence(pub Vec<ControlVec>);

impl MeanControlSequence {
    pub fn zeros(horizon: usize, m: usize) -> Self {
        Self(vec![ControlVec::zeros(m); horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Drops `mu_0`, moves the rest forward and appends a zero control.
    pub fn shift(&mut self) {
        if self.0.is_empty() {
            return;
        }
        self.0.rotate_left(1);
        self.0.last_mut().unwrap().fill(0.0);
    }

    pub fn shifted(mut self) -> Self {
        self.shift();
        self
    }
}

/// Noise sequence `(eps_0, ..., eps_{N-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSequence(pub Vec<ControlVec>);

/// Draws `eps_k = L z_k`, `z_k ~ N(0, I)`, for `k = 0..N`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, config: &PlannerConfig) -> NoiseSequence {
    let m = config.control_dim();
    let l = config.sigma_factor();
    NoiseSequence(
        (0..config.horizon)
            .map(|_| {
                let z = ControlVec::from_iterator(
                    m,
                    (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                l * z
            })
            .collect(),
    )
}

/// Counter-based noise streams: one independent ChaCha stream per
/// `(tick, sample)` pair, derived from a single seed.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    base: ChaCha8Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream(&self, tick: u64, sample: usize) -> ChaCha8Rng {
        debug_assert!(tick <= u32::MAX as u64);
        let mut rng = self.base.clone();
        rng.set_stream((tick << 32) | sample as u64);
        rng.set_word_pos(0);
        rng
    }
}

/// Running audit of sampled states against the certified safe set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditStats {
    pub states: u64,
    /// States with `h < -SAFETY_SLACK` or a lower cascade member below `-SAFETY_SLACK`.
    pub violations: u64,
    pub min_h: f64,
    pub min_cascade: f64,
}

impl Default for AuditStats {
    fn default() -> Self {
        Self {
            states: 0,
            violations: 0,
            min_h: f64::INFINITY,
            min_cascade: f64::INFINITY,
        }
    }
}

impl AuditStats {
    pub fn record(&mut self, h: f64, min_cascade: f64) {
        self.states += 1;
        if !(h >= -SAFETY_SLACK && min_cascade >= -SAFETY_SLACK) {
            self.violations += 1;
        }
        self.min_h = self.min_h.min(h);
        self.min_cascade = self.min_cascade.min(min_cascade);
    }

    pub fn merge(&mut self, other: &AuditStats) {
        self.states += other.states;
        self.violations += other.violations;
        self.min_h = self.min_h.min(other.min_h);
        self.min_cascade = self.min_cascade.min(other.min_cascade);
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub cost: f64,
    /// `x_0, ..., x_N`.
    pub states: Vec<StateVec>,
    pub audit: AuditStats,
}

/// Rolls `x0` forward under `v_k = mu_k + eps_k` through the safe Euler map
/// and accumulates `J = sum_{k=0}^{N-1} psi(x_k, v_k) + phi(x_N)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    sys: &dyn SystemModel,
    cbf: &CompositeCbf,
    cost: &dyn CostSpec,
    x0: &StateVec,
    mean: &MeanControlSequence,
    noise: &NoiseSequence,
    config: &PlannerConfig,
) -> Result<Rollout> {
    check_len("mean sequence", config.horizon(), mean.len())?;
    check_len("noise sequence", config.horizon(), noise.0.len())?;
    check_len("state", sys.state_dim(), x0.len())?;
    check_len("control", sys.control_dim(), config.control_dim())?;
    rollout_inner(sys, cbf, cost, x0, mean, noise, config.ts(), true, true)
}

#[allow(clippy::too_many_arguments)]
fn rollout_inner(
    sys: &dyn SystemModel,
    cbf: &CompositeCbf,
    cost: &dyn CostSpec,
    x0: &StateVec,
    mean: &MeanControlSequence,
    noise: &NoiseSequence,
    ts: f64,
    filter: bool,
    keep_states: bool,
) -> Result<Rollout> {
    let mut x = x0.clone();
    let mut total = 0.0;
    let mut audit = AuditStats::default();
    let mut states = Vec::with_capacity(if keep_states { mean.len() + 1 } else { 0 });

    for (mu, eps) in mean.0.iter().zip(&noise.0) {
        let v = mu + eps;
        total += cost.running(&x, &v);
        let eval = cbf.evaluate(&x);
        audit.record(eval.h, eval.min_cascade);
        let u = if filter {
            cbf.filter_from_eval(sys, &x, &v, &eval)?.0
        } else {
            v
        };
        let mut next = sys.vector_field(&x, &u);
        next *= ts;
        next += &x;
        if keep_states {
            states.push(std::mem::replace(&mut x, next));
        } else {
            x = next;
        }
    }
    total += cost.terminal(&x);
    let last = cbf.membership(&x);
    audit.record(last.h, last.min_cascade);
    if keep_states {
        states.push(x);
    }
    Ok(Rollout {
        cost: total,
        states,
        audit,
    })
}

/// Normalized importance weights with baseline `xi = min J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    pub eta: f64,
    pub xi: f64,
    pub best_index: usize,
}

impl ImportanceWeights {
    /// Shannon entropy `-sum w ln w` in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}

/// `w_j = exp(-(J_j - xi) / lambda) / eta`. Non-finite costs get weight zero.
pub fn importance_weights(costs: &[f64], lambda: f64) -> Result<ImportanceWeights> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be > 0, got {lambda}"
        )));
    }
    let mut best_index = None;
    let mut xi = f64::INFINITY;
    for (j, &c) in costs.iter().enumerate() {
        if c.is_finite() && c < xi {
            xi = c;
            best_index = Some(j);
        }
    }
    let best_index = best_index.ok_or(Error::PlanningFailed(costs.len()))?;
    let mut weights: Vec<f64> = costs
        .iter()
        .map(|&c| {
            if c.is_finite() {
                (-(c - xi) / lambda).exp()
            } else {
                0.0
            }
        })
        .collect();
    let eta: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= eta;
    }
    Ok(ImportanceWeights {
        weights,
        eta,
        xi,
        best_index,
    })
}

/// `mu_k + sum_j w_j eps_k^(j)`, summed in sample order.
pub fn update_mean(
    mean: &MeanControlSequence,
    weights: &[f64],
    noises: &[NoiseSequence],
) -> MeanControlSequence {
    assert_eq!(weights.len(), noises.len(), "one weight per noise sequence");
    let mut out = mean.clone();
    for (w, noise) in weights.iter().zip(noises) {
        if *w == 0.0 {
            continue;
        }
        for (mu, eps) in out.0.iter_mut().zip(&noise.0) {
            mu.axpy(*w, eps, 1.0);
        }
    }
    out
}

/// `(lambda / 2) sum_k mu_k^T sigma^{-1} (mu_k + 2 eps_k)`.
pub fn s_cost_correction(
    mean: &MeanControlSequence,
    noise: &NoiseSequence,
    config: &PlannerConfig,
) -> f64 {
    let sum: f64 = mean
        .0
        .iter()
        .zip(&noise.0)
        .map(|(mu, eps)| {
            let sigma_inv_mu = config.sigma_chol.solve(mu);
            sigma_inv_mu.dot(&(mu + eps * 2.0))
        })
        .sum();
    0.5 * config.lambda() * sum
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub noises: Vec<NoiseSequence>,
    /// Trajectory costs `J_j`; `+inf` for invalid rollouts.
    pub costs: Vec<f64>,
    /// Costs used for weighting: `J_j`, plus the S-correction when enabled.
    pub scores: Vec<f64>,
    pub weights: ImportanceWeights,
    /// `K x (N + 1)` states, kept only when requested.
    pub trajectories: Option<Vec<Vec<StateVec>>>,
    pub audit: AuditStats,
}

impl RolloutBatch {
    pub fn best_index(&self) -> usize {
        self.weights.best_index
    }
    pub fn best_cost(&self) -> f64 {
        self.costs[self.weights.best_index]
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub mean: MeanControlSequence,
    /// `mu_0 + eps_0` of the lowest-cost sample, from the pre-update mean.
    pub v_best: ControlVec,
    pub batch: RolloutBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// Every noise draw is zero. Test hook.
    Zero,
}

/// Planner state: configuration, seed and execution options.
pub struct Planner {
    config: PlannerConfig,
    streams: NoiseStreams,
    noise_mode: NoiseMode,
    keep_trajectories: bool,
    filter_enabled: bool,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Planner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Planner")
            .field("config", &self.config)
            .field("noise_mode", &self.noise_mode)
            .field("workers", &self.workers())
            .finish()
    }
}

impl Planner {
    /// Serial planner.
    pub fn new(config: PlannerConfig, seed: u64) -> Self {
        Self {
            config,
            streams: NoiseStreams::new(seed),
            noise_mode: NoiseMode::Gaussian,
            keep_trajectories: false,
            filter_enabled: true,
            pool: None,
        }
    }

    /// Runs rollouts on a dedicated pool of `workers` threads. One worker
    /// runs inline on the caller's thread.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = match workers {
            0 => return Err(Error::InvalidConfig("worker count must be >= 1".into())),
            1 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
            ),
        };
        Ok(self)
    }

    pub fn with_noise_mode(mut self, mode: NoiseMode) -> Self {
        self.noise_mode = mode;
        self
    }

    /// Keep every rollout's state sequence in the returned batch.
    pub fn keep_trajectories(mut self, keep: bool) -> Self {
        self.keep_trajectories = keep;
        self
    }

    /// Disables the safety filter inside rollouts. Only meant for negative
    /// controls of the safety audit; the resulting samples are not safe.
    pub fn bypass_filter_for_audit_tests(mut self) -> Self {
        self.filter_enabled = false;
        self
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    fn noise_for(&self, tick: u64, sample: usize) -> NoiseSequence {
        match self.noise_mode {
            NoiseMode::Gaussian => {
                sample_noise(&mut self.streams.stream(tick, sample), &self.config)
            }
            NoiseMode::Zero => NoiseSequence(vec![
                ControlVec::zeros(self.config.control_dim());
                self.config.horizon
            ]),
        }
    }

    /// One planning tick from `x0`. `tick` selects the noise streams.
    pub fn plan(
        &self,
        sys: &dyn SystemModel,
        cbf: &CompositeCbf,
        cost: &dyn CostSpec,
        x0: &StateVec,
        mean: &MeanControlSequence,
        tick: u64,
    ) -> Result<PlanOutput> {
        let cfg = &self.config;
        check_len("mean sequence", cfg.horizon(), mean.len())?;
        check_len("state", sys.state_dim(), x0.len())?;
        check_len("control", sys.control_dim(), cfg.control_dim())?;
        if tick > u32::MAX as u64 {
            return Err(Error::InvalidConfig(format!(
                "tick {tick} exceeds the noise stream range"
            )));
        }

        let one = |j: usize| -> Result<(NoiseSequence, Rollout)> {
            let noise = self.noise_for(tick, j);
            let r = rollout_inner(
                sys,
                cbf,
                cost,
                x0,
                mean,
                &noise,
                cfg.ts(),
                self.filter_enabled,
                self.keep_trajectories,
            )
            .map_err(|e| e.in_sample(j))?;
            Ok((noise, r))
        };
        let results: Vec<Result<(NoiseSequence, Rollout)>> = match &self.pool {
            Some(pool) => pool.install(|| (0..cfg.samples()).into_par_iter().map(one).collect()),
            None => (0..cfg.samples()).map(one).collect(),
        };

        let mut noises = Vec::with_capacity(cfg.samples());
        let mut costs = Vec::with_capacity(cfg.samples());
        let mut scores = Vec::with_capacity(cfg.samples());
        let mut trajectories = self
            .keep_trajectories
            .then(|| Vec::with_capacity(cfg.samples()));
        let mut audit = AuditStats::default();
        for (j, res) in results.into_iter().enumerate() {
            let (noise, r) = res?;
            let c = if r.cost.is_finite() {
                r.cost
            } else {
                log::warn!("tick {tick}: rollout {j} has non-finite cost; excluded from weighting");
                f64::INFINITY
            };
            let score = if cfg.include_s_correction() && c.is_finite() {
                c + s_cost_correction(mean, &noise, cfg)
            } else {
                c
            };
            audit.merge(&r.audit);
            if let Some(t) = trajectories.as_mut() {
                t.push(r.states);
            }
            noises.push(noise);
            costs.push(c);
            scores.push(score);
        }

        let weights = importance_weights(&scores, cfg.lambda())?;
        let new_mean = update_mean(mean, &weights.weights, &noises);
        let v_best = &mean.0[0] + &noises[weights.best_index].0[0];
        Ok(PlanOutput {
            mean: new_mean,
            v_best,
            batch: RolloutBatch {
                noises,
                costs,
                scores,
                weights,
                trajectories,
                audit,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::{Barrier, Cascade};
    use crate::dynamics::LinearSystem;
    use smallvec::smallvec;

    struct Far;
    impl Barrier for Far {
        fn relative_degree(&self) -> usize {
            1
        }
        fn class_k_gains(&self) -> &[f64] {
            &[]
        }
        fn cascade_values(&self, _x: &StateVec) -> Cascade {
            smallvec![1e6]
        }
        fn terminal_gradient(&self, x: &StateVec) -> Option<StateVec> {
            Some(StateVec::zeros(x.len()))
        }
    }

    struct EnergyCost;
    impl CostSpec for EnergyCost {
        fn terminal(&self, _x: &StateVec) -> f64 {
            0.0
        }
        fn running(&self, _x: &StateVec, v: &ControlVec) -> f64 {
            v.norm_squared()
        }
    }

    struct TerminalOnly;
    impl CostSpec for TerminalOnly {
        fn terminal(&self, x: &StateVec) -> f64 {
            x.norm_squared()
        }
        fn running(&self, _x: &StateVec, _v: &ControlVec) -> f64 {
            0.0
        }
    }

    fn far_cbf() -> CompositeCbf {
        CompositeCbf::new(vec![Box::new(Far)], 20.0, 0.5, 1e24).unwrap()
    }

    fn config(samples: usize, horizon: usize, sigma: DMatrix<f64>) -> PlannerConfig {
        PlannerConfig::new(samples, horizon, 1.0, sigma, 0.1).unwrap()
    }

    fn cv(v: &[f64]) -> ControlVec {
        ControlVec::from_row_slice(v)
    }

    #[test]
    fn config_rejects_bad_sigma() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(PlannerConfig::new(10, 5, 1.0, bad, 0.1).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(PlannerConfig::new(10, 5, 1.0, asym, 0.1).is_err());
        let id = DMatrix::identity(2, 2);
        assert!(PlannerConfig::new(0, 5, 1.0, id.clone(), 0.1).is_err());
        assert!(PlannerConfig::new(10, 0, 1.0, id.clone(), 0.1).is_err());
        assert!(PlannerConfig::new(10, 5, 0.0, id.clone(), 0.1).is_err());
        assert!(PlannerConfig::new(10, 5, 1.0, id, 0.0).is_err());
    }

    #[test]
    fn identity_sigma_reproduces_raw_normals() {
        let cfg = config(1, 3, DMatrix::identity(2, 2));
        let streams = NoiseStreams::new(42);
        let noise = sample_noise(&mut streams.stream(0, 0), &cfg);
        let mut raw = streams.stream(0, 0);
        for eps in &noise.0 {
            for e in eps.iter() {
                assert_eq!(*e, raw.sample::<f64, _>(StandardNormal));
            }
        }
        // reproducible
        assert_eq!(noise, sample_noise(&mut streams.stream(0, 0), &cfg));
        // different streams differ
        assert_ne!(noise, sample_noise(&mut streams.stream(0, 1), &cfg));
        assert_ne!(noise, sample_noise(&mut streams.stream(1, 0), &cfg));
    }

    #[test]
    fn noise_moments() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.33, 0.0, 0.0, 0.33]);
        let cfg = config(1, 1, sigma.clone());
        let streams = NoiseStreams::new(7);
        let n = 100_000;
        let draws: Vec<ControlVec> = (0..n)
            .map(|j| sample_noise(&mut streams.stream(0, j), &cfg).0[0].clone())
            .collect();
        let mean = draws.iter().fold(ControlVec::zeros(2), |a, d| a + d) / n as f64;
        for i in 0..2 {
            assert!(
                mean[i].abs() < 4.0 * (sigma[(i, i)] / n as f64).sqrt(),
                "mean {i}: {}",
                mean[i]
            );
        }
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for d in &draws {
            let c = d - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        for i in 0..2 {
            assert!((cov[(i, i)] - sigma[(i, i)]).abs() < 0.05 * sigma[(i, i)]);
        }
        // off-diagonal of a diagonal sigma: relative to the scale of the entries
        assert!(cov[(0, 1)].abs() < 0.05 * (sigma[(0, 0)] * sigma[(1, 1)]).sqrt());
    }

    #[test]
    fn correlated_noise_uses_cholesky_factor() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let cfg = config(1, 1, sigma.clone());
        let l = cfg.sigma_factor();
        assert!((l * l.transpose() - &sigma).amax() < 1e-14);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn rollout_single_step_terminal_only() {
        let sys = LinearSystem::integrator(2);
        let cfg = config(1, 1, DMatrix::identity(2, 2));
        let x0 = StateVec::from_vec(vec![1.0, -1.0]);
        let mean = MeanControlSequence(vec![cv(&[0.5, 0.5])]);
        let noise = NoiseSequence(vec![cv(&[0.5, -2.5])]);
        let r = rollout(&sys, &far_cbf(), &TerminalOnly, &x0, &mean, &noise, &cfg).unwrap();
        // F(x0, v) = x0 + v Ts with v = (1, -2)
        let x1 = StateVec::from_vec(vec![1.1, -1.2]);
        assert!((r.states[1].clone() - &x1).amax() < 1e-15);
        assert_eq!(r.cost, x1.norm_squared());
        assert_eq!(r.states.len(), 2);
        assert_eq!(r.audit.states, 2);
    }

    #[test]
    fn rollout_inactive_filter_cost_is_control_energy() {
        let sys = LinearSystem::integrator(2);
        let cfg = config(1, 3, DMatrix::identity(2, 2));
        let mean = MeanControlSequence(vec![cv(&[1.0, 0.0]), cv(&[0.0, 2.0]), cv(&[-1.0, -1.0])]);
        let noise = NoiseSequence(vec![cv(&[0.5, 0.5]), cv(&[0.0, -1.0]), cv(&[1.0, 3.0])]);
        let r = rollout(
            &sys,
            &far_cbf(),
            &EnergyCost,
            &StateVec::zeros(2),
            &mean,
            &noise,
            &cfg,
        )
        .unwrap();
        let expected: f64 = mean
            .0
            .iter()
            .zip(&noise.0)
            .map(|(m, e)| (m + e).norm_squared())
            .sum();
        assert_eq!(r.cost, expected);
    }

    #[test]
    fn weights_equal_costs_are_uniform() {
        let w = importance_weights(&[3.0; 8], 1.0).unwrap();
        assert!(w.weights.iter().all(|&x| x == 1.0 / 8.0));
        assert_eq!(w.best_index, 0);
        assert_eq!(w.eta, 8.0);
    }

    #[test]
    fn weights_single_sample() {
        let w = importance_weights(&[123.4], 0.3).unwrap();
        assert_eq!(w.weights, vec![1.0]);
    }

    #[test]
    fn weights_three_to_one() {
        let lambda = 0.7;
        let w = importance_weights(&[0.0, lambda * 3f64.ln()], lambda).unwrap();
        assert!((w.weights[0] - 0.75).abs() < 1e-12);
        assert!((w.weights[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_skip_invalid_and_fail_when_all_invalid() {
        let w = importance_weights(&[f64::INFINITY, 2.0, f64::NAN, 2.0], 1.0).unwrap();
        assert_eq!(w.weights, vec![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(w.best_index, 1);
        assert!(matches!(
            importance_weights(&[f64::INFINITY, f64::NAN], 1.0),
            Err(Error::PlanningFailed(2))
        ));
    }

    #[test]
    fn weights_entropy() {
        let w = importance_weights(&[1.0; 4], 1.0).unwrap();
        assert!((w.entropy() - 4f64.ln()).abs() < 1e-15);
        let w = importance_weights(&[0.0, 1e6], 1.0).unwrap();
        assert_eq!(w.entropy(), 0.0);
    }

    #[test]
    fn update_mean_examples() {
        let mean = MeanControlSequence(vec![cv(&[1.0]), cv(&[2.0])]);
        let a = NoiseSequence(vec![cv(&[0.5]), cv(&[-0.5])]);
        let b = NoiseSequence(vec![cv(&[-0.5]), cv(&[0.5])]);
        let c = NoiseSequence(vec![cv(&[4.0]), cv(&[1.0])]);

        let all_on_c = update_mean(&mean, &[0.0, 0.0, 1.0], &[a.clone(), b.clone(), c.clone()]);
        assert_eq!(all_on_c, MeanControlSequence(vec![cv(&[5.0]), cv(&[3.0])]));

        let symmetric = update_mean(&mean, &[0.5, 0.5], &[a.clone(), b.clone()]);
        assert_eq!(symmetric, mean);

        let mixed = update_mean(&mean, &[0.5, 0.3, 0.2], &[a.clone(), b.clone(), c.clone()]);
        // direct summation
        let k0 = 1.0 + 0.5 * 0.5 + 0.3 * -0.5 + 0.2 * 4.0;
        let k1 = 2.0 + 0.5 * -0.5 + 0.3 * 0.5 + 0.2 * 1.0;
        assert!((mixed.0[0][0] - k0).abs() < 1e-15);
        assert!((mixed.0[1][0] - k1).abs() < 1e-15);
    }

    #[test]
    fn s_correction_examples() {
        let cfg = PlannerConfig::new(1, 1, 2.0, DMatrix::identity(2, 2), 0.1).unwrap();
        let mean = MeanControlSequence(vec![cv(&[1.0, 0.0])]);
        let noise = NoiseSequence(vec![cv(&[1.0, 1.0])]);
        assert!((s_cost_correction(&mean, &noise, &cfg) - 3.0).abs() < 1e-15);

        let zero = MeanControlSequence::zeros(1, 2);
        assert_eq!(s_cost_correction(&zero, &noise, &cfg), 0.0);

        let sigma = DMatrix::from_row_slice(2, 2, &[1.33, 0.2, 0.2, 0.33]);
        let cfg = PlannerConfig::new(1, 2, 1.0, sigma, 0.1).unwrap();
        let mean = MeanControlSequence(vec![cv(&[0.4, -1.0]), cv(&[2.0, 0.5])]);
        let half = NoiseSequence(mean.0.iter().map(|m| m * -0.5).collect());
        assert!(s_cost_correction(&mean, &half, &cfg).abs() < 1e-15);
    }

    #[test]
    fn shift_examples() {
        let m = MeanControlSequence(vec![cv(&[1.0]), cv(&[2.0]), cv(&[3.0])]);
        assert_eq!(
            m.clone().shifted(),
            MeanControlSequence(vec![cv(&[2.0]), cv(&[3.0]), cv(&[0.0])])
        );
        assert_eq!(
            m.shifted().shifted(),
            MeanControlSequence(vec![cv(&[3.0]), cv(&[0.0]), cv(&[0.0])])
        );
        let single = MeanControlSequence(vec![cv(&[7.0, -1.0])]);
        assert_eq!(single.shifted(), MeanControlSequence::zeros(1, 2));
    }

    #[test]
    fn single_sample_takes_all_weight() {
        let sys = LinearSystem::integrator(2);
        let cfg = config(1, 4, DMatrix::identity(2, 2));
        let planner = Planner::new(cfg.clone(), 3);
        let mean = MeanControlSequence(vec![cv(&[0.1, 0.2]); 4]);
        let x0 = StateVec::zeros(2);
        let out = planner
            .plan(&sys, &far_cbf(), &TerminalOnly, &x0, &mean, 5)
            .unwrap();
        let eps = sample_noise(&mut NoiseStreams::new(3).stream(5, 0), &cfg);
        for k in 0..4 {
            assert_eq!(out.mean.0[k], &mean.0[k] + &eps.0[k]);
        }
        assert_eq!(out.v_best, &mean.0[0] + &eps.0[0]);
        assert_eq!(out.batch.weights.weights, vec![1.0]);
    }

    #[test]
    fn zero_noise_leaves_mean_unchanged() {
        let sys = LinearSystem::integrator(2);
        let planner = Planner::new(config(16, 4, DMatrix::identity(2, 2)), 0)
            .with_noise_mode(NoiseMode::Zero);
        let mean = MeanControlSequence(vec![cv(&[0.3, -0.2]); 4]);
        let out = planner
            .plan(
                &sys,
                &far_cbf(),
                &TerminalOnly,
                &StateVec::zeros(2),
                &mean,
                0,
            )
            .unwrap();
        assert_eq!(out.mean, mean);
        assert_eq!(out.v_best, mean.0[0]);
    }

    #[test]
    fn plan_is_independent_of_worker_count() {
        let sys = LinearSystem::integrator(2);
        let cfg = config(
            64,
            6,
            DMatrix::from_row_slice(2, 2, &[1.33, 0.0, 0.0, 0.33]),
        );
        let mean = MeanControlSequence::zeros(6, 2);
        let x0 = StateVec::from_vec(vec![1.0, 2.0]);
        let serial = Planner::new(cfg.clone(), 11)
            .plan(&sys, &far_cbf(), &TerminalOnly, &x0, &mean, 2)
            .unwrap();
        let parallel = Planner::new(cfg, 11)
            .with_workers(4)
            .unwrap()
            .plan(&sys, &far_cbf(), &TerminalOnly, &x0, &mean, 2)
            .unwrap();
        assert_eq!(serial.mean, parallel.mean);
        assert_eq!(serial.v_best, parallel.v_best);
        assert_eq!(serial.batch.costs, parallel.batch.costs);
        assert_eq!(serial.batch.weights, parallel.batch.weights);
    }

    #[test]
    fn s_correction_changes_scores_not_costs() {
        let sys = LinearSystem::integrator(2);
        let cfg = config(8, 3, DMatrix::identity(2, 2)).with_s_correction(true);
        let mean = MeanControlSequence(vec![cv(&[1.0, 0.0]); 3]);
        let out = Planner::new(cfg.clone(), 1)
            .plan(
                &sys,
                &far_cbf(),
                &TerminalOnly,
                &StateVec::zeros(2),
                &mean,
                0,
            )
            .unwrap();
        for j in 0..8 {
            let corr = s_cost_correction(&mean, &out.batch.noises[j], &cfg);
            assert_eq!(out.batch.scores[j], out.batch.costs[j] + corr);
        }
    }
}
