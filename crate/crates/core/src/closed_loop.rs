//! Dual-rate receding-horizon executor.
//!
//! Every `Ts` the planner produces a desired control `v`; that `v` is held
//! for `Ts / dt` inner steps, each of which re-runs the safety filter at the
//! current state and integrates the true dynamics over `dt` with RK4. The
//! mean sequence is shifted after each tick.

use serde::Serialize;

use crate::cbf::{CompositeCbf, FilterDiagnostics, Membership};
use crate::dynamics::{rk4_step, ControlVec, StateVec, SystemModel};
use crate::error::{Error, Result};
use crate::planner::{AuditStats, CostSpec, MeanControlSequence, Planner};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    total_time: f64,
    ts: f64,
    dt: f64,
    inner_steps: usize,
    ticks: usize,
    stop_radius: Option<f64>,
}

impl SimConfig {
    /// Requires `0 < dt <= ts <= total_time` and `ts` an integer multiple of `dt`.
    pub fn new(total_time: f64, ts: f64, dt: f64, stop_radius: Option<f64>) -> Result<Self> {
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        if !(finite_pos(total_time) && finite_pos(ts) && finite_pos(dt)) {
            return Err(Error::InvalidConfig("T, Ts and dt must be positive".into()));
        }
        if dt > ts || ts > total_time {
            return Err(Error::InvalidConfig(format!(
                "need dt <= Ts <= T, got dt = {dt}, Ts = {ts}, T = {total_time}"
            )));
        }
        let ratio = ts / dt;
        let inner_steps = ratio.round();
        if (ratio - inner_steps).abs() > 1e-9 * ratio {
            return Err(Error::InvalidConfig(format!(
                "Ts = {ts} is not a multiple of dt = {dt}"
            )));
        }
        if let Some(r) = stop_radius {
            if !(r >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "stop radius must be >= 0, got {r}"
                )));
            }
        }
        let ticks = (total_time / ts + 1e-9).floor() as usize;
        Ok(Self {
            total_time,
            ts,
            dt,
            inner_steps: inner_steps as usize,
            ticks,
            stop_radius,
        })
    }

    pub fn with_total_time(self, total_time: f64) -> Result<Self> {
        Self::new(total_time, self.ts, self.dt, self.stop_radius)
    }

    pub fn with_stop_radius(self, stop_radius: Option<f64>) -> Result<Self> {
        Self::new(self.total_time, self.ts, self.dt, stop_radius)
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }
    pub fn ts(&self) -> f64 {
        self.ts
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    /// `floor(Ts / dt)`.
    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }
    /// Planning ticks at `t = 0, Ts, 2 Ts, ...` strictly before `T`.
    pub fn ticks(&self) -> usize {
        self.ticks
    }
    pub fn stop_radius(&self) -> Option<f64> {
        self.stop_radius
    }
}

/// One inner (filter + integrate) step; `x` is the state the control was applied from.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub tick: usize,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub h: f64,
    pub min_cascade: f64,
    pub min_constraint: f64,
    pub filter: FilterDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct TickRecord {
    pub t: f64,
    pub best_cost: f64,
    pub eta: f64,
    pub weight_entropy: f64,
    pub audit: AuditStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    pub ticks: Vec<TickRecord>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub final_membership: Membership,
    pub stopped_early: bool,
}

impl TrajectoryLog {
    fn new(x0: &StateVec, membership: Membership) -> Self {
        Self {
            steps: Vec::new(),
            ticks: Vec::new(),
            final_time: 0.0,
            final_state: x0.as_slice().to_vec(),
            final_membership: membership,
            stopped_early: false,
        }
    }

    /// Aggregate audit over every sampled planner state.
    pub fn rollout_audit(&self) -> AuditStats {
        let mut total = AuditStats::default();
        for t in &self.ticks {
            total.merge(&t.audit);
        }
        total
    }

    /// Audit of the executed trajectory, including the final state.
    pub fn executed_audit(&self) -> AuditStats {
        let mut total = AuditStats::default();
        for s in &self.steps {
            total.record(s.h, s.min_cascade);
        }
        total.record(self.final_membership.h, self.final_membership.min_cascade);
        total
    }

    pub fn min_h(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.h)
            .fold(self.final_membership.h, f64::min)
    }

    pub fn min_cascade(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.min_cascade)
            .fold(self.final_membership.min_cascade, f64::min)
    }

    pub fn min_constraint(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.min_constraint)
            .fold(self.final_membership.min_constraint, f64::min)
    }
}

/// A run that stopped on an error. The log holds everything up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("run aborted at t = {:.3}: {cause}", log.final_time)]
pub struct RunAbort {
    pub log: Box<TrajectoryLog>,
    #[source]
    pub cause: Error,
}

/// Runs the closed loop from `x0` with an all-zero initial mean.
pub fn run(
    sys: &dyn SystemModel,
    cbf: &CompositeCbf,
    cost: &dyn CostSpec,
    x0: &StateVec,
    planner: &Planner,
    sim: &SimConfig,
) -> std::result::Result<TrajectoryLog, RunAbort> {
    let mean = MeanControlSequence::zeros(planner.config().horizon(), sys.control_dim());
    run_with_mean(sys, cbf, cost, x0, mean, planner, sim)
}

/// Runs the closed loop starting from the given mean sequence.
pub fn run_with_mean(
    sys: &dyn SystemModel,
    cbf: &CompositeCbf,
    cost: &dyn CostSpec,
    x0: &StateVec,
    mut mean: MeanControlSequence,
    planner: &Planner,
    sim: &SimConfig,
) -> std::result::Result<TrajectoryLog, RunAbort> {
    let start = cbf.membership(x0);
    let mut log = TrajectoryLog::new(x0, start);
    let abort = |log: TrajectoryLog, cause: Error| RunAbort {
        log: Box::new(log),
        cause,
    };

    if x0.len() != sys.state_dim() || !x0.iter().all(|v| v.is_finite()) {
        return Err(abort(log, Error::NonFinite("initial state")));
    }
    if !start.in_safe_set {
        let cause = Error::InitialStateUnsafe {
            h: start.h,
            min_cascade: start.min_cascade,
        };
        return Err(abort(log, cause));
    }

    let mut x = x0.clone();
    for tick in 0..sim.ticks() {
        let t_tick = tick as f64 * sim.ts();
        let plan = match planner.plan(sys, cbf, cost, &x, &mean, tick as u64) {
            Ok(p) => p,
            Err(e) => return Err(abort(log, e)),
        };
        log.ticks.push(TickRecord {
            t: t_tick,
            best_cost: plan.batch.best_cost(),
            eta: plan.batch.weights.eta,
            weight_entropy: plan.batch.weights.entropy(),
            audit: plan.batch.audit,
        });
        mean = plan.mean;
        let v = plan.v_best;

        for i in 0..sim.inner_steps() {
            let t = t_tick + i as f64 * sim.dt();
            match inner_step(sys, cbf, &x, &v) {
                Ok((u, eval_h, min_cascade, min_constraint, diag)) => {
                    let next = match rk4_step(sys, &x, &u, sim.dt()) {
                        Ok(n) => n,
                        Err(e) => return Err(abort(log, e)),
                    };
                    log.steps.push(StepRecord {
                        t,
                        tick,
                        x: x.as_slice().to_vec(),
                        v: v.as_slice().to_vec(),
                        u: u.as_slice().to_vec(),
                        h: eval_h,
                        min_cascade,
                        min_constraint,
                        filter: diag,
                    });
                    x = next;
                    log.final_time = t + sim.dt();
                    log.final_state = x.as_slice().to_vec();
                    log.final_membership = cbf.membership(&x);
                }
                Err(e) => return Err(abort(log, e)),
            }
        }
        mean.shift();

        if let (Some(radius), Some(dist)) = (sim.stop_radius(), cost.goal_distance(&x)) {
            if dist <= radius {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(log)
}

type InnerStep = (ControlVec, f64, f64, f64, FilterDiagnostics);

fn inner_step(
    sys: &dyn SystemModel,
    cbf: &CompositeCbf,
    x: &StateVec,
    v: &ControlVec,
) -> Result<InnerStep> {
    let eval = cbf.evaluate(x);
    let (u, diag) = cbf.filter_from_eval(sys, x, v, &eval)?;
    Ok((u, eval.h, eval.min_cascade, eval.min_constraint, diag))
}
