//! Nonholonomic ground robot world: unicycle dynamics, p-norm obstacles
//! and an enclosing wall, speed limits, and quadratic goal costs.
//!
//! Scenarios load from JSON. The default arena ships in
//! `scenarios/reference.json`; its obstacle and wall geometry is an
//! approximate reconstruction and may be overridden freely.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::cbf::{Barrier, BarrierEval, Cascade, CompositeCbf};
use crate::closed_loop::SimConfig;
use crate::dynamics::{ControlVec, StateVec, SystemModel};
use crate::error::{Error, Result};
use crate::planner::{CostSpec, PlannerConfig};

pub const QX: usize = 0;
pub const QY: usize = 1;
pub const NU: usize = 2;
pub const THETA: usize = 3;

/// Built-in scenario file.
pub const DEFAULT_SCENARIO_JSON: &str = include_str!("../scenarios/reference.json");

/// `q' = nu (cos theta, sin theta)`, `nu' = u1`, `theta' = u2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unicycle;

pub fn unicycle_model() -> Unicycle {
    Unicycle
}

impl SystemModel for Unicycle {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        let (s, c) = x[THETA].sin_cos();
        StateVec::from_vec(vec![x[NU] * c, x[NU] * s, 0.0, 0.0])
    }
    fn actuation(&self, _x: &StateVec) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }
    fn vector_field(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        let (s, c) = x[THETA].sin_cos();
        StateVec::from_vec(vec![x[NU] * c, x[NU] * s, u[0], u[1]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleState {
    pub qx: f64,
    pub qy: f64,
    pub nu: f64,
    pub theta: f64,
}

impl From<UnicycleState> for StateVec {
    fn from(s: UnicycleState) -> Self {
        StateVec::from_vec(vec![s.qx, s.qy, s.nu, s.theta])
    }
}

impl TryFrom<&StateVec> for UnicycleState {
    type Error = Error;
    fn try_from(x: &StateVec) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::DimensionMismatch {
                what: "unicycle state",
                expected: 4,
                got: x.len(),
            });
        }
        Ok(Self {
            qx: x[QX],
            qy: x[QY],
            nu: x[NU],
            theta: x[THETA],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
    pub c: f64,
    pub p: f64,
    #[serde(default = "default_obstacle_gain")]
    pub alpha0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    pub ax: f64,
    pub ay: f64,
    pub c: f64,
    pub p: f64,
    #[serde(default = "default_wall_gain")]
    pub alpha0: f64,
}

fn default_obstacle_gain() -> f64 {
    2.5
}
fn default_wall_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// Safe outside the level set: `h = |A(q - b)|_p - c`.
    Outside,
    /// Safe inside: `h = c - |A(q - b)|_p`.
    Inside,
}

/// Position constraint of relative degree two built from a weighted
/// p-norm, with cascade `b_1 = L_f b_0 + k b_0`.
#[derive(Debug, Clone)]
pub struct PNormBarrier {
    name: String,
    scale: [f64; 2],
    center: [f64; 2],
    c: f64,
    p: f64,
    // exponent p - 2 as an integer when p is integral, for powi
    p_minus_2: Option<i32>,
    gain: [f64; 1],
    side: Side,
}

impl PNormBarrier {
    fn new(
        name: String,
        scale: [f64; 2],
        center: [f64; 2],
        c: f64,
        p: f64,
        gain: f64,
        side: Side,
    ) -> Result<Self> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(scale[0]) || !positive(scale[1]) || !positive(c) || !positive(gain) {
            return Err(Error::Scenario(format!(
                "{name}: scale factors, offset and gain must be > 0"
            )));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Scenario(format!(
                "{name}: norm order must be > 1, got {p}"
            )));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::Scenario(format!("{name}: center must be finite")));
        }
        let p_minus_2 = (p.fract() == 0.0 && p <= 64.0).then(|| p as i32 - 2);
        Ok(Self {
            name,
            scale,
            center,
            c,
            p,
            p_minus_2,
            gain: [gain],
            side,
        })
    }

    fn sign(&self) -> f64 {
        match self.side {
            Side::Outside => 1.0,
            Side::Inside => -1.0,
        }
    }

    fn abs_pow_p_minus_2(&self, v: f64) -> f64 {
        match self.p_minus_2 {
            Some(e) => v.abs().powi(e),
            None => v.abs().powf(self.p - 2.0),
        }
    }

    fn eval_inner(&self, x: &StateVec, want_gradient: bool) -> BarrierEval {
        let sigma = self.sign();
        let k = self.gain[0];
        let [ax, ay] = self.scale;
        let d = [ax * (x[QX] - self.center[0]), ay * (x[QY] - self.center[1])];
        let pm2 = [self.abs_pow_p_minus_2(d[0]), self.abs_pow_p_minus_2(d[1])];
        // s_i = sign(d_i) |d_i|^(p-1)
        let s = [d[0] * pm2[0], d[1] * pm2[1]];
        let sum = d[0] * s[0] + d[1] * s[1];
        let (sin_t, cos_t) = x[THETA].sin_cos();
        let nu = x[NU];

        if sum == 0.0 {
            let b0 = -sigma * self.c;
            return BarrierEval {
                cascade: smallvec![b0, k * b0],
                gradient: None,
            };
        }

        let r = sum.powf(1.0 / self.p);
        let r1p = r / sum; // r^(1-p)
        let gq = [ax * s[0] * r1p, ay * s[1] * r1p]; // dr/dq
        let b0 = sigma * (r - self.c);
        let radial = gq[0] * cos_t + gq[1] * sin_t;
        let lf_b0 = sigma * nu * radial;
        let cascade: Cascade = smallvec![b0, lf_b0 + k * b0];

        if !want_gradient {
            return BarrierEval {
                cascade,
                gradient: None,
            };
        }

        // Hessian of r in d: (p-1) [ r^(1-p) diag|d_i|^(p-2) - r^(1-2p) s s^T ]
        let pm1 = self.p - 1.0;
        let r12p = r1p / sum;
        let hd00 = pm1 * (r1p * pm2[0] - r12p * s[0] * s[0]);
        let hd11 = pm1 * (r1p * pm2[1] - r12p * s[1] * s[1]);
        let hd01 = -pm1 * r12p * s[0] * s[1];
        let hq00 = ax * ax * hd00;
        let hq11 = ay * ay * hd11;
        let hq01 = ax * ay * hd01;

        let grad = [
            sigma * (nu * (hq00 * cos_t + hq01 * sin_t) + k * gq[0]),
            sigma * (nu * (hq01 * cos_t + hq11 * sin_t) + k * gq[1]),
            sigma * radial,
            sigma * nu * (-gq[0] * sin_t + gq[1] * cos_t),
        ];
        let gradient = grad
            .iter()
            .all(|g| g.is_finite())
            .then(|| StateVec::from_row_slice(&grad));
        BarrierEval { cascade, gradient }
    }
}

impl Barrier for PNormBarrier {
    fn name(&self) -> &str {
        &self.name
    }
    fn relative_degree(&self) -> usize {
        2
    }
    fn class_k_gains(&self) -> &[f64] {
        &self.gain
    }
    fn cascade_values(&self, x: &StateVec) -> Cascade {
        self.eval_inner(x, false).cascade
    }
    fn terminal_gradient(&self, x: &StateVec) -> Option<StateVec> {
        self.eval_inner(x, true).gradient
    }
    fn evaluate(&self, x: &StateVec) -> BarrierEval {
        self.eval_inner(x, true)
    }
}

pub fn obstacle_barrier(index: usize, spec: &ObstacleSpec) -> Result<PNormBarrier> {
    PNormBarrier::new(
        format!("obstacle{index}"),
        [spec.ax, spec.ay],
        [spec.bx, spec.by],
        spec.c,
        spec.p,
        spec.alpha0,
        Side::Outside,
    )
}

pub fn wall_barrier(spec: &WallSpec) -> Result<PNormBarrier> {
    PNormBarrier::new(
        "wall".to_string(),
        [spec.ax, spec.ay],
        [0.0, 0.0],
        spec.c,
        spec.p,
        spec.alpha0,
        Side::Inside,
    )
}

/// `h = offset + slope * nu`, relative degree one.
#[derive(Debug, Clone)]
pub struct SpeedBarrier {
    name: &'static str,
    offset: f64,
    slope: f64,
}

impl Barrier for SpeedBarrier {
    fn name(&self) -> &str {
        self.name
    }
    fn relative_degree(&self) -> usize {
        1
    }
    fn class_k_gains(&self) -> &[f64] {
        &[]
    }
    fn cascade_values(&self, x: &StateVec) -> Cascade {
        smallvec![self.offset + self.slope * x[NU]]
    }
    fn terminal_gradient(&self, _x: &StateVec) -> Option<StateVec> {
        let mut g = StateVec::zeros(4);
        g[NU] = self.slope;
        Some(g)
    }
}

/// Upper and lower speed limits `max - nu >= 0` and `nu - min >= 0`.
pub fn speed_barriers(limits: &SpeedLimits) -> Result<(SpeedBarrier, SpeedBarrier)> {
    if !(limits.max > limits.min) || !limits.max.is_finite() || !limits.min.is_finite() {
        return Err(Error::Scenario(format!(
            "speed limits need min < max, got [{}, {}]",
            limits.min, limits.max
        )));
    }
    Ok((
        SpeedBarrier {
            name: "speed_max",
            offset: limits.max,
            slope: -1.0,
        },
        SpeedBarrier {
            name: "speed_min",
            offset: -limits.min,
            slope: 1.0,
        },
    ))
}

/// Quadratic goal cost: terminal `2|q - q_d|^2`, running
/// `|q - q_d|^2 + 0.05 |v|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoalSpec {
    pub qd: [f64; 2],
    pub phi_weight: f64,
    pub run_weight: f64,
    pub ctrl_weight: f64,
}

impl GoalSpec {
    pub fn new(qd: [f64; 2]) -> Self {
        Self {
            qd,
            phi_weight: 2.0,
            run_weight: 1.0,
            ctrl_weight: 0.05,
        }
    }

    fn dist2(&self, x: &StateVec) -> f64 {
        let dx = x[QX] - self.qd[0];
        let dy = x[QY] - self.qd[1];
        dx * dx + dy * dy
    }
}

impl CostSpec for GoalSpec {
    fn terminal(&self, x: &StateVec) -> f64 {
        self.phi_weight * self.dist2(x)
    }
    fn running(&self, x: &StateVec, v: &ControlVec) -> f64 {
        self.run_weight * self.dist2(x) + self.ctrl_weight * v.norm_squared()
    }
    fn goal_distance(&self, x: &StateVec) -> Option<f64> {
        Some(self.dist2(x).sqrt())
    }
}

// ---------------------------------------------------------------------------
// Scenario file

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedLimits {
    pub max: f64,
    pub min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfSection {
    pub rho: f64,
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default = "default_denom_eps")]
    pub denom_eps: f64,
}

fn default_denom_eps() -> f64 {
    crate::cbf::DEFAULT_DENOM_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    #[serde(rename = "K")]
    pub samples: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub lambda: f64,
    pub sigma: Vec<Vec<f64>>,
    #[serde(rename = "Ts")]
    pub ts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "T")]
    pub total_time: f64,
    pub dt: f64,
    #[serde(default)]
    pub stop_radius: Option<f64>,
}

/// On-disk scenario description. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: String,
    pub obstacles: Vec<ObstacleSpec>,
    pub wall: WallSpec,
    pub speed: SpeedLimits,
    pub cbf: CbfSection,
    pub planner: PlannerSection,
    pub sim: SimSection,
    pub start: [f64; 4],
    pub goals: Vec<[f64; 2]>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn default_file() -> Self {
        Self::from_json(DEFAULT_SCENARIO_JSON).expect("built-in scenario parses")
    }

    pub fn build_cbf(&self) -> Result<CompositeCbf> {
        if self.system != "unicycle" {
            return Err(Error::Scenario(format!(
                "unsupported system {:?}",
                self.system
            )));
        }
        let mut barriers: Vec<Box<dyn Barrier>> = Vec::with_capacity(self.obstacles.len() + 3);
        for (i, o) in self.obstacles.iter().enumerate() {
            barriers.push(Box::new(obstacle_barrier(i + 1, o)?));
        }
        barriers.push(Box::new(wall_barrier(&self.wall)?));
        let (upper, lower) = speed_barriers(&self.speed)?;
        barriers.push(Box::new(upper));
        barriers.push(Box::new(lower));
        CompositeCbf::new(barriers, self.cbf.rho, self.cbf.alpha, self.cbf.gamma)?
            .with_denom_eps(self.cbf.denom_eps)
    }

    pub fn build_planner_config(&self) -> Result<PlannerConfig> {
        let p = &self.planner;
        if p.sigma.len() != 2 || p.sigma.iter().any(|row| row.len() != 2) {
            return Err(Error::Scenario("planner.sigma must be a 2x2 matrix".into()));
        }
        let sigma = DMatrix::from_fn(2, 2, |i, j| p.sigma[i][j]);
        PlannerConfig::new(p.samples, p.horizon, p.lambda, sigma, p.ts)
    }

    pub fn build_sim_config(&self) -> Result<SimConfig> {
        SimConfig::new(
            self.sim.total_time,
            self.planner.ts,
            self.sim.dt,
            self.sim.stop_radius,
        )
    }

    pub fn build(self) -> Result<Scenario> {
        let cbf = self.build_cbf()?;
        let planner = self.build_planner_config()?;
        let sim = self.build_sim_config()?;
        let start = StateVec::from_row_slice(&self.start);
        if !start.iter().all(|v| v.is_finite()) {
            return Err(Error::Scenario("start state must be finite".into()));
        }
        let goals = self.goals.iter().map(|&g| GoalSpec::new(g)).collect();
        Ok(Scenario {
            file: self,
            system: Unicycle,
            cbf,
            planner,
            sim,
            start,
            goals,
        })
    }
}

/// Fully configured scenario.
#[derive(Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub system: Unicycle,
    pub cbf: CompositeCbf,
    pub planner: PlannerConfig,
    pub sim: SimConfig,
    pub start: StateVec,
    pub goals: Vec<GoalSpec>,
}

impl Scenario {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        ScenarioFile::load(path)?.build()
    }

    pub fn goal(&self, index: usize) -> Result<GoalSpec> {
        self.goals.get(index).copied().ok_or_else(|| {
            Error::Scenario(format!(
                "goal index {index} out of range ({} goals)",
                self.goals.len()
            ))
        })
    }
}

/// The built-in arena with its four benchmark goals.
pub fn reference_scenario() -> Scenario {
    ScenarioFile::default_file()
        .build()
        .expect("built-in scenario is valid")
}
