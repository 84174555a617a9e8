//! Composite control barrier functions and the closed-form safety filter.
//!
//! Each constraint `h_j` with relative degree `d_j` is lowered to a
//! degree-one barrier through the cascade
//!
//! ```text
//! b_{j,0} = h_j,    b_{j,i+1} = L_f b_{j,i} + c_{j,i} b_{j,i}
//! ```
//!
//! and the terminal members `b_{j,d_j-1}` are merged by a log-sum-exp soft
//! minimum into a single barrier `h`. The filter then solves
//!
//! ```text
//! min  1/2 |u - v|^2 + gamma/2 mu^2   s.t.  L_f h + L_g h u + a h + mu h >= 0
//! ```
//!
//! in closed form.

use serde::Serialize;
use smallvec::SmallVec;

use crate::dynamics::{check_finite, check_len, ControlVec, StateVec, SystemModel};
use crate::error::{Error, Result};

/// Cascade values `(b_0, ..., b_{d-1})` of one constraint.
pub type Cascade = SmallVec<[f64; 4]>;

/// Cascade values and terminal gradient evaluated together.
#[derive(Debug, Clone)]
pub struct BarrierEval {
    pub cascade: Cascade,
    /// `None` where the terminal cascade member is not differentiable.
    pub gradient: Option<StateVec>,
}

impl BarrierEval {
    pub fn terminal(&self) -> f64 {
        *self.cascade.last().expect("cascade is never empty")
    }
}

/// One safety constraint together with its barrier cascade.
///
/// Implementors supply the cascade and the gradient of its last member in
/// closed form. Class-K functions are linear, `alpha_i(s) = c_i s`.
pub trait Barrier: Send + Sync {
    fn name(&self) -> &str {
        "barrier"
    }

    fn relative_degree(&self) -> usize;

    /// Gains `c_0, ..., c_{d-2}`; empty for relative degree one.
    fn class_k_gains(&self) -> &[f64];

    /// `(b_0, ..., b_{d-1})` with `b_0 = h_j(x)`.
    fn cascade_values(&self, x: &StateVec) -> Cascade;

    /// Gradient of `b_{d-1}` with respect to the full state.
    fn terminal_gradient(&self, x: &StateVec) -> Option<StateVec>;

    /// Both of the above. Override when they share subexpressions.
    fn evaluate(&self, x: &StateVec) -> BarrierEval {
        BarrierEval {
            cascade: self.cascade_values(x),
            gradient: self.terminal_gradient(x),
        }
    }
}

/// Log-sum-exp soft minimum `-(1/rho) ln sum_i exp(-rho z_i)`.
pub fn softmin(values: &[f64], rho: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("softmin of an empty vector".into()));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "softmin sharpness must be > 0, got {rho}"
        )));
    }
    if values.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("softmin input"));
    }
    Ok(softmin_unchecked(values, rho))
}

pub(crate) fn softmin_unchecked(values: &[f64], rho: f64) -> f64 {
    let (imin, min) = argmin(values);
    let rest: f64 = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imin)
        .map(|(_, &z)| (-rho * (z - min)).exp())
        .sum();
    shifted_softmin(min, rest, values.len(), rho)
}

/// Soft minimum and its softmax weights, written into `weights`.
pub(crate) fn softmin_with_weights(values: &[f64], rho: f64, weights: &mut Vec<f64>) -> f64 {
    let (imin, min) = argmin(values);
    weights.clear();
    weights.extend(values.iter().map(|&z| (-rho * (z - min)).exp()));
    let rest: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imin)
        .map(|(_, &w)| w)
        .sum();
    let total = 1.0 + rest;
    for w in weights.iter_mut() {
        *w /= total;
    }
    shifted_softmin(min, rest, values.len(), rho)
}

fn argmin(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, z)| if z < best.1 { (i, z) } else { best },
        )
}

// The minimum's own term is exactly one, so the sum is 1 + rest and ln_1p
// keeps full precision when the other terms are tiny. The clamp pins the
// result inside [min - ln(l)/rho, min] despite rounding in ln_1p.
fn shifted_softmin(min: f64, rest: f64, len: usize, rho: f64) -> f64 {
    let lower = min - (len as f64).ln() / rho;
    (min - rest.ln_1p() / rho).max(lower)
}

/// Central finite-difference gradient. Intended for cross-checking
/// analytic gradients in tests, never for control.
pub fn finite_difference_gradient(
    f: impl Fn(&StateVec) -> f64,
    x: &StateVec,
    step: f64,
) -> StateVec {
    let mut probe = x.clone();
    StateVec::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        }),
    )
}

/// What the filter does when it must intervene but `L_g h` vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Return the desired control unmodified.
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterDiagnostics {
    pub h_value: f64,
    /// `omega(x, v, 0)`.
    pub omega_at_v: f64,
    /// `|u* - v|`.
    pub correction_norm: f64,
    /// `L_g h L_g h^T + h^2 / gamma`.
    pub denominator: f64,
    pub constraint_active: bool,
}

/// Composite barrier and its gradient at one state, plus the cascade
/// statistics needed for safe-set checks.
#[derive(Debug, Clone)]
pub struct CompositeEval {
    pub h: f64,
    pub gradient: Option<StateVec>,
    /// Softmax weights over the terminal cascade members; sum to one.
    pub weights: Vec<f64>,
    /// Minimum of `b_{j,i}` over `i <= max(d_j - 2, 0)` and all `j`.
    pub min_cascade: f64,
    /// Minimum of the raw constraints `h_j`.
    pub min_constraint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub in_safe_set: bool,
    pub min_cascade: f64,
    pub h: f64,
    pub min_constraint: f64,
}

/// Terms of the barrier condition at one state.
#[derive(Debug, Clone)]
pub struct LieTerms {
    pub h: f64,
    /// `L_f h(x)`.
    pub lf: f64,
    /// `L_g h(x)`, transposed to a length-`m` vector.
    pub lg: ControlVec,
}

pub struct CompositeCbf {
    barriers: Vec<Box<dyn Barrier>>,
    rho: f64,
    alpha_gain: f64,
    gamma: f64,
    denom_eps: f64,
    on_degenerate: DegeneratePolicy,
}

impl std::fmt::Debug for CompositeCbf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositeCbf")
            .field(
                "barriers",
                &self.barriers.iter().map(|b| b.name()).collect::<Vec<_>>(),
            )
            .field("rho", &self.rho)
            .field("alpha_gain", &self.alpha_gain)
            .field("gamma", &self.gamma)
            .field("denom_eps", &self.denom_eps)
            .field("on_degenerate", &self.on_degenerate)
            .finish()
    }
}

pub const DEFAULT_DENOM_EPS: f64 = 1e-12;

impl CompositeCbf {
    pub fn new(
        barriers: Vec<Box<dyn Barrier>>,
        rho: f64,
        alpha_gain: f64,
        gamma: f64,
    ) -> Result<Self> {
        if barriers.is_empty() {
            return Err(Error::InvalidConfig(
                "composite barrier needs at least one constraint".into(),
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be > 0, got {rho}")));
        }
        if !(alpha_gain >= 0.0 && alpha_gain.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha gain must be >= 0, got {alpha_gain}"
            )));
        }
        if !(gamma > 0.0) || gamma.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {gamma}"
            )));
        }
        for b in &barriers {
            let d = b.relative_degree();
            if d == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{}: relative degree must be >= 1",
                    b.name()
                )));
            }
            let gains = b.class_k_gains();
            if gains.len() != d - 1 {
                return Err(Error::InvalidConfig(format!(
                    "{}: expected {} class-K gains, got {}",
                    b.name(),
                    d - 1,
                    gains.len()
                )));
            }
            if let Some(c) = gains.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
                return Err(Error::InvalidConfig(format!(
                    "{}: class-K gain {c} is not positive",
                    b.name()
                )));
            }
        }
        Ok(Self {
            barriers,
            rho,
            alpha_gain,
            gamma,
            denom_eps: DEFAULT_DENOM_EPS,
            on_degenerate: DegeneratePolicy::Error,
        })
    }

    pub fn with_denom_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "denominator guard must be >= 0, got {eps}"
            )));
        }
        self.denom_eps = eps;
        Ok(self)
    }

    pub fn with_degenerate_policy(mut self, policy: DegeneratePolicy) -> Self {
        self.on_degenerate = policy;
        self
    }

    pub fn barriers(&self) -> &[Box<dyn Barrier>] {
        &self.barriers
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn alpha_gain(&self) -> f64 {
        self.alpha_gain
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn denom_eps(&self) -> f64 {
        self.denom_eps
    }

    /// Evaluates every barrier once and assembles the composite.
    pub fn evaluate(&self, x: &StateVec) -> CompositeEval {
        let l = self.barriers.len();
        let mut terminals: SmallVec<[f64; 16]> = SmallVec::with_capacity(l);
        let mut gradients: SmallVec<[Option<StateVec>; 16]> = SmallVec::with_capacity(l);
        let mut min_cascade = f64::INFINITY;
        let mut min_constraint = f64::INFINITY;

        for barrier in &self.barriers {
            let eval = barrier.evaluate(x);
            debug_assert_eq!(eval.cascade.len(), barrier.relative_degree());
            let d = eval.cascade.len();
            let last_checked = d.saturating_sub(2);
            for &b in &eval.cascade[..=last_checked] {
                min_cascade = min_cascade.min(b);
            }
            min_constraint = min_constraint.min(eval.cascade[0]);
            terminals.push(eval.terminal());
            gradients.push(eval.gradient);
        }

        let mut weights = Vec::with_capacity(l);
        let h = softmin_with_weights(&terminals, self.rho, &mut weights);

        let gradient = if gradients.iter().all(Option::is_some) {
            let mut grad = StateVec::zeros(x.len());
            for (w, g) in weights.iter().zip(&gradients) {
                grad.axpy(*w, g.as_ref().unwrap(), 1.0);
            }
            Some(grad)
        } else {
            None
        };

        CompositeEval {
            h,
            gradient,
            weights,
            min_cascade,
            min_constraint,
        }
    }

    /// `h(x)` alone.
    pub fn composite_value(&self, x: &StateVec) -> f64 {
        let terminals: SmallVec<[f64; 16]> = self
            .barriers
            .iter()
            .map(|b| *b.cascade_values(x).last().expect("cascade is never empty"))
            .collect();
        softmin_unchecked(&terminals, self.rho)
    }

    /// `h(x)` and its gradient (softmax-weighted chain rule).
    pub fn value_and_gradient(&self, x: &StateVec) -> Result<(f64, StateVec)> {
        check_finite("state", x)?;
        let eval = self.evaluate(x);
        match eval.gradient {
            Some(g) => Ok((eval.h, g)),
            None => Err(Error::NonDifferentiable(x.as_slice().to_vec())),
        }
    }

    pub fn lie_terms(&self, sys: &dyn SystemModel, x: &StateVec) -> Result<LieTerms> {
        let (h, grad) = self.value_and_gradient(x)?;
        Ok(self.lie_terms_from(sys, x, h, &grad))
    }

    fn lie_terms_from(
        &self,
        sys: &dyn SystemModel,
        x: &StateVec,
        h: f64,
        grad: &StateVec,
    ) -> LieTerms {
        let lf = grad.dot(&sys.drift(x));
        let lg = sys.actuation(x).tr_mul(grad);
        LieTerms { h, lf, lg }
    }

    /// `omega(x, u, mu) = L_f h + L_g h u + alpha(h) + mu h`.
    pub fn omega(
        &self,
        sys: &dyn SystemModel,
        x: &StateVec,
        u: &ControlVec,
        mu: f64,
    ) -> Result<f64> {
        check_len("state", sys.state_dim(), x.len())?;
        check_len("control", sys.control_dim(), u.len())?;
        let t = self.lie_terms(sys, x)?;
        Ok(t.lf + t.lg.dot(u) + self.alpha_gain * t.h + mu * t.h)
    }

    /// Minimally invasive safe control for desired control `v`.
    pub fn safe_control(
        &self,
        sys: &dyn SystemModel,
        x: &StateVec,
        v: &ControlVec,
    ) -> Result<(ControlVec, FilterDiagnostics)> {
        check_len("state", sys.state_dim(), x.len())?;
        check_len("control", sys.control_dim(), v.len())?;
        check_finite("desired control", v)?;
        check_finite("state", x)?;
        let eval = self.evaluate(x);
        self.filter_from_eval(sys, x, v, &eval)
    }

    /// Filter step reusing an existing composite evaluation at `x`.
    pub(crate) fn filter_from_eval(
        &self,
        sys: &dyn SystemModel,
        x: &StateVec,
        v: &ControlVec,
        eval: &CompositeEval,
    ) -> Result<(ControlVec, FilterDiagnostics)> {
        let grad = eval
            .gradient
            .as_ref()
            .ok_or_else(|| Error::NonDifferentiable(x.as_slice().to_vec()))?;
        let LieTerms { h, lf, lg } = self.lie_terms_from(sys, x, eval.h, grad);
        let omega_at_v = lf + lg.dot(v) + self.alpha_gain * h;
        let denominator = lg.norm_squared() + h * h / self.gamma;

        let mut diag = FilterDiagnostics {
            h_value: h,
            omega_at_v,
            correction_norm: 0.0,
            denominator,
            constraint_active: omega_at_v < 0.0,
        };
        if !diag.constraint_active {
            return Ok((v.clone(), diag));
        }
        if !(denominator > 0.0 && denominator >= self.denom_eps) {
            return match self.on_degenerate {
                DegeneratePolicy::Error => Err(Error::degenerate(x, diag)),
                DegeneratePolicy::PassThrough => Ok((v.clone(), diag)),
            };
        }
        let scale = -omega_at_v / denominator;
        let mut u = v.clone();
        u.axpy(scale, &lg, 1.0);
        diag.correction_norm = scale.abs() * lg.norm();
        Ok((u, diag))
    }

    /// Slack value at the filter optimum, `gamma^{-1} h max(0, -omega) / denom`.
    pub fn optimal_slack(diag: &FilterDiagnostics, gamma: f64) -> f64 {
        if !diag.constraint_active || diag.denominator <= 0.0 {
            return 0.0;
        }
        diag.h_value * (-diag.omega_at_v) / (gamma * diag.denominator)
    }

    /// Membership in the certified safe set `{h >= 0} ∩ C`.
    pub fn membership(&self, x: &StateVec) -> Membership {
        let eval = self.evaluate(x);
        Membership {
            in_safe_set: eval.h >= 0.0 && eval.min_cascade >= 0.0,
            min_cascade: eval.min_cascade,
            h: eval.h,
            min_constraint: eval.min_constraint,
        }
    }
}
