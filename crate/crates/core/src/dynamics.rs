//! Control-affine dynamics `x' = f(x) + g(x) u` and the integrators used by
//! the planner (explicit Euler, inside the safe discrete map) and the
//! executor (classical RK4 with the control held over the step).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVec = DVector<f64>;
pub type ControlVec = DVector<f64>;

/// A control-affine system. Implementations must be pure so that rollout
/// workers can evaluate them concurrently.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Drift field `f(x)`, length `n`.
    fn drift(&self, x: &StateVec) -> StateVec;

    /// Actuation matrix `g(x)`, `n x m`.
    fn actuation(&self, x: &StateVec) -> DMatrix<f64>;

    /// `f(x) + g(x) u` without dimension checks.
    fn vector_field(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        debug_assert_eq!(x.len(), self.state_dim());
        debug_assert_eq!(u.len(), self.control_dim());
        let mut dx = self.drift(x);
        dx.gemv(1.0, &self.actuation(x), u, 1.0);
        dx
    }
}

impl<S: SystemModel + ?Sized> SystemModel for &S {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        (**self).drift(x)
    }
    fn actuation(&self, x: &StateVec) -> DMatrix<f64> {
        (**self).actuation(x)
    }
    fn vector_field(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        (**self).vector_field(x, u)
    }
}

/// Checks that a model's outputs have the declared shapes at a probe state.
pub fn validate_model(sys: &dyn SystemModel, probe: &StateVec) -> Result<()> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    check_len("probe state", n, probe.len())?;
    check_len("drift output", n, sys.drift(probe).len())?;
    let g = sys.actuation(probe);
    check_len("actuation rows", n, g.nrows())?;
    check_len("actuation columns", m, g.ncols())?;
    Ok(())
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(what: &'static str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Evaluates `f(x) + g(x) u` after checking dimensions.
pub fn eval_vector_field(sys: &dyn SystemModel, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
    check_len("state", sys.state_dim(), x.len())?;
    check_len("control", sys.control_dim(), u.len())?;
    Ok(sys.vector_field(x, u))
}

/// One classical Runge-Kutta step with `u` held constant over `dt`.
pub fn rk4_step(sys: &dyn SystemModel, x: &StateVec, u: &ControlVec, dt: f64) -> Result<StateVec> {
    check_len("state", sys.state_dim(), x.len())?;
    check_len("control", sys.control_dim(), u.len())?;
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "rk4 step size must be >= 0, got {dt}"
        )));
    }
    if dt == 0.0 {
        return Ok(x.clone());
    }

    let stage = |k: &StateVec, idx: usize| -> Result<()> {
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Integration { stage: idx })
        }
    };

    let k1 = sys.vector_field(x, u);
    stage(&k1, 1)?;
    let k2 = sys.vector_field(&(x + &k1 * (0.5 * dt)), u);
    stage(&k2, 2)?;
    let k3 = sys.vector_field(&(x + &k2 * (0.5 * dt)), u);
    stage(&k3, 3)?;
    let k4 = sys.vector_field(&(x + &k3 * dt), u);
    stage(&k4, 4)?;

    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::Integration { stage: 5 })
    }
}

/// One explicit Euler step `x + (f(x) + g(x) u) dt`.
pub fn euler_step(sys: &dyn SystemModel, x: &StateVec, u: &ControlVec, dt: f64) -> StateVec {
    let mut next = sys.vector_field(x, u);
    next *= dt;
    next += x;
    next
}

/// Linear time-invariant system `x' = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_len("A columns", a.nrows(), a.ncols())?;
        check_len("B rows", a.nrows(), b.nrows())?;
        Ok(Self { a, b })
    }

    /// `x' = u` in `n` dimensions.
    pub fn integrator(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::identity(n, n),
        }
    }
}

impl SystemModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        &self.a * x
    }
    fn actuation(&self, _x: &StateVec) -> DMatrix<f64> {
        self.b.clone()
    }
}
