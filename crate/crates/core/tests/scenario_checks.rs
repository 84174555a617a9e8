use gsmppi::cbf::{finite_difference_gradient, Cascade};
use gsmppi::dynamics::LinearSystem;
use gsmppi::planner::NoiseStreams;
use gsmppi::{
    reference_scenario, rollout, run, sample_noise, Barrier, CompositeCbf, ControlVec, CostSpec,
    MeanControlSequence, Planner, PlannerConfig, ScenarioFile, SimConfig, StateVec,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::smallvec;

fn random_state(rng: &mut ChaCha8Rng) -> StateVec {
    StateVec::from_vec(vec![
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-1.0..9.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    ])
}

fn relative_error(analytic: &StateVec, numeric: &StateVec) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(1e-8)
}

fn safe_states(count: usize, seed: u64) -> Vec<StateVec> {
    let sc = reference_scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = random_state(&mut rng);
        if sc.cbf.membership(&x).in_safe_set {
            out.push(x);
        }
    }
    out
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let sc = reference_scenario();
    let mut worst: f64 = 0.0;
    for x in safe_states(200, 11) {
        let (_, grad) = sc.cbf.value_and_gradient(&x).unwrap();
        let fd = finite_difference_gradient(|y| sc.cbf.composite_value(y), &x, 1e-5);
        worst = worst.max(relative_error(&grad, &fd));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn every_terminal_gradient_matches_finite_differences() {
    let sc = reference_scenario();
    let states = safe_states(120, 12);
    for b in sc.cbf.barriers() {
        let mut worst: f64 = 0.0;
        for x in &states {
            let grad = b
                .terminal_gradient(x)
                .expect("differentiable at safe states");
            let fd = finite_difference_gradient(|y| *b.cascade_values(y).last().unwrap(), x, 1e-5);
            worst = worst.max(relative_error(&grad, &fd));
        }
        assert!(worst < 1e-5, "{}: worst relative error {worst:e}", b.name());
    }
}

#[test]
fn obstacle_order_does_not_change_the_filter() {
    let file = ScenarioFile::default_file();
    let mut reversed = file.clone();
    reversed.obstacles.reverse();
    let a = file.build().unwrap();
    let b = reversed.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for x in safe_states(100, 14) {
        let v = ControlVec::from_vec(vec![
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ]);
        let ea = a.cbf.evaluate(&x);
        let eb = b.cbf.evaluate(&x);
        assert!((ea.h - eb.h).abs() <= 1e-12 * ea.h.abs().max(1.0));
        assert_eq!(ea.min_cascade, eb.min_cascade);
        let (ua, _) = a.cbf.safe_control(&a.system, &x, &v).unwrap();
        let (ub, _) = b.cbf.safe_control(&b.system, &x, &v).unwrap();
        assert!(
            (&ua - &ub).amax() <= 1e-9 * ua.amax().max(1.0),
            "{ua} vs {ub}"
        );
    }
}

#[test]
fn rollout_cost_regression() {
    let sc = reference_scenario();
    let goal = sc.goal(0).unwrap();
    let mut rng = NoiseStreams::new(0).stream(0, 0);
    let noise = sample_noise(&mut rng, &sc.planner);
    let mean = MeanControlSequence::zeros(sc.planner.horizon(), 2);
    let r = rollout(
        &sc.system,
        &sc.cbf,
        &goal,
        &sc.start,
        &mean,
        &noise,
        &sc.planner,
    )
    .unwrap();
    assert_eq!(r.states.len(), sc.planner.horizon() + 1);
    assert_eq!(r.audit.states as usize, sc.planner.horizon() + 1);
    let frozen = ROLLOUT_COST;
    assert!(
        (r.cost - frozen).abs() <= 1e-9 * frozen.abs(),
        "cost {:.17e}",
        r.cost
    );
}

// Seed 0, tick 0, sample 0 from the built-in start toward goal 0.
const ROLLOUT_COST: f64 = 3.741_897_715_129_525e3;

/// `|x - c|^2 - r^2` for a planar single integrator.
struct Disc {
    center: [f64; 2],
    radius: f64,
}

impl Barrier for Disc {
    fn relative_degree(&self) -> usize {
        1
    }
    fn class_k_gains(&self) -> &[f64] {
        &[]
    }
    fn cascade_values(&self, x: &StateVec) -> Cascade {
        let (dx, dy) = (x[0] - self.center[0], x[1] - self.center[1]);
        smallvec![dx * dx + dy * dy - self.radius * self.radius]
    }
    fn terminal_gradient(&self, x: &StateVec) -> Option<StateVec> {
        Some(StateVec::from_vec(vec![
            2.0 * (x[0] - self.center[0]),
            2.0 * (x[1] - self.center[1]),
        ]))
    }
}

struct Reach([f64; 2]);

impl CostSpec for Reach {
    fn terminal(&self, x: &StateVec) -> f64 {
        10.0 * ((x[0] - self.0[0]).powi(2) + (x[1] - self.0[1]).powi(2))
    }
    fn running(&self, x: &StateVec, v: &ControlVec) -> f64 {
        (x[0] - self.0[0]).powi(2) + (x[1] - self.0[1]).powi(2) + 0.01 * v.norm_squared()
    }
}

fn disc_setup() -> (LinearSystem, CompositeCbf, Reach, StateVec, PlannerConfig) {
    let cbf = CompositeCbf::new(
        vec![Box::new(Disc {
            center: [0.0, 0.0],
            radius: 1.0,
        })],
        20.0,
        0.5,
        1e24,
    )
    .unwrap();
    let config = PlannerConfig::new(256, 20, 1.0, DMatrix::identity(2, 2) * 4.0, 0.1).unwrap();
    (
        LinearSystem::integrator(2),
        cbf,
        Reach([3.0, 0.2]),
        StateVec::from_vec(vec![-3.0, 0.0]),
        config,
    )
}

// For a single integrator and a convex barrier, one Euler step satisfies
// h(x + u Ts) >= h(x) + Ts grad h . u >= (1 - alpha Ts) h(x), so filtered
// rollouts must audit clean while unfiltered ones cut through the disc.
#[test]
fn filtered_rollouts_stay_safe_and_unfiltered_do_not() {
    let (sys, cbf, cost, x0, config) = disc_setup();
    let mean = MeanControlSequence::zeros(20, 2);
    let safe = Planner::new(config.clone(), 3)
        .plan(&sys, &cbf, &cost, &x0, &mean, 0)
        .unwrap();
    assert_eq!(safe.batch.audit.states, 256 * 21u64);
    assert_eq!(safe.batch.audit.violations, 0, "{:?}", safe.batch.audit);

    let unsafe_plan = Planner::new(config, 3)
        .bypass_filter_for_audit_tests()
        .plan(&sys, &cbf, &cost, &x0, &mean, 0)
        .unwrap();
    assert!(unsafe_plan.batch.audit.violations > 0);
}

#[test]
fn closed_loop_around_a_disc_is_safe() {
    let (sys, cbf, cost, x0, config) = disc_setup();
    let planner = Planner::new(config, 5);
    let sim = SimConfig::new(6.0, 0.1, 0.05, None).unwrap();
    let log = run(&sys, &cbf, &cost, &x0, &planner, &sim).unwrap();
    assert_eq!(log.steps.len(), 120);
    assert_eq!(log.executed_audit().violations, 0);
    assert_eq!(log.rollout_audit().violations, 0);
    let end = &log.final_state;
    assert!(
        ((end[0] - 3.0).powi(2) + (end[1] - 0.2).powi(2)).sqrt() < 0.5,
        "{end:?}"
    );
}

#[test]
fn short_reference_run_has_consistent_logs() {
    let sc = reference_scenario();
    let goal = sc.goal(2).unwrap();
    let planner = Planner::new(sc.planner.clone(), 0);
    let sim = sc.sim.with_total_time(0.5).unwrap();
    let log = run(&sc.system, &sc.cbf, &goal, &sc.start, &planner, &sim).unwrap();
    assert_eq!(log.ticks.len(), 5);
    assert_eq!(log.steps.len(), 10);
    for (i, s) in log.steps.iter().enumerate() {
        assert!((s.t - 0.05 * i as f64).abs() < 1e-12);
        assert_eq!(s.tick, i / 2);
        assert_eq!(s.v, log.steps[2 * s.tick].v);
    }
    assert!((log.final_time - 0.5).abs() < 1e-12);
    assert_eq!(log.steps[0].x, sc.start.as_slice());
}
