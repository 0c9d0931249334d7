use nalgebra::{SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmsim_core::kinematics::{rotation_error, NUM_JOINTS};
use rcmsim_core::rcm::{
    dls_step, extended_jacobian, nullspace_objective_grad, pivot_calibrate, rcm_error, rcm_point,
    solve_ik, solve_ik_observed, synthesize_pivot_poses, FullState, IkParams, PivotError,
    RcmConstraint, StateVector, STATE_DIM,
};
use rcmsim_core::sim::{RoboticRig, Workcell};
use rcmsim_core::{JointVector, KinematicChain, Pose};

fn rig() -> RoboticRig {
    RoboticRig::setup(
        &KinematicChain::canonical(),
        &Workcell::default(),
        &IkParams::default(),
    )
    .unwrap()
}

fn random_state(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> FullState {
    let q = JointVector::from_fn(|i, _| {
        let j = &chain.joints()[i];
        rng.random_range(j.limit_lo..j.limit_hi)
    });
    FullState::new(q, rng.random_range(0.0..1.0))
}

/// A tip target in the operating cone: 60-150 mm below the fulcrum and at
/// most 30 degrees off the vertical.
fn cone_target(rig: &RoboticRig, rng: &mut ChaCha8Rng) -> Pose {
    let cell = Workcell::default();
    let depth = rng.random_range(60.0..150.0f64);
    let angle = rng.random_range(0.0..30.0f64).to_radians();
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vector3::new(
        angle.sin() * azimuth.cos(),
        angle.sin() * azimuth.sin(),
        angle.cos(),
    );
    let down = cell.down();
    let p = cell.fulcrum + (down * dir.z + Vector3::new(dir.x, dir.y, 0.0)) * depth;
    Pose::new(p, rig.tip_orientation)
}

fn task_fd(
    chain: &KinematicChain,
    state: &FullState,
    rot_scale: f64,
    h: f64,
) -> SMatrix<f64, 9, STATE_DIM> {
    let mut jac = SMatrix::<f64, 9, STATE_DIM>::zeros();
    for k in 0..STATE_DIM {
        let mut dx = StateVector::zeros();
        dx[k] = h;
        let sp = FullState::from_vector(&(state.as_vector() + dx));
        let sm = FullState::from_vector(&(state.as_vector() - dx));
        let (tp, tm) = (chain.tip_pose(&sp.q), chain.tip_pose(&sm.q));
        let col_pos = (tp.position - tm.position) / (2.0 * h);
        let col_rot = rotation_error(&tp.orientation, &tm.orientation) * rot_scale / (2.0 * h);
        let col_rcm = (rcm_point(chain, &sp) - rcm_point(chain, &sm)) / (2.0 * h);
        for r in 0..3 {
            jac[(r, k)] = col_pos[r];
            jac[(r + 3, k)] = col_rot[r];
            jac[(r + 6, k)] = col_rcm[r];
        }
    }
    jac
}

#[test]
fn extended_jacobian_matches_central_differences() {
    let chain = KinematicChain::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let state = random_state(&chain, &mut rng);
        let analytic = extended_jacobian(&chain, &state, 100.0);
        let fd = task_fd(&chain, &state, 100.0, 1e-6);
        let rel = (analytic - fd).norm() / fd.norm();
        assert!(rel < 1e-5, "relative error {rel:e}");
        // Tip rows do not depend on lambda.
        for r in 0..6 {
            assert_eq!(analytic[(r, NUM_JOINTS)], 0.0);
        }
    }
}

#[test]
fn objective_gradient_matches_central_differences() {
    let chain = KinematicChain::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let q = random_state(&chain, &mut rng).q;
        let (_, grad) = nullspace_objective_grad(&chain, &q);
        let h = 1e-5;
        for i in 0..NUM_JOINTS {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (nullspace_objective_grad(&chain, &qp).0
                - nullspace_objective_grad(&chain, &qm).0)
                / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-8,
                "joint {i}: {fd} vs {}",
                grad[i]
            );
        }
    }
}

fn nullspace_only_change(
    chain: &KinematicChain,
    state: &FullState,
    params: &IkParams,
) -> (f64, f64, f64) {
    let tip = chain.tip_pose(&state.q);
    let constraint = RcmConstraint::new(rcm_point(chain, state));
    let next = dls_step(chain, state, &tip, &constraint, params).unwrap();
    (
        (chain.tip_pose(&next.q).position - tip.position).norm(),
        rcm_error(chain, &next, &constraint).norm(),
        (next.q - state.q).amax(),
    )
}

#[test]
fn nullspace_only_step_keeps_tip_and_pivot() {
    let rig = rig();
    let params = IkParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // Operating postures: converged solutions for targets in the cone. The
    // drift is curvature of the chain along the projected step, so the
    // 1 um bound holds once the step is below 1.8 mrad.
    for _ in 0..50 {
        let target = cone_target(&rig, &mut rng);
        let r = solve_ik(&rig.chain, &rig.home, &target, &rig.constraint, &params).unwrap();
        let (tip, pivot, dq) = nullspace_only_change(&rig.chain, &r.state, &params);
        assert!(
            tip < params.pos_tol && pivot < params.rcm_tol,
            "tip {tip:e} pivot {pivot:e}"
        );
        assert!(tip <= 300.0 * dq * dq, "tip {tip:e} for step {dq:e}");
        if dq <= 1.8e-3 {
            assert!(tip < 1e-3 && pivot < 1e-3);
        }
    }
    // The settled start posture is such a case.
    let (tip, pivot, dq) = nullspace_only_change(&rig.chain, &rig.home, &params);
    assert!(tip < 1e-3 && pivot < 1e-3 && dq < 0.05);
}

#[test]
fn nullspace_drift_is_second_order_in_the_step() {
    // Halving the gain halves the joint motion and quarters the tip drift:
    // the projector leaves no first-order component.
    let chain = KinematicChain::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..50 {
        let mut state = random_state(&chain, &mut rng);
        state.lambda = rng.random_range(0.2..0.8);
        let small = |gain| IkParams {
            nullspace_gain: gain,
            ..IkParams::default()
        };
        let (tip_a, _, dq_a) = nullspace_only_change(&chain, &state, &small(2e-3));
        let (tip_b, _, dq_b) = nullspace_only_change(&chain, &state, &small(1e-3));
        if dq_a >= IkParams::default().max_step || tip_b < 1e-9 {
            continue;
        }
        assert!((dq_a / dq_b - 2.0).abs() < 1e-3);
        let ratio = tip_a / tip_b;
        assert!((3.6..4.4).contains(&ratio), "drift ratio {ratio}");
    }
}

#[test]
fn step_never_exceeds_max_step() {
    let chain = KinematicChain::canonical();
    let params = IkParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10_000 {
        let state = random_state(&chain, &mut rng);
        let target = Pose::new(
            Vector3::from_fn(|_, _| rng.random_range(-800.0..800.0)),
            chain
                .tip_pose(&random_state(&chain, &mut rng).q)
                .orientation,
        );
        let constraint =
            RcmConstraint::new(Vector3::from_fn(|_, _| rng.random_range(-500.0..500.0)));
        let next = dls_step(&chain, &state, &target, &constraint, &params).unwrap();
        assert!((next.q - state.q).amax() <= params.max_step + 1e-12);
        assert!((0.01..=0.99).contains(&next.lambda));
    }
}

#[test]
fn solve_examples() {
    let rig = rig();
    let chain = &rig.chain;
    let params = IkParams::default();
    let here = chain.tip_pose(&rig.home.q);
    let r = solve_ik(chain, &rig.home, &here, &rig.constraint, &params).unwrap();
    assert!(r.converged && r.iterations <= 1);

    let target = Pose::new(
        here.position + Vector3::new(12.0, -16.0, 0.0),
        rig.tip_orientation,
    );
    let r = solve_ik(chain, &rig.home, &target, &rig.constraint, &params).unwrap();
    assert!(r.converged);
    assert!(rcm_error(chain, &r.state, &rig.constraint).norm() <= params.rcm_tol);
    assert!((chain.tip_pose(&r.state.q).position - target.position).norm() <= params.pos_tol);

    let far = Pose::new(Vector3::new(2000.0, 0.0, 0.0), rig.tip_orientation);
    let r = solve_ik(chain, &rig.home, &far, &rig.constraint, &params).unwrap();
    assert!(!r.converged);
    assert!(r.residual_pos > 100.0);
}

fn track_spiral(rig: &RoboticRig, steps: usize) -> (usize, f64, f64) {
    let params = IkParams::default();
    let cell = Workcell::default();
    let mut state = rig.home;
    let (mut converged, mut worst, mut longest) = (0, 0.0f64, 0.0f64);
    let mut prev = rig.home_tip().position;
    for k in 1..=steps {
        // Spiral from the start depth down to 120 mm, widening to 35 mm.
        let s = k as f64 / steps as f64;
        let a = 4.0 * std::f64::consts::PI * s;
        let p = cell.start_tip()
            + cell.down() * (60.0 * s)
            + Vector3::new(35.0 * s * a.cos(), 35.0 * s * a.sin(), 0.0);
        longest = longest.max((p - prev).norm());
        prev = p;
        let r = solve_ik(
            &rig.chain,
            &state,
            &Pose::new(p, rig.tip_orientation),
            &rig.constraint,
            &params,
        )
        .unwrap();
        state = r.state;
        if r.converged {
            converged += 1;
            worst = worst.max(rcm_error(&rig.chain, &state, &rig.constraint).norm());
        }
    }
    (converged, worst, longest)
}

#[test]
fn smooth_tracking_holds_the_pivot() {
    let rig = rig();
    for steps in [2000, 100] {
        let (converged, worst, longest) = track_spiral(&rig, steps);
        assert!(longest <= 5.0, "step {longest}");
        assert_eq!(converged, steps);
        assert!(worst <= 0.1, "worst pivot residual {worst}");
    }
}

#[test]
fn centering_never_hurts_and_stays_on_target() {
    let rig = rig();
    let chain = &rig.chain;
    let with = IkParams::default();
    let without = IkParams {
        nullspace_gain: 0.0,
        ..with
    };
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (mut better_or_equal, mut total) = (0, 0);
    let (mut sum_with, mut sum_without) = (0.0, 0.0);
    for _ in 0..100 {
        let target = cone_target(&rig, &mut rng);
        let a = solve_ik(chain, &rig.home, &target, &rig.constraint, &with).unwrap();
        let b = solve_ik(chain, &rig.home, &target, &rig.constraint, &without).unwrap();
        assert!(a.converged && b.converged);
        let (pa, pb) = (chain.tip_pose(&a.state.q), chain.tip_pose(&b.state.q));
        assert!((pa.position - pb.position).norm() < 2.0 * with.pos_tol);
        let ha = nullspace_objective_grad(chain, &a.state.q).0;
        let hb = nullspace_objective_grad(chain, &b.state.q).0;
        total += 1;
        if ha <= hb + 1e-9 {
            better_or_equal += 1;
        }
        sum_with += ha;
        sum_without += hb;
    }
    assert!(
        better_or_equal as f64 >= 0.9 * total as f64,
        "{better_or_equal}/{total}"
    );
    assert!(sum_with <= sum_without);
}

#[test]
fn error_norm_mostly_decreases_within_a_solve() {
    let rig = rig();
    let params = IkParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (mut steps, mut increases) = (0usize, 0usize);
    for _ in 0..100 {
        let target = cone_target(&rig, &mut rng);
        let mut last: Option<f64> = None;
        solve_ik_observed(
            &rig.chain,
            &rig.home,
            &target,
            &rig.constraint,
            &params,
            |info| {
                if let Some(prev) = last {
                    steps += 1;
                    if info.error_norm > prev * (1.0 + 1e-12) {
                        increases += 1;
                    }
                }
                last = Some(info.error_norm);
            },
        )
        .unwrap();
    }
    assert!(steps > 0);
    assert!(
        (increases as f64) <= 0.05 * steps as f64,
        "{increases} increases in {steps} iterations"
    );
}

#[test]
fn pivot_noiseless_recovery() {
    let t = Vector3::new(0.0, 0.0, 310.0);
    let p = Vector3::new(100.0, 50.0, 200.0);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let poses = synthesize_pivot_poses(20, &t, &p, 0.0, &mut rng);
    let r = pivot_calibrate(&poses).unwrap();
    assert!((r.tip_offset - t).norm() < 1e-9);
    assert!((r.pivot - p).norm() < 1e-9);
    assert!(r.rms_residual < 1e-9);
}

#[test]
fn pivot_recovery_under_noise_over_seeds() {
    let t = Vector3::new(0.0, 0.0, 310.0);
    let p = Vector3::new(100.0, 50.0, 200.0);
    let mut errors: Vec<f64> = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let poses = synthesize_pivot_poses(20, &t, &p, 0.1, &mut rng);
            let r = pivot_calibrate(&poses).unwrap();
            assert!(r.rms_residual <= 0.15, "rms {}", r.rms_residual);
            (r.pivot - p).norm()
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    assert!(errors[94] <= 0.15, "95th percentile {}", errors[94]);
}

#[test]
fn pivot_rms_tracks_noise_level() {
    let t = Vector3::new(5.0, -2.0, 250.0);
    let p = Vector3::new(0.0, 0.0, 0.0);
    for noise in [0.05, 0.1, 0.25, 0.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let poses = synthesize_pivot_poses(30, &t, &p, noise, &mut rng);
        let r = pivot_calibrate(&poses).unwrap();
        assert!(
            r.rms_residual <= 1.5 * noise,
            "noise {noise}: rms {}",
            r.rms_residual
        );
    }
}

#[test]
fn pivot_single_orientation_is_degenerate() {
    let pose = Pose::new(
        Vector3::new(1.0, 2.0, 3.0),
        nalgebra::UnitQuaternion::identity(),
    );
    assert!(matches!(
        pivot_calibrate(&[pose; 8]),
        Err(PivotError::Degenerate(_))
    ));
}
