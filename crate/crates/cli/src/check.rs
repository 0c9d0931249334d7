//! Invariant battery behind `rcmsim check`.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmsim_core::kinematics::{rotation_error, Jacobian6, NUM_JOINTS};
use rcmsim_core::rcm::{extended_jacobian, rcm_point, FullState, StateVector, STATE_DIM};
use rcmsim_core::sim::{
    generate_board, run_trial, Condition, ExperimentConfig, OperatorSpec, RoboticRig, TrialContext,
};
use rcmsim_core::stats::{midranks, wilcoxon_signed_rank};
use rcmsim_core::teleop::{boxcar_gain, MovingAverage, TeleopConfig};
use rcmsim_core::{FramePoint, JointVector, KinematicChain};

/// Analytic Jacobian under test; swappable so a deliberately broken
/// implementation can be shown to fail.
pub type JacobianFn = fn(&KinematicChain, &JointVector, &FramePoint) -> Jacobian6;

pub fn library_jacobian(chain: &KinematicChain, q: &JointVector, point: &FramePoint) -> Jacobian6 {
    chain
        .geometric_jacobian(q, point)
        .expect("finite state and valid frame")
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub fast: bool,
    pub jacobian: JacobianFn,
}

impl CheckOptions {
    pub fn new(fast: bool) -> Self {
        Self {
            fast,
            jacobian: library_jacobian,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<16} {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const JACOBIAN_REL_TOL: f64 = 1e-5;
pub const RCM_TOL_MM: f64 = 0.1;
pub const FILTER_GAIN_TOL: f64 = 1e-6;

pub fn run_checks(options: &CheckOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut timed = |name, f: &dyn Fn() -> (bool, String)| {
        let start = Instant::now();
        let (passed, detail) = f();
        out.push(CheckResult {
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    };
    let states = if options.fast { 100 } else { 1000 };
    timed("jacobian_fd", &|| jacobian_check(options.jacobian, states));
    timed("rcm_hold", &|| {
        rcm_hold_check(if options.fast { 2 } else { 10 })
    });
    timed("filter_gains", &filter_check);
    timed("wilcoxon_exact", &|| {
        wilcoxon_check(if options.fast { 60 } else { 300 })
    });
    out
}

fn random_state(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> FullState {
    let q = JointVector::from_fn(|i, _| {
        let j = &chain.joints()[i];
        rng.random_range(j.limit_lo..j.limit_hi)
    });
    FullState::new(q, rng.random_range(0.0..1.0))
}

fn rel_err<const R: usize, const C: usize>(
    a: &nalgebra::SMatrix<f64, R, C>,
    b: &nalgebra::SMatrix<f64, R, C>,
) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Worst relative mismatch between the analytic and central-difference
/// Jacobians (geometric for tip and shaft points, extended over `(q, lambda)`).
pub fn jacobian_check(jacobian: JacobianFn, states: usize) -> (bool, String) {
    let chain = KinematicChain::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7AC0);
    let points = [
        chain.tip_point(),
        chain.shaft_proximal(),
        chain.shaft_distal(),
    ];
    let rot_scale = 100.0;
    let mut worst_geo: f64 = 0.0;
    let mut worst_ext: f64 = 0.0;
    for _ in 0..states {
        let state = random_state(&chain, &mut rng);
        for p in &points {
            let analytic = jacobian(&chain, &state.q, p);
            let fd = chain
                .finite_difference_jacobian(&state.q, p, 1e-6)
                .expect("valid step");
            worst_geo = worst_geo.max(rel_err(&analytic, &fd));
        }
        let analytic = extended_jacobian(&chain, &state, rot_scale);
        let fd = extended_fd(&chain, &state, rot_scale, 1e-6);
        worst_ext = worst_ext.max(rel_err(&analytic, &fd));
    }
    let passed = worst_geo <= JACOBIAN_REL_TOL && worst_ext <= JACOBIAN_REL_TOL;
    (
        passed,
        format!("{states} states, max rel err geometric {worst_geo:.2e}, extended {worst_ext:.2e}"),
    )
}

/// Central differences of the task map (tip position, scaled tip rotation,
/// pivot point) over the full state.
pub fn extended_fd(
    chain: &KinematicChain,
    state: &FullState,
    rot_scale: f64,
    h: f64,
) -> nalgebra::SMatrix<f64, 9, STATE_DIM> {
    let mut jac = nalgebra::SMatrix::<f64, 9, STATE_DIM>::zeros();
    let x = state.as_vector();
    for k in 0..STATE_DIM {
        let mut dx = StateVector::zeros();
        dx[k] = h;
        let sp = FullState::from_vector(&(x + dx));
        let sm = FullState::from_vector(&(x - dx));
        let (tp, tm) = (chain.tip_pose(&sp.q), chain.tip_pose(&sm.q));
        let lin = (tp.position - tm.position) / (2.0 * h);
        let ang = rotation_error(&tp.orientation, &tm.orientation) * rot_scale / (2.0 * h);
        let rcm = (rcm_point(chain, &sp) - rcm_point(chain, &sm)) / (2.0 * h);
        for r in 0..3 {
            jac[(r, k)] = lin[r];
            jac[(r + 3, k)] = ang[r];
            jac[(r + 6, k)] = rcm[r];
        }
    }
    debug_assert_eq!(STATE_DIM, NUM_JOINTS + 1);
    jac
}

/// Seeded robotic trials on the default board: pivot residual at every
/// converged IK step and the share of non-converged steps.
pub fn rcm_hold_check(trials: usize) -> (bool, String) {
    let config = ExperimentConfig::default();
    let chain = KinematicChain::canonical();
    let rig = match RoboticRig::setup(&chain, &config.workcell, &config.robotic.ik) {
        Ok(r) => r,
        Err(e) => return (false, format!("rig setup failed: {e}")),
    };
    let board = generate_board(config.board_seed, &config.workcell);
    let ctx = TrialContext {
        condition: config.condition_config(Condition::Robotic),
        contact: config.contact,
        rig: &rig,
        timeout_s: config.timeout_s,
        trace: false,
    };
    let (mut worst, mut ticks, mut bad) = (0.0f64, 0usize, 0usize);
    for (i, op) in config
        .operators()
        .into_iter()
        .cycle()
        .take(trials)
        .enumerate()
    {
        let op = OperatorSpec { id: i, ..op };
        match run_trial(&ctx, &op, &board, config.trial_seed(i, Condition::Robotic)) {
            Ok(o) => {
                worst = worst.max(o.max_rcm_residual);
                ticks += o.ticks;
                bad += o.nonconverged_ticks;
            }
            Err(e) => return (false, format!("trial {i} failed: {e}")),
        }
    }
    let frac = bad as f64 / ticks.max(1) as f64;
    (
        worst <= RCM_TOL_MM && frac < 1e-3,
        format!(
            "{trials} trials, {ticks} ticks, max residual {worst:.2e} mm, non-converged {frac:.2e}"
        ),
    )
}

/// Steady-state gain of the moving average for a unit sinusoid, fitted by
/// least squares on `sin`/`cos` regressors.
pub fn measured_gain(f: f64, n: usize, fs: f64) -> f64 {
    let mut filter = MovingAverage::new(n, Vector3::zeros());
    let total = 4 * n + 2000;
    let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..total {
        let t = k as f64 / fs;
        let w = std::f64::consts::TAU * f * t;
        let y = filter.step(Vector3::new(w.sin(), 0.0, 0.0)).x;
        if k >= 2 * n {
            let (s, c) = w.sin_cos();
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += y * s;
            yc += y * c;
        }
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    a.hypot(b)
}

pub fn filter_check() -> (bool, String) {
    let cfg = TeleopConfig::default();
    let (n, fs) = (cfg.window_len(), cfg.sample_rate_hz);
    let mut passed = true;
    let mut parts = Vec::new();
    for f in [10.0, 20.0] {
        let measured = measured_gain(f, n, fs);
        let expected = boxcar_gain(f, n, fs);
        passed &= (measured - expected).abs() <= FILTER_GAIN_TOL;
        parts.push(format!("{f} Hz {measured:.7} vs {expected:.7}"));
    }
    (passed, format!("N={n}: {}", parts.join(", ")))
}

/// Two-sided signed-rank p by enumerating all `2^n` sign assignments.
pub fn brute_force_signed_rank_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let (ranks, _) = midranks(&abs);
    let observed: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = ranks.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * le.min(ge) as f64 / total).min(1.0)
}

pub fn wilcoxon_check(datasets: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5167);
    let mut worst: f64 = 0.0;
    for k in 0..datasets {
        let n = 5 + k % 8;
        // Coarse rounding produces ties among the magnitudes.
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-3.0..4.0);
                let v = (v * 2.0).round() / 2.0;
                if v == 0.0 {
                    0.5
                } else {
                    v
                }
            })
            .collect();
        let zeros = vec![0.0; n];
        let p = match wilcoxon_signed_rank(&d, &zeros) {
            Ok(r) if r.exact => r.p_value,
            Ok(_) => return (false, format!("dataset {k}: exact path not used")),
            Err(e) => return (false, format!("dataset {k}: {e}")),
        };
        worst = worst.max((p - brute_force_signed_rank_p(&d)).abs());
    }
    (
        worst <= 1e-12,
        format!("{datasets} datasets n=5..12, max |p - enumeration| {worst:.1e}"),
    )
}
