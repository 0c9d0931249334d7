//! Virtual remote-center-of-motion inverse kinematics and pivot calibration.
//!
//! The unknown is the joint vector augmented with `lambda`, the position of
//! the pivot along the shaft (`p_rcm = p_w + lambda (p_s - p_w)`). Tip
//! position, tip orientation and the pivot point are stacked into one
//! weighted 9-vector task and solved with damped least squares; the two
//! remaining degrees of freedom are spent on joint-limit centering through
//! the nullspace projector.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Isometry3, SMatrix, SVector, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    rotation_error, InstrumentFrames, JointVector, KinematicChain, Pose, NUM_FRAMES, NUM_JOINTS,
};

/// Joints plus lambda.
pub const STATE_DIM: usize = NUM_JOINTS + 1;
/// Tip position, scaled tip orientation, pivot point.
pub const TASK_DIM: usize = 9;
/// Lambda is kept inside `[LAMBDA_MARGIN, 1 - LAMBDA_MARGIN]`.
pub const LAMBDA_MARGIN: f64 = 0.01;

pub type ExtendedJacobian = SMatrix<f64, TASK_DIM, STATE_DIM>;
pub type TaskVector = SVector<f64, TASK_DIM>;
pub type StateVector = SVector<f64, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("damped normal equations are not positive definite")]
    SingularSystem,
    #[error("invalid IK parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("state contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PivotError {
    #[error("pivot calibration needs at least 6 poses, got {0}")]
    TooFewPoses(usize),
    #[error("degenerate pose set: smallest singular value {0:e} (orientations lack diversity)")]
    Degenerate(f64),
    #[error("pose CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// The world-frame point the shaft must pass through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcmConstraint {
    pub fulcrum: Vector3<f64>,
}

impl RcmConstraint {
    pub fn new(fulcrum: Vector3<f64>) -> Self {
        Self { fulcrum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub q: JointVector,
    pub lambda: f64,
}

impl FullState {
    pub fn new(q: JointVector, lambda: f64) -> Self {
        Self { q, lambda }
    }

    pub fn as_vector(&self) -> StateVector {
        StateVector::from_fn(|i, _| {
            if i < NUM_JOINTS {
                self.q[i]
            } else {
                self.lambda
            }
        })
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self::new(JointVector::from_fn(|i, _| x[i]), x[NUM_JOINTS])
    }

    /// Clamp joints to their limits and lambda away from the shaft ends.
    pub fn clamped(&self, chain: &KinematicChain) -> Self {
        Self::new(chain.clamp(&self.q), clamp_lambda(self.lambda))
    }
}

pub fn clamp_lambda(lambda: f64) -> f64 {
    lambda.clamp(LAMBDA_MARGIN, 1.0 - LAMBDA_MARGIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkParams {
    /// Damping `mu` of the normal equations.
    pub damping: f64,
    /// Largest per-joint change in one iteration (rad).
    pub max_step: f64,
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub rcm_tol: f64,
    pub max_iters: usize,
    /// Nullspace joint-centering gain `alpha`.
    pub nullspace_gain: f64,
    /// Orientation-to-length weight (mm/rad).
    pub rot_scale: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 1e-2,
            max_step: 0.05,
            pos_tol: 0.01,
            rot_tol: 1e-4,
            rcm_tol: 0.01,
            max_iters: 200,
            nullspace_gain: 0.1,
            rot_scale: 100.0,
        }
    }
}

impl IkParams {
    pub fn validate(&self) -> Result<(), IkError> {
        let positive = [
            ("damping", self.damping),
            ("max_step", self.max_step),
            ("pos_tol", self.pos_tol),
            ("rot_tol", self.rot_tol),
            ("rcm_tol", self.rcm_tol),
            ("max_iters", self.max_iters as f64),
            ("rot_scale", self.rot_scale),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(IkError::InvalidParam { name, value });
            }
        }
        if !(self.nullspace_gain >= 0.0) || !self.nullspace_gain.is_finite() {
            return Err(IkError::InvalidParam {
                name: "nullspace_gain",
                value: self.nullspace_gain,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkResult {
    pub state: FullState,
    pub converged: bool,
    pub iterations: usize,
    /// mm
    pub residual_pos: f64,
    /// rad
    pub residual_rot: f64,
    /// mm
    pub residual_rcm: f64,
}

/// Pivot point on the shaft for the given lambda.
pub fn rcm_point(chain: &KinematicChain, state: &FullState) -> Vector3<f64> {
    rcm_point_from(&chain.instrument_frames(&state.q), state.lambda)
}

fn rcm_point_from(inst: &InstrumentFrames, lambda: f64) -> Vector3<f64> {
    inst.shaft_proximal + lambda * (inst.shaft_distal - inst.shaft_proximal)
}

/// `p_f - p_rcm`.
pub fn rcm_error(
    chain: &KinematicChain,
    state: &FullState,
    constraint: &RcmConstraint,
) -> Vector3<f64> {
    constraint.fulcrum - rcm_point(chain, state)
}

/// Lambda of the point on the shaft line closest to `point`, unclamped.
pub fn project_onto_shaft(inst: &InstrumentFrames, point: &Vector3<f64>) -> f64 {
    let axis = inst.shaft_distal - inst.shaft_proximal;
    (point - inst.shaft_proximal).dot(&axis) / axis.norm_squared()
}

/// Task Jacobian over `(q, lambda)`: tip position, tip orientation scaled by
/// `rot_scale`, and the pivot point.
pub fn extended_jacobian(
    chain: &KinematicChain,
    state: &FullState,
    rot_scale: f64,
) -> ExtendedJacobian {
    let frames = chain.frame_transforms(&state.q);
    extended_jacobian_from(chain, &frames, state.lambda, rot_scale)
}

fn extended_jacobian_from(
    chain: &KinematicChain,
    frames: &[Isometry3<f64>; NUM_FRAMES],
    lambda: f64,
    rot_scale: f64,
) -> ExtendedJacobian {
    let j_tip = chain.jacobian_from(frames, &chain.tip_point());
    let j_pw = chain.jacobian_from(frames, &chain.shaft_proximal());
    let j_ps = chain.jacobian_from(frames, &chain.shaft_distal());
    let mut jac = ExtendedJacobian::zeros();
    jac.fixed_view_mut::<3, NUM_JOINTS>(0, 0)
        .copy_from(&j_tip.fixed_rows::<3>(0));
    jac.fixed_view_mut::<3, NUM_JOINTS>(3, 0)
        .copy_from(&(j_tip.fixed_rows::<3>(3) * rot_scale));
    jac.fixed_view_mut::<3, NUM_JOINTS>(6, 0)
        .copy_from(&(j_pw.fixed_rows::<3>(0) * (1.0 - lambda) + j_ps.fixed_rows::<3>(0) * lambda));
    let p_w = chain.point_position(frames, &chain.shaft_proximal());
    let p_s = chain.point_position(frames, &chain.shaft_distal());
    jac.fixed_view_mut::<3, 1>(6, NUM_JOINTS)
        .copy_from(&(p_s - p_w));
    jac
}

/// Joint-centering objective `h(q) = sum ((q_i - mid_i) / half_range_i)^2`
/// and its gradient.
pub fn nullspace_objective_grad(chain: &KinematicChain, q: &JointVector) -> (f64, JointVector) {
    let mut h = 0.0;
    let mut grad = JointVector::zeros();
    for (i, j) in chain.joints().iter().enumerate() {
        let hr = j.half_range();
        let u = (q[i] - j.mid()) / hr;
        h += u * u;
        grad[i] = 2.0 * u / hr;
    }
    (h, grad)
}

/// Errors and Jacobian at one state; shared by the step and the solver so FK
/// runs once per iteration.
#[derive(Debug, Clone)]
pub struct TaskEvaluation {
    pub tip: Pose,
    pub jacobian: ExtendedJacobian,
    /// `[e_pos; rot_scale e_rot; e_rcm]`
    pub error: TaskVector,
    pub residual_pos: f64,
    pub residual_rot: f64,
    pub residual_rcm: f64,
}

impl TaskEvaluation {
    pub fn within(&self, params: &IkParams) -> bool {
        self.residual_pos <= params.pos_tol
            && self.residual_rot <= params.rot_tol
            && self.residual_rcm <= params.rcm_tol
    }
}

pub fn evaluate(
    chain: &KinematicChain,
    state: &FullState,
    target: &Pose,
    constraint: &RcmConstraint,
    params: &IkParams,
) -> TaskEvaluation {
    let frames = chain.frame_transforms(&state.q);
    let inst = chain.instrument_frames_from(&frames);
    let tip = Pose::new(inst.tip, inst.tip_orientation);
    let e_pos = target.position - tip.position;
    let e_rot = rotation_error(&target.orientation, &tip.orientation);
    let e_rcm = constraint.fulcrum - rcm_point_from(&inst, state.lambda);
    let mut error = TaskVector::zeros();
    error.fixed_rows_mut::<3>(0).copy_from(&e_pos);
    error
        .fixed_rows_mut::<3>(3)
        .copy_from(&(e_rot * params.rot_scale));
    error.fixed_rows_mut::<3>(6).copy_from(&e_rcm);
    TaskEvaluation {
        tip,
        jacobian: extended_jacobian_from(chain, &frames, state.lambda, params.rot_scale),
        error,
        residual_pos: e_pos.norm(),
        residual_rot: e_rot.norm(),
        residual_rcm: e_rcm.norm(),
    }
}

/// One damped-least-squares update with nullspace joint centering.
pub fn dls_step(
    chain: &KinematicChain,
    state: &FullState,
    target: &Pose,
    constraint: &RcmConstraint,
    params: &IkParams,
) -> Result<FullState, IkError> {
    let eval = evaluate(chain, state, target, constraint, params);
    step_from(chain, state, &eval, params)
}

/// The raw update `dx` before clamping to limits: task term minus the
/// projected centering gradient, rescaled so no joint moves more than
/// `max_step`.
pub fn dls_delta(
    chain: &KinematicChain,
    state: &FullState,
    eval: &TaskEvaluation,
    params: &IkParams,
) -> Result<StateVector, IkError> {
    let jac = &eval.jacobian;
    let mu2 = params.damping * params.damping;
    let normal = jac * jac.transpose() + SMatrix::<f64, TASK_DIM, TASK_DIM>::identity() * mu2;
    let chol = normal.cholesky().ok_or(IkError::SingularSystem)?;
    let mut dx = jac.transpose() * chol.solve(&eval.error);
    if params.nullspace_gain > 0.0 {
        let (_, grad_q) = nullspace_objective_grad(chain, &state.q);
        let grad = StateVector::from_fn(|i, _| if i < NUM_JOINTS { grad_q[i] } else { 0.0 });
        let projected = grad - jac.transpose() * chol.solve(&(jac * grad));
        dx -= projected * params.nullspace_gain;
    }
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(IkError::NonFinite);
    }
    let largest = dx.rows(0, NUM_JOINTS).amax();
    if largest > params.max_step {
        dx *= params.max_step / largest;
    }
    Ok(dx)
}

fn step_from(
    chain: &KinematicChain,
    state: &FullState,
    eval: &TaskEvaluation,
    params: &IkParams,
) -> Result<FullState, IkError> {
    let dx = dls_delta(chain, state, eval, params)?;
    Ok(FullState::from_vector(&(state.as_vector() + dx)).clamped(chain))
}

/// Per-iteration diagnostics passed to [`solve_ik_observed`].
#[derive(Debug, Clone, Copy)]
pub struct IterationInfo {
    pub iteration: usize,
    /// Norm of the weighted 9-vector error before the step.
    pub error_norm: f64,
}

/// Iterate [`dls_step`] from `initial` until every residual is within
/// tolerance or `max_iters` steps have been taken.
pub fn solve_ik(
    chain: &KinematicChain,
    initial: &FullState,
    target: &Pose,
    constraint: &RcmConstraint,
    params: &IkParams,
) -> Result<IkResult, IkError> {
    solve_ik_observed(chain, initial, target, constraint, params, |_| {})
}

pub fn solve_ik_observed(
    chain: &KinematicChain,
    initial: &FullState,
    target: &Pose,
    constraint: &RcmConstraint,
    params: &IkParams,
    mut observe: impl FnMut(IterationInfo),
) -> Result<IkResult, IkError> {
    params.validate()?;
    if initial.q.iter().any(|v| !v.is_finite()) || !initial.lambda.is_finite() {
        return Err(IkError::NonFinite);
    }
    let mut state = initial.clamped(chain);
    let mut best: Option<(f64, IkResult)> = None;
    for iteration in 0..=params.max_iters {
        let eval = evaluate(chain, &state, target, constraint, params);
        let error_norm = eval.error.norm();
        observe(IterationInfo {
            iteration,
            error_norm,
        });
        let result = IkResult {
            state,
            converged: eval.within(params),
            iterations: iteration,
            residual_pos: eval.residual_pos,
            residual_rot: eval.residual_rot,
            residual_rcm: eval.residual_rcm,
        };
        if result.converged {
            return Ok(result);
        }
        if best.as_ref().is_none_or(|(n, _)| error_norm < *n) {
            best = Some((error_norm, result));
        }
        if iteration == params.max_iters {
            break;
        }
        state = step_from(chain, &state, &eval, params)?;
    }
    let (_, mut result) = best.expect("at least one iteration ran");
    result.iterations = params.max_iters;
    Ok(result)
}

/// Tip offset and pivot recovered by [`pivot_calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PivotResult {
    /// Tip offset in the flange frame (mm).
    pub tip_offset: Vector3<f64>,
    /// Pivot point in the world frame (mm).
    pub pivot: Vector3<f64>,
    pub rms_residual: f64,
}

/// Least-squares pivot calibration: find `t`, `p` with `R_i t + d_i = p` for
/// every flange pose `(R_i, d_i)`.
pub fn pivot_calibrate(poses: &[Pose]) -> Result<PivotResult, PivotError> {
    if poses.len() < 6 {
        return Err(PivotError::TooFewPoses(poses.len()));
    }
    let n = poses.len();
    let mut a = DMatrix::<f64>::zeros(3 * n, 6);
    let mut b = DVector::<f64>::zeros(3 * n);
    for (i, pose) in poses.iter().enumerate() {
        let rot = pose.orientation.to_rotation_matrix();
        a.view_mut((3 * i, 0), (3, 3)).copy_from(rot.matrix());
        a.view_mut((3 * i, 3), (3, 3))
            .copy_from(&(-nalgebra::Matrix3::identity()));
        b.rows_mut(3 * i, 3).copy_from(&(-pose.position));
    }
    let svd = a.svd(true, true);
    let smallest = svd.singular_values.min();
    if smallest <= 1e-6 {
        return Err(PivotError::Degenerate(smallest));
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|_| PivotError::Degenerate(smallest))?;
    let tip_offset = Vector3::new(x[0], x[1], x[2]);
    let pivot = Vector3::new(x[3], x[4], x[5]);
    let sq: f64 = poses
        .iter()
        .map(|pose| (pose.orientation * tip_offset + pose.position - pivot).norm_squared())
        .sum();
    Ok(PivotResult {
        tip_offset,
        pivot,
        rms_residual: (sq / n as f64).sqrt(),
    })
}

/// Flange poses of a tool pivoting about `pivot` with tip offset
/// `tip_offset`, tilted 10-30 degrees around a circle about the world
/// vertical. `noise_rms` is the 3D RMS magnitude of isotropic Gaussian noise
/// added to each flange position.
pub fn synthesize_pivot_poses<R: Rng + ?Sized>(
    n: usize,
    tip_offset: &Vector3<f64>,
    pivot: &Vector3<f64>,
    noise_rms: f64,
    rng: &mut R,
) -> Vec<Pose> {
    let sigma = noise_rms / 3f64.sqrt();
    (0..n)
        .map(|i| {
            let azimuth = std::f64::consts::TAU * (i as f64 + rng.random::<f64>()) / n as f64;
            let tilt = rng.random_range(10f64..30.0).to_radians();
            let spin = rng.random_range(-0.5f64..0.5);
            let axis =
                nalgebra::Unit::new_normalize(Vector3::new(-azimuth.sin(), azimuth.cos(), 0.0));
            let orientation = UnitQuaternion::from_axis_angle(&axis, tilt)
                * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spin);
            let noise = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * sigma
            });
            Pose::new(pivot - orientation * tip_offset + noise, orientation)
        })
        .collect()
}

/// Read flange poses from CSV with header `qw,qx,qy,qz,px,py,pz`.
pub fn read_pose_csv<R: Read>(reader: R) -> Result<Vec<Pose>, PivotError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PivotError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    const COLUMNS: [&str; 7] = ["qw", "qx", "qy", "qz", "px", "py", "pz"];
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PivotError::Csv {
                line: 1,
                reason: format!("missing column {name}"),
            })?;
    }
    let mut poses = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| PivotError::Csv {
            line,
            reason: e.to_string(),
        })?;
        let mut v = [0.0; 7];
        for (k, &col) in index.iter().enumerate() {
            let field = record.get(col).unwrap_or("");
            v[k] = field.parse().map_err(|_| PivotError::Csv {
                line,
                reason: format!("column {}: cannot parse {field:?}", COLUMNS[k]),
            })?;
        }
        let quat = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        if !(quat.norm() > 0.0) {
            return Err(PivotError::Csv {
                line,
                reason: "zero quaternion".into(),
            });
        }
        poses.push(Pose::new(
            Vector3::new(v[4], v[5], v[6]),
            UnitQuaternion::from_quaternion(quat),
        ));
    }
    Ok(poses)
}

pub fn write_pose_csv<W: Write>(writer: W, poses: &[Pose]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["qw", "qx", "qy", "qz", "px", "py", "pz"])?;
    for p in poses {
        let q = p.orientation.quaternion();
        w.write_record(
            [q.w, q.i, q.j, q.k, p.position.x, p.position.y, p.position.z]
                .iter()
                .map(|v| format!("{v:.17e}")),
        )?;
    }
    w.flush()
}
