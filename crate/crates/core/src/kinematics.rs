//! Serial-chain geometry for the 7-DOF arm plus the 3-DOF laparoscopic
//! instrument, with forward kinematics and Jacobians.
//!
//! Frames follow the modified (Craig) Denavit-Hartenberg convention. Row `i`
//! of the table holds `(a_{i-1}, alpha_{i-1}, d_i, theta_offset_i)` and the
//! link transform is
//!
//! ```text
//! T_i = RotX(alpha_{i-1}) * TransX(a_{i-1}) * RotZ(theta_offset_i + q_i) * TransZ(d_i)
//! ```
//!
//! Frame 0 is the base; frame `i` (1..=10) rotates with joint `i`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;

use nalgebra::{Isometry3, SMatrix, SVector, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_JOINTS: usize = 10;
/// Number of arm joints preceding the instrument.
pub const NUM_ARM_JOINTS: usize = 7;
/// Base frame plus one frame per joint.
pub const NUM_FRAMES: usize = NUM_JOINTS + 1;
/// Rigid instrument shaft length (mm).
pub const SHAFT_LENGTH_MM: f64 = 300.0;

pub type JointVector = SVector<f64, NUM_JOINTS>;
/// Rows 0..3 linear (mm/rad), rows 3..6 angular (rad/rad).
pub type Jacobian6 = SMatrix<f64, 6, NUM_JOINTS>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("frame index {0} out of range (0..={max})", max = NUM_JOINTS)]
    FrameOutOfRange(usize),
    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("expected {expected} joints, found {found}")]
    JointCount { expected: usize, found: usize },
    #[error("joint {index}: {reason}")]
    InvalidJoint { index: usize, reason: String },
    #[error("shaft points must satisfy proximal frame < distal frame ({0} >= {1})")]
    ShaftOrder(usize, usize),
    #[error("shaft length at home is {0:.6} mm, expected {SHAFT_LENGTH_MM} mm")]
    ShaftLength(f64),
    #[error("geometry table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// One revolute joint row of the modified-DH table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDef {
    /// Link length along the previous x axis (mm).
    pub dh_a: f64,
    /// Link twist about the previous x axis (rad).
    pub dh_alpha: f64,
    /// Link offset along this joint's z axis (mm).
    pub dh_d: f64,
    pub dh_theta_offset: f64,
    pub limit_lo: f64,
    pub limit_hi: f64,
}

impl JointDef {
    pub fn new(a: f64, alpha: f64, d: f64, theta_offset: f64, lo: f64, hi: f64) -> Self {
        Self {
            dh_a: a,
            dh_alpha: alpha,
            dh_d: d,
            dh_theta_offset: theta_offset,
            limit_lo: lo,
            limit_hi: hi,
        }
    }

    fn symmetric(a: f64, alpha: f64, d: f64, theta_offset: f64, limit_deg: f64) -> Self {
        let lim = limit_deg.to_radians();
        Self::new(a, alpha, d, theta_offset, -lim, lim)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.limit_lo + self.limit_hi)
    }

    pub fn half_range(&self) -> f64 {
        0.5 * (self.limit_hi - self.limit_lo)
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.limit_lo, self.limit_hi)
    }

    /// Link transform from the previous frame to this joint's frame.
    pub fn transform(&self, q: f64) -> Isometry3<f64> {
        let (sa, ca) = self.dh_alpha.sin_cos();
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.dh_alpha)
            * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.dh_theta_offset + q);
        // RotX(alpha) * TransX(a) * RotZ(theta) * TransZ(d)
        let trans = Vector3::new(self.dh_a, -sa * self.dh_d, ca * self.dh_d);
        Isometry3::from_parts(Translation3::from(trans), rotation)
    }

    fn validate(&self, index: usize) -> Result<(), KinematicsError> {
        let fields = [
            self.dh_a,
            self.dh_alpha,
            self.dh_d,
            self.dh_theta_offset,
            self.limit_lo,
            self.limit_hi,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidJoint {
                index,
                reason: "non-finite parameter".into(),
            });
        }
        if self.limit_lo >= self.limit_hi {
            return Err(KinematicsError::InvalidJoint {
                index,
                reason: format!("limit_lo {} >= limit_hi {}", self.limit_lo, self.limit_hi),
            });
        }
        if self.limit_lo.abs() > PI + 1e-12 || self.limit_hi.abs() > PI + 1e-12 {
            return Err(KinematicsError::InvalidJoint {
                index,
                reason: "limits must lie within [-pi, pi]".into(),
            });
        }
        Ok(())
    }
}

/// A point rigidly attached to a chain frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePoint {
    /// 0 is the base, `i` is the frame of joint `i`.
    pub frame: usize,
    /// Offset expressed in that frame (mm).
    pub offset: Vector3<f64>,
}

impl FramePoint {
    pub fn new(frame: usize, offset: Vector3<f64>) -> Self {
        Self { frame, offset }
    }

    pub fn origin(frame: usize) -> Self {
        Self::new(frame, Vector3::zeros())
    }
}

/// Position plus unit-quaternion orientation (mm, world frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }
}

impl From<Isometry3<f64>> for Pose {
    fn from(iso: Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstrumentFrames {
    /// Shaft proximal point (instrument mount), `p_w`.
    pub shaft_proximal: Vector3<f64>,
    /// Shaft distal point (instrument wrist), `p_s`.
    pub shaft_distal: Vector3<f64>,
    pub tip: Vector3<f64>,
    pub tip_orientation: UnitQuaternion<f64>,
}

impl InstrumentFrames {
    pub fn shaft_length(&self) -> f64 {
        (self.shaft_distal - self.shaft_proximal).norm()
    }
}

/// Output of [`KinematicChain::forward_kinematics`].
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Base frame followed by the frame of each joint.
    pub frames: Vec<Pose>,
    pub tip: Pose,
    pub instrument: InstrumentFrames,
}

/// Ten revolute joints: 7 arm joints (S-R-S), instrument roll, and a 2-DOF
/// distal wrist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    joints: [JointDef; NUM_JOINTS],
    shaft_proximal: FramePoint,
    shaft_distal: FramePoint,
    tool_tip_offset: Vector3<f64>,
}

impl KinematicChain {
    pub fn new(
        joints: Vec<JointDef>,
        shaft_proximal: FramePoint,
        shaft_distal: FramePoint,
        tool_tip_offset: Vector3<f64>,
    ) -> Result<Self, KinematicsError> {
        let found = joints.len();
        let joints: [JointDef; NUM_JOINTS] =
            joints.try_into().map_err(|_| KinematicsError::JointCount {
                expected: NUM_JOINTS,
                found,
            })?;
        for (i, j) in joints.iter().enumerate() {
            j.validate(i + 1)?;
        }
        for fp in [&shaft_proximal, &shaft_distal] {
            if fp.frame > NUM_JOINTS {
                return Err(KinematicsError::FrameOutOfRange(fp.frame));
            }
        }
        if shaft_proximal.frame >= shaft_distal.frame {
            return Err(KinematicsError::ShaftOrder(
                shaft_proximal.frame,
                shaft_distal.frame,
            ));
        }
        let chain = Self {
            joints,
            shaft_proximal,
            shaft_distal,
            tool_tip_offset,
        };
        let len = chain
            .instrument_frames(&JointVector::zeros())
            .shaft_length();
        if (len - SHAFT_LENGTH_MM).abs() > 1e-6 {
            return Err(KinematicsError::ShaftLength(len));
        }
        Ok(chain)
    }

    /// The frozen default geometry (see `docs/geometry.table`).
    ///
    /// Shoulder joints 1-3 intersect at the base origin, a 300 mm upper arm
    /// leads to the elbow (4), a 250 mm forearm to the spherical wrist (5-7).
    /// The instrument roll axis (8) passes through the wrist centre; the
    /// mount sits 150 mm along it and the 300 mm shaft ends at the distal
    /// wrist (9, 10), followed by a 10 mm jaw segment to the tip.
    pub fn canonical() -> Self {
        Self::new(
            canonical_joints().to_vec(),
            FramePoint::new(7, Vector3::new(0.0, -150.0, 0.0)),
            FramePoint::origin(8),
            Vector3::new(10.0, 0.0, 0.0),
        )
        .expect("canonical geometry is valid")
    }

    /// Replace the joint table, keeping the canonical shaft and tool layout.
    pub fn with_joints(joints: Vec<JointDef>) -> Result<Self, KinematicsError> {
        let base = Self::canonical();
        Self::new(
            joints,
            base.shaft_proximal,
            base.shaft_distal,
            base.tool_tip_offset,
        )
    }

    /// Load a geometry table from a text file; see [`parse_geometry_table`].
    pub fn from_table_file(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|e| KinematicsError::Io(e.to_string()))?;
        Self::with_joints(parse_geometry_table(&text)?)
    }

    pub fn joints(&self) -> &[JointDef; NUM_JOINTS] {
        &self.joints
    }

    pub fn shaft_proximal(&self) -> FramePoint {
        self.shaft_proximal
    }

    pub fn shaft_distal(&self) -> FramePoint {
        self.shaft_distal
    }

    pub fn tool_tip_offset(&self) -> Vector3<f64> {
        self.tool_tip_offset
    }

    /// The tip as a point attached to the last frame.
    pub fn tip_point(&self) -> FramePoint {
        FramePoint::new(NUM_JOINTS, self.tool_tip_offset)
    }

    pub fn mid_config(&self) -> JointVector {
        JointVector::from_fn(|i, _| self.joints[i].mid())
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| self.joints[i].clamp(q[i]))
    }

    /// World transforms of the base and every joint frame.
    ///
    /// Hot path of the IK solver; no validation and no allocation.
    pub fn frame_transforms(&self, q: &JointVector) -> [Isometry3<f64>; NUM_FRAMES] {
        let mut out = [Isometry3::identity(); NUM_FRAMES];
        for (i, joint) in self.joints.iter().enumerate() {
            out[i + 1] = out[i] * joint.transform(q[i]);
        }
        out
    }

    pub fn point_position(
        &self,
        frames: &[Isometry3<f64>; NUM_FRAMES],
        point: &FramePoint,
    ) -> Vector3<f64> {
        frames[point.frame]
            .transform_point(&point.offset.into())
            .coords
    }

    pub fn tip_pose_from(&self, frames: &[Isometry3<f64>; NUM_FRAMES]) -> Pose {
        let last = frames[NUM_JOINTS];
        Pose::new(
            last.transform_point(&self.tool_tip_offset.into()).coords,
            last.rotation,
        )
    }

    pub fn instrument_frames_from(
        &self,
        frames: &[Isometry3<f64>; NUM_FRAMES],
    ) -> InstrumentFrames {
        let tip = self.tip_pose_from(frames);
        InstrumentFrames {
            shaft_proximal: self.point_position(frames, &self.shaft_proximal),
            shaft_distal: self.point_position(frames, &self.shaft_distal),
            tip: tip.position,
            tip_orientation: tip.orientation,
        }
    }

    pub fn instrument_frames(&self, q: &JointVector) -> InstrumentFrames {
        self.instrument_frames_from(&self.frame_transforms(q))
    }

    pub fn tip_pose(&self, q: &JointVector) -> Pose {
        self.tip_pose_from(&self.frame_transforms(q))
    }

    /// Full forward kinematics with input validation.
    pub fn forward_kinematics(&self, q: &JointVector) -> Result<ChainState, KinematicsError> {
        check_finite(q)?;
        let frames = self.frame_transforms(q);
        Ok(ChainState {
            frames: frames.iter().copied().map(Pose::from).collect(),
            tip: self.tip_pose_from(&frames),
            instrument: self.instrument_frames_from(&frames),
        })
    }

    /// Geometric Jacobian of a frame-attached point.
    ///
    /// Column `i` is `[z_i x (p - o_i); z_i]` for joints at or before the
    /// point's frame and zero for distal joints.
    pub fn geometric_jacobian(
        &self,
        q: &JointVector,
        point: &FramePoint,
    ) -> Result<Jacobian6, KinematicsError> {
        check_finite(q)?;
        if point.frame > NUM_JOINTS {
            return Err(KinematicsError::FrameOutOfRange(point.frame));
        }
        let frames = self.frame_transforms(q);
        Ok(self.jacobian_from(&frames, point))
    }

    pub fn jacobian_from(
        &self,
        frames: &[Isometry3<f64>; NUM_FRAMES],
        point: &FramePoint,
    ) -> Jacobian6 {
        let p = self.point_position(frames, point);
        let mut jac = Jacobian6::zeros();
        for j in 0..point.frame {
            let frame = &frames[j + 1];
            let z = frame.rotation * Vector3::z();
            let o = frame.translation.vector;
            let lin = z.cross(&(p - o));
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&z);
        }
        jac
    }

    /// Central-difference Jacobian of a frame-attached point; the angular
    /// rows use the rotation vector of `R(q+h) R(q-h)^T` divided by `2h`.
    pub fn finite_difference_jacobian(
        &self,
        q: &JointVector,
        point: &FramePoint,
        h: f64,
    ) -> Result<Jacobian6, KinematicsError> {
        if !(h > 0.0) {
            return Err(KinematicsError::NonPositiveStep(h));
        }
        check_finite(q)?;
        if point.frame > NUM_JOINTS {
            return Err(KinematicsError::FrameOutOfRange(point.frame));
        }
        let eval = |q: &JointVector| {
            let frames = self.frame_transforms(q);
            (
                self.point_position(&frames, point),
                frames[point.frame].rotation,
            )
        };
        let mut jac = Jacobian6::zeros();
        for j in 0..NUM_JOINTS {
            let mut qp = *q;
            let mut qm = *q;
            qp[j] += h;
            qm[j] -= h;
            let (pp, rp) = eval(&qp);
            let (pm, rm) = eval(&qm);
            let lin = (pp - pm) / (2.0 * h);
            let ang = rotation_error(&rp, &rm) / (2.0 * h);
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&ang);
        }
        Ok(jac)
    }

    /// Per-joint distance from the nearest limit, 1 at the midpoint and 0 at
    /// a limit.
    pub fn joint_limit_margin(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| {
            let j = &self.joints[i];
            (1.0 - (q[i] - j.mid()).abs() / j.half_range()).clamp(0.0, 1.0)
        })
    }
}

impl fmt::Display for KinematicChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# a_mm alpha_rad d_mm theta_offset_rad lo_rad hi_rad")?;
        for j in &self.joints {
            writeln!(
                f,
                "{} {} {} {} {} {}",
                j.dh_a, j.dh_alpha, j.dh_d, j.dh_theta_offset, j.limit_lo, j.limit_hi
            )?;
        }
        Ok(())
    }
}

fn canonical_joints() -> [JointDef; NUM_JOINTS] {
    const ROLL: f64 = 170.0;
    const PITCH: f64 = 120.0;
    const INSTRUMENT_WRIST: f64 = 90.0;
    [
        JointDef::symmetric(0.0, 0.0, 0.0, 0.0, ROLL),
        JointDef::symmetric(0.0, -FRAC_PI_2, 0.0, 0.0, PITCH),
        JointDef::symmetric(0.0, FRAC_PI_2, 300.0, 0.0, ROLL),
        JointDef::symmetric(0.0, FRAC_PI_2, 0.0, 0.0, PITCH),
        JointDef::symmetric(0.0, -FRAC_PI_2, 250.0, 0.0, ROLL),
        JointDef::symmetric(0.0, FRAC_PI_2, 0.0, 0.0, PITCH),
        JointDef::symmetric(0.0, -FRAC_PI_2, 0.0, 0.0, ROLL),
        // Instrument roll: axis through the wrist centre, frame origin at the
        // distal end of the shaft (150 mm mount + 300 mm shaft).
        JointDef::symmetric(0.0, FRAC_PI_2, 450.0, 0.0, ROLL),
        JointDef::symmetric(0.0, -FRAC_PI_2, 0.0, FRAC_PI_2, INSTRUMENT_WRIST),
        JointDef::symmetric(0.0, FRAC_PI_2, 0.0, PI, INSTRUMENT_WRIST),
    ]
}

/// Parse a geometry table: one joint per line with six numbers
/// `a alpha d theta_offset lo hi` (mm and radians), separated by whitespace
/// or commas. Blank lines and `#` comments are ignored.
pub fn parse_geometry_table(text: &str) -> Result<Vec<JointDef>, KinematicsError> {
    let mut joints = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| KinematicsError::Parse {
                    line: idx + 1,
                    reason: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 6 {
            return Err(KinematicsError::Parse {
                line: idx + 1,
                reason: format!("expected 6 values, found {}", vals.len()),
            });
        }
        joints.push(JointDef::new(
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5],
        ));
    }
    Ok(joints)
}

/// Rotation vector (axis * angle) of `desired * current^T`.
pub fn rotation_error(
    desired: &UnitQuaternion<f64>,
    current: &UnitQuaternion<f64>,
) -> Vector3<f64> {
    (desired * current.inverse()).scaled_axis()
}

fn check_finite(q: &JointVector) -> Result<(), KinematicsError> {
    match q.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(KinematicsError::NonFinite(i)),
        None => Ok(()),
    }
}
