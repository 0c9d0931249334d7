//! Synthetic reproduction of the targeting experiment: a 10-target foam
//! board, expert and novice operator models, and Manual / Robotic plants.
//!
//! The plant runs at 1 kHz; operators perceive and replan at 100 Hz. All
//! randomness flows from named per-trial streams derived from one master
//! seed, so a dataset is a pure function of its configuration.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{JointVector, KinematicChain, Pose};
use crate::rcm::{
    clamp_lambda, dls_step, evaluate, nullspace_objective_grad, project_onto_shaft, solve_ik,
    FullState, IkError, IkParams, RcmConstraint,
};
use crate::teleop::{MasterSample, MovingAverage, TeleopConfig, TeleopError, TeleopPipeline};

pub const TARGETS_PER_BOARD: usize = 10;
pub const TARGET_RADIUS_MM: f64 = 2.5;
pub const PLANT_RATE_HZ: f64 = 1000.0;
pub const OPERATOR_RATE_HZ: f64 = 100.0;
const TICKS_PER_OPERATOR_UPDATE: usize = 10;
/// Consecutive operator updates inside the press threshold before pressing
/// (100 ms).
const PRESS_DWELL_UPDATES: usize = 10;
/// Proportional gain of the reaching law (1/s).
const REACH_GAIN: f64 = 4.0;
pub const TARGET_TIMEOUT_S: f64 = 60.0;
/// Manual overshoot past the foam surface that counts as tissue damage (mm).
pub const TISSUE_DAMAGE_DEPTH_MM: f64 = 2.0;
/// Fraction of tremor variance carried by the two band-limited sinusoids;
/// the rest is white noise.
const TREMOR_SINUSOID_SHARE: f64 = 0.8;
/// The operator judges the tip position averaged over this many plant ticks
/// (100 ms of video).
const VISUAL_WINDOW_TICKS: usize = 100;
/// Joint trajectories for the ergonomic proxy are sampled at 10 Hz.
const ERGONOMIC_SAMPLE_TICKS: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("target coincides with the fulcrum")]
    ZeroDirection,
    #[error("invalid operator parameter {name}: {value}")]
    InvalidOperator { name: &'static str, value: f64 },
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("robot setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Ik(#[from] IkError),
    #[error(transparent)]
    Teleop(#[from] TeleopError),
    #[error("trials CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Expert,
    Novice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Manual,
    Robotic,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Expert => "expert",
            Tier::Novice => "novice",
        }
    }
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Manual => "manual",
            Condition::Robotic => "robotic",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Condition::Manual => 1,
            Condition::Robotic => 2,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expert" => Ok(Tier::Expert),
            "novice" => Ok(Tier::Novice),
            other => Err(format!("unknown tier {other:?}")),
        }
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(Condition::Manual),
            "robotic" => Ok(Condition::Robotic),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a named stream under `master`. Streams for distinct label paths
/// are independent, so adding operators never changes existing streams.
pub fn stream_seed(master: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(master), |acc, &l| mix64(acc ^ mix64(l)))
}

fn stream_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sigma
    })
}

/// Fixed placement of the trocar relative to the arm base.
///
/// The arm is ceiling mounted: base `+z` points down into the box, so the
/// board's vertical (room up) is `-z` in base coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workcell {
    pub fulcrum: Vector3<f64>,
    pub vertical: Vector3<f64>,
    /// Depth band of the targets below the fulcrum (mm).
    pub depth_min_mm: f64,
    pub depth_max_mm: f64,
    /// Largest insertion angle on the board (deg).
    pub max_angle_deg: f64,
    /// Distance from the fulcrum to the centre of the hemispherical organ
    /// model, along `-vertical` (mm).
    pub organ_center_depth_mm: f64,
    /// Depth of the instrument tip at the start of every trial (mm).
    pub start_depth_mm: f64,
}

impl Default for Workcell {
    fn default() -> Self {
        Self {
            fulcrum: Vector3::new(100.0, 0.0, 700.0),
            vertical: Vector3::new(0.0, 0.0, -1.0),
            depth_min_mm: 80.0,
            depth_max_mm: 150.0,
            max_angle_deg: 30.0,
            organ_center_depth_mm: 300.0,
            start_depth_mm: 60.0,
        }
    }
}

impl Workcell {
    pub fn down(&self) -> Vector3<f64> {
        -self.vertical.normalize()
    }

    pub fn start_tip(&self) -> Vector3<f64> {
        self.fulcrum + self.down() * self.start_depth_mm
    }

    pub fn organ_center(&self) -> Vector3<f64> {
        self.fulcrum + self.down() * self.organ_center_depth_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Outward foam surface normal at the target.
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBoard {
    pub targets: Vec<Target>,
    pub fulcrum: Vector3<f64>,
    pub vertical: Vector3<f64>,
}

impl TargetBoard {
    pub fn insertion_angles(&self) -> Vec<f64> {
        self.targets
            .iter()
            .map(|t| insertion_angle(&t.center, &self.fulcrum, &self.vertical).unwrap_or(0.0))
            .collect()
    }
}

/// Angle between the fulcrum-to-target line and the vertical axis (deg).
pub fn insertion_angle(
    target: &Vector3<f64>,
    fulcrum: &Vector3<f64>,
    vertical: &Vector3<f64>,
) -> Result<f64, SimError> {
    let d = target - fulcrum;
    let (dn, vn) = (d.norm(), vertical.norm());
    if !(dn > 1e-12) || !(vn > 1e-12) {
        return Err(SimError::ZeroDirection);
    }
    let c = (d.dot(vertical) / (dn * vn)).abs().min(1.0);
    Ok(c.acos().to_degrees())
}

/// Ten targets on the organ model: three per 10-degree insertion-angle band
/// plus one in a random band, depths uniform in the workcell band.
pub fn generate_board(seed: u64, cell: &Workcell) -> TargetBoard {
    let mut rng = stream_rng(stream_seed(seed, &[0xB0A2D]));
    let bands = 3usize;
    let band_width = cell.max_angle_deg / bands as f64;
    let mut band_of: Vec<usize> = (0..TARGETS_PER_BOARD - 1).map(|i| i % bands).collect();
    band_of.push(rng.random_range(0..bands));

    let down = cell.down();
    let (e1, e2) = orthonormal_pair(&down);
    let organ = cell.organ_center();
    let mut targets: Vec<Target> = Vec::with_capacity(TARGETS_PER_BOARD);
    for &band in &band_of {
        loop {
            let lo = band as f64 * band_width;
            let angle = rng.random_range(lo..lo + band_width).to_radians();
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let depth = rng.random_range(cell.depth_min_mm..=cell.depth_max_mm);
            let lateral = (e1 * azimuth.cos() + e2 * azimuth.sin()) * depth * angle.tan();
            let center = cell.fulcrum + down * depth + lateral;
            // keep dots (5 mm) visually distinct
            if targets.iter().all(|t| (t.center - center).norm() > 15.0) {
                targets.push(Target {
                    center,
                    radius: TARGET_RADIUS_MM,
                    normal: (center - organ).normalize(),
                });
                break;
            }
        }
    }
    TargetBoard {
        targets,
        fulcrum: cell.fulcrum,
        vertical: cell.vertical.normalize(),
    }
}

fn orthonormal_pair(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = a.cross(&helper).normalize();
    (e1, a.cross(&e1))
}

/// Behavioural parameters of one synthetic operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorModel {
    pub tier: Tier,
    /// Total RMS of hand tremor (mm, hand space).
    pub tremor_rms: f64,
    pub tremor_band_hz: [f64; 2],
    pub reaction_delay_s: f64,
    /// Cap of the planned instrument speed (mm/s).
    pub max_hand_speed: f64,
    /// Per-axis standard deviation of target localization error (mm).
    pub perception_noise: f64,
    /// Perceived distance under which the operator dwells and presses (mm).
    pub press_threshold: f64,
    /// Growth of manual noise with insertion angle, `g = 1 + k (theta/30deg)`.
    pub angle_sensitivity: f64,
}

impl OperatorModel {
    pub fn expert() -> Self {
        Self {
            tier: Tier::Expert,
            tremor_rms: 0.8,
            tremor_band_hz: [8.0, 12.0],
            reaction_delay_s: 0.15,
            max_hand_speed: 60.0,
            perception_noise: 0.7,
            press_threshold: 1.0,
            angle_sensitivity: 2.2,
        }
    }

    pub fn novice() -> Self {
        Self {
            tier: Tier::Novice,
            tremor_rms: 1.5,
            reaction_delay_s: 0.25,
            max_hand_speed: 45.0,
            perception_noise: 1.3,
            press_threshold: 1.5,
            ..Self::expert()
        }
    }

    pub fn default_for(tier: Tier) -> Self {
        match tier {
            Tier::Expert => Self::expert(),
            Tier::Novice => Self::novice(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("tremor_rms", self.tremor_rms),
            ("reaction_delay_s", self.reaction_delay_s),
            ("max_hand_speed", self.max_hand_speed),
            ("perception_noise", self.perception_noise),
            ("press_threshold", self.press_threshold),
            ("angle_sensitivity", self.angle_sensitivity),
            ("tremor_band_hz", self.tremor_band_hz[0]),
        ];
        for (name, value) in fields {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(SimError::InvalidOperator { name, value });
            }
        }
        if !(self.tremor_band_hz[1] >= self.tremor_band_hz[0]) {
            return Err(SimError::InvalidOperator {
                name: "tremor_band_hz",
                value: self.tremor_band_hz[1],
            });
        }
        if !(self.max_hand_speed > 0.0) {
            return Err(SimError::InvalidOperator {
                name: "max_hand_speed",
                value: self.max_hand_speed,
            });
        }
        Ok(())
    }

    /// Manual noise gain at insertion angle `theta_deg`.
    pub fn noise_gain(&self, theta_deg: f64) -> f64 {
        1.0 + self.angle_sensitivity * (theta_deg / 30.0)
    }
}

/// Lever geometry of the hand-held instrument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManualConfig {
    /// Handle-to-fulcrum distance `d_out` (mm).
    pub handle_length_mm: f64,
    /// Fulcrum-to-tip distance `d_in` (mm).
    pub insertion_depth_mm: f64,
}

impl Default for ManualConfig {
    fn default() -> Self {
        Self {
            handle_length_mm: 150.0,
            insertion_depth_mm: 150.0,
        }
    }
}

impl ManualConfig {
    /// Lateral tip/handle motion ratio `d_in / d_out`.
    pub fn lever_ratio(&self) -> f64 {
        self.insertion_depth_mm / self.handle_length_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RoboticConfig {
    pub teleop: TeleopConfig,
    pub ik: IkParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactModel {
    /// Foam stiffness (N/mm).
    pub stiffness_n_per_mm: f64,
    /// Tip within this distance of the surface counts as touching (mm).
    pub contact_threshold_mm: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            stiffness_n_per_mm: 0.5,
            contact_threshold_mm: 0.5,
        }
    }
}

impl ContactModel {
    /// Signed height of `tip` above the local foam surface at `target`.
    pub fn height(&self, tip: &Vector3<f64>, target: &Target) -> f64 {
        (tip - target.center).dot(&target.normal)
    }

    pub fn touching(&self, tip: &Vector3<f64>, target: &Target) -> bool {
        self.height(tip, target) <= self.contact_threshold_mm
    }

    /// Reaction force of the indented foam (N).
    pub fn force(&self, tip: &Vector3<f64>, target: &Target) -> f64 {
        (-self.height(tip, target)).max(0.0) * self.stiffness_n_per_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ConditionConfig {
    Manual(ManualConfig),
    Robotic(RoboticConfig),
}

impl ConditionConfig {
    pub fn condition(&self) -> Condition {
        match self {
            ConditionConfig::Manual(_) => Condition::Manual,
            ConditionConfig::Robotic(_) => Condition::Robotic,
        }
    }
}

/// Hand tremor: two sinusoids at random frequencies in the tremor band along
/// random directions plus white noise; total RMS `tremor_rms`.
#[derive(Debug, Clone)]
pub struct Tremor {
    components: [(f64, f64, Vector3<f64>); 2],
    white_sigma: f64,
}

impl Tremor {
    pub fn new<R: Rng + ?Sized>(model: &OperatorModel, rng: &mut R) -> Self {
        let rms = model.tremor_rms;
        // each sinusoid carries half of the sinusoidal variance: a^2/2
        let amplitude = (TREMOR_SINUSOID_SHARE * rms * rms).sqrt();
        let [lo, hi] = model.tremor_band_hz;
        let component = |rng: &mut R| {
            let f = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = loop {
                let v = gaussian3(rng, 1.0);
                if v.norm() > 1e-6 {
                    break v.normalize();
                }
            };
            (f, phase, dir * amplitude)
        };
        let components = [component(rng), component(rng)];
        Self {
            components,
            white_sigma: ((1.0 - TREMOR_SINUSOID_SHARE) / 3.0).sqrt() * rms,
        }
    }

    pub fn silent() -> Self {
        Self {
            components: [(0.0, 0.0, Vector3::zeros()); 2],
            white_sigma: 0.0,
        }
    }

    /// Tremor displacement at time `t` (mm, hand space).
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Vector3<f64> {
        let mut x = Vector3::zeros();
        for (f, phase, amp) in &self.components {
            x += amp * (std::f64::consts::TAU * f * t + phase).sin();
        }
        if self.white_sigma > 0.0 {
            x += gaussian3(rng, self.white_sigma);
        }
        x
    }
}

/// Output of [`OperatorState::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorCommand {
    /// Planned instrument-tip velocity, after the reaction delay (mm/s).
    pub velocity: Vector3<f64>,
    pub press: bool,
}

/// Perception, planning and the reaction-delay FIFO of one operator.
///
/// Both the planned velocity and the press decision are motor commands and
/// leave the FIFO `reaction_delay` after they were issued.
#[derive(Debug, Clone)]
pub struct OperatorState {
    model: OperatorModel,
    fifo: std::collections::VecDeque<(Vector3<f64>, bool)>,
    /// Commands already executed but not yet visible on the display.
    unseen: std::collections::VecDeque<Vector3<f64>>,
    dwell: usize,
}

impl OperatorState {
    /// `display_latency_s` is the delay between a tip motion and its effect
    /// on the perceived tip, which the operator's forward model accounts for.
    pub fn new(model: OperatorModel, display_latency_s: f64) -> Self {
        let delay = (model.reaction_delay_s * OPERATOR_RATE_HZ).round() as usize;
        let latency = (display_latency_s.max(0.0) * OPERATOR_RATE_HZ).round() as usize;
        Self {
            model,
            fifo: std::iter::repeat_n((Vector3::zeros(), false), delay).collect(),
            unseen: std::iter::repeat_n(Vector3::zeros(), latency).collect(),
            dwell: 0,
        }
    }

    /// Reset the press dwell and cancel queued presses when a new target is
    /// presented.
    pub fn present_target(&mut self) {
        self.dwell = 0;
        for (_, press) in self.fifo.iter_mut() {
            *press = false;
        }
    }

    /// One 100 Hz update: plan a velocity toward the perceived target, push
    /// it through the reaction-delay FIFO, and decide whether to press.
    ///
    /// `caution >= 1` divides the speed cap; manual operators move more
    /// slowly as the angle gain grows.
    pub fn update(
        &mut self,
        perceived_tip: &Vector3<f64>,
        perceived_target: &Vector3<f64>,
        caution: f64,
    ) -> OperatorCommand {
        // Plan from where the tip will be once the queued commands have run,
        // including motion that has happened but is not yet visible.
        let in_flight: Vector3<f64> = (self.fifo.iter().map(|(v, _)| v).sum::<Vector3<f64>>()
            + self.unseen.iter().sum::<Vector3<f64>>())
            / OPERATOR_RATE_HZ;
        let offset = perceived_target - perceived_tip - in_flight;
        let reach = offset.norm();
        let planned = if reach > 0.0 {
            offset / reach * (self.model.max_hand_speed / caution.max(1.0)).min(REACH_GAIN * reach)
        } else {
            Vector3::zeros()
        };
        let distance = (perceived_target - perceived_tip).norm();
        if distance < self.model.press_threshold {
            self.dwell += 1;
        } else {
            self.dwell = 0;
        }
        self.fifo
            .push_back((planned, self.dwell >= PRESS_DWELL_UPDATES));
        let (velocity, press) = self.fifo.pop_front().unwrap_or((planned, false));
        if !self.unseen.is_empty() {
            self.unseen.pop_front();
            self.unseen.push_back(velocity);
        }
        OperatorCommand { velocity, press }
    }
}

/// Split `v` into components along and across the shaft axis `axis`.
fn split_axial(v: &Vector3<f64>, axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let axial = axis * v.dot(axis);
    (axial, v - axial)
}

/// Lever mapping of a handle displacement or velocity to the tip: lateral
/// components are inverted and scaled by `d_in / d_out`, axial ones pass
/// 1:1. `axis` is the unit shaft direction.
pub fn lever_map(v: &Vector3<f64>, axis: &Vector3<f64>, config: &ManualConfig) -> Vector3<f64> {
    let (axial, lateral) = split_axial(v, axis);
    axial - lateral * config.lever_ratio()
}

/// Result of [`manual_plant_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManualTick {
    /// Tip position driven by the intended handle motion alone.
    pub nominal: Vector3<f64>,
    /// Nominal tip plus the lever-mapped, angle-amplified hand noise.
    pub tip: Vector3<f64>,
}

/// Hand-held instrument pivoting in the trocar.
///
/// The intended handle velocity is integrated through the lever; the hand
/// noise displacement is mapped through the same lever and multiplied by the
/// angle gain `g(theta)`.
pub fn manual_plant_step(
    handle_velocity: &Vector3<f64>,
    hand_noise: &Vector3<f64>,
    nominal_tip: &Vector3<f64>,
    fulcrum: &Vector3<f64>,
    config: &ManualConfig,
    noise_gain: f64,
    dt: f64,
) -> ManualTick {
    let axis = shaft_axis(nominal_tip, fulcrum);
    let nominal = nominal_tip + lever_map(handle_velocity, &axis, config) * dt;
    let axis = shaft_axis(&nominal, fulcrum);
    ManualTick {
        nominal,
        tip: nominal + lever_map(hand_noise, &axis, config) * noise_gain,
    }
}

fn shaft_axis(tip: &Vector3<f64>, fulcrum: &Vector3<f64>) -> Vector3<f64> {
    (tip - fulcrum)
        .try_normalize(1e-12)
        .unwrap_or_else(Vector3::z)
}

/// Handle velocity that produces the planned tip velocity through the lever.
pub fn manual_handle_velocity(
    tip_velocity: &Vector3<f64>,
    tip: &Vector3<f64>,
    fulcrum: &Vector3<f64>,
    config: &ManualConfig,
) -> Vector3<f64> {
    let (axial, lateral) = split_axial(tip_velocity, &shaft_axis(tip, fulcrum));
    axial - lateral / config.lever_ratio()
}

/// The arm, its trocar, and the settled starting configuration.
#[derive(Debug, Clone)]
pub struct RoboticRig {
    pub chain: KinematicChain,
    pub constraint: RcmConstraint,
    pub home: FullState,
    /// Commanded tip orientation (shaft along `-vertical`, wrist centred).
    pub tip_orientation: UnitQuaternion<f64>,
}

impl RoboticRig {
    /// Place the instrument through the fulcrum with the tip at the
    /// workcell start depth and settle the nullspace posture.
    pub fn setup(chain: &KinematicChain, cell: &Workcell, ik: &IkParams) -> Result<Self, SimError> {
        let constraint = RcmConstraint::new(cell.fulcrum);
        let down = cell.down();
        let j = chain.joints();
        let wrist = j[8].transform(0.0).rotation * j[9].transform(0.0).rotation;
        let shaft_frame =
            UnitQuaternion::rotation_between(&Vector3::z(), &down).unwrap_or_else(|| {
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
            });
        let tip_orientation = shaft_frame * wrist;
        let target = Pose::new(cell.start_tip(), tip_orientation);

        let q0 = JointVector::from_row_slice(&[0.0, 0.5, 0.0, -1.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let inst = chain.instrument_frames(&q0);
        let mut state = FullState::new(q0, clamp_lambda(project_onto_shaft(&inst, &cell.fulcrum)));
        // Drive to the target, then keep iterating so the centering term
        // settles the self-motion before the first trial.
        let settle = IkParams {
            max_iters: 4000,
            ..*ik
        };
        for _ in 0..settle.max_iters {
            state = dls_step(chain, &state, &target, &constraint, &settle)?;
        }
        let result = solve_ik(chain, &state, &target, &constraint, &settle)?;
        if !result.converged {
            return Err(SimError::Setup(format!(
                "start pose not reached: pos {:.3e} mm, rot {:.3e} rad, rcm {:.3e} mm",
                result.residual_pos, result.residual_rot, result.residual_rcm
            )));
        }
        Ok(Self {
            chain: chain.clone(),
            constraint,
            home: result.state,
            tip_orientation,
        })
    }

    pub fn home_tip(&self) -> Pose {
        self.chain.tip_pose(&self.home.q)
    }
}

/// State advanced by [`robotic_plant_step`].
#[derive(Debug, Clone)]
pub struct RoboticPlant<'a> {
    pub rig: &'a RoboticRig,
    pub pipeline: TeleopPipeline,
    pub state: FullState,
    pub ik: IkParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoboticTick {
    pub tip: Pose,
    pub rcm_residual: f64,
    pub converged: bool,
}

impl<'a> RoboticPlant<'a> {
    pub fn new(
        rig: &'a RoboticRig,
        config: &RoboticConfig,
        master_start: &MasterSample,
    ) -> Result<Self, SimError> {
        let home_tip = Pose::new(rig.home_tip().position, rig.tip_orientation);
        Ok(Self {
            rig,
            pipeline: TeleopPipeline::new(config.teleop, master_start, home_tip)?,
            state: rig.home,
            ik: config.ik,
        })
    }
}

/// Master sample -> filter -> clutch/scale -> warm-started IK -> FK tip.
pub fn robotic_plant_step(
    sample: &MasterSample,
    plant: &mut RoboticPlant<'_>,
) -> Result<RoboticTick, SimError> {
    let target = plant.pipeline.step(sample);
    let rig = plant.rig;
    let result = solve_ik(
        &rig.chain,
        &plant.state,
        &target,
        &rig.constraint,
        &plant.ik,
    )?;
    plant.state = result.state;
    let tip = rig.chain.tip_pose(&plant.state.q);
    Ok(RoboticTick {
        tip,
        rcm_residual: result.residual_rcm,
        converged: result.converged,
    })
}

/// Time average of the joint-centering objective over a joint trajectory.
pub fn ergonomic_cost(chain: &KinematicChain, trajectory: &[JointVector]) -> Result<f64, SimError> {
    if trajectory.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    let total: f64 = trajectory
        .iter()
        .map(|q| nullspace_objective_grad(chain, q).0)
        .sum();
    Ok(total / trajectory.len() as f64)
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub operator_id: usize,
    pub tier: Tier,
    pub condition: Condition,
    pub target_index: usize,
    pub insertion_angle_deg: f64,
    pub error_mm: f64,
    pub time_s: f64,
    pub order_position: usize,
    pub seed: u64,
}

pub const TRIAL_COLUMNS: [&str; 9] = [
    "operator_id",
    "tier",
    "condition",
    "target_index",
    "insertion_angle_deg",
    "error_mm",
    "time_s",
    "order_position",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// The per-target time limit expired before a press.
    Timeout,
    /// At least one IK solve failed to converge while on this target.
    IkNonConvergence,
    /// The tip force exceeded the console alert threshold.
    ForceAlert,
    /// Manual overshoot past the foam surface beyond the damage depth.
    TissueDamage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub operator_id: usize,
    pub condition: Condition,
    pub target_index: usize,
    pub kind: EventKind,
}

/// Per-tick trace row (written only on request).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub target_index: usize,
    pub tip_x: f64,
    pub tip_y: f64,
    pub tip_z: f64,
    pub rcm_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrialOutcome {
    pub records: Vec<TrialRecord>,
    pub events: Vec<TrialEvent>,
    pub ergonomic_cost: f64,
    pub ticks: usize,
    pub nonconverged_ticks: usize,
    /// Largest RCM residual over converged ticks (mm); 0 for manual trials.
    pub max_rcm_residual: f64,
    pub trace: Vec<TraceRow>,
}

/// Everything `run_trial` needs besides the operator and the board.
#[derive(Debug, Clone)]
pub struct TrialContext<'a> {
    pub condition: ConditionConfig,
    pub contact: ContactModel,
    pub rig: &'a RoboticRig,
    pub timeout_s: f64,
    pub trace: bool,
}

/// Identifies the operator whose trial is simulated.
#[derive(Debug, Clone, Copy)]
pub struct OperatorSpec {
    pub id: usize,
    pub model: OperatorModel,
}

enum Plant<'a> {
    Manual {
        config: ManualConfig,
        nominal: Vector3<f64>,
        /// Replays the hand-held tool pose on the anthropomorphic chain for
        /// the ergonomic proxy.
        posture: FullState,
    },
    Robotic {
        plant: Box<RoboticPlant<'a>>,
        master: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
    },
}

/// Simulate one operator touching all ten targets in a seed-derived order.
pub fn run_trial(
    ctx: &TrialContext<'_>,
    operator: &OperatorSpec,
    board: &TargetBoard,
    seed: u64,
) -> Result<TrialOutcome, SimError> {
    let model = operator.model;
    model.validate()?;
    let condition = ctx.condition.condition();
    let mut rng = stream_rng(seed);
    let mut order: Vec<usize> = (0..board.targets.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let tremor = Tremor::new(&model, &mut rng);
    let rig = ctx.rig;
    let fulcrum = board.fulcrum;
    let dt = 1.0 / PLANT_RATE_HZ;
    let start_tip = rig.home_tip().position;

    let mut plant = match ctx.condition {
        ConditionConfig::Manual(config) => Plant::Manual {
            config,
            nominal: start_tip,
            posture: rig.home,
        },
        ConditionConfig::Robotic(config) => {
            let master_start = MasterSample {
                t: 0.0,
                position: tremor.sample(0.0, &mut rng),
                orientation: UnitQuaternion::identity(),
                clutch_engaged: true,
                contact_press: false,
            };
            Plant::Robotic {
                plant: Box::new(RoboticPlant::new(rig, &config, &master_start)?),
                master: Vector3::zeros(),
                orientation: UnitQuaternion::identity(),
            }
        }
    };

    let mut out = TrialOutcome::default();
    // Half the visual averaging window, plus the filter group delay.
    let display_latency = VISUAL_WINDOW_TICKS as f64 / PLANT_RATE_HZ / 2.0
        + match ctx.condition {
            ConditionConfig::Manual(_) => 0.0,
            ConditionConfig::Robotic(c) => {
                (c.teleop.window_len() as f64 - 1.0) / 2.0 / c.teleop.sample_rate_hz
            }
        };
    let mut operator_state = OperatorState::new(model, display_latency);
    let mut tip = start_tip;
    let mut tick: usize = 0;
    let mut velocity = Vector3::zeros();
    let mut posture_samples: Vec<JointVector> = Vec::new();
    let mut seen_tip = MovingAverage::new(VISUAL_WINDOW_TICKS, start_tip);
    let mut caution = 1.0;

    for (order_position, &target_index) in order.iter().enumerate() {
        let target = board.targets[target_index];
        let angle = insertion_angle(&target.center, &fulcrum, &board.vertical)?;
        let perception_gain = match condition {
            Condition::Manual => model.noise_gain(angle),
            Condition::Robotic => 1.0,
        };
        let perceived_target =
            target.center + gaussian3(&mut rng, model.perception_noise * perception_gain);
        operator_state.present_target();
        let presented_at = tick;
        let deadline = presented_at + (ctx.timeout_s * PLANT_RATE_HZ).round() as usize;
        let mut flags: Vec<EventKind> = Vec::new();
        let mut pressed = false;

        while tick < deadline {
            if tick % TICKS_PER_OPERATOR_UPDATE == 0 {
                let cmd = operator_state.update(&seen_tip.output(), &perceived_target, caution);
                velocity = cmd.velocity;
                if cmd.press {
                    pressed = true;
                    break;
                }
            }
            tick += 1;
            let t = tick as f64 * dt;
            let noise = tremor.sample(t, &mut rng);
            match &mut plant {
                Plant::Manual {
                    config,
                    nominal,
                    posture,
                } => {
                    let theta = insertion_angle(nominal, &fulcrum, &board.vertical).unwrap_or(0.0);
                    let handle = manual_handle_velocity(&velocity, nominal, &fulcrum, config);
                    let step = manual_plant_step(
                        &handle,
                        &noise,
                        nominal,
                        &fulcrum,
                        config,
                        model.noise_gain(theta),
                        dt,
                    );
                    *nominal = step.nominal;
                    tip = step.tip;
                    caution = model.noise_gain(theta);
                    if tick % ERGONOMIC_SAMPLE_TICKS == 0 {
                        *posture = replay_posture(rig, posture, &tip);
                        posture_samples.push(posture.q);
                    }
                }
                Plant::Robotic {
                    plant,
                    master,
                    orientation,
                } => {
                    *master += velocity * plant.pipeline.config().scale * dt;
                    let sample = MasterSample {
                        t,
                        position: *master + noise,
                        orientation: *orientation,
                        clutch_engaged: true,
                        contact_press: false,
                    };
                    let step = robotic_plant_step(&sample, plant)?;
                    tip = step.tip.position;
                    out.ticks += 1;
                    if step.converged {
                        out.max_rcm_residual = out.max_rcm_residual.max(step.rcm_residual);
                    } else {
                        out.nonconverged_ticks += 1;
                        push_flag(&mut flags, EventKind::IkNonConvergence);
                    }
                    if tick % ERGONOMIC_SAMPLE_TICKS == 0 {
                        posture_samples.push(plant.state.q);
                    }
                    if ctx.trace {
                        out.trace.push(TraceRow {
                            t,
                            target_index,
                            tip_x: tip.x,
                            tip_y: tip.y,
                            tip_z: tip.z,
                            rcm_residual: step.rcm_residual,
                            converged: step.converged,
                        });
                    }
                }
            }
            seen_tip.step(tip);
            if ctx.trace && matches!(plant, Plant::Manual { .. }) {
                out.trace.push(TraceRow {
                    t,
                    target_index,
                    tip_x: tip.x,
                    tip_y: tip.y,
                    tip_z: tip.z,
                    rcm_residual: 0.0,
                    converged: true,
                });
            }
        }
        if !pressed {
            push_flag(&mut flags, EventKind::Timeout);
        }
        // contact outcome at the press (or timeout) instant
        match &plant {
            Plant::Manual { .. } => {
                if -ctx.contact.height(&tip, &target) > TISSUE_DAMAGE_DEPTH_MM {
                    push_flag(&mut flags, EventKind::TissueDamage);
                }
            }
            Plant::Robotic { plant, .. } => {
                if plant
                    .pipeline
                    .force_alert(ctx.contact.force(&tip, &target))?
                {
                    push_flag(&mut flags, EventKind::ForceAlert);
                }
            }
        }
        out.records.push(TrialRecord {
            operator_id: operator.id,
            tier: model.tier,
            condition,
            target_index,
            insertion_angle_deg: angle,
            error_mm: (tip - target.center).norm(),
            time_s: ((tick - presented_at) as f64 * dt).max(dt),
            order_position,
            seed,
        });
        out.events.extend(flags.into_iter().map(|kind| TrialEvent {
            operator_id: operator.id,
            condition,
            target_index,
            kind,
        }));
    }
    if posture_samples.is_empty() {
        posture_samples.push(match &plant {
            Plant::Manual { posture, .. } => posture.q,
            Plant::Robotic { plant, .. } => plant.state.q,
        });
    }
    out.ergonomic_cost = ergonomic_cost(&rig.chain, &posture_samples)?;
    Ok(out)
}

fn push_flag(flags: &mut Vec<EventKind>, kind: EventKind) {
    if !flags.contains(&kind) {
        flags.push(kind);
    }
}

/// Track a hand-held tool pose (shaft through the fulcrum, tip at `tip`)
/// with the anthropomorphic chain; used only for the ergonomic proxy.
fn replay_posture(rig: &RoboticRig, from: &FullState, tip: &Vector3<f64>) -> FullState {
    let home_axis = rig.home_tip().position - rig.constraint.fulcrum;
    let axis = tip - rig.constraint.fulcrum;
    let tilt = UnitQuaternion::rotation_between(&home_axis, &axis).unwrap_or_default();
    let target = Pose::new(*tip, tilt * rig.tip_orientation);
    let params = IkParams {
        max_iters: 50,
        ..IkParams::default()
    };
    match solve_ik(&rig.chain, from, &target, &rig.constraint, &params) {
        Ok(r) => r.state,
        Err(_) => *from,
    }
}

/// Configuration of a whole synthetic study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_experts: usize,
    pub n_novices: usize,
    pub expert: OperatorModel,
    pub novice: OperatorModel,
    pub board_seed: u64,
    pub workcell: Workcell,
    pub manual: ManualConfig,
    pub robotic: RoboticConfig,
    pub contact: ContactModel,
    pub timeout_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_experts: 5,
            n_novices: 5,
            expert: OperatorModel::expert(),
            novice: OperatorModel::novice(),
            board_seed: 7,
            workcell: Workcell::default(),
            manual: ManualConfig::default(),
            robotic: RoboticConfig::default(),
            contact: ContactModel::default(),
            timeout_s: TARGET_TIMEOUT_S,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_experts + self.n_novices == 0 {
            return Err(SimError::InvalidConfig(
                "at least one operator is required".into(),
            ));
        }
        self.expert.validate()?;
        self.novice.validate()?;
        if self.expert.tier != Tier::Expert || self.novice.tier != Tier::Novice {
            return Err(SimError::InvalidConfig(
                "operator tiers do not match their blocks".into(),
            ));
        }
        let (e, n) = (&self.expert, &self.novice);
        for (name, a, b) in [
            ("tremor_rms", e.tremor_rms, n.tremor_rms),
            ("reaction_delay_s", e.reaction_delay_s, n.reaction_delay_s),
            ("perception_noise", e.perception_noise, n.perception_noise),
        ] {
            if a > b {
                return Err(SimError::InvalidConfig(format!(
                    "expert {name} ({a}) exceeds novice {name} ({b})"
                )));
            }
        }
        if !(self.manual.handle_length_mm > 0.0) || !(self.manual.insertion_depth_mm > 0.0) {
            return Err(SimError::InvalidConfig(
                "manual lever lengths must be positive".into(),
            ));
        }
        self.robotic.teleop.validate()?;
        self.robotic.ik.validate()?;
        if !(self.contact.stiffness_n_per_mm > 0.0) || !(self.contact.contact_threshold_mm >= 0.0) {
            return Err(SimError::InvalidConfig(
                "contact model parameters out of range".into(),
            ));
        }
        if !(self.timeout_s > 0.0) {
            return Err(SimError::InvalidConfig("timeout_s must be positive".into()));
        }
        let w = &self.workcell;
        if !(w.depth_min_mm > 0.0 && w.depth_max_mm >= w.depth_min_mm && w.max_angle_deg > 0.0)
            || w.vertical.norm() < 1e-9
        {
            return Err(SimError::InvalidConfig(
                "workcell geometry out of range".into(),
            ));
        }
        Ok(())
    }

    /// Operators in id order: experts first, then novices.
    pub fn operators(&self) -> Vec<OperatorSpec> {
        let experts = (0..self.n_experts).map(|_| self.expert);
        let novices = (0..self.n_novices).map(|_| self.novice);
        experts
            .chain(novices)
            .enumerate()
            .map(|(id, model)| OperatorSpec { id, model })
            .collect()
    }

    /// Crossover order: even operators start robotic, odd operators manual.
    pub fn condition_order(operator_id: usize) -> [Condition; 2] {
        if operator_id % 2 == 0 {
            [Condition::Robotic, Condition::Manual]
        } else {
            [Condition::Manual, Condition::Robotic]
        }
    }

    pub fn trial_seed(&self, operator_id: usize, condition: Condition) -> u64 {
        stream_seed(self.seed, &[operator_id as u64, condition.stream_id()])
    }

    pub fn condition_config(&self, condition: Condition) -> ConditionConfig {
        match condition {
            Condition::Manual => ConditionConfig::Manual(self.manual),
            Condition::Robotic => ConditionConfig::Robotic(self.robotic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSummary {
    pub operator_id: usize,
    pub tier: Tier,
    pub condition: Condition,
    /// Position of this condition in the operator's crossover sequence.
    pub session: usize,
    pub mean_error_mm: f64,
    pub total_time_s: f64,
    pub ergonomic_cost: f64,
    pub timeouts: usize,
    pub ik_nonconverged_ticks: usize,
    pub robot_ticks: usize,
    pub max_rcm_residual_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<OperatorSummary>,
    pub events: Vec<TrialEvent>,
    pub board: TargetBoard,
}

/// Execution options for [`run_experiment_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for independent trials (1 = sequential).
    pub threads: usize,
    /// Collect per-tick traces and hand them to the sink (forces one thread).
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            trace: false,
        }
    }
}

/// Run every operator through both conditions in crossover order.
pub fn run_experiment(
    config: &ExperimentConfig,
    chain: &KinematicChain,
) -> Result<Dataset, SimError> {
    run_experiment_with(config, chain, RunOptions::default(), |_, _, _| {})
}

struct Job {
    operator: OperatorSpec,
    condition: Condition,
    session: usize,
}

/// As [`run_experiment`] with explicit threading and tracing. Output is
/// identical for any thread count.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    chain: &KinematicChain,
    options: RunOptions,
    mut sink: impl FnMut(usize, Condition, &[TraceRow]),
) -> Result<Dataset, SimError> {
    config.validate()?;
    let rig = RoboticRig::setup(chain, &config.workcell, &config.robotic.ik)?;
    let board = generate_board(config.board_seed, &config.workcell);
    let jobs: Vec<Job> = config
        .operators()
        .into_iter()
        .flat_map(|operator| {
            ExperimentConfig::condition_order(operator.id)
                .into_iter()
                .enumerate()
                .map(move |(session, condition)| Job {
                    operator,
                    condition,
                    session,
                })
        })
        .collect();
    let run = |job: &Job| {
        let ctx = TrialContext {
            condition: config.condition_config(job.condition),
            contact: config.contact,
            rig: &rig,
            timeout_s: config.timeout_s,
            trace: options.trace,
        };
        run_trial(
            &ctx,
            &job.operator,
            &board,
            config.trial_seed(job.operator.id, job.condition),
        )
    };

    let threads = if options.trace {
        1
    } else {
        options.threads.clamp(1, jobs.len().max(1))
    };
    let outcomes: Vec<Result<TrialOutcome, SimError>> = if threads == 1 {
        jobs.iter()
            .map(|job| {
                let outcome = run(job)?;
                if options.trace {
                    sink(job.operator.id, job.condition, &outcome.trace);
                }
                Ok(outcome)
            })
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<TrialOutcome, SimError>>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let result = run(job);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .unwrap_or_else(|| Err(SimError::InvalidConfig("trial not executed".into())))
            })
            .collect()
    };

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut events = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let outcome = outcome?;
        let n = outcome.records.len().max(1) as f64;
        summaries.push(OperatorSummary {
            operator_id: job.operator.id,
            tier: job.operator.model.tier,
            condition: job.condition,
            session: job.session,
            mean_error_mm: outcome.records.iter().map(|r| r.error_mm).sum::<f64>() / n,
            total_time_s: outcome.records.iter().map(|r| r.time_s).sum(),
            ergonomic_cost: outcome.ergonomic_cost,
            timeouts: outcome
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Timeout)
                .count(),
            ik_nonconverged_ticks: outcome.nonconverged_ticks,
            robot_ticks: outcome.ticks,
            max_rcm_residual_mm: outcome.max_rcm_residual,
        });
        records.extend(outcome.records);
        events.extend(outcome.events);
    }
    sort_records(&mut records);
    summaries.sort_by_key(|s| (s.operator_id, s.condition));
    events.sort_by(|a, b| {
        (a.operator_id, a.condition, a.target_index, a.kind).cmp(&(
            b.operator_id,
            b.condition,
            b.target_index,
            b.kind,
        ))
    });
    Ok(Dataset {
        records,
        summaries,
        events,
        board,
    })
}

/// Canonical output order: (operator, condition, target).
pub fn sort_records(records: &mut [TrialRecord]) {
    records.sort_by_key(|r| (r.operator_id, r.condition, r.target_index));
}

pub fn write_trials_csv<W: Write>(writer: W, records: &[TrialRecord]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRIAL_COLUMNS).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.operator_id.to_string(),
            r.tier.to_string(),
            r.condition.to_string(),
            r.target_index.to_string(),
            format!("{:.6}", r.insertion_angle_deg),
            format!("{:.6}", r.error_mm),
            format!("{:.3}", r.time_s),
            r.order_position.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e.to_string()))
}

/// Parse `trials.csv`; errors name the offending line or missing column.
pub fn read_trials_csv<R: Read>(reader: R) -> Result<Vec<TrialRecord>, SimError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| SimError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 9];
    for (slot, name) in index.iter_mut().zip(TRIAL_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SimError::Csv {
                line: 1,
                reason: format!("missing column {name}"),
            })?;
    }
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| SimError::Csv {
            line,
            reason: e.to_string(),
        })?;
        let field = |k: usize| record.get(index[k]).unwrap_or("");
        let bad = |k: usize| SimError::Csv {
            line,
            reason: format!("column {}: cannot parse {:?}", TRIAL_COLUMNS[k], field(k)),
        };
        let parse_f = |k: usize| field(k).parse::<f64>().map_err(|_| bad(k));
        let parse_u = |k: usize| field(k).parse::<usize>().map_err(|_| bad(k));
        let rec = TrialRecord {
            operator_id: parse_u(0)?,
            tier: field(1).parse().map_err(|_| bad(1))?,
            condition: field(2).parse().map_err(|_| bad(2))?,
            target_index: parse_u(3)?,
            insertion_angle_deg: parse_f(4)?,
            error_mm: parse_f(5)?,
            time_s: parse_f(6)?,
            order_position: parse_u(7)?,
            seed: field(8).parse::<u64>().map_err(|_| bad(8))?,
        };
        if !(rec.error_mm >= 0.0) || !(rec.time_s > 0.0) {
            return Err(SimError::Csv {
                line,
                reason: "error_mm must be >= 0 and time_s > 0".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Unit axis helper for callers building custom workcells.
pub fn unit(v: Vector3<f64>) -> Option<Unit<Vector3<f64>>> {
    Unit::try_new(v, 1e-12)
}

/// Residuals of the rig at its home state (sanity check for setups).
pub fn home_residuals(rig: &RoboticRig, ik: &IkParams) -> (f64, f64, f64) {
    let target = Pose::new(rig.home_tip().position, rig.tip_orientation);
    let e = evaluate(&rig.chain, &rig.home, &target, &rig.constraint, ik);
    (e.residual_pos, e.residual_rot, e.residual_rcm)
}

fn write_serde_csv<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// `operators.csv`: one row per operator and condition.
pub fn write_operator_csv<W: Write>(writer: W, rows: &[OperatorSummary]) -> Result<(), SimError> {
    write_serde_csv(writer, rows)
}

pub fn read_operator_csv<R: Read>(reader: R) -> Result<Vec<OperatorSummary>, SimError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| SimError::Csv {
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// `events.csv`: flagged per-target events.
pub fn write_events_csv<W: Write>(writer: W, rows: &[TrialEvent]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["operator_id", "condition", "target_index", "kind"])
        .map_err(csv_io)?;
    for e in rows {
        let kind = match e.kind {
            EventKind::Timeout => "timeout",
            EventKind::IkNonConvergence => "ik_non_convergence",
            EventKind::ForceAlert => "force_alert",
            EventKind::TissueDamage => "tissue_damage",
        };
        w.write_record([
            e.operator_id.to_string(),
            e.condition.to_string(),
            e.target_index.to_string(),
            kind.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-tick trace of one trial.
pub fn write_trace_csv<W: Write>(writer: W, rows: &[TraceRow]) -> Result<(), SimError> {
    write_serde_csv(writer, rows)
}
