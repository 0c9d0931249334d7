//! Master-to-slave pipeline: moving-average tremor filter, clutch, motion
//! scaling and force alerts.
//!
//! Filtering is applied to the master position before scaling.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeleopError {
    #[error("invalid teleop parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("tip force must be a non-negative number, got {0}")]
    NegativeForce(f64),
    #[error("master sample {index}: time {t} does not follow {prev} at period {period}")]
    SampleTiming {
        index: usize,
        t: f64,
        prev: f64,
        period: f64,
    },
    #[error("master CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeleopConfig {
    /// Master-to-slave downscaling factor `S` (hand motion / tip motion).
    pub scale: f64,
    /// Averaging window (s).
    pub window_s: f64,
    /// Master sampling rate (Hz).
    pub sample_rate_hz: f64,
    /// Tip force above which an alert is raised (N).
    pub force_threshold_n: f64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            scale: 5.0,
            window_s: 0.05,
            sample_rate_hz: 1000.0,
            force_threshold_n: 5.0,
        }
    }
}

impl TeleopConfig {
    /// Number of taps of the boxcar filter.
    pub fn window_len(&self) -> usize {
        (self.window_s * self.sample_rate_hz).round() as usize
    }

    pub fn period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<(), TeleopError> {
        if !(self.scale >= 1.0) || !self.scale.is_finite() {
            return Err(TeleopError::InvalidParam {
                name: "scale",
                value: self.scale,
            });
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(TeleopError::InvalidParam {
                name: "sample_rate_hz",
                value: self.sample_rate_hz,
            });
        }
        if !(self.window_s > 0.0) || !self.window_s.is_finite() || self.window_len() < 1 {
            return Err(TeleopError::InvalidParam {
                name: "window_s",
                value: self.window_s,
            });
        }
        if !(self.force_threshold_n >= 0.0) || !self.force_threshold_n.is_finite() {
            return Err(TeleopError::InvalidParam {
                name: "force_threshold_n",
                value: self.force_threshold_n,
            });
        }
        Ok(())
    }
}

/// One sample from the master console.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasterSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub clutch_engaged: bool,
    pub contact_press: bool,
}

/// How often the running sum is recomputed from the buffer.
const SUM_REFRESH_PERIOD: usize = 4096;

/// Boxcar FIR over the last `N` position samples.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    buffer: VecDeque<Vector3<f64>>,
    sum: Vector3<f64>,
    since_refresh: usize,
}

impl MovingAverage {
    /// Filter of length `len` (at least 1) pre-filled with `initial`.
    pub fn new(len: usize, initial: Vector3<f64>) -> Self {
        let len = len.max(1);
        Self {
            buffer: std::iter::repeat_n(initial, len).collect(),
            sum: initial * len as f64,
            since_refresh: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn output(&self) -> Vector3<f64> {
        self.sum / self.buffer.len() as f64
    }

    /// Push one sample and return the filtered position.
    pub fn step(&mut self, x: Vector3<f64>) -> Vector3<f64> {
        let oldest = self.buffer.pop_front().expect("non-empty buffer");
        self.buffer.push_back(x);
        self.since_refresh += 1;
        if self.since_refresh >= SUM_REFRESH_PERIOD {
            self.sum = self.buffer.iter().sum();
            self.since_refresh = 0;
        } else {
            self.sum += x - oldest;
        }
        self.output()
    }
}

/// Clutch with anchor-reset on engage.
#[derive(Debug, Clone)]
pub struct Clutch {
    engaged: bool,
    master_anchor: Vector3<f64>,
    master_anchor_rot: UnitQuaternion<f64>,
    slave_anchor: Pose,
    last_target: Pose,
}

impl Clutch {
    /// Engaged clutch anchored at the given master and slave poses.
    pub fn new(
        master_position: Vector3<f64>,
        master_rot: UnitQuaternion<f64>,
        slave: Pose,
    ) -> Self {
        Self {
            engaged: true,
            master_anchor: master_position,
            master_anchor_rot: master_rot,
            slave_anchor: slave,
            last_target: slave,
        }
    }

    pub fn engaged(&self) -> bool {
        self.engaged
    }

    pub fn last_target(&self) -> Pose {
        self.last_target
    }

    /// Map a filtered master pose to a slave tip target.
    ///
    /// Engaged: `slave_anchor + (master - master_anchor) / S`, with the
    /// master's rotation since the anchor applied unscaled. Disengaged: the
    /// last target is held. On the disengaged-to-engaged transition both
    /// anchors are reset so the target does not jump.
    pub fn apply(
        &mut self,
        master_position: Vector3<f64>,
        master_rot: UnitQuaternion<f64>,
        engaged: bool,
        scale: f64,
    ) -> Pose {
        if engaged && !self.engaged {
            self.master_anchor = master_position;
            self.master_anchor_rot = master_rot;
            self.slave_anchor = self.last_target;
        }
        self.engaged = engaged;
        if !engaged {
            return self.last_target;
        }
        let position = self.slave_anchor.position + (master_position - self.master_anchor) / scale;
        let relative = master_rot * self.master_anchor_rot.inverse();
        let target = Pose::new(position, relative * self.slave_anchor.orientation);
        self.last_target = target;
        target
    }
}

/// Filter, clutch and scaling for one simulated console. Single owner.
#[derive(Debug, Clone)]
pub struct TeleopPipeline {
    config: TeleopConfig,
    filter: MovingAverage,
    clutch: Clutch,
}

impl TeleopPipeline {
    pub fn new(
        config: TeleopConfig,
        master: &MasterSample,
        slave: Pose,
    ) -> Result<Self, TeleopError> {
        config.validate()?;
        Ok(Self {
            filter: MovingAverage::new(config.window_len(), master.position),
            clutch: Clutch::new(master.position, master.orientation, slave),
            config,
        })
    }

    pub fn config(&self) -> &TeleopConfig {
        &self.config
    }

    pub fn clutch(&self) -> &Clutch {
        &self.clutch
    }

    /// Advance by one master sample and return the slave tip target.
    pub fn step(&mut self, sample: &MasterSample) -> Pose {
        let filtered = self.filter.step(sample.position);
        self.clutch.apply(
            filtered,
            sample.orientation,
            sample.clutch_engaged,
            self.config.scale,
        )
    }

    pub fn force_alert(&self, tip_force: f64) -> Result<bool, TeleopError> {
        force_alert(tip_force, &self.config)
    }
}

/// `true` iff the force strictly exceeds the configured threshold.
pub fn force_alert(tip_force: f64, config: &TeleopConfig) -> Result<bool, TeleopError> {
    if !(tip_force >= 0.0) {
        return Err(TeleopError::NegativeForce(tip_force));
    }
    Ok(tip_force > config.force_threshold_n)
}

/// Magnitude response of an `n`-tap boxcar at frequency `f` for sample rate
/// `fs`: `|sin(pi f n / fs) / (n sin(pi f / fs))|`.
pub fn boxcar_gain(f: f64, n: usize, fs: f64) -> f64 {
    let x = std::f64::consts::PI * f / fs;
    if x.sin().abs() < 1e-15 {
        return 1.0;
    }
    ((x * n as f64).sin() / (n as f64 * x.sin())).abs()
}

/// Check that sample times are strictly increasing at the configured period
/// (to within 1e-6 of a period).
pub fn check_sample_timing(
    samples: &[MasterSample],
    config: &TeleopConfig,
) -> Result<(), TeleopError> {
    let period = config.period();
    for (i, w) in samples.windows(2).enumerate() {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) || (dt - period).abs() > 1e-6 * period {
            return Err(TeleopError::SampleTiming {
                index: i + 1,
                t: w[1].t,
                prev: w[0].t,
                period,
            });
        }
    }
    Ok(())
}

const MASTER_COLUMNS: [&str; 10] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "clutch", "press",
];

pub fn write_master_csv<W: Write>(writer: W, samples: &[MasterSample]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MASTER_COLUMNS)?;
    for s in samples {
        let q = s.orientation.quaternion();
        w.write_record([
            format!("{:.6}", s.t),
            format!("{:.17e}", s.position.x),
            format!("{:.17e}", s.position.y),
            format!("{:.17e}", s.position.z),
            format!("{:.17e}", q.w),
            format!("{:.17e}", q.i),
            format!("{:.17e}", q.j),
            format!("{:.17e}", q.k),
            (s.clutch_engaged as u8).to_string(),
            (s.contact_press as u8).to_string(),
        ])?;
    }
    w.flush()
}

pub fn read_master_csv<R: Read>(reader: R) -> Result<Vec<MasterSample>, TeleopError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TeleopError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 10];
    for (slot, name) in index.iter_mut().zip(MASTER_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TeleopError::Csv {
                line: 1,
                reason: format!("missing column {name}"),
            })?;
    }
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| TeleopError::Csv {
            line,
            reason: e.to_string(),
        })?;
        let field = |k: usize| -> Result<f64, TeleopError> {
            let raw = record.get(index[k]).unwrap_or("");
            raw.parse::<f64>().map_err(|_| TeleopError::Csv {
                line,
                reason: format!("column {}: cannot parse {raw:?}", MASTER_COLUMNS[k]),
            })
        };
        let flag = |k: usize| -> Result<bool, TeleopError> {
            match record.get(index[k]).unwrap_or("") {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(TeleopError::Csv {
                    line,
                    reason: format!("column {}: expected 0/1, got {other:?}", MASTER_COLUMNS[k]),
                }),
            }
        };
        let quat = Quaternion::new(field(4)?, field(5)?, field(6)?, field(7)?);
        if !(quat.norm() > 0.0) {
            return Err(TeleopError::Csv {
                line,
                reason: "zero quaternion".into(),
            });
        }
        out.push(MasterSample {
            t: field(0)?,
            position: Vector3::new(field(1)?, field(2)?, field(3)?),
            orientation: UnitQuaternion::from_quaternion(quat),
            clutch_engaged: flag(8)?,
            contact_press: flag(9)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, x: f64, engaged: bool) -> MasterSample {
        MasterSample {
            t,
            position: Vector3::new(x, 0.0, 0.0),
            orientation: UnitQuaternion::identity(),
            clutch_engaged: engaged,
            contact_press: false,
        }
    }

    #[test]
    fn window_length_from_config() {
        assert_eq!(TeleopConfig::default().window_len(), 50);
        let c = TeleopConfig {
            window_s: 0.0004,
            ..TeleopConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TeleopConfig {
            scale: 0.5,
            ..TeleopConfig::default()
        };
        assert_eq!(
            c.validate(),
            Err(TeleopError::InvalidParam {
                name: "scale",
                value: 0.5
            })
        );
    }

    #[test]
    fn constant_input_passes_unchanged() {
        let c = Vector3::new(1.5, -2.0, 7.25);
        let mut f = MovingAverage::new(50, Vector3::zeros());
        let mut out = Vector3::zeros();
        for _ in 0..50 {
            out = f.step(c);
        }
        assert!((out - c).norm() < 1e-12);
    }

    #[test]
    fn step_reaches_half_in_ceil_half_window() {
        for n in [1usize, 2, 7, 50, 51] {
            let mut f = MovingAverage::new(n, Vector3::zeros());
            let mut k = 0;
            loop {
                k += 1;
                if f.step(Vector3::new(1.0, 0.0, 0.0)).x >= 0.5 {
                    break;
                }
            }
            assert_eq!(k, n.div_ceil(2), "n = {n}");
        }
    }

    #[test]
    fn running_sum_stays_exact_over_long_runs() {
        let mut f = MovingAverage::new(50, Vector3::zeros());
        let mut history = Vec::new();
        for i in 0..20_000 {
            let x = Vector3::new(
                (i as f64 * 0.37).sin() * 1e3,
                (i as f64).cos(),
                1e-3 * i as f64,
            );
            history.push(x);
            let out = f.step(x);
            let exact: Vector3<f64> = history[history.len().saturating_sub(50)..]
                .iter()
                .sum::<Vector3<f64>>()
                / 50.0;
            if history.len() >= 50 {
                assert!((out - exact).norm() < 1e-9, "drift at {i}");
            }
        }
    }

    #[test]
    fn engaged_motion_is_scaled() {
        let slave = Pose::new(Vector3::new(1.0, 2.0, 3.0), UnitQuaternion::identity());
        let mut clutch = Clutch::new(Vector3::zeros(), UnitQuaternion::identity(), slave);
        let out = clutch.apply(
            Vector3::new(50.0, 0.0, 0.0),
            UnitQuaternion::identity(),
            true,
            5.0,
        );
        assert!((out.position - slave.position - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn disengaged_target_is_held() {
        let slave = Pose::new(Vector3::new(1.0, 2.0, 3.0), UnitQuaternion::identity());
        let mut clutch = Clutch::new(Vector3::zeros(), UnitQuaternion::identity(), slave);
        let held = clutch.apply(
            Vector3::new(5.0, 0.0, 0.0),
            UnitQuaternion::identity(),
            true,
            5.0,
        );
        for k in 0..100 {
            let out = clutch.apply(
                Vector3::new(k as f64 * 3.0, -7.0, 2.0),
                UnitQuaternion::from_euler_angles(0.1 * k as f64, 0.0, 0.0),
                false,
                5.0,
            );
            assert_eq!(out, held);
        }
    }

    #[test]
    fn reengage_has_no_jump() {
        let slave = Pose::new(Vector3::zeros(), UnitQuaternion::identity());
        let mut p =
            TeleopPipeline::new(TeleopConfig::default(), &sample(0.0, 0.0, true), slave).unwrap();
        let mut prev = slave.position;
        let mut max_jump: f64 = 0.0;
        let mut t = 0.0;
        let mut x = 0.0;
        // engage -> move -> disengage -> move -> re-engage (hold still first)
        let phases = [(true, 0.02), (false, 0.03), (true, 0.0), (true, -0.01)];
        for (engaged, velocity) in phases {
            for _ in 0..200 {
                t += 0.001;
                x += velocity;
                let out = p.step(&sample(t, x, engaged));
                let jump = (out.position - prev).norm();
                if !engaged {
                    assert_eq!(jump, 0.0);
                }
                max_jump = max_jump.max(jump);
                prev = out.position;
            }
        }
        // Motion while engaged is continuous (at most one tick of scaled
        // motion); re-engaging adds nothing on top.
        assert!(max_jump <= 0.03 / 5.0 + 1e-12, "max jump {max_jump}");
    }

    #[test]
    fn force_alert_threshold() {
        let c = TeleopConfig::default();
        assert!(!force_alert(4.9, &c).unwrap());
        assert!(force_alert(5.1, &c).unwrap());
        assert!(!force_alert(5.0, &c).unwrap());
        assert_eq!(force_alert(-0.1, &c), Err(TeleopError::NegativeForce(-0.1)));
        assert!(force_alert(f64::NAN, &c).is_err());
    }

    #[test]
    fn boxcar_closed_form_values() {
        assert!((boxcar_gain(10.0, 50, 1000.0) - 2.0 / std::f64::consts::PI).abs() < 1e-3);
        assert!(boxcar_gain(20.0, 50, 1000.0) < 1e-12);
        assert_eq!(boxcar_gain(0.0, 50, 1000.0), 1.0);
    }

    #[test]
    fn timing_check() {
        let c = TeleopConfig::default();
        let ok: Vec<_> = (0..10)
            .map(|i| sample(i as f64 * 0.001, 0.0, true))
            .collect();
        assert!(check_sample_timing(&ok, &c).is_ok());
        let mut bad = ok.clone();
        bad[4].t = bad[3].t;
        assert!(matches!(
            check_sample_timing(&bad, &c),
            Err(TeleopError::SampleTiming { index: 4, .. })
        ));
    }

    #[test]
    fn master_csv_round_trip() {
        let samples: Vec<_> = (0..5)
            .map(|i| MasterSample {
                t: i as f64 * 0.001,
                position: Vector3::new(i as f64, 0.5, -1.0),
                orientation: UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3 * i as f64),
                clutch_engaged: i % 2 == 0,
                contact_press: i == 3,
            })
            .collect();
        let mut buf = Vec::new();
        write_master_csv(&mut buf, &samples).unwrap();
        let back = read_master_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a.t - b.t).abs() < 1e-9);
            assert!((a.position - b.position).norm() < 1e-12);
            assert!(a.orientation.angle_to(&b.orientation) < 1e-12);
            assert_eq!(a.clutch_engaged, b.clutch_engaged);
            assert_eq!(a.contact_press, b.contact_press);
        }
        let err = read_master_csv(
            "t,px,py,pz,qw,qx,qy,qz,clutch,press\n0,0,0,0,1,0,0,0,2,0\n".as_bytes(),
        )
        .unwrap_err();
        assert!(matches!(err, TeleopError::Csv { line: 2, .. }));
    }
}
