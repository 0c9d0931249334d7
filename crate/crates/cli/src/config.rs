//! Run configuration: a TOML document resolved onto the experiment defaults.
//!
//! The grammar is documented in `docs/config.md`.

use std::path::PathBuf;

use nalgebra::Vector3;
use rcmsim_core::rcm::IkError;
use rcmsim_core::rcm::IkParams;
use rcmsim_core::sim::{
    ContactModel, ExperimentConfig, ManualConfig, OperatorModel, RoboticConfig, SimError, Tier,
    Workcell, TARGET_TIMEOUT_S,
};
use rcmsim_core::teleop::{TeleopConfig, TeleopError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The frozen parameter file shipped with the tool.
pub const DEFAULT_CONFIG: &str = include_str!("../../../docs/default.config");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config field {path}: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Field {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            Self::Field { path, .. } => Some(path),
            Self::Syntax(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_timeout")]
    pub target_timeout_s: f64,
    #[serde(default)]
    pub operators: OperatorsSection,
    #[serde(default)]
    pub board: BoardSection,
    #[serde(default)]
    pub conditions: ConditionsSection,
    #[serde(default)]
    pub contact: ContactModel,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_timeout() -> f64 {
    TARGET_TIMEOUT_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorsSection {
    pub experts: usize,
    pub novices: usize,
    pub expert: OperatorOverrides,
    pub novice: OperatorOverrides,
}

impl Default for OperatorsSection {
    fn default() -> Self {
        Self {
            experts: 5,
            novices: 5,
            expert: OperatorOverrides::default(),
            novice: OperatorOverrides::default(),
        }
    }
}

/// Per-tier changes to the built-in operator model; absent keys keep the
/// tier default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tremor_rms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tremor_band_hz: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reaction_delay_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_hand_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perception_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub press_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_sensitivity: Option<f64>,
}

impl OperatorOverrides {
    pub fn apply(&self, tier: Tier) -> OperatorModel {
        let mut m = OperatorModel::default_for(tier);
        if let Some(v) = self.tremor_rms {
            m.tremor_rms = v;
        }
        if let Some(v) = self.tremor_band_hz {
            m.tremor_band_hz = v;
        }
        if let Some(v) = self.reaction_delay_s {
            m.reaction_delay_s = v;
        }
        if let Some(v) = self.max_hand_speed {
            m.max_hand_speed = v;
        }
        if let Some(v) = self.perception_noise {
            m.perception_noise = v;
        }
        if let Some(v) = self.press_threshold {
            m.press_threshold = v;
        }
        if let Some(v) = self.angle_sensitivity {
            m.angle_sensitivity = v;
        }
        m
    }
}

/// Target board seed and workcell geometry overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoardSection {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fulcrum: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vertical: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_min_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_max_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub organ_center_depth_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_depth_mm: Option<f64>,
}

impl Default for BoardSection {
    fn default() -> Self {
        Self {
            seed: ExperimentConfig::default().board_seed,
            fulcrum: None,
            vertical: None,
            depth_min_mm: None,
            depth_max_mm: None,
            max_angle_deg: None,
            organ_center_depth_mm: None,
            start_depth_mm: None,
        }
    }
}

impl BoardSection {
    pub fn workcell(&self) -> Workcell {
        let mut w = Workcell::default();
        if let Some(v) = self.fulcrum {
            w.fulcrum = Vector3::from(v);
        }
        if let Some(v) = self.vertical {
            w.vertical = Vector3::from(v);
        }
        if let Some(v) = self.depth_min_mm {
            w.depth_min_mm = v;
        }
        if let Some(v) = self.depth_max_mm {
            w.depth_max_mm = v;
        }
        if let Some(v) = self.max_angle_deg {
            w.max_angle_deg = v;
        }
        if let Some(v) = self.organ_center_depth_mm {
            w.organ_center_depth_mm = v;
        }
        if let Some(v) = self.start_depth_mm {
            w.start_depth_mm = v;
        }
        w
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionsSection {
    pub manual: ManualConfig,
    pub robotic: RoboticConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled default.config parses")
    }

    /// Check every field and build the experiment description.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let ops = &self.operators;
        if ops.experts + ops.novices == 0 {
            return Err(ConfigError::field(
                "operators",
                "experts + novices must be at least 1",
            ));
        }
        let expert = ops.expert.apply(Tier::Expert);
        let novice = ops.novice.apply(Tier::Novice);
        for (block, model) in [("expert", &expert), ("novice", &novice)] {
            model.validate().map_err(|e| match e {
                SimError::InvalidOperator { name, value } => ConfigError::field(
                    format!("operators.{block}.{name}"),
                    format!("out of range ({value})"),
                ),
                other => ConfigError::field(format!("operators.{block}"), other.to_string()),
            })?;
        }
        self.check_manual(&self.conditions.manual)?;
        self.check_robotic(&self.conditions.robotic)?;
        positive(
            "contact.stiffness_n_per_mm",
            self.contact.stiffness_n_per_mm,
        )?;
        non_negative(
            "contact.contact_threshold_mm",
            self.contact.contact_threshold_mm,
        )?;
        positive("target_timeout_s", self.target_timeout_s)?;
        let workcell = self.board.workcell();
        self.check_workcell(&workcell)?;

        let experiment = ExperimentConfig {
            seed: self.seed,
            n_experts: ops.experts,
            n_novices: ops.novices,
            expert,
            novice,
            board_seed: self.board.seed,
            workcell,
            manual: self.conditions.manual,
            robotic: self.conditions.robotic,
            contact: self.contact,
            timeout_s: self.target_timeout_s,
        };
        experiment
            .validate()
            .map_err(|e| ConfigError::field("operators", e.to_string()))?;
        Ok(experiment)
    }

    fn check_manual(&self, m: &ManualConfig) -> Result<(), ConfigError> {
        positive("conditions.manual.handle_length_mm", m.handle_length_mm)?;
        positive("conditions.manual.insertion_depth_mm", m.insertion_depth_mm)
    }

    fn check_robotic(&self, r: &RoboticConfig) -> Result<(), ConfigError> {
        check_teleop(&r.teleop)?;
        check_ik(&r.ik)
    }

    fn check_workcell(&self, w: &Workcell) -> Result<(), ConfigError> {
        if !w.fulcrum.iter().all(|v| v.is_finite()) {
            return Err(ConfigError::field("board.fulcrum", "must be finite"));
        }
        if !(w.vertical.iter().all(|v| v.is_finite()) && w.vertical.norm() > 1e-9) {
            return Err(ConfigError::field(
                "board.vertical",
                "must be a nonzero vector",
            ));
        }
        positive("board.depth_min_mm", w.depth_min_mm)?;
        if !(w.depth_max_mm >= w.depth_min_mm) || !w.depth_max_mm.is_finite() {
            return Err(ConfigError::field(
                "board.depth_max_mm",
                format!("must be at least depth_min_mm ({})", w.depth_max_mm),
            ));
        }
        positive("board.max_angle_deg", w.max_angle_deg)?;
        if w.max_angle_deg >= 90.0 {
            return Err(ConfigError::field(
                "board.max_angle_deg",
                "must be below 90",
            ));
        }
        positive("board.organ_center_depth_mm", w.organ_center_depth_mm)?;
        positive("board.start_depth_mm", w.start_depth_mm)
    }
}

fn check_teleop(t: &TeleopConfig) -> Result<(), ConfigError> {
    t.validate().map_err(|e| match e {
        TeleopError::InvalidParam { name, value } => ConfigError::field(
            format!("conditions.robotic.teleop.{name}"),
            format!("out of range ({value})"),
        ),
        other => ConfigError::field("conditions.robotic.teleop", other.to_string()),
    })
}

fn check_ik(p: &IkParams) -> Result<(), ConfigError> {
    p.validate().map_err(|e| match e {
        IkError::InvalidParam { name, value } => ConfigError::field(
            format!("conditions.robotic.ik.{name}"),
            format!("out of range ({value})"),
        ),
        other => ConfigError::field("conditions.robotic.ik", other.to_string()),
    })
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::field(path, format!("must be positive ({v})")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::field(
            path,
            format!("must be non-negative ({v})"),
        ))
    }
}
