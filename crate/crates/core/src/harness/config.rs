//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every key has a documented default, unknown keys are rejected, and the
//! resolved configuration is hashed and echoed into every output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::sha256_hex;
use crate::baseline::BoardContact;
use crate::calibration::{AdamConfig, ParamSpace, TpeConfig};
use crate::cutsim::{FoodSpec, SimParams};
use crate::error::{Error, Result};
use crate::rl::env::EnvConfig;
use crate::rl::sac::SacConfig;
use crate::rl::train::{default_schedule, SliceTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemRole {
    Train,
    HeldOut,
}

/// One food item: geometry plus the hidden parameters that stand in for the
/// physical item when reference profiles are synthesised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemSpec {
    pub name: String,
    pub role: ItemRole,
    pub height: f64,
    #[serde(default = "default_spring_count")]
    pub spring_count: usize,
    #[serde(default = "default_column_width")]
    pub slice_column_width: f64,
    pub hidden: SimParams,
    /// Reference profiles; empty means `<output_dir>/profiles/<name>.csv`.
    #[serde(default)]
    pub profiles: Vec<PathBuf>,
}

fn default_spring_count() -> usize {
    4
}

fn default_column_width() -> f64 {
    0.005
}

impl ItemSpec {
    pub fn food(&self) -> FoodSpec {
        FoodSpec {
            name: self.name.clone(),
            height: self.height,
            slice_column_width: self.slice_column_width,
            spring_count: self.spring_count,
            anchor_y: 0.0,
        }
    }
}

fn item(name: &str, role: ItemRole, height: f64, p: [f64; 6]) -> ItemSpec {
    ItemSpec {
        name: name.into(),
        role,
        height,
        spring_count: default_spring_count(),
        slice_column_width: default_column_width(),
        hidden: SimParams::from_array(p),
        profiles: Vec::new(),
    }
}

/// Three training items of low, medium and high stiffness plus one held out.
pub fn default_items() -> Vec<ItemSpec> {
    use ItemRole::*;
    vec![
        item("tomato", Train, 0.05, [4000.0, 10.0, 6500.0, 30.0, 100.0, 0.5]),
        item("cucumber", Train, 0.04, [6000.0, 12.0, 7000.0, 25.0, 100.0, 0.5]),
        item("potato", Train, 0.035, [7000.0, 14.0, 7500.0, 20.0, 100.0, 0.6]),
        item("carrot", HeldOut, 0.03, [7500.0, 16.0, 7000.0, 25.0, 100.0, 0.6]),
    ]
}

/// Scripted constant-speed cut that produces the reference profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    /// Only this item; `None` simulates every item.
    pub scene: Option<String>,
    /// m/s, downward.
    pub speed: f64,
    pub dt: f64,
    /// Start height above the item, m.
    pub clearance: f64,
    /// Final depth below the board surface, m.
    pub stop_depth: f64,
    /// Time held at the final depth, s.
    pub hold: f64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            scene: None,
            speed: 0.02,
            dt: 1e-4,
            clearance: 0.005,
            stop_depth: 0.001,
            hold: 0.5,
        }
    }
}

impl SimulateSettings {
    /// Profile duration for an item, rounded up to a whole number of steps.
    pub fn duration(&self, height: f64) -> f64 {
        let travel = (height + self.clearance + self.stop_depth) / self.speed + self.hold;
        (travel / self.dt).ceil() * self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub tpe: TpeConfig,
    pub adam: AdamConfig,
    pub space: ParamSpace,
    /// Board contact of the spring baseline.
    pub baseline_board: BoardContact,
    /// Solver step the baseline ERP/CFM pair refers to, s.
    pub baseline_solver_step: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            tpe: TpeConfig::default(),
            adam: AdamConfig::default(),
            space: ParamSpace::default(),
            baseline_board: BoardContact::default(),
            baseline_solver_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Continue from `policies/<tag>/final.ckpt` when it exists.
    pub resume: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { resume: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub schedule: Vec<SliceTask>,
    /// Which checkpoint `eval` and `compare` load: "best" or "final".
    pub checkpoint: String,
    /// Write per-slice trace and phase CSVs.
    pub traces: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            checkpoint: "final".into(),
            traces: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub simulate: SimulateSettings,
    pub calibration: CalibrationSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub items: Vec<ItemSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            simulate: SimulateSettings::default(),
            calibration: CalibrationSettings::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            items: default_items(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sac.validate()?;
        self.calibration.tpe.validate()?;
        self.calibration.adam.validate()?;
        if self.items.is_empty() {
            return Err(Error::NoCalibratedItems);
        }
        for (i, it) in self.items.iter().enumerate() {
            if self.items[..i].iter().any(|o| o.name == it.name) {
                return Err(Error::Config(format!("duplicate item '{}'", it.name)));
            }
            if !(it.height > 0.0) || it.spring_count == 0 || !(it.slice_column_width > 0.0) {
                return Err(Error::Config(format!("item '{}' has invalid geometry", it.name)));
            }
            it.hidden.validate()?;
        }
        if let Some(scene) = &self.simulate.scene {
            self.item(scene)?;
        }
        let s = &self.simulate;
        if !(s.speed > 0.0 && s.dt > 0.0 && s.hold >= 0.0 && s.clearance >= 0.0 && s.stop_depth >= 0.0) {
            return Err(Error::Config("simulate: speed and dt must be positive, the rest non-negative".into()));
        }
        if !matches!(self.eval.checkpoint.as_str(), "best" | "final") {
            return Err(Error::Config(format!(
                "eval.checkpoint must be \"best\" or \"final\", got \"{}\"",
                self.eval.checkpoint
            )));
        }
        Ok(())
    }

    pub fn item(&self, name: &str) -> Result<&ItemSpec> {
        self.items
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::Config(format!("unknown item '{name}'")))
    }

    pub fn held_out(&self) -> Result<&ItemSpec> {
        self.items
            .iter()
            .find(|i| i.role == ItemRole::HeldOut)
            .ok_or(Error::MissingHeldOutItem)
    }

    /// Canonical TOML of the fully resolved configuration.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved configuration without the output location, so artifacts
    /// produced in different directories compare equal.
    pub fn portable_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.resolved_toml()
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.portable_toml()?.as_bytes()))
    }

    /// `path` relative to the output directory when it lies below it.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.output_dir).unwrap_or(path).to_path_buf()
    }

    pub fn profile_paths(&self, item: &ItemSpec) -> Vec<PathBuf> {
        if item.profiles.is_empty() {
            vec![self.output_dir.join("profiles").join(format!("{}.csv", item.name))]
        } else {
            item.profiles.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[env]\nmax_step = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        let text = cfg.resolved_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_ne!(cfg.hash().unwrap(), RunConfig::default().hash().unwrap());
        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn missing_scene_is_config_error() {
        let err = RunConfig::from_toml("[simulate]\nscene = \"leek\"").unwrap_err();
        assert!(err.is_config_error());
    }
}
