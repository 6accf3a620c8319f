use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ti,
    Fi,
    Srl,
    Joint,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ti => "ti",
            Task::Fi => "fi",
            Task::Srl => "srl",
            Task::Joint => "joint",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ti" => Ok(Task::Ti),
            "fi" => Ok(Task::Fi),
            "srl" => Ok(Task::Srl),
            "joint" => Ok(Task::Joint),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected ti, fi, srl or joint)"
            ))),
        }
    }
}

/// Model dimensions and training settings. Loaded by overlaying a JSON
/// object on the defaults of its `preset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub task: Task,
    pub seed: u64,

    pub token_dim: usize,
    pub pos_dim: usize,
    pub constituent_dim: usize,
    pub gcn_dim: usize,
    pub gcn_layers: usize,
    pub gcn_mean_aggregation: bool,
    /// When false, path features are zero vectors of the same width.
    pub use_gcn: bool,
    pub backbone_hidden: usize,
    pub backbone_layers: usize,
    pub lu_dim: usize,
    pub frame_dim: usize,
    pub fi_hidden: [usize; 2],
    pub ai_proj_dim: usize,
    pub bilinear_dim: usize,
    pub ac_proj_dim: usize,
    pub dropout: f64,
    /// Apply constraint penalties inside the CRF partition function.
    pub constrain_training: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_threshold: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub grad_clip: f64,
    pub l2_transitions: f64,
    pub l2_bilinear: f64,
    pub batch_size: usize,
    /// Stop as soon as the dev metric reaches this value.
    pub stop_at_metric: Option<f64>,
    pub threads: Option<usize>,

    pub train_data: Option<String>,
    pub dev_data: Option<String>,
    pub ontology: Option<String>,
    pub output_dir: Option<String>,
    pub token_vectors: Option<String>,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let desk = Config {
            preset: Preset::Desk,
            task: Task::Joint,
            seed: 13,
            token_dim: 48,
            pos_dim: 16,
            constituent_dim: 32,
            gcn_dim: 32,
            gcn_layers: 2,
            gcn_mean_aggregation: false,
            use_gcn: true,
            backbone_hidden: 32,
            backbone_layers: 2,
            lu_dim: 32,
            frame_dim: 32,
            fi_hidden: [64, 48],
            ai_proj_dim: 64,
            bilinear_dim: 64,
            ac_proj_dim: 64,
            dropout: 0.1,
            constrain_training: true,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            scheduler_patience: 5,
            scheduler_factor: 0.5,
            scheduler_threshold: 1e-4,
            early_stop_patience: 100,
            max_epochs: 500,
            grad_clip: 10.0,
            l2_transitions: 1e-4,
            l2_bilinear: 1e-4,
            batch_size: 8,
            stop_at_metric: None,
            threads: None,
            train_data: None,
            dev_data: None,
            ontology: None,
            output_dir: None,
            token_vectors: None,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Config {
                preset: Preset::Paper,
                token_dim: 768,
                pos_dim: 20,
                constituent_dim: 128,
                gcn_dim: 128,
                backbone_hidden: 394,
                lu_dim: 128,
                frame_dim: 128,
                fi_hidden: [788, 512],
                ai_proj_dim: 256,
                bilinear_dim: 256,
                ac_proj_dim: 256,
                dropout: 0.2,
                lr: 2e-5,
                max_epochs: 200,
                ..desk
            },
        }
    }

    /// Overlays `value` (a JSON object) on its preset's defaults.
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(overrides) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset = match overrides.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|_| Error::Config(format!("unknown preset {p} (expected desk or paper)")))?,
        };
        let mut base = match serde_json::to_value(Config::preset(preset))? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            base.insert(k, v);
        }
        let config: Config = serde_json::from_value(Value::Object(base))
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` style overrides; values are parsed as JSON and
    /// fall back to strings.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut map: Map<String, Value> = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, raw) in pairs {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            map.insert(k.clone(), v);
        }
        let config: Config =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn embedding_dim(&self) -> usize {
        self.token_dim + self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if 2 * self.backbone_hidden != self.embedding_dim() {
            return fail(format!(
                "backbone output 2 x {} must equal token_dim + pos_dim = {}",
                self.backbone_hidden,
                self.embedding_dim()
            ));
        }
        if self.ai_proj_dim != self.bilinear_dim {
            return fail(format!(
                "ai_proj_dim {} must equal bilinear_dim {}",
                self.ai_proj_dim, self.bilinear_dim
            ));
        }
        let dims = [
            ("token_dim", self.token_dim),
            ("pos_dim", self.pos_dim),
            ("constituent_dim", self.constituent_dim),
            ("gcn_dim", self.gcn_dim),
            ("gcn_layers", self.gcn_layers),
            ("backbone_layers", self.backbone_layers),
            ("lu_dim", self.lu_dim),
            ("frame_dim", self.frame_dim),
            ("fi_hidden[0]", self.fi_hidden[0]),
            ("fi_hidden[1]", self.fi_hidden[1]),
            ("ai_proj_dim", self.ai_proj_dim),
            ("ac_proj_dim", self.ac_proj_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let positive = [
            ("adam_eps", self.adam_eps),
            ("scheduler_factor", self.scheduler_factor),
            ("grad_clip", self.grad_clip),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
            return fail(format!("{name} must be positive"));
        }
        let non_negative = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("scheduler_threshold", self.scheduler_threshold),
            ("l2_transitions", self.l2_transitions),
            ("l2_bilinear", self.l2_bilinear),
        ];
        if let Some((name, _)) = non_negative.iter().find(|(_, v)| v.is_nan() || *v < 0.0) {
            return fail(format!("{name} must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.scheduler_factor >= 1.0 {
            return fail("scheduler_factor must be below 1".into());
        }
        Ok(())
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::preset(Preset::Desk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        Config::preset(Preset::Desk).validate().unwrap();
        let paper = Config::preset(Preset::Paper);
        paper.validate().unwrap();
        assert_eq!(paper.embedding_dim(), 788);
        assert_eq!(2 * paper.backbone_hidden, 788);
        assert_eq!(Config::default().embedding_dim(), 64);
    }

    #[test]
    fn overlay_and_unknown_keys() {
        let c = Config::from_json(r#"{"preset": "paper", "lr": 0.5}"#).unwrap();
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.backbone_hidden, 394);
        let c = Config::from_json(r#"{"task": "srl"}"#).unwrap();
        assert_eq!(c.task, Task::Srl);
        assert_eq!(c.preset, Preset::Desk);
        assert!(matches!(Config::from_json(r#"{"learning_rate": 1}"#), Err(Error::Config(_))));
        assert!(Config::from_json(r#"{"preset": "huge"}"#).is_err());
        assert!(Config::from_json("[1]").is_err());
    }

    #[test]
    fn dimension_rules() {
        assert!(Config::from_json(r#"{"backbone_hidden": 16}"#).is_err());
        assert!(Config::from_json(r#"{"ai_proj_dim": 32}"#).is_err());
        assert!(Config::from_json(r#"{"dropout": 1.0}"#).is_err());
        assert!(Config::from_json(r#"{"gcn_layers": 0}"#).is_err());
    }

    #[test]
    fn overrides() {
        let c = Config::default()
            .with_overrides(&[("use_gcn".into(), "false".into()), ("task".into(), "fi".into())])
            .unwrap();
        assert!(!c.use_gcn);
        assert_eq!(c.task, Task::Fi);
        assert!(Config::default().with_overrides(&[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn round_trip() {
        let c = Config::preset(Preset::Paper);
        let back = Config::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
