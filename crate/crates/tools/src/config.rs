//! Line-based `key=value` configuration with dotted sections, for example
//! `flow.method=darts`. Blank lines and `#` comments are ignored. Unknown
//! keys are errors so typos cannot silently fall back to defaults.

use std::path::Path;

use nowcast_core::autodiff::AdamConfig;
use nowcast_core::flow::{FlowConfig, FlowMethod};
use nowcast_core::model::{ModelConfig, TrainConfig};
use nowcast_core::supervise::LossWeights;

use crate::error::{Result, ToolError};

#[derive(Debug, Clone)]
pub struct ToolkitConfig {
    pub flow: FlowConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub training: TrainConfig,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        ToolkitConfig {
            flow: FlowConfig::default(),
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            training: TrainConfig::default(),
        }
    }
}

fn bad(line_no: usize, detail: impl std::fmt::Display) -> ToolError {
    ToolError::Config(format!("config line {line_no}: {detail}"))
}

fn parse_num<T: std::str::FromStr>(line_no: usize, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(line_no, format!("cannot parse {key}={value}")))
}

impl ToolkitConfig {
    /// Apply one dotted key. `line_no` is only used in error messages.
    fn apply(&mut self, line_no: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "flow.method" => {
                self.flow.method = match value.trim() {
                    "lucas_kanade" | "lk" => FlowMethod::LucasKanade,
                    "darts" => FlowMethod::Darts,
                    other => return Err(bad(line_no, format!("unknown flow method {other}"))),
                }
            }
            "flow.lk_window" => self.flow.lk_window = parse_num(line_no, key, value)?,
            "flow.lk_smooth_sigma" => self.flow.lk_smooth_sigma = parse_num(line_no, key, value)?,
            "flow.darts_modes" => self.flow.darts_modes = parse_num(line_no, key, value)?,
            "flow.darts_regularization" => {
                self.flow.darts_regularization = parse_num(line_no, key, value)?
            }
            "flow.context_frames" => self.flow.context_frames = parse_num(line_no, key, value)?,
            "model.context_frames" => self.model.context_frames = parse_num(line_no, key, value)?,
            "model.horizon" => self.model.horizon = parse_num(line_no, key, value)?,
            "model.channels" => self.model.channels = parse_num(line_no, key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse_num(line_no, key, value)?,
            "model.reduc_factor" => self.model.reduc_factor = parse_num(line_no, key, value)?,
            "model.dropout" => self.model.dropout = parse_num(line_no, key, value)?,
            "model.evolver_depth" => self.model.evolver_depth = parse_num(line_no, key, value)?,
            "model.evolver_dim" => self.model.evolver_dim = parse_num(line_no, key, value)?,
            "model.lead_time_classes" => {
                self.model.lead_time_classes = parse_num(line_no, key, value)?
            }
            "losses.lambda_int" => self.losses.lambda_int = parse_num(line_no, key, value)?,
            "losses.lambda_motion" => self.losses.lambda_motion = parse_num(line_no, key, value)?,
            "losses.lambda_cos" => self.losses.lambda_cos = parse_num(line_no, key, value)?,
            "losses.lambda_kl" => self.losses.lambda_kl = parse_num(line_no, key, value)?,
            "training.steps" => self.training.steps = parse_num(line_no, key, value)?,
            "training.batch_size" => self.training.batch_size = parse_num(line_no, key, value)?,
            "training.lr" => self.training.adam.lr = parse_num(line_no, key, value)?,
            "training.seed" => self.training.seed = parse_num(line_no, key, value)?,
            "training.crop_margin" => self.training.crop_margin = parse_num(line_no, key, value)?,
            other => return Err(bad(line_no, format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<ToolkitConfig> {
        let mut cfg = ToolkitConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected key=value, got {line}")))?;
            cfg.apply(line_no, key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ToolkitConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
        ToolkitConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        let a: &AdamConfig = &self.training.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(ToolError::Config(format!("training.lr must be positive, got {}", a.lr)));
        }
        if self.training.steps == 0 || self.training.batch_size == 0 {
            return Err(ToolError::Config(
                "training.steps and training.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}
