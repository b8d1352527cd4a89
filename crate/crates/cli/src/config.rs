use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use terraseg::catalog::TemporalWindow;
use terraseg::model::UNetConfig;
use terraseg::stacker::StackSpec;
use terraseg::synth::SynthConfig;
use terraseg::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Deforestation,
    Fire,
}

pub const FIRE_TILE_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    /// Grid cell edge in degrees; defaults to two tiles.
    pub cell_size: Option<f64>,
    /// Probability of keeping a training tile without positive pixels.
    pub keep_prob: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            k: 5,
            cell_size: None,
            keep_prob: 0.25,
        }
    }
}

/// Stage locations, relative to the `--out` directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub catalog: PathBuf,
    pub tiles: PathBuf,
    pub folds: PathBuf,
    pub checkpoints: PathBuf,
    pub predictions: PathBuf,
    pub blend: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus".into(),
            catalog: "catalog.jsonl".into(),
            tiles: "tiles".into(),
            folds: "folds.csv".into(),
            checkpoints: "checkpoints".into(),
            predictions: "predictions".into(),
            blend: "blend".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything a pipeline run needs. Seeds in the nested sections are
/// replaced by the top-level `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task: Task,
    pub seed: u64,
    pub paths: Paths,
    /// Defaults to the desk stack for deforestation, the fire stack for fire.
    pub stack: Option<StackSpec>,
    /// Defaults to the desk U-Net sized to the stack's channel count.
    pub model: Option<UNetConfig>,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub threshold: Option<f32>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("parse {}: {e}", path.display())))
    }

    pub fn window(&self) -> TemporalWindow {
        match self.task {
            Task::Deforestation => TemporalWindow::PlusMinusMonths(2),
            Task::Fire => TemporalWindow::TargetPlusPreviousMonths(3),
        }
    }

    /// The stack with task constraints applied.
    pub fn stack(&self) -> StackSpec {
        let mut spec = self.stack.clone().unwrap_or_else(|| match self.task {
            Task::Deforestation => StackSpec::desk(),
            Task::Fire => StackSpec::fire_full_scale(),
        });
        if self.task == Task::Fire {
            spec.tile_size = FIRE_TILE_SIZE;
        }
        spec.canonical()
    }

    pub fn model(&self, in_channels: usize) -> UNetConfig {
        self.model.clone().unwrap_or_else(|| UNetConfig::desk(in_channels))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn cell_size(&self, tile_size: usize, pixel_deg: f64) -> f64 {
        self.split.cell_size.unwrap_or(2.0 * tile_size as f64 * pixel_deg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_presets() {
        let fire = PipelineConfig {
            task: Task::Fire,
            stack: Some(StackSpec::desk()),
            ..Default::default()
        };
        assert_eq!(fire.stack().tile_size, 256);
        assert_eq!(fire.window(), TemporalWindow::TargetPlusPreviousMonths(3));
        let defo = PipelineConfig::default();
        assert_eq!(defo.window(), TemporalWindow::PlusMinusMonths(2));
        assert_eq!(defo.stack().channel_count(), 16);
    }

    #[test]
    fn partial_json_and_seed_override() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "train": {"epochs": 2}, "task": "fire"}"#).unwrap();
        assert_eq!(c.train().epochs, 2);
        assert_eq!(c.train().seed, 9);
        assert_eq!(c.synth().seed, 9);
        assert_eq!(c.task, Task::Fire);
    }
}
