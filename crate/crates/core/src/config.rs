//! Declarative run configuration: one TOML file with sections per phase,
//! individually overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DomainSpec, Setting, SplitSizes, TaskPreset};
use crate::labels::LabelSpace;
use crate::nn::{BackboneSpec, ClassifierSpec};
use crate::sched::TrainSchedule;
use crate::stage1::AblationSwitches;
use crate::stage2::InitPolicy;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub setting: String,
    pub num_classes: usize,
    pub num_sources: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            setting: "non_overlapping".into(),
            num_classes: 6,
            num_sources: 2,
            image_size: 64,
            seed: 0,
            train_per_domain: 60,
            test_per_domain: 50,
        }
    }
}

impl TaskConfig {
    pub fn setting(&self) -> Result<Setting> {
        self.setting.parse()
    }

    pub fn preset(&self) -> Result<TaskPreset> {
        TaskPreset::build(self.setting()?, self.num_classes, self.num_sources)
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        let all = DomainSpec::default_set(self.num_classes, self.image_size, self.seed);
        // One spec per source (cycling through the source styles), then the
        // target domain.
        let mut specs: Vec<DomainSpec> = (0..self.num_sources)
            .map(|i| {
                let mut s = all[i % 2].clone();
                s.id = format!("source_{i}");
                s.seed = s.seed.wrapping_add(i as u64 * 1000);
                s
            })
            .collect();
        specs.push(all[2].clone());
        specs
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train_per_domain: self.train_per_domain,
            test_per_domain: self.test_per_domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub depth: usize,
    pub downsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            depth: 2,
            downsample_factor: 2,
        }
    }
}

impl ModelConfig {
    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            input_channels: 3,
            feature_channels: self.feature_channels,
            depth: self.depth,
            downsample_factor: self.downsample_factor,
        }
    }

    pub fn classifier_spec(&self, space: LabelSpace) -> ClassifierSpec {
        ClassifierSpec {
            label_space: space,
            feature_channels: self.feature_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub switches: AblationSwitches,
    /// Pseudo-label confidence floor; 0 keeps every pixel.
    pub threshold: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            switches: AblationSwitches::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateConfig {
    pub init: InitPolicy,
}

impl Default for IntegrateConfig {
    fn default() -> Self {
        Self {
            init: InitPolicy::Best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: TrainSchedule,
    pub stage1: TrainSchedule,
    pub stage2: TrainSchedule,
    pub adapt: AdaptConfig,
    pub integrate: IntegrateConfig,
    /// Seeds used by the ablation ladder; single-run commands use the first.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainSchedule {
                total_iterations: 1200,
                initial_lr: 0.05,
                ..Default::default()
            },
            stage1: TrainSchedule {
                total_iterations: 150,
                initial_lr: 2.5e-4,
                ..Default::default()
            },
            stage2: TrainSchedule {
                total_iterations: 640,
                initial_lr: 2.5e-4,
                ..Default::default()
            },
            adapt: AdaptConfig::default(),
            integrate: IntegrateConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.into()))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.preset()?;
        self.model.backbone_spec().validate()?;
        if self.task.image_size % self.model.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by downsample factor {}",
                self.task.image_size, self.model.downsample_factor
            )));
        }
        for schedule in [&self.pretrain, &self.stage1, &self.stage2] {
            schedule.validate()?;
        }
        if !(0.0..=1.0).contains(&self.adapt.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.adapt.threshold
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        Ok(())
    }

    /// Re-seeds every phase consistently (phases get distinct streams).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.stage1.seed = seed.wrapping_add(1);
        self.stage2.seed = seed.wrapping_add(2);
        self
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(config, loaded);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "out_dir = \"x\"\n[task]\nnum_classes = 4\n[stage1]\ntotal_iterations = 7\n",
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.task.num_classes, 4);
        assert_eq!(config.stage1.total_iterations, 7);
        assert_eq!(config.task.num_sources, 2);
        assert_eq!(config.stage2.total_iterations, 640);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut config = RunConfig::default();
        config.task.setting = "sideways".into();
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.adapt.threshold = 1.5;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.task.image_size = 63;
        assert!(config.validate().is_err());
    }

    #[test]
    fn seeding_offsets_phases() {
        let config = RunConfig::default().with_seed(10);
        assert_eq!(config.pretrain.seed, 10);
        assert_eq!(config.stage1.seed, 11);
        assert_eq!(config.stage2.seed, 12);
    }

    #[test]
    fn domain_specs_match_source_count() {
        let mut task = TaskConfig::default();
        task.num_sources = 3;
        let specs = task.domain_specs();
        assert_eq!(specs.len(), 4);
        assert_eq!(specs[0].id, "source_0");
        assert_eq!(specs[3].id, "target");
        // Distinct seeds so cloned styles still render distinct scenes.
        assert_ne!(specs[0].seed, specs[2].seed);
    }
}
