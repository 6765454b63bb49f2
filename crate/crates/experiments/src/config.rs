//! Experiment configuration: one TOML document describes a whole run.
//!
//! Fields left out of a file take the values of [`ExperimentConfig::default`],
//! which is the desk-scale class-incremental experiment. The top-level
//! `seed` is copied into every component that draws random numbers, so the
//! per-section `seed` fields are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use l2p_core::stream::{ClassIncrementalConfig, ClassOrder, DomainIncrementalConfig, GaussianConfig};
use l2p_core::{BackboneConfig, GeneratorConfig, LearnerConfig, PretrainConfig, Setting, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prompt-pool learner, possibly ablated.
    #[default]
    L2p,
    /// Linear head trained sequentially on frozen [class] features.
    FtseqFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SettingConfig {
    ClassIncremental(ClassIncrementalConfig),
    DomainIncremental(DomainIncrementalConfig),
    TaskAgnostic(GaussianConfig),
}

impl SettingConfig {
    pub fn setting(&self) -> Setting {
        match self {
            SettingConfig::ClassIncremental(_) => Setting::ClassIncremental,
            SettingConfig::DomainIncremental(_) => Setting::DomainIncremental,
            SettingConfig::TaskAgnostic(_) => Setting::TaskAgnostic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub method: Method,
    pub ablation: Variant,
    /// Output root; runs land in `<out_dir>/<run name>/`.
    pub out_dir: PathBuf,
    /// Task-agnostic runs write a checkpoint every this many batches.
    pub checkpoint_every: usize,
    /// Keep every checkpoint instead of only the latest.
    pub keep_checkpoints: bool,
    /// Task-agnostic histograms split the stream into this many segments.
    pub histogram_segments: usize,
    pub setting: SettingConfig,
    pub generator: GeneratorConfig,
    pub backbone: BackboneConfig,
    /// Pretraining samples drawn from each reserved generator class.
    pub pretrain_samples_per_class: usize,
    pub pretrain: PretrainConfig,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "class_incremental".into(),
            seed: 0,
            method: Method::L2p,
            ablation: Variant::Full,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 50,
            keep_checkpoints: false,
            histogram_segments: 5,
            setting: SettingConfig::ClassIncremental(ClassIncrementalConfig {
                train_per_class: 100,
                order: ClassOrder::FamilyBlocks,
                ..ClassIncrementalConfig::default()
            }),
            generator: GeneratorConfig::default(),
            backbone: BackboneConfig { pretrain_classes: 0, ..BackboneConfig::default() },
            pretrain_samples_per_class: 40,
            pretrain: PretrainConfig::default(),
            learner: LearnerConfig {
                pool_size: 20,
                top_n: 4,
                batch_size: 16,
                diversify: true,
                train_mask: true,
                ..LearnerConfig::default()
            },
        }
    }
}

/// Overlays `user` onto `base`, table by table. A `setting` table naming a
/// different kind replaces the base one instead of merging into it.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                let replaces = key == "setting" && u.get("kind").is_some_and(|k| Some(k) != b.get("kind"));
                if replaces {
                    base.insert(key, toml::Value::Table(u));
                } else {
                    overlay(b, u);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("default config serializes");
        overlay(&mut base, user);
        let config: ExperimentConfig =
            base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section and the combinations between them.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.effective_backbone().validate()?;
        self.effective_learner().validate()?;
        if self.learner.variant != Variant::Full && self.learner.variant != self.ablation {
            return Err(l2p_core::Error::config("learner.variant", "select ablations with the top-level `ablation`").into());
        }
        let reserved = self.generator.pretrain_classes().len();
        if self.backbone.pretrain_classes != reserved && self.backbone.pretrain_classes != 0 {
            return Err(l2p_core::Error::config(
                "backbone.pretrain_classes",
                format!("the generator reserves {reserved} classes; leave this at 0 or set it to {reserved}"),
            )
            .into());
        }
        let side = (self.generator.side, self.generator.channels);
        if side != (self.backbone.image_side, self.backbone.channels) {
            return Err(l2p_core::Error::config("backbone.image_side", "must match generator.side and channels").into());
        }
        if self.pretrain_samples_per_class == 0 {
            return Err(l2p_core::Error::config("pretrain_samples_per_class", "must be positive").into());
        }
        if self.method == Method::FtseqFrozen && self.ablation != Variant::Full {
            return Err(l2p_core::Error::config("ablation", "ablations apply to the l2p method only").into());
        }
        if let SettingConfig::TaskAgnostic(_) = self.setting {
            if self.learner.rehearsal_per_class > 0 {
                return Err(l2p_core::Error::config(
                    "learner.rehearsal_per_class",
                    "rehearsal needs task boundaries",
                )
                .into());
            }
            if self.checkpoint_every == 0 || self.histogram_segments == 0 {
                return Err(l2p_core::Error::config("checkpoint_every", "intervals must be positive").into());
            }
        }
        Ok(())
    }

    /// Learner settings with the ablation applied and the run seed copied in.
    pub fn effective_learner(&self) -> LearnerConfig {
        LearnerConfig { seed: self.seed, ..self.learner.clone() }.with_variant(self.ablation)
    }

    pub fn effective_generator(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.seed, ..self.generator.clone() }
    }

    pub fn effective_backbone(&self) -> BackboneConfig {
        BackboneConfig { pretrain_classes: self.generator.pretrain_classes().len(), ..self.backbone.clone() }
    }

    pub fn effective_pretrain(&self) -> PretrainConfig {
        PretrainConfig { seed: self.seed, ..self.pretrain.clone() }
    }

    pub fn effective_setting(&self) -> SettingConfig {
        match &self.setting {
            SettingConfig::ClassIncremental(c) => {
                SettingConfig::ClassIncremental(ClassIncrementalConfig { seed: self.seed, ..c.clone() })
            }
            SettingConfig::DomainIncremental(c) => SettingConfig::DomainIncremental(c.clone()),
            SettingConfig::TaskAgnostic(c) => SettingConfig::TaskAgnostic(GaussianConfig { seed: self.seed, ..c.clone() }),
        }
    }

    /// Hex SHA-256 over everything that affects results; the output
    /// directory and checkpoint retention are left out.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.keep_checkpoints = false;
        canonical.learner = canonical.effective_learner();
        canonical.generator = canonical.effective_generator();
        canonical.backbone = canonical.effective_backbone();
        canonical.pretrain = canonical.effective_pretrain();
        canonical.setting = canonical.effective_setting();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Digest of the inputs that determine the pretrained backbone.
    pub fn backbone_digest(&self) -> String {
        let key = (self.effective_generator(), self.effective_backbone(), self.effective_pretrain(), self.pretrain_samples_per_class);
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("serializes")))
    }

    /// Directory name for this run, e.g. `class_incremental-full-s3`.
    pub fn run_name(&self) -> String {
        let method = match self.method {
            Method::FtseqFrozen => "ftseq_frozen".to_string(),
            Method::L2p => {
                let v = serde_json::to_value(self.ablation).expect("serializes");
                v.as_str().unwrap_or("l2p").to_string()
            }
        };
        let rehearsal = match (self.method, self.learner.rehearsal_per_class) {
            (Method::L2p, n) if n > 0 => format!("-r{n}"),
            _ => String::new(),
        };
        format!("{}-{method}{rehearsal}-s{}", self.name, self.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    /// Applies `--ablation`: a learner variant name or `ftseq_frozen`.
    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        if name == "ftseq_frozen" {
            self.method = Method::FtseqFrozen;
            self.ablation = Variant::Full;
        } else {
            self.method = Method::L2p;
            self.ablation = name.parse()?;
            self.learner.variant = Variant::Full;
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_experiment() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_the_remaining_defaults() {
        let c = ExperimentConfig::from_toml("[learner]\nepochs = 2\n").unwrap();
        assert_eq!(c.learner.epochs, 2);
        assert_eq!(c.learner.pool_size, 20);
        assert!(c.learner.diversify);
    }

    #[test]
    fn switching_setting_kind_starts_from_that_kind() {
        let c = ExperimentConfig::from_toml("[setting]\nkind = \"task_agnostic\"\nsteps = 40\n").unwrap();
        match c.setting {
            SettingConfig::TaskAgnostic(g) => assert_eq!((g.steps, g.classes), (40, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_toml("[learner]\npool_sise = 3\n").unwrap_err().to_string();
        assert!(e.contains("pool_sise"), "{e}");
        let e = ExperimentConfig::from_toml("[learner]\nlr = -1.0\n").unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
        let e = ExperimentConfig::from_toml("method = \"ftseq_frozen\"\nablation = \"mean_key\"\n").unwrap_err().to_string();
        assert!(e.contains("ablation"), "{e}");
    }

    #[test]
    fn digest_tracks_results_not_locations() {
        let a = ExperimentConfig::default();
        let moved = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.digest(), moved.digest());
        let reseeded = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.digest(), reseeded.digest());
        let mut tweaked = a.clone();
        tweaked.learner.lr = 0.01;
        assert_ne!(a.digest(), tweaked.digest());
        let mut ignored = a.clone();
        ignored.learner.seed = 99;
        assert_eq!(a.digest(), ignored.digest());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.set_ablation("single_prompt").unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.run_name(), "class_incremental-single_prompt-s0");
        c.set_ablation("ftseq_frozen").unwrap();
        assert_eq!(c.run_name(), "class_incremental-ftseq_frozen-s0");
    }
}
