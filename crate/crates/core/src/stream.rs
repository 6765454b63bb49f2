//! Continual-learning streams built from a [`Generator`].
//!
//! [`TaskStream`] covers settings with task boundaries (class- and
//! domain-incremental). [`GaussianStream`] has no boundaries at all: class
//! presence drifts smoothly with the step count.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::synthetic::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ClassIncremental,
    DomainIncremental,
    TaskAgnostic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    /// Seeded shuffle of all stream classes.
    #[default]
    Random,
    /// Seeded shuffle of whole generator families, classes of a family kept
    /// together, so tasks aligned with families are dissimilar to each other.
    FamilyBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Stream labels introduced or exercised by this task.
    pub labels: Vec<usize>,
    pub train: Vec<Sample>,
    /// Empty when the stream has a single shared test set.
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    setting: Setting,
    /// Generator class for each stream label.
    vocabulary: Vec<usize>,
    tasks: Vec<Task>,
    shared_test: Option<Vec<Sample>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassIncrementalConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub order: ClassOrder,
    pub seed: u64,
}

impl Default for ClassIncrementalConfig {
    fn default() -> Self {
        ClassIncrementalConfig {
            tasks: 5,
            classes_per_task: 5,
            train_per_class: 40,
            test_per_class: 20,
            order: ClassOrder::Random,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainIncrementalConfig {
    pub tasks: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Unseen domains pooled into the single test set.
    pub test_domains: usize,
}

impl Default for DomainIncrementalConfig {
    fn default() -> Self {
        DomainIncrementalConfig {
            tasks: 4,
            classes: 10,
            train_per_class: 30,
            test_per_class: 10,
            test_domains: 2,
        }
    }
}

impl TaskStream {
    /// Disjoint groups of classes, one group per task.
    pub fn class_incremental(generator: &Generator, config: &ClassIncrementalConfig) -> Result<Self> {
        if config.tasks == 0 || config.classes_per_task == 0 {
            return Err(Error::config("tasks", "need at least one task with at least one class"));
        }
        let needed = config.tasks * config.classes_per_task;
        let pool = generator.config().stream_classes();
        if needed > pool.len() {
            return Err(Error::config(
                "classes_per_task",
                format!("{needed} classes needed but the generator offers {} stream classes", pool.len()),
            ));
        }
        let mut rng = rng::rng_for(config.seed, &[purpose::STREAM]);
        let classes: Vec<usize> = match config.order {
            ClassOrder::Random => {
                let mut all = pool;
                all.shuffle(&mut rng);
                all.truncate(needed);
                all
            }
            ClassOrder::FamilyBlocks => {
                let gc = generator.config();
                let mut families: Vec<Vec<usize>> = Vec::new();
                for c in pool {
                    match families.last_mut() {
                        Some(f) if gc.family_of(f[0]) == gc.family_of(c) => f.push(c),
                        _ => families.push(vec![c]),
                    }
                }
                families.shuffle(&mut rng);
                let mut out = Vec::with_capacity(needed);
                for mut f in families {
                    f.shuffle(&mut rng);
                    out.extend(f);
                }
                out.truncate(needed);
                out
            }
        };
        let mut tasks = Vec::with_capacity(config.tasks);
        for t in 0..config.tasks {
            let labels: Vec<usize> = (t * config.classes_per_task..(t + 1) * config.classes_per_task).collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for &label in &labels {
                let class = classes[label];
                for i in 0..config.train_per_class as u64 {
                    train.push(generator.sample(class, i, 0, label)?);
                }
                for i in 0..config.test_per_class as u64 {
                    test.push(generator.sample(class, config.train_per_class as u64 + i, 0, label)?);
                }
            }
            tasks.push(Task { labels, train, test });
        }
        Ok(TaskStream { setting: Setting::ClassIncremental, vocabulary: classes, tasks, shared_test: None })
    }

    /// A fixed class set seen under a new domain transform in every task;
    /// the test set pools domains never used for training.
    pub fn domain_incremental(generator: &Generator, config: &DomainIncrementalConfig) -> Result<Self> {
        if config.tasks < 2 {
            return Err(Error::config("tasks", "domain-incremental streams need at least two tasks"));
        }
        let pool = generator.config().stream_classes();
        if config.classes == 0 || config.classes > pool.len() {
            return Err(Error::config("classes", format!("need 1 to {} classes", pool.len())));
        }
        let vocabulary: Vec<usize> = pool[..config.classes].to_vec();
        let labels: Vec<usize> = (0..config.classes).collect();
        let mut tasks = Vec::with_capacity(config.tasks);
        for t in 0..config.tasks {
            let mut train = Vec::new();
            for (label, &class) in vocabulary.iter().enumerate() {
                for i in 0..config.train_per_class as u64 {
                    train.push(generator.sample(class, i, t as u32, label)?);
                }
            }
            tasks.push(Task { labels: labels.clone(), train, test: Vec::new() });
        }
        let mut test = Vec::new();
        for d in 0..config.test_domains {
            let domain = (config.tasks + d) as u32;
            for (label, &class) in vocabulary.iter().enumerate() {
                for i in 0..config.test_per_class as u64 {
                    test.push(generator.sample(class, config.train_per_class as u64 + i, domain, label)?);
                }
            }
        }
        Ok(TaskStream { setting: Setting::DomainIncremental, vocabulary, tasks, shared_test: Some(test) })
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    /// Generator class behind each label.
    pub fn vocabulary(&self) -> &[usize] {
        &self.vocabulary
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn shared_test(&self) -> Option<&[Sample]> {
        self.shared_test.as_deref()
    }

    /// Test samples scored for task `i`: its own split, or the shared set.
    pub fn test_for(&self, i: usize) -> &[Sample] {
        self.shared_test.as_deref().unwrap_or(&self.tasks[i].test)
    }

    /// Checks the structural invariants of the setting.
    pub fn check(&self) -> Result<()> {
        match self.setting {
            Setting::ClassIncremental => {
                let mut seen = BTreeSet::new();
                for t in &self.tasks {
                    for &l in &t.labels {
                        if !seen.insert(l) {
                            return Err(Error::Input(format!("label {l} appears in two tasks")));
                        }
                    }
                }
                if seen != (0..self.num_classes()).collect() {
                    return Err(Error::Input("task labels do not cover the vocabulary".into()));
                }
            }
            Setting::DomainIncremental => {
                if self.tasks.windows(2).any(|w| w[0].labels != w[1].labels) {
                    return Err(Error::Input("domain-incremental tasks must share one class set".into()));
                }
            }
            Setting::TaskAgnostic => {}
        }
        let mut ids = BTreeSet::new();
        for s in self.tasks.iter().flat_map(|t| &t.test).chain(self.shared_test.iter().flatten()) {
            if !ids.insert((s.id.class, s.id.index, s.id.domain)) {
                return Err(Error::Input(format!("duplicate test sample {:?}", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    pub classes: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Width of each class's presence bump; defaults to half the spacing
    /// between neighbouring class centres.
    pub sigma: Option<f64>,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig {
            classes: 10,
            steps: 200,
            batch_size: 16,
            sigma: None,
            test_per_class: 20,
            seed: 0,
        }
    }
}

/// Boundary-free stream. Batch `s` draws each sample's class in proportion
/// to `exp(−(s−μ_c)²/(2σ²))` with centres `μ_c` evenly spaced over
/// `[0, steps]`. Every batch is fresh data.
///
/// There is deliberately no per-task view:
///
/// ```compile_fail
/// use l2p_core::stream::{GaussianConfig, GaussianStream};
/// use l2p_core::synthetic::{Generator, GeneratorConfig};
/// let g = Generator::new(GeneratorConfig::default()).unwrap();
/// let s = GaussianStream::new(&g, &GaussianConfig::default()).unwrap();
/// let _ = s.tasks();
/// ```
#[derive(Clone, Debug)]
pub struct GaussianStream {
    generator: Generator,
    vocabulary: Vec<usize>,
    config: GaussianConfig,
    sigma: f64,
}

impl GaussianStream {
    pub fn new(generator: &Generator, config: &GaussianConfig) -> Result<Self> {
        let pool = generator.config().stream_classes();
        if config.classes == 0 || config.classes > pool.len() {
            return Err(Error::config("classes", format!("need 1 to {} classes", pool.len())));
        }
        let mut vocabulary = pool;
        vocabulary.shuffle(&mut rng::rng_for(config.seed, &[purpose::STREAM, u64::MAX]));
        vocabulary.truncate(config.classes);
        if config.steps == 0 || config.batch_size == 0 {
            return Err(Error::config("steps", "need at least one batch of at least one sample"));
        }
        let sigma = match config.sigma {
            Some(s) if !(s > 0.0) => return Err(Error::config("sigma", "must be positive")),
            Some(s) => s,
            None => 0.5 * Self::spacing(config),
        };
        Ok(GaussianStream { generator: generator.clone(), vocabulary, config: config.clone(), sigma })
    }

    fn spacing(config: &GaussianConfig) -> f64 {
        if config.classes > 1 {
            config.steps as f64 / (config.classes - 1) as f64
        } else {
            config.steps as f64
        }
    }

    pub fn config(&self) -> &GaussianConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &[usize] {
        &self.vocabulary
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    pub fn len(&self) -> usize {
        self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        self.config.steps == 0
    }

    pub fn centre(&self, label: usize) -> f64 {
        label as f64 * Self::spacing(&self.config)
    }

    /// Unnormalized presence of `label` at `step`.
    pub fn presence_weight(&self, label: usize, step: usize) -> f64 {
        let z = (step as f64 - self.centre(label)) / self.sigma;
        (-0.5 * z * z).exp()
    }

    /// Class distribution of batch `step`.
    pub fn class_probabilities(&self, step: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..self.config.classes).map(|c| self.presence_weight(c, step)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / w.len() as f64; w.len()]
        }
    }

    /// Batch number `step`; a pure function of the config and `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>> {
        let probs = self.class_probabilities(step);
        let mut rng = rng::rng_for(self.config.seed, &[purpose::STREAM, step as u64]);
        let b = self.config.batch_size;
        (0..b)
            .map(|j| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let label = probs
                    .iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(probs.len() - 1);
                let index = (step * b + j) as u64;
                self.generator.sample(self.vocabulary[label], index, 0, label)
            })
            .collect()
    }

    pub fn batches(&self) -> impl Iterator<Item = Result<Vec<Sample>>> + '_ {
        (0..self.config.steps).map(|s| self.batch(s))
    }

    /// Single held-out test set over all classes.
    pub fn test_set(&self) -> Result<Vec<Sample>> {
        let offset = (self.config.steps * self.config.batch_size) as u64;
        let mut out = Vec::new();
        for label in 0..self.config.classes {
            for i in 0..self.config.test_per_class as u64 {
                out.push(self.generator.sample(self.vocabulary[label], offset + i, 0, label)?);
            }
        }
        Ok(out)
    }
}
