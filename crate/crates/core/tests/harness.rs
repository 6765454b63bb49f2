use std::collections::HashMap;

use l2p_core::harness::{self, ContinualLearner};
use l2p_core::stream::{ClassIncrementalConfig, DomainIncrementalConfig};
use l2p_core::{forgetting, Backbone, BackboneConfig, FrozenProbe, Generator, GeneratorConfig, ProbeConfig, Result, Sample, TaskStream, TrainReport};

/// Looks answers up by pixel content.
struct Oracle(HashMap<Vec<u32>, usize>);

fn key(p: &[f32]) -> Vec<u32> {
    p.iter().map(|v| v.to_bits()).collect()
}

impl ContinualLearner for Oracle {
    fn train_task(&mut self, data: &[Sample], _: usize) -> Result<TrainReport> {
        self.0.extend(data.iter().map(|s| (key(&s.pixels), s.label)));
        Ok(TrainReport::default())
    }
    fn train_batch(&mut self, _: &[&Sample]) -> Result<()> {
        Ok(())
    }
    fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        Ok(images.iter().map(|p| self.0.get(&key(p)).copied().unwrap_or(usize::MAX)).collect())
    }
}

fn stream(tasks: usize, seed: u64) -> TaskStream {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let cfg = ClassIncrementalConfig { tasks, classes_per_task: 2, train_per_class: 20, test_per_class: 10, seed, ..Default::default() };
    TaskStream::class_incremental(&g, &cfg).unwrap()
}

fn probe(seed: u64, classes: usize) -> FrozenProbe {
    let cfg = BackboneConfig { embed_dim: 32, key_dim: 32, depth: 1, ..BackboneConfig::default() };
    let mut bb = Backbone::new(cfg, seed).unwrap();
    bb.set_frozen(true);
    FrozenProbe::new(ProbeConfig { epochs: 3, seed, ..ProbeConfig::default() }, bb, classes).unwrap()
}

#[test]
fn perfect_learner_scores_one_everywhere() {
    let s = stream(3, 0);
    // Memorizes test samples too, so every lookup succeeds.
    let mut oracle = Oracle(HashMap::new());
    for t in s.tasks() {
        oracle.train_task(&t.test, 0).unwrap();
    }
    let (m, _) = harness::run_stream(&mut oracle, &s).unwrap();
    assert!(m.rows().iter().flatten().all(|&a| a == 1.0));
}

#[test]
fn evaluation_is_pure() {
    let s = stream(3, 1);
    let mut p = probe(1, s.num_classes());
    harness::run_stream(&mut p, &s).unwrap();
    let before = p.clone();
    let a = harness::evaluate_row(&p, &s, 2).unwrap();
    let b = harness::evaluate_row(&p, &s, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(p, before);
}

#[test]
fn sequential_fine_tuning_forgets_and_repeats() {
    let s = stream(5, 2);
    let run = || {
        let mut p = probe(2, s.num_classes());
        harness::run_stream(&mut p, &s).unwrap().0
    };
    let m = run();
    assert_eq!(m, run());
    let f = forgetting(&m, false).unwrap().value().unwrap();
    assert!(f > 0.0, "forgetting {f}");
}

#[test]
fn one_task_is_plain_supervised_training() {
    let s = stream(1, 3);
    let mut p = probe(3, s.num_classes());
    let (m, _) = harness::run_stream(&mut p, &s).unwrap();
    assert_eq!(m.tasks(), 1);
    let mut direct = probe(3, s.num_classes());
    direct.train_task(&s.tasks()[0].train, 0).unwrap();
    assert_eq!(m.get(0, 0), harness::accuracy(&direct, &s.tasks()[0].test).unwrap());
    assert!(forgetting(&m, false).unwrap().value().is_none());
}

#[test]
fn shared_test_sets_fill_whole_rows() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let cfg = DomainIncrementalConfig { tasks: 2, classes: 3, train_per_class: 4, test_per_class: 3, test_domains: 1 };
    let s = TaskStream::domain_incremental(&g, &cfg).unwrap();
    let mut p = probe(4, s.num_classes());
    let (m, _) = harness::run_stream(&mut p, &s).unwrap();
    assert_eq!(m.get(1, 0), m.get(1, 1));
}
