use std::collections::BTreeSet;

use l2p_core::stream::{ClassIncrementalConfig, ClassOrder, DomainIncrementalConfig, GaussianConfig};
use l2p_core::synthetic::DomainKind;
use l2p_core::{Error, GaussianStream, Generator, GeneratorConfig, Setting, TaskStream};

fn generator() -> Generator {
    Generator::new(GeneratorConfig::default()).unwrap()
}

#[test]
fn class_incremental_partitions_the_vocabulary() {
    let g = Generator::new(GeneratorConfig { num_classes: 200, ..GeneratorConfig::default() }).unwrap();
    let cfg = ClassIncrementalConfig { tasks: 10, classes_per_task: 10, train_per_class: 2, test_per_class: 2, ..Default::default() };
    let s = TaskStream::class_incremental(&g, &cfg).unwrap();
    assert_eq!(s.setting(), Setting::ClassIncremental);
    assert_eq!(s.num_classes(), 100);
    s.check().unwrap();
    let mut seen = BTreeSet::new();
    for t in s.tasks() {
        assert_eq!(t.labels.len(), 10);
        for l in &t.labels {
            assert!(seen.insert(*l));
        }
        assert!(t.train.iter().chain(&t.test).all(|x| t.labels.contains(&x.label)));
        assert!(t.train.iter().chain(&t.test).all(|x| s.vocabulary()[x.label] == x.id.class));
    }
    assert_eq!(seen, (0..100).collect());
    let test_ids: BTreeSet<_> = s.tasks().iter().flat_map(|t| &t.test).map(|x| (x.id.class, x.id.index)).collect();
    assert_eq!(test_ids.len(), 100 * 2);
    let train_ids: BTreeSet<_> = s.tasks().iter().flat_map(|t| &t.train).map(|x| (x.id.class, x.id.index)).collect();
    assert!(test_ids.is_disjoint(&train_ids));
}

#[test]
fn class_incremental_rejects_oversized_requests() {
    let cfg = ClassIncrementalConfig { tasks: 20, classes_per_task: 10, ..Default::default() };
    assert!(matches!(TaskStream::class_incremental(&generator(), &cfg), Err(Error::Config { .. })));
}

#[test]
fn single_task_stream_holds_everything() {
    let cfg = ClassIncrementalConfig { tasks: 1, classes_per_task: 8, train_per_class: 3, test_per_class: 2, ..Default::default() };
    let s = TaskStream::class_incremental(&generator(), &cfg).unwrap();
    assert_eq!(s.tasks().len(), 1);
    assert_eq!(s.tasks()[0].labels, (0..8).collect::<Vec<_>>());
    assert_eq!(s.tasks()[0].train.len(), 24);
}

#[test]
fn family_blocks_keep_each_task_inside_one_family() {
    let g = generator();
    let cfg = ClassIncrementalConfig { tasks: 5, classes_per_task: 5, train_per_class: 1, test_per_class: 1, order: ClassOrder::FamilyBlocks, seed: 3 };
    let s = TaskStream::class_incremental(&g, &cfg).unwrap();
    s.check().unwrap();
    let mut families = BTreeSet::new();
    for t in s.tasks() {
        let fams: BTreeSet<_> = t.labels.iter().map(|&l| g.config().family_of(s.vocabulary()[l])).collect();
        assert_eq!(fams.len(), 1);
        families.extend(fams);
    }
    assert_eq!(families.len(), 5);
}

#[test]
fn streams_are_deterministic() {
    let g = generator();
    let cfg = ClassIncrementalConfig { train_per_class: 3, test_per_class: 2, seed: 9, ..Default::default() };
    let a = TaskStream::class_incremental(&g, &cfg).unwrap();
    let b = TaskStream::class_incremental(&g, &cfg).unwrap();
    assert_eq!(a, b);
    let c = TaskStream::class_incremental(&g, &ClassIncrementalConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.vocabulary(), c.vocabulary());
}

#[test]
fn domain_incremental_shares_classes_and_tests_unseen_domains() {
    let g = generator();
    let cfg = DomainIncrementalConfig { tasks: 4, classes: 6, train_per_class: 3, test_per_class: 2, test_domains: 2 };
    let s = TaskStream::domain_incremental(&g, &cfg).unwrap();
    s.check().unwrap();
    assert!(s.tasks().windows(2).all(|w| w[0].labels == w[1].labels));
    let train_domains: BTreeSet<u32> = s.tasks().iter().flat_map(|t| &t.train).map(|x| x.id.domain).collect();
    let test_domains: BTreeSet<u32> = s.shared_test().unwrap().iter().map(|x| x.id.domain).collect();
    assert_eq!(train_domains, (0..4).collect());
    assert!(train_domains.is_disjoint(&test_domains));
    assert_eq!(s.shared_test().unwrap().len(), 2 * 6 * 2);
    for t in 0..4 {
        assert_eq!(s.test_for(t), s.shared_test().unwrap());
    }
    assert!(TaskStream::domain_incremental(&g, &DomainIncrementalConfig { tasks: 1, ..cfg }).is_err());
}

#[test]
fn identity_domains_make_every_task_iid() {
    let g = Generator::new(GeneratorConfig { domain: DomainKind::Identity, ..GeneratorConfig::default() }).unwrap();
    let cfg = DomainIncrementalConfig { tasks: 3, classes: 4, train_per_class: 2, test_per_class: 1, test_domains: 1 };
    let s = TaskStream::domain_incremental(&g, &cfg).unwrap();
    for t in s.tasks() {
        for x in &t.train {
            assert_eq!(x.pixels, g.pixels(x.id.class, x.id.index, 0).unwrap());
        }
    }
}

#[test]
fn gaussian_frequencies_follow_the_presence_weights() {
    let cfg = GaussianConfig { classes: 10, steps: 400, batch_size: 16, seed: 5, ..Default::default() };
    let s = GaussianStream::new(&generator(), &cfg).unwrap();
    let mut counts = [0usize; 10];
    let mut expected = [0.0f64; 10];
    for step in 0..s.len() {
        for x in s.batch(step).unwrap() {
            counts[x.label] += 1;
        }
        for (e, p) in expected.iter_mut().zip(s.class_probabilities(step)) {
            *e += p;
        }
    }
    let n: usize = counts.iter().sum();
    let tv: f64 = 0.5 * counts.iter().zip(&expected).map(|(&c, &e)| (c as f64 / n as f64 - e / s.len() as f64).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn each_class_peaks_at_its_centre() {
    let s = GaussianStream::new(&generator(), &GaussianConfig::default()).unwrap();
    for c in 0..s.num_classes() {
        let step = s.centre(c).round() as usize;
        let p = s.class_probabilities(step);
        for other in 0..s.num_classes() {
            if (s.centre(other) - step as f64).abs() > (s.centre(c) - step as f64).abs() {
                assert!(p[c] > p[other], "class {c} vs {other} at step {step}");
            }
        }
    }
}

#[test]
fn wide_bumps_approach_a_uniform_mix() {
    let s = GaussianStream::new(&generator(), &GaussianConfig { sigma: Some(1e7), ..Default::default() }).unwrap();
    for step in [0, 57, 199] {
        assert!(s.class_probabilities(step).iter().all(|p| (p - 0.1).abs() < 1e-6));
    }
}

#[test]
fn non_positive_sigma_is_rejected() {
    for sigma in [0.0, -1.0, f64::NAN] {
        let r = GaussianStream::new(&generator(), &GaussianConfig { sigma: Some(sigma), ..Default::default() });
        assert!(matches!(r, Err(Error::Config { .. })), "{sigma}");
    }
}

#[test]
fn gaussian_batches_are_pure_and_unique() {
    let s = GaussianStream::new(&generator(), &GaussianConfig { steps: 30, ..Default::default() }).unwrap();
    assert_eq!(s.batch(7).unwrap(), s.batch(7).unwrap());
    let mut ids = BTreeSet::new();
    for b in s.batches() {
        for x in b.unwrap() {
            assert!(ids.insert((x.id.class, x.id.index)));
        }
    }
    for x in s.test_set().unwrap() {
        assert!(ids.insert((x.id.class, x.id.index)));
    }
}

#[test]
fn raw_pixels_are_linearly_separable() {
    // Nearest class mean is a linear rule; fit on one split, score on another.
    let g = generator();
    let classes = g.config().stream_classes();
    let d = g.config().pixels();
    let means: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let mut m = vec![0.0; d];
            for i in 0..30 {
                for (a, p) in m.iter_mut().zip(g.pixels(c, i, 0).unwrap()) {
                    *a += p as f64 / 30.0;
                }
            }
            m
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for (label, &c) in classes.iter().enumerate() {
        for i in 30..40 {
            let x = g.pixels(c, i, 0).unwrap();
            let dist = |m: &Vec<f64>| m.iter().zip(&x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let pred = (0..means.len()).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            correct += usize::from(pred == label);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.9, "linear probe accuracy {acc}");
}
