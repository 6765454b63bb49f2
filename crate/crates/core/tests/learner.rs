use l2p_core::backbone::{Backbone, BackboneConfig};
use l2p_core::prompt::BoundPool;
use l2p_core::{Classifier, Error, Learner, LearnerConfig, RehearsalBuffer, Sample, SampleId, Variant};
use l2p_tensor::{gradcheck, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 3;

fn tiny_backbone(seed: u64) -> Backbone<f32> {
    let cfg = BackboneConfig { embed_dim: 8, key_dim: 8, depth: 1, heads: 2, ..BackboneConfig::default() };
    let mut bb = Backbone::new(cfg, seed).unwrap();
    bb.set_frozen(true);
    bb
}

fn tiny_config(seed: u64) -> LearnerConfig {
    LearnerConfig { pool_size: 4, top_n: 2, prompt_length: 2, batch_size: 4, epochs: 1, seed, ..LearnerConfig::default() }
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % CLASSES;
            let pixels = (0..256).map(|p| ((p % 7) as f32 - 3.0) * 0.1 * (label as f32 + 1.0) + rng.random_range(-0.5..0.5)).collect();
            Sample { id: SampleId { class: label, index: i as u64, domain: 0 }, label, pixels }
        })
        .collect()
}

fn images(batch: &[Sample]) -> Vec<&[f32]> {
    batch.iter().map(|s| s.pixels.as_slice()).collect()
}

fn labels(batch: &[Sample]) -> Vec<usize> {
    batch.iter().map(|s| s.label).collect()
}

#[test]
fn full_loss_matches_finite_differences() {
    for seed in 0..20 {
        let learner: Learner<f64> = Learner::new(tiny_config(seed), tiny_backbone(seed), CLASSES).unwrap().cast();
        let batch = samples(3, seed);
        let imgs = images(&batch);
        let q = learner.queries(&imgs).unwrap();
        let sel = learner.select(q.as_ref(), imgs.len()).unwrap();
        let mut used: Vec<usize> = sel.iter().flat_map(|s| s.indices.clone()).collect();
        used.sort();
        used.dedup();

        let mut inputs: Vec<Tensor<f64>> = Vec::new();
        for &i in &used {
            inputs.push(learner.pool().prompts()[i].clone());
            inputs.push(learner.pool().keys()[i].clone());
        }
        inputs.push(learner.classifier().weight.clone());
        inputs.push(learner.classifier().bias.clone());
        let report = gradcheck::check_with_step(&inputs, 1e-5, |g: &mut Graph<f64>, v| -> l2p_core::Result<_> {
            let mut bound = BoundPool::default();
            for (j, &i) in used.iter().enumerate() {
                bound.prompts.insert(i, v[2 * j]);
                bound.keys.insert(i, v[2 * j + 1]);
            }
            let head = (v[v.len() - 2], v[v.len() - 1]);
            Ok(learner.loss_graph(g, &imgs, &labels(&batch), q.as_ref(), &sel, &bound, head, None)?.loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

fn bind_everything<T: l2p_tensor::Scalar>(learner: &Learner<T>, g: &mut Graph<T>) -> BoundPool {
    let mut bound = BoundPool::default();
    for i in 0..learner.pool().config().size {
        bound.prompts.insert(i, g.param(&learner.pool().prompts()[i]));
        bound.keys.insert(i, g.param(&learner.pool().keys()[i]));
    }
    bound
}

#[test]
fn unselected_prompts_and_keys_get_nothing() {
    let learner = Learner::new(tiny_config(1), tiny_backbone(1), CLASSES).unwrap();
    let batch = samples(1, 1);
    let imgs = images(&batch);
    let q = learner.queries(&imgs).unwrap();
    let sel = learner.select(q.as_ref(), 1).unwrap();
    let mut g = Graph::new();
    let bound = bind_everything(&learner, &mut g);
    let head = learner.classifier().bind(&mut g, true);
    let parts = learner.loss_graph(&mut g, &imgs, &labels(&batch), q.as_ref(), &sel, &bound, head, None).unwrap();
    g.backward(parts.loss).unwrap();
    for i in 0..4 {
        let chosen = sel[0].indices.contains(&i);
        for v in [bound.prompts[&i], bound.keys[&i]] {
            let nonzero = g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0));
            assert_eq!(nonzero, chosen, "prompt/key {i}");
        }
    }
}

#[test]
fn aligned_keys_leave_only_cross_entropy() {
    let mut learner = Learner::new(tiny_config(2), tiny_backbone(2), CLASSES).unwrap();
    let batch = samples(1, 2);
    let imgs = images(&batch);
    let q = learner.queries(&imgs).unwrap().unwrap();
    for i in 0..4 {
        learner.pool_mut().key_mut(i).data_mut().copy_from_slice(q.row(0));
    }
    let sel = learner.select(Some(&q), 1).unwrap();
    assert!(sel[0].distances.iter().all(|d| d.abs() < 1e-6));
    let mut g = Graph::new();
    let bound = learner.pool().bind(&mut g, &sel);
    let head = learner.classifier().bind(&mut g, true);
    let parts = learner.loss_graph(&mut g, &imgs, &labels(&batch), Some(&q), &sel, &bound, head, None).unwrap();
    let (loss, ce) = (g.value(parts.loss)[0], g.value(parts.prediction)[0]);
    assert!((loss - ce).abs() < 1e-6, "{loss} vs {ce}");
}

#[test]
fn gradients_partition_between_terms() {
    let cfg = LearnerConfig { lambda: 0.0, ..tiny_config(3) };
    let learner = Learner::new(cfg, tiny_backbone(3), CLASSES).unwrap();
    let batch = samples(4, 3);
    let imgs = images(&batch);
    let q = learner.queries(&imgs).unwrap();
    let sel = learner.select(q.as_ref(), 4).unwrap();

    let mut g = Graph::new();
    let bound = learner.pool().bind(&mut g, &sel);
    let head = learner.classifier().bind(&mut g, true);
    let parts = learner.loss_graph(&mut g, &imgs, &labels(&batch), q.as_ref(), &sel, &bound, head, None).unwrap();
    g.backward(parts.loss).unwrap();
    for v in bound.keys.values() {
        assert!(g.grad(*v).unwrap().iter().all(|&x| x == 0.0));
    }

    let mut g = Graph::new();
    let bound = learner.pool().bind(&mut g, &sel);
    let head = learner.classifier().bind(&mut g, true);
    let parts = learner.loss_graph(&mut g, &imgs, &labels(&batch), q.as_ref(), &sel, &bound, head, None).unwrap();
    g.backward(parts.surrogate.unwrap()).unwrap();
    for v in bound.prompts.values() {
        assert!(g.grad(*v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
    }
    assert!(bound.keys.values().any(|v| g.grad(*v).unwrap().iter().any(|&x| x != 0.0)));
}

#[test]
fn pooling_averages_exactly_the_prompt_rows() {
    let learner = Learner::new(tiny_config(4), tiny_backbone(4), CLASSES).unwrap();
    let batch = samples(2, 4);
    let imgs = images(&batch);
    let logits = learner.logits(&imgs).unwrap();

    let q = learner.queries(&imgs).unwrap();
    let sel = learner.select(q.as_ref(), 2).unwrap();
    let bb = learner.backbone();
    let pooled_with = |rows: usize| -> Vec<f32> {
        let mut g = Graph::new();
        let frozen = bb.bind(&mut g, false);
        let x_e = bb.embed(&mut g, &frozen, &imgs).unwrap();
        let bound = learner.pool().bind(&mut g, &sel);
        let x_p = learner.pool().prepend_batch(&mut g, &bound, &sel, x_e).unwrap();
        let h = bb.forward_features(&mut g, &frozen, x_p).unwrap();
        let h = g.to_tensor(h);
        let (len, d) = (h.dims()[1], h.dims()[2]);
        let mut feats = Vec::new();
        for b in 0..2 {
            for j in 0..d {
                let mean = (0..rows).map(|r| h.data()[(b * len + r) * d + j]).sum::<f32>() / rows as f32;
                feats.push(mean);
            }
        }
        let x = Tensor::new([2, d], feats).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let (w, bias) = learner.classifier().bind(&mut g, false);
        let z = Classifier::<f32>::apply(&mut g, xv, w, bias).unwrap();
        g.value(z).to_vec()
    };
    let n_lp = 2 * 2;
    let exact = pooled_with(n_lp);
    for (a, b) in logits.data().iter().zip(&exact) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let off_by_one = pooled_with(n_lp + 1);
    assert!(logits.data().iter().zip(&off_by_one).any(|(a, b)| (a - b).abs() > 1e-4));
}

#[test]
fn a_step_touches_only_chosen_prompts_keys_and_head() {
    let mut learner = Learner::new(LearnerConfig { pool_size: 6, ..tiny_config(5) }, tiny_backbone(5), CLASSES).unwrap();
    let batch = samples(2, 5);
    let refs: Vec<&Sample> = batch.iter().collect();
    let q = learner.queries(&images(&batch)).unwrap().unwrap();
    // Keys 0 and 1 point at the two queries; every other key points away.
    for (i, row) in [0, 1].into_iter().enumerate() {
        learner.pool_mut().key_mut(i).data_mut().copy_from_slice(q.row(row));
    }
    let mean: Vec<f32> = (0..8).map(|j| -(q.row(0)[j] + q.row(1)[j])).collect();
    for i in 2..6 {
        learner.pool_mut().key_mut(i).data_mut().copy_from_slice(&mean);
    }
    let before = learner.clone();
    let step = learner.train_step(&refs).unwrap();
    let used: Vec<usize> = step.selections.iter().flat_map(|s| s.indices.clone()).collect();
    assert!(used.iter().all(|&i| i < 2), "{used:?}");
    for i in 2..6 {
        assert_eq!(learner.pool().prompts()[i].data(), before.pool().prompts()[i].data());
        assert_eq!(learner.pool().keys()[i].data(), before.pool().keys()[i].data());
    }
    for i in 0..2 {
        assert_ne!(learner.pool().prompts()[i].data(), before.pool().prompts()[i].data());
        assert_ne!(learner.pool().keys()[i].data(), before.pool().keys()[i].data());
    }
    assert_ne!(learner.classifier(), before.classifier());
    assert_eq!(learner.backbone().digest(), before.backbone().digest());
    assert_eq!(learner.frequency().counts(), &[2, 2, 0, 0, 0, 0]);
}

#[test]
fn zero_epochs_change_nothing() {
    let mut learner = Learner::new(LearnerConfig { epochs: 0, ..tiny_config(6) }, tiny_backbone(6), CLASSES).unwrap();
    let pool = learner.pool().clone();
    let head = learner.classifier().clone();
    let report = learner.train_task(&samples(8, 6), 0).unwrap();
    assert_eq!(report.steps, 0);
    assert_eq!(learner.pool(), &pool);
    assert_eq!(learner.classifier(), &head);
}

#[test]
fn training_is_deterministic() {
    let data = samples(10, 7);
    let run = || {
        let cfg = LearnerConfig { epochs: 2, diversify: true, ..tiny_config(7) };
        let mut l = Learner::new(cfg, tiny_backbone(7), CLASSES).unwrap();
        let a = l.train_task(&data[..6], 0).unwrap();
        let b = l.train_task(&data[6..], 1).unwrap();
        (l, a, b)
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!((a1, b1), (a2, b2));
    assert_eq!(l1, l2);
}

#[test]
fn prediction_is_pure_and_ignores_the_frequency_table() {
    let cfg = LearnerConfig { diversify: true, ..tiny_config(8) };
    let mut learner = Learner::new(cfg, tiny_backbone(8), CLASSES).unwrap();
    let data = samples(6, 8);
    let refs: Vec<&Sample> = data.iter().collect();
    learner.train_step(&refs).unwrap();
    let reads = learner.table_reads();
    assert!(reads > 0, "training with diversified lookup reads the table");
    let snapshot = learner.clone();
    let imgs = images(&data);
    let a = learner.predict(&imgs).unwrap();
    let b = learner.predict(&imgs).unwrap();
    assert_eq!(a, b);
    assert_eq!(learner.table_reads(), reads);
    assert_eq!(learner, snapshot);
    assert_eq!(learner.logits(&imgs).unwrap().dims(), &[6, CLASSES]);
}

#[test]
fn single_prompt_always_uses_prompt_zero() {
    let cfg = tiny_config(9).with_variant(Variant::SinglePrompt);
    let mut learner = Learner::new(cfg, tiny_backbone(9), CLASSES).unwrap();
    let data = samples(5, 9);
    let refs: Vec<&Sample> = data.iter().collect();
    let step = learner.train_step(&refs).unwrap();
    assert!(step.selections.iter().all(|s| s.indices == [0]));
    assert_eq!(learner.pool().keys()[0].grad(), None);

    let bad = LearnerConfig { variant: Variant::SinglePrompt, ..tiny_config(9) };
    assert!(matches!(Learner::new(bad, tiny_backbone(9), CLASSES), Err(Error::Config { .. })));
    let bad = LearnerConfig { diversify: true, ..tiny_config(9).with_variant(Variant::NoDiversify) };
    assert!(matches!(Learner::new(bad, tiny_backbone(9), CLASSES), Err(Error::Config { .. })));
}

#[test]
fn mean_keys_track_their_prompts() {
    let cfg = tiny_config(10).with_variant(Variant::MeanKey);
    let mut learner = Learner::new(cfg, tiny_backbone(10), CLASSES).unwrap();
    let data = samples(8, 10);
    let check = |l: &Learner| {
        for (p, k) in l.pool().prompts().iter().zip(l.pool().keys()) {
            assert!(!k.requires_grad());
            for j in 0..8 {
                let mean = (p.data()[j] + p.data()[8 + j]) / 2.0;
                assert!((k.data()[j] - mean).abs() < 1e-6);
            }
        }
    };
    check(&learner);
    for chunk in data.chunks(4) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        learner.train_step(&refs).unwrap();
        check(&learner);
    }
}

#[test]
fn empty_buffer_replays_nothing() {
    let data = samples(8, 11);
    let mut plain = Learner::new(tiny_config(11), tiny_backbone(11), CLASSES).unwrap();
    let mut replay = plain.clone();
    let a = plain.train_task(&data, 0).unwrap();
    let mut buffer = RehearsalBuffer::new(2);
    let b = replay.train_task_with_rehearsal(&data, 0, &mut buffer).unwrap();
    assert_eq!(a, b);
    assert_eq!(plain, replay);
    assert_eq!(buffer.len(), 2 * CLASSES);
    assert!(matches!(replay.train_task_with_rehearsal(&data, 1, &mut RehearsalBuffer::new(0)), Err(Error::Config { .. })));
}

#[test]
fn buffer_respects_capacity_and_holds_only_seen_samples() {
    let task = |t: usize| -> Vec<Sample> {
        (0..10 * 15)
            .map(|i| {
                let label = t * 10 + i % 10;
                Sample { id: SampleId { class: label, index: i as u64, domain: 0 }, label, pixels: vec![i as f32] }
            })
            .collect()
    };
    let (t0, t1) = (task(0), task(1));
    let mut buffer = RehearsalBuffer::new(10);
    buffer.retain(&t0, 1, 0);
    buffer.retain(&t1, 1, 1);
    assert!(buffer.len() <= 200);
    assert!(buffer.class_counts().values().all(|&c| c <= 10));
    assert_eq!(buffer.class_counts().len(), 20);
    assert!(buffer.samples().all(|s| t0.contains(s) || t1.contains(s)));
    let drawn = buffer.draw(30, 4, &[0]);
    assert_eq!(drawn.len(), 30);
    let mut ids: Vec<_> = drawn.iter().map(|s| s.id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 30);
}

#[test]
fn labels_outside_the_vocabulary_are_rejected() {
    let mut learner = Learner::new(tiny_config(12), tiny_backbone(12), CLASSES).unwrap();
    let mut data = samples(2, 12);
    data[1].label = CLASSES;
    let refs: Vec<&Sample> = data.iter().collect();
    match learner.train_step(&refs) {
        Err(Error::Row { row, .. }) => assert_eq!(row, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unfrozen_backbone_is_refused() {
    let mut bb = tiny_backbone(0);
    bb.set_frozen(false);
    assert!(matches!(Learner::new(tiny_config(0), bb, CLASSES), Err(Error::Input(_))));
}
