use l2p_core::backbone::{Backbone, BackboneConfig, PretrainConfig};
use l2p_core::weights::{load_weights, save_weights};
use l2p_core::{Error, Generator, GeneratorConfig};
use l2p_tensor::Graph;

fn tiny() -> BackboneConfig {
    BackboneConfig { embed_dim: 8, key_dim: 8, depth: 1, heads: 2, pretrain_classes: 3, ..BackboneConfig::default() }
}

fn image(cfg: &BackboneConfig, seed: u32) -> Vec<f32> {
    (0..cfg.pixels()).map(|i| ((i as u32 * 7919 + seed * 104729) % 17) as f32 / 17.0 - 0.5).collect()
}

#[test]
fn token_length_counts_class_token() {
    let a = BackboneConfig::default();
    assert_eq!(a.token_len(), 17);
    let b = BackboneConfig { image_side: 28, patch_size: 7, ..BackboneConfig::default() };
    assert_eq!(b.token_len(), 17);
    let bb = Backbone::<f32>::new(b.clone(), 0).unwrap();
    let img = vec![0.5f32; b.pixels()];
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let x = bb.embed(&mut g, &bound, &[&img]).unwrap();
    assert_eq!(g.shape(x).dims(), &[1, 17, 64]);
}

#[test]
fn zero_image_embeds_to_bias_plus_position() {
    let cfg = tiny();
    let bb = Backbone::<f32>::new(cfg.clone(), 1).unwrap();
    let zero = vec![0.0f32; cfg.pixels()];
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let x = bb.embed(&mut g, &bound, &[&zero]).unwrap();
    let value = g.value(x);
    let param = |name: &str| bb.params().iter().find(|(n, _)| n == name).unwrap().1.data().to_vec();
    let (bias, pos, cls) = (param("patch_embed.bias"), param("pos_embed"), param("cls_token"));
    let d = cfg.embed_dim;
    for j in 0..d {
        assert_eq!(value[j], cls[j] + pos[j]);
    }
    for row in 1..cfg.token_len() {
        for j in 0..d {
            assert_eq!(value[row * d + j], bias[j] + pos[row * d + j], "row {row}");
        }
    }
}

#[test]
fn image_size_mismatch_is_input_error() {
    let bb = Backbone::<f32>::new(tiny(), 0).unwrap();
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let good = vec![0.0f32; tiny().pixels()];
    let bad = vec![0.0f32; 10];
    match bb.embed(&mut g, &bound, &[&good, &bad]) {
        Err(Error::Row { row, .. }) => assert_eq!(row, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_stack_is_identity() {
    let cfg = BackboneConfig { depth: 0, ..tiny() };
    let bb = Backbone::<f32>::new(cfg, 0).unwrap();
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let x = g.constant([2, 5, 8], (0..80).map(|i| i as f32 * 0.1).collect()).unwrap();
    let y = bb.forward_features(&mut g, &bound, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn forward_preserves_any_token_length() {
    let bb = Backbone::<f32>::new(BackboneConfig::default(), 0).unwrap();
    for len in [17, 17 + 5 * 5] {
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let x = g.constant([2, len, 64], vec![0.01; 2 * len * 64]).unwrap();
        let y = bb.forward_features(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(y).dims(), &[2, len, 64]);
    }
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let wrong = g.constant([1, 3, 5], vec![0.0; 15]).unwrap();
    assert!(matches!(bb.forward_features(&mut g, &bound, wrong), Err(Error::Input(_))));
}

#[test]
fn query_is_class_row_of_full_forward() {
    let cfg = tiny();
    let bb = Backbone::<f32>::new(cfg.clone(), 4).unwrap();
    let (a, b) = (image(&cfg, 1), image(&cfg, 2));
    let q = bb.query_feature(&[&a, &b, &a]).unwrap();
    assert_eq!(q.dims(), &[3, cfg.key_dim]);
    assert_eq!(q.row(0), q.row(2));

    let mut g = Graph::new();
    let bound = bb.bind(&mut g, true);
    let x = bb.embed(&mut g, &bound, &[&a, &b]).unwrap();
    let h = bb.forward_features(&mut g, &bound, x).unwrap();
    let l = cfg.token_len();
    let d = cfg.embed_dim;
    assert_eq!(q.row(0), &g.value(h)[..d]);
    assert_eq!(q.row(1), &g.value(h)[l * d..l * d + d]);
}

#[test]
fn query_carries_no_gradient() {
    let cfg = tiny();
    let mut bb = Backbone::<f32>::new(cfg.clone(), 4).unwrap();
    bb.set_frozen(true);
    let img = image(&cfg, 3);
    let q = bb.query_feature(&[&img]).unwrap();
    assert!(!q.requires_grad());
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, true);
    let qv = g.param(&q);
    let x = bb.embed(&mut g, &bound, &[&img]).unwrap();
    let h = bb.forward_features(&mut g, &bound, x).unwrap();
    let cls = bb.class_rows(&mut g, h).unwrap();
    let prod = g.mul(cls, qv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    assert!(g.grad(qv).is_none());
    assert!(bb.params().iter().all(|(_, t)| t.grad().is_none() && !t.requires_grad()));
}

#[test]
fn pretraining_is_deterministic_and_freezes() {
    let gen = Generator::new(GeneratorConfig {
        num_classes: 6,
        classes_per_family: 2,
        reserved_per_family: 1,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let data = gen.pretrain_set(12).unwrap();
    let cfg = PretrainConfig { epochs: 2, batch_size: 8, seed: 3, ..PretrainConfig::default() };
    let run = || {
        let mut bb = Backbone::<f32>::new(tiny(), 9).unwrap();
        let report = bb.pretrain(&data, &cfg, None).unwrap();
        (bb, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ra, rb);
    assert!(a.is_frozen());
    assert!(a.params().iter().all(|(_, t)| !t.requires_grad()));
    assert_ne!(a.digest(), Backbone::<f32>::new(tiny(), 9).unwrap().digest());
}

#[test]
fn pretraining_rejects_empty_and_overlapping_data() {
    let mut bb = Backbone::<f32>::new(tiny(), 0).unwrap();
    assert!(matches!(bb.pretrain(&[], &PretrainConfig::default(), None), Err(Error::Input(_))));
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let data = gen.pretrain_set(1).unwrap();
    let forbidden = [data[0].id.class].into_iter().collect();
    assert!(bb.pretrain(&data, &PretrainConfig::default(), Some(&forbidden)).is_err());
}

#[test]
fn weight_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.l2pw");
    let mut bb = Backbone::<f32>::new(tiny(), 5).unwrap();
    bb.set_frozen(true);
    save_weights(&bb, &path).unwrap();
    let back = load_weights(&path, Some(&tiny())).unwrap();
    assert_eq!(back.digest(), bb.digest());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_weights(&path, None), Err(Error::Format { .. })));

    match load_weights(&dir.path().join("missing"), None) {
        Err(Error::Io { .. }) => {}
        other => panic!("{other:?}"),
    }
}
