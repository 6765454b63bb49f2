use l2p_tensor::{kernels, Graph, Tensor};
use proptest::prelude::*;

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len).prop_filter("nonzero", |v| kernels::norm(v) > 1e-3)
}

proptest! {
    #[test]
    fn cosine_distance_is_scale_invariant(
        u in nonzero_vec(6),
        v in nonzero_vec(6),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        let base = kernels::cosine_distance(&u, &v).unwrap();
        let su: Vec<f64> = u.iter().map(|x| x * a).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
        let scaled = kernels::cosine_distance(&su, &sv).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let a = g.constant([3, 4], x).unwrap();
        let s = g.softmax(a, 1).unwrap();
        for row in g.value(s).chunks(4) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_never_mutate_inputs(x in prop::collection::vec(-5.0f32..5.0, 12)) {
        let a = Tensor::new([3, 4], x.clone()).unwrap().with_grad();
        let b = Tensor::new([4, 3], x.clone()).unwrap().with_grad();
        let mut g = Graph::new();
        let (va, vb) = (g.param(&a), g.param(&b));
        let m = g.matmul(va, vb).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let t = g.transpose(s).unwrap();
        let c = g.concat(&[t, s], 0).unwrap();
        let loss = g.mean(c);
        g.backward(loss).unwrap();
        prop_assert_eq!(g.value(va), a.data());
        prop_assert_eq!(g.value(vb), b.data());
        prop_assert_eq!(a.data(), &x[..]);
    }
}

#[test]
fn every_reachable_parameter_gets_a_gradient() {
    let p = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
    let unused = Tensor::<f64>::new([2], vec![1.0, 1.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let (vp, vu) = (g.param(&p), g.param(&unused));
    // Zero-valued path still counts as reachable.
    let z = g.scale(vp, 0.0);
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(vp).unwrap(), &[0.0; 4]);
    assert!(g.grad(vu).is_none());
}
