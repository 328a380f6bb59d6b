use repair_tensor::checkpoint::{read_tensors, write_tensors};
use repair_tensor::{
    triangular_lr, triangular_peak, AdamW, AdamWConfig, Graph, ParamStore, Tensor, TensorError,
};

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 7], 3.25));
    let y = g.softmax(x, 1).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_of_uniform_pair_is_ln2() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2]));
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn masked_softmax_is_exactly_zero() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1, 4], &[1.0, 50.0, -3.0, 2.0]).unwrap());
    let m = g.masked_fill(x, &[false, true, false, true], f64::NEG_INFINITY).unwrap();
    let y = g.softmax(m, 1).unwrap();
    let y = g.value(y);
    assert_eq!(y.data()[1], 0.0);
    assert_eq!(y.data()[3], 0.0);
}

#[test]
fn sum_gradient_is_all_ones_and_backward_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
    let g = Graph::new();
    let v = g.param(&store, p);
    let loss = g.sum(v).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert!(store.grad(p).iter().all(|&d| d == 1.0));
    g.backward_into(loss, &mut store).unwrap();
    assert!(store.grad(p).iter().all(|&d| d == 2.0), "second call doubles");
    store.zero_grad();
    assert!(store.grad(p).iter().all(|&d| d == 0.0));
}

#[test]
fn parameter_used_twice_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::from_f64([2], &[1.5, -2.0]).unwrap()).unwrap();
    let g = Graph::new();
    let a = g.param(&store, p);
    let b = g.param(&store, p);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(p), &[2.0, 2.0]);
}

#[test]
fn detached_tensor_gets_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([3], &[1., 2., 3.]).unwrap().with_grad(true));
    let d = g.detach(x).unwrap();
    let y = g.mul(d, x).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(d).is_none());
    // d(x_detached * x)/dx = x_detached
    assert_eq!(grads.get(x).unwrap(), &[1., 2., 3.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([2, 2]).with_grad(true));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_error_lists_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = g.constant(Tensor::zeros([3, 2]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn foreign_var_rejected() {
    let g1 = Graph::<f64>::new();
    let g2 = Graph::<f64>::new();
    let x = g1.constant(Tensor::zeros([2]));
    assert!(matches!(g2.sum(x), Err(TensorError::ForeignVar)));
}

fn scalar_store(v: f64, g: f64) -> (ParamStore<f64>, repair_tensor::ParamId) {
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::from_f64([1], &[v]).unwrap()).unwrap();
    store.get_mut(id).grad[0] = g;
    (store, id)
}

#[test]
fn adamw_zero_lr_leaves_parameters_unchanged() {
    let (mut store, id) = scalar_store(0.7, 0.3);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
    opt.step(&mut store, 0.0).unwrap();
    assert_eq!(store.value(id).data(), &[0.7]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    // m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1, so the step is
    // lr / (1 + eps).
    let (mut store, id) = scalar_store(0.5, 1.0);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let lr = 1e-3;
    opt.step(&mut store, lr).unwrap();
    let delta = 0.5 - store.value(id).data()[0];
    assert!((delta - lr / (1.0 + 1e-8)).abs() < 1e-12, "delta {delta}");
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    let (mut store, id) = scalar_store(2.0, 0.0);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
    opt.step(&mut store, 0.1).unwrap();
    assert!((store.value(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
}

#[test]
fn adamw_aborts_on_nan_gradient() {
    let (mut store, _) = scalar_store(0.5, f64::NAN);
    let mut opt = AdamW::new(AdamWConfig::default());
    match opt.step(&mut store, 1e-3) {
        Err(TensorError::NonFiniteGradient { name, .. }) => assert_eq!(name, "w"),
        other => panic!("expected NaN abort, got {other:?}"),
    }
}

#[test]
fn triangular_schedule_shape() {
    let total = 100;
    let peak = triangular_peak(total, 0.1);
    assert_eq!(peak, 10);
    assert_eq!(triangular_lr(peak, total, 0.1, 1e-4), 1e-4);
    assert!(triangular_lr(1, total, 0.1, 1e-4) < 1e-4);
    assert_eq!(triangular_lr(total, total, 0.1, 1e-4), 0.0);
    let mut prev = 0.0;
    for s in 1..=peak {
        let lr = triangular_lr(s, total, 0.1, 1e-4);
        assert!(lr > prev);
        prev = lr;
    }
    for s in peak + 1..=total {
        let lr = triangular_lr(s, total, 0.1, 1e-4);
        assert!(lr < prev);
        prev = lr;
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut store = ParamStore::<f32>::new();
    store
        .register("a.weight", Tensor::new([2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.1415927]).unwrap())
        .unwrap();
    store.register("b", Tensor::new([3], vec![1e-30f32, 7.0, -2.5]).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &store.records()).unwrap();
    let back = ParamStore::<f32>::from_records(read_tensors(&mut buf.as_slice()).unwrap()).unwrap();
    for (p, q) in store.iter().zip(back.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value.shape(), q.value.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value));
    }
    // widening load is exact too
    let wide = read_tensors::<f64, _>(&mut buf.as_slice()).unwrap();
    assert_eq!(wide[0].1.data()[3], 3.1415927f32 as f64);
}

#[test]
fn checkpoint_rejects_corruption() {
    let store = ParamStore::<f64>::new();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &store.records()).unwrap();
    buf[0] = b'X';
    assert!(read_tensors::<f64, _>(&mut buf.as_slice()).is_err());
    let mut store = ParamStore::<f64>::new();
    store.register("x", Tensor::zeros([4])).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &store.records()).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(matches!(read_tensors::<f64, _>(&mut buf.as_slice()), Err(TensorError::Checkpoint(_))));
}
