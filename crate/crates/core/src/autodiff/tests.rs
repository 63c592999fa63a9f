use std::collections::BTreeMap;

use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random linear readout, so each check sees a non-symmetric upstream gradient.
fn readout(g: &mut Graph<f64>, params: &mut ParamSet<f64>, x: NodeId, width: usize, rng: &mut Rng) -> NodeId {
    let flat = g.flatten(x);
    let w = params.add("readout.w", random(&[1, width], rng, 1.0));
    let b = params.add("readout.b", Tensor::zeros(&[1]));
    let (wn, bn) = (g.param(w), g.param(b));
    let y = g.linear(flat, wn, bn);
    g.sum(y)
}

fn check(mut g: Graph<f64>, params: &ParamSet<f64>, loss: NodeId, tol: f64) {
    let report = grad_check(&mut g, params, &BTreeMap::new(), loss, &GradCheckOptions::default()).unwrap();
    assert!(report.checked >= 100, "{report:?}");
    assert!(report.passes(tol), "{report:?}");
}

#[test]
fn relu_forward() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let y = g.relu(x);
    g.forward(&ParamSet::new(), &inputs([("x", Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap())]))
        .unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn sq_norm_of_basis_vector() {
    let mut g = Graph::<f32>::new();
    let x = g.input("f");
    let y = g.sq_norm(x);
    let mut e = vec![0.0; 128];
    e[17] = 1.0;
    g.forward(&ParamSet::new(), &inputs([("f", Tensor::from_vec(&[128], e).unwrap())]))
        .unwrap();
    assert_eq!(g.value(y).item(), 1.0);
    assert!(g.value(y).shape().is_empty());
}

#[test]
fn identity_convolution() {
    let mut rng = Rng::new(3);
    let mut params = ParamSet::<f64>::new();
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let w = params.add("w", w);
    let b = params.add("b", Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let x = g.input("x");
    let (wn, bn) = (g.param(w), g.param(b));
    let y = g.conv2d(x, wn, bn, 1, 0);
    let img = random(&[2, 3, 5, 4], &mut rng, 1.0);
    g.forward(&params, &inputs([("x", img.clone())])).unwrap();
    assert_eq!(g.value(y), &img);
}

#[test]
fn missing_input_and_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x");
    let _ = g.relu(x);
    assert!(matches!(g.forward(&ParamSet::new(), &BTreeMap::new()), Err(Error::ShapeMismatch(_))));

    let mut g = Graph::<f32>::new();
    let a = g.input("a");
    let b = g.input("b");
    let _ = g.add(a, b);
    let r = g.forward(
        &ParamSet::new(),
        &inputs([("a", Tensor::zeros(&[2])), ("b", Tensor::zeros(&[3]))]),
    );
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x");
    let _ = g.relu(x);
    let r = g.forward(
        &ParamSet::new(),
        &inputs([("x", Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap())]),
    );
    assert!(matches!(r, Err(Error::NonFiniteValue(_))));
}

#[test]
fn loss_must_be_scalar() {
    let mut params = ParamSet::<f64>::new();
    let p = params.add("p", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param(p);
    let y = g.relu(x);
    g.forward(&params, &BTreeMap::new()).unwrap();
    assert!(matches!(g.backward(&params, y), Err(Error::LossNotScalar(3))));
}

#[test]
fn sq_norm_gradient_is_twice_the_parameter() {
    let mut params = ParamSet::<f64>::new();
    let f = params.add("f", Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let unused = params.add("unused", Tensor::from_f64(&[2], &[7.0, 8.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param(f);
    let loss = g.sq_norm(x);
    g.forward(&params, &BTreeMap::new()).unwrap();
    let grads = g.backward(&params, loss).unwrap();
    assert_eq!(grads.get(f).data(), &[2.0, -4.0, 1.0, 6.0]);
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
}

#[test]
fn shared_parameter_gradients_accumulate() {
    // loss = ||p||² - ||p||² through two separate param nodes of the same id
    let mut params = ParamSet::<f64>::new();
    let p = params.add("p", Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let a = g.param(p);
    let b = g.param(p);
    let sa = g.sq_norm(a);
    let sb = g.sq_norm(b);
    let d = g.sub(sa, sb);
    let loss = g.sum(d);
    g.forward(&params, &BTreeMap::new()).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    assert_eq!(g.backward(&params, loss).unwrap().get(p).data(), &[0.0, 0.0]);
}

#[test]
fn gradcheck_linear() {
    let mut rng = Rng::new(1);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[4, 6], &mut rng, 1.0));
    let w = params.add("w", random(&[5, 6], &mut rng, 1.0));
    let b = params.add("b", random(&[5], &mut rng, 1.0));
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.param(x), g.param(w), g.param(b));
    let y = g.linear(xn, wn, bn);
    let loss = readout(&mut g, &mut params, y, 5, &mut rng);
    check(g, &params, loss, 1e-7);
}

#[test]
fn gradcheck_conv2d_strided_padded() {
    let mut rng = Rng::new(2);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[2, 3, 9, 8], &mut rng, 1.0));
    let w = params.add("w", random(&[4, 3, 3, 3], &mut rng, 0.5));
    let b = params.add("b", random(&[4], &mut rng, 0.5));
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.param(x), g.param(w), g.param(b));
    let y = g.conv2d(xn, wn, bn, 2, 1);
    // (9 + 2 - 3) / 2 + 1 = 5 rows, (8 + 2 - 3) / 2 + 1 = 4 cols, 4 channels
    let loss = readout(&mut g, &mut params, y, 4 * 5 * 4, &mut rng);
    check(g, &params, loss, 1e-4);
}

#[test]
fn gradcheck_relu_and_maxpool() {
    let mut rng = Rng::new(3);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[2, 2, 7, 7], &mut rng, 1.0));
    let mut g = Graph::new();
    let xn = g.param(x);
    let r = g.relu(xn);
    let p = g.maxpool(r, 3, 2);
    let loss = readout(&mut g, &mut params, p, 2 * 3 * 3, &mut rng);
    check(g, &params, loss, 1e-4);
}

#[test]
fn maxpool_routes_ties_to_first_element() {
    let mut params = ParamSet::<f64>::new();
    let x = params.add("x", Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap());
    let mut g = Graph::new();
    let xn = g.param(x);
    let p = g.maxpool(xn, 2, 2);
    let loss = g.sum(p);
    g.forward(&params, &BTreeMap::new()).unwrap();
    let grads = g.backward(&params, loss).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn gradcheck_lrn() {
    let mut rng = Rng::new(4);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[2, 7, 3, 3], &mut rng, 3.0));
    let mut g = Graph::new();
    let xn = g.param(x);
    // exaggerated alpha so the normalization term is not negligible
    let y = g.lrn(xn, LrnConfig { size: 5, alpha: 0.5, beta: 0.75, k: 1.0 });
    let loss = readout(&mut g, &mut params, y, 7 * 9, &mut rng);
    check(g, &params, loss, 1e-6);
}

#[test]
fn gradcheck_spp_and_length() {
    let mut rng = Rng::new(5);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[2, 3, 7, 5], &mut rng, 1.0));
    let mut g = Graph::new();
    let xn = g.param(x);
    let y = g.spp(xn, 3);
    assert_eq!(spp_output_len(3, 3), 42);
    let loss = readout(&mut g, &mut params, y, 42, &mut rng);
    check(g, &params, loss, 1e-6);
}

#[test]
fn spp_length_is_independent_of_spatial_size() {
    for (h, w) in [(1, 1), (3, 4), (13, 13), (6, 9)] {
        let mut g = Graph::<f32>::new();
        let x = g.input("x");
        let y = g.spp(x, 3);
        g.forward(&ParamSet::new(), &inputs([("x", Tensor::zeros(&[1, 5, h, w]))])).unwrap();
        assert_eq!(g.value(y).shape(), &[1, spp_output_len(3, 5)]);
    }
}

#[test]
fn gradcheck_softmax_xent() {
    let mut rng = Rng::new(6);
    let mut params = ParamSet::new();
    let x = params.add("logits", random(&[3, 8], &mut rng, 2.0));
    let mut g = Graph::new();
    let xn = g.param(x);
    let loss = g.softmax_xent(xn, vec![0, 5, 7]);
    check(g, &params, loss, 1e-6);
}

#[test]
fn gradcheck_concat_gather_sub_add_scale() {
    let mut rng = Rng::new(7);
    let mut params = ParamSet::new();
    let a = params.add("a", random(&[3, 4], &mut rng, 1.0));
    let b = params.add("b", random(&[3, 2], &mut rng, 1.0));
    let mut g = Graph::new();
    let (an, bn) = (g.param(a), g.param(b));
    let c = g.concat(&[an, bn]);
    let s = g.sq_norm(c);
    let p = g.gather(s, vec![0, 2, 2]);
    let n = g.gather(s, vec![1, 1, 0]);
    let d = g.sub(p, n);
    let e = g.add(d, p);
    let t = g.sum(e);
    let loss = g.scale(t, -0.5);
    check(g, &params, loss, 1e-7);
}

#[test]
fn concat_adjoint_splits_exactly() {
    let mut params = ParamSet::<f64>::new();
    let a = params.add("a", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = params.add("b", Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
    let mut g = Graph::new();
    let (an, bn) = (g.param(a), g.param(b));
    let c = g.concat(&[an, bn]);
    let loss = g.sq_norm(c);
    let loss = g.sum(loss);
    g.forward(&params, &BTreeMap::new()).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let grads = g.backward(&params, loss).unwrap();
    assert_eq!(grads.get(a).data(), &[2.0, 4.0, 6.0, 8.0]);
    assert_eq!(grads.get(b).data(), &[10.0, 12.0]);
    assert_eq!(grads.get(a).len() + grads.get(b).len(), g.value(c).len());
}

#[test]
fn random_three_layer_net_matches_finite_differences() {
    let mut rng = Rng::new(8);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&[3, 5], &mut rng, 1.0));
    let mut g = Graph::new();
    let mut h = g.param(x);
    let mut width = 5;
    for (i, out) in [7, 6, 4].into_iter().enumerate() {
        let w = params.add(format!("w{i}"), random(&[out, width], &mut rng, 0.8));
        let b = params.add(format!("b{i}"), random(&[out], &mut rng, 0.3));
        let (wn, bn) = (g.param(w), g.param(b));
        h = g.linear(h, wn, bn);
        if i < 2 {
            h = g.relu(h);
        }
        width = out;
    }
    let s = g.sq_norm(h);
    let loss = g.sum(s);
    check(g, &params, loss, 1e-4);
}

#[test]
fn relu_kinks_are_skipped() {
    let mut params = ParamSet::<f64>::new();
    let x = params.add("x", Tensor::from_f64(&[4], &[0.0, 1.0, -1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let xn = g.param(x);
    let r = g.relu(xn);
    let loss = g.sum(r);
    let report = grad_check(&mut g, &params, &BTreeMap::new(), loss, &GradCheckOptions::default()).unwrap();
    assert!(report.skipped > 0);
    assert!(report.passes(1e-9), "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = Rng::new(9);
    let mut params = ParamSet::<f32>::new();
    params.add("conv1.w", random(&[4, 3, 2, 2], &mut rng, 1.0).cast());
    params.add("conv1.b", Tensor::from_vec(&[4], vec![f32::MIN_POSITIVE, -0.0, 1e-30, 3.5]).unwrap());
    let meta = serde_json::json!({"epoch": 3});
    let bytes = encode_checkpoint(&params, &meta).unwrap();
    let (back, meta_back) = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!(meta_back, meta);
    for ((na, ta), (nb, tb)) in params.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..30]), Err(_)));
}
