use hitpix_nn::tensor::gradcheck::max_rel_error;
use hitpix_nn::tensor::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Projects an output onto fixed random weights so every element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = g.input(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

#[test]
fn square_sum_gradient_is_two_w() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::randn(&[5], 1.0, &mut rng(1)));
    let mut g = Graph::new();
    let v = g.param(&store, w);
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    for (gv, wv) in grads.get(w).unwrap().data().iter().zip(store.get(w).data()) {
        assert!((gv - 2.0 * wv).abs() < 1e-12);
    }
    assert_eq!(g.backward(loss).unwrap_err(), TensorError::GraphConsumed);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[3], 1.0, &mut rng(2)));
    let mut g = Graph::new();
    let _unused = g.param(&store, w);
    let c = g.input(Tensor::full(&[4], 2.0));
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert!(grads.dense(w, &store).data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn conv_gradients_every_mask() {
    for (k, mask) in [MaskKind::Vertical, MaskKind::HorizontalA, MaskKind::HorizontalB, MaskKind::None]
        .into_iter()
        .enumerate()
    {
        let spec = MaskedConvSpec::new(3, mask, 2, 3);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::randn(&[2, 2, 4, 5], 1.0, &mut rng(10 + k as u64)));
        let w = store.add("w", Tensor::randn(&spec.weight_shape(), 0.5, &mut rng(20 + k as u64)));
        let b = store.add("b", Tensor::randn(&[3], 0.5, &mut rng(30 + k as u64)));
        let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.conv2d(xv, wv, bv, &spec).unwrap();
            project(g, y, 99)
        };
        let err = max_rel_error(&store, &build, 1e-5);
        assert!(err < 1e-6, "{mask:?}: {err}");
    }
}

#[test]
fn pointwise_conv_gradient() {
    let spec = MaskedConvSpec::pointwise(3, 2);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(&[2, 3, 2, 4], 1.0, &mut rng(3)));
    let w = store.add("w", Tensor::randn(&spec.weight_shape(), 0.5, &mut rng(4)));
    let b = store.add("b", Tensor::randn(&[2], 0.5, &mut rng(5)));
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, bv, &spec).unwrap();
        project(g, y, 6)
    };
    assert!(max_rel_error(&store, &build, 1e-5) < 1e-6);
}

#[test]
fn gate_gradient() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng(7)));
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.param(s, x);
        let y = g.gate(xv).unwrap();
        project(g, y, 8)
    };
    assert!(max_rel_error(&store, &build, 1e-4) < 1e-3);
}

#[test]
fn gate_values() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros(&[1, 2, 1, 1]));
    let y = g.gate(z).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
    let big = g.input(Tensor::full(&[1, 2, 1, 1], 40.0));
    let y = g.gate(big).unwrap();
    assert!((g.value(y).item() - 1.0).abs() < 1e-12);
    let odd = g.input(Tensor::zeros(&[1, 3, 1, 1]));
    assert_eq!(g.gate(odd).unwrap_err(), TensorError::OddChannelCount(3));
}

#[test]
fn elementwise_gradients() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[2, 6], 1.0, &mut rng(11)));
    let b = store.add("b", Tensor::randn(&[2, 6], 1.0, &mut rng(12)));
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let (av, bv) = (g.param(s, a), g.param(s, b));
        let t = g.tanh(av);
        let sg = g.sigmoid(bv);
        let r = g.relu(bv);
        let e = g.exp(av);
        let m = g.mul(t, sg).unwrap();
        let m = g.add(m, r).unwrap();
        let m = g.add(m, e).unwrap();
        let sc = g.scale(m, 0.7);
        let sl = g.slice(sc, 2, 3).unwrap();
        let rs = g.reshape(sl, &[6]).unwrap();
        let p = project(g, rs, 13);
        let mean = g.mean(sc);
        g.add(p, mean).unwrap()
    };
    assert!(max_rel_error(&store, &build, 1e-5) < 1e-5);
}

#[test]
fn linear_and_positional_gradients() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(&[3, 5], 1.0, &mut rng(14)));
    let w = store.add("w", Tensor::randn(&[4, 5], 1.0, &mut rng(15)));
    let b = store.add("b", Tensor::randn(&[4], 1.0, &mut rng(16)));
    let pos = store.add("pos", Tensor::randn(&[2, 2, 3], 1.0, &mut rng(17)));
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let (xv, wv, bv, pv) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, pos));
        let y = g.linear(xv, wv, bv).unwrap();
        let y4 = g.reshape(y, &[1, 2, 2, 3]).unwrap();
        let y4 = g.add_pos(y4, pv).unwrap();
        let big = g.input(Tensor::randn(&[2, 2, 4, 3], 1.0, &mut rng(18)));
        let big = g.add_pos(big, pv).unwrap();
        let p1 = project(g, y4, 19);
        let p2 = project(g, big, 20);
        g.add(p1, p2).unwrap()
    };
    assert!(max_rel_error(&store, &build, 1e-5) < 1e-6);
}

#[test]
fn loss_gradients() {
    let mut store = ParamStore::new();
    let z = store.add("z", Tensor::randn(&[2, 8], 2.0, &mut rng(21)));
    let mu = store.add("mu", Tensor::randn(&[2, 3], 1.0, &mut rng(22)));
    let lv = store.add("lv", Tensor::randn(&[2, 3], 0.5, &mut rng(23)));
    let targets: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let (zv, mv, lvv) = (g.param(s, z), g.param(s, mu), g.param(s, lv));
        let bce = g.bce_with_logits(zv, &targets).unwrap();
        let kl = g.kl_normal(mv, lvv).unwrap();
        g.add(bce, kl).unwrap()
    };
    assert!(max_rel_error(&store, &build, 1e-5) < 1e-6);
}

#[test]
fn bce_matches_definition() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap());
    let l = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let want = -(s(0.3).ln() + (1.0 - s(-1.2)).ln()) / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

/// Masked conv, gate and BCE on four live parameters.
#[test]
fn composite_toy_gradient() {
    let spec = MaskedConvSpec::new(3, MaskKind::HorizontalA, 1, 2);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&spec.weight_shape(), 1.0, &mut rng(24)));
    let b = store.add("b", Tensor::randn(&[2], 1.0, &mut rng(25)));
    let x: Vec<f64> = (0..32).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(Tensor::from_vec(&[1, 1, 4, 8], x.clone()).unwrap());
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, bv, &spec).unwrap();
        let y = g.gate(y).unwrap();
        g.bce_with_logits(y, &x).unwrap()
    };
    assert_eq!(spec.taps_live() * 2 + 2, 4);
    assert!(max_rel_error(&store, &build, 1e-5) < 1e-2);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4], 1.0, &mut rng(26)));
    let before = store.clone();
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let mut g = Graph::new();
    let _v = g.param(&store, w);
    let c = g.input(Tensor::scalar(1.0));
    let grads = g.backward(c).unwrap();
    opt.step(&mut store, &grads);
    assert_eq!(store, before);
}

#[test]
fn adam_moments_decay_under_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[1], 1.0));
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let step = |store: &mut ParamStore<f64>, opt: &mut Adam<f64>, touch: bool| {
        let mut g = Graph::new();
        let v = g.param(store, w);
        let loss = if touch { g.sum(v) } else { g.input(Tensor::scalar(0.0)) };
        let grads = g.backward(loss).unwrap();
        opt.step(store, &grads);
    };
    step(&mut store, &mut opt, true);
    let m1 = opt.first_moment(0)[0];
    step(&mut store, &mut opt, false);
    assert!((opt.first_moment(0)[0] - 0.9 * m1).abs() < 1e-15);
}

fn quadratic_run(steps: usize) -> Vec<f64> {
    // (w - 1)², minimum at 1
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[1], 0.0));
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
    let mut path = Vec::new();
    for _ in 0..steps {
        let mut g = Graph::new();
        let v = g.param(&store, w);
        let c = g.input(Tensor::full(&[1], -1.0));
        let d = g.add(v, c).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads);
        path.push(store.get(w).item());
    }
    path
}

#[test]
fn adam_solves_a_quadratic() {
    let path = quadratic_run(500);
    assert!((path.last().unwrap() - 1.0).abs() < 0.05, "{}", path.last().unwrap());
    let again = quadratic_run(500);
    assert!(path.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn composed_pixel_model() {
    use hitpix_nn::pixelgen::{PixelConfig, PixelModel};
    let config = PixelConfig { hidden: 4, blocks: 2, ..PixelConfig::default() };
    let mut model = PixelModel::<f32>::new(config, 0, 3).cast::<f64>();
    // non-zero positional terms so their gradients are exercised too
    for name in ["in.pos_v", "in.pos_h"] {
        let id = model.params().find(name).unwrap();
        let shape = model.params().get(id).shape().to_vec();
        *model.params_mut().get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng(9));
    }
    let n = model.params().numel();
    assert!(n <= 5000, "{n} parameters");
    let images: Vec<f64> = (0..2 * 128).map(|i| ((i * 7 + i / 5) % 3 == 0) as u8 as f64).collect();
    let store = model.params().clone();
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let mut m = model.clone();
        *m.params_mut() = s.clone();
        let x = g.input(Tensor::from_vec(&[2, 1, 8, 16], images.clone()).unwrap());
        let y = m.forward(g, x).unwrap();
        g.bce_with_logits(y, &images).unwrap()
    };
    let err = max_rel_error(&store, &build, 1e-5);
    assert!(err < 1e-2, "relative error {err}");
}
