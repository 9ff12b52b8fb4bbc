//! Central-difference gradient checks.

use super::{Graph, ParamStore, Var};

/// Largest relative error between the tape's gradients and central
/// differences with step `h`, over every element of every parameter.
/// Components where both are tiny are measured against a 1e-4 floor.
pub fn max_rel_error(store: &ParamStore<f64>, build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var, h: f64) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).expect("build must return a scalar loss");
    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic = grads.dense(id, store);
        for i in 0..store.get(id).numel() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = build(&mut g, &s);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
