//! Central finite-difference oracles shared by the integration tests.

#![allow(dead_code)]

pub mod oracles;

use xmtl::nn::{Mode, ModelSpec, OutputGrad, ParamStore};
use xmtl::num::{Array, Rng};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so vanishing gradients do not
/// blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_array(rng: &mut Rng, shape: &[usize], scale: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, scale)).collect()).unwrap()
}

/// Scalar probe `L = <w, output> + <v, embedding>` evaluated with a fresh
/// copy of the dropout stream so every evaluation sees the same mask.
fn probe(
    spec: &ModelSpec,
    store: &ParamStore,
    x: &Array,
    w: &Array,
    v: Option<&Array>,
    mode: Mode,
    seed: u64,
) -> f64 {
    let mut rng = Rng::new(seed);
    let fwd = spec.forward(store, x, mode, Some(&mut rng)).unwrap();
    let mut l: f64 = fwd.output.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    if let Some(v) = v {
        l += fwd
            .embedding
            .values
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    l
}

/// Worst relative error between backward and central differences over
/// every parameter entry and every input entry.
pub fn model_gradient_error(spec: &ModelSpec, batch: usize, seed: u64, with_embedding: bool) -> f64 {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut rng.split(1)).unwrap();
    // Perturb freshly initialized parameters away from special values.
    for p in store.params().to_vec() {
        if p.trainable {
            let jitter = random_array(&mut rng, p.value.shape(), 0.1);
            let mut v = p.value.clone();
            v.add_assign(&jitter).unwrap();
            store.set(&p.name, v).unwrap();
        }
    }
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(&spec.input_shape);
    let x = random_array(&mut rng, &in_shape, 1.0);
    let drop_seed = rng.split(2).seed();

    let mut probe_rng = Rng::new(drop_seed);
    let fwd = spec
        .forward(&store, &x, Mode::Train, Some(&mut probe_rng))
        .unwrap();
    let w = random_array(&mut rng, fwd.output.shape(), 1.0);
    let v = with_embedding.then(|| random_array(&mut rng, fwd.embedding.values.shape(), 1.0));
    let grads = spec
        .backward(&store, &fwd.tape, Some(OutputGrad::Output(w.clone())), v.as_ref())
        .unwrap();

    let mut worst: f64 = 0.0;
    for (id, p) in store.params().to_vec().iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let analytic = grads
            .params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(p.value.shape()));
        for k in 0..p.value.len() {
            let mut plus = p.value.clone();
            plus.data_mut()[k] += FD_STEP;
            let mut minus = p.value.clone();
            minus.data_mut()[k] -= FD_STEP;
            let mut s = store.clone();
            s.set(&p.name, plus).unwrap();
            let lp = probe(spec, &s, &x, &w, v.as_ref(), Mode::Train, drop_seed);
            s.set(&p.name, minus).unwrap();
            let lm = probe(spec, &s, &x, &w, v.as_ref(), Mode::Train, drop_seed);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    let dx = grads.input.unwrap();
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[k] -= FD_STEP;
        let lp = probe(spec, &store, &xp, &w, v.as_ref(), Mode::Train, drop_seed);
        let lm = probe(spec, &store, &xm, &w, v.as_ref(), Mode::Train, drop_seed);
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(dx.data()[k], numeric));
    }
    worst
}

/// Worst relative error of an analytic gradient of `f` at `x`.
pub fn function_gradient_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut buf = x.to_vec();
    for k in 0..x.len() {
        buf[k] = x[k] + FD_STEP;
        let lp = f(&buf);
        buf[k] = x[k] - FD_STEP;
        let lm = f(&buf);
        buf[k] = x[k];
        worst = worst.max(rel_err(analytic[k], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}
