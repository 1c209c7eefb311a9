//! Layer kinds with batched forward and exact reverse-mode passes.
//!
//! Tensors are channels-last with a leading batch axis: sequences are
//! `[B, T, C]`, images `[B, H, W, C]`, vectors `[B, F]`. Convolutions use
//! valid padding and unit stride; pooling windows do not overlap.

use serde::{Deserialize, Serialize};

use crate::num::gemm::{gemm, Mat};
use crate::num::{Array, Rng};

use super::params::{Gradients, ParamId, ParamStore};
use super::NnError;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d {
        filters: usize,
        kernel: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
    },
    Maxpool1d {
        pool: usize,
    },
    Maxpool2d {
        pool: usize,
    },
    Batchnorm,
    Layernorm,
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    /// Single-direction LSTM returning the last hidden state.
    Lstm {
        units: usize,
    },
    Activation {
        function: Activation,
    },
    /// `[H, W, C] -> [H, W * C]`: image rows become time steps.
    RowsToSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Prefix for batch-norm running statistics when they should not live
    /// under `name` (a layer shared by two models keeps one set per model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<String>,
}

/// Per-layer state needed by the backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Conv1d {
        x: Array,
        w: ParamId,
        b: ParamId,
    },
    Conv2d {
        x: Array,
        w: ParamId,
        b: ParamId,
    },
    Pool {
        argmax: Vec<u32>,
        in_shape: Vec<usize>,
    },
    Batchnorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        gamma: ParamId,
        beta: ParamId,
        train: bool,
    },
    Layernorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        gamma: ParamId,
        beta: ParamId,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    Dense {
        x: Array,
        w: ParamId,
        b: ParamId,
    },
    Lstm(Box<LstmCache>),
    Relu {
        y: Array,
    },
    Elu {
        x: Array,
        y: Array,
    },
    Softmax {
        y: Array,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
}

#[derive(Debug)]
pub(crate) struct LstmCache {
    x: Array,
    /// Activated gates `[T, B, 4U]` in order input, forget, cell, output.
    gates: Vec<f64>,
    /// Cell states `[T + 1, B, U]`, step 0 is the zero state.
    cells: Vec<f64>,
    /// Hidden states `[T + 1, B, U]`.
    hidden: Vec<f64>,
    /// `tanh` of the cell states `[T, B, U]` (steps 1..=T).
    tanh_cells: Vec<f64>,
    w: ParamId,
    r: ParamId,
    b: ParamId,
}

fn mismatch(context: &str, expected: Vec<usize>, found: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        context: context.to_string(),
        expected,
        found: found.to_vec(),
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Array::new(shape.to_vec(), data).expect("shape product matches")
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            stats: None,
        }
    }

    pub fn with_stats(mut self, prefix: impl Into<String>) -> Self {
        self.stats = Some(prefix.into());
        self
    }

    fn stat(&self, suffix: &str) -> String {
        format!("{}.{}", self.stats.as_deref().unwrap_or(&self.name), suffix)
    }

    fn param(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |what: &str| NnError::InvalidLayer {
            layer: self.name.clone(),
            reason: what.to_string(),
        };
        match self.kind {
            LayerKind::Conv1d { filters, kernel } | LayerKind::Conv2d { filters, kernel } => {
                if filters == 0 || kernel == 0 {
                    return Err(bad("filters and kernel must be positive"));
                }
            }
            LayerKind::Maxpool1d { pool } | LayerKind::Maxpool2d { pool } => {
                if pool == 0 {
                    return Err(bad("pool size must be positive"));
                }
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(bad("dropout rate must lie in [0, 1)"));
                }
            }
            LayerKind::Dense { units } | LayerKind::Lstm { units } => {
                if units == 0 {
                    return Err(bad("units must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        self.validate()?;
        let ctx = &self.name;
        match self.kind {
            LayerKind::Conv1d { filters, kernel } => match input {
                [t, _] if *t >= kernel => Ok(vec![t - kernel + 1, filters]),
                _ => Err(mismatch(ctx, vec![kernel, 0], input)),
            },
            LayerKind::Conv2d { filters, kernel } => match input {
                [h, w, _] if *h >= kernel && *w >= kernel => {
                    Ok(vec![h - kernel + 1, w - kernel + 1, filters])
                }
                _ => Err(mismatch(ctx, vec![kernel, kernel, 0], input)),
            },
            LayerKind::Maxpool1d { pool } => match input {
                [t, c] if *t >= pool => Ok(vec![t / pool, *c]),
                _ => Err(mismatch(ctx, vec![pool, 0], input)),
            },
            LayerKind::Maxpool2d { pool } => match input {
                [h, w, c] if *h >= pool && *w >= pool => Ok(vec![h / pool, w / pool, *c]),
                _ => Err(mismatch(ctx, vec![pool, pool, 0], input)),
            },
            LayerKind::Batchnorm
            | LayerKind::Layernorm
            | LayerKind::Dropout { .. }
            | LayerKind::Activation { .. } => {
                if input.is_empty() {
                    Err(mismatch(ctx, vec![0], input))
                } else {
                    Ok(input.to_vec())
                }
            }
            LayerKind::Dense { units } => match input {
                [_] => Ok(vec![units]),
                _ => Err(mismatch(ctx, vec![0], input)),
            },
            LayerKind::Lstm { units } => match input {
                [t, _] if *t > 0 => Ok(vec![units]),
                _ => Err(mismatch(ctx, vec![0, 0], input)),
            },
            LayerKind::RowsToSequence => match input {
                [h, w, c] => Ok(vec![*h, w * c]),
                _ => Err(mismatch(ctx, vec![0, 0, 0], input)),
            },
        }
    }

    /// Creates this layer's parameters in `store` if they are not there yet.
    pub fn init_params(&self, input: &[usize], store: &mut ParamStore, rng: &mut Rng) -> Result<(), NnError> {
        let out = self.output_shape(input)?;
        let channels = *input.last().unwrap_or(&1);
        match self.kind {
            LayerKind::Conv1d { filters, kernel } => {
                let fan_in = kernel * channels;
                store.get_or_insert_with(&self.param("weight"), true, || {
                    glorot(rng, fan_in, kernel * filters, &[fan_in, filters])
                });
                store.get_or_insert_with(&self.param("bias"), true, || Array::zeros(&[filters]));
            }
            LayerKind::Conv2d { filters, kernel } => {
                let fan_in = kernel * kernel * channels;
                store.get_or_insert_with(&self.param("weight"), true, || {
                    glorot(rng, fan_in, kernel * kernel * filters, &[fan_in, filters])
                });
                store.get_or_insert_with(&self.param("bias"), true, || Array::zeros(&[filters]));
            }
            LayerKind::Dense { units } => {
                let fan_in = input[0];
                store.get_or_insert_with(&self.param("weight"), true, || {
                    glorot(rng, fan_in, units, &[fan_in, units])
                });
                store.get_or_insert_with(&self.param("bias"), true, || Array::zeros(&[units]));
            }
            LayerKind::Lstm { units } => {
                let features = input[1];
                store.get_or_insert_with(&self.param("weight"), true, || {
                    glorot(rng, features, 4 * units, &[features, 4 * units])
                });
                store.get_or_insert_with(&self.param("recurrent"), true, || {
                    glorot(rng, units, 4 * units, &[units, 4 * units])
                });
                store.get_or_insert_with(&self.param("bias"), true, || {
                    let mut b = Array::zeros(&[4 * units]);
                    for v in &mut b.data_mut()[units..2 * units] {
                        *v = LSTM_FORGET_BIAS;
                    }
                    b
                });
            }
            LayerKind::Batchnorm => {
                let c = out[out.len() - 1];
                store.get_or_insert_with(&self.param("gamma"), true, || Array::filled(&[c], 1.0));
                store.get_or_insert_with(&self.param("beta"), true, || Array::zeros(&[c]));
                store.get_or_insert_with(&self.stat("running_mean"), false, || Array::zeros(&[c]));
                store.get_or_insert_with(&self.stat("running_var"), false, || Array::filled(&[c], 1.0));
            }
            LayerKind::Layernorm => {
                let c = out[out.len() - 1];
                store.get_or_insert_with(&self.param("gamma"), true, || Array::filled(&[c], 1.0));
                store.get_or_insert_with(&self.param("beta"), true, || Array::zeros(&[c]));
            }
            _ => {}
        }
        Ok(())
    }

    /// Batched forward pass. Batch-norm running statistics computed in
    /// training mode are appended to `running` instead of being written.
    pub(crate) fn forward(
        &self,
        store: &ParamStore,
        x: &Array,
        train: bool,
        rng: Option<&mut Rng>,
        running: &mut Vec<(ParamId, Array)>,
    ) -> Result<(Array, Cache), NnError> {
        if x.ndim() == 0 {
            return Err(mismatch(&self.name, vec![0, 0], x.shape()));
        }
        let batch = x.shape()[0];
        let sample_shape = &x.shape()[1..];
        let out_sample = self.output_shape(sample_shape)?;
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&out_sample);

        match self.kind {
            LayerKind::Conv1d { filters, kernel } => {
                let (w, b) = (
                    store.require(&self.param("weight"))?,
                    store.require(&self.param("bias"))?,
                );
                let (t, c) = (sample_shape[0], sample_shape[1]);
                check_param(store, w, &[kernel * c, filters], &self.name)?;
                let t_out = out_sample[0];
                let mut y = Array::zeros(&out_shape);
                let bias = store.value(b).data();
                let weight = store.value(w).data();
                let direct =
                    (kernel * c <= DIRECT_CONV_MAX).then(|| (0..t_out).map(|to| to * c).collect::<Vec<_>>());
                for (n, yb) in y.data_mut().chunks_mut(t_out * filters).enumerate() {
                    for row in yb.chunks_mut(filters) {
                        row.copy_from_slice(bias);
                    }
                    let xb = &x.data()[n * t * c..(n + 1) * t * c];
                    if let Some(offsets) = &direct {
                        direct_conv_forward(xb, offsets, kernel * c, weight, filters, yb);
                        continue;
                    }
                    let cols = Mat {
                        data: xb,
                        rows: t_out,
                        cols: kernel * c,
                        rs: c as isize,
                        cs: 1,
                    };
                    gemm(1.0, cols, Mat::rm(weight, kernel * c, filters), 1.0, yb);
                }
                Ok((y, Cache::Conv1d { x: x.clone(), w, b }))
            }
            LayerKind::Conv2d { filters, kernel } => {
                let (w, b) = (
                    store.require(&self.param("weight"))?,
                    store.require(&self.param("bias"))?,
                );
                let c = sample_shape[2];
                check_param(store, w, &[kernel * kernel * c, filters], &self.name)?;
                let (ho, wo) = (out_sample[0], out_sample[1]);
                let mut y = Array::zeros(&out_shape);
                let bias = store.value(b).data();
                let weight = store.value(w).data();
                let in_len: usize = sample_shape.iter().product();
                let direct = (c > 1 && kernel * kernel * c <= DIRECT_CONV_MAX)
                    .then(|| conv2d_offsets(sample_shape, kernel));
                let mut planes = vec![0.0; if c == 1 { ho * wo * filters } else { 0 }];
                let mut patches = vec![
                    0.0;
                    if direct.is_some() {
                        0
                    } else {
                        ho * wo * kernel * kernel * c
                    }
                ];
                for (n, yb) in y.data_mut().chunks_mut(ho * wo * filters).enumerate() {
                    let xb = &x.data()[n * in_len..(n + 1) * in_len];
                    for row in yb.chunks_mut(filters) {
                        row.copy_from_slice(bias);
                    }
                    if c == 1 {
                        plane_conv_forward(xb, sample_shape, kernel, weight, filters, &mut planes, yb);
                        continue;
                    }
                    if let Some(offsets) = &direct {
                        direct_conv_forward(xb, offsets, kernel * c, weight, filters, yb);
                        continue;
                    }
                    im2col(xb, sample_shape, kernel, &mut patches);
                    gemm(
                        1.0,
                        Mat::rm(&patches, ho * wo, kernel * kernel * c),
                        Mat::rm(weight, kernel * kernel * c, filters),
                        1.0,
                        yb,
                    );
                }
                Ok((y, Cache::Conv2d { x: x.clone(), w, b }))
            }
            LayerKind::Maxpool1d { pool } => {
                let (t, c) = (sample_shape[0], sample_shape[1]);
                let t_out = out_sample[0];
                let mut y = Array::zeros(&out_shape);
                let mut argmax = vec![0u32; y.len()];
                let xd = x.data();
                let outs = y.data_mut().chunks_mut(c).zip(argmax.chunks_mut(c));
                for (o, (yrow, arow)) in outs.enumerate() {
                    let (n, to) = (o / t_out, o % t_out);
                    let start = (n * t + to * pool) * c;
                    yrow.copy_from_slice(&xd[start..start + c]);
                    for (ch, a) in arow.iter_mut().enumerate() {
                        *a = (start + ch) as u32;
                    }
                    for k in 1..pool {
                        let base = start + k * c;
                        for (ch, (yv, a)) in yrow.iter_mut().zip(arow.iter_mut()).enumerate() {
                            let v = xd[base + ch];
                            if v > *yv {
                                *yv = v;
                                *a = (base + ch) as u32;
                            }
                        }
                    }
                }
                Ok((
                    y,
                    Cache::Pool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Maxpool2d { pool } => {
                let (h, w, c) = (sample_shape[0], sample_shape[1], sample_shape[2]);
                let (ho, wo) = (out_sample[0], out_sample[1]);
                let mut y = Array::zeros(&out_shape);
                let mut argmax = vec![0u32; y.len()];
                let xd = x.data();
                let outs = y.data_mut().chunks_mut(c).zip(argmax.chunks_mut(c));
                for (o, (yrow, arow)) in outs.enumerate() {
                    let (n, i, j) = (o / (ho * wo), o / wo % ho, o % wo);
                    let base = n * h * w * c;
                    let start = base + (i * pool * w + j * pool) * c;
                    yrow.copy_from_slice(&xd[start..start + c]);
                    for (ch, a) in arow.iter_mut().enumerate() {
                        *a = (start + ch) as u32;
                    }
                    for di in 0..pool {
                        for dj in 0..pool {
                            let cell = base + ((i * pool + di) * w + j * pool + dj) * c;
                            for (ch, (yv, a)) in yrow.iter_mut().zip(arow.iter_mut()).enumerate() {
                                let v = xd[cell + ch];
                                if v > *yv {
                                    *yv = v;
                                    *a = (cell + ch) as u32;
                                }
                            }
                        }
                    }
                }
                Ok((
                    y,
                    Cache::Pool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Batchnorm => {
                let gamma = store.require(&self.param("gamma"))?;
                let beta = store.require(&self.param("beta"))?;
                let rm = store.require(&self.stat("running_mean"))?;
                let rv = store.require(&self.stat("running_var"))?;
                let c = *sample_shape.last().unwrap();
                check_param(store, gamma, &[c], &self.name)?;
                let rows = x.len() / c;
                let (mean, var) = if train {
                    let (mean, var) = channel_moments(x.data(), c);
                    let upd = |old: &Array, new: &[f64]| {
                        let data = old
                            .data()
                            .iter()
                            .zip(new)
                            .map(|(o, n)| BATCHNORM_MOMENTUM * o + (1.0 - BATCHNORM_MOMENTUM) * n)
                            .collect();
                        Array::new(vec![c], data).expect("channel count")
                    };
                    running.push((rm, upd(store.value(rm), &mean)));
                    running.push((rv, upd(store.value(rv), &var)));
                    (mean, var)
                } else {
                    (store.value(rm).data().to_vec(), store.value(rv).data().to_vec())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let g = store.value(gamma).data();
                let bt = store.value(beta).data();
                let mut xhat = vec![0.0; x.len()];
                let mut y = Array::zeros(&out_shape);
                let yd = y.data_mut();
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        yd[i] = g[ch] * h + bt[ch];
                    }
                }
                Ok((
                    y,
                    Cache::Batchnorm {
                        xhat,
                        inv_std,
                        gamma,
                        beta,
                        train,
                    },
                ))
            }
            LayerKind::Layernorm => {
                let gamma = store.require(&self.param("gamma"))?;
                let beta = store.require(&self.param("beta"))?;
                let c = *sample_shape.last().unwrap();
                check_param(store, gamma, &[c], &self.name)?;
                let per: usize = sample_shape.iter().product();
                let g = store.value(gamma).data();
                let bt = store.value(beta).data();
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; batch];
                let mut y = Array::zeros(&out_shape);
                let rows = x
                    .data()
                    .chunks(per)
                    .zip(xhat.chunks_mut(per))
                    .zip(y.data_mut().chunks_mut(per));
                for (n, ((xs, hs), ys)) in rows.enumerate() {
                    let mean = xs.iter().sum::<f64>() / per as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std[n] = is;
                    if c == 1 {
                        for ((xv, h), yv) in xs.iter().zip(hs.iter_mut()).zip(ys.iter_mut()) {
                            *h = (xv - mean) * is;
                            *yv = g[0] * *h + bt[0];
                        }
                        continue;
                    }
                    let pixels = xs.chunks(c).zip(hs.chunks_mut(c)).zip(ys.chunks_mut(c));
                    for ((xp, hp), yp) in pixels {
                        for ch in 0..c {
                            let h = (xp[ch] - mean) * is;
                            hp[ch] = h;
                            yp[ch] = g[ch] * h + bt[ch];
                        }
                    }
                }
                Ok((
                    y,
                    Cache::Layernorm {
                        xhat,
                        inv_std,
                        gamma,
                        beta,
                    },
                ))
            }
            LayerKind::Dropout { rate } => {
                if !train || rate == 0.0 {
                    return Ok((x.clone(), Cache::Dropout { mask: None }));
                }
                let rng = rng.ok_or_else(|| NnError::MissingRng(self.name.clone()))?;
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                    .collect();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok((y, Cache::Dropout { mask: Some(mask) }))
            }
            LayerKind::Dense { units } => {
                let (w, b) = (
                    store.require(&self.param("weight"))?,
                    store.require(&self.param("bias"))?,
                );
                let f = sample_shape[0];
                check_param(store, w, &[f, units], &self.name)?;
                let mut y = Array::zeros(&out_shape);
                for row in y.data_mut().chunks_mut(units) {
                    row.copy_from_slice(store.value(b).data());
                }
                gemm(
                    1.0,
                    Mat::rm(x.data(), batch, f),
                    Mat::rm(store.value(w).data(), f, units),
                    1.0,
                    y.data_mut(),
                );
                Ok((y, Cache::Dense { x: x.clone(), w, b }))
            }
            LayerKind::Lstm { units } => self.lstm_forward(store, x, units),
            LayerKind::Activation { function } => {
                let y = match function {
                    Activation::Relu => x.map(|v| v.max(0.0)),
                    Activation::Elu => x.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
                    Activation::Softmax => {
                        let c = *sample_shape.last().unwrap();
                        let mut y = x.clone();
                        for row in y.data_mut().chunks_mut(c) {
                            softmax_in_place(row);
                        }
                        y
                    }
                };
                let cache = match function {
                    Activation::Relu => Cache::Relu { y: y.clone() },
                    Activation::Elu => Cache::Elu {
                        x: x.clone(),
                        y: y.clone(),
                    },
                    Activation::Softmax => Cache::Softmax { y: y.clone() },
                };
                Ok((y, cache))
            }
            LayerKind::RowsToSequence => {
                let y = x.clone().reshape(&out_shape)?;
                Ok((
                    y,
                    Cache::Reshape {
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
        }
    }

    fn lstm_forward(&self, store: &ParamStore, x: &Array, units: usize) -> Result<(Array, Cache), NnError> {
        let w = store.require(&self.param("weight"))?;
        let r = store.require(&self.param("recurrent"))?;
        let b = store.require(&self.param("bias"))?;
        let (batch, steps, features) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let g4 = 4 * units;
        check_param(store, w, &[features, g4], &self.name)?;
        check_param(store, r, &[units, g4], &self.name)?;

        let weight = store.value(w).data();
        let rec = store.value(r).data();
        let bias = store.value(b).data();
        let bu = batch * units;
        let mut gates = vec![0.0; steps * batch * g4];
        let mut cells = vec![0.0; (steps + 1) * bu];
        let mut hidden = vec![0.0; (steps + 1) * bu];
        let mut tanh_cells = vec![0.0; steps * bu];
        // Input projection for every (sample, step) at once, `[B, T, 4U]`.
        let mut xw = vec![0.0; batch * steps * g4];
        for row in xw.chunks_mut(g4) {
            row.copy_from_slice(bias);
        }
        gemm(
            1.0,
            Mat::rm(x.data(), batch * steps, features),
            Mat::rm(weight, features, g4),
            1.0,
            &mut xw,
        );
        for t in 0..steps {
            let z_t = &mut gates[t * batch * g4..(t + 1) * batch * g4];
            for (n, row) in z_t.chunks_mut(g4).enumerate() {
                let off = (n * steps + t) * g4;
                row.copy_from_slice(&xw[off..off + g4]);
            }
            let (h_done, h_rest) = hidden.split_at_mut((t + 1) * bu);
            let h_prev = &h_done[t * bu..];
            if t > 0 {
                gemm(
                    1.0,
                    Mat::rm(h_prev, batch, units),
                    Mat::rm(rec, units, g4),
                    1.0,
                    z_t,
                );
            }
            let (c_done, c_rest) = cells.split_at_mut((t + 1) * bu);
            let c_prev = &c_done[t * bu..];
            let c_next = &mut c_rest[..bu];
            let h_next = &mut h_rest[..bu];
            let tc_t = &mut tanh_cells[t * bu..(t + 1) * bu];
            for (n, z) in z_t.chunks_mut(g4).enumerate() {
                for k in 0..units {
                    let i = sigmoid(z[k]);
                    let f = sigmoid(z[units + k]);
                    let g = z[2 * units + k].tanh();
                    let o = sigmoid(z[3 * units + k]);
                    z[k] = i;
                    z[units + k] = f;
                    z[2 * units + k] = g;
                    z[3 * units + k] = o;
                    let j = n * units + k;
                    let c = f * c_prev[j] + i * g;
                    let tc = c.tanh();
                    c_next[j] = c;
                    tc_t[j] = tc;
                    h_next[j] = o * tc;
                }
            }
        }
        let y = Array::new(vec![batch, units], hidden[steps * bu..].to_vec())?;
        Ok((
            y,
            Cache::Lstm(Box::new(LstmCache {
                x: x.clone(),
                gates,
                cells,
                hidden,
                tanh_cells,
                w,
                r,
                b,
            })),
        ))
    }

    /// Reverse pass: accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        cache: &Cache,
        dy: Array,
        grads: &mut Gradients,
    ) -> Result<Array, NnError> {
        match (&self.kind, cache) {
            (LayerKind::Conv1d { filters, kernel }, Cache::Conv1d { x, w, b }) => {
                let (batch, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (filters, kernel) = (*filters, *kernel);
                let t_out = dy.shape()[1];
                let kc = kernel * c;
                let mut dw = vec![0.0; kc * filters];
                let mut db = vec![0.0; filters];
                let mut dx = Array::zeros(x.shape());
                let mut dcols = vec![0.0; t_out * kc];
                let weight = store.value(*w).data();
                let direct = (kc <= DIRECT_CONV_MAX).then(|| (0..t_out).map(|to| to * c).collect::<Vec<_>>());
                for n in 0..batch {
                    let xb = &x.data()[n * t * c..(n + 1) * t * c];
                    let dyb = &dy.data()[n * t_out * filters..(n + 1) * t_out * filters];
                    for row in dyb.chunks(filters) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    if let Some(offsets) = &direct {
                        let dxb = &mut dx.data_mut()[n * t * c..(n + 1) * t * c];
                        direct_conv_backward(xb, dyb, offsets, kc, weight, filters, &mut dw, dxb);
                        continue;
                    }
                    let cols_t = Mat {
                        data: xb,
                        rows: kc,
                        cols: t_out,
                        rs: 1,
                        cs: c as isize,
                    };
                    gemm(1.0, cols_t, Mat::rm(dyb, t_out, filters), 1.0, &mut dw);
                    gemm(
                        1.0,
                        Mat::rm(dyb, t_out, filters),
                        Mat::rm_t(weight, kc, filters),
                        0.0,
                        &mut dcols,
                    );
                    let dxb = &mut dx.data_mut()[n * t * c..(n + 1) * t * c];
                    for (to, drow) in dcols.chunks(kc).enumerate() {
                        for (d, v) in dxb[to * c..to * c + kc].iter_mut().zip(drow) {
                            *d += v;
                        }
                    }
                }
                grads.accumulate(*w, Array::new(vec![kc, filters], dw)?);
                grads.accumulate(*b, Array::new(vec![filters], db)?);
                Ok(dx)
            }
            (LayerKind::Conv2d { filters, kernel }, Cache::Conv2d { x, w, b }) => {
                let (filters, kernel) = (*filters, *kernel);
                let batch = x.shape()[0];
                let sample_shape = &x.shape()[1..];
                let c = sample_shape[2];
                let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
                let kk = kernel * kernel * c;
                let in_len: usize = sample_shape.iter().product();
                let mut dw = vec![0.0; kk * filters];
                let mut db = vec![0.0; filters];
                let mut dx = Array::zeros(x.shape());
                let direct = (c > 1 && kk <= DIRECT_CONV_MAX).then(|| conv2d_offsets(sample_shape, kernel));
                let mut planes = vec![0.0; if c == 1 { ho * wo * filters } else { 0 }];
                let scratch = if direct.is_some() || c == 1 {
                    0
                } else {
                    ho * wo * kk
                };
                let mut patches = vec![0.0; scratch];
                let mut dpatches = vec![0.0; scratch];
                let weight = store.value(*w).data();
                for n in 0..batch {
                    let xb = &x.data()[n * in_len..(n + 1) * in_len];
                    let dyb = &dy.data()[n * ho * wo * filters..(n + 1) * ho * wo * filters];
                    for row in dyb.chunks(filters) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    if c == 1 {
                        let dxb = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                        plane_conv_backward(
                            xb,
                            dyb,
                            sample_shape,
                            kernel,
                            weight,
                            filters,
                            &mut planes,
                            &mut dw,
                            dxb,
                        );
                        continue;
                    }
                    if let Some(offsets) = &direct {
                        let dxb = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                        direct_conv_backward(xb, dyb, offsets, kernel * c, weight, filters, &mut dw, dxb);
                        continue;
                    }
                    im2col(xb, sample_shape, kernel, &mut patches);
                    gemm(
                        1.0,
                        Mat::rm_t(&patches, ho * wo, kk),
                        Mat::rm(dyb, ho * wo, filters),
                        1.0,
                        &mut dw,
                    );
                    gemm(
                        1.0,
                        Mat::rm(dyb, ho * wo, filters),
                        Mat::rm_t(weight, kk, filters),
                        0.0,
                        &mut dpatches,
                    );
                    col2im(
                        &dpatches,
                        sample_shape,
                        kernel,
                        &mut dx.data_mut()[n * in_len..(n + 1) * in_len],
                    );
                }
                grads.accumulate(*w, Array::new(vec![kk, filters], dw)?);
                grads.accumulate(*b, Array::new(vec![filters], db)?);
                Ok(dx)
            }
            (LayerKind::Maxpool1d { .. } | LayerKind::Maxpool2d { .. }, Cache::Pool { argmax, in_shape }) => {
                let mut dx = Array::zeros(in_shape);
                let dxd = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dxd[idx as usize] += g;
                }
                Ok(dx)
            }
            (
                LayerKind::Batchnorm,
                Cache::Batchnorm {
                    xhat,
                    inv_std,
                    gamma,
                    beta,
                    train,
                },
            ) => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let g = store.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        dgamma[ch] += dy.data()[i] * xhat[i];
                        dbeta[ch] += dy.data()[i];
                    }
                }
                let mut dx = Array::zeros(dy.shape());
                let dxd = dx.data_mut();
                if *train {
                    // dx = g * inv_std / N * (N * dy - sum(dy) - xhat * sum(dy * xhat))
                    let nrows = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dxd[i] = g[ch] * inv_std[ch] / nrows
                                * (nrows * dy.data()[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dxd[i] = g[ch] * inv_std[ch] * dy.data()[i];
                        }
                    }
                }
                grads.accumulate(*gamma, Array::new(vec![c], dgamma)?);
                grads.accumulate(*beta, Array::new(vec![c], dbeta)?);
                Ok(dx)
            }
            (
                LayerKind::Layernorm,
                Cache::Layernorm {
                    xhat,
                    inv_std,
                    gamma,
                    beta,
                },
            ) => {
                let batch = inv_std.len();
                let per = xhat.len() / batch;
                let g = store.value(*gamma).data();
                let c = g.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Array::zeros(dy.shape());
                let mut dxhat = vec![0.0; per];
                let m = per as f64;
                let rows = dy
                    .data()
                    .chunks(per)
                    .zip(xhat.chunks(per))
                    .zip(dx.data_mut().chunks_mut(per));
                for (n, ((dys, hs), dxs)) in rows.enumerate() {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    let pixels = dys.chunks(c).zip(hs.chunks(c)).zip(dxhat.chunks_mut(c));
                    for ((dp, hp), dhp) in pixels {
                        for ch in 0..c {
                            let d = dp[ch];
                            dgamma[ch] += d * hp[ch];
                            dbeta[ch] += d;
                            let dh = d * g[ch];
                            dhp[ch] = dh;
                            s1 += dh;
                            s2 += dh * hp[ch];
                        }
                    }
                    let scale = inv_std[n] / m;
                    for ((o, dh), h) in dxs.iter_mut().zip(&dxhat).zip(hs) {
                        *o = scale * (m * dh - s1 - h * s2);
                    }
                }
                grads.accumulate(*gamma, Array::new(vec![c], dgamma)?);
                grads.accumulate(*beta, Array::new(vec![c], dbeta)?);
                Ok(dx)
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = dy;
                if let Some(mask) = mask {
                    for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                Ok(dx)
            }
            (LayerKind::Dense { units }, Cache::Dense { x, w, b }) => {
                let units = *units;
                let (batch, f) = (x.shape()[0], x.shape()[1]);
                let mut dw = vec![0.0; f * units];
                gemm(
                    1.0,
                    Mat::rm_t(x.data(), batch, f),
                    Mat::rm(dy.data(), batch, units),
                    0.0,
                    &mut dw,
                );
                let mut db = vec![0.0; units];
                for row in dy.data().chunks(units) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let mut dx = Array::zeros(x.shape());
                gemm(
                    1.0,
                    Mat::rm(dy.data(), batch, units),
                    Mat::rm_t(store.value(*w).data(), f, units),
                    0.0,
                    dx.data_mut(),
                );
                grads.accumulate(*w, Array::new(vec![f, units], dw)?);
                grads.accumulate(*b, Array::new(vec![units], db)?);
                Ok(dx)
            }
            (LayerKind::Lstm { units }, Cache::Lstm(cache)) => lstm_backward(store, cache, *units, dy, grads),
            (LayerKind::Activation { .. }, Cache::Relu { y }) => {
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                Ok(dx)
            }
            (LayerKind::Activation { .. }, Cache::Elu { x, y }) => {
                let mut dx = dy;
                for ((d, &xv), &yv) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    if xv <= 0.0 {
                        *d *= yv + 1.0;
                    }
                }
                Ok(dx)
            }
            (LayerKind::Activation { .. }, Cache::Softmax { y }) => {
                let c = *y.shape().last().unwrap();
                let mut dx = dy;
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    softmax_backward_in_place(drow, yrow);
                }
                Ok(dx)
            }
            (LayerKind::RowsToSequence, Cache::Reshape { in_shape }) => Ok(dy.reshape(in_shape)?),
            _ => Err(NnError::CacheMismatch(self.name.clone())),
        }
    }
}

fn lstm_backward(
    store: &ParamStore,
    cache: &LstmCache,
    units: usize,
    dy: Array,
    grads: &mut Gradients,
) -> Result<Array, NnError> {
    let LstmCache {
        x,
        gates,
        cells,
        hidden,
        tanh_cells,
        w,
        r,
        b,
    } = cache;
    let (batch, steps, features) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let g4 = 4 * units;
    let bu = batch * units;
    let rec = store.value(*r).data();
    let weight = store.value(*w).data();

    let mut dz = vec![0.0; batch * g4];
    let mut dw = vec![0.0; features * g4];
    let mut dr = vec![0.0; units * g4];
    let mut db = vec![0.0; g4];
    let mut dh = dy.data().to_vec();
    let mut dc = vec![0.0; bu];
    // dL/dz for every (sample, step), `[B, T, 4U]`.
    let mut dz_all = vec![0.0; batch * steps * g4];
    for t in (0..steps).rev() {
        let c_prev = &cells[t * bu..(t + 1) * bu];
        let h_prev = &hidden[t * bu..(t + 1) * bu];
        let g_t = &gates[t * batch * g4..(t + 1) * batch * g4];
        let tc_t = &tanh_cells[t * bu..(t + 1) * bu];
        for (n, (gt, dzt)) in g_t.chunks(g4).zip(dz.chunks_mut(g4)).enumerate() {
            for k in 0..units {
                let j = n * units + k;
                let (i, f, g, o) = (gt[k], gt[units + k], gt[2 * units + k], gt[3 * units + k]);
                let tc = tc_t[j];
                let dho = dh[j];
                let dcell = dc[j] + dho * o * (1.0 - tc * tc);
                dzt[k] = dcell * g * i * (1.0 - i);
                dzt[units + k] = dcell * c_prev[j] * f * (1.0 - f);
                dzt[2 * units + k] = dcell * i * (1.0 - g * g);
                dzt[3 * units + k] = dho * tc * o * (1.0 - o);
                dc[j] = dcell * f;
            }
        }
        for row in dz.chunks(g4) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if t > 0 {
            gemm(
                1.0,
                Mat::rm_t(h_prev, batch, units),
                Mat::rm(&dz, batch, g4),
                1.0,
                &mut dr,
            );
        }
        gemm(
            1.0,
            Mat::rm(&dz, batch, g4),
            Mat::rm_t(rec, units, g4),
            0.0,
            &mut dh,
        );
        for (n, row) in dz.chunks(g4).enumerate() {
            let off = (n * steps + t) * g4;
            dz_all[off..off + g4].copy_from_slice(row);
        }
    }
    let rows = batch * steps;
    gemm(
        1.0,
        Mat::rm_t(x.data(), rows, features),
        Mat::rm(&dz_all, rows, g4),
        0.0,
        &mut dw,
    );
    let mut dx = Array::zeros(x.shape());
    gemm(
        1.0,
        Mat::rm(&dz_all, rows, g4),
        Mat::rm_t(weight, features, g4),
        0.0,
        dx.data_mut(),
    );
    grads.accumulate(*w, Array::new(vec![features, g4], dw)?);
    grads.accumulate(*r, Array::new(vec![units, g4], dr)?);
    grads.accumulate(*b, Array::new(vec![g4], db)?);
    Ok(dx)
}

fn check_param(store: &ParamStore, id: ParamId, shape: &[usize], layer: &str) -> Result<(), NnError> {
    let found = store.value(id).shape();
    if found != shape {
        return Err(mismatch(&format!("{layer} parameter"), shape.to_vec(), found));
    }
    Ok(())
}

/// Per-channel mean and biased variance over all leading positions.
fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for row in x.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    (mean, var)
}

/// Patches `[Ho * Wo, k * k * C]` of one `[H, W, C]` sample.
/// Patch sizes up to this many inputs use the direct loops below instead of
/// im2col + GEMM, which is slow for tiny inner dimensions.
const DIRECT_CONV_MAX: usize = 32;

/// Start offsets of the contiguous `k * c` segments of every output patch,
/// `k` per output pixel.
fn conv2d_offsets(shape: &[usize], k: usize) -> Vec<usize> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = Vec::with_capacity(ho * wo * k);
    for i in 0..ho {
        for j in 0..wo {
            out.extend((0..k).map(|di| ((i + di) * w + j) * c));
        }
    }
    out
}

/// `y[p] += sum_j x[patch(p)_j] * weight[j]`, where patch `p` is the
/// concatenation of the segments `offsets[p * segs..]` of length `seg_len`.
fn direct_conv_forward(
    x: &[f64],
    offsets: &[usize],
    seg_len: usize,
    weight: &[f64],
    filters: usize,
    y: &mut [f64],
) {
    let segs = offsets.len() / (y.len() / filters);
    for (p, yrow) in y.chunks_mut(filters).enumerate() {
        for (s, &src) in offsets[p * segs..(p + 1) * segs].iter().enumerate() {
            for (j, &xv) in x[src..src + seg_len].iter().enumerate() {
                let wrow = &weight[(s * seg_len + j) * filters..(s * seg_len + j + 1) * filters];
                for (yv, wv) in yrow.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_backward(
    x: &[f64],
    dy: &[f64],
    offsets: &[usize],
    seg_len: usize,
    weight: &[f64],
    filters: usize,
    dw: &mut [f64],
    dx: &mut [f64],
) {
    let segs = offsets.len() / (dy.len() / filters);
    for (p, dyrow) in dy.chunks(filters).enumerate() {
        for (s, &src) in offsets[p * segs..(p + 1) * segs].iter().enumerate() {
            for j in 0..seg_len {
                let row = (s * seg_len + j) * filters;
                let xv = x[src + j];
                let mut acc = 0.0;
                for ((dwv, wv), g) in dw[row..row + filters]
                    .iter_mut()
                    .zip(&weight[row..row + filters])
                    .zip(dyrow)
                {
                    *dwv += xv * g;
                    acc += wv * g;
                }
                dx[src + j] += acc;
            }
        }
    }
}

/// Single-channel conv2d computed one filter plane at a time so the inner
/// loop runs along image rows; `planes` is `[filters, ho, wo]` scratch.
fn plane_conv_forward(
    x: &[f64],
    shape: &[usize],
    k: usize,
    weight: &[f64],
    filters: usize,
    planes: &mut [f64],
    y: &mut [f64],
) {
    let w = shape[1];
    let (ho, wo) = (shape[0] - k + 1, w - k + 1);
    for (f, plane) in planes.chunks_mut(ho * wo).enumerate() {
        plane.iter_mut().for_each(|v| *v = 0.0);
        for di in 0..k {
            for dj in 0..k {
                let wv = weight[(di * k + dj) * filters + f];
                for (i, prow) in plane.chunks_mut(wo).enumerate() {
                    let xrow = &x[(i + di) * w + dj..(i + di) * w + dj + wo];
                    for (p, xv) in prow.iter_mut().zip(xrow) {
                        *p += wv * xv;
                    }
                }
            }
        }
    }
    for (pix, yrow) in y.chunks_mut(filters).enumerate() {
        for (f, yv) in yrow.iter_mut().enumerate() {
            *yv += planes[f * ho * wo + pix];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn plane_conv_backward(
    x: &[f64],
    dy: &[f64],
    shape: &[usize],
    k: usize,
    weight: &[f64],
    filters: usize,
    planes: &mut [f64],
    dw: &mut [f64],
    dx: &mut [f64],
) {
    let w = shape[1];
    let (ho, wo) = (shape[0] - k + 1, w - k + 1);
    for (pix, dyrow) in dy.chunks(filters).enumerate() {
        for (f, g) in dyrow.iter().enumerate() {
            planes[f * ho * wo + pix] = *g;
        }
    }
    for (f, plane) in planes.chunks(ho * wo).enumerate() {
        for di in 0..k {
            for dj in 0..k {
                let slot = (di * k + dj) * filters + f;
                let wv = weight[slot];
                let mut acc = 0.0;
                for (i, prow) in plane.chunks(wo).enumerate() {
                    let start = (i + di) * w + dj;
                    let xrow = &x[start..start + wo];
                    acc += prow.iter().zip(xrow).map(|(g, xv)| g * xv).sum::<f64>();
                    for (d, g) in dx[start..start + wo].iter_mut().zip(prow) {
                        *d += wv * g;
                    }
                }
                dw[slot] += acc;
            }
        }
    }
}

fn im2col(x: &[f64], shape: &[usize], k: usize, out: &mut [f64]) {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h - k + 1, w - k + 1);
    let kc = k * c;
    let mut o = 0;
    for i in 0..ho {
        for j in 0..wo {
            for di in 0..k {
                let src = ((i + di) * w + j) * c;
                out[o..o + kc].copy_from_slice(&x[src..src + kc]);
                o += kc;
            }
        }
    }
}

fn col2im(dpatches: &[f64], shape: &[usize], k: usize, dx: &mut [f64]) {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h - k + 1, w - k + 1);
    let kc = k * c;
    let mut o = 0;
    for i in 0..ho {
        for j in 0..wo {
            for di in 0..k {
                let dst = ((i + di) * w + j) * c;
                for (d, v) in dx[dst..dst + kc].iter_mut().zip(&dpatches[o..o + kc]) {
                    *d += v;
                }
                o += kc;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `d <- y * (d - <d, y>)`.
pub(crate) fn softmax_backward_in_place(d: &mut [f64], y: &[f64]) {
    let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
    for (dv, &yv) in d.iter_mut().zip(y) {
        *dv = yv * (*dv - dot);
    }
}
