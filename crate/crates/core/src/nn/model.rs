use serde::{Deserialize, Serialize};

use crate::num::{Array, Rng};

use super::layers::{softmax_backward_in_place, softmax_in_place, Activation, Cache, LayerKind, LayerSpec};
use super::params::{Gradients, ParamId, ParamStore};
use super::NnError;

/// How a tapped latent is projected onto the embedding manifold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Softmax over all `q * t` entries: nonnegative, unit L1 norm.
    Softmax,
    /// Softmax followed by L2 rescaling: nonnegative, unit L2 norm.
    #[default]
    SoftmaxThenL2,
}

/// One sample's normalized `q x t` latent representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Array,
    pub mode: NormMode,
}

impl Embedding {
    /// Wraps values that are already normalized (shape `[q, t]`).
    pub fn new(values: Array, mode: NormMode) -> Result<Self, NnError> {
        if values.ndim() != 2 {
            return Err(NnError::ShapeMismatch {
                context: "embedding".into(),
                expected: vec![0, 0],
                found: values.shape().to_vec(),
            });
        }
        Ok(Self { values, mode })
    }

    /// Normalizes raw latent values (shape `[q, t]`).
    pub fn from_raw(raw: &Array, mode: NormMode) -> Result<Self, NnError> {
        let mut v = raw.clone();
        normalize_in_place(v.data_mut(), mode);
        Self::new(v, mode)
    }

    pub fn q(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Embeddings of a whole batch, `[B, q, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub values: Array,
    pub mode: NormMode,
}

impl EmbeddingBatch {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn q(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn t(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding {
            values: Array::new(vec![self.q(), self.t()], self.sample(i).to_vec()).expect("row size"),
            mode: self.mode,
        }
    }
}

pub(crate) fn normalize_in_place(v: &mut [f64], mode: NormMode) {
    softmax_in_place(v);
    if mode == NormMode::SoftmaxThenL2 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Reverse of [`normalize_in_place`] given the softmax output `s` and the
/// final embedding `e`; `d` holds dL/de on entry and dL/draw on exit.
fn normalize_backward(d: &mut [f64], s: &[f64], e: &[f64], mode: NormMode) {
    if mode == NormMode::SoftmaxThenL2 {
        let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = d.iter().zip(e).map(|(a, b)| a * b).sum();
        for (dv, &ev) in d.iter_mut().zip(e) {
            *dv = (*dv - ev * dot) / norm;
        }
    }
    softmax_backward_in_place(d, s);
}

/// Ordered layer stack with one tapped layer whose output is exported as
/// the embedding.
///
/// The tapped output `[T, C]` (spatial axes flattened into `T`) is mean-pooled along time into `embed_bins`
/// equal segments, giving a `q = C` by `t = embed_bins` latent, then
/// normalized with `norm`. A vector-valued tap `[F]` gives `q = F, t = 1`.
/// With `flatten_embedding` the pooled latent is laid out as `q = C * bins`,
/// `t = 1` (channel-major, same values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tap: usize,
    pub embed_bins: usize,
    #[serde(default)]
    pub flatten_embedding: bool,
    pub norm: NormMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
    version: u64,
    tap_shape: Vec<usize>,
    soft: Vec<f64>,
    embedding: Vec<f64>,
    /// Batch-norm running statistics to commit after the step.
    pub running_updates: Vec<(ParamId, Array)>,
}

#[derive(Debug)]
pub struct Forward {
    pub output: Array,
    pub embedding: EmbeddingBatch,
    pub tape: Tape,
}

/// Seed gradient for the model output.
#[derive(Clone, Debug)]
pub enum OutputGrad {
    /// dL/d(output).
    Output(Array),
    /// dL/d(pre-softmax logits); only valid when the last layer is a softmax.
    Logits(Array),
}

impl ModelSpec {
    /// Per-sample shapes after each layer (index 0 is the input).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.tap >= self.layers.len() {
            return Err(NnError::InvalidModel(format!(
                "embedding tap {} outside {} layers",
                self.tap,
                self.layers.len()
            )));
        }
        if self.embed_bins == 0 {
            return Err(NnError::InvalidModel("embed_bins must be positive".into()));
        }
        let shapes = self.shapes()?;
        let tap_shape = &shapes[self.tap + 1];
        let steps: usize = tap_shape[..tap_shape.len() - 1].iter().product();
        if tap_shape.len() >= 2 && steps < self.embed_bins {
            return Err(NnError::InvalidModel(format!(
                "tap has {steps} positions, fewer than {} embedding bins",
                self.embed_bins
            )));
        }
        Ok(())
    }

    /// Embedding dimensions `(q, t)`.
    pub fn embedding_dims(&self) -> Result<(usize, usize), NnError> {
        let shapes = self.shapes()?;
        let tap = &shapes[self.tap + 1];
        let (q, t) = match tap.as_slice() {
            [f] => (*f, 1),
            [.., c] => (*c, self.embed_bins),
            [] => return Err(NnError::InvalidModel("tap output is a scalar".into())),
        };
        Ok(self.layout(q, t))
    }

    fn layout(&self, q: usize, t: usize) -> (usize, usize) {
        if self.flatten_embedding {
            (q * t, 1)
        } else {
            (q, t)
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<(), NnError> {
        self.validate()?;
        let shapes = self.shapes()?;
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let mut layer_rng = rng.split_named(&layer.name);
            layer.init_params(shape, store, &mut layer_rng)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &Array,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<Forward, NnError> {
        if input.ndim() == 0 || input.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(NnError::ShapeMismatch {
                context: "model input".into(),
                expected,
                found: input.shape().to_vec(),
            });
        }
        let train = mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut running = Vec::new();
        let mut x: Option<Array> = None;
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let current = x.as_ref().unwrap_or(input);
            let (y, cache) = layer.forward(store, current, train, rng.as_deref_mut(), &mut running)?;
            caches.push(cache);
            if i == self.tap {
                tapped = Some(y.clone());
            }
            x = Some(y);
        }
        let x = x.unwrap_or_else(|| input.clone());
        let tapped = tapped.ok_or_else(|| NnError::InvalidModel("embedding tap not reached".into()))?;
        let tap_shape = tapped.shape().to_vec();
        let batch = tap_shape[0];
        let pooled = pool_time(&tapped, self.embed_bins);
        let (q, t) = match tap_shape.as_slice() {
            [_, f] => (*f, 1),
            [_, .., c] => (*c, self.embed_bins),
            _ => return Err(NnError::InvalidModel("tap output is a scalar".into())),
        };
        let (q, t) = self.layout(q, t);
        let mut soft = pooled.clone();
        let mut embedding = pooled;
        let per = q * t;
        for (s_row, e_row) in soft.chunks_mut(per).zip(embedding.chunks_mut(per)) {
            softmax_in_place(s_row);
            e_row.copy_from_slice(s_row);
            if self.norm == NormMode::SoftmaxThenL2 {
                let norm = e_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                e_row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let emb = EmbeddingBatch {
            values: Array::new(vec![batch, q, t], embedding.clone())?,
            mode: self.norm,
        };
        Ok(Forward {
            output: x,
            embedding: emb,
            tape: Tape {
                caches,
                version: store.version(),
                tap_shape,
                soft,
                embedding,
                running_updates: running,
            },
        })
    }

    /// Reverse pass from an output gradient and/or an embedding gradient
    /// (`[B, q, t]`, dL/d embedding values).
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        output_grad: Option<OutputGrad>,
        embedding_grad: Option<&Array>,
    ) -> Result<Gradients, NnError> {
        if tape.version != store.version() {
            return Err(NnError::StaleTape {
                tape: tape.version,
                store: store.version(),
            });
        }
        if tape.caches.len() != self.layers.len() {
            return Err(NnError::InvalidModel("tape does not belong to this model".into()));
        }
        let n_layers = self.layers.len();
        let mut grads = Gradients::default();

        // Gradient arriving at the tapped layer's output from the embedding.
        let tap_grad = match embedding_grad {
            Some(g) => {
                if g.len() != tape.embedding.len() {
                    return Err(NnError::ShapeMismatch {
                        context: "embedding gradient".into(),
                        expected: vec![tape.embedding.len()],
                        found: g.shape().to_vec(),
                    });
                }
                let batch = tape.tap_shape[0];
                let per = g.len() / batch;
                let mut d = g.data().to_vec();
                for ((drow, srow), erow) in d
                    .chunks_mut(per)
                    .zip(tape.soft.chunks(per))
                    .zip(tape.embedding.chunks(per))
                {
                    normalize_backward(drow, srow, erow, self.norm);
                }
                Some(unpool_time(&d, &tape.tap_shape, self.embed_bins))
            }
            None => None,
        };

        let (mut start, mut dy) = match output_grad {
            Some(OutputGrad::Output(g)) => (n_layers, Some(g)),
            Some(OutputGrad::Logits(g)) => {
                let last_is_softmax = matches!(
                    self.layers.last().map(|l| &l.kind),
                    Some(LayerKind::Activation {
                        function: Activation::Softmax
                    })
                );
                if !last_is_softmax {
                    return Err(NnError::InvalidModel(
                        "logit gradients need a final softmax layer".into(),
                    ));
                }
                (n_layers - 1, Some(g))
            }
            None => (self.tap + 1, None),
        };
        if dy.is_none() && tap_grad.is_none() {
            return Ok(grads);
        }
        if start <= self.tap {
            start = self.tap + 1;
        }
        for i in (0..start).rev() {
            if i == self.tap {
                if let Some(tg) = &tap_grad {
                    dy = Some(match dy {
                        Some(mut d) => {
                            d.add_assign(tg)?;
                            d
                        }
                        None => tg.clone(),
                    });
                }
            }
            if let Some(d) = dy.take() {
                dy = Some(self.layers[i].backward(store, &tape.caches[i], d, &mut grads)?);
            }
        }
        grads.input = dy;
        Ok(grads)
    }
}

/// Mean-pools `[B, T, C]` into `[B, C, bins]`; vectors `[B, F]` pass through.
/// Extra spatial axes are flattened into `T`.
fn pool_time(x: &Array, bins: usize) -> Vec<f64> {
    if x.ndim() == 2 {
        return x.data().to_vec();
    }
    let (batch, c) = (x.shape()[0], x.shape()[x.ndim() - 1]);
    let steps = x.len() / batch / c;
    let mut out = vec![0.0; batch * c * bins];
    for n in 0..batch {
        for j in 0..bins {
            let (lo, hi) = bin_range(j, bins, steps);
            let inv = 1.0 / (hi - lo) as f64;
            for s in lo..hi {
                let row = &x.data()[(n * steps + s) * c..(n * steps + s + 1) * c];
                for (ch, v) in row.iter().enumerate() {
                    out[(n * c + ch) * bins + j] += v * inv;
                }
            }
        }
    }
    out
}

fn unpool_time(d: &[f64], tap_shape: &[usize], bins: usize) -> Array {
    if tap_shape.len() == 2 {
        return Array::new(tap_shape.to_vec(), d.to_vec()).expect("tap size");
    }
    let (batch, c) = (tap_shape[0], tap_shape[tap_shape.len() - 1]);
    let steps = tap_shape.iter().product::<usize>() / batch / c;
    let mut out = Array::zeros(tap_shape);
    let od = out.data_mut();
    for n in 0..batch {
        for j in 0..bins {
            let (lo, hi) = bin_range(j, bins, steps);
            let inv = 1.0 / (hi - lo) as f64;
            for s in lo..hi {
                for ch in 0..c {
                    od[(n * steps + s) * c + ch] += d[(n * c + ch) * bins + j] * inv;
                }
            }
        }
    }
    out
}

/// Half-open index range of segment `j` when `n` items are split into `bins`.
pub(crate) fn bin_range(j: usize, bins: usize, n: usize) -> (usize, usize) {
    (j * n / bins, (j + 1) * n / bins)
}
