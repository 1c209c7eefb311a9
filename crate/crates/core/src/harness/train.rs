use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dml::DmlKind;
use crate::nn::{
    batch_cross_entropy, Embedding, EmbeddingBatch, Gradients, Mode, ModelSpec, OutputGrad, ParamStore,
};
use crate::num::{AdamConfig, Array, Rng};
use crate::synth::{Split, SyntheticDataset};
use crate::triplet::{
    class_distance, contrastive_loss, curriculum_bound, dynamic_margin, mine_with_fallback, triplet_loss,
    Candidate, Fallback, NegativeIndex, TripletBatch,
};

use super::config::{ExperimentConfig, Pairing, TrainMode};
use super::dwa::{dwa_weights, DwaState};
use super::metrics::MetricsRecord;
use super::HarnessError;

/// Final state of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation accuracy.
    pub best: ParamStore,
    pub ts_model: ModelSpec,
    pub image_model: ModelSpec,
    pub metrics: MetricsRecord,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub pairing: Pairing,
    pub dml: DmlKind,
    pub seed: u64,
    pub signal_noise: f64,
    pub image_noise: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    /// Validation accuracy of the primary head (time-series unless the
    /// mode is `image`) at `best_epoch`.
    pub best_val_acc: f64,
    /// Primary-head validation accuracy after the last epoch.
    pub final_val_acc: f64,
    /// Image-head validation accuracy after the last epoch, when trained.
    pub final_image_val_acc: Option<f64>,
    pub val_curve: Vec<f64>,
    pub image_val_curve: Vec<f64>,
    pub fallbacks: usize,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

/// Fraction of argmax-correct rows of `probs`.
pub fn accuracy(probs: &Array, labels: &[usize]) -> f64 {
    let k = probs.len() / labels.len().max(1);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| crate::num::argmax_slice(&probs.data()[i * k..(i + 1) * k]) == Some(l))
        .count();
    correct as f64 / labels.len() as f64
}

/// Eval-mode accuracy of `model` on `inputs` (`[N, ...]`), in chunks.
pub fn evaluate(
    model: &ModelSpec,
    store: &ParamStore,
    inputs: &Array,
    labels: &[usize],
    chunk: usize,
) -> Result<f64, HarnessError> {
    if labels.is_empty() {
        return Err(HarnessError::EmptySplit);
    }
    let mut correct = 0.0;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk.max(1)).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let x = Split::gather(inputs, &idx);
        let fwd = model.forward(store, &x, Mode::Eval, None)?;
        correct += accuracy(&fwd.output, &labels[start..end]) * idx.len() as f64;
        start = end;
    }
    Ok(correct / labels.len() as f64)
}

fn finite(value: f64, epoch: usize, batch: usize, component: &str) -> Result<f64, HarnessError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(HarnessError::NonFiniteLoss {
            epoch,
            batch,
            component: component.to_string(),
        })
    }
}

fn scaled(a: &Array, s: f64) -> Array {
    let mut out = a.clone();
    out.scale(s);
    out
}

/// Rows `[start, end)` of a `[N, q, t]` embedding batch.
fn slice_rows(e: &EmbeddingBatch, start: usize, end: usize) -> EmbeddingBatch {
    let idx: Vec<usize> = (start..end).collect();
    EmbeddingBatch {
        values: Split::gather(&e.values, &idx),
        mode: e.mode,
    }
}

fn concat_rows(a: &Array, b: &Array) -> Array {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Array::new(shape, data).expect("matching row shapes")
}

struct PairTerms {
    loss: f64,
    grad_anchor: Array,
    grad_images: Array,
    margin: f64,
}

/// Pairing loss (mean over the batch) between time-series anchors and the
/// image batch `[positives; negatives]`.
fn pairing_terms(
    config: &ExperimentConfig,
    anchors: &EmbeddingBatch,
    images: &EmbeddingBatch,
    distances: &[f64],
) -> Result<PairTerms, HarnessError> {
    let b = anchors.batch();
    let positives = slice_rows(images, 0, b);
    let negatives = slice_rows(images, b, 2 * b);
    let dml = config.dml_config();
    let inv = 1.0 / b as f64;
    match config.pairing {
        Pairing::Triplet => {
            let margin = dynamic_margin(&config.schedule, distances)?;
            let out = triplet_loss(
                &dml,
                &TripletBatch {
                    anchors: anchors.clone(),
                    positives,
                    negatives,
                    margin,
                    distances: distances.to_vec(),
                },
            )?;
            Ok(PairTerms {
                loss: out.loss * inv,
                grad_anchor: scaled(&out.grad_anchors, inv),
                grad_images: scaled(&concat_rows(&out.grad_positives, &out.grad_negatives), inv),
                margin,
            })
        }
        Pairing::Contrastive => {
            let margin = config.contrastive_margin;
            let shape = anchors.values.shape();
            let mut ga = Array::zeros(shape);
            let mut gp = Array::zeros(shape);
            let mut gn = Array::zeros(shape);
            let per = anchors.q() * anchors.t();
            let mut loss = 0.0;
            for i in 0..b {
                let a: Embedding = anchors.embedding(i);
                let pos = contrastive_loss(&dml, &a, &positives.embedding(i), true, margin)?;
                let neg = contrastive_loss(&dml, &a, &negatives.embedding(i), false, margin)?;
                loss += pos.loss + neg.loss;
                let r = i * per..(i + 1) * per;
                for (k, g) in ga.data_mut()[r.clone()].iter_mut().enumerate() {
                    *g = pos.grad_a[k] + neg.grad_a[k];
                }
                gp.data_mut()[r.clone()].copy_from_slice(&pos.grad_b);
                gn.data_mut()[r].copy_from_slice(&neg.grad_b);
            }
            Ok(PairTerms {
                loss: loss * inv,
                grad_anchor: scaled(&ga, inv),
                grad_images: scaled(&concat_rows(&gp, &gn), inv),
                margin,
            })
        }
        Pairing::None => unreachable!("pairing terms requested without an objective"),
    }
}

/// Per-epoch sums for logging.
#[derive(Default)]
struct EpochStats {
    batches: usize,
    ts_correct: f64,
    image_correct: f64,
    seen: usize,
    losses: Vec<f64>,
    weights: Vec<f64>,
    margin: f64,
    fallbacks: usize,
}

/// Trains one configuration on `data` and returns the best-validation
/// parameters with the full metrics record.
pub fn train(config: &ExperimentConfig, data: &SyntheticDataset) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(HarnessError::EmptySplit);
    }
    let started = Instant::now();
    let (ts_model, image_model) = config.models(&data.config);
    let classes = data.config.classes;
    let root = Rng::new(config.seed);

    let use_ts = config.mode != TrainMode::Image;
    let use_image = config.mode != TrainMode::Ts;
    let pairing = config.mode == TrainMode::Combined && config.pairing != Pairing::None;

    let mut store = ParamStore::new();
    let mut init_rng = root.split_named("init");
    if use_ts {
        ts_model.init_params(&mut store, &mut init_rng)?;
    }
    if use_image {
        image_model.init_params(&mut store, &mut init_rng)?;
    }
    let mut adam = store.adam(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });

    // Task order: [ts CE], [image CE], [pairing].
    let tasks = usize::from(use_ts) + usize::from(use_image) + usize::from(pairing);
    let mut dwa = DwaState::new(tasks, config.dwa);

    let train = &data.train;
    let index = NegativeIndex::build(
        0..classes,
        &train
            .labels
            .iter()
            .enumerate()
            .map(|(id, &l)| (Candidate { id, width: None }, l))
            .collect::<Vec<_>>(),
        class_distance,
    );

    let mut metrics = MetricsRecord::default();
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut val_curve = Vec::with_capacity(config.max_epochs);
    let mut image_val_curve = Vec::new();
    let mut total_fallbacks = 0;
    let n = train.len();
    let batch_size = config.batch_size.min(n);

    for epoch in 0..config.max_epochs {
        let epoch_rng = root.split_named("epoch").split(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        epoch_rng.split_named("shuffle").shuffle(&mut order);
        let bound = if pairing {
            curriculum_bound(&config.schedule, epoch)?
        } else {
            0
        };
        let mut stats = EpochStats {
            losses: vec![0.0; tasks],
            ..EpochStats::default()
        };

        for (bi, idx) in order.chunks(batch_size).enumerate() {
            let batch_rng = epoch_rng.split(bi as u64);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let b = idx.len();
            let mut losses = Vec::with_capacity(tasks);

            let ts_fwd = if use_ts {
                let x = Split::gather(&train.signals, idx);
                let mut rng = batch_rng.split_named("ts_dropout");
                Some(ts_model.forward(&store, &x, Mode::Train, Some(&mut rng))?)
            } else {
                None
            };

            // Image batch: paired positives, then mined negatives when pairing.
            let mut image_rows = idx.to_vec();
            let mut distances = Vec::new();
            if pairing {
                let mut mine_rng = batch_rng.split_named("mining");
                for (&i, &label) in idx.iter().zip(&labels) {
                    if train.labels[i] != label {
                        return Err(HarnessError::Audit(format!("positive {i} has a different label")));
                    }
                    let mined = mine_with_fallback(&index, &label, None, bound, &mut mine_rng, false)?;
                    if mined.fallback != Fallback::None {
                        stats.fallbacks += 1;
                    }
                    image_rows.push(mined.candidate.id);
                    distances.push(mined.distance as f64);
                }
            }
            let image_fwd = if use_image {
                let x = Split::gather(&train.images, &image_rows);
                let mut rng = batch_rng.split_named("image_dropout");
                Some(image_model.forward(&store, &x, Mode::Train, Some(&mut rng))?)
            } else {
                None
            };

            let mut ts_ce_grad = None;
            if let Some(f) = &ts_fwd {
                let (loss, grad) = batch_cross_entropy(&f.output, &labels)?;
                losses.push(finite(loss, epoch, bi, "ts_ce")?);
                ts_ce_grad = Some(grad);
                stats.ts_correct += accuracy(&f.output, &labels) * b as f64;
            }
            let mut image_ce_grad = None;
            if let Some(f) = &image_fwd {
                let rows = Split::gather(&f.output, &(0..b).collect::<Vec<_>>());
                let (loss, grad) = batch_cross_entropy(&rows, &labels)?;
                losses.push(finite(loss, epoch, bi, "image_ce")?);
                // Negatives (if any) receive no classification gradient.
                let full = concat_rows(&grad, &Array::zeros(&[f.output.shape()[0] - b, classes]));
                image_ce_grad = Some(full);
                stats.image_correct += accuracy(&rows, &labels) * b as f64;
            }
            let mut pair = None;
            if pairing {
                let (Some(tf), Some(imf)) = (&ts_fwd, &image_fwd) else {
                    unreachable!("pairing runs both encoders")
                };
                let terms = pairing_terms(config, &tf.embedding, &imf.embedding, &distances)?;
                losses.push(finite(terms.loss, epoch, bi, "pairing")?);
                stats.margin += terms.margin;
                pair = Some(terms);
            }

            let weights = dwa_weights(&dwa);
            dwa.observe(&losses);
            let mut w = weights.iter().copied();
            let mut grads = Gradients::default();
            let mut running = Vec::new();
            let w_ts = if use_ts { w.next().unwrap() } else { 0.0 };
            let w_img = if use_image { w.next().unwrap() } else { 0.0 };
            let w_pair = if pairing { w.next().unwrap() } else { 0.0 };
            if let Some(f) = ts_fwd {
                let emb_grad = pair.as_ref().map(|p| scaled(&p.grad_anchor, w_pair));
                let g = ts_model.backward(
                    &store,
                    &f.tape,
                    Some(OutputGrad::Logits(scaled(ts_ce_grad.as_ref().unwrap(), w_ts))),
                    emb_grad.as_ref(),
                )?;
                grads.merge(g);
                running.extend(f.tape.running_updates);
            }
            if let Some(f) = image_fwd {
                let emb_grad = pair.as_ref().map(|p| scaled(&p.grad_images, w_pair));
                let g = image_model.backward(
                    &store,
                    &f.tape,
                    Some(OutputGrad::Logits(scaled(image_ce_grad.as_ref().unwrap(), w_img))),
                    emb_grad.as_ref(),
                )?;
                grads.merge(g);
                running.extend(f.tape.running_updates);
            }
            if !grads.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    component: "gradient".into(),
                });
            }
            store.apply_adam(&mut adam, &grads)?;
            store.commit_running_stats(&running);

            for (acc, l) in stats.losses.iter_mut().zip(&losses) {
                *acc += l;
            }
            stats.weights = weights;
            stats.batches += 1;
            stats.seen += b;
        }

        // Epoch metrics.
        let seen = stats.seen as f64;
        let nb = stats.batches as f64;
        let mut task_names = Vec::new();
        if use_ts {
            metrics.push(epoch, "train", "ts_acc", stats.ts_correct / seen);
            task_names.push("ts_ce");
        }
        if use_image {
            metrics.push(epoch, "train", "image_acc", stats.image_correct / seen);
            task_names.push("image_ce");
        }
        if pairing {
            task_names.push("pairing");
        }
        for (i, name) in task_names.iter().enumerate() {
            metrics.push(epoch, "train", &format!("loss_{name}"), stats.losses[i] / nb);
            metrics.push(epoch, "train", &format!("dwa_{name}"), stats.weights[i]);
        }
        if pairing {
            metrics.push(epoch, "train", "bound", bound as f64);
            metrics.push(epoch, "train", "margin", stats.margin / nb);
            metrics.push(epoch, "train", "fallbacks", stats.fallbacks as f64);
            total_fallbacks += stats.fallbacks;
        }
        let chunk = config.batch_size;
        let mut primary = 0.0;
        if use_ts {
            let acc = evaluate(&ts_model, &store, &data.val.signals, &data.val.labels, chunk)?;
            metrics.push(epoch, "val", "ts_acc", acc);
            val_curve.push(acc);
            primary = acc;
        }
        if use_image {
            let acc = evaluate(&image_model, &store, &data.val.images, &data.val.labels, chunk)?;
            metrics.push(epoch, "val", "image_acc", acc);
            if use_ts {
                image_val_curve.push(acc);
            } else {
                val_curve.push(acc);
                primary = acc;
            }
        }
        if primary > best.0 {
            best = (primary, epoch, store.clone());
        }
    }

    let summary = RunSummary {
        mode: config.mode,
        pairing: config.pairing,
        dml: config.dml,
        seed: config.seed,
        signal_noise: data.config.signal_noise,
        image_noise: data.config.image_noise,
        epochs: config.max_epochs,
        best_epoch: best.1,
        best_val_acc: best.0,
        final_val_acc: *val_curve.last().expect("at least one epoch"),
        final_image_val_acc: image_val_curve.last().copied(),
        val_curve,
        image_val_curve,
        fallbacks: total_fallbacks,
        config_hash: config.hash(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        best: best.2,
        ts_model,
        image_model,
        metrics,
        summary,
    })
}
