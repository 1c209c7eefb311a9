use super::*;
use crate::num::{Array, Rng};

fn single(input_shape: &[usize], kind: LayerKind) -> ModelSpec {
    ModelSpec {
        input_shape: input_shape.to_vec(),
        layers: vec![LayerSpec::new("l0", kind)],
        tap: 0,
        embed_bins: 1,
        flatten_embedding: false,
        norm: NormMode::SoftmaxThenL2,
    }
}

fn init(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut Rng::new(seed)).unwrap();
    store
}

#[test]
fn dense_identity_weights_is_identity() {
    let spec = single(&[3], LayerKind::Dense { units: 3 });
    let mut store = init(&spec, 1);
    let mut eye = Array::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    store.set("l0.weight", eye).unwrap();
    store.set("l0.bias", Array::zeros(&[3])).unwrap();
    let x = Array::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    assert_eq!(fwd.output, x);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let spec = single(&[3], LayerKind::Dense { units: 2 });
    let store = init(&spec, 2);
    let x = Array::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let g = Array::new(vec![1, 2], vec![0.5, -3.0]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    let grads = spec
        .backward(&store, &fwd.tape, Some(OutputGrad::Output(g.clone())), None)
        .unwrap();
    let dw = &grads.params[&store.id("l0.weight").unwrap()];
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(dw.data()[i * 2 + j], x.data()[i] * g.data()[j]);
        }
    }
}

#[test]
fn maxpool1d_picks_window_maxima() {
    let spec = single(&[8, 1], LayerKind::Maxpool1d { pool: 4 });
    let store = init(&spec, 0);
    let x = Array::new(vec![1, 8, 1], vec![1.0, 5.0, 2.0, 3.0, 0.0, 0.0, 0.0, 7.0]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    assert_eq!(fwd.output.data(), &[5.0, 7.0]);
}

#[test]
fn relu_blocks_negative_inputs() {
    let spec = single(
        &[3],
        LayerKind::Activation {
            function: Activation::Relu,
        },
    );
    let store = init(&spec, 0);
    let x = Array::new(vec![1, 3], vec![-1.0, 2.0, -0.5]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    let g = Array::filled(&[1, 3], 1.0);
    let grads = spec
        .backward(&store, &fwd.tape, Some(OutputGrad::Output(g)), None)
        .unwrap();
    assert_eq!(grads.input.unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn classifier_head_outputs_distribution() {
    let spec = ModelSpec {
        input_shape: vec![6],
        layers: vec![
            LayerSpec::new("d", LayerKind::Dense { units: 10 }),
            LayerSpec::new(
                "s",
                LayerKind::Activation {
                    function: Activation::Softmax,
                },
            ),
        ],
        tap: 0,
        embed_bins: 1,
        flatten_embedding: false,
        norm: NormMode::Softmax,
    };
    let store = init(&spec, 3);
    let mut rng = Rng::new(4);
    let x = Array::new(vec![5, 6], (0..30).map(|_| rng.normal(0.0, 3.0)).collect()).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    for n in 0..5 {
        let row = fwd.output.row(n);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_rate_and_scaling() {
    let rate = 0.2;
    let spec = single(&[1000], LayerKind::Dropout { rate });
    let store = init(&spec, 0);
    let x = Array::filled(&[10, 1000], 1.0);
    let mut rng = Rng::new(11);
    let fwd = spec.forward(&store, &x, Mode::Train, Some(&mut rng)).unwrap();
    let zeros = fwd.output.data().iter().filter(|&&v| v == 0.0).count();
    let n = x.len() as f64;
    let sd = (n * rate * (1.0 - rate)).sqrt();
    assert!((zeros as f64 - n * rate).abs() < 4.0 * sd);
    for &v in fwd.output.data() {
        assert!(v == 0.0 || (v - 1.0 / (1.0 - rate)).abs() < 1e-12);
    }
    let eval = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    assert_eq!(eval.output, x);
}

#[test]
fn dropout_in_training_needs_rng() {
    let spec = single(&[4], LayerKind::Dropout { rate: 0.5 });
    let store = init(&spec, 0);
    let err = spec
        .forward(&store, &Array::zeros(&[1, 4]), Mode::Train, None)
        .unwrap_err();
    assert!(matches!(err, NnError::MissingRng(_)));
}

#[test]
fn batchnorm_constant_batch_normalizes_to_zero() {
    let spec = single(&[4, 3], LayerKind::Batchnorm);
    let store = init(&spec, 0);
    let x = Array::filled(&[5, 4, 3], 2.5);
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    assert!(fwd.output.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let spec = single(&[2], LayerKind::Batchnorm);
    let mut store = init(&spec, 0);
    store
        .set("l0.running_mean", Array::from_vec(vec![1.0, -1.0]))
        .unwrap();
    store
        .set("l0.running_var", Array::from_vec(vec![4.0, 1.0]))
        .unwrap();
    let x = Array::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    assert!((fwd.output.data()[0] - 2.0 / (4.0 + NORM_EPS).sqrt()).abs() < 1e-12);
    assert_eq!(fwd.output.data()[1], 0.0);
    assert!(fwd.tape.running_updates.is_empty());
}

#[test]
fn batchnorm_training_records_running_update() {
    let spec = single(&[1], LayerKind::Batchnorm);
    let mut store = init(&spec, 0);
    let x = Array::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    store.commit_running_stats(&fwd.tape.running_updates);
    let rm = store.get("l0.running_mean").unwrap().data()[0];
    let rv = store.get("l0.running_var").unwrap().data()[0];
    assert!((rm - (1.0 - BATCHNORM_MOMENTUM) * 2.0).abs() < 1e-12);
    assert!((rv - (BATCHNORM_MOMENTUM + (1.0 - BATCHNORM_MOMENTUM) * 1.0)).abs() < 1e-12);
}

#[test]
fn embedding_modes_are_normalized() {
    let spec = ModelSpec {
        input_shape: vec![12, 5],
        layers: vec![LayerSpec::new(
            "c",
            LayerKind::Conv1d {
                filters: 4,
                kernel: 3,
            },
        )],
        tap: 0,
        embed_bins: 2,
        flatten_embedding: false,
        norm: NormMode::Softmax,
    };
    let store = init(&spec, 8);
    let mut rng = Rng::new(1);
    let x = Array::new(vec![3, 12, 5], (0..180).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
    let soft = spec.forward(&store, &x, Mode::Eval, None).unwrap();
    assert_eq!(soft.embedding.values.shape(), &[3, 4, 2]);
    for n in 0..3 {
        let e = soft.embedding.sample(n);
        assert!(e.iter().all(|&v| v >= 0.0));
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let l2 = ModelSpec {
        norm: NormMode::SoftmaxThenL2,
        ..spec
    };
    let out = l2.forward(&store, &x, Mode::Eval, None).unwrap();
    for n in 0..3 {
        let e = out.embedding.sample(n);
        assert!(e.iter().all(|&v| v >= 0.0));
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn stale_tape_rejected() {
    let spec = single(&[2], LayerKind::Dense { units: 2 });
    let mut store = init(&spec, 0);
    let x = Array::zeros(&[1, 2]);
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    let mut adam = store.adam(crate::num::AdamConfig::default());
    let grads = spec
        .backward(
            &store,
            &fwd.tape,
            Some(OutputGrad::Output(Array::filled(&[1, 2], 1.0))),
            None,
        )
        .unwrap();
    store.apply_adam(&mut adam, &grads).unwrap();
    let err = spec
        .backward(
            &store,
            &fwd.tape,
            Some(OutputGrad::Output(Array::filled(&[1, 2], 1.0))),
            None,
        )
        .unwrap_err();
    assert!(matches!(err, NnError::StaleTape { .. }));
}

#[test]
fn shape_mismatch_between_layers_detected() {
    let spec = ModelSpec {
        input_shape: vec![10, 2],
        layers: vec![LayerSpec::new("d", LayerKind::Dense { units: 3 })],
        tap: 0,
        embed_bins: 1,
        flatten_embedding: false,
        norm: NormMode::Softmax,
    };
    assert!(matches!(spec.validate(), Err(NnError::ShapeMismatch { .. })));
    let bad_input = single(&[4], LayerKind::Dense { units: 2 });
    let store = init(&bad_input, 0);
    assert!(bad_input
        .forward(&store, &Array::zeros(&[1, 5]), Mode::Eval, None)
        .is_err());
}

#[test]
fn invalid_hyperparameters_rejected() {
    assert!(LayerSpec::new("d", LayerKind::Dropout { rate: 1.0 })
        .validate()
        .is_err());
    assert!(LayerSpec::new(
        "c",
        LayerKind::Conv1d {
            filters: 0,
            kernel: 2
        }
    )
    .validate()
    .is_err());
}

#[test]
fn lstm_forget_bias_initialized_to_one() {
    let spec = single(&[8, 3], LayerKind::Lstm { units: 10 });
    let store = init(&spec, 0);
    let b = store.get("l0.bias").unwrap();
    assert_eq!(b.len(), 40);
    assert!(b.data()[10..20].iter().all(|&v| v == 1.0));
    assert!(b.data()[..10].iter().all(|&v| v == 0.0));
}

#[test]
fn rows_to_sequence_round_trips_gradient() {
    let spec = single(&[2, 3, 2], LayerKind::RowsToSequence);
    let store = init(&spec, 0);
    let x = Array::new(vec![1, 2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
    let fwd = spec.forward(&store, &x, Mode::Train, None).unwrap();
    assert_eq!(fwd.output.shape(), &[1, 2, 6]);
    let grads = spec
        .backward(
            &store,
            &fwd.tape,
            Some(OutputGrad::Output(fwd.output.clone())),
            None,
        )
        .unwrap();
    assert_eq!(grads.input.unwrap(), x);
}
