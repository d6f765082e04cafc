use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// 1 -> 10 dense layer: exactly 20 parameters.
fn tiny_spec() -> ModelSpec {
    ModelSpec::new(
        ArchKind::FullyConnected,
        (1, 1, 1),
        &[LayerSpec::Dense { inputs: 1, outputs: 10 }],
    )
    .unwrap()
}

fn hidden_spec() -> ModelSpec {
    ModelSpec::new(
        ArchKind::FullyConnected,
        (1, 1, 3),
        &[
            LayerSpec::Dense { inputs: 3, outputs: 5 },
            LayerSpec::Dense { inputs: 5, outputs: 10 },
        ],
    )
    .unwrap()
}

fn toy_conv_spec() -> ModelSpec {
    use LayerSpec::*;
    ModelSpec::new(
        ArchKind::Convolutional,
        (4, 4, 1),
        &[
            Conv { in_ch: 1, out_ch: 2, kernel: 3 },
            Conv { in_ch: 2, out_ch: 2, kernel: 3 },
            MaxPool2,
            Dense { inputs: 8, outputs: 10 },
        ],
    )
    .unwrap()
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>());
    let y = (0..rows).map(|_| rng.gen_range(0..10u8)).collect();
    (x, y)
}

/// Central differences over every parameter.
fn finite_difference(spec: &ModelSpec, params: &ModelParams<f64>, x: &Array2<f64>, y: &[u8], eps: f64) -> ModelParams<f64> {
    let mut out = ModelParams::zeros_like(spec.param_shapes());
    let mut p = params.clone();
    for a in 0..p.arrays.len() {
        for j in 0..p.arrays[a].len() {
            let orig = p.arrays[a][j];
            p.arrays[a][j] = orig + eps;
            let plus = spec.loss(&p, x.view(), y).unwrap();
            p.arrays[a][j] = orig - eps;
            let minus = spec.loss(&p, x.view(), y).unwrap();
            p.arrays[a][j] = orig;
            out.arrays[a][j] = (plus - minus) / (2.0 * eps);
        }
    }
    out
}

fn max_relative_error(a: &ModelParams<f64>, b: &ModelParams<f64>) -> f64 {
    a.arrays
        .iter()
        .flatten()
        .zip(b.arrays.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn preset_parameter_counts() {
    let fc = ModelSpec::fully_connected();
    assert_eq!(fc.param_shapes(), &[32928, 42, 420, 10]);
    assert_eq!(fc.build_model::<f32>(0).total_len(), 33_400);
    let conv = ModelSpec::convolutional();
    assert_eq!(
        conv.param_shapes(),
        &[800, 32, 25600, 32, 18432, 64, 36864, 64, 802816, 256, 2560, 10]
    );
    assert_eq!(conv.build_model::<f32>(0).total_len(), 887_530);
}

#[test]
fn build_is_deterministic_and_glorot_bounded() {
    let spec = ModelSpec::fully_connected();
    let a = spec.build_model::<f32>(0);
    assert_eq!(a, spec.build_model::<f32>(0));
    assert_ne!(a, spec.build_model::<f32>(1));
    let limit = (6.0f32 / (784.0 + 42.0)).sqrt();
    assert!(a.arrays[0].iter().all(|w| w.abs() <= limit));
    assert!(a.arrays[1].iter().all(|&b| b == 0.0));
}

#[test]
fn invalid_topologies_rejected() {
    assert!(ModelSpec::new(
        ArchKind::FullyConnected,
        (1, 1, 4),
        &[LayerSpec::Dense { inputs: 3, outputs: 10 }]
    )
    .is_err());
    assert!(ModelSpec::new(
        ArchKind::FullyConnected,
        (1, 1, 4),
        &[LayerSpec::Dense { inputs: 4, outputs: 7 }]
    )
    .is_err());
    assert!(ModelSpec::new(ArchKind::Convolutional, (3, 3, 1), &[LayerSpec::MaxPool2]).is_err());
}

#[test]
fn forward_rows_are_distributions() {
    let spec = ModelSpec::fully_connected();
    let params = spec.build_model::<f32>(3);
    let (x, _) = random_batch(32, 784, 5);
    let probs = spec.forward(&params, x.mapv(|v| v as f32).view()).unwrap();
    for row in probs.rows() {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn forward_is_batch_independent() {
    for spec in [ModelSpec::fully_connected(), toy_conv_spec()] {
        let params = spec.build_model::<f32>(11);
        let (x, _) = random_batch(32, spec.input_len(), 6);
        let x = x.mapv(|v| v as f32);
        let all = spec.forward(&params, x.view()).unwrap();
        let one = spec.forward(&params, x.slice(ndarray::s![7..8, ..])).unwrap();
        for (a, b) in all.row(7).iter().zip(one.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_image_gives_finite_probabilities() {
    let spec = ModelSpec::convolutional();
    let params = spec.build_model::<f32>(0);
    let probs = spec.forward(&params, Array2::<f32>::zeros((1, 784)).view()).unwrap();
    assert!(probs.iter().all(|p| p.is_finite()));
}

#[test]
fn forward_rejects_wrong_width() {
    let spec = ModelSpec::fully_connected();
    let params = spec.build_model::<f32>(0);
    let err = spec.forward(&params, Array2::<f32>::zeros((2, 783)).view()).unwrap_err();
    assert!(matches!(err, NetError::Shape(_)));
}

#[test]
fn zero_learning_rate_is_identity() {
    let spec = ModelSpec::fully_connected();
    let mut params = spec.build_model::<f32>(0);
    let before = params.clone();
    let (x, y) = random_batch(8, 784, 1);
    let cfg = TrainConfig { learning_rate: 0.0, batch_size: 8 };
    spec.sgd_step(&mut params, x.mapv(|v| v as f32).view(), &y, &cfg).unwrap();
    assert_eq!(params, before);
}

#[test]
fn single_example_step_reduces_loss() {
    let spec = ModelSpec::fully_connected();
    let mut params = spec.build_model::<f32>(0);
    let (x, y) = random_batch(1, 784, 2);
    let x = x.mapv(|v| v as f32);
    let cfg = TrainConfig { learning_rate: 0.1, batch_size: 1 };
    let before = spec.sgd_step(&mut params, x.view(), &y, &cfg).unwrap();
    let after = spec.loss(&params, x.view(), &y).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn gradient_matches_finite_differences_on_twenty_params() {
    let spec = tiny_spec();
    assert_eq!(spec.total_params(), 20);
    let mut params = spec.build_model::<f64>(4);
    // non-zero biases so every coordinate matters
    params.arrays[1].iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * i as f64);
    let (x, y) = random_batch(6, 1, 9);
    let (_, g) = spec.loss_and_gradient(&params, x.view(), &y).unwrap();
    let fd = finite_difference(&spec, &params, &x, &y, 1e-4);
    assert!(max_relative_error(&g, &fd) < 1e-3);
}

#[test]
fn gradient_matches_finite_differences_with_hidden_relu() {
    let spec = hidden_spec();
    let params = spec.build_model::<f64>(8);
    let (x, y) = random_batch(5, 3, 10);
    let (_, g) = spec.loss_and_gradient(&params, x.view(), &y).unwrap();
    let fd = finite_difference(&spec, &params, &x, &y, 1e-4);
    assert!(max_relative_error(&g, &fd) < 1e-3);
}

#[test]
fn gradient_matches_finite_differences_on_toy_conv() {
    let spec = toy_conv_spec();
    let params = spec.build_model::<f64>(21);
    let (x, y) = random_batch(3, 16, 12);
    let (_, g) = spec.loss_and_gradient(&params, x.view(), &y).unwrap();
    let fd = finite_difference(&spec, &params, &x, &y, 1e-4);
    assert!(max_relative_error(&g, &fd) < 1e-3);
}

#[test]
fn non_finite_parameters_are_reported() {
    let spec = hidden_spec();
    let mut params = spec.build_model::<f64>(0);
    params.arrays[2][0] = f64::NAN;
    let (x, y) = random_batch(2, 3, 0);
    let err = spec.loss_and_gradient(&params, x.view(), &y).unwrap_err();
    assert!(matches!(err, NetError::NonFinite { .. }));
}

/// Identity-like 10 -> 10 classifier: image i lights pixel i.
fn one_hot_setup(labels: &[u8]) -> (ModelSpec, ModelParams<f32>, LabeledDataset) {
    let spec = ModelSpec::new(
        ArchKind::FullyConnected,
        (1, 1, 10),
        &[LayerSpec::Dense { inputs: 10, outputs: 10 }],
    )
    .unwrap();
    let mut params = ModelParams::<f32>::zeros_like(spec.param_shapes());
    for i in 0..10 {
        params.arrays[0][i * 10 + i] = 5.0;
    }
    let mut images = vec![0.0; labels.len() * 10];
    for i in 0..labels.len() {
        images[i * 10 + i % 10] = 1.0;
    }
    (spec, params, LabeledDataset::new(images, labels.to_vec(), 10).unwrap())
}

#[test]
fn accuracy_all_correct() {
    let labels: Vec<u8> = (0..10).collect();
    let (spec, params, ds) = one_hot_setup(&labels);
    assert_eq!(spec.evaluate_accuracy(&params, &ds).unwrap(), 1.0);
}

#[test]
fn accuracy_three_of_four() {
    let (spec, params, ds) = one_hot_setup(&[0, 1, 2, 9]);
    assert_eq!(spec.evaluate_accuracy(&params, &ds).unwrap(), 0.75);
}

#[test]
fn accuracy_on_empty_dataset_fails() {
    let (spec, params, _) = one_hot_setup(&[0]);
    let empty = LabeledDataset::new(vec![], vec![], 10).unwrap();
    assert!(matches!(
        spec.evaluate_accuracy(&params, &empty),
        Err(NetError::Argument(_))
    ));
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax([0.0f32; 4]), 0);
}

#[test]
fn f32_and_f64_paths_agree() {
    let spec = toy_conv_spec();
    let p64 = spec.build_model::<f64>(2);
    let p32 = spec.build_model::<f32>(2);
    assert_eq!(p32, p64.cast::<f32>());
    let (x, _) = random_batch(4, 16, 3);
    let a = spec.forward(&p64, x.view()).unwrap();
    let b = spec.forward(&p32, x.mapv(|v| v as f32).view()).unwrap();
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - *v as f64).abs() < 1e-5);
    }
}
