use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn tiny_encoder(positional: bool) -> EncoderConfig {
    EncoderConfig {
        input_dim: 8,
        num_patches: 4,
        layers: 2,
        heads: 2,
        model_dim: 4,
        output_dim: 8,
        positional,
    }
}

fn tiny_net(encoder: Option<EncoderConfig>) -> NetConfig {
    NetConfig {
        layout: StateLayout {
            query_width: 5,
            input_dim: 8,
        },
        encoder,
        hidden: 6,
        hidden_layers: 2,
    }
}

fn random_states(rng: &mut ChaCha8Rng, rows: usize, layout: StateLayout) -> Array2<f64> {
    let p = layout.query_width;
    Array2::from_shape_fn((rows, layout.state_len()), |(_, j)| {
        if j < p {
            rng.random_range(0.2..1.0)
        } else if j < 2 * p {
            rng.random_range(1..=2) as f64
        } else if j < 3 * p {
            rng.random_range(0..20) as f64
        } else {
            rng.random_range(-0.5..0.5)
        }
    })
}

/// Scales the output layer up so every path carries a visible gradient.
fn amplify_output(params: &mut ParamSet, layer: Dense) {
    params.tensor_mut(layer.w).mapv_inplace(|v| v * 100.0);
}

fn assert_close(analytic: &Gradients, numeric: &[f64], what: &str) {
    let err = relative_error(&analytic.flat(), numeric);
    assert!(err < FD_TOL, "{what}: relative error {err:e}");
}

#[test]
fn encoder_config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let bad = EncoderConfig {
        num_patches: 7,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().unwrap_err().is_config());
    let bad = EncoderConfig {
        heads: 0,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn encoder_shape_and_purity() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::new(EncoderConfig::default(), &mut params, "e", &mut rng).unwrap();
    let x = Array2::from_shape_fn((3, 64), |_| rng.random_range(-1.0..1.0));
    let (a, _) = enc.forward(&params, x.view()).unwrap();
    let (b, _) = enc.forward(&params, x.view()).unwrap();
    assert_eq!(a.shape(), &[3, 32]);
    assert_eq!(a, b);
    let wrong = Array2::zeros((1, 63));
    assert!(matches!(
        enc.forward(&params, wrong.view()),
        Err(crate::Error::Dimension { .. })
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = Encoder::new(EncoderConfig::default(), &mut params, "e", &mut rng).unwrap();
    let x = Array2::from_shape_fn((4, 64), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = enc.forward(&params, x.view()).unwrap();
    for block in 0..2 {
        assert_eq!(cache.attention(block).len(), 4 * 4);
        for a in cache.attention(block) {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}

fn swap_patches(x: &Array2<f64>, patch: usize, i: usize, j: usize) -> Array2<f64> {
    let mut y = x.clone();
    for k in 0..patch {
        y[[0, i * patch + k]] = x[[0, j * patch + k]];
        y[[0, j * patch + k]] = x[[0, i * patch + k]];
    }
    y
}

#[test]
fn patch_order_matters_only_with_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_fn((1, 64), |_| rng.random_range(-1.0..1.0));
    let swapped = swap_patches(&x, 8, 1, 5);

    let mut params = ParamSet::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut params, "e", &mut rng).unwrap();
    let (a, _) = enc.forward(&params, x.view()).unwrap();
    let (b, _) = enc.forward(&params, swapped.view()).unwrap();
    let diff = (&a - &b).mapv(f64::abs).sum();
    assert!(diff > 1e-6, "positional encoding ignored, diff {diff}");

    // Without positions, attention plus mean pooling is permutation invariant.
    let cfg = EncoderConfig {
        positional: false,
        ..EncoderConfig::default()
    };
    let mut params = ParamSet::new();
    let enc = Encoder::new(cfg, &mut params, "e", &mut rng).unwrap();
    let (a, _) = enc.forward(&params, x.view()).unwrap();
    let (b, _) = enc.forward(&params, swapped.view()).unwrap();
    let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12);
}

#[test]
fn sinusoidal_table_matches_formula() {
    let pe = super::encoder::sinusoidal_positions(8, 64);
    assert_eq!(pe[[0, 0]], 0.0);
    assert_eq!(pe[[0, 1]], 1.0);
    let want = (3.0f64 / 10000f64.powf(10.0 / 64.0)).sin();
    assert!((pe[[3, 10]] - want).abs() < 1e-15);
    let want = (3.0f64 / 10000f64.powf(10.0 / 64.0)).cos();
    assert!((pe[[3, 11]] - want).abs() < 1e-15);
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let mut params = ParamSet::new();
        let enc = Encoder::new(tiny_encoder(case % 2 == 0), &mut params, "e", &mut rng).unwrap();
        let batch = 1 + (case as usize % 3);
        let x = Array2::from_shape_fn((batch, 8), |_| rng.random_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((batch, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &ParamSet| (&enc.forward(p, x.view()).unwrap().0 * &weights).sum();
        let (_, cache) = enc.forward(&params, x.view()).unwrap();
        let mut grads = params.zero_grads();
        enc.backward(&params, &cache, weights.view(), &mut grads);
        let numeric = finite_difference(&params, FD_STEP, loss);
        assert_close(&grads, &numeric, &format!("encoder case {case}"));
    }
}

#[test]
fn policy_probabilities_are_valid() {
    let cfg = NetConfig {
        layout: StateLayout {
            query_width: 5,
            input_dim: 64,
        },
        encoder: Some(EncoderConfig::default()),
        hidden: 128,
        hidden_layers: 2,
    };
    let (net, mut params) = PolicyNet::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_states(&mut rng, 16, cfg.layout);
    let out = net.forward(&params, x.view()).unwrap();
    assert_eq!(out.probs.shape(), &[16, 2]);
    for row in out.probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let again = net.forward(&params, x.view()).unwrap();
    assert_eq!(out.probs, again.probs);

    let last = net.output_layer();
    params.tensor_mut(last.w).fill(0.0);
    params.tensor_mut(last.b).fill(0.0);
    let out = net.forward(&params, x.view()).unwrap();
    assert!(out.probs.iter().all(|&p| p == 0.5));

    let short = Array2::zeros((1, cfg.layout.state_len() - 1));
    assert!(net.forward(&params, short.view()).is_err());
}

#[test]
fn softmax_helpers_agree() {
    let x = ndarray::array![[1000.0, -1000.0], [0.3, 0.1], [-2.0, 5.0]];
    let p = softmax_rows(&x);
    let lp = log_softmax(&x);
    for (a, b) in p.iter().zip(lp.iter()) {
        if *a > 0.0 {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
    assert!((p[[1, 0]] - 1.0 / (1.0 + (-0.2f64).exp())).abs() < 1e-15);
}

#[test]
fn policy_log_prob_gradient_matches_finite_differences() {
    for case in 0..24u64 {
        let encoder = match case % 3 {
            0 => Some(tiny_encoder(true)),
            1 => Some(tiny_encoder(false)),
            _ => None,
        };
        let cfg = tiny_net(encoder);
        let (net, mut params) = PolicyNet::new(cfg, 200 + case).unwrap();
        amplify_output(&mut params, net.output_layer());
        let mut rng = ChaCha8Rng::seed_from_u64(300 + case);
        let batch = 1 + (case as usize % 4);
        let x = random_states(&mut rng, batch, cfg.layout);
        let actions: Vec<usize> = (0..batch).map(|_| rng.random_range(0..2)).collect();

        let loss = |p: &ParamSet| {
            let out = net.forward(p, x.view()).unwrap();
            let lp = log_softmax(&out.logits);
            actions
                .iter()
                .enumerate()
                .map(|(b, &a)| lp[[b, a]])
                .sum::<f64>()
        };
        let out = net.forward(&params, x.view()).unwrap();
        let mut dlogits = -out.probs.clone();
        for (b, &a) in actions.iter().enumerate() {
            dlogits[[b, a]] += 1.0;
        }
        let grads = net.backward(&params, &out.cache, dlogits);
        let numeric = finite_difference(&params, FD_STEP, loss);
        assert_close(&grads, &numeric, &format!("policy case {case}"));
    }
}

#[test]
fn value_is_scalar_and_pure() {
    let cfg = tiny_net(Some(tiny_encoder(true)));
    let (net, params) = ValueNet::new(cfg, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let local = random_states(&mut rng, 6, cfg.layout);
    let global = local
        .into_shape_with_order((2, 3 * cfg.layout.state_len()))
        .unwrap();
    let (v, _) = net.forward(&params, global.view()).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v, net.forward(&params, global.view()).unwrap().0);
    let row: Vec<f64> = global.row(1).to_vec();
    assert_eq!(net.value(&params, &row).unwrap(), v[1]);
    assert!(net.value(&params, &row[1..]).is_err());
}

#[test]
fn value_squared_error_gradient_matches_finite_differences() {
    for case in 0..22u64 {
        let encoder = if case % 2 == 0 {
            Some(tiny_encoder(true))
        } else {
            None
        };
        let cfg = tiny_net(encoder);
        let agents = 1 + (case as usize % 3);
        let (net, params) = ValueNet::new(cfg, agents, 400 + case).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + case);
        let batch = 1 + (case as usize % 4);
        let local = random_states(&mut rng, batch * agents, cfg.layout);
        let global = local
            .into_shape_with_order((batch, agents * cfg.layout.state_len()))
            .unwrap();
        let targets = Array1::from_shape_fn(batch, |_| rng.random_range(-3.0..3.0));

        let loss = |p: &ParamSet| {
            let (v, _) = net.forward(p, global.view()).unwrap();
            (&v - &targets).mapv(|e| e * e).mean().unwrap()
        };
        let (v, cache) = net.forward(&params, global.view()).unwrap();
        let dv = (&v - &targets) * (2.0 / batch as f64);
        let grads = net.backward(&params, &cache, &dv);
        let numeric = finite_difference(&params, FD_STEP, loss);
        assert_close(&grads, &numeric, &format!("value case {case}"));
    }
}

#[test]
fn net_config_rejects_mismatched_encoder() {
    let mut cfg = tiny_net(Some(tiny_encoder(true)));
    cfg.layout.input_dim = 16;
    assert!(PolicyNet::new(cfg, 0).unwrap_err().is_config());
    assert_eq!(tiny_net(None).feature_dim(), 15 + 8);
}

fn scalar_param(x: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("x", Array2::from_elem((1, 1), x));
    p
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut params = scalar_param(1.0);
    let grads = params.zero_grads();
    let mut adam = Adam::new(AdamConfig::with_lr(0.1));
    adam.step(&mut params, &grads).unwrap();
    assert_eq!(params.tensor(0)[[0, 0]], 1.0);
    assert_eq!(params.version(), 1);
}

#[test]
fn adam_descends_on_square() {
    let mut params = scalar_param(1.0);
    let mut grads = params.zero_grads();
    grads.tensor_mut(0)[[0, 0]] = 2.0;
    let mut adam = Adam::new(AdamConfig::with_lr(0.1));
    adam.step(&mut params, &grads).unwrap();
    let x = params.tensor(0)[[0, 0]];
    assert!(x < 1.0);
    // first bias-corrected step moves by lr
    assert!((x - 0.9).abs() < 1e-6);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = scalar_param(1.0);
    let mut grads = params.zero_grads();
    grads.tensor_mut(0)[[0, 0]] = f64::NAN;
    let mut adam = Adam::new(AdamConfig::default());
    let err = adam.step(&mut params, &grads).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(ref n) if n == "x"));
    assert_eq!(params.version(), 0);
    assert_eq!(params.tensor(0)[[0, 0]], 1.0);

    let mut other = scalar_param(1.0);
    other.push("y", Array2::zeros((2, 2)));
    assert!(adam.step(&mut params, &other.zero_grads()).is_err());
}

/// Solves the normal equations by Gaussian elimination.
fn least_squares(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let n = x.ncols();
    let mut a = x.t().dot(x);
    let mut b = x.t().dot(y);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
        }
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut w = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[[row, k]] * w[k]).sum();
        w[row] = (b[row] - s) / a[[row, row]];
    }
    w
}

#[test]
fn adam_fits_linear_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 64;
    // last column is the intercept
    let x = Array2::from_shape_fn((n, 4), |(_, j)| {
        if j == 3 {
            1.0
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let truth = ndarray::array![0.7, -1.2, 0.4, 0.3];
    let y = x.dot(&truth) + Array1::from_shape_fn(n, |_| rng.random_range(-0.05..0.05));
    let oracle = x.dot(&least_squares(&x, &y));

    let mut params = ParamSet::new();
    let layer = Dense::new(&mut params, "lin", 3, 1, 1.0, &mut rng);
    let inputs = x.slice(ndarray::s![.., ..3]).to_owned();
    let mut adam = Adam::new(AdamConfig::with_lr(0.05));
    for _ in 0..200 {
        let pred = layer.forward(&params, inputs.view()).column(0).to_owned();
        let dy = ((&pred - &y) * (2.0 / n as f64)).insert_axis(ndarray::Axis(1));
        let mut grads = params.zero_grads();
        layer.backward_params(inputs.view(), dy.view(), &mut grads);
        adam.step(&mut params, &grads).unwrap();
    }
    let pred = layer.forward(&params, inputs.view()).column(0).to_owned();
    let mse = (&pred - &oracle).mapv(|e| e * e).mean().unwrap();
    assert!(mse < 1e-3, "mse vs least squares {mse}");
    assert_eq!(params.version(), 200);
}

#[test]
fn gradient_clipping_bounds_norm() {
    let mut params = ParamSet::new();
    params.push("a", Array2::zeros((1, 2)));
    let mut g = params.zero_grads();
    g.tensor_mut(0)[[0, 0]] = 3.0;
    g.tensor_mut(0)[[0, 1]] = 4.0;
    assert_eq!(g.clip_global_norm(1.0), 5.0);
    assert!((g.global_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_net(Some(tiny_encoder(true)));
    let (_, mut params) = PolicyNet::new(cfg, 9).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut grads = params.zero_grads();
    grads.tensor_mut(0).fill(0.25);
    adam.step(&mut params, &grads).unwrap();
    adam.step(&mut params, &grads).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    write_checkpoint(&params, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(back.version(), 2);

    let text = std::fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["format"], CHECKPOINT_FORMAT);
    assert_eq!(header["tensors"], params.len());

    std::fs::write(&path, text.replace("llmsched-params", "other")).unwrap();
    assert!(read_checkpoint(&path).is_err());
}
