use quadenhance::nn::{
    read_model, write_model, LayerSpec, Mode, ModelParams, NetworkSpec, Tensor, BN_MOMENTUM, THETA_OUTPUTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn bn_only(channels: usize, h: usize, w: usize) -> NetworkSpec {
    NetworkSpec {
        name: "bn".into(),
        input_shape: vec![channels, h, w],
        branches: 1,
        branch_layers: vec![LayerSpec::BatchNorm { channels }],
        head_layers: vec![],
    }
}

/// Per-channel mean and biased variance of an NCHW tensor.
fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let hw = t.len() / (n * c);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| t.sample(s)[ch * hw..(ch + 1) * hw].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let spec = bn_only(4, 5, 3);
    let params = spec.init_params(&mut rng(0), false).unwrap();
    let x = random_input(vec![6, 4, 5, 3], -3.0, 5.0, 1);
    let out = spec.forward(&params, &x, Mode::Train, &mut rng(2)).unwrap().output;
    for (m, v) in channel_moments(&out) {
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn batchnorm_running_stats_follow_momentum() {
    let spec = bn_only(2, 3, 3);
    let mut params = spec.init_params(&mut rng(0), false).unwrap();
    let x = random_input(vec![4, 2, 3, 3], 0.0, 2.0, 3);
    let before = params.buffers.clone();
    let pass = spec.forward(&params, &x, Mode::Train, &mut rng(4)).unwrap();
    spec.update_running_stats(&pass, &mut params.buffers).unwrap();

    // independent oracle: batch mean and unbiased variance per channel
    for (ch, (m, v_biased)) in channel_moments(&x).into_iter().enumerate() {
        let count = (4 * 9) as f64;
        let v = v_biased * count / (count - 1.0);
        let rm = params.buffers["b0.0.running_mean"].data()[ch];
        let rv = params.buffers["b0.0.running_var"].data()[ch];
        let rm0 = before["b0.0.running_mean"].data()[ch];
        let rv0 = before["b0.0.running_var"].data()[ch];
        assert!((rm - ((1.0 - BN_MOMENTUM) * rm0 + BN_MOMENTUM * m)).abs() < 1e-12);
        assert!((rv - ((1.0 - BN_MOMENTUM) * rv0 + BN_MOMENTUM * v)).abs() < 1e-12);
    }

    // eval mode reads the running statistics, never the batch
    let e1 = spec.forward(&params, &x, Mode::Eval, &mut rng(5)).unwrap().output;
    let single = Tensor::new(vec![1, 2, 3, 3], x.sample(0).to_vec()).unwrap();
    let e2 = spec.forward(&params, &single, Mode::Eval, &mut rng(6)).unwrap().output;
    assert_eq!(e1.sample(0), e2.sample(0));
}

#[test]
fn zero_final_layer_gives_zero_theta() {
    for spec in [
        NetworkSpec::paired_generator(5, 32, 0.5),
        NetworkSpec::unpaired_generator(32, 0.15),
    ] {
        let params = spec.init_params(&mut rng(9), true).unwrap();
        let x = random_input(vec![3, 3, 32, 32], 0.0, 1.0, 10);
        for mode in [Mode::Train, Mode::Eval] {
            let out = spec.forward(&params, &x, mode, &mut rng(11)).unwrap().output;
            assert_eq!(out.shape(), &[3, THETA_OUTPUTS]);
            assert!(out.data().iter().all(|&v| v == 0.0), "{}", spec.name);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let spec = NetworkSpec::paired_generator(3, 16, 0.5);
    let params = spec.init_params(&mut rng(1), false).unwrap();
    let x = random_input(vec![4, 3, 16, 16], 0.0, 1.0, 2);
    let eval = |seed| spec.forward(&params, &x, Mode::Eval, &mut rng(seed)).unwrap().output;
    assert_eq!(eval(1), eval(2));
    let train = |seed| spec.forward(&params, &x, Mode::Train, &mut rng(seed)).unwrap().output;
    assert_eq!(train(7), train(7));
    // dropout draws differ across seeds
    assert_ne!(train(7), train(8));
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let spec = NetworkSpec::discriminator(16, 0.12);
    let params = spec.init_params(&mut rng(3), false).unwrap();
    let x = random_input(vec![2, 3, 16, 16], 0.0, 1.0, 4);
    let pass = spec.forward(&params, &x, Mode::Train, &mut rng(5)).unwrap();
    let (grads, grad_in) = spec.backward(&params, &pass, &Tensor::zeros(&[2, 1])).unwrap();
    assert_eq!(grads.len(), params.params.len());
    assert_eq!(grads.max_abs(), 0.0);
    assert!(grad_in.data().iter().all(|&v| v == 0.0));
    // running statistics are not trainable
    assert!(grads.iter().all(|(k, _)| !params.buffers.contains_key(k)));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let spec = NetworkSpec::paired_generator(1, 16, 0.0);
    let params = spec.init_params(&mut rng(0), false).unwrap();
    let x = Tensor::zeros(&[1, 3, 17, 16]);
    let err = spec.forward(&params, &x, Mode::Eval, &mut rng(0)).err().expect("shape error");
    assert_eq!(err.category(), "shape");
}

fn trained_like(spec: &NetworkSpec) -> ModelParams {
    let mut params = spec.init_params(&mut rng(21), false).unwrap();
    let mut r = rng(22);
    for t in params.buffers.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(0.1..0.5));
    }
    params
}

#[test]
fn model_file_round_trip_is_exact() {
    let spec = NetworkSpec::paired_generator(3, 16, 0.5);
    let params = trained_like(&spec);
    let mut bytes = Vec::new();
    write_model(&spec, &params, &mut bytes).unwrap();
    let (spec2, params2) = read_model(&mut bytes.as_slice()).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(params2, params);

    let mut again = Vec::new();
    write_model(&spec2, &params2, &mut again).unwrap();
    assert_eq!(bytes, again);

    let x = random_input(vec![2, 3, 16, 16], 0.0, 1.0, 23);
    let a = spec.forward(&params, &x, Mode::Eval, &mut rng(0)).unwrap().output;
    let b = spec2.forward(&params2, &x, Mode::Eval, &mut rng(0)).unwrap().output;
    assert_eq!(a, b);
}

#[test]
fn model_file_rejects_damage() {
    let spec = NetworkSpec::paired_generator(1, 16, 0.0);
    let params = trained_like(&spec);
    let mut bytes = Vec::new();
    write_model(&spec, &params, &mut bytes).unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        let err = read_model(&mut &bytes[..cut]).unwrap_err();
        assert_eq!(err.category(), "model", "cut at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(read_model(&mut bad_magic.as_slice()).is_err());
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(read_model(&mut bad_version.as_slice()).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(read_model(&mut trailing.as_slice()).is_err());
}

#[test]
fn writing_params_that_do_not_fit_the_architecture_fails() {
    let spec = NetworkSpec::paired_generator(1, 16, 0.0);
    let mut params = spec.init_params(&mut rng(0), false).unwrap();
    params.params.remove("head.0.bias");
    assert!(write_model(&spec, &params, &mut Vec::new()).is_err());
}

#[test]
fn architecture_text_round_trips() {
    for spec in [
        NetworkSpec::paired_generator(5, 256, 0.5),
        NetworkSpec::unpaired_generator(64, 0.15),
        NetworkSpec::discriminator(64, 0.12),
    ] {
        assert_eq!(NetworkSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(spec.validate().is_ok());
    }
}

#[test]
fn paired_generator_parameter_layout() {
    let spec = NetworkSpec::paired_generator(5, 64, 0.5);
    let params = spec.init_params(&mut rng(0), true).unwrap();
    // per branch: 3 convs, 3 batchnorms, 2 linears, each with weight and bias
    // (batchnorm: gamma, beta); plus the head linear
    assert_eq!(params.params.len(), 5 * (3 * 2 + 3 * 2 + 2 * 2) + 2);
    assert_eq!(params.buffers.len(), 5 * 3 * 2);
    assert_eq!(params.params["head.0.weight"].shape(), &[30, 160]);
    assert!(params.params["head.0.weight"].data().iter().all(|&v| v == 0.0));
    assert!(params.params["b4.3.weight"].data().iter().any(|&v| v != 0.0));
}
