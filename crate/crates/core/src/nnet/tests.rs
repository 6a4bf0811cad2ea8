use super::*;

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest relative error between analytic gradients and central finite
/// differences (h = 1e-4), computed in f64 on a clone of the network so
/// dropout masks repeat exactly.
fn max_grad_error(net: &Network<f64>, x: &[f64], y: &[f64], train_mode: bool) -> f64 {
    let (_, grads) = net.clone().loss_and_grads(x, y, train_mode).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for li in 0..net.params.len() {
        for which in 0..2 {
            let len = if which == 0 { net.params[li].w.len() } else { net.params[li].b.len() };
            for k in 0..len {
                let eval = |delta: f64| {
                    let mut n2 = net.clone();
                    let p = &mut n2.params[li];
                    if which == 0 { p.w[k] += delta } else { p.b[k] += delta }
                    n2.loss_and_grads(x, y, train_mode).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if which == 0 { grads[li].w[k] } else { grads[li].b[k] };
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    worst
}

#[test]
fn dense_identity_passes_input_through() {
    let mut net = Network::<f32>::new(vec![3], vec![LayerSpec::Dense { input: 3, output: 3 }], 0).unwrap();
    net.params[0].w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(net.predict(&[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
}

#[test]
fn relu_clamps_negatives() {
    let net = Network::<f32>::new(vec![2], vec![LayerSpec::Relu], 0).unwrap();
    assert_eq!(net.predict(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
}

#[test]
fn conv_box_filter() {
    let mut net = Network::<f32>::new(
        vec![1, 5, 5],
        vec![LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 3, stride: 1 }],
        0,
    )
    .unwrap();
    net.params[0].w = vec![1.0; 9];
    assert_eq!(net.predict(&[1.0; 25]).unwrap(), vec![9.0; 9]);
}

#[test]
fn maxpool_and_stride_shapes() {
    let net = Network::<f32>::new(
        vec![2, 9, 9],
        vec![
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2 },
            LayerSpec::Maxpool2d { kernel: 2 },
        ],
        0,
    )
    .unwrap();
    assert_eq!(net.shapes[1], vec![3, 4, 4]);
    assert_eq!(net.output_len(), 3 * 2 * 2);
    assert!(Network::<f32>::new(vec![2, 9, 9], vec![LayerSpec::Dense { input: 5, output: 1 }], 0).is_err());
    assert!(Network::<f32>::new(vec![4], vec![LayerSpec::Dropout { p: 1.0 }], 0).is_err());
}

#[test]
fn zero_net_has_zero_loss_and_grads() {
    let mut net = Network::<f64>::new(
        vec![3],
        vec![LayerSpec::Dense { input: 3, output: 4 }, LayerSpec::Relu, LayerSpec::Dense { input: 4, output: 2 }],
        1,
    )
    .unwrap();
    for p in &mut net.params {
        p.w.fill(0.0);
    }
    let (loss, g) = net.backward(&[0.0; 3], &[0.0; 2]).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|p| p.w.iter().chain(&p.b).all(|&v| v == 0.0)));
}

#[test]
fn one_parameter_hand_calculus() {
    let mut net = Network::<f64>::new(vec![1], vec![LayerSpec::Dense { input: 1, output: 1 }], 0).unwrap();
    net.params[0].w = vec![1.0];
    let (loss, g) = net.backward(&[2.0], &[0.0]).unwrap();
    assert_eq!(loss, 4.0);
    assert_eq!(g[0].w, vec![8.0]);
}

#[test]
fn gradient_check_every_layer_kind() {
    let cases: Vec<(Vec<usize>, Vec<LayerSpec>)> = vec![
        (
            vec![5],
            vec![
                LayerSpec::Dense { input: 5, output: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 6, output: 3 },
                LayerSpec::Linear,
            ],
        ),
        (
            vec![2, 10, 10],
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 2, stride: 2 },
                LayerSpec::Maxpool2d { kernel: 2 },
                LayerSpec::Dense { input: 2 * 2 * 2, output: 2 },
            ],
        ),
        (
            vec![4],
            vec![
                LayerSpec::Dense { input: 4, output: 8 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Dense { input: 8, output: 2 },
            ],
        ),
    ];
    for (ci, (shape, layers)) in cases.into_iter().enumerate() {
        let net = Network::<f64>::new(shape.clone(), layers, 10 + ci as u64).unwrap();
        let batch = 3;
        let x = rand_vec(batch * net.input_len(), 100 + ci as u64);
        let y = rand_vec(batch * net.output_len(), 200 + ci as u64);
        for train in [false, true] {
            let err = max_grad_error(&net, &x, &y, train);
            assert!(err < 1e-4, "case {ci} train={train}: relative error {err}");
        }
    }
}

#[test]
fn inference_is_pure() {
    let net = Network::<f32>::new(
        vec![4],
        vec![LayerSpec::Dense { input: 4, output: 4 }, LayerSpec::Dropout { p: 0.5 }],
        3,
    )
    .unwrap();
    let x = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    let mut m = net.clone();
    assert_eq!(m.forward(&x, false).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn dropout_preserves_expectation() {
    let mut net = Network::<f32>::new(vec![1], vec![LayerSpec::Dropout { p: 0.5 }], 4).unwrap();
    let n = 10_000;
    let out = net.forward(&vec![1.0; n], true).unwrap();
    let mean = out.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn adam_first_step_is_sign_sized() {
    let mut net = Network::<f64>::new(vec![1], vec![LayerSpec::Dense { input: 1, output: 1 }], 0).unwrap();
    net.params[0].w = vec![1.0];
    let mut st = AdamState::new(&net);
    let g = vec![Params { w: vec![0.3], b: vec![0.0] }];
    st.step(&mut net, &g);
    let delta = net.params[0].w[0] - 1.0;
    assert!((delta - (-0.001 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
    assert_eq!(net.params[0].b[0], 0.0);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut net = Network::<f64>::new(vec![2], vec![LayerSpec::Dense { input: 2, output: 1 }], 5).unwrap();
    let before = net.params.clone();
    let mut st = AdamState::new(&net);
    let zero = net.zero_grads();
    st.step(&mut net, &zero);
    assert_eq!(net.params, before);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_descends_quadratic() {
    // loss ½w², gradient w; reference update written out by hand
    let mut net = Network::<f64>::new(vec![1], vec![LayerSpec::Dense { input: 1, output: 1 }], 0).unwrap();
    net.params[0].w = vec![1.0];
    let mut st = AdamState::with_lr(&net, 0.1);
    let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 1.0f64);
    let mut last = 0.5;
    for t in 1..=2 {
        let w = net.params[0].w[0];
        let g = vec![Params { w: vec![w], b: vec![0.0] }];
        st.step(&mut net, &g);
        m = 0.9 * m + 0.1 * w_ref;
        v = 0.999 * v + 0.001 * w_ref * w_ref;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
        let w = net.params[0].w[0];
        assert!((w - w_ref).abs() < 1e-12);
        let loss = 0.5 * w * w;
        assert!(loss < last);
        last = loss;
    }
}

#[test]
fn learns_linear_map() {
    let mut net = Network::<f32>::new(vec![1], vec![LayerSpec::Dense { input: 1, output: 1 }], 7).unwrap();
    let xs: Vec<f32> = (0..20).map(|i| i as f32 / 10.0 - 1.0).collect();
    let ys: Vec<f32> = xs.iter().map(|x| 3.0 * x).collect();
    let mut st = AdamState::with_lr(&net, 0.05);
    net.train(&xs, &ys, 200, 4, &mut st).unwrap();
    assert!((net.params[0].w[0] - 3.0).abs() < 1e-2, "w = {}", net.params[0].w[0]);
}

#[test]
fn zero_epochs_changes_nothing_and_seed_repeats() {
    let build = || {
        Network::<f32>::new(
            vec![3],
            vec![LayerSpec::Dense { input: 3, output: 5 }, LayerSpec::Relu, LayerSpec::Dropout { p: 0.5 }, LayerSpec::Dense { input: 5, output: 2 }],
            11,
        )
        .unwrap()
    };
    let x: Vec<f32> = (0..30).map(|i| (i as f32 * 0.7).sin()).collect();
    let y: Vec<f32> = (0..20).map(|i| (i as f32 * 0.3).cos()).collect();

    let mut a = build();
    let before = a.params.clone();
    let mut st = AdamState::new(&a);
    assert!(a.train(&x, &y, 0, 4, &mut st).unwrap().is_empty());
    assert_eq!(a.params, before);

    let mut b = build();
    let mut c = build();
    let tb = b.train(&x, &y, 5, 4, &mut AdamState::new(&b.clone())).unwrap();
    let tc = c.train(&x, &y, 5, 4, &mut AdamState::new(&c.clone())).unwrap();
    assert_eq!(tb, tc);
    assert_eq!(b.params, c.params);
}

#[test]
fn training_rejects_bad_data() {
    let mut net = Network::<f32>::new(vec![2], vec![LayerSpec::Dense { input: 2, output: 1 }], 0).unwrap();
    let mut st = AdamState::new(&net);
    assert!(net.train(&[], &[], 1, 1, &mut st).is_err());
    assert!(net.train(&[1.0, 2.0], &[1.0, 2.0], 1, 1, &mut st).is_err());
    assert!(net.predict(&[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn model_file_round_trip() {
    let net = Network::<f32>::new(
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d { kernel: 2 },
            LayerSpec::Dense { input: 8, output: 2 },
            LayerSpec::Linear,
        ],
        9,
    )
    .unwrap();
    let bytes = encode_network(&net).unwrap();
    assert_eq!(&bytes[..8], b"RSTVNNET");
    let back = decode_network(&bytes).unwrap();
    assert_eq!(back.params, net.params);
    assert_eq!(back.layers, net.layers);
    assert_eq!(encode_network(&back).unwrap(), bytes);
    assert!(decode_network(&bytes[..bytes.len() - 4]).is_err());
}
