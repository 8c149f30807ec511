mod common;

use common::*;
use tubeseg::tensor::{BnMode, BnStats, Graph, Tensor};
use tubeseg::Error;

const TOL: f64 = 1e-4;

#[test]
fn conv_box_sum_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    assert_eq!(v.at4(0, 0, 1, 1), 9.0);
    for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(v.at4(0, 0, yy, xx), 4.0);
    }
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = random_tensor(&[2, 3, 5, 6], &mut rng(1));
    let mut w = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        w[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::new(&[3, 3, 3, 3], w).unwrap());
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(2);
    let x = random_tensor(&[2, 3, 8, 8], &mut r);
    let w = random_tensor(&[4, 3, 3, 3], &mut r);
    let b = random_tensor(&[4], &mut r);
    let mut g = Graph::<f64>::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 4, 4]);
    let oracle = naive_conv(&x, &w, Some(b.data()), 2, 1);
    assert!(max_abs_diff(g.value(y).data(), oracle.data()) < 1e-12);

    // 7x7 stride-2 stem shape and 1x1 pointwise path
    let x = random_tensor(&[1, 3, 16, 16], &mut r);
    for (k, s, p) in [(7, 2, 3), (1, 1, 0), (1, 2, 0), (3, 1, 0)] {
        let w = random_tensor(&[5, 3, k, k], &mut r);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, s, p).unwrap();
        let oracle = naive_conv(&x, &w, None, s, p);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert!(max_abs_diff(g.value(y).data(), oracle.data()) < 1e-12, "k={k} s={s} p={p}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap());
    let y = g.maxpool2d(x, 2, 2, 0).unwrap();
    assert_eq!(g.value(y).data(), &[6.0, 8.0, 14.0, 16.0]);

    let c = g.constant(Tensor::full(&[1, 2, 5, 5], 3.5));
    let y = g.maxpool2d(c, 3, 2, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.5));

    let x = random_tensor(&[1, 2, 9, 9], &mut rng(3));
    let xv = g.constant(x.clone());
    let y = g.maxpool2d(xv, 3, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 5, 5]);
    assert_eq!(g.value(y).data(), naive_maxpool(&x, 3, 2, 1).data());
}

#[test]
fn maxpool_ties_route_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.maxpool2d(x, 2, 2, 0).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = g.nearest_upsample(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0; 4]);

    let y1 = g.nearest_upsample(x, 1).unwrap();
    assert_eq!(g.value(y1), g.value(x));
}

fn bn_forward(x: &Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(Tensor::full(&[c], gamma));
    let bv = g.constant(Tensor::full(&[c], beta));
    let mut stats = BnStats::new(c);
    let y = g.batchnorm2d(xv, gv, bv, &mut stats, BnMode::Train, 1e-5, 0.1).unwrap();
    assert_eq!(stats.batches, 1);
    g.value(y).clone()
}

#[test]
fn batchnorm_normalizes_per_channel() {
    let x = random_tensor(&[3, 2, 4, 5], &mut rng(4)).map(|v| 3.0 * v + 7.0);
    let y = bn_forward(&x, 1.0, 0.0);
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..4).flat_map(move |yy| (0..5).map(move |xx| (n, yy, xx))))
            .map(|(n, yy, xx)| y.at4(n, ch, yy, xx))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let constant = Tensor::full(&[2, 1, 3, 3], 4.2);
    assert!(bn_forward(&constant, 1.0, 5.0).data().iter().all(|&v| (v - 5.0).abs() < 1e-9));
}

#[test]
fn batchnorm_eval_needs_statistics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
    let ga = g.constant(Tensor::ones(&[2]));
    let be = g.constant(Tensor::zeros(&[2]));
    let mut stats = BnStats::new(2);
    let err = g.batchnorm2d(x, ga, be, &mut stats, BnMode::Eval, 1e-5, 0.1).unwrap_err();
    assert!(matches!(err, Error::UninitializedStats(_)));
    let mut single = BnStats::new(2);
    let one = g.constant(Tensor::ones(&[1, 2, 1, 1]));
    assert!(g.batchnorm2d(one, ga, be, &mut single, BnMode::Train, 1e-5, 0.1).is_err());
}

#[test]
fn batchnorm_running_stats_follow_ema() {
    let x = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let ga = g.constant(Tensor::ones(&[1]));
    let be = g.constant(Tensor::zeros(&[1]));
    let mut stats = BnStats::new(1);
    g.batchnorm2d(xv, ga, be, &mut stats, BnMode::Train, 1e-5, 0.1).unwrap();
    // batch mean 4, unbiased variance 20/3
    assert!((stats.mean[0] - 0.4).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::zeros(&[1, 2, 2, 2]));
    let s = g.softmax(z).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    let sg = g.sigmoid(z);
    assert!(g.value(sg).data().iter().all(|&v| v == 0.5));

    let x = g.param(Tensor::from_f64(&[4], &[2.0, -1.0, 0.0, 0.5]).unwrap());
    let r = g.relu(x);
    let l = g.sum(r);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1., 2., 3., 4., 7., 7., 7., 7.]).unwrap());
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 2, 1, 1]);
    assert_eq!(g.value(p).data(), &[2.5, 7.0]);
}

#[test]
fn elementwise_examples() {
    let mut r = rng(5);
    let a = random_tensor(&[1, 2, 4, 4], &mut r);
    let mut g = Graph::<f64>::new();
    let av = g.constant(a.clone());
    let zero = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let s = g.add(av, zero).unwrap();
    assert_eq!(g.value(s), &a);
    let ones = g.constant(Tensor::ones(&[1, 2, 1, 1]));
    let m = g.mul(av, ones).unwrap();
    assert_eq!(g.value(m), &a);
    let b = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let c = g.concat_channels(av, b).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 4, 4]);

    let bad = g.constant(Tensor::zeros(&[1, 2, 2, 4]));
    assert!(g.add(av, bad).is_err());
    assert!(g.mul(av, bad).is_err());
    assert!(g.concat_channels(av, bad).is_err());
}

#[test]
fn backward_examples() {
    let x0 = random_tensor(&[3, 4], &mut rng(6));
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(x0.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
    assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    let x0 = random_tensor(&[2, 3], &mut rng(7));
    let grad_of = |twice: bool| {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let y = if twice { g.add(x, x).unwrap() } else { g.scale(x, 2.0) };
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    assert_eq!(grad_of(true), grad_of(false));
}

#[test]
fn gradcheck_conv() {
    let mut r = rng(10);
    let inputs =
        [random_tensor(&[2, 3, 6, 6], &mut r), random_tensor(&[4, 3, 3, 3], &mut r), random_tensor(&[4], &mut r)];
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let build = move |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            project(g, y, 11)
        };
        assert!(gradcheck(&inputs, &build, None, 0) < TOL);
    }
    let pointwise = [random_tensor(&[2, 3, 4, 4], &mut r), random_tensor(&[2, 3, 1, 1], &mut r)];
    let build = |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
        let y = g.conv2d(v[0], v[1], None, 1, 0).unwrap();
        project(g, y, 12)
    };
    assert!(gradcheck(&pointwise, &build, None, 0) < TOL);
}

#[test]
fn gradcheck_pooling_and_upsample() {
    let mut r = rng(13);
    let inputs = [random_tensor(&[1, 2, 7, 7], &mut r)];
    let build = |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
        let y = g.maxpool2d(v[0], 3, 2, 1).unwrap();
        project(g, y, 14)
    };
    assert!(gradcheck(&inputs, &build, None, 0) < TOL);
    let build = |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
        let y = g.nearest_upsample(v[0], 2).unwrap();
        project(g, y, 15)
    };
    assert!(gradcheck(&inputs, &build, None, 0) < TOL);
    let build = |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
        let y = g.global_avg_pool(v[0]).unwrap();
        project(g, y, 16)
    };
    assert!(gradcheck(&inputs, &build, None, 0) < TOL);
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let mut r = rng(17);
    let inputs = [random_tensor(&[2, 3, 3, 3], &mut r), random_tensor(&[3], &mut r), random_tensor(&[3], &mut r)];
    for mode in [BnMode::Train, BnMode::Eval] {
        let build = move |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
            let mut stats = BnStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0], batches: 1 };
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, mode, 1e-5, 0.1).unwrap();
            project(g, y, 18)
        };
        assert!(gradcheck(&inputs, &build, None, 0) < TOL, "{mode:?}");
    }
}

#[test]
fn gradcheck_activations() {
    let mut r = rng(19);
    // keep relu inputs away from the kink at 0
    let x = random_tensor(&[2, 3, 3, 3], &mut r).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let inputs = [x];
    for which in 0..3 {
        let build = move |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
            let y = match which {
                0 => g.relu(v[0]),
                1 => g.sigmoid(v[0]),
                _ => g.softmax(v[0]).unwrap(),
            };
            project(g, y, 20)
        };
        assert!(gradcheck(&inputs, &build, None, 0) < TOL, "activation {which}");
    }
}

#[test]
fn gradcheck_broadcast_and_concat() {
    let mut r = rng(21);
    let inputs = [
        random_tensor(&[2, 3, 4, 4], &mut r),
        random_tensor(&[2, 3, 1, 1], &mut r),
        random_tensor(&[2, 1, 4, 4], &mut r),
        random_tensor(&[2, 2, 4, 4], &mut r),
    ];
    let build = |g: &mut tubeseg::Graph<f64>, v: &[tubeseg::Var]| {
        let a = g.mul(v[0], v[1]).unwrap();
        let b = g.mul(v[0], v[2]).unwrap();
        let s = g.add(a, b).unwrap();
        let c = g.concat_channels(s, v[3]).unwrap();
        let sq = g.mul(c, c).unwrap();
        project(g, sq, 22)
    };
    assert!(gradcheck(&inputs, &build, None, 0) < TOL);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(23);
    let x = random_tensor(&[2, 3, 8, 8], &mut r).cast::<f32>();
    let w = random_tensor(&[4, 3, 3, 3], &mut r).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let s = g.softmax(y).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}
