//! Shared test oracles: central finite differences and naive reference kernels.
#![allow(dead_code)]

pub mod watershed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeseg::nn::{network_forward, Forward, ForwardOutput, Network, NetworkConfig, ParameterStore};
use tubeseg::tensor::{BnMode, Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar from the inputs; called once per perturbation.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Projects a tensor-valued output onto a fixed random direction so every
/// output element contributes to the checked scalar.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let dir = random_tensor(&shape, &mut rng(seed));
    let d = g.constant(dir);
    let p = g.mul(out, d).unwrap();
    g.sum(p)
}

/// Worst `|analytic - numeric| / max(1, |numeric|)` over the sampled
/// coordinates (all coordinates when `samples` is `None`).
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Builder<'_>, samples: Option<usize>, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    let mut coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k))).collect();
    if let Some(n) = samples {
        let mut r = rng(seed);
        let picked: Vec<_> = (0..n).map(|_| coords[r.random_range(0..coords.len())]).collect();
        coords = picked;
    }
    let mut worst = 0.0f64;
    for (i, k) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[k] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[k] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let err = (analytic[i][k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Direct six-loop cross-correlation.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b_ in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(b_, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((b_ * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Window-scan max pooling.
pub fn naive_maxpool(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for y in 0..h {
                        for xx in 0..w {
                            let (py, px) = (y + pad, xx + pad);
                            if py >= oy * stride && py < oy * stride + k && px >= ox * stride && px < ox * stride + k {
                                best = best.max(x.at4(b, ch, y, xx));
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// AJI maximized over every partial one-to-one matching of ground truth to
/// predictions. Exponential; meant for maps with a handful of objects.
pub fn exhaustive_aji(gt: &[u32], pred: &[u32]) -> f64 {
    let ng = gt.iter().copied().max().unwrap_or(0) as usize;
    let np = pred.iter().copied().max().unwrap_or(0) as usize;
    let mut ga = vec![0u64; ng + 1];
    let mut pa = vec![0u64; np + 1];
    let mut inter = vec![vec![0u64; np + 1]; ng + 1];
    for (&g, &p) in gt.iter().zip(pred) {
        ga[g as usize] += 1;
        pa[p as usize] += 1;
        inter[g as usize][p as usize] += 1;
    }
    if ng == 0 && np == 0 {
        return 1.0;
    }
    fn walk(
        g: usize,
        ng: usize,
        np: usize,
        used: &mut Vec<bool>,
        acc: (u64, u64),
        t: &(Vec<u64>, Vec<u64>, Vec<Vec<u64>>),
        best: &mut f64,
    ) {
        let (ga, pa, inter) = t;
        if g > ng {
            let unused: u64 = (1..=np).filter(|&p| !used[p]).map(|p| pa[p]).sum();
            let den = acc.1 + unused;
            let v = if den == 0 { 1.0 } else { acc.0 as f64 / den as f64 };
            if v > *best {
                *best = v;
            }
            return;
        }
        walk(g + 1, ng, np, used, (acc.0, acc.1 + ga[g]), t, best);
        for p in 1..=np {
            if !used[p] {
                used[p] = true;
                let n = inter[g][p];
                walk(g + 1, ng, np, used, (acc.0 + n, acc.1 + ga[g] + pa[p] - n), t, best);
                used[p] = false;
            }
        }
    }
    let mut best = 0.0;
    let table = (ga, pa, inter);
    walk(1, ng, np, &mut vec![false; np + 1], (0, 0), &table, &mut best);
    best
}

/// Dice loss of the whole network on a fixed batch.
pub fn network_loss(
    g: &mut Graph<f64>,
    store: &ParameterStore<f64>,
    cfg: &NetworkConfig,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    mode: BnMode,
) -> (Var, ForwardOutput<f64>) {
    let xv = g.constant(x.clone());
    let mut f = Forward::new(g, store, mode, true);
    let logits = network_forward(&mut f, xv, cfg).unwrap();
    let out = f.finish();
    let probs = g.softmax(logits).unwrap();
    let l = tubeseg::losses::dice_on_graph(g, probs, target).unwrap();
    (l, out)
}

pub fn random_target(n: usize, classes: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut t = Tensor::zeros(&[n, classes, h, w]);
    for b in 0..n {
        for p in 0..h * w {
            let c = r.random_range(0..classes);
            t.data_mut()[(b * classes + c) * h * w + p] = 1.0;
        }
    }
    t
}

/// Central differences on sampled parameters of the whole network.
pub fn network_gradcheck(cfg: &NetworkConfig, x: &Tensor<f64>, mode: BnMode, samples: usize, seed: u64) -> f64 {
    let mut net = Network::<f64>::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed + 100);
    if mode == BnMode::Eval {
        for (name, e) in net.params.iter_mut() {
            if name.ends_with(".running_mean") {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
            } else if name.ends_with(".running_var") {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
            } else if name.ends_with(".batches") {
                e.tensor.data_mut()[0] = 1.0;
            }
        }
    }
    let target = random_target(x.shape()[0], cfg.num_classes, x.shape()[2], x.shape()[3], seed + 1);
    let mut g = Graph::new();
    let (l, out) = network_loss(&mut g, &net.params, cfg, x, &target, mode);
    g.backward(l).unwrap();
    let grads = out.gradients(&g, &net.params);

    let names: Vec<String> = net.params.learnable().map(|(k, _)| k.to_string()).collect();
    let loss_at = |store: &ParameterStore<f64>| {
        let mut g = Graph::new();
        let (l, _) = network_loss(&mut g, store, cfg, x, &target, mode);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let name = &names[r.random_range(0..names.len())];
        let k = r.random_range(0..net.params.get(name).unwrap().numel());
        let mut plus = net.params.clone();
        plus.get_mut(name).unwrap().data_mut()[k] += FD_STEP;
        let mut minus = net.params.clone();
        minus.get_mut(name).unwrap().data_mut()[k] -= FD_STEP;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
        let err = (grads[name][k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
