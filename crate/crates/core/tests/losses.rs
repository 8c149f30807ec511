mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tubeseg::losses::*;
use tubeseg::tensor::{softmax_channels, Tensor};

fn random_onehot(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut t = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for p in 0..h * w {
            let k = r.random_range(0..c);
            t.data_mut()[(b * c + k) * h * w + p] = 1.0;
        }
    }
    t
}

fn random_probs(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    softmax_channels(&random_tensor(&[n, c, h, w], &mut rng(seed)).map(|v| 2.0 * v)).unwrap()
}

type LossFn = fn(&Tensor<f64>, &Tensor<f64>) -> (f64, Vec<f64>);

fn all_losses() -> Vec<(&'static str, LossFn)> {
    vec![
        ("wce", |p, y| weighted_ce(p, y, &class_weights(&pixel_counts(y).unwrap()).unwrap().weights).unwrap()),
        ("dice", |p, y| dice_loss(p, y).unwrap()),
        ("dice_wce", |p, y| dice_wce(p, y, &class_weights(&pixel_counts(y).unwrap()).unwrap().weights).unwrap()),
        ("tversky", |p, y| tversky(p, y, 0.3, 0.7, TverskyForm::Doubled).unwrap()),
        ("tversky_conv", |p, y| tversky(p, y, 0.3, 0.7, TverskyForm::Conventional).unwrap()),
    ]
}

#[test]
fn loss_gradients_match_finite_differences() {
    for classes in [2, 3] {
        let logits = random_tensor(&[2, classes, 4, 5], &mut rng(40 + classes as u64));
        let y = random_onehot(2, classes, 4, 5, 50);
        let weights = class_weights(&pixel_counts(&y).unwrap()).unwrap();
        for kind in [LossKind::DiceWce, LossKind::Tversky] {
            for form in [TverskyForm::Doubled, TverskyForm::Conventional] {
                for weighting in [Weighting::PerBatch, Weighting::Fixed(weights.clone())] {
                    let cfg = LossConfig { kind, tversky_form: form, weighting, ..LossConfig::default() };
                    let err = gradcheck(
                        std::slice::from_ref(&logits),
                        &|g, v| {
                            let p = g.softmax(v[0]).unwrap();
                            loss_on_graph(g, p, &y, &cfg).unwrap()
                        },
                        None,
                        0,
                    );
                    assert!(err < 1e-4, "{kind:?} {form:?}: {err}");
                }
            }
        }
        for (name, err) in [
            (
                "wce",
                gradcheck(
                    std::slice::from_ref(&logits),
                    &|g, v| {
                        let p = g.softmax(v[0]).unwrap();
                        weighted_ce_on_graph(g, p, &y, &weights.weights).unwrap()
                    },
                    None,
                    0,
                ),
            ),
            (
                "dice",
                gradcheck(
                    std::slice::from_ref(&logits),
                    &|g, v| {
                        let p = g.softmax(v[0]).unwrap();
                        dice_on_graph(g, p, &y).unwrap()
                    },
                    None,
                    0,
                ),
            ),
        ] {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

/// Applies the same pixel permutation to every (sample, channel) plane.
fn permute_pixels(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (n, c, h, w) = t.dims4().unwrap();
    let hw = h * w;
    let mut out = t.clone();
    for plane in 0..n * c {
        for (dst, &src) in perm.iter().enumerate() {
            out.data_mut()[plane * hw + dst] = t.data()[plane * hw + src];
        }
    }
    out
}

#[test]
fn losses_are_permutation_invariant() {
    for seed in 0..5 {
        let p = random_probs(2, 3, 5, 6, seed);
        let y = random_onehot(2, 3, 5, 6, seed + 100);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut rng(seed + 200));
        let (pp, yp) = (permute_pixels(&p, &perm), permute_pixels(&y, &perm));
        for (name, f) in all_losses() {
            let (a, b) = (f(&p, &y).0, f(&pp, &yp).0);
            assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn moving_mass_to_the_true_class_never_increases_loss() {
    let mut r = rng(7);
    for seed in 0..40 {
        let (c, hw) = (3, 12);
        let p = random_probs(1, c, 3, 4, seed);
        let y = random_onehot(1, c, 3, 4, seed + 1000);
        let pixel = r.random_range(0..hw);
        let truth = (0..c).find(|&k| y.data()[k * hw + pixel] == 1.0).unwrap();
        let donor = (truth + 1 + r.random_range(0..c - 1)) % c;
        let delta = p.data()[donor * hw + pixel] * r.random_range(0.05..1.0);
        let mut q = p.clone();
        q.data_mut()[donor * hw + pixel] -= delta;
        q.data_mut()[truth * hw + pixel] += delta;
        for (name, f) in all_losses() {
            if name.starts_with("wce") || name == "dice_wce" {
                continue;
            }
            let (before, after) = (f(&p, &y).0, f(&q, &y).0);
            assert!(after <= before + 1e-12, "{name}: {before} -> {after}");
        }
    }
}

#[test]
fn conventional_tversky_at_half_equals_dice_on_hard_predictions() {
    for seed in 0..10 {
        let p = random_onehot(2, 3, 6, 6, seed);
        let y = random_onehot(2, 3, 6, 6, seed + 50);
        let tv = tversky(&p, &y, 0.5, 0.5, TverskyForm::Conventional).unwrap().0;
        let dc = dice_loss(&p, &y).unwrap().0;
        assert!((tv - dc).abs() < 1e-6, "{tv} vs {dc}");
        let doubled = tversky(&p, &y, 0.5, 0.5, TverskyForm::Doubled).unwrap().0;
        assert!((doubled - 2.0 * dc).abs() < 1e-6);
    }
}

#[test]
fn loss_ranges() {
    for seed in 0..10 {
        let p = random_probs(2, 2, 4, 4, seed);
        let y = random_onehot(2, 2, 4, 4, seed + 9);
        let d = dice_loss(&p, &y).unwrap().0;
        assert!((-1.0..=0.0).contains(&d));
        let t = tversky(&p, &y, 0.3, 0.7, TverskyForm::Doubled).unwrap().0;
        assert!((-2.0..=0.0).contains(&t));
        let w = class_weights(&pixel_counts(&y).unwrap()).unwrap();
        assert!(weighted_ce(&p, &y, &w.weights).unwrap().0 >= 0.0);
    }
}

proptest! {
    #[test]
    fn class_weights_balance_every_present_class(counts in prop::collection::vec(0u64..10_000, 2..4)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let w = class_weights(&counts).unwrap();
        let total: u64 = counts.iter().sum();
        for (wc, &xc) in w.weights.iter().zip(&counts) {
            if xc > 0 {
                let lhs = wc * counts.len() as f64 * xc as f64;
                prop_assert!((lhs - total as f64).abs() <= 1e-9 * total as f64);
            } else {
                prop_assert_eq!(*wc, 0.0);
            }
        }
    }
}
