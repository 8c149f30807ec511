mod common;

use common::rng;
use common::watershed::*;
use rand::Rng;
use tubeseg::postprocess::*;
use tubeseg::tensor::Tensor;
use tubeseg::{Error, LabelMask};

fn to_mask(fg: &[bool], w: usize, h: usize) -> LabelMask {
    LabelMask::new(w, h, fg.iter().map(|&f| f as u8).collect()).unwrap()
}

/// Nearest background by exhaustive scan; outside the image is background.
fn brute_edt(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    (0..w * h)
        .map(|i| {
            if !fg[i] {
                return 0.0;
            }
            let (x, y) = (i % w, i / w);
            let mut best = [x + 1, y + 1, w - x, h - y].into_iter().min().unwrap() as f64;
            for j in 0..w * h {
                if !fg[j] {
                    let (bx, by) = ((j % w) as f64, (j / w) as f64);
                    best = best.min(((bx - x as f64).powi(2) + (by - y as f64).powi(2)).sqrt());
                }
            }
            best
        })
        .collect()
}

#[test]
fn argmax_examples() {
    let t = Tensor::<f64>::from_f64(&[1, 2, 1, 3], &[0.9, 0.5, 0.2, 0.1, 0.5, 0.8]).unwrap();
    assert_eq!(argmax_mask(&t).unwrap()[0].data(), &[0, 0, 1]);
    let t = Tensor::<f64>::from_f64(&[1, 3, 1, 3], &[0.8, 0.1, 0.1, 0.1, 0.7, 0.2, 0.1, 0.2, 0.7]).unwrap();
    assert_eq!(argmax_mask(&t).unwrap()[0].data(), &[0, 1, 2]);
}

#[test]
fn connected_component_examples() {
    let (w, h) = (8, 6);
    let mut m = LabelMask::filled(w, h, 0);
    for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1), (5, 3), (6, 3), (5, 4), (6, 4)] {
        m.set(x, y, 1);
    }
    assert_eq!(connected_components(&m, 1).count(), 2);
    assert_eq!(connected_components(&LabelMask::filled(w, h, 0), 1).count(), 0);
    let mut diag = LabelMask::filled(w, h, 0);
    diag.set(2, 2, 1);
    diag.set(3, 3, 1);
    assert_eq!(connected_components(&diag, 1).count(), 1);
}

#[test]
fn fill_holes_keeps_edge_regions() {
    let w = 9;
    let ring = disc_mask(w, w, &[(4.0, 4.0, 4.0)]);
    let inner = disc_mask(w, w, &[(4.0, 4.0, 1.5)]);
    let annulus: Vec<bool> = ring.iter().zip(&inner).map(|(&a, &b)| a && !b).collect();
    assert_eq!(fill_holes(&annulus, w, w), ring);
    let open = disc_mask(w, w, &[(0.0, 0.0, 3.0)]);
    assert_eq!(fill_holes(&open, w, w), open);
}

#[test]
fn distance_transform_matches_brute_force() {
    let mut r = rng(1);
    for trial in 0..30 {
        let (w, h) = (r.random_range(1..24), r.random_range(1..24));
        let density = [0.3, 0.7, 0.95, 1.0][trial % 4];
        let fg: Vec<bool> = (0..w * h).map(|_| r.random::<f64>() < density).collect();
        let fast = distance_transform(&fg, w, h);
        let slow = brute_edt(&fg, w, h);
        for (a, b) in fast.values.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
    let single = disc_mask(5, 5, &[(2.0, 2.0, 0.5)]);
    assert_eq!(distance_transform(&single, 5, 5).get(2, 2), 1.0);
    let square: Vec<bool> = (0..81).map(|i| (1..8).contains(&(i % 9)) && (1..8).contains(&(i / 9))).collect();
    let d = distance_transform(&square, 9, 9);
    assert_eq!(d.get(4, 4), 4.0);
    assert_eq!(d.get(0, 0), 0.0);
}

#[test]
fn watershed_single_seed_floods_its_blob() {
    let fg = disc_mask(20, 20, &[(8.0, 9.0, 6.0)]);
    let s = distance_transform(&fg, 20, 20);
    let out = seeded_watershed(&s, &[Seed { x: 8, y: 9 }], &fg).unwrap();
    assert_eq!(out.count(), 1);
    assert_eq!(out.foreground(), fg);
}

#[test]
fn watershed_splits_overlapping_discs_at_the_waist() {
    let (w, h) = (48, 32);
    let a = (14.0, 16.0, 10.0);
    let b = (32.0, 16.0, 10.0);
    let fg = disc_mask(w, h, &[a, b]);
    let s = distance_transform(&fg, w, h);
    let seeds = [Seed { x: 14, y: 16 }, Seed { x: 32, y: 16 }];
    let out = seeded_watershed(&s, &seeds, &fg).unwrap();
    assert_eq!(out.count(), 2);
    let only_a = disc_mask(w, h, &[a]);
    let only_b = disc_mask(w, h, &[b]);
    for i in 0..w * h {
        if only_a[i] && !only_b[i] {
            assert_eq!(out.data()[i], 1);
        }
        if only_b[i] && !only_a[i] {
            assert_eq!(out.data()[i], 2);
        }
    }
    check_against_flood_oracle(&s, &fg, &seeds, &out);

    // two seeds in one convex blob split along the distance ridge
    let blob = disc_mask(w, h, &[(24.0, 16.0, 12.0)]);
    let s = distance_transform(&blob, w, h);
    let seeds = [Seed { x: 17, y: 16 }, Seed { x: 31, y: 16 }];
    let out = seeded_watershed(&s, &seeds, &blob).unwrap();
    assert_eq!(out.count(), 2);
    check_against_flood_oracle(&s, &blob, &seeds, &out);
}

#[test]
fn watershed_errors_and_passthrough() {
    let fg = disc_mask(16, 16, &[(4.0, 4.0, 3.0), (11.0, 11.0, 3.0)]);
    let s = distance_transform(&fg, 16, 16);
    assert!(matches!(seeded_watershed(&s, &[Seed { x: 15, y: 0 }], &fg), Err(Error::Seed(_))));
    assert!(matches!(seeded_watershed(&s, &[Seed { x: 40, y: 0 }], &fg), Err(Error::Seed(_))));
    let dup = [Seed { x: 4, y: 4 }, Seed { x: 4, y: 4 }];
    assert!(matches!(seeded_watershed(&s, &dup, &fg), Err(Error::Seed(_))));
    let none = seeded_watershed(&s, &[], &fg).unwrap();
    assert_eq!(none, connected_components(&to_mask(&fg, 16, 16), 1));
    // the unseeded blob keeps an id after the seeded one
    let one = seeded_watershed(&s, &[Seed { x: 11, y: 11 }], &fg).unwrap();
    assert_eq!((one.get(11, 11), one.get(4, 4)), (1, 2));
}

#[test]
fn watershed_matches_flood_oracle_on_random_scenes() {
    let mut forced = 0;
    let mut total = 0;
    for seed in 0..50 {
        let (w, h, fg, seeds) = random_scene(seed);
        let s = distance_transform(&fg, w, h);
        let out = seeded_watershed(&s, &seeds, &fg).unwrap();
        assert_eq!(out.foreground(), fg, "not a partition of the foreground");
        forced += check_against_flood_oracle(&s, &fg, &seeds, &out);
        total += fg.iter().filter(|&&f| f).count();
        let naive = naive_flood(&s, &fg, &seeds);
        for (i, (&a, &b)) in out.data().iter().zip(&naive).enumerate() {
            if fg[i] && b != 0 {
                assert_eq!(a, b, "scene {seed}: pixel ({}, {})", i % w, i / w);
            }
        }
    }
    // distance ties are frequent; the unique-minimum pixels are a sizeable share
    assert!(forced * 10 > total, "oracle pinned too few pixels: {forced}/{total}");
}

#[test]
fn auto_seed_examples() {
    let fg = disc_mask(31, 31, &[(15.0, 15.0, 10.0)]);
    let seeds = auto_seeds(&distance_transform(&fg, 31, 31), 3.0);
    assert_eq!(seeds.len(), 1);
    assert!(seeds[0].x.abs_diff(15) <= 1 && seeds[0].y.abs_diff(15) <= 1);

    let fg = disc_mask(60, 30, &[(12.0, 15.0, 8.0), (45.0, 15.0, 9.0)]);
    let seeds = auto_seeds(&distance_transform(&fg, 60, 30), 3.0);
    assert_eq!(seeds.len(), 2);
    // strongest first
    assert!(seeds[0].x > 30);

    let flat = Surface::new(10, 10, vec![0.0; 100]).unwrap();
    assert!(auto_seeds(&flat, 2.0).is_empty());
}

#[test]
fn auto_seeds_are_the_brute_force_maxima() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (w, h) = (r.random_range(5..20), r.random_range(5..20));
        let values: Vec<f64> = (0..w * h).map(|_| r.random_range(0..6) as f64).collect();
        let s = Surface::new(w, h, values.clone()).unwrap();
        let seeds = auto_seeds(&s, 0.5);
        for seed in &seeds {
            let v = s.get(seed.x, seed.y);
            assert!(v > 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (seed.x as i64 + dx, seed.y as i64 + dy);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        assert!(s.get(x as usize, y as usize) <= v);
                    }
                }
            }
        }
        for pair in seeds.windows(2) {
            assert!(s.get(pair[0].x, pair[0].y) >= s.get(pair[1].x, pair[1].y));
        }
    }
}

fn annulus_scene(w: usize, h: usize, tubes: &[(f64, f64, f64, f64)]) -> LabelMask {
    let outer = disc_mask(w, h, &tubes.iter().map(|t| (t.0, t.1, t.2)).collect::<Vec<_>>());
    let lumen = disc_mask(w, h, &tubes.iter().map(|t| (t.0, t.1, t.3)).collect::<Vec<_>>());
    let fg: Vec<bool> = outer.iter().zip(&lumen).map(|(&o, &l)| o && !l).collect();
    to_mask(&fg, w, h)
}

#[test]
fn split_touching_examples() {
    let params = SeedParams::default();
    let apart = annulus_scene(64, 64, &[(16.0, 16.0, 12.0, 6.0), (46.0, 44.0, 13.0, 5.0), (50.0, 10.0, 7.0, 3.0)]);
    assert_eq!(split_touching(&apart, None, params).unwrap(), connected_components(&apart, 1));

    let pair = annulus_scene(64, 40, &[(20.0, 20.0, 13.0, 6.0), (42.0, 20.0, 12.0, 6.0)]);
    assert_eq!(connected_components(&pair, 1).count(), 1);
    let split = split_touching(&pair, None, params).unwrap();
    assert_eq!(split.count(), 2);
    assert_ne!(split.get(10, 20), split.get(52, 20));

    // manual seeds override: a single seed keeps the pair together
    let one = split_touching(&pair, Some(&[Seed { x: 20, y: 20 }]), params).unwrap();
    assert_eq!(one.count(), 1);
    // seeds in the lumen are accepted
    let manual = [Seed { x: 20, y: 20 }, Seed { x: 42, y: 20 }];
    let two = split_touching(&pair, Some(&manual), params).unwrap();
    assert_eq!(two, split);

    // idempotent on its own output
    let again = split_touching(&to_mask(&split.foreground(), 64, 40), Some(&manual), params).unwrap();
    assert_eq!(again, split);
}

#[test]
fn split_touching_assigns_border_pixels() {
    let (w, h) = (64, 40);
    let tubes = [(20.0, 20.0, 13.0, 6.0), (42.0, 20.0, 12.0, 6.0)];
    let mut m = annulus_scene(w, h, &tubes);
    // outer 2 px of each annulus become border
    let inner = disc_mask(w, h, &tubes.iter().map(|t| (t.0, t.1, t.2 - 2.0)).collect::<Vec<_>>());
    for i in 0..w * h {
        if m.data()[i] == 1 && !inner[i] {
            m.data_mut()[i] = 2;
        }
    }
    let out = split_touching(&m, None, SeedParams::default()).unwrap();
    assert_eq!(out.count(), 2);
    for i in 0..w * h {
        assert_eq!(out.data()[i] != 0, m.data()[i] != 0);
    }
}

#[test]
fn seeds_file_parsing() {
    let seeds = parse_seeds("# x y\n3 4\n\n 10 2 # lumen\n").unwrap();
    assert_eq!(seeds, vec![Seed { x: 3, y: 4 }, Seed { x: 10, y: 2 }]);
    assert!(parse_seeds("3\n").is_err());
    assert!(parse_seeds("3 -1\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("seeds.txt");
    std::fs::write(&p, "1 1\n").unwrap();
    assert_eq!(read_seeds(&p).unwrap(), vec![Seed { x: 1, y: 1 }]);
}
