//! Reference floods for the seeded watershed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use tubeseg::postprocess::{Seed, Surface};
use tubeseg::InstanceMap;

use super::rng;

pub fn disc_mask(w: usize, h: usize, discs: &[(f64, f64, f64)]) -> Vec<bool> {
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            discs.iter().any(|&(cx, cy, r)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        })
        .collect()
}

/// Minimax ("lowest pass") cost from one seed to every foreground pixel on
/// the elevation `-surface`, by Dijkstra over 8-connected foreground.
pub fn minimax_costs(surface: &Surface, fg: &[bool], seed: Seed) -> Vec<f64> {
    let (w, h) = (surface.width, surface.height);
    let elev = |i: usize| -surface.values[i];
    let mut cost = vec![f64::INFINITY; w * h];
    let s = seed.y * w + seed.x;
    cost[s] = elev(s);
    let key = |c: f64| Reverse(ordered(c));
    let mut heap = BinaryHeap::new();
    heap.push((key(cost[s]), s));
    while let Some((Reverse(c), i)) = heap.pop() {
        let c = c.0;
        if c > cost[i] {
            continue;
        }
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !fg[j] {
                    continue;
                }
                let nc = c.max(elev(j));
                if nc < cost[j] {
                    cost[j] = nc;
                    heap.push((key(nc), j));
                }
            }
        }
    }
    cost
}

#[derive(PartialEq, PartialOrd, Clone, Copy)]
pub struct Ordered(f64);
impl Eq for Ordered {}
impl Ord for Ordered {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}
pub fn ordered(v: f64) -> Ordered {
    Ordered(v)
}

/// Every pixel's label must be a seed of minimal pass cost; where that seed
/// is unique the label is forced. Returns the number of forced pixels.
pub fn check_against_flood_oracle(surface: &Surface, fg: &[bool], seeds: &[Seed], got: &InstanceMap) -> usize {
    let costs: Vec<Vec<f64>> = seeds.iter().map(|&s| minimax_costs(surface, fg, s)).collect();
    let mut forced = 0;
    for i in 0..fg.len() {
        let label = got.data()[i];
        if !fg[i] {
            assert_eq!(label, 0);
            continue;
        }
        let best = costs.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
        if best.is_infinite() {
            assert!(label as usize > seeds.len(), "unreachable pixel {i} took a seed label");
            continue;
        }
        let argmin: Vec<u32> = (0..seeds.len()).filter(|&k| costs[k][i] == best).map(|k| k as u32 + 1).collect();
        assert!(argmin.contains(&label), "pixel {i}: label {label}, minimal seeds {argmin:?}");
        if argmin.len() == 1 {
            forced += 1;
        }
    }
    forced
}

/// The documented flooding rule run with a linear-scan queue: repeatedly
/// take the entry of lowest (level, insertion order), hand its label to
/// unlabeled foreground neighbours.
pub fn naive_flood(surface: &Surface, fg: &[bool], seeds: &[Seed]) -> Vec<u32> {
    let (w, h) = (surface.width, surface.height);
    let mut labels = vec![0u32; w * h];
    let mut queue: Vec<(f64, usize, usize)> = Vec::new();
    let mut order = 0;
    for (k, s) in seeds.iter().enumerate() {
        let i = s.y * w + s.x;
        labels[i] = k as u32 + 1;
        queue.push((-surface.values[i], order, i));
        order += 1;
    }
    while !queue.is_empty() {
        let mut best = 0;
        for (n, e) in queue.iter().enumerate() {
            if (e.0, e.1) < (queue[best].0, queue[best].1) {
                best = n;
            }
        }
        let (level, _, i) = queue.swap_remove(best);
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if fg[j] && labels[j] == 0 {
                labels[j] = labels[i];
                queue.push((level.max(-surface.values[j]), order, j));
                order += 1;
            }
        }
    }
    labels
}

/// Random overlapping discs on a small canvas, seeded at their centres.
pub fn random_scene(seed: u64) -> (usize, usize, Vec<bool>, Vec<Seed>) {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(24..=64), r.random_range(24..=64));
    let k = r.random_range(2..=4);
    let mut discs = Vec::new();
    let first = (r.random_range(8.0..w as f64 - 8.0), r.random_range(8.0..h as f64 - 8.0), r.random_range(4.0..9.0));
    discs.push(first);
    while discs.len() < k {
        let (px, py, pr) = discs[r.random_range(0..discs.len())];
        let nr: f64 = r.random_range(4.0..9.0);
        let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let d = (pr + nr) * r.random_range(0.6..0.95);
        let (cx, cy) = (px + d * angle.cos(), py + d * angle.sin());
        if cx < 1.0 || cy < 1.0 || cx > w as f64 - 2.0 || cy > h as f64 - 2.0 {
            continue;
        }
        discs.push((cx, cy, nr));
    }
    let fg = disc_mask(w, h, &discs);
    let mut seeds: Vec<Seed> = Vec::new();
    for &(cx, cy, _) in &discs {
        let s = Seed { x: cx.round() as usize, y: cy.round() as usize };
        if fg[s.y * w + s.x] && !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    (w, h, fg, seeds)
}
