//! From probability maps to instance maps.
//!
//! The chain is `argmax_mask` → foreground with lumens filled →
//! Euclidean distance transform → seeds (given, or local maxima of the
//! distance) → priority-flood watershed on the negated distance → instance
//! ids restricted to the original foreground.
//!
//! Connectivity is 8 for foreground, 4 for background.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{InstanceMap, LabelMask};
use crate::tensor::{Real, Tensor};

const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Class 1 in both label schemes.
pub const EPITHELIUM: u8 = 1;
/// Class 2 in the 3-class scheme.
pub const BORDER: u8 = 2;

#[inline]
fn neighbours(
    i: usize,
    width: usize,
    height: usize,
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % width) as isize, (i / width) as isize);
    offsets.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height)
            .then(|| ny as usize * width + nx as usize)
    })
}

/// Per-pixel argmax over channels of every sample; ties go to the lower class.
pub fn argmax_mask<T: Real>(probs: &Tensor<T>) -> Result<Vec<LabelMask>> {
    let (n, c, h, w) = probs.dims4()?;
    if c > u8::MAX as usize {
        return Err(Error::Shape(format!("{c} classes do not fit a label mask")));
    }
    let plane = h * w;
    let d = probs.data();
    (0..n)
        .map(|b| {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * plane + p] > d[(b * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(w, h, labels)
        })
        .collect()
}

/// 8-connected labeling; ids follow the raster order of each component's
/// first pixel. Returns the id buffer and the component count.
pub fn label_components(foreground: &[bool], width: usize, height: usize) -> (Vec<u32>, u32) {
    let mut ids = vec![0u32; foreground.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..foreground.len() {
        if !foreground[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbours(i, width, height, &N8) {
                if foreground[j] && ids[j] == 0 {
                    ids[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (ids, next)
}

pub fn connected_components(mask: &LabelMask, class: u8) -> InstanceMap {
    let (ids, _) = label_components(&mask.select(class), mask.width(), mask.height());
    InstanceMap::new(mask.width(), mask.height(), ids).expect("component ids are contiguous")
}

/// Foreground plus every background region (4-connected) that does not reach
/// the image edge.
pub fn fill_holes(foreground: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut outside = vec![false; foreground.len()];
    let mut queue: VecDeque<usize> = (0..foreground.len())
        .filter(|&i| {
            let (x, y) = (i % width, i / width);
            !foreground[i] && (x == 0 || y == 0 || x + 1 == width || y + 1 == height)
        })
        .collect();
    for &i in &queue {
        outside[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, width, height, &N4) {
            if !foreground[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    outside.into_iter().map(|o| !o).collect()
}

/// Real-valued elevation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Surface {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!("surface {width}x{height} with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("surface contains non-finite values".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Squared distance transform of a sampled function along one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never steps below the first parabola
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel; zero on background. Pixels outside the image count as
/// background, so an isolated pixel or one on the image edge has distance 1.
pub fn distance_transform(foreground: &[bool], width: usize, height: usize) -> Surface {
    const FAR: f64 = 1e20;
    let (pw, ph) = (width + 2, height + 2);
    let mut grid = vec![0.0; pw * ph];
    for y in 0..height {
        for x in 0..width {
            if foreground[y * width + x] {
                grid[(y + 1) * pw + x + 1] = FAR;
            }
        }
    }
    let n = pw.max(ph);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        let row = &mut grid[y * pw..(y + 1) * pw];
        f[..pw].copy_from_slice(row);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        row.copy_from_slice(&out[..pw]);
    }
    let values = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| grid[(y + 1) * pw + x + 1].sqrt())
        .collect();
    Surface { width, height, values }
}

/// A flooding source in pixel coordinates (origin top-left). The i-th seed
/// of a list produces instance id `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
}

#[derive(PartialEq)]
struct Queued {
    level: f64,
    order: u64,
    index: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    // BinaryHeap is a max-heap: the lowest level, then the earliest insertion, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.level.total_cmp(&self.level).then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_seeds(seeds: &[Seed], foreground: &[bool], width: usize, height: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in seeds {
        if s.x >= width || s.y >= height {
            return Err(Error::Seed(format!("seed ({}, {}) outside the {width}x{height} image", s.x, s.y)));
        }
        if !foreground[s.y * width + s.x] {
            return Err(Error::Seed(format!("seed ({}, {}) lies on background", s.x, s.y)));
        }
        if !seen.insert(*s) {
            return Err(Error::Seed(format!("seed ({}, {}) given twice", s.x, s.y)));
        }
    }
    Ok(())
}

/// Floods `-surface` upward from the seeds over the foreground. A pixel takes
/// the label of the first flood to reach it; the queue orders by flood level
/// `max(elevation, level of the pixel that reached it)` and then by
/// insertion. Foreground components without a seed keep their own ids after
/// the seeded ones. With no seeds this is connected-component labeling.
pub fn seeded_watershed(surface: &Surface, seeds: &[Seed], foreground: &[bool]) -> Result<InstanceMap> {
    let (w, h) = (surface.width, surface.height);
    if foreground.len() != w * h {
        return Err(Error::Shape(format!("mask of {} pixels for a {w}x{h} surface", foreground.len())));
    }
    check_seeds(seeds, foreground, w, h)?;
    if seeds.is_empty() {
        let (ids, _) = label_components(foreground, w, h);
        return InstanceMap::new(w, h, ids);
    }
    let mut labels = vec![0u32; w * h];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (k, s) in seeds.iter().enumerate() {
        let i = s.y * w + s.x;
        labels[i] = k as u32 + 1;
        heap.push(Queued { level: -surface.values[i], order, index: i });
        order += 1;
    }
    while let Some(Queued { level, index, .. }) = heap.pop() {
        for j in neighbours(index, w, h, &N8) {
            if foreground[j] && labels[j] == 0 {
                labels[j] = labels[index];
                heap.push(Queued { level: level.max(-surface.values[j]), order, index: j });
                order += 1;
            }
        }
    }
    let unreached: Vec<bool> = foreground.iter().zip(&labels).map(|(&f, &l)| f && l == 0).collect();
    let (extra, _) = label_components(&unreached, w, h);
    let offset = seeds.len() as u32;
    for (l, e) in labels.iter_mut().zip(extra) {
        if e != 0 {
            *l = offset + e;
        }
    }
    InstanceMap::new(w, h, labels)
}

/// Seed selection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedParams {
    /// Seeds closer than this (Euclidean, pixels) to a stronger seed are dropped.
    pub min_distance: f64,
    /// A maximum is kept only if every path to a stronger seed dips more than
    /// this below it. Zero keeps all separated maxima except plateaus.
    pub min_dynamic: f64,
}

impl Default for SeedParams {
    fn default() -> Self {
        Self { min_distance: 5.0, min_dynamic: 1.0 }
    }
}

/// Local maxima of `surface` (strictly positive, not below any 8-neighbour),
/// strongest first, thinned by non-maximum suppression.
pub fn auto_seeds(surface: &Surface, min_distance: f64) -> Vec<Seed> {
    auto_seeds_with(surface, SeedParams { min_distance, min_dynamic: 0.0 })
}

pub fn auto_seeds_with(surface: &Surface, params: SeedParams) -> Vec<Seed> {
    let (w, h) = (surface.width, surface.height);
    let s = &surface.values;
    let mut candidates: Vec<usize> =
        (0..w * h).filter(|&i| s[i] > 0.0 && neighbours(i, w, h, &N8).all(|j| s[j] <= s[i])).collect();
    // strongest first, raster order among equals
    candidates.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let mut accepted: Vec<usize> = Vec::new();
    let mut is_seed = vec![false; w * h];
    let mut stamp = vec![0u32; w * h];
    let mut queue = VecDeque::new();
    let r2 = params.min_distance * params.min_distance;
    for (round, &c) in candidates.iter().enumerate() {
        let (cx, cy) = ((c % w) as f64, (c / w) as f64);
        let crowded = accepted.iter().any(|&a| {
            let (ax, ay) = ((a % w) as f64, (a / w) as f64);
            (ax - cx).powi(2) + (ay - cy).powi(2) <= r2
        });
        if crowded {
            continue;
        }
        // flood from the candidate over pixels no lower than its level minus
        // the dynamic; reaching an accepted seed means the dip is too shallow
        let floor = s[c] - params.min_dynamic;
        let tag = round as u32 + 1;
        queue.clear();
        queue.push_back(c);
        stamp[c] = tag;
        let mut shallow = false;
        while let Some(i) = queue.pop_front() {
            if is_seed[i] {
                shallow = true;
                break;
            }
            for j in neighbours(i, w, h, &N8) {
                if stamp[j] != tag && s[j] >= floor && s[j] > 0.0 {
                    stamp[j] = tag;
                    queue.push_back(j);
                }
            }
        }
        if !shallow {
            accepted.push(c);
            is_seed[c] = true;
        }
    }
    accepted.into_iter().map(|i| Seed { x: i % w, y: i / w }).collect()
}

/// Splits merged tubules into instances.
///
/// Epithelium pixels (class 1) are the foreground. Lumens are filled before
/// the distance transform so each tubule has one central maximum, and the
/// result is cut back to the epithelium. Border pixels (class 2, 3-class
/// masks) are excluded from flooding and then joined to the nearest
/// instance through the border region. Ids are renumbered in raster order.
pub fn split_touching(mask: &LabelMask, seeds: Option<&[Seed]>, params: SeedParams) -> Result<InstanceMap> {
    let (w, h) = (mask.width(), mask.height());
    let epi = mask.select(EPITHELIUM);
    let filled = fill_holes(&epi, w, h);
    let dist = distance_transform(&filled, w, h);
    let auto;
    let seeds = match seeds {
        Some(s) => s,
        None => {
            auto = auto_seeds_with(&dist, params);
            &auto
        }
    };
    let flooded = seeded_watershed(&dist, seeds, &filled)?;
    let mut ids: Vec<u32> = flooded.data().iter().zip(&epi).map(|(&l, &e)| if e { l } else { 0 }).collect();
    let border = mask.select(BORDER);
    if border.iter().any(|&b| b) {
        assign_border(&mut ids, &border, w, h);
    }
    InstanceMap::canonical(w, h, &ids)
}

/// Grows instance labels into border pixels by shortest (1, sqrt 2) paths
/// inside the border region; border components touching no instance become
/// instances of their own.
fn assign_border(ids: &mut [u32], border: &[bool], w: usize, h: usize) {
    let mut dist = vec![f64::INFINITY; ids.len()];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for i in 0..ids.len() {
        if ids[i] != 0 {
            dist[i] = 0.0;
            heap.push(Queued { level: 0.0, order, index: i });
            order += 1;
        }
    }
    while let Some(Queued { level, index, .. }) = heap.pop() {
        if level > dist[index] {
            continue;
        }
        for j in neighbours(index, w, h, &N8) {
            if !border[j] || (ids[j] != 0 && dist[j] == 0.0) {
                continue;
            }
            let diagonal = j % w != index % w && j / w != index / w;
            let d = level + if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            if d < dist[j] {
                dist[j] = d;
                ids[j] = ids[index];
                heap.push(Queued { level: d, order, index: j });
                order += 1;
            }
        }
    }
    let orphan: Vec<bool> = border.iter().zip(ids.iter()).map(|(&b, &l)| b && l == 0).collect();
    let (extra, _) = label_components(&orphan, w, h);
    let offset = ids.iter().copied().max().unwrap_or(0);
    for (l, e) in ids.iter_mut().zip(extra) {
        if e != 0 {
            *l = offset + e;
        }
    }
}

/// Seeds file: one `x y` pair per line; blank lines and `#` comments ignored.
pub fn parse_seeds(text: &str) -> Result<Vec<Seed>> {
    text.lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then_some((n + 1, line))
        })
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Seed(format!("line {n}: `{s}` is not a pixel coordinate")))
            };
            match parts[..] {
                [x, y] => Ok(Seed { x: parse(x)?, y: parse(y)? }),
                _ => Err(Error::Seed(format!("line {n}: expected `x y`, got `{line}`"))),
            }
        })
        .collect()
}

pub fn read_seeds(path: &Path) -> Result<Vec<Seed>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_seeds(&text).map_err(|e| Error::format(path, e.to_string()))
}
