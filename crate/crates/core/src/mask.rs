//! Per-pixel class labels and instance identifiers.

use crate::error::{Error, Result};

/// Class id per pixel: 0 background, 1 epithelium, 2 tubule border.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "label mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pixels per class id for `num_classes` classes.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes.max(self.max_label() as usize + 1)];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h.truncate(num_classes.max(1));
        h
    }

    /// Boolean foreground map for one class.
    pub fn select(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// Collapse the 3-class scheme (epithelium, border) into 2 classes.
    pub fn to_two_class(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| u8::from(v != 0)).collect() }
    }

    pub fn hflip(&self) -> Self {
        Self { width: self.width, height: self.height, data: hflip_buf(&self.data, self.width) }
    }

    pub fn vflip(&self) -> Self {
        Self { width: self.width, height: self.height, data: vflip_buf(&self.data, self.width) }
    }
}

impl std::fmt::Debug for LabelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LabelMask({}x{}, max {})", self.width, self.height, self.max_label())
    }
}

/// Instance id per pixel: 0 background, 1..=K objects.
#[derive(Clone, PartialEq, Eq)]
pub struct InstanceMap {
    width: usize,
    height: usize,
    data: Vec<u32>,
    count: u32,
}

impl InstanceMap {
    /// Builds a map and checks that ids are exactly `1..=max`.
    pub fn new(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "instance map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        let count = data.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; count as usize + 1];
        for &v in &data {
            seen[v as usize] = true;
        }
        if let Some(missing) = seen.iter().skip(1).position(|&s| !s) {
            return Err(Error::Invalid(format!("instance ids skip {}", missing + 1)));
        }
        Ok(Self { width, height, data, count })
    }

    /// Builds a map from arbitrary ids, renumbering them `1..=K` in order of
    /// first appearance in raster scan.
    pub fn canonical(width: usize, height: usize, data: &[u32]) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape("instance buffer does not match extent".into()));
        }
        let mut map = std::collections::HashMap::new();
        let mut next = 0u32;
        let out = data
            .iter()
            .map(|&v| {
                if v == 0 {
                    0
                } else {
                    *map.entry(v).or_insert_with(|| {
                        next += 1;
                        next
                    })
                }
            })
            .collect();
        Ok(Self { width, height, data: out, count: next })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height], count: 0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Number of instances K.
    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }

    /// Pixel area per id, index 0 is background.
    pub fn areas(&self) -> Vec<u64> {
        let mut a = vec![0u64; self.count as usize + 1];
        for &v in &self.data {
            a[v as usize] += 1;
        }
        a
    }

    pub fn hflip(&self) -> Self {
        Self { data: hflip_buf(&self.data, self.width), ..self.clone() }
    }

    pub fn vflip(&self) -> Self {
        Self { data: vflip_buf(&self.data, self.width), ..self.clone() }
    }

    /// Pixels with a 4-neighbour of a different nonzero id.
    pub fn boundaries(&self) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = self.data[y * w + x];
                if v == 0 {
                    continue;
                }
                let differs = |nx: usize, ny: usize| {
                    let u = self.data[ny * w + nx];
                    u != 0 && u != v
                };
                out[y * w + x] = (x > 0 && differs(x - 1, y))
                    || (x + 1 < w && differs(x + 1, y))
                    || (y > 0 && differs(x, y - 1))
                    || (y + 1 < h && differs(x, y + 1));
            }
        }
        out
    }
}

impl std::fmt::Debug for InstanceMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "InstanceMap({}x{}, K={})", self.width, self.height, self.count)
    }
}

pub(crate) fn hflip_buf<V: Copy>(data: &[V], width: usize) -> Vec<V> {
    data.chunks_exact(width).flat_map(|row| row.iter().rev().copied()).collect()
}

pub(crate) fn vflip_buf<V: Copy>(data: &[V], width: usize) -> Vec<V> {
    data.chunks_exact(width).rev().flatten().copied().collect()
}
