//! Self-describing checkpoint container.
//!
//! A text header, terminated by a line `end`, followed by raw little-endian
//! tensor values in the order of the header's tensor table:
//!
//! ```text
//! TUBESEG-CHECKPOINT 1
//! dtype f32
//! epoch 12
//! batch 3
//! ...
//! config.learning_rate 0.0001
//! ...
//! tensor param encoder.stem.conv.weight 16,3,7,7
//! tensor adam_m encoder.stem.conv.weight 16,3,7,7
//! end
//! <binary>
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::train::{EpochLog, Trainer};
use crate::augment::{NormalizationStats, StatsSource};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::losses::{ClassWeights, Weighting};
use crate::nn::{Network, ParamKind, ParameterStore};
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &str = "TUBESEG-CHECKPOINT 1";

fn join<V: ToString>(v: impl IntoIterator<Item = V>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl<T: Real> Trainer<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let mut line = |k: &str, v: String| h.push_str(&format!("{k} {v}\n"));
        line("dtype", T::NAME.to_string());
        line("epoch", self.epoch.to_string());
        line("batch", self.batch.to_string());
        line("loss_sum", format!("{:016x}", self.loss_sum.to_bits()));
        line("adam_step", self.adam.step.to_string());
        line("adam_betas", join([self.adam.beta1, self.adam.beta2, self.adam.eps]));
        if let Some((e, f)) = self.best {
            line("best", format!("{e} {f}"));
        }
        line(
            "norm_source",
            match self.stats.source {
                StatsSource::Dataset => "dataset".into(),
                StatsSource::Pretraining => "pretraining".into(),
            },
        );
        line("norm_mean", join(self.stats.mean));
        line("norm_std", join(self.stats.std));
        if let Weighting::Fixed(w) = &self.loss.weighting {
            line("class_counts", join(&w.counts));
        }
        if !self.seen.is_empty() {
            line("seen", join(&self.seen));
        }
        for row in &self.log {
            line("log", row.csv_row());
        }
        for (k, v) in self.config.entries() {
            line(&format!("config.{k}"), v);
        }
        let mut body: Vec<(&str, &str, &Tensor<T>)> = Vec::new();
        for (name, e) in self.network.params.iter() {
            body.push((if e.kind == ParamKind::Learnable { "param" } else { "buffer" }, name, &e.tensor));
        }
        let mut tables = String::new();
        for (kind, name, t) in &body {
            tables.push_str(&format!("tensor {kind} {name} {}\n", join(t.shape())));
        }
        for (name, _) in &self.adam.m {
            let shape = self.network.params.get(name).expect("moment of a known parameter").shape();
            tables.push_str(&format!("tensor adam_m {name} {}\n", join(shape)));
        }
        for (name, _) in &self.adam.v {
            let shape = self.network.params.get(name).expect("moment of a known parameter").shape();
            tables.push_str(&format!("tensor adam_v {name} {}\n", join(shape)));
        }

        let mut out = format!("{MAGIC}\n{h}{tables}end\n").into_bytes();
        for (_, _, t) in &body {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for buf in self.adam.m.values().chain(self.adam.v.values()) {
            for &v in buf {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Invalid(format!("checkpoint: {m}"));
        let header = parse_header(bytes)?;
        if header.dtype != T::NAME {
            return Err(bad(format!("stores {} values, expected {}", header.dtype, T::NAME)));
        }
        let mut config = TrainConfig::desk();
        for (k, v) in &header.config {
            config.set(k, v)?;
        }
        config.validate()?;
        let mut fields = header.fields;
        let mut take = |k: &str| fields.shift_remove(k).ok_or_else(|| bad(format!("missing `{k}`")));
        let parse_list = |s: &str| -> Result<Vec<f64>> {
            s.split(',').map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number `{x}`")))).collect()
        };
        let epoch: usize = take("epoch")?.parse().map_err(|_| bad("bad epoch".into()))?;
        let batch: usize = take("batch")?.parse().map_err(|_| bad("bad batch".into()))?;
        let loss_sum =
            f64::from_bits(u64::from_str_radix(&take("loss_sum")?, 16).map_err(|_| bad("bad loss_sum".into()))?);
        let step: u64 = take("adam_step")?.parse().map_err(|_| bad("bad adam_step".into()))?;
        let betas = parse_list(&take("adam_betas")?)?;
        if betas.len() != 3 {
            return Err(bad("adam_betas needs three values".into()));
        }
        let source = match take("norm_source")?.as_str() {
            "dataset" => StatsSource::Dataset,
            "pretraining" => StatsSource::Pretraining,
            other => return Err(bad(format!("unknown norm_source `{other}`"))),
        };
        let mean = parse_list(&take("norm_mean")?)?;
        let std = parse_list(&take("norm_std")?)?;
        if mean.len() != 3 || std.len() != 3 {
            return Err(bad("normalization needs three channels".into()));
        }
        let stats = NormalizationStats { mean: [mean[0], mean[1], mean[2]], std: [std[0], std[1], std[2]], source };
        stats.validate()?;
        let best = match fields.shift_remove("best") {
            None => None,
            Some(s) => {
                let (e, f) = s.split_once(' ').ok_or_else(|| bad("bad best".into()))?;
                Some((e.parse().map_err(|_| bad("bad best".into()))?, f.parse().map_err(|_| bad("bad best".into()))?))
            }
        };
        let mut loss = config.loss.clone();
        if let Some(c) = fields.shift_remove("class_counts") {
            let counts = c
                .split(',')
                .map(|x| x.parse::<u64>().map_err(|_| bad(format!("bad count `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            let w: ClassWeights = crate::losses::class_weights(&counts)?;
            loss.weighting = Weighting::Fixed(w);
        }
        let seen: BTreeSet<usize> = match fields.shift_remove("seen") {
            None => BTreeSet::new(),
            Some(s) => {
                s.split(',').map(|x| x.parse().map_err(|_| bad(format!("bad id `{x}`")))).collect::<Result<_>>()?
            }
        };
        let log = header.log.iter().map(|r| EpochLog::parse_row(r)).collect::<Result<Vec<_>>>()?;

        let mut body = &bytes[header.body_offset..];
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            if body.len() < n * T::BYTES {
                return Err(bad("truncated tensor data".into()));
            }
            let data = body[..n * T::BYTES].chunks_exact(T::BYTES).map(T::read_le).collect();
            body = &body[n * T::BYTES..];
            Tensor::new(shape, data)
        };

        let mut params = ParameterStore::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (kind, name, shape) in &header.tensors {
            let t = read(shape)?;
            match kind.as_str() {
                "param" => params.insert(name.clone(), t, ParamKind::Learnable),
                "buffer" => params.insert(name.clone(), t, ParamKind::Buffer),
                "adam_m" => {
                    m.insert(name.clone(), t.into_data());
                }
                "adam_v" => {
                    v.insert(name.clone(), t.into_data());
                }
                other => return Err(bad(format!("unknown tensor kind `{other}`"))),
            }
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes", body.len())));
        }

        // the stored tensors must be exactly those of the configured network
        let reference = Network::<T>::new(config.network.clone(), 0)?;
        let expected: Vec<(&str, &[usize], ParamKind)> =
            reference.params.iter().map(|(k, e)| (k, e.tensor.shape(), e.kind)).collect();
        let found: Vec<(&str, &[usize], ParamKind)> =
            params.iter().map(|(k, e)| (k, e.tensor.shape(), e.kind)).collect();
        if expected != found {
            return Err(bad("tensor table does not match the stored network configuration".into()));
        }
        let learnable: Vec<&str> = params.learnable().map(|(k, _)| k).collect();
        if m.keys().map(String::as_str).collect::<Vec<_>>() != learnable
            || v.keys().map(String::as_str).collect::<Vec<_>>() != learnable
        {
            return Err(bad("optimizer moments do not cover the learnable parameters".into()));
        }

        let network = Network { config: config.network.clone(), params };
        let adam = AdamState { beta1: betas[0], beta2: betas[1], eps: betas[2], step, m, v };
        Ok(Self { config, network, adam, stats, loss, epoch, batch, loss_sum, best, log, seen })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct Header {
    dtype: String,
    fields: IndexMap<String, String>,
    config: Vec<(String, String)>,
    log: Vec<String>,
    tensors: Vec<(String, String, Vec<usize>)>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: String| Error::Invalid(format!("checkpoint: {m}"));
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header".into()))?;
        pos += n + 1;
        std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not text".into()))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)".into()));
    }
    let mut h = Header {
        dtype: String::new(),
        fields: IndexMap::new(),
        config: Vec::new(),
        log: Vec::new(),
        tensors: Vec::new(),
        body_offset: 0,
    };
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        if let Some(key) = k.strip_prefix("config.") {
            h.config.push((key.to_string(), v.to_string()));
        } else if k == "log" {
            h.log.push(v.to_string());
        } else if k == "tensor" {
            let parts: Vec<&str> = v.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad(format!("malformed tensor line `{line}`")));
            }
            let shape = parts[2]
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in `{line}`"))))
                .collect::<Result<Vec<_>>>()?;
            h.tensors.push((parts[0].to_string(), parts[1].to_string(), shape));
        } else if k == "dtype" {
            h.dtype = v.to_string();
        } else {
            h.fields.insert(k.to_string(), v.to_string());
        }
    }
    h.body_offset = pos;
    Ok(h)
}

/// Value type stored in a checkpoint file, read from its header alone.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    h.dtype.parse()
}
