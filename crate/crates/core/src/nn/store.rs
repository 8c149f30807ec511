use std::collections::HashMap;

use indexmap::IndexMap;

use super::{BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStats, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics and counters.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors of a network, in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        let name = name.into();
        let previous = self.entries.insert(name.clone(), Entry { tensor, kind });
        assert!(previous.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Learnable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.learnable().map(|(_, t)| t.numel()).sum()
    }

    pub fn bn_stats(&self, prefix: &str) -> Result<BnStats<T>> {
        let mean = self.get(&format!("{prefix}.running_mean"))?.data().to_vec();
        let var = self.get(&format!("{prefix}.running_var"))?.data().to_vec();
        let batches = self.get(&format!("{prefix}.batches"))?.data()[0].as_f64() as u64;
        Ok(BnStats { mean, var, batches })
    }

    pub fn set_bn_stats(&mut self, prefix: &str, stats: &BnStats<T>) -> Result<()> {
        self.get_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&stats.mean);
        self.get_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&stats.var);
        self.get_mut(&format!("{prefix}.batches"))?.data_mut()[0] = T::of(stats.batches as f64);
        Ok(())
    }

    /// Convert every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), Entry { tensor: e.tensor.cast(), kind: e.kind }))
                .collect(),
        }
    }
}

/// State of one forward pass: the graph being recorded, the parameters it
/// reads, and the batch-norm statistics it produced.
pub struct Forward<'a, T> {
    pub g: &'a mut Graph<T>,
    store: &'a ParameterStore<T>,
    mode: BnMode,
    trainable: bool,
    vars: HashMap<String, Var>,
    stats: Vec<(String, BnStats<T>)>,
}

/// What a forward pass leaves behind once the graph is done.
pub struct ForwardOutput<T> {
    /// Graph handle of every parameter that was read.
    pub vars: HashMap<String, Var>,
    /// Updated running statistics (train mode only), keyed by layer prefix.
    pub stats: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// `trainable` records parameters as gradient-requiring leaves.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParameterStore<T>, mode: BnMode, trainable: bool) -> Self {
        Self { g, store, mode, trainable, vars: HashMap::new(), stats: Vec::new() }
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Graph handle of a parameter, registering it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.g.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) { Some(self.p(&bias_name)?) } else { None };
        self.g.conv2d(x, w, b, stride, padding)
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mut stats = self.store.bn_stats(prefix)?;
        let y = self.g.batchnorm2d(x, gamma, beta, &mut stats, self.mode, T::of(BN_EPS), T::of(BN_MOMENTUM)).map_err(
            |e| match e {
                Error::UninitializedStats(_) => Error::UninitializedStats(prefix.to_string()),
                other => other,
            },
        )?;
        if self.mode == BnMode::Train {
            self.stats.push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    pub fn finish(self) -> ForwardOutput<T> {
        ForwardOutput { vars: self.vars, stats: self.stats }
    }
}

impl<T: Real> ForwardOutput<T> {
    /// Gradients of learnable parameters after `g.backward`.
    pub fn gradients(&self, g: &Graph<T>, store: &ParameterStore<T>) -> IndexMap<String, Vec<T>> {
        store
            .learnable()
            .map(|(name, t)| {
                let grad = self
                    .vars
                    .get(name)
                    .and_then(|&v| g.grad(v))
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); t.numel()]);
                (name.to_string(), grad)
            })
            .collect()
    }

    pub fn apply_stats(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for (prefix, s) in &self.stats {
            store.set_bn_stats(prefix, s)?;
        }
        Ok(())
    }
}
