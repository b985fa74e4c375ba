//! Named parameter and running-statistics storage.

use crate::autodiff::kernels::BN_MOMENTUM;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub usize);

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Network weights ω.
    Weight,
    /// Architecture parameters α.
    Arch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Batch-norm running mean and variance for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One batch-statistics observation recorded during a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Register running statistics initialised to mean 0, variance 1.
    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalars in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Fold recorded batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let s = &mut self.stats[u.id.0];
            for (r, b) in s.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in s.var.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Copy values (and statistics) from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() || self.stats.len() != other.stats.len() {
            return Err(Error::Checkpoint(format!(
                "layout mismatch: {} params / {} stats vs {} / {}",
                self.params.len(),
                self.stats.len(),
                other.params.len(),
                other.stats.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {} does not match {} {}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        for (dst, src) in self.stats.iter_mut().zip(&other.stats) {
            if dst.name != src.name || dst.mean.len() != src.mean.len() {
                return Err(Error::Checkpoint(format!(
                    "statistics {} do not match {}",
                    dst.name, src.name
                )));
            }
            dst.mean.clone_from(&src.mean);
            dst.var.clone_from(&src.var);
        }
        Ok(())
    }
}
