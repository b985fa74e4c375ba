//! Alternating first-order optimisation of supernet weights and alphas with an
//! entropy-based stopping rule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{derive_all, init_alphas, network_entropy, AlphaSet};
use crate::autodiff::GradMode;
use crate::cell::Genotype;
use crate::container::{Container, NamedTensor};
use crate::data::{minibatches, CropPolicy, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::optim::AdamState;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub alpha_lr: f64,
    pub weight_decay: f64,
    /// L2 decay applied to the alphas by their own optimizer.
    pub alpha_weight_decay: f64,
    pub entropy_patience: usize,
    pub entropy_rel_tol: f64,
    pub seed: u64,
    /// Cap on train (and val) batches per epoch; 0 means a full pass.
    pub batches_per_epoch: usize,
    /// Share of the training split held out for alpha updates.
    pub val_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 8,
            weight_lr: 0.1,
            alpha_lr: 0.1,
            weight_decay: 3e-4,
            alpha_weight_decay: 3e-4,
            entropy_patience: 10,
            entropy_rel_tol: 1e-3,
            seed: 0,
            batches_per_epoch: 0,
            val_fraction: 0.5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.entropy_patience == 0 {
            return bad("epochs and entropy_patience must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch statistics over one example carry no gradient)");
        }
        if !(self.weight_lr > 0.0 && self.alpha_lr > 0.0 && self.weight_decay >= 0.0 && self.alpha_weight_decay >= 0.0 && self.entropy_rel_tol > 0.0) {
            return bad("learning rates and entropy_rel_tol must be positive, weight_decay non-negative");
        }
        if self.entropy_patience >= self.epochs {
            return bad("entropy_patience must be smaller than epochs");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub config: SearchConfig,
    pub net: Network,
    pub weight_opt: AdamState,
    pub alpha_opt: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Network entropy after each completed epoch.
    pub entropy: Vec<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub weight_steps: usize,
    pub alpha_steps: usize,
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub alphas: AlphaSet,
    pub genotypes: Vec<Genotype>,
    pub entropy: Vec<f64>,
    pub converged: bool,
}

const RNG_SALT: u64 = 0x7365_6172_6368;

impl SearchState {
    pub fn new(config: SearchConfig, net_cfg: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let alphas = init_alphas(net_cfg.num_cells, config.seed)?;
        let net = Network::search(net_cfg, &alphas, config.seed)?;
        Ok(SearchState {
            weight_opt: AdamState::new(config.weight_lr, config.weight_decay),
            alpha_opt: AdamState::new(config.alpha_lr, config.alpha_weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ RNG_SALT),
            config,
            net,
            epoch: 0,
            entropy: Vec::new(),
        })
    }

    pub fn alphas(&self) -> AlphaSet {
        self.net.alphas().expect("search network carries alphas")
    }

    fn alpha_id(&self) -> ParamId {
        self.net.alpha_param().expect("search network carries alphas")
    }

    /// One Adam update of the supernet weights on a training batch; alphas stay fixed.
    pub fn weight_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let step = self.net.loss_gradients(x, labels, GradMode::WEIGHTS)?;
        let ids = self.net.weight_ids();
        self.weight_opt.step(&mut self.net.store, &ids, &step.grads);
        self.net.store.apply_bn_updates(&step.bn_updates);
        Ok(step.loss)
    }

    /// One Adam update of all alphas on a validation batch; weights and
    /// running statistics stay fixed.
    pub fn alpha_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let step = self.net.loss_gradients(x, labels, GradMode::ARCH)?;
        let id = self.alpha_id();
        self.alpha_opt.step(&mut self.net.store, &[id], &step.grads);
        Ok(step.loss)
    }

    fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        let mut batches = minibatches(&idx, self.config.batch_size);
        if self.config.batches_per_epoch > 0 {
            batches.truncate(self.config.batches_per_epoch);
        }
        batches
    }

    /// One epoch: alternate a weight step on the next train batch with an alpha
    /// step on the next val batch until both are exhausted.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochReport> {
        if train.len() < 2 || val.len() < 2 {
            return Err(Error::Config("search needs at least 2 train and 2 val examples".into()));
        }
        let frames = self.net.config.input_frames;
        let tb = self.epoch_batches(train.len());
        let vb = self.epoch_batches(val.len());
        let (mut tl, mut vl) = (0.0, 0.0);
        for i in 0..tb.len().max(vb.len()) {
            if let Some(b) = tb.get(i) {
                let (x, y) = train.batch(b, frames, CropPolicy::Random, &mut self.rng);
                tl += self.weight_step(&x, &y)?;
            }
            if let Some(b) = vb.get(i) {
                let (x, y) = val.batch(b, frames, CropPolicy::Random, &mut self.rng);
                vl += self.alpha_step(&x, &y)?;
            }
        }
        let entropy = network_entropy(&self.alphas());
        self.entropy.push(entropy);
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            train_loss: tl / tb.len() as f64,
            val_loss: vl / vb.len() as f64,
            weight_steps: tb.len(),
            alpha_steps: vb.len(),
            entropy,
        })
    }

    /// True once the relative entropy decrease over the last `entropy_patience`
    /// epochs falls below `entropy_rel_tol`.
    pub fn converged(&self) -> bool {
        let p = self.config.entropy_patience;
        let h = &self.entropy;
        if h.len() <= p {
            return false;
        }
        let then = h[h.len() - 1 - p];
        let now = h[h.len() - 1];
        (then - now) / then.abs().max(f64::MIN_POSITIVE) < self.config.entropy_rel_tol
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.converged()
    }

    pub fn genotypes(&self) -> Vec<Genotype> {
        derive_all(&self.alphas())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.net.to_container()?;
        let rng = serde_json::json!({
            "seed": self.rng.get_seed().to_vec(),
            "stream": self.rng.get_stream(),
            "word_pos": self.rng.get_word_pos().to_string(),
        });
        c.config = serde_json::json!({
            "kind": "search",
            "network": self.net.config,
            "search": self.config,
            "epoch": self.epoch,
            "weight_adam_step": self.weight_opt.step,
            "alpha_adam_step": self.alpha_opt.step,
            "rng": rng,
        });
        c.tensors.push(NamedTensor::vector("search.entropy", self.entropy.clone()));
        for (prefix, opt) in [("adam.weight", &self.weight_opt), ("adam.alpha", &self.alpha_opt)] {
            for (id, (m, v)) in &opt.moments {
                let name = &self.net.store.get(*id).name;
                c.tensors.push(NamedTensor::vector(format!("{prefix}.m/{name}"), m.clone()));
                c.tensors.push(NamedTensor::vector(format!("{prefix}.v/{name}"), v.clone()));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = &c.config;
        if cfg.get("kind").and_then(|k| k.as_str()) != Some("search") {
            return Err(Error::Checkpoint("not a search checkpoint".into()));
        }
        let field = |k: &str| {
            cfg.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
        };
        let net_cfg: NetworkConfig = serde_json::from_value(field("network")?)?;
        let config: SearchConfig = serde_json::from_value(field("search")?)?;
        let mut state = SearchState::new(config, &net_cfg)?;
        state.net.load_tensors(c)?;
        state.epoch = serde_json::from_value(field("epoch")?)?;
        state.entropy = c.require("search.entropy")?.values.clone();
        if state.entropy.len() != state.epoch {
            return Err(Error::Checkpoint("entropy history does not match epoch count".into()));
        }
        state.weight_opt.step = serde_json::from_value(field("weight_adam_step")?)?;
        state.alpha_opt.step = serde_json::from_value(field("alpha_adam_step")?)?;
        let store = &state.net.store;
        for (prefix, opt) in [("adam.weight", &mut state.weight_opt), ("adam.alpha", &mut state.alpha_opt)] {
            opt.moments = read_moments(c, prefix, store)?;
        }
        let rng = field("rng")?;
        let seed: [u8; 32] = serde_json::from_value(rng["seed"].clone())?;
        let stream: u64 = serde_json::from_value(rng["stream"].clone())?;
        let word_pos: u128 = rng["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad rng word position".into()))?;
        state.rng = ChaCha8Rng::from_seed(seed);
        state.rng.set_stream(stream);
        state.rng.set_word_pos(word_pos);
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SearchState::from_container(&Container::load(path)?)
    }
}

fn read_moments(
    c: &Container,
    prefix: &str,
    store: &ParamStore,
) -> Result<std::collections::BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>> {
    let mut out = std::collections::BTreeMap::new();
    let marker = format!("{prefix}.m/");
    for t in &c.tensors {
        if let Some(name) = t.name.strip_prefix(&marker) {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter `{name}`")))?;
            let v = c.require(&format!("{prefix}.v/{name}"))?;
            if t.values.len() != store.value(id).numel() || v.values.len() != t.values.len() {
                return Err(Error::Checkpoint(format!("moment size mismatch for `{name}`")));
            }
            out.insert(id, (t.values.clone(), v.values.clone()));
        }
    }
    Ok(out)
}

/// Where and how often a search writes its checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Checkpointing {
    /// Checkpoint rewritten after every epoch, and used as the failure snapshot.
    pub path: Option<PathBuf>,
}

/// Run epochs until the entropy criterion or the epoch limit stops the search.
/// A numeric failure writes the current state to the checkpoint path first.
pub fn run_search(
    state: &mut SearchState,
    train: &Dataset,
    val: &Dataset,
    checkpointing: &Checkpointing,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<SearchOutcome> {
    if train.distinct_labels() < 2 || val.distinct_labels() < 2 {
        return Err(Error::Config("train and val sets each need at least 2 speakers".into()));
    }
    while !state.finished() {
        let before = state.clone();
        match state.run_epoch(train, val) {
            Ok(report) => on_epoch(&report),
            Err(Error::Numeric { message, .. }) => {
                let snapshot = match &checkpointing.path {
                    Some(p) => {
                        let snap = p.with_extension("failed.nmlg");
                        before.save(&snap)?;
                        Some(snap.display().to_string())
                    }
                    None => None,
                };
                return Err(Error::Numeric {
                    message: format!("epoch {}: {message}", before.epoch + 1),
                    snapshot,
                });
            }
            Err(e) => return Err(e),
        }
        if let Some(p) = &checkpointing.path {
            state.save(p)?;
        }
    }
    Ok(SearchOutcome {
        alphas: state.alphas(),
        genotypes: state.genotypes(),
        entropy: state.entropy.clone(),
        converged: state.converged(),
    })
}

/// `epoch,entropy` rows, epochs counted from 1.
pub fn entropy_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,entropy\n");
    for (i, h) in history.iter().enumerate() {
        s.push_str(&format!("{},{h}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(history: &[f64], patience: usize) -> SearchState {
        let net_cfg = NetworkConfig {
            num_cells: 3,
            init_channels: 1,
            num_speakers: 2,
            embedding_dim: 2,
            input_frames: 12,
            freq_bins: 12,
        };
        let mut s = SearchState::new(
            SearchConfig {
                entropy_patience: patience,
                epochs: 50,
                ..SearchConfig::default()
            },
            &net_cfg,
        )
        .unwrap();
        s.entropy = history.to_vec();
        s.epoch = history.len();
        s
    }

    #[test]
    fn defaults_validate() {
        SearchConfig::default().validate().unwrap();
        let bad = SearchConfig {
            entropy_patience: 50,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn convergence_needs_a_flat_window() {
        assert!(!state_with(&[10.0, 9.0, 8.0], 2).converged());
        assert!(!state_with(&[10.0, 9.0, 8.0, 7.0], 2).converged());
        assert!(state_with(&[10.0, 9.0, 8.0, 8.0, 7.999], 2).converged());
        assert!(!state_with(&[5.0, 5.0], 2).converged());
    }

    #[test]
    fn entropy_csv_counts_from_one() {
        assert_eq!(entropy_csv(&[2.5, 1.0]), "epoch,entropy\n1,2.5\n2,1\n");
    }
}
