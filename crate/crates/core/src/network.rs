//! Full network: stem, stacked cells with two reductions, embedding and classifier head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{cell_slot, genotypes_from_json, genotypes_to_json, reduction_positions, AlphaSet, SLICE_LEN};
use crate::autodiff::{ConvGeom, GradMode, Gradients, Mode, Tape, Var};
use crate::cell::{edge_stride, edges, CellKind, CellLayout, CellSpec, Genotype, NUM_EDGES};
use crate::container::{Container, NamedTensor};
use crate::error::{dim_err, Error, Result};
use crate::ops::{conv_weight, op_param_count_strided, BatchNormLayer, FactorizedReduce, OpKind, ReluConvBn, NUM_OPS};
use crate::params::{BnUpdate, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Smallest spatial extent that survives two stride-2 stages with room for 3×3 windows.
pub const MIN_FRAMES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_speakers: usize,
    pub embedding_dim: usize,
    pub input_frames: usize,
    pub freq_bins: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_cells: 8,
            init_channels: 16,
            num_speakers: 103,
            embedding_dim: 128,
            input_frames: 300,
            freq_bins: 257,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_cells < 3 {
            return bad(format!("num_cells must be at least 3, got {}", self.num_cells));
        }
        if self.init_channels < 1 {
            return bad("init_channels must be positive".into());
        }
        if self.num_speakers < 2 {
            return bad(format!("num_speakers must be at least 2, got {}", self.num_speakers));
        }
        if self.embedding_dim < 1 {
            return bad("embedding_dim must be positive".into());
        }
        if self.input_frames < MIN_FRAMES || self.freq_bins < MIN_FRAMES {
            return bad(format!(
                "input must be at least {MIN_FRAMES}x{MIN_FRAMES}, got {}x{}",
                self.freq_bins, self.input_frames
            ));
        }
        let (r0, r1) = reduction_positions(self.num_cells);
        if r0 == r1 {
            return bad(format!("reduction positions coincide at {r0}"));
        }
        Ok(())
    }

    /// Operating channels of every cell: doubled at each reduction cell.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut c = self.init_channels;
        (0..self.num_cells)
            .map(|p| {
                if cell_slot(self.num_cells, p).0 == CellKind::Reduction {
                    c *= 2;
                }
                c
            })
            .collect()
    }

    /// Per-cell layouts, including which input needs spatial reduction.
    pub fn layouts(&self, affine: bool) -> Vec<CellLayout> {
        let sched = self.channel_schedule();
        let n = self.num_cells;
        let stem = self.init_channels;
        (0..n)
            .map(|k| {
                let out_ch = |j: usize| 4 * sched[j];
                let c_prev = if k >= 1 { out_ch(k - 1) } else { stem };
                let c_prev_prev = if k >= 2 { out_ch(k - 2) } else { stem };
                let reduce_prev_prev = k >= 1 && cell_slot(n, k - 1).0 == CellKind::Reduction;
                CellLayout {
                    kind: cell_slot(n, k).0,
                    channels: sched[k],
                    c_prev,
                    c_prev_prev,
                    reduce_prev_prev,
                    affine,
                }
            })
            .collect()
    }

    pub fn head_input(&self) -> usize {
        4 * self.channel_schedule()[self.num_cells - 1]
    }
}

/// Which architecture a network realises.
#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Every edge mixes all candidate operations under learned alphas.
    Search,
    /// One genotype per cell position.
    Derived(Vec<Genotype>),
}

impl Architecture {
    fn affine(&self) -> bool {
        matches!(self, Architecture::Derived(_))
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub architecture: Architecture,
    pub store: ParamStore,
    pub cells: Vec<CellSpec>,
    stem_conv: ParamId,
    stem_bn: BatchNormLayer,
    embed_w: ParamId,
    embed_b: ParamId,
    class_w: ParamId,
    class_b: ParamId,
    alphas: Option<ParamId>,
}

impl Network {
    /// Continuous supernet with alphas initialised from `alphas`.
    pub fn search(cfg: &NetworkConfig, alphas: &AlphaSet, seed: u64) -> Result<Self> {
        if alphas.num_cells != cfg.num_cells {
            return Err(Error::Config(format!(
                "alphas cover {} cells, network has {}",
                alphas.num_cells, cfg.num_cells
            )));
        }
        let mut net = Network::build(cfg, Architecture::Search, seed)?;
        net.set_alphas(alphas)?;
        Ok(net)
    }

    /// Discrete network, one genotype per cell.
    pub fn derived(cfg: &NetworkConfig, genotypes: &[Genotype], seed: u64) -> Result<Self> {
        if genotypes.len() != cfg.num_cells {
            return Err(Error::Config(format!(
                "{} genotypes for {} cells",
                genotypes.len(),
                cfg.num_cells
            )));
        }
        for (p, g) in genotypes.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Validation(format!("cell {p}: {e}")))?;
        }
        Network::build(cfg, Architecture::Derived(genotypes.to_vec()), seed)
    }

    fn build(cfg: &NetworkConfig, architecture: Architecture, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.init_channels;
        let stem_conv = conv_weight(&mut store, "stem.conv".into(), Shape::new(c, 1, 3, 3), &mut rng);
        let stem_bn = BatchNormLayer::new(&mut store, "stem.bn", c, true);
        let affine = architecture.affine();
        let mut cells = Vec::with_capacity(cfg.num_cells);
        for (k, l) in cfg.layouts(affine).into_iter().enumerate() {
            let name = format!("cell{k}");
            cells.push(match &architecture {
                Architecture::Search => CellSpec::mixed(&mut store, &name, l, &mut rng)?,
                Architecture::Derived(gs) => CellSpec::discrete(&mut store, &name, l, &gs[k], &mut rng)?,
            });
        }
        let feat = cfg.head_input();
        let emb = cfg.embedding_dim;
        let linear_w = |store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (inp as f64).sqrt();
            let t = Tensor::randn(Shape::new(out, inp, 1, 1), bound, rng);
            store.add(name, ParamGroup::Weight, t)
        };
        let embed_w = linear_w(&mut store, "head.embed.weight", emb, feat, &mut rng);
        let embed_b = store.add("head.embed.bias", ParamGroup::Weight, Tensor::zeros(Shape::new(1, emb, 1, 1)));
        let class_w = linear_w(&mut store, "head.classifier.weight", cfg.num_speakers, emb, &mut rng);
        let class_b = store.add(
            "head.classifier.bias",
            ParamGroup::Weight,
            Tensor::zeros(Shape::new(1, cfg.num_speakers, 1, 1)),
        );
        let alphas = match architecture {
            Architecture::Search => Some(store.add(
                "alphas",
                ParamGroup::Arch,
                Tensor::zeros(Shape::new(1, 1, cfg.num_cells * NUM_EDGES, NUM_OPS)),
            )),
            Architecture::Derived(_) => None,
        };
        Ok(Network {
            config: cfg.clone(),
            architecture,
            store,
            cells,
            stem_conv,
            stem_bn,
            embed_w,
            embed_b,
            class_w,
            class_b,
            alphas,
        })
    }

    pub fn is_search(&self) -> bool {
        self.alphas.is_some()
    }

    pub fn alpha_param(&self) -> Option<ParamId> {
        self.alphas
    }

    pub fn alphas(&self) -> Option<AlphaSet> {
        let id = self.alphas?;
        AlphaSet::from_table(self.config.num_cells, self.store.value(id).data()).ok()
    }

    pub fn set_alphas(&mut self, alphas: &AlphaSet) -> Result<()> {
        let id = self
            .alphas
            .ok_or_else(|| Error::Config("a derived network has no alphas".into()))?;
        if alphas.num_cells != self.config.num_cells {
            return Err(Error::Config("alpha cell count mismatch".into()));
        }
        self.store
            .value_mut(id)
            .data_mut()
            .copy_from_slice(&alphas.to_table());
        Ok(())
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.store.ids_in(ParamGroup::Weight)
    }

    /// Run the network on a `(batch, 1, freq, frames)` input.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Forward> {
        let s = tape.shape(x);
        if s.c() != 1 || s.h() < MIN_FRAMES || s.w() < MIN_FRAMES {
            return Err(dim_err!(
                "network input must be (batch, 1, >={MIN_FRAMES}, >={MIN_FRAMES}), got {s}"
            ));
        }
        let w = tape.param(self.stem_conv);
        let h = tape.conv2d(x, w, ConvGeom::new(1, 1, 1, 1))?;
        let stem = self.stem_bn.forward(tape, h, mode)?;
        let probs = self.alphas.map(|id| {
            let a = tape.param(id);
            tape.softmax_rows(a)
        });
        let (mut prev_prev, mut prev) = (stem, stem);
        for (k, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(tape, prev, prev_prev, probs.map(|p| (p, k * NUM_EDGES)), mode)?;
            prev_prev = prev;
            prev = out;
        }
        let pooled = tape.global_avg_pool(prev);
        let ew = tape.param(self.embed_w);
        let eb = tape.param(self.embed_b);
        let embedding = tape.linear(pooled, ew, Some(eb))?;
        let cw = tape.param(self.class_w);
        let cb = tape.param(self.class_b);
        let logits = tape.linear(embedding, cw, Some(cb))?;
        Ok(Forward { embedding, logits })
    }

    /// Eval-mode logits for a batch, as one row per sample.
    pub fn logits(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store, GradMode::NONE);
        let x = tape.leaf(batch.clone(), false);
        let f = self.forward(&mut tape, x, Mode::Eval)?;
        let v = tape.value(f.logits);
        Ok((0..v.shape().n()).map(|i| v.sample(i).to_vec()).collect())
    }

    /// L2-normalised eval-mode embeddings, one per sample.
    pub fn embeddings(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store, GradMode::NONE);
        let x = tape.leaf(batch.clone(), false);
        let f = self.forward(&mut tape, x, Mode::Eval)?;
        let v = tape.value(f.embedding);
        Ok((0..v.shape().n()).map(|i| normalize(v.sample(i))).collect())
    }

    /// Embedding of a single `freq × frames` spectrogram.
    pub fn extract_embedding(&self, spec: &Tensor) -> Result<Vec<f64>> {
        let s = spec.shape();
        let x = spec.clone().reshape(Shape::new(1, 1, s.h(), s.w()))?;
        Ok(self.embeddings(&x)?.remove(0))
    }

    /// Trainable scalars (architecture parameters excluded).
    pub fn count_parameters(&self) -> usize {
        self.store.count(ParamGroup::Weight)
    }

    pub fn to_container(&self) -> Result<Container> {
        let genotypes = match &self.architecture {
            Architecture::Search => serde_json::Value::Null,
            Architecture::Derived(gs) => serde_json::from_str(&genotypes_to_json(gs)?)?,
        };
        let config = serde_json::json!({
            "kind": "model",
            "network": self.config,
            "genotypes": genotypes,
        });
        let mut tensors: Vec<NamedTensor> = self
            .store
            .params()
            .iter()
            .map(|p| NamedTensor::new(p.name.clone(), p.value.shape().dims().to_vec(), p.value.data().to_vec()))
            .collect();
        for s in self.store.all_stats() {
            tensors.push(NamedTensor::vector(format!("{}.running_mean", s.name), s.mean.clone()));
            tensors.push(NamedTensor::vector(format!("{}.running_var", s.name), s.var.clone()));
        }
        Ok(Container { config, tensors })
    }

    /// Rebuild a network from a container written by [`Network::to_container`].
    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_value(
            c.config
                .get("network")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing network config".into()))?,
        )?;
        let mut net = match c.config.get("genotypes") {
            Some(v) if !v.is_null() => {
                let gs = genotypes_from_json(&v.to_string())?;
                Network::derived(&cfg, &gs, 0)?
            }
            _ => Network::build(&cfg, Architecture::Search, 0)?,
        };
        net.load_tensors(c)?;
        Ok(net)
    }

    /// Overwrite every parameter and statistic from same-named tensors in `c`.
    pub fn load_tensors(&mut self, c: &Container) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let t = c.require(&name)?;
            let dims = self.store.value(id).shape().dims();
            if t.dims != dims {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has dims {:?}, network expects {:?}",
                    t.dims, dims
                )));
            }
            self.store.value_mut(id).data_mut().copy_from_slice(&t.values);
        }
        for s in self.store.stats_mut() {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{}.{suffix}", s.name);
                let t = c
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if t.values.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("`{key}` has the wrong length")));
                }
                dst.copy_from_slice(&t.values);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_container(&Container::load(path)?)
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// Result of one train-mode forward and backward pass.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    /// Samples whose arg-max logit equals the label.
    pub correct: usize,
    pub grads: Gradients,
    pub bn_updates: Vec<BnUpdate>,
}

impl Network {
    /// Cross-entropy loss of a train-mode pass and its gradient with respect to
    /// the parameter groups selected by `grad_mode`. A non-finite loss is an error.
    pub fn loss_gradients(&self, x: &Tensor, labels: &[usize], grad_mode: GradMode) -> Result<StepGradients> {
        let mut tape = Tape::new(&self.store, grad_mode);
        let input = tape.leaf(x.clone(), false);
        let f = self.forward(&mut tape, input, Mode::Train)?;
        let loss_var = tape.softmax_cross_entropy(f.logits, labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric {
                message: format!("loss is {loss}"),
                snapshot: None,
            });
        }
        let logits = tape.value(f.logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(logits.sample(i)) == y)
            .count();
        let bn_updates = tape.take_bn_updates();
        let grads = tape.backward(loss_var)?;
        Ok(StepGradients {
            loss,
            correct,
            grads,
            bn_updates,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One line of the analytic parameter ledger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub name: String,
    pub count: usize,
}

/// Analytic per-layer parameter counts, computed from the block formulas without
/// building the network.
pub fn parameter_ledger(cfg: &NetworkConfig, arch: &Architecture) -> Result<Vec<LedgerEntry>> {
    cfg.validate()?;
    let affine = arch.affine();
    let bn = |c: usize| 2 * c;
    let mut out = Vec::new();
    let mut push = |name: String, count: usize| out.push(LedgerEntry { name, count });
    let c = cfg.init_channels;
    push("stem".into(), 9 * c + bn(c));
    for (k, l) in cfg.layouts(affine).iter().enumerate() {
        push(
            format!("cell{k}.pre0"),
            ReluConvBn::param_count(l.c_prev, l.channels, affine),
        );
        let pre1 = if l.reduce_prev_prev {
            FactorizedReduce::param_count(l.c_prev_prev, l.channels, affine)
        } else {
            ReluConvBn::param_count(l.c_prev_prev, l.channels, affine)
        };
        push(format!("cell{k}.pre1"), pre1);
        let edges_total = match arch {
            Architecture::Search => edges()
                .map(|(u, _)| {
                    OpKind::ALL
                        .iter()
                        .map(|&op| op_param_count_strided(op, l.channels, edge_stride(l.kind, u), false))
                        .sum::<usize>()
                })
                .sum(),
            Architecture::Derived(gs) => {
                let g = gs.get(k).ok_or_else(|| Error::Config(format!("no genotype for cell {k}")))?;
                g.nodes
                    .iter()
                    .flatten()
                    .map(|inp| op_param_count_strided(inp.op, l.channels, edge_stride(l.kind, inp.pred), true))
                    .sum()
            }
        };
        push(format!("cell{k}.edges"), edges_total);
    }
    let feat = cfg.head_input();
    let emb = cfg.embedding_dim;
    push("head.embed".into(), feat * emb + emb);
    push("head.classifier".into(), emb * cfg.num_speakers + cfg.num_speakers);
    Ok(out)
}

pub fn ledger_total(entries: &[LedgerEntry]) -> usize {
    entries.iter().map(|e| e.count).sum()
}

/// Number of architecture parameters in a supernet.
pub fn alpha_count(num_cells: usize) -> usize {
    num_cells * SLICE_LEN
}
