//! Cell DAGs: two input nodes, four intermediate nodes and a concatenating output.
//!
//! Node 0 holds the preprocessed output of the previous cell and node 1 the
//! preprocessed output of the cell before it. Intermediate node `v` sums one
//! edge from every earlier node, giving 2 + 3 + 4 + 5 = 14 edges. Edges are
//! numbered by target node, then source node.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::ops::{FactorizedReduce, OpInstance, OpKind, ReluConvBn, NUM_OPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const NUM_INPUT_NODES: usize = 2;
pub const NUM_INTERMEDIATE: usize = 4;
pub const NUM_EDGES: usize = 14;

/// Index of edge `(u, v)` for intermediate node `v ∈ 2..6` and source `u < v`.
pub fn edge_index(u: usize, v: usize) -> usize {
    debug_assert!((2..6).contains(&v) && u < v);
    (v - 2) * (v + 1) / 2 + u
}

/// All `(u, v)` pairs in edge order.
pub fn edges() -> impl Iterator<Item = (usize, usize)> {
    (2..2 + NUM_INTERMEDIATE).flat_map(|v| (0..v).map(move |u| (u, v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// One selected incoming edge of an intermediate node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInput {
    pub op: OpKind,
    pub pred: usize,
}

/// Discrete cell architecture: two selected inputs for each intermediate node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub nodes: [[NodeInput; 2]; NUM_INTERMEDIATE],
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let v = i + NUM_INPUT_NODES;
            for inp in node {
                if inp.pred >= v {
                    return Err(Error::Validation(format!(
                        "node {v}: predecessor {} must be below {v}",
                        inp.pred
                    )));
                }
                if inp.op == OpKind::Zero {
                    return Err(Error::Validation(format!("node {v}: zero op is not allowed")));
                }
            }
            if node[0].pred == node[1].pred {
                return Err(Error::Validation(format!(
                    "node {v}: duplicated predecessor {}",
                    node[0].pred
                )));
            }
        }
        Ok(())
    }

    /// Every node takes skip connections from nodes 0 and 1.
    pub fn all_skip() -> Self {
        let inp = |pred| NodeInput {
            op: OpKind::SkipConnect,
            pred,
        };
        Genotype {
            nodes: [[inp(0), inp(1)]; NUM_INTERMEDIATE],
        }
    }

    /// Probability table (14 × 8) that is one-hot at the genotype's choices and
    /// one-hot on the zero op for unselected edges.
    pub fn one_hot_probs(&self) -> Vec<f64> {
        let mut p = vec![0.0; NUM_EDGES * NUM_OPS];
        for (u, v) in edges() {
            p[edge_index(u, v) * NUM_OPS + OpKind::Zero.index()] = 1.0;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let v = i + NUM_INPUT_NODES;
            for inp in node {
                let e = edge_index(inp.pred, v);
                p[e * NUM_OPS..(e + 1) * NUM_OPS].fill(0.0);
                p[e * NUM_OPS + inp.op.index()] = 1.0;
            }
        }
        p
    }
}

/// Aligns one cell input to the cell's channel count and resolution.
#[derive(Clone, Debug)]
pub enum Preprocess {
    ReluConvBn(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Preprocess::ReluConvBn(p) => p.forward(tape, x, mode),
            Preprocess::Reduce(p) => p.forward(tape, x, mode),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let (convs, bn) = match self {
            Preprocess::ReluConvBn(p) => (vec![p.conv], &p.bn),
            Preprocess::Reduce(p) => (vec![p.conv_a, p.conv_b], &p.bn),
        };
        convs.into_iter().chain(bn.scale).chain(bn.shift).collect()
    }
}

/// A mixed edge holding one instance of every candidate operation.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub ops: Vec<OpInstance>,
}

impl MixedEdge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        stride: usize,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| OpInstance::new(store, &format!("{name}.{k}"), k, channels, stride, affine, rng))
            .collect::<Result<_>>()?;
        Ok(MixedEdge { ops })
    }

    /// Σ_o probs[row, o] · o(x), with the zero op contributing nothing. The whole
    /// edge is a single checkpoint on the tape.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, probs: Var, row: usize, mode: Mode) -> Result<Var> {
        let ops = Rc::new(self.ops.clone());
        tape.checkpoint(&[x, probs], move |t, v| {
            let outs = ops
                .iter()
                .map(|op| {
                    if op.kind == OpKind::Zero {
                        Ok(None)
                    } else {
                        op.forward(t, v[0], mode).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            t.mix(&outs, v[1], row)
        })
    }

    /// Forward with an explicit probability vector, which must be a distribution.
    pub fn forward_with(&self, tape: &mut Tape<'_>, x: Var, probs: &[f64], mode: Mode) -> Result<Var> {
        check_distribution(probs)?;
        let p = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, NUM_OPS), probs.to_vec())?, false);
        self.forward(tape, x, p, 0, mode)
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.len() != NUM_OPS {
        return Err(arg_err!("expected {NUM_OPS} probabilities, got {}", probs.len()));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(arg_err!("probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(arg_err!("probabilities sum to {total}, not 1"));
    }
    Ok(())
}

/// The selected operations of a discrete cell.
#[derive(Clone, Debug)]
pub struct DiscreteEdges {
    pub genotype: Genotype,
    pub ops: Vec<[OpInstance; 2]>,
}

#[derive(Clone, Debug)]
pub enum CellEdges {
    Mixed(Vec<MixedEdge>),
    Discrete(DiscreteEdges),
}

/// One cell with its preprocessing blocks and edges.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub kind: CellKind,
    pub channels: usize,
    /// Aligns the previous cell's output (node 0).
    pub preprocess0: Preprocess,
    /// Aligns the output of the cell before that (node 1).
    pub preprocess1: Preprocess,
    pub edges: CellEdges,
}

/// Stride of edge `(u, ·)` in a cell of the given kind.
pub fn edge_stride(kind: CellKind, u: usize) -> usize {
    if kind == CellKind::Reduction && u < NUM_INPUT_NODES {
        2
    } else {
        1
    }
}

/// Everything needed to lay out one cell.
#[derive(Clone, Copy, Debug)]
pub struct CellLayout {
    pub kind: CellKind,
    pub channels: usize,
    /// Channels of the previous cell's output.
    pub c_prev: usize,
    /// Channels of the output of the cell before that.
    pub c_prev_prev: usize,
    /// Whether the previous cell halved the resolution, so node 1 must be reduced.
    pub reduce_prev_prev: bool,
    pub affine: bool,
}

impl CellSpec {
    fn preprocessors<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        l: &CellLayout,
        rng: &mut R,
    ) -> (Preprocess, Preprocess) {
        let p0 = Preprocess::ReluConvBn(ReluConvBn::new(
            store,
            &format!("{name}.pre0"),
            l.c_prev,
            l.channels,
            l.affine,
            rng,
        ));
        let p1 = if l.reduce_prev_prev {
            Preprocess::Reduce(FactorizedReduce::new(
                store,
                &format!("{name}.pre1"),
                l.c_prev_prev,
                l.channels,
                l.affine,
                rng,
            ))
        } else {
            Preprocess::ReluConvBn(ReluConvBn::new(
                store,
                &format!("{name}.pre1"),
                l.c_prev_prev,
                l.channels,
                l.affine,
                rng,
            ))
        };
        (p0, p1)
    }

    /// A continuous (supernet) cell with every candidate operation on every edge.
    pub fn mixed<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, l: CellLayout, rng: &mut R) -> Result<Self> {
        let (preprocess0, preprocess1) = Self::preprocessors(store, name, &l, rng);
        let edges = edges()
            .map(|(u, v)| {
                MixedEdge::new(
                    store,
                    &format!("{name}.e{u}{v}"),
                    l.channels,
                    edge_stride(l.kind, u),
                    l.affine,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(CellSpec {
            kind: l.kind,
            channels: l.channels,
            preprocess0,
            preprocess1,
            edges: CellEdges::Mixed(edges),
        })
    }

    /// A discrete cell realising `genotype`.
    pub fn discrete<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        l: CellLayout,
        genotype: &Genotype,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.validate()?;
        let (preprocess0, preprocess1) = Self::preprocessors(store, name, &l, rng);
        let mut ops = Vec::with_capacity(NUM_INTERMEDIATE);
        for (i, node) in genotype.nodes.iter().enumerate() {
            let v = i + NUM_INPUT_NODES;
            let make = |store: &mut ParamStore, rng: &mut R, inp: &NodeInput| {
                OpInstance::new(
                    store,
                    &format!("{name}.n{v}.from{}.{}", inp.pred, inp.op),
                    inp.op,
                    l.channels,
                    edge_stride(l.kind, inp.pred),
                    l.affine,
                    rng,
                )
            };
            let a = make(store, rng, &node[0])?;
            let b = make(store, rng, &node[1])?;
            ops.push([a, b]);
        }
        Ok(CellSpec {
            kind: l.kind,
            channels: l.channels,
            preprocess0,
            preprocess1,
            edges: CellEdges::Discrete(DiscreteEdges {
                genotype: genotype.clone(),
                ops,
            }),
        })
    }

    /// A discrete cell that reuses this mixed cell's preprocessing and the
    /// selected operations' parameters.
    pub fn select(&self, genotype: &Genotype) -> Result<Self> {
        genotype.validate()?;
        let CellEdges::Mixed(mixed) = &self.edges else {
            return Err(arg_err!("select needs a continuous cell"));
        };
        let ops = genotype
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let v = i + NUM_INPUT_NODES;
                node.map(|inp| mixed[edge_index(inp.pred, v)].ops[inp.op.index()].clone())
            })
            .collect();
        Ok(CellSpec {
            kind: self.kind,
            channels: self.channels,
            preprocess0: self.preprocess0.clone(),
            preprocess1: self.preprocess1.clone(),
            edges: CellEdges::Discrete(DiscreteEdges {
                genotype: genotype.clone(),
                ops,
            }),
        })
    }

    fn input_nodes(&self, tape: &mut Tape<'_>, s0: Var, s1: Var, mode: Mode) -> Result<(Var, Var)> {
        let n0 = self.preprocess0.forward(tape, s0, mode)?;
        let n1 = self.preprocess1.forward(tape, s1, mode)?;
        let (a, b) = (tape.shape(n0), tape.shape(n1));
        if (a.h(), a.w()) != (b.h(), b.w()) {
            return Err(dim_err!("cell inputs disagree after preprocessing: {a} vs {b}"));
        }
        Ok((n0, n1))
    }

    /// Continuous forward. `probs` is a probability table whose rows
    /// `row_base .. row_base + 14` belong to this cell.
    pub fn forward_continuous(
        &self,
        tape: &mut Tape<'_>,
        s0: Var,
        s1: Var,
        probs: Var,
        row_base: usize,
        mode: Mode,
    ) -> Result<Var> {
        let CellEdges::Mixed(mixed) = &self.edges else {
            return Err(arg_err!("continuous forward on a discrete cell"));
        };
        let (n0, n1) = self.input_nodes(tape, s0, s1, mode)?;
        let mut nodes = vec![n0, n1];
        for v in NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE {
            let mut terms = Vec::with_capacity(v);
            for (u, &src) in nodes.iter().enumerate() {
                let e = edge_index(u, v);
                terms.push(mixed[e].forward(tape, src, probs, row_base + e, mode)?);
            }
            let sum = tape.add_n(&terms)?;
            nodes.push(sum);
        }
        tape.concat_channels(&nodes[NUM_INPUT_NODES..])
    }

    /// Continuous forward with an explicit 14 × 8 probability table.
    pub fn forward_with_probs(
        &self,
        tape: &mut Tape<'_>,
        s0: Var,
        s1: Var,
        probs: &[f64],
        mode: Mode,
    ) -> Result<Var> {
        if probs.len() != NUM_EDGES * NUM_OPS {
            return Err(arg_err!("expected a 14x8 probability table, got {} values", probs.len()));
        }
        for row in probs.chunks(NUM_OPS) {
            check_distribution(row)?;
        }
        let p = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, NUM_EDGES, NUM_OPS), probs.to_vec())?,
            false,
        );
        self.forward_continuous(tape, s0, s1, p, 0, mode)
    }

    /// Discrete forward: each intermediate node sums its two selected branches.
    pub fn forward_discrete(&self, tape: &mut Tape<'_>, s0: Var, s1: Var, mode: Mode) -> Result<Var> {
        let CellEdges::Discrete(d) = &self.edges else {
            return Err(arg_err!("discrete forward on a continuous cell"));
        };
        let (n0, n1) = self.input_nodes(tape, s0, s1, mode)?;
        let mut nodes = vec![n0, n1];
        for (i, node) in d.genotype.nodes.iter().enumerate() {
            let mut terms = [n0; 2];
            for (j, inp) in node.iter().enumerate() {
                let op = &d.ops[i][j];
                let src = nodes[inp.pred];
                terms[j] = if op.is_trivial() {
                    op.forward(tape, src, mode)?
                } else {
                    let op = op.clone();
                    tape.checkpoint(&[src], move |t, v| op.forward(t, v[0], mode))?
                };
            }
            let sum = tape.add_n(&terms)?;
            nodes.push(sum);
        }
        tape.concat_channels(&nodes[NUM_INPUT_NODES..])
    }

    pub fn forward(&self, tape: &mut Tape<'_>, s0: Var, s1: Var, probs: Option<(Var, usize)>, mode: Mode) -> Result<Var> {
        match (&self.edges, probs) {
            (CellEdges::Mixed(_), Some((p, base))) => self.forward_continuous(tape, s0, s1, p, base, mode),
            (CellEdges::Mixed(_), None) => Err(arg_err!("a mixed cell needs edge probabilities")),
            (CellEdges::Discrete(_), _) => self.forward_discrete(tape, s0, s1, mode),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.preprocess0.param_ids();
        ids.extend(self.preprocess1.param_ids());
        match &self.edges {
            CellEdges::Mixed(es) => {
                for e in es {
                    for op in &e.ops {
                        ids.extend(op.param_ids());
                    }
                }
            }
            CellEdges::Discrete(d) => {
                for pair in &d.ops {
                    for op in pair {
                        ids.extend(op.param_ids());
                    }
                }
            }
        }
        ids
    }
}
