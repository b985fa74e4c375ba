//! Architecture parameters, edge softmax, entropy and genotype derivation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_in_place;
use crate::cell::{edge_index, CellKind, Genotype, NodeInput, NUM_EDGES, NUM_INPUT_NODES, NUM_INTERMEDIATE};
use crate::error::{arg_err, Error, Result};
use crate::ops::{OpKind, NUM_OPS};

/// Values per cell slice: 14 edges × 8 ops.
pub const SLICE_LEN: usize = NUM_EDGES * NUM_OPS;

/// Standard deviation of the initial Gaussian alphas.
pub const INIT_STD: f64 = 1e-3;

/// Zero-based positions of the two reduction cells in an `n`-cell network.
pub fn reduction_positions(num_cells: usize) -> (usize, usize) {
    (num_cells / 3, 2 * num_cells / 3)
}

/// Kind of the cell at `pos`, and its index among cells of that kind.
pub fn cell_slot(num_cells: usize, pos: usize) -> (CellKind, usize) {
    let (r0, r1) = reduction_positions(num_cells);
    if pos == r0 {
        (CellKind::Reduction, 0)
    } else if pos == r1 {
        (CellKind::Reduction, 1)
    } else {
        let before = usize::from(pos > r0) + usize::from(pos > r1);
        (CellKind::Normal, pos - before)
    }
}

/// Per-cell architecture parameters, split by cell kind.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSet {
    pub num_cells: usize,
    /// `(num_cells − 2) × 14 × 8`, row-major.
    pub normal: Vec<f64>,
    /// `2 × 14 × 8`, row-major.
    pub reduction: Vec<f64>,
}

impl AlphaSet {
    pub fn zeros(num_cells: usize) -> Result<Self> {
        if num_cells < 3 {
            return Err(arg_err!("a network needs at least 3 cells, got {num_cells}"));
        }
        Ok(AlphaSet {
            num_cells,
            normal: vec![0.0; (num_cells - 2) * SLICE_LEN],
            reduction: vec![0.0; 2 * SLICE_LEN],
        })
    }

    pub fn normal_shape(&self) -> [usize; 3] {
        [self.num_cells - 2, NUM_EDGES, NUM_OPS]
    }

    pub fn reduction_shape(&self) -> [usize; 3] {
        [2, NUM_EDGES, NUM_OPS]
    }

    /// The 14 × 8 slice used by the cell at network position `pos`.
    pub fn slice(&self, pos: usize) -> &[f64] {
        let (kind, i) = cell_slot(self.num_cells, pos);
        let src = match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        };
        &src[i * SLICE_LEN..(i + 1) * SLICE_LEN]
    }

    pub fn slice_mut(&mut self, pos: usize) -> &mut [f64] {
        let (kind, i) = cell_slot(self.num_cells, pos);
        let src = match kind {
            CellKind::Normal => &mut self.normal,
            CellKind::Reduction => &mut self.reduction,
        };
        &mut src[i * SLICE_LEN..(i + 1) * SLICE_LEN]
    }

    /// All slices in network-position order, `num_cells × 14 × 8`.
    pub fn to_table(&self) -> Vec<f64> {
        (0..self.num_cells).flat_map(|p| self.slice(p).to_vec()).collect()
    }

    pub fn from_table(num_cells: usize, table: &[f64]) -> Result<Self> {
        let mut a = AlphaSet::zeros(num_cells)?;
        if table.len() != num_cells * SLICE_LEN {
            return Err(arg_err!(
                "alpha table has {} values, {num_cells} cells need {}",
                table.len(),
                num_cells * SLICE_LEN
            ));
        }
        for p in 0..num_cells {
            a.slice_mut(p)
                .copy_from_slice(&table[p * SLICE_LEN..(p + 1) * SLICE_LEN]);
        }
        Ok(a)
    }

    pub fn is_finite(&self) -> bool {
        self.normal.iter().chain(&self.reduction).all(|v| v.is_finite())
    }
}

/// I.i.d. Gaussian alphas with standard deviation 1e-3, deterministic in `seed`.
pub fn init_alphas(num_cells: usize, seed: u64) -> Result<AlphaSet> {
    let mut a = AlphaSet::zeros(num_cells)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for v in a.normal.iter_mut().chain(a.reduction.iter_mut()) {
        *v = normal.sample(&mut rng);
    }
    Ok(a)
}

/// Softmax of one edge's alphas.
pub fn edge_probabilities(alpha_edge: &[f64]) -> Vec<f64> {
    let mut p = alpha_edge.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Row-wise softmax of a 14 × 8 slice.
pub fn slice_probabilities(slice: &[f64]) -> Vec<f64> {
    slice.chunks(NUM_OPS).flat_map(edge_probabilities).collect()
}

/// Shannon entropy (natural log) of one distribution, with 0·ln 0 = 0.
pub fn distribution_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn slice_entropy(slice: &[f64]) -> f64 {
    slice
        .chunks(NUM_OPS)
        .map(|e| distribution_entropy(&edge_probabilities(e)))
        .sum()
}

/// Total entropy of every edge distribution in the network.
pub fn network_entropy(alphas: &AlphaSet) -> f64 {
    (0..alphas.num_cells).map(|p| slice_entropy(alphas.slice(p))).sum()
}

/// Upper bound on [`network_entropy`]: every edge uniform.
pub fn max_entropy(num_cells: usize) -> f64 {
    (num_cells * NUM_EDGES) as f64 * (NUM_OPS as f64).ln()
}

fn best_nonzero(p: &[f64]) -> (OpKind, f64) {
    let mut best = 1;
    for o in 2..NUM_OPS {
        if p[o] > p[best] {
            best = o;
        }
    }
    (OpKind::from_index(best).unwrap(), p[best])
}

/// Derive a genotype from a probability table (14 × 8 rows summing to 1).
pub fn derive_from_probs(probs: &[f64]) -> Genotype {
    let mut nodes = [[NodeInput {
        op: OpKind::SkipConnect,
        pred: 0,
    }; 2]; NUM_INTERMEDIATE];
    for (i, node) in nodes.iter_mut().enumerate() {
        let v = i + NUM_INPUT_NODES;
        let mut cands: Vec<(usize, OpKind, f64)> = (0..v)
            .map(|u| {
                let e = edge_index(u, v);
                let (op, s) = best_nonzero(&probs[e * NUM_OPS..(e + 1) * NUM_OPS]);
                (u, op, s)
            })
            .collect();
        // Stable sort keeps the smaller predecessor first on ties.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut kept = [cands[0], cands[1]];
        kept.sort_by_key(|c| c.0);
        *node = kept.map(|(pred, op, _)| NodeInput { op, pred });
    }
    Genotype { nodes }
}

/// Top-2 incoming edges per node by strongest non-zero op, each with its best non-zero op.
pub fn derive_genotype(slice: &[f64]) -> Genotype {
    derive_from_probs(&slice_probabilities(slice))
}

/// One genotype per network position.
pub fn derive_all(alphas: &AlphaSet) -> Vec<Genotype> {
    (0..alphas.num_cells)
        .map(|p| derive_genotype(alphas.slice(p)))
        .collect()
}

/// One genotype per cell kind, derived from the confidence-weighted mean of the
/// edge probabilities of all cells of that kind, then repeated at every position.
/// A cell's weight is `max_entropy − entropy`, falling back to equal weights
/// when every cell is still uniform.
pub fn derive_shared(alphas: &AlphaSet) -> Vec<Genotype> {
    let n = alphas.num_cells;
    let shared = |kind: CellKind| {
        let positions: Vec<usize> = (0..n).filter(|&p| cell_slot(n, p).0 == kind).collect();
        let per_cell_max = NUM_EDGES as f64 * (NUM_OPS as f64).ln();
        let mut weights: Vec<f64> = positions
            .iter()
            .map(|&p| (per_cell_max - slice_entropy(alphas.slice(p))).max(0.0))
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.fill(1.0);
        }
        let total: f64 = weights.iter().sum();
        let mut mean = vec![0.0; SLICE_LEN];
        for (&p, w) in positions.iter().zip(&weights) {
            for (m, q) in mean.iter_mut().zip(slice_probabilities(alphas.slice(p))) {
                *m += w / total * q;
            }
        }
        derive_from_probs(&mean)
    };
    let normal = shared(CellKind::Normal);
    let reduction = shared(CellKind::Reduction);
    (0..n)
        .map(|p| match cell_slot(n, p).0 {
            CellKind::Normal => normal.clone(),
            CellKind::Reduction => reduction.clone(),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    kind: CellKind,
    nodes: Vec<Vec<NodeInput>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    n_cells: usize,
    cells: Vec<CellRecord>,
}

/// Serialize per-position genotypes as JSON. Cell kinds follow the reduction layout.
pub fn genotypes_to_json(genotypes: &[Genotype]) -> Result<String> {
    let n = genotypes.len();
    let file = GenotypeFile {
        n_cells: n,
        cells: genotypes
            .iter()
            .enumerate()
            .map(|(p, g)| CellRecord {
                kind: cell_slot(n, p).0,
                nodes: g.nodes.iter().map(|pair| pair.to_vec()).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

/// Parse and validate a genotype file.
pub fn genotypes_from_json(text: &str) -> Result<Vec<Genotype>> {
    let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.cells.len() != file.n_cells {
        return Err(Error::Validation(format!(
            "n_cells is {} but {} cells are listed",
            file.n_cells,
            file.cells.len()
        )));
    }
    if file.n_cells < 3 {
        return Err(Error::Validation(format!("need at least 3 cells, got {}", file.n_cells)));
    }
    file.cells
        .iter()
        .enumerate()
        .map(|(p, c)| {
            let expect = cell_slot(file.n_cells, p).0;
            if c.kind != expect {
                return Err(Error::Validation(format!(
                    "cell {p}: kind {:?} where the layout has {:?}",
                    c.kind, expect
                )));
            }
            if c.nodes.len() != NUM_INTERMEDIATE {
                return Err(Error::Validation(format!(
                    "cell {p}: expected {NUM_INTERMEDIATE} nodes, got {}",
                    c.nodes.len()
                )));
            }
            let mut nodes = [[NodeInput {
                op: OpKind::SkipConnect,
                pred: 0,
            }; 2]; NUM_INTERMEDIATE];
            for (i, pair) in c.nodes.iter().enumerate() {
                if pair.len() != 2 {
                    return Err(Error::Validation(format!(
                        "cell {p} node {}: expected 2 inputs, got {}",
                        i + NUM_INPUT_NODES,
                        pair.len()
                    )));
                }
                nodes[i] = [pair[0], pair[1]];
            }
            let g = Genotype { nodes };
            g.validate()
                .map_err(|e| Error::Validation(format!("cell {p}: {e}")))?;
            Ok(g)
        })
        .collect()
}

pub fn save_genotypes(path: &Path, genotypes: &[Genotype]) -> Result<()> {
    std::fs::write(path, genotypes_to_json(genotypes)?)?;
    Ok(())
}

pub fn load_genotypes(path: &Path) -> Result<Vec<Genotype>> {
    genotypes_from_json(&std::fs::read_to_string(path)?)
}
