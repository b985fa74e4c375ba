//! The gradient-check suite: every candidate op, a mixed edge, whole cells and a
//! small supernet, each against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::init_alphas;
use crate::autodiff::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Probe, DEFAULT_STEP, REL_FLOOR};
use crate::autodiff::{GradMode, Mode, Tape};
use crate::cell::{CellKind, CellLayout, CellSpec, MixedEdge, NUM_EDGES};
use crate::error::Result;
use crate::network::{Network, NetworkConfig};
use crate::ops::{OpInstance, OpKind, NUM_OPS};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const COMPONENT_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn pass(&self) -> bool {
        self.report.pass && self.report.max_rel_error < self.tolerance
    }
}

fn opts(seed: u64, coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        tolerance: COMPONENT_TOLERANCE,
        coords_per_tensor: coords,
        seed,
        ..GradCheckOptions::default()
    }
}

fn entry(name: String, tolerance: f64, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry { name, tolerance, report }
}

/// Each candidate op at stride 1 and 2.
pub fn check_ops(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        for stride in [1, 2] {
            let mut store = ParamStore::new();
            let op = OpInstance::new(&mut store, "op", kind, 4, stride, true, &mut rng)?;
            let x = Tensor::randn(Shape::new(2, 4, 7, 6), 1.0, &mut rng);
            let r = grad_check(&store, |t, v| op.forward(t, v[0], Mode::Train), &[x], &opts(seed, 5))?;
            out.push(entry(format!("op {kind} stride {stride}"), COMPONENT_TOLERANCE, r));
        }
    }
    Ok(out)
}

fn arch_param(store: &mut ParamStore, rows: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(
        "alpha",
        ParamGroup::Arch,
        Tensor::randn(Shape::new(1, 1, rows, NUM_OPS), 0.5, rng),
    )
}

/// A mixed edge with softmax-weighted ops, including the alpha gradient.
pub fn check_mixed_edge(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let edge = MixedEdge::new(&mut store, "edge", 4, 1, false, &mut rng)?;
    let alpha = arch_param(&mut store, 1, &mut rng);
    let x = Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng);
    let r = grad_check(
        &store,
        |t, v| {
            let a = t.param(alpha);
            let p = t.softmax_rows(a);
            edge.forward(t, v[0], p, 0, Mode::Train)
        },
        &[x],
        &opts(seed, 3),
    )?;
    Ok(entry("mixed edge".into(), COMPONENT_TOLERANCE, r))
}

/// A continuous normal and a continuous reduction cell.
pub fn check_cells(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = CellLayout {
            kind,
            channels: 3,
            c_prev: 4,
            c_prev_prev: 4,
            reduce_prev_prev: false,
            affine: false,
        };
        let cell = CellSpec::mixed(&mut store, "cell", layout, &mut rng)?;
        let alpha = arch_param(&mut store, NUM_EDGES, &mut rng);
        let s0 = Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng);
        let s1 = Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng);
        let r = grad_check(
            &store,
            |t, v| {
                let a = t.param(alpha);
                let p = t.softmax_rows(a);
                cell.forward_continuous(t, v[0], v[1], p, 0, Mode::Train)
            },
            &[s0, s1],
            &opts(seed, 1),
        )?;
        let name = match kind {
            CellKind::Normal => "normal cell",
            CellKind::Reduction => "reduction cell",
        };
        out.push(entry(name.into(), COMPONENT_TOLERANCE, r));
    }
    Ok(out)
}

/// Cross-entropy of a train-mode pass through the network.
fn network_loss(net: &Network, store: &ParamStore, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new(store, GradMode::NONE);
    let input = tape.leaf(x.clone(), false);
    let f = net.forward(&mut tape, input, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(f.logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// The whole supernet (stem to classifier loss) at `coords` random weight
/// coordinates and `coords` random alpha coordinates.
pub fn check_supernet(cfg: &NetworkConfig, coords: usize, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphas = init_alphas(cfg.num_cells, seed)?;
    let net = Network::search(cfg, &alphas, seed)?;
    let batch = 2;
    let x = Tensor::randn(Shape::new(batch, 1, cfg.freq_bins, cfg.input_frames), 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_speakers).collect();
    let g = net.loss_gradients(&x, &labels, GradMode::ALL)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        diagnostic: None,
    };
    for group in [ParamGroup::Weight, ParamGroup::Arch] {
        let ids = net.store.ids_in(group);
        let sizes: Vec<usize> = ids.iter().map(|&id| net.store.value(id).numel()).collect();
        let total: usize = sizes.iter().sum();
        for flat in sample(&mut rng, total, coords.min(total)).into_iter() {
            let (mut k, mut idx) = (0, flat);
            while idx >= sizes[k] {
                idx -= sizes[k];
                k += 1;
            }
            let id = ids[k];
            let analytic = g.grads.param(id).map_or(0.0, |v| v[idx]);
            let x0 = net.store.value(id).data()[idx];
            let mut hi = net.store.clone();
            hi.value_mut(id).data_mut()[idx] = x0 + DEFAULT_STEP;
            let mut lo = net.store.clone();
            lo.value_mut(id).data_mut()[idx] = x0 - DEFAULT_STEP;
            let step = hi.value(id).data()[idx] - lo.value(id).data()[idx];
            let numeric = (network_loss(&net, &hi, &x, &labels)? - network_loss(&net, &lo, &x, &labels)?) / step;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if !rel.is_finite() || rel >= report.max_rel_error {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some((
                    Probe::Param(net.store.get(id).name.clone()),
                    idx,
                    analytic,
                    numeric,
                ));
            }
        }
    }
    report.pass = report.max_rel_error < NETWORK_TOLERANCE;
    Ok(entry(
        format!("supernet N={} C={}", cfg.num_cells, cfg.init_channels),
        NETWORK_TOLERANCE,
        report,
    ))
}

/// The small supernet used by the suite: N=3, C=8 on a 16×16 input.
pub fn suite_network_config() -> NetworkConfig {
    NetworkConfig {
        num_cells: 3,
        init_channels: 8,
        num_speakers: 3,
        embedding_dim: 8,
        input_frames: 16,
        freq_bins: 16,
    }
}

pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = check_ops(seed)?;
    out.push(check_mixed_edge(seed)?);
    out.extend(check_cells(seed)?);
    out.push(check_supernet(&suite_network_config(), 3, seed)?);
    Ok(out)
}
