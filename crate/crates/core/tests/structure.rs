use cellsearch::arch::{
    derive_genotype, init_alphas, max_entropy, network_entropy, reduction_positions, AlphaSet, SLICE_LEN,
};
use cellsearch::autodiff::{GradMode, Mode, Tape};
use cellsearch::cell::{edges, CellKind, CellLayout, CellSpec, Genotype, NUM_EDGES};
use cellsearch::network::{alpha_count, Network, NetworkConfig};
use cellsearch::ops::{OpKind, NUM_OPS};
use cellsearch::params::ParamStore;
use cellsearch::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cell_has_fourteen_edges() {
    assert_eq!(NUM_EDGES, 14);
    assert_eq!(edges().count(), 14);
    assert_eq!(NUM_OPS, 8);
}

#[test]
fn alpha_shapes_for_eight_cells() {
    let a = AlphaSet::zeros(8).unwrap();
    assert_eq!(a.normal_shape(), [6, 14, 8]);
    assert_eq!(a.reduction_shape(), [2, 14, 8]);
    assert_eq!(alpha_count(8), 8 * 14 * 8);
}

#[test]
fn reduction_cells_sit_at_two_and_five() {
    assert_eq!(reduction_positions(8), (2, 5));
    let cfg = NetworkConfig {
        num_cells: 8,
        ..NetworkConfig::default()
    };
    let kinds: Vec<CellKind> = cfg.layouts(true).iter().map(|l| l.kind).collect();
    for (p, k) in kinds.iter().enumerate() {
        assert_eq!(*k == CellKind::Reduction, p == 2 || p == 5, "position {p}");
    }
}

#[test]
fn uniform_entropy_is_closed_form() {
    for n in [3, 8, 20] {
        let h = network_entropy(&AlphaSet::zeros(n).unwrap());
        let expect = n as f64 * 14.0 * 8f64.ln();
        assert!((h - expect).abs() < 1e-6, "{h} vs {expect}");
        assert!((max_entropy(n) - expect).abs() < 1e-6);
    }
    assert!((network_entropy(&AlphaSet::zeros(8).unwrap()) - 232.8975).abs() < 1e-4);
}

#[test]
fn cell_output_has_four_times_the_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let mut store = ParamStore::new();
        let l = CellLayout {
            kind,
            channels: 3,
            c_prev: 5,
            c_prev_prev: 6,
            reduce_prev_prev: false,
            affine: false,
        };
        let cell = CellSpec::mixed(&mut store, "c", l, &mut rng).unwrap();
        let mut tape = Tape::new(&store, GradMode::NONE);
        let s0 = tape.leaf(Tensor::randn(Shape::new(1, 5, 8, 8), 1.0, &mut rng), false);
        let s1 = tape.leaf(Tensor::randn(Shape::new(1, 6, 8, 8), 1.0, &mut rng), false);
        let probs = vec![1.0 / 8.0; 14 * 8];
        let out = cell.forward_with_probs(&mut tape, s0, s1, &probs, Mode::Eval).unwrap();
        let s = tape.shape(out);
        assert_eq!(s.c(), 12);
        let side = if kind == CellKind::Reduction { 4 } else { 8 };
        assert_eq!((s.h(), s.w()), (side, side));
    }
}

#[test]
fn forward_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, t) in [(3, 100), (3, 300), (8, 100)] {
        let cfg = NetworkConfig {
            num_cells: n,
            init_channels: 2,
            num_speakers: 5,
            embedding_dim: 6,
            input_frames: t,
            freq_bins: 20,
        };
        let alphas = init_alphas(n, 0).unwrap();
        let net = Network::derived(&cfg, &cellsearch::arch::derive_all(&alphas), 0).unwrap();
        let x = Tensor::randn(Shape::new(2, 1, 20, t), 1.0, &mut rng);
        let logits = net.logits(&x).unwrap();
        assert_eq!((logits.len(), logits[0].len()), (2, 5));
        let emb = net.embeddings(&x).unwrap();
        assert_eq!(emb[0].len(), 6);
    }
}

fn check_genotype(g: &Genotype) {
    for (i, node) in g.nodes.iter().enumerate() {
        let v = i + 2;
        assert_ne!(node[0].pred, node[1].pred, "node {v} repeats a predecessor");
        for inp in node {
            assert!(inp.pred < v);
            assert_ne!(inp.op, OpKind::Zero);
        }
    }
}

#[test]
fn random_slices_derive_valid_shift_invariant_genotypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..10_000 {
        let scale = [0.01, 1.0, 10.0][trial % 3];
        let slice: Vec<f64> = (0..SLICE_LEN).map(|_| rng.gen_range(-scale..scale)).collect();
        let g = derive_genotype(&slice);
        check_genotype(&g);
        let mut shifted = slice.clone();
        for row in shifted.chunks_mut(NUM_OPS) {
            let c = rng.gen_range(-5.0..5.0);
            row.iter_mut().for_each(|v| *v += c);
        }
        assert_eq!(derive_genotype(&shifted), g, "trial {trial}");
    }
}

#[test]
fn zero_dominated_slice_still_derives_real_ops() {
    let mut slice = vec![0.0; SLICE_LEN];
    for row in slice.chunks_mut(NUM_OPS) {
        row[OpKind::Zero.index()] = 50.0;
    }
    check_genotype(&derive_genotype(&slice));
}
