use cellsearch::audio::{Spectrogram, UtteranceInfo, FREQ_BINS};
use cellsearch::autodiff::{GradMode, Gradients};
use cellsearch::data::{CropPolicy, Dataset, Example};
use cellsearch::network::NetworkConfig;
use cellsearch::optim::AdamState;
use cellsearch::params::{ParamGroup, ParamStore};
use cellsearch::search::{run_search, Checkpointing, SearchConfig, SearchState};
use cellsearch::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 12;

fn net_cfg(speakers: usize) -> NetworkConfig {
    NetworkConfig {
        num_cells: 3,
        init_channels: 4,
        num_speakers: speakers,
        embedding_dim: 8,
        input_frames: FRAMES,
        freq_bins: FREQ_BINS,
    }
}

/// Each label lights up its own band of bins on top of noise.
fn toy_dataset(labels: usize, per_label: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    for label in 0..labels {
        for _ in 0..per_label {
            let values = (0..FREQ_BINS * FRAMES)
                .map(|i| {
                    let bin = i / FRAMES;
                    let band = if bin / 40 == label { 2.0 } else { 0.0 };
                    band + rng.gen_range(-0.5..0.5)
                })
                .collect();
            examples.push(Example {
                spec: Spectrogram { frames: FRAMES, values, info: UtteranceInfo::default() },
                label,
            });
        }
    }
    Dataset { examples, num_classes: labels }
}

fn config(epochs: usize) -> SearchConfig {
    SearchConfig {
        epochs,
        batch_size: 2,
        weight_lr: 1e-2,
        alpha_lr: 0.1,
        entropy_patience: epochs.saturating_sub(1).max(1),
        seed: 5,
        ..SearchConfig::default()
    }
}

fn bits(store: &ParamStore, group: ParamGroup) -> Vec<u64> {
    store
        .ids_in(group)
        .into_iter()
        .flat_map(|id| store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn stats_bits(store: &ParamStore) -> Vec<u64> {
    store
        .all_stats()
        .iter()
        .flat_map(|s| s.mean.iter().chain(&s.var).map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn weight_step_leaves_alphas_and_alpha_step_leaves_weights() {
    let data = toy_dataset(3, 2, 1);
    let mut s = SearchState::new(config(2), &net_cfg(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, y) = data.batch(&[0, 3], FRAMES, CropPolicy::Center, &mut rng);

    let alphas = bits(&s.net.store, ParamGroup::Arch);
    let weights = bits(&s.net.store, ParamGroup::Weight);
    s.weight_step(&x, &y).unwrap();
    assert_eq!(bits(&s.net.store, ParamGroup::Arch), alphas);
    assert_ne!(bits(&s.net.store, ParamGroup::Weight), weights);

    let weights = bits(&s.net.store, ParamGroup::Weight);
    let stats = stats_bits(&s.net.store);
    s.alpha_step(&x, &y).unwrap();
    assert_eq!(bits(&s.net.store, ParamGroup::Weight), weights);
    assert_eq!(stats_bits(&s.net.store), stats);
    assert_ne!(bits(&s.net.store, ParamGroup::Arch), alphas);
}

#[test]
fn step_counts_follow_batches() {
    let data = toy_dataset(3, 4, 2);
    let (train, val) = data.split(0.25, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!((train.len(), val.len()), (9, 3));
    let mut s = SearchState::new(config(2), &net_cfg(3)).unwrap();
    let r = s.run_epoch(&train, &val).unwrap();
    // 9 = 2+2+2+3 and 3 = 3: a trailing single example joins the last batch.
    assert_eq!((r.weight_steps, r.alpha_steps), (4, 1));
    assert_eq!(r.epoch, 1);

    let mut capped = SearchState::new(SearchConfig { batches_per_epoch: 1, ..config(2) }, &net_cfg(3)).unwrap();
    let r = capped.run_epoch(&train, &val).unwrap();
    assert_eq!((r.weight_steps, r.alpha_steps), (1, 1));
}

#[test]
fn same_seed_is_bitwise_reproducible_and_resume_matches() {
    let data = toy_dataset(3, 2, 4);
    let (train, val) = data.split(0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let none = Checkpointing::default();

    let mut a = SearchState::new(config(2), &net_cfg(3)).unwrap();
    let out_a = run_search(&mut a, &train, &val, &none, |_| {}).unwrap();
    let mut b = SearchState::new(config(2), &net_cfg(3)).unwrap();
    let out_b = run_search(&mut b, &train, &val, &none, |_| {}).unwrap();
    assert_eq!(bits(&a.net.store, ParamGroup::Weight), bits(&b.net.store, ParamGroup::Weight));
    assert_eq!(out_a.alphas, out_b.alphas);
    assert_eq!(out_a.entropy, out_b.entropy);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("s.nmlg");
    let mut c = SearchState::new(config(2), &net_cfg(3)).unwrap();
    c.run_epoch(&train, &val).unwrap();
    c.save(&ckpt).unwrap();
    let mut resumed = SearchState::load(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 1);
    let out_c = run_search(&mut resumed, &train, &val, &none, |_| {}).unwrap();
    assert_eq!(bits(&resumed.net.store, ParamGroup::Weight), bits(&a.net.store, ParamGroup::Weight));
    assert_eq!(stats_bits(&resumed.net.store), stats_bits(&a.net.store));
    assert_eq!(out_c.alphas, out_a.alphas);
    assert_eq!(out_c.entropy, out_a.entropy);
    assert_eq!(out_c.genotypes, out_a.genotypes);
}

#[test]
fn repeated_weight_steps_lower_the_loss() {
    let data = toy_dataset(3, 2, 6);
    let mut s = SearchState::new(config(2), &net_cfg(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx, FRAMES, CropPolicy::Center, &mut rng);
    let first = s.weight_step(&x, &y).unwrap();
    let mut last = first;
    for _ in 0..15 {
        last = s.weight_step(&x, &y).unwrap();
    }
    assert!(last < 0.8 * first, "{first} -> {last}");
    assert!((first - 3f64.ln()).abs() < 0.2 * 3f64.ln(), "initial loss {first}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let id = store.add("w", ParamGroup::Weight, Tensor::randn(Shape::new(1, 1, 3, 4), 1.0, &mut rng));
    let before = store.value(id).clone();
    let mut opt = AdamState::new(0.0, 0.0);
    let mut p = before.data().to_vec();
    let g: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..5 {
        opt.step_slice(id, &mut p, &g);
    }
    assert_eq!(p, before.data());
    // A parameter with no gradient is treated as having a zero one.
    let mut opt = AdamState::new(0.1, 0.0);
    opt.step(&mut store, &[id], &Gradients::default());
    assert_eq!(store.value(id), &before);
}

#[test]
fn invalid_search_configs_are_rejected() {
    let cfg = net_cfg(3);
    for bad in [
        SearchConfig { weight_lr: 0.0, ..config(3) },
        SearchConfig { batch_size: 1, ..config(3) },
        SearchConfig { alpha_weight_decay: -1.0, ..config(3) },
        SearchConfig { val_fraction: 1.0, ..config(3) },
        SearchConfig { entropy_patience: 3, ..config(3) },
    ] {
        assert!(matches!(SearchState::new(bad, &cfg), Err(cellsearch::Error::Config(_))));
    }
    let single = toy_dataset(1, 4, 0);
    let mut s = SearchState::new(config(2), &cfg).unwrap();
    assert!(run_search(&mut s, &single, &single, &Checkpointing::default(), |_| {}).is_err());
}

// Training-mode batch statistics over one example centre every feature map, so
// global pooling sees zeros and the alphas get no signal. Two examples suffice.
#[test]
fn single_example_batches_carry_no_alpha_gradient() {
    let data = toy_dataset(2, 2, 4);
    let s = SearchState::new(config(2), &net_cfg(2)).unwrap();
    let id = s.net.alpha_param().unwrap();
    let largest = |idx: &[usize]| {
        let (x, y) = data.batch(idx, FRAMES, CropPolicy::Center, &mut ChaCha8Rng::seed_from_u64(0));
        let g = s.net.loss_gradients(&x, &y, GradMode::ARCH).unwrap();
        g.grads.param(id).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    assert!(largest(&[0]) < 1e-12);
    assert!(largest(&[0, 2]) > 1e-6);
}
