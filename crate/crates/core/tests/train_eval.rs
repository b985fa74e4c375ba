use std::collections::BTreeMap;

use cellsearch::arch::{derive_all, init_alphas};
use cellsearch::audio::{Spectrogram, UtteranceInfo, FREQ_BINS};
use cellsearch::data::{Dataset, Example};
use cellsearch::metrics::compute_eer;
use cellsearch::network::{Network, NetworkConfig};
use cellsearch::train::{
    cosine_score, format_trials, loss_csv, parse_trials, partition_scores, score_trials, scores_csv, TrainConfig,
    Trainer, Trial,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
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

fn toy_spec(label: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
    let values = (0..FREQ_BINS * FRAMES)
        .map(|i| {
            let band = if (i / FRAMES) / 40 == label { 2.0 } else { 0.0 };
            band + rng.gen_range(-0.5..0.5)
        })
        .collect();
    Spectrogram { frames: FRAMES, values, info: UtteranceInfo::default() }
}

fn toy(labels: usize, per_label: usize, seed: u64) -> (Dataset, Vec<(String, Spectrogram)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    let mut named = Vec::new();
    for label in 0..labels {
        for u in 0..per_label {
            let spec = toy_spec(label, &mut rng);
            named.push((format!("s{label}_{u}"), spec.clone()));
            examples.push(Example { spec, label });
        }
    }
    (Dataset { examples, num_classes: labels }, named)
}

fn all_pairs(named: &[(String, Spectrogram)]) -> Vec<Trial> {
    let mut trials = Vec::new();
    for (i, (a, _)) in named.iter().enumerate() {
        for (b, _) in &named[i + 1..] {
            trials.push(Trial { genuine: a[..2] == b[..2], enrol: a.clone(), probe: b.clone() });
        }
    }
    trials
}

fn random_net(seed: u64) -> Network {
    let g = derive_all(&init_alphas(3, seed).unwrap());
    Network::derived(&net_cfg(3), &g, seed).unwrap()
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_free(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        k in 0.1f64..10.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ab = cosine_score(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine_score(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine_score(&scaled, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn enrol_equal_to_probe_scores_one() {
    let (_, named) = toy(3, 2, 1);
    let lookup: BTreeMap<&str, &Spectrogram> = named.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let net = random_net(0);
    let trials: Vec<Trial> = named
        .iter()
        .map(|(k, _)| Trial { genuine: true, enrol: k.clone(), probe: k.clone() })
        .collect();
    for s in score_trials(&net, &trials, &lookup).unwrap() {
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }
}

#[test]
fn empty_and_unknown_trials() {
    let (_, named) = toy(2, 1, 2);
    let lookup: BTreeMap<&str, &Spectrogram> = named.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let net = random_net(1);
    assert!(score_trials(&net, &[], &lookup).unwrap().is_empty());
    assert!(compute_eer(&[], &[0.5]).is_err());
    let bad = [Trial { genuine: false, enrol: "s0_0".into(), probe: "missing".into() }];
    let e = score_trials(&net, &bad, &lookup).unwrap_err().to_string();
    assert!(e.contains("missing"), "{e}");
}

#[test]
fn scores_follow_trial_permutations() {
    let (_, named) = toy(3, 2, 3);
    let lookup: BTreeMap<&str, &Spectrogram> = named.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let net = random_net(2);
    let trials = all_pairs(&named);
    let base = score_trials(&net, &trials, &lookup).unwrap();
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let permuted: Vec<Trial> = order.iter().map(|&i| trials[i].clone()).collect();
    let scores = score_trials(&net, &permuted, &lookup).unwrap();
    for (s, &i) in scores.iter().zip(&order) {
        assert_eq!(s.to_bits(), base[i].to_bits());
    }
    let (g, i) = partition_scores(&trials, &base);
    assert_eq!(g.len() + i.len(), trials.len());
    assert_eq!(g.len(), 3);
    let csv = scores_csv(&trials, &base);
    assert_eq!(csv.lines().count(), trials.len() + 1);
    assert_eq!(parse_trials(&format_trials(&trials)).unwrap(), trials);
}

#[test]
fn scoring_does_not_touch_the_model() {
    let (_, named) = toy(3, 2, 5);
    let lookup: BTreeMap<&str, &Spectrogram> = named.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let net = random_net(3);
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.nmlg"), dir.path().join("b.nmlg"));
    net.save(&p).unwrap();
    score_trials(&net, &all_pairs(&named), &lookup).unwrap();
    net.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn training_separates_toy_speakers() {
    let (train, _) = toy(3, 4, 6);
    let (_, held_out) = toy(3, 8, 7);
    let g = derive_all(&init_alphas(3, 0).unwrap());
    let cfg = TrainConfig { epochs: 40, batch_size: 4, lr: 3e-3, weight_decay: 0.0, seed: 1 };
    let mut t = Trainer::new(&g, cfg, &net_cfg(3)).unwrap();
    for _ in 0..40 {
        t.run_epoch(&train).unwrap();
    }
    let losses = t.losses();
    assert!(losses[losses.len() - 1] < 0.5 * losses[0], "{losses:?}");
    assert!((losses[0] - 3f64.ln()).abs() < 0.2 * 3f64.ln(), "{losses:?}");
    assert_eq!(loss_csv(&t.history).lines().count(), 41);

    let lookup: BTreeMap<&str, &Spectrogram> = held_out.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let trials = all_pairs(&held_out);
    let eer_of = |net: &Network| {
        let scores = score_trials(net, &trials, &lookup).unwrap();
        let (gs, is) = partition_scores(&trials, &scores);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (compute_eer(&gs, &is).unwrap().eer, mean(&gs) - mean(&is))
    };
    let untrained = Network::derived(&net_cfg(3), &g, 1).unwrap();
    let (eer0, gap0) = eer_of(&untrained);
    let (eer, gap) = eer_of(&t.net);
    assert!(gap > 0.2 && gap > gap0, "score gap {gap0} -> {gap}");
    assert!(eer < eer0, "eer {eer0} -> {eer}");
}

#[test]
fn bad_train_configs_are_rejected() {
    let g = derive_all(&init_alphas(3, 0).unwrap());
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
    ] {
        assert!(Trainer::new(&g, bad, &net_cfg(3)).is_err());
    }
    let (train, _) = toy(4, 1, 0);
    let mut t = Trainer::new(&g, TrainConfig { epochs: 1, ..TrainConfig::default() }, &net_cfg(3)).unwrap();
    let e = t.run_epoch(&train).unwrap_err().to_string();
    assert!(e.contains("label 3"), "{e}");
}
