use cellsearch::arch::{derive_all, init_alphas};
use cellsearch::audio::FREQ_BINS;
use cellsearch::data::Corpus;
use cellsearch::metrics::{generate_trials, run_protocol, Protocol, TRIAL_CAP};
use cellsearch::network::{Network, NetworkConfig};
use cellsearch::synth::{synth_corpus, SynthConfig, DEVICES, LANGUAGES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net(speakers: usize, seed: u64) -> Network {
    let cfg = NetworkConfig {
        num_cells: 3,
        init_channels: 4,
        num_speakers: speakers,
        embedding_dim: 8,
        input_frames: 16,
        freq_bins: FREQ_BINS,
    };
    Network::derived(&cfg, &derive_all(&init_alphas(3, seed).unwrap()), seed).unwrap()
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let mut rows = vec![header];
    for rec in r.records() {
        rows.push(rec.unwrap().iter().map(String::from).collect());
    }
    rows
}

#[test]
fn language_matrix_is_3x3_and_stable_under_row_order() {
    let mut items = synth_corpus(&SynthConfig { num_speakers: 4, utts_per_cell: 2, seed: 11 }).unwrap();
    let net = tiny_net(4, 0);
    let corpus = Corpus::from_items(&items).unwrap();
    let m = run_protocol(&[&net], &corpus, Protocol::Language, 3).unwrap();
    assert_eq!(m.cells.len(), 3);
    assert!(m.results.iter().all(|r| r.len() == 3));
    for r in 0..3 {
        for c in 0..3 {
            assert!((0.0..=1.0).contains(&m.eer(r, c)));
            assert!(m.results[r][c].num_genuine > 0 && m.results[r][c].num_impostor > 0);
        }
    }
    let rows = parse_csv(&m.to_csv());
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][1..], LANGUAGES.map(String::from));
    for row in &rows[1..] {
        assert_eq!(row.len(), 4);
        assert!(row[1..].iter().all(|v| v.parse::<f64>().is_ok()));
    }
    assert_eq!(m.to_markdown().lines().count(), 5);

    items.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = Corpus::from_items(&items).unwrap();
    assert_eq!(run_protocol(&[&net], &shuffled, Protocol::Language, 3).unwrap(), m);
}

#[test]
fn interop_matrix_has_device_blocks() {
    let items = synth_corpus(&SynthConfig { num_speakers: 6, utts_per_cell: 10, seed: 12 }).unwrap();
    let corpus = Corpus::from_items(&items).unwrap();
    let net = tiny_net(6, 1);
    let m = run_protocol(&[&net], &corpus, Protocol::Interop, 0).unwrap();
    assert_eq!(m.cells.len(), 15);
    assert!(m.results.iter().all(|r| r.len() == 15));
    let rows = parse_csv(&m.to_csv());
    assert_eq!(rows.len(), 16);
    assert_eq!(rows[0][1], format!("{}/{}", DEVICES[0], LANGUAGES[0]));
    assert!(rows[1..].iter().all(|r| r.len() == 16 && r[1..].iter().all(|v| v.parse::<f64>().is_ok())));
    let md = m.to_markdown();
    assert_eq!(md.matches("| **d").count(), DEVICES.len());
}

#[test]
fn model_count_must_match_rows() {
    let items = synth_corpus(&SynthConfig { num_speakers: 3, utts_per_cell: 2, seed: 13 }).unwrap();
    let corpus = Corpus::from_items(&items).unwrap();
    let (a, b) = (tiny_net(3, 0), tiny_net(3, 1));
    assert!(matches!(
        run_protocol(&[&a, &b], &corpus, Protocol::Language, 0),
        Err(cellsearch::Error::Config(_))
    ));
    let per_row = run_protocol(&[&a, &b, &a], &corpus, Protocol::Language, 0).unwrap();
    let shared = run_protocol(&[&a], &corpus, Protocol::Language, 0).unwrap();
    assert_eq!(per_row.results[0], shared.results[0]);
    assert_eq!(per_row.results[2], shared.results[2]);
}

#[test]
fn trial_cap_keeps_both_labels() {
    let items = synth_corpus(&SynthConfig { num_speakers: 3, utts_per_cell: 2, seed: 14 }).unwrap();
    let rows: Vec<_> = items.iter().map(|i| i.row.clone()).collect();
    let cell = &Protocol::Language.cells()[0];
    let all = generate_trials(&rows, cell, cell, TRIAL_CAP, 0);
    let capped = generate_trials(&rows, cell, cell, 10, 0);
    assert_eq!(capped.len(), 10.min(all.len()));
    assert!(capped.iter().any(|t| t.genuine) && capped.iter().any(|t| !t.genuine));
    assert_eq!(capped, generate_trials(&rows, cell, cell, 10, 0));
    // Unordered pairs within a cell: no trial appears in both directions.
    for t in &all {
        assert!(!all.iter().any(|u| u.enrol == t.probe && u.probe == t.enrol));
    }
}
