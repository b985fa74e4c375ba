use cellsearch::arch::{derive_all, init_alphas, load_genotypes};
use cellsearch::cell::Genotype;
use cellsearch::network::{ledger_total, parameter_ledger, Architecture, Network, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(channels: usize) -> NetworkConfig {
    NetworkConfig {
        num_cells: 8,
        init_channels: channels,
        num_speakers: 103,
        embedding_dim: 128,
        ..NetworkConfig::default()
    }
}

fn random_genotypes(rng: &mut ChaCha8Rng) -> Vec<Genotype> {
    let alphas = init_alphas(8, rng.gen()).unwrap();
    let mut table = alphas.to_table();
    for v in table.iter_mut() {
        *v = rng.gen_range(-3.0..3.0);
    }
    derive_all(&cellsearch::arch::AlphaSet::from_table(8, &table).unwrap())
}

fn reference() -> Vec<Genotype> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference_genotype.json");
    load_genotypes(std::path::Path::new(path)).unwrap()
}

#[test]
fn runtime_tally_matches_ledger_for_random_genotypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let gs = random_genotypes(&mut rng);
        for c in [16, 64] {
            let cfg = config(c);
            let net = Network::derived(&cfg, &gs, 0).unwrap();
            let ledger = parameter_ledger(&cfg, &Architecture::Derived(gs.clone())).unwrap();
            assert_eq!(net.count_parameters(), ledger_total(&ledger), "C={c} {gs:?}");
        }
    }
}

#[test]
fn count_grows_strictly_with_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let gs = random_genotypes(&mut rng);
        let counts: Vec<usize> = [16, 32, 64]
            .iter()
            .map(|&c| Network::derived(&config(c), &gs, 0).unwrap().count_parameters())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }
}

#[test]
fn search_count_bounds_derived_count() {
    let cfg = config(16);
    let alphas = init_alphas(8, 3).unwrap();
    let search = Network::search(&cfg, &alphas, 0).unwrap();
    let search_ledger = parameter_ledger(&cfg, &Architecture::Search).unwrap();
    assert_eq!(search.count_parameters(), ledger_total(&search_ledger));
    let derived = Network::derived(&cfg, &derive_all(&alphas), 0).unwrap();
    assert!(search.count_parameters() >= derived.count_parameters());
}

#[test]
fn head_ledger_lines() {
    let cfg = config(16);
    let ledger = parameter_ledger(&cfg, &Architecture::Derived(reference())).unwrap();
    let line = |name: &str| ledger.iter().find(|e| e.name == name).unwrap().count;
    // 256 features into a 128-wide embedding, then 103 classes.
    assert_eq!(line("head.embed"), 256 * 128 + 128);
    assert_eq!(line("head.classifier"), 128 * 103 + 103);
    assert_eq!(line("head.embed") + line("head.classifier"), 46_183);
}

/// Summed by hand, layer by layer, for the shipped reference genotype at N=8, C=16.
///
/// Channel schedule 16,16,32,32,32,64,64,64; reductions at cells 2 and 5.
/// Affine BN everywhere (2 per channel). Separable unit with kernel k on C
/// channels: k²C + C² + 2C; sep conv = 2 units, dil conv = 1 unit.
#[test]
fn reference_genotype_matches_hand_ledger() {
    let hand: [(&str, usize); 11] = [
        // 3x3 conv 1→16 plus BN
        ("stem", 9 * 16 + 32),
        // pre 288 + 288, edges 1728 + 1728 + 864 + 432
        ("cell0", 5_328),
        // pre 64→16 is 1056, pre 16→16 is 288, same edges
        ("cell1", 6_096),
        // pre 2112 + 2112; max 64 + sep3 2752, 0 + 64, 64 + 0, 0 + dil5 1888
        ("cell2", 9_056),
        // pre 4160 + reduce 2112; edges 5504 + 5504 + 2752 + 1376
        ("cell3", 21_408),
        ("cell4", 23_456),
        // pre 8320 + 8320; max 128 + sep3 9600, 128, 128, dil5 5824
        ("cell5", 32_448),
        // pre 16512 + reduce 8320; sep5 11648 + dil5 5824, sep3 9600 + avg 128,
        // dil3 4800, max 128 + sep3 9600
        ("cell6", 66_560),
        ("cell7", 74_752),
        ("head.embed", 32_896),
        ("head.classifier", 13_287),
    ];
    let hand_total: usize = hand.iter().map(|(_, c)| c).sum();
    assert_eq!(hand_total, 285_463);

    let cfg = config(16);
    let gs = reference();
    let ledger = parameter_ledger(&cfg, &Architecture::Derived(gs.clone())).unwrap();
    for (name, count) in hand {
        let got: usize = ledger
            .iter()
            .filter(|e| e.name == name || e.name.starts_with(&format!("{name}.")) && name.starts_with("cell"))
            .map(|e| e.count)
            .sum();
        assert_eq!(got, count, "{name}");
    }
    let net = Network::derived(&cfg, &gs, 0).unwrap();
    assert_eq!(net.count_parameters(), hand_total);
}
