//! Deterministic synthetic multilingual corpus.
//!
//! Speakers are source-filter voices: a glottal pulse train at the speaker's
//! pitch through three resonators placed relative to the speaker's formants.
//! A language is a Markov chain over a shared vowel inventory, so the same
//! speaker keeps their voice across languages while the phone sequences differ.
//! Devices are fixed short FIR colourings; sessions set the noise floor.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{quantize, write_wav, Utterance, UtteranceInfo, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::parallel::map_indices;

pub const LANGUAGES: [&str; 3] = ["A", "B", "C"];
pub const DEVICES: [&str; 5] = ["d1", "d2", "d3", "d4", "d5"];
pub const TEST_FRACTION: f64 = 0.2;
pub const MANIFEST: &str = "manifest.csv";

const VOWELS: usize = 8;
const FS: f64 = SAMPLE_RATE as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_cell: usize,
    pub seed: u64,
}

/// One manifest line. `path` is relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub speaker: String,
    pub language: String,
    pub device: String,
    pub session: String,
    pub split: String,
}

impl ManifestRow {
    pub fn info(&self) -> UtteranceInfo {
        UtteranceInfo {
            speaker: self.speaker.clone(),
            language: self.language.clone(),
            device: self.device.clone(),
            session: self.session.clone(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.split == "train"
    }
}

#[derive(Clone, Debug)]
struct Voice {
    f0: f64,
    formants: [f64; 3],
    tilt: f64,
}

#[derive(Clone, Debug)]
struct Language {
    transitions: Vec<[f64; VOWELS]>,
    mean_segment_ms: f64,
}

/// Formant multipliers of the shared vowel inventory.
fn vowel_inventory() -> [[f64; 3]; VOWELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x766f_7765_6c73);
    let mut out = [[1.0; 3]; VOWELS];
    for v in out.iter_mut() {
        for m in v.iter_mut() {
            *m = rng.gen_range(0.6..1.5);
        }
    }
    out
}

fn device_filter(index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6465_7669_6365 + index as u64);
    let mut h = vec![1.0];
    h.extend((0..4).map(|_| rng.gen_range(-0.3..0.3)));
    let norm: f64 = h.iter().map(|v: &f64| v.abs()).sum();
    h.iter().map(|v| v / norm).collect()
}

fn sample_voice(rng: &mut ChaCha8Rng) -> Voice {
    let scale = rng.gen_range(0.85..1.2);
    let mut jitter = || rng.gen_range(0.9..1.1);
    let formants = [500.0 * scale * jitter(), 1500.0 * scale * jitter(), 2500.0 * scale * jitter()];
    Voice {
        f0: rng.gen_range(80.0..250.0),
        formants,
        tilt: rng.gen_range(0.85..0.97),
    }
}

fn sample_language(rng: &mut ChaCha8Rng) -> Language {
    let gamma = Gamma::new(0.3, 1.0).expect("valid gamma");
    let transitions = (0..VOWELS)
        .map(|_| {
            let mut row = [0.0; VOWELS];
            for p in row.iter_mut() {
                *p = gamma.sample(rng) + 1e-3;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect();
    Language {
        transitions,
        mean_segment_ms: rng.gen_range(70.0..140.0),
    }
}

fn next_vowel(row: &[f64; VOWELS], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    VOWELS - 1
}

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bandwidth: f64) -> f64 {
        let r = (-PI * bandwidth / FS).exp();
        let c = 2.0 * r * (2.0 * PI * freq / FS).cos();
        let y = x * (1.0 - c + r * r) + c * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn render(
    voice: &Voice,
    lang: &Language,
    device: &[f64],
    session: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let inventory = vowel_inventory();
    let n = (rng.gen_range(1.0..3.0) * FS) as usize;
    // Formant target per sample, with 25 ms glides between segments and short pauses.
    let mut targets = Vec::with_capacity(n);
    let mut voiced = Vec::with_capacity(n);
    let mut vowel = rng.gen_range(0..VOWELS);
    let mut current = voice.formants;
    let glide = (0.025 * FS) as usize;
    while targets.len() < n {
        let ms = lang.mean_segment_ms * rng.gen_range(0.6..1.4);
        let len = (ms * 1e-3 * FS) as usize;
        let goal: [f64; 3] = std::array::from_fn(|i| voice.formants[i] * inventory[vowel][i]);
        let start = current;
        for s in 0..len {
            let a = (s as f64 / glide as f64).min(1.0);
            targets.push(std::array::from_fn(|i| start[i] + a * (goal[i] - start[i])));
            voiced.push(true);
        }
        current = goal;
        if rng.gen_bool(0.2) {
            let pause = (rng.gen_range(0.04..0.1) * FS) as usize;
            for _ in 0..pause {
                targets.push(current);
                voiced.push(false);
            }
        }
        vowel = next_vowel(&lang.transitions[vowel], rng);
    }
    targets.truncate(n);
    voiced.truncate(n);

    let vibrato_rate = rng.gen_range(3.0..6.0);
    let vibrato_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    let mut glottal = 0.0;
    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    let bandwidths = [80.0, 110.0, 150.0];
    let mut speech = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / FS;
        let f0 = voice.f0 * (1.0 + 0.03 * (2.0 * PI * vibrato_rate * t + vibrato_phase).sin());
        phase += f0 / FS;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let aspiration: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
        let source = if voiced[i] { pulse + aspiration } else { 0.1 * aspiration };
        glottal = source + voice.tilt * glottal;
        let mut x = glottal;
        for (k, r) in res.iter_mut().enumerate() {
            x = r.step(x, targets[i][k], bandwidths[k]);
        }
        speech.push(x);
    }

    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            device
                .iter()
                .enumerate()
                .filter(|&(k, _)| k <= i)
                .map(|(k, h)| h * speech[i - k])
                .sum()
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = rng.gen_range(0.3..0.7) / peak;
    let snr_db = 35.0 - 5.0 * (session % 3) as f64;
    let noise = 10f64.powf(-snr_db / 20.0) * 0.5;
    for v in out.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = f64::from(quantize((*v * gain + noise * e).clamp(-1.0, 1.0))) / 32768.0;
    }
    out
}

/// A generated utterance with its manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub row: ManifestRow,
    pub utterance: Utterance,
}

/// Generate the whole corpus in memory. Samples are already 16-bit quantised.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<CorpusItem>> {
    if cfg.num_speakers < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 2 speakers, got {}",
            cfg.num_speakers
        )));
    }
    if cfg.utts_per_cell < 1 {
        return Err(Error::Config("utts_per_cell must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let voices: Vec<Voice> = (0..cfg.num_speakers).map(|_| sample_voice(&mut rng)).collect();
    let langs: Vec<Language> = LANGUAGES.iter().map(|_| sample_language(&mut rng)).collect();
    let filters: Vec<Vec<f64>> = (0..DEVICES.len()).map(device_filter).collect();

    let mut rows = Vec::new();
    for s in 0..cfg.num_speakers {
        for (l, lang) in LANGUAGES.iter().enumerate() {
            for (d, dev) in DEVICES.iter().enumerate() {
                for u in 0..cfg.utts_per_cell {
                    let speaker = format!("spk{s:03}");
                    rows.push((
                        (s, l, d, u),
                        ManifestRow {
                            path: format!("wav/{speaker}_{lang}_{dev}_{:02}.wav", u + 1),
                            speaker,
                            language: lang.to_string(),
                            device: dev.to_string(),
                            session: format!("{}", u + 1),
                            split: String::new(),
                        },
                    ));
                }
            }
        }
    }
    let test = test_selection(&rows.iter().map(|(k, _)| (k.0, k.1)).collect::<Vec<_>>(), cfg.seed);

    let audio = map_indices(rows.len(), |i| {
        let ((s, l, d, u), _) = rows[i];
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(i as u64 + 1);
        render(&voices[s], &langs[l], &filters[d], u, &mut r)
    });
    Ok(rows
        .into_iter()
        .zip(audio)
        .zip(test)
        .map(|(((_, mut row), samples), is_test)| {
            row.split = if is_test { "test" } else { "train" }.to_string();
            let info = row.info();
            CorpusItem {
                row,
                utterance: Utterance::new(samples, info),
            }
        })
        .collect())
}

/// Seeded 80/20 choice stratified by (speaker, language).
fn test_selection(groups: &[(usize, usize)], seed: u64) -> Vec<bool> {
    let mut by_group: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(*g).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6c69_74);
    let mut test = vec![false; groups.len()];
    for members in by_group.values_mut() {
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * TEST_FRACTION).round() as usize;
        let k = k.min(members.len() - 1);
        for &i in &members[..k] {
            test[i] = true;
        }
    }
    test
}

/// Write WAV files and `manifest.csv` under `dir`.
pub fn write_corpus(items: &[CorpusItem], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("wav"))?;
    for item in items {
        write_wav(&dir.join(&item.row.path), &item.utterance.samples)?;
    }
    let path = dir.join(MANIFEST);
    write_manifest(&path, items.iter().map(|i| &i.row))?;
    Ok(path)
}

pub fn write_manifest<'a>(path: &Path, rows: impl IntoIterator<Item = &'a ManifestRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_size_and_labels() {
        let items = synth_corpus(&SynthConfig {
            num_speakers: 2,
            utts_per_cell: 1,
            seed: 1,
        })
        .unwrap();
        assert_eq!(items.len(), 2 * 3 * 5);
        for it in &items {
            let secs = it.utterance.samples.len() as f64 / FS;
            assert!((1.0..3.0).contains(&secs));
            assert!(it.utterance.samples.iter().all(|s| (-1.0..1.0).contains(s)));
        }
        assert_eq!(items.iter().filter(|i| i.row.split == "test").count(), 6);
    }

    #[test]
    fn too_few_speakers_is_rejected() {
        let cfg = SynthConfig {
            num_speakers: 1,
            utts_per_cell: 2,
            seed: 0,
        };
        assert!(matches!(synth_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn device_filters_are_normalised_and_distinct() {
        let fs: Vec<_> = (0..5).map(device_filter).collect();
        for f in &fs {
            assert!((f.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_ne!(fs[0], fs[1]);
    }
}
