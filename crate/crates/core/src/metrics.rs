//! Equal error rate and the cross-language / cross-device protocol matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{arg_err, Error, Result};
use crate::network::Network;
use crate::synth::{ManifestRow, DEVICES, LANGUAGES};
use crate::train::{cosine_score, embed_all, partition_scores, Trial};

pub const TRIAL_CAP: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub num_genuine: usize,
    pub num_impostor: usize,
}

/// Error rates at threshold `t`: impostors accepted (score ≥ t) and genuine
/// trials rejected (score < t).
fn rates(sorted_gen: &[f64], sorted_imp: &[f64], t: f64) -> (f64, f64) {
    let rejected = sorted_gen.partition_point(|&s| s < t);
    let accepted = sorted_imp.len() - sorted_imp.partition_point(|&s| s < t);
    (
        accepted as f64 / sorted_imp.len() as f64,
        rejected as f64 / sorted_gen.len() as f64,
    )
}

/// Sweep every distinct score as a threshold (plus one above the maximum) and
/// interpolate linearly where FMR − FNMR changes sign.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(arg_err!(
            "EER needs genuine and impostor scores, got {} and {}",
            genuine.len(),
            impostor.len()
        ));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(arg_err!("non-finite score"));
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = g.iter().chain(&i).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let top = *cands.last().expect("non-empty");
    cands.push(top + 1e-6 * (1.0 + top.abs()));

    let result = |eer: f64, threshold: f64| EerResult {
        eer,
        threshold,
        num_genuine: g.len(),
        num_impostor: i.len(),
    };
    let (mut prev_t, (mut prev_fmr, mut prev_fnmr)) = (cands[0], rates(&g, &i, cands[0]));
    for &t in &cands {
        let (fmr, fnmr) = rates(&g, &i, t);
        let d = fmr - fnmr;
        if d == 0.0 {
            return Ok(result(fmr, t));
        }
        if d < 0.0 {
            let d0 = prev_fmr - prev_fnmr;
            let lambda = d0 / (d0 - d);
            return Ok(result(
                prev_fmr + lambda * (fmr - prev_fmr),
                prev_t + lambda * (t - prev_t),
            ));
        }
        prev_t = t;
        prev_fmr = fmr;
        prev_fnmr = fnmr;
    }
    unreachable!("FMR − FNMR reaches −1 above the largest score")
}

/// A protocol axis cell: a language, optionally restricted to one device.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub device: Option<String>,
    pub language: String,
}

impl CellKey {
    pub fn matches(&self, row: &ManifestRow) -> bool {
        row.language == self.language && self.device.as_ref().map_or(true, |d| *d == row.device)
    }

    pub fn label(&self) -> String {
        match &self.device {
            Some(d) => format!("{d}/{}", self.language),
            None => self.language.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Enrol in one language, probe in another.
    Language,
    /// Enrol on one device and language, probe on another.
    Interop,
}

impl Protocol {
    /// Axis cells, device-major for the interoperability layout.
    pub fn cells(self) -> Vec<CellKey> {
        match self {
            Protocol::Language => LANGUAGES
                .iter()
                .map(|l| CellKey {
                    device: None,
                    language: l.to_string(),
                })
                .collect(),
            Protocol::Interop => DEVICES
                .iter()
                .flat_map(|d| {
                    LANGUAGES.iter().map(move |l| CellKey {
                        device: Some(d.to_string()),
                        language: l.to_string(),
                    })
                })
                .collect(),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(Protocol::Language),
            "interop" => Ok(Protocol::Interop),
            other => Err(Error::Config(format!("unknown protocol `{other}` (language|interop)"))),
        }
    }
}

/// Genuine and impostor pairs between two cells of the test rows. Within one
/// cell every unordered pair of distinct utterances is used; across cells
/// every (enrol, probe) combination. Each label is subsampled with a seeded
/// shuffle so the total stays within `cap`; output order is canonical.
pub fn generate_trials(rows: &[ManifestRow], enrol: &CellKey, probe: &CellKey, cap: usize, seed: u64) -> Vec<Trial> {
    let pick = |c: &CellKey| {
        let mut v: Vec<&ManifestRow> = rows.iter().filter(|r| c.matches(r)).collect();
        v.sort_by(|a, b| a.path.cmp(&b.path));
        v
    };
    let es = pick(enrol);
    let ps = pick(probe);
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    let same_cell = enrol == probe;
    for (a, e) in es.iter().enumerate() {
        let start = if same_cell { a + 1 } else { 0 };
        for p in &ps[start.min(ps.len())..] {
            if e.path == p.path {
                continue;
            }
            let t = Trial {
                genuine: e.speaker == p.speaker,
                enrol: e.path.clone(),
                probe: p.path.clone(),
            };
            if t.genuine {
                genuine.push(t);
            } else {
                impostor.push(t);
            }
        }
    }
    if genuine.len() + impostor.len() > cap {
        let keep_g = genuine.len().min(cap / 2);
        let keep_i = impostor.len().min(cap - keep_g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        subsample(&mut genuine, keep_g, &mut rng);
        subsample(&mut impostor, keep_i, &mut rng);
    }
    genuine.extend(impostor);
    genuine
}

fn subsample(v: &mut Vec<Trial>, keep: usize, rng: &mut ChaCha8Rng) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    *v = idx.into_iter().map(|i| v[i].clone()).collect();
}

/// EER for every (enrol cell, probe cell) pair of a protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMatrix {
    pub protocol: Protocol,
    pub cells: Vec<CellKey>,
    /// Row = enrol cell, column = probe cell.
    pub results: Vec<Vec<EerResult>>,
}

impl ProtocolMatrix {
    pub fn eer(&self, row: usize, col: usize) -> f64 {
        self.results[row][col].eer
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("enrol");
        for c in &self.cells {
            write!(s, ",{}", c.label()).unwrap();
        }
        s.push('\n');
        for (r, row) in self.cells.iter().zip(&self.results) {
            s.push_str(&r.label());
            for e in row {
                write!(s, ",{:.2}", 100.0 * e.eer).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Markdown table in percent. The interoperability layout groups rows into
    /// one block per enrolment device, with probe columns grouped by device.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Enrolled on ↓ / Probed on → |");
        for c in &self.cells {
            write!(s, " {} |", c.label()).unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.cells.len()));
        s.push('\n');
        let mut current_device: Option<&str> = None;
        for (r, row) in self.cells.iter().zip(&self.results) {
            if let Some(d) = r.device.as_deref() {
                if current_device != Some(d) {
                    write!(s, "| **{d}** |").unwrap();
                    s.push_str(&" |".repeat(self.cells.len()));
                    s.push('\n');
                    current_device = Some(d);
                }
            }
            write!(s, "| {} |", r.language).unwrap();
            for e in row {
                write!(s, " {:.2} |", 100.0 * e.eer).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Fill every cell of `protocol` using the test split of `corpus`. `models` holds
/// either one network for all rows or one per enrolment cell.
pub fn run_protocol(models: &[&Network], corpus: &Corpus, protocol: Protocol, seed: u64) -> Result<ProtocolMatrix> {
    let cells = protocol.cells();
    if models.len() != 1 && models.len() != cells.len() {
        return Err(Error::Config(format!(
            "{:?} protocol needs 1 or {} models, got {}",
            protocol,
            cells.len(),
            models.len()
        )));
    }
    let test: Vec<usize> = corpus.indices_where(|r| !r.is_train());
    let rows: Vec<ManifestRow> = test.iter().map(|&i| corpus.rows[i].clone()).collect();
    let specs: Vec<_> = test.iter().map(|&i| &corpus.spectrograms[i]).collect();
    let mut cache: BTreeMap<usize, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut results = Vec::with_capacity(cells.len());
    for (r, enrol) in cells.iter().enumerate() {
        let m = if models.len() == 1 { 0 } else { r };
        if !cache.contains_key(&m) {
            let emb = embed_all(models[m], &specs)?;
            cache.insert(m, rows.iter().map(|r| r.path.as_str()).zip(emb).collect());
        }
        let emb = &cache[&m];
        let mut row = Vec::with_capacity(cells.len());
        for (c, probe) in cells.iter().enumerate() {
            let trials = generate_trials(&rows, enrol, probe, TRIAL_CAP, seed ^ ((r * cells.len() + c) as u64));
            let scores = trials
                .iter()
                .map(|t| cosine_score(&emb[t.enrol.as_str()], &emb[t.probe.as_str()]))
                .collect::<Result<Vec<_>>>()?;
            let (g, i) = partition_scores(&trials, &scores);
            if g.is_empty() || i.is_empty() {
                return Err(Error::Validation(format!(
                    "cell enrol {} / probe {} has {} genuine and {} impostor trials",
                    enrol.label(),
                    probe.label(),
                    g.len(),
                    i.len()
                )));
            }
            row.push(compute_eer(&g, &i)?);
        }
        results.push(row);
    }
    Ok(ProtocolMatrix {
        protocol,
        cells,
        results,
    })
}
