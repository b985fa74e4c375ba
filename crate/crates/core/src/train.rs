//! Training a derived network from scratch and scoring verification trials.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{crop_or_pad, Crop, Spectrogram, FREQ_BINS};
use crate::autodiff::GradMode;
use crate::cell::Genotype;
use crate::data::{minibatches, CropPolicy, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::optim::AdamState;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 48,
            lr: 0.15,
            weight_decay: 3e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "epochs and lr must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch statistics over one example carry no gradient)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    /// Sample-weighted mean loss over the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub opt: AdamState,
    pub rng: ChaCha8Rng,
    pub history: Vec<TrainEpoch>,
}

const RNG_SALT: u64 = 0x7472_6169_6e;

impl Trainer {
    pub fn new(genotypes: &[Genotype], config: TrainConfig, net_cfg: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::derived(net_cfg, genotypes, config.seed)?;
        Ok(Trainer {
            opt: AdamState::new(config.lr, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ RNG_SALT),
            config,
            net,
            history: Vec::new(),
        })
    }

    pub fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        let s = self.net.loss_gradients(x, labels, GradMode::WEIGHTS)?;
        let ids = self.net.weight_ids();
        self.opt.step(&mut self.net.store, &ids, &s.grads);
        self.net.store.apply_bn_updates(&s.bn_updates);
        Ok((s.loss, s.correct))
    }

    pub fn run_epoch(&mut self, train: &Dataset) -> Result<TrainEpoch> {
        if train.len() < 2 {
            return Err(Error::Config("training needs at least 2 examples".into()));
        }
        if let Some(bad) = train.examples.iter().find(|e| e.label >= self.net.config.num_speakers) {
            return Err(Error::Config(format!(
                "label {} outside the {} classifier outputs",
                bad.label, self.net.config.num_speakers
            )));
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut self.rng);
        let frames = self.net.config.input_frames;
        let (mut total, mut correct) = (0.0, 0);
        for b in &minibatches(&idx, self.config.batch_size) {
            let (x, y) = train.batch(b, frames, CropPolicy::Random, &mut self.rng);
            let (loss, c) = self.step(&x, &y)?;
            total += loss * b.len() as f64;
            correct += c;
        }
        let e = TrainEpoch {
            epoch: self.history.len() + 1,
            loss: total / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        };
        self.history.push(e);
        Ok(e)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.loss).collect()
    }
}

/// Train a derived network for `config.epochs` epochs. A numeric failure saves
/// the network from before the failing epoch to `snapshot`, when given.
pub fn train_derived(
    genotypes: &[Genotype],
    config: &TrainConfig,
    net_cfg: &NetworkConfig,
    train: &Dataset,
    snapshot: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<Trainer> {
    let mut t = Trainer::new(genotypes, config.clone(), net_cfg)?;
    for _ in 0..config.epochs {
        let before = t.net.clone();
        match t.run_epoch(train) {
            Ok(e) => on_epoch(&e),
            Err(Error::Numeric { message, .. }) => {
                let snap = match snapshot {
                    Some(p) => {
                        before.save(p)?;
                        Some(p.display().to_string())
                    }
                    None => None,
                };
                return Err(Error::Numeric {
                    message: format!("training epoch {}: {message}", t.history.len() + 1),
                    snapshot: snap,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(t)
}

/// `epoch,loss,accuracy` rows.
pub fn loss_csv(history: &[TrainEpoch]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in history {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
    }
    s
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(arg_err!("embedding lengths differ: {} vs {}", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(arg_err!("cosine score of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

const EMBED_BATCH: usize = 16;

/// Normalised embeddings of center-cropped spectrograms, in input order.
pub fn embed_all(net: &Network, specs: &[&Spectrogram]) -> Result<Vec<Vec<f64>>> {
    let frames = net.config.input_frames;
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(EMBED_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * FREQ_BINS * frames);
        for s in chunk {
            data.extend_from_slice(&crop_or_pad(s, frames, Crop::Center).values);
        }
        let x = Tensor::from_vec(Shape::new(chunk.len(), 1, FREQ_BINS, frames), data)?;
        out.extend(net.embeddings(&x)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub genuine: bool,
    pub enrol: String,
    pub probe: String,
}

/// Parse `<0|1> <enrol> <probe>` lines; blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let genuine = match parts.first() {
            Some(&"1") => true,
            Some(&"0") => false,
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `<0|1> <enrol> <probe>`, got `{line}`"),
                })
            }
        };
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        out.push(Trial {
            genuine,
            enrol: parts[1].to_string(),
            probe: parts[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.genuine), t.enrol, t.probe))
        .collect()
}

/// One cosine score per trial, in trial order. Each utterance is embedded once.
pub fn score_trials(
    net: &Network,
    trials: &[Trial],
    lookup: &BTreeMap<&str, &Spectrogram>,
) -> Result<Vec<f64>> {
    let mut keys: Vec<&str> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, t) in trials.iter().enumerate() {
        for k in [t.enrol.as_str(), t.probe.as_str()] {
            if !lookup.contains_key(k) {
                return Err(Error::Validation(format!("trial {}: unknown utterance `{k}`", i + 1)));
            }
            if !slot.contains_key(k) {
                slot.insert(k, keys.len());
                keys.push(k);
            }
        }
    }
    let specs: Vec<&Spectrogram> = keys.iter().map(|k| lookup[k]).collect();
    let emb = embed_all(net, &specs)?;
    trials
        .iter()
        .map(|t| cosine_score(&emb[slot[t.enrol.as_str()]], &emb[slot[t.probe.as_str()]]))
        .collect()
}

/// Split scores by trial label.
pub fn partition_scores(trials: &[Trial], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut g, mut i) = (Vec::new(), Vec::new());
    for (t, &s) in trials.iter().zip(scores) {
        if t.genuine {
            g.push(s);
        } else {
            i.push(s);
        }
    }
    (g, i)
}

/// `label,enrol,probe,score` rows.
pub fn scores_csv(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::from("label,enrol,probe,score\n");
    for (t, v) in trials.iter().zip(scores) {
        s.push_str(&format!("{},{},{},{v}\n", u8::from(t.genuine), t.enrol, t.probe));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_score(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn trial_file_round_trip() {
        let text = "# header\n1 a.wav b.wav\n\n0 a.wav c.wav\n";
        let t = parse_trials(text).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].genuine && !t[1].genuine);
        assert_eq!(parse_trials(&format_trials(&t)).unwrap(), t);
        match parse_trials("1 a b\n2 a b\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.weight_decay), (200, 48, 0.15, 3e-4));
    }
}
