//! Flat `key = value` run configuration.
//!
//! A search config accepts the model keys plus the search keys; a train config
//! accepts the model keys plus the training keys. `#` starts a comment.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::audio::FREQ_BINS;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

/// Network shape keys shared by both config kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub embedding_dim: usize,
    pub input_frames: usize,
    /// Per-bin mean/variance normalisation of each spectrogram.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n = NetworkConfig::default();
        ModelConfig {
            num_cells: n.num_cells,
            init_channels: n.init_channels,
            embedding_dim: n.embedding_dim,
            input_frames: n.input_frames,
            normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn network(&self, num_speakers: usize) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            num_cells: self.num_cells,
            init_channels: self.init_channels,
            num_speakers,
            embedding_dim: self.embedding_dim,
            input_frames: self.input_frames,
            freq_bins: FREQ_BINS,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchRunConfig {
    pub model: ModelConfig,
    pub search: SearchConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn section<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config sections serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config sections are structs"),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        _ => "a string",
    }
}

fn typed(default: &Value, raw: &str) -> Option<Value> {
    match default {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::from),
        _ => Some(Value::String(raw.to_string())),
    }
}

/// Apply `text` on top of the default sections, in order.
fn apply(text: &str, sections: &mut [Map<String, Value>]) -> Result<()> {
    let mut seen: Vec<(String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {n}: expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
            return Err(Error::Config(format!("line {n}: key `{key}` already set on line {first}")));
        }
        let Some(sec) = sections.iter_mut().find(|s| s.contains_key(key)) else {
            return Err(Error::Config(format!("line {n}: unknown key `{key}`")));
        };
        let slot = sec.get_mut(key).expect("key present");
        *slot = typed(slot, value).ok_or_else(|| {
            Error::Config(format!("line {n}: `{key}` expects {}, got `{value}`", type_name(slot)))
        })?;
        seen.push((key.to_string(), n));
    }
    Ok(())
}

fn finish<T: for<'de> Deserialize<'de>>(m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_search_config(text: &str) -> Result<SearchRunConfig> {
    let mut secs = [section(&ModelConfig::default()), section(&SearchConfig::default())];
    apply(text, &mut secs)?;
    let [model, search] = secs;
    let cfg = SearchRunConfig {
        model: finish(model)?,
        search: finish(search)?,
    };
    cfg.search.validate()?;
    Ok(cfg)
}

pub fn parse_train_config(text: &str) -> Result<TrainRunConfig> {
    let mut secs = [section(&ModelConfig::default()), section(&TrainConfig::default())];
    apply(text, &mut secs)?;
    let [model, train] = secs;
    let cfg = TrainRunConfig {
        model: finish(model)?,
        train: finish(train)?,
    };
    cfg.train.validate()?;
    Ok(cfg)
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn listing(sections: &[Map<String, Value>]) -> Vec<(String, String)> {
    sections
        .iter()
        .flat_map(|m| m.iter().map(|(k, v)| (k.clone(), render(v))))
        .collect()
}

/// Every accepted search key with its default.
pub fn search_keys() -> Vec<(String, String)> {
    listing(&[section(&ModelConfig::default()), section(&SearchConfig::default())])
}

/// Every accepted train key with its default.
pub fn train_keys() -> Vec<(String, String)> {
    listing(&[section(&ModelConfig::default()), section(&TrainConfig::default())])
}

/// `key = value` lines for a resolved config, loadable by the matching parser.
pub fn to_text<T: Serialize>(sections: &[&T]) -> String {
    let maps: Vec<Map<String, Value>> = sections.iter().map(|s| section(*s)).collect();
    listing(&maps)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_search_config("").unwrap();
        assert_eq!(c.search.epochs, 50);
        assert_eq!(c.search.batch_size, 8);
        assert_eq!(c.search.weight_lr, 0.1);
        assert_eq!(c.search.weight_decay, 3e-4);
        let t = parse_train_config("# nothing\n\n").unwrap();
        assert_eq!((t.train.epochs, t.train.batch_size), (200, 48));
    }

    #[test]
    fn overrides_and_comments() {
        let c = parse_search_config("num_cells = 30  # deep\ninit_channels=64\nalpha_lr = 3e-4\n").unwrap();
        assert_eq!((c.model.num_cells, c.model.init_channels), (30, 64));
        assert_eq!(c.search.alpha_lr, 3e-4);
        let c = parse_train_config("normalize = true\nlr = 1e-3").unwrap();
        assert!(c.model.normalize);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = parse_search_config("\nepochs = banana\n").unwrap_err().to_string();
        assert!(e.contains("epochs") && e.contains("line 2"), "{e}");
        let e = parse_search_config("lr = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("unknown key `lr`") && e.contains("line 1"), "{e}");
        let e = parse_train_config("alpha_lr = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("alpha_lr"), "{e}");
        assert!(parse_train_config("batch_size = -3").is_err());
        assert!(parse_train_config("epochs 3").is_err());
        assert!(parse_train_config("seed = 1\nseed = 2").is_err());
        assert!(matches!(parse_search_config("epochs = 5"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let c = parse_search_config("num_cells = 5\nweight_lr = 0.25\nentropy_patience = 3\n").unwrap();
        let text = to_text(&[&c.model]) + &to_text(&[&c.search]);
        assert_eq!(parse_search_config(&text).unwrap(), c);
        assert_eq!(search_keys().len(), 16);
        assert!(train_keys().iter().any(|(k, v)| k == "lr" && v == "0.15"));
    }
}
