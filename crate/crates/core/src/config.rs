//! Run configuration: one TOML document with a table per pipeline stage.
//!
//! Every table is optional and may be partial; missing keys keep their
//! defaults. Listener defaults depend on the chosen architecture and speaker
//! epoch budgets on the modality, so those keys are read first.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitMode, DEFAULT_MIN_COUNT, MAX_UTTERANCE_LEN};
use crate::encoders::{ImageFitConfig, Modality, PcAeConfig};
use crate::evaluation::WordOrder;
use crate::listener::{Architecture, ListenerConfig};
use crate::speaker::SpeakerConfig;
use crate::synthetic::WorldConfig;
use crate::{util, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub fractions: [f64; 3],
    pub min_count: u64,
    pub max_length: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { mode: SplitMode::LanguageGeneralization, fractions: [0.8, 0.1, 0.1], min_count: DEFAULT_MIN_COUNT, max_length: MAX_UTTERANCE_LEN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub k: usize,
    pub seeds: usize,
    pub duplicate_percentile: f64,
    pub repeats: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { k: 2, seeds: 1000, duplicate_percentile: crate::context::DEFAULT_DUPLICATE_PERCENTILE, repeats: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Multinomial candidates per context before re-ranking (the greedy one is added).
    pub samples: usize,
    pub lesion_orders: Vec<WordOrder>,
    pub lesion_fractions: Vec<f64>,
    /// Extra `word part` synonym lines for the part lexicon.
    pub part_synonyms: Option<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            seeds: crate::corpus::CANONICAL_SEEDS.to_vec(),
            alphas: vec![0.0, 0.3, 0.6, 1.0, 1.5],
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            samples: 50,
            lesion_orders: WordOrder::ALL.to_vec(),
            lesion_fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            part_synonyms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub rounds: usize,
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), rounds: 69, samples: 50, alpha: 0.6, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub contexts: ContextConfig,
    pub pc_autoencoder: PcAeConfig,
    pub image_encoder: ImageFitConfig,
    pub listener: ListenerConfig,
    pub speaker: SpeakerConfig,
    pub evaluation: EvaluationConfig,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            contexts: ContextConfig::default(),
            pc_autoencoder: PcAeConfig::default(),
            image_encoder: ImageFitConfig::default(),
            listener: ListenerConfig::default(),
            speaker: SpeakerConfig::for_modality(Modality::Both),
            evaluation: EvaluationConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Listener sizes that train in about a minute on one core over the synthetic world.
pub fn desk_listener(seed: u64) -> ListenerConfig {
    ListenerConfig {
        modality: Modality::Image,
        use_attention: false,
        lstm_hidden: 32,
        mlp_sizes: vec![32, 16, 3],
        projection_dim: 16,
        word_dim: 16,
        learning_rate: 0.003,
        l2_weight: 0.001,
        input_dropout_keep: 0.9,
        projection_dropout_keep: 0.9,
        max_epochs: 150,
        lr_halving_window: 20,
        batch_size: 32,
        seed,
        ..ListenerConfig::for_architecture(Architecture::Baseline)
    }
}

pub fn desk_speaker(seed: u64) -> SpeakerConfig {
    SpeakerConfig {
        lstm_hidden: 64,
        projection_dim: 32,
        image_dropout_keep: 0.9,
        max_epochs: 100,
        select_every: 5,
        batch_size: 32,
        seed,
        ..SpeakerConfig::for_modality(Modality::Image)
    }
}

impl Config {
    /// Desk-scale settings for the synthetic world.
    pub fn desk() -> Self {
        Self {
            split: SplitConfig { mode: SplitMode::ObjectGeneralization, min_count: 1, ..SplitConfig::default() },
            world: WorldConfig { objects: 400, ..WorldConfig::default() },
            listener: desk_listener(0),
            speaker: desk_speaker(0),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::overlay(Self::default(), text)
    }

    /// Applies a TOML document on top of `base`.
    pub fn overlay(base: Self, text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse("config", e.to_string()))?;
        let mut out = base;
        for key in doc.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::parse("config", format!("unknown key or table `{key}`")));
            }
        }
        if let Some(v) = doc.get("seed") {
            out.seed = v.as_integer().filter(|&s| s >= 0).ok_or_else(|| Error::parse("config", "`seed` must be a non-negative integer"))? as u64;
        }
        let table = |name: &str| -> Result<Option<&toml::Table>> {
            match doc.get(name) {
                None => Ok(None),
                Some(toml::Value::Table(t)) => Ok(Some(t)),
                Some(_) => Err(Error::parse("config", format!("`{name}` must be a table"))),
            }
        };
        if let Some(t) = table("listener")? {
            if let Some(arch) = t.get("architecture") {
                let arch: Architecture = arch.clone().try_into().map_err(|e: toml::de::Error| Error::parse("config.listener", e.to_string()))?;
                if arch != out.listener.architecture {
                    out.listener = ListenerConfig { seed: out.listener.seed, ..ListenerConfig::for_architecture(arch) };
                }
            }
        }
        if let Some(t) = table("speaker")? {
            if let Some(m) = t.get("modality") {
                let m: Modality = m.clone().try_into().map_err(|e: toml::de::Error| Error::parse("config.speaker", e.to_string()))?;
                if m != out.speaker.modality {
                    out.speaker.modality = m;
                    out.speaker.max_epochs = SpeakerConfig::for_modality(m).max_epochs;
                }
            }
        }
        out.world = merge(out.world, table("world")?, "world")?;
        out.split = merge(out.split, table("split")?, "split")?;
        out.contexts = merge(out.contexts, table("contexts")?, "contexts")?;
        out.pc_autoencoder = merge(out.pc_autoencoder, table("pc_autoencoder")?, "pc_autoencoder")?;
        out.image_encoder = merge(out.image_encoder, table("image_encoder")?, "image_encoder")?;
        out.listener = merge(out.listener, table("listener")?, "listener")?;
        out.speaker = merge(out.speaker, table("speaker")?, "speaker")?;
        out.evaluation = merge(out.evaluation, table("evaluation")?, "evaluation")?;
        out.service = merge(out.service, table("service")?, "service")?;
        out.listener.validate()?;
        out.speaker.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&util::read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config serialisation: {e}")))
    }
}

const KNOWN_KEYS: [&str; 10] =
    ["seed", "world", "split", "contexts", "pc_autoencoder", "image_encoder", "listener", "speaker", "evaluation", "service"];

fn merge<T: Serialize + DeserializeOwned>(base: T, patch: Option<&toml::Table>, section: &str) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let err = |e: String| Error::parse(format!("config.{section}"), e);
    let mut table = match toml::Value::try_from(&base).map_err(|e| err(e.to_string()))? {
        toml::Value::Table(t) => t,
        _ => unreachable!("sections serialise to tables"),
    };
    for (k, v) in patch {
        if !table.contains_key(k) && !optional_key(section, k) {
            return Err(err(format!("unknown key `{k}`")));
        }
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| err(e.to_string()))
}

/// Keys whose default is absent, so they do not show up in the serialised base.
fn optional_key(section: &str, key: &str) -> bool {
    matches!((section, key), ("evaluation", "part_synonyms"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = Config::from_toml("seed = 7\n[listener]\nlstm_hidden = 12\n[service]\nrounds = 5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.listener.lstm_hidden, 12);
        assert_eq!(c.listener.learning_rate, ListenerConfig::default().learning_rate);
        assert_eq!(c.service.rounds, 5);
        assert_eq!(c.service.bind, ServiceConfig::default().bind);
    }

    #[test]
    fn architecture_selects_its_defaults() {
        let c = Config::from_toml("[listener]\narchitecture = \"early_context\"\nmax_epochs = 3\n").unwrap();
        let want = ListenerConfig::for_architecture(Architecture::EarlyContext);
        assert_eq!(c.listener.l2_weight, want.l2_weight);
        assert_eq!(c.listener.max_epochs, 3);
        let s = Config::from_toml("[speaker]\nmodality = \"image\"\n").unwrap();
        assert_eq!(s.speaker.max_epochs, 300);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::from_toml("[listner]\nx = 1\n").is_err());
        assert!(Config::from_toml("[listener]\nhidden = 1\n").is_err());
        assert!(Config::from_toml("[listener]\nlabel_smoothing = 0.0\n").is_err());
        assert!(Config::from_toml("seed = -1\n").is_err());
        let c = Config::from_toml("[evaluation]\npart_synonyms = \"syn.txt\"\n").unwrap();
        assert_eq!(c.evaluation.part_synonyms.as_deref(), Some("syn.txt"));
    }

    #[test]
    fn round_trips_through_text() {
        let c = Config::desk();
        assert_eq!(Config::overlay(Config::default(), &c.to_toml().unwrap()).unwrap(), c);
    }
}
