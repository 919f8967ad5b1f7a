//! Versioned JSON checkpoints. Each file carries the model, the vocabulary it
//! was trained with (tokens, counts and digest) and the training log.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::listener::Listener;
use crate::speaker::Speaker;
use crate::{util, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Listener,
    Speaker,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format_version: u32,
    kind: ModelKind,
    vocab_tokens: Vec<String>,
    vocab_counts: Vec<u64>,
    vocab_digest: String,
    model: M,
    #[serde(default)]
    log: serde_json::Value,
}

pub trait Checkpointed: Serialize + DeserializeOwned {
    const KIND: ModelKind;
}

impl Checkpointed for Listener {
    const KIND: ModelKind = ModelKind::Listener;
}

impl Checkpointed for Speaker {
    const KIND: ModelKind = ModelKind::Speaker;
}

pub fn save<M: Checkpointed>(path: &Path, model: &M, vocab: &Vocabulary, log: &impl Serialize) -> Result<()> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: M::KIND,
        vocab_tokens: vocab.tokens().to_vec(),
        vocab_counts: vocab.counts().to_vec(),
        vocab_digest: vocab.digest(),
        model,
        log: serde_json::to_value(log)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    util::write_text(path, &serde_json::to_string(&env)?)
}

/// Loads a checkpoint and verifies its version, kind and vocabulary digest.
pub fn load<M: Checkpointed>(path: &Path) -> Result<(M, Vocabulary, serde_json::Value)> {
    let text = util::read_text(path)?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)?;
    let at = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if env.format_version != FORMAT_VERSION {
        return Err(at(format!("format version {} (expected {FORMAT_VERSION})", env.format_version)));
    }
    if env.kind != M::KIND {
        return Err(at(format!("holds a {:?}, not a {:?}", env.kind, M::KIND)));
    }
    if env.vocab_tokens.len() != env.vocab_counts.len() {
        return Err(at("vocabulary tokens and counts differ in length".into()));
    }
    let vocab = Vocabulary::from_parts(env.vocab_tokens, env.vocab_counts);
    if vocab.digest() != env.vocab_digest {
        return Err(at("vocabulary digest mismatch".into()));
    }
    let model = serde_json::from_value(env.model)?;
    Ok((model, vocab, env.log))
}

/// A directory of checkpoints addressed by id (`<dir>/<id>.json`).
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    pub dir: PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, id: &str) -> Result<PathBuf> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
            return Err(Error::Invalid(format!("checkpoint id {id:?} must be a plain file stem")));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    pub fn save<M: Checkpointed>(&self, id: &str, model: &M, vocab: &Vocabulary, log: &impl Serialize) -> Result<PathBuf> {
        let path = self.path(id)?;
        save(&path, model, vocab, log)?;
        Ok(path)
    }

    pub fn load<M: Checkpointed>(&self, id: &str) -> Result<(M, Vocabulary)> {
        let path = self.path(id)?;
        if !path.exists() {
            return Err(Error::Checkpoint(format!("no checkpoint {id:?} in {}", self.dir.display())));
        }
        let (m, v, _) = load(&path)?;
        Ok((m, v))
    }
}
