//! Model agents behind the game service, loaded from a checkpoint directory.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use refgame_core::checkpoint::{CheckpointStore, Checkpointed};
use refgame_core::corpus::{encode_dropping_unknown, Tokenizer, Vocabulary, COMPARATIVE, SPECIALS, SUPERLATIVE};
use refgame_core::encoders::ObjectRepresentation;
use refgame_core::listener::Listener;
use refgame_core::speaker::{rerank, score_with_listener, Speaker};

use crate::{ServiceError, ServiceResult};

pub trait Agents: Send + Sync {
    fn check_speaker(&self, id: &str) -> ServiceResult<()>;
    fn check_listener(&self, id: &str) -> ServiceResult<()>;
    /// Top-ranked utterance for `objects[target]`.
    fn describe(&self, speaker: &str, listener: Option<&str>, objects: &[&ObjectRepresentation], target: usize, seed: u64) -> ServiceResult<String>;
    /// Index into `objects` the listener picks for `text`.
    fn interpret(&self, listener: &str, objects: &[&ObjectRepresentation], text: &str) -> ServiceResult<usize>;
}

/// Joins tokens into display text, gluing comparative and superlative suffixes
/// back on and dropping special markers.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if SPECIALS.contains(&t) {
            continue;
        }
        if !out.is_empty() && t != COMPARATIVE && t != SUPERLATIVE {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

struct Loaded<M> {
    model: M,
    vocab: Vocabulary,
    tokenizer: Tokenizer,
}

type Cache<M> = Mutex<HashMap<String, Arc<Loaded<M>>>>;

pub struct CheckpointAgents {
    store: CheckpointStore,
    alpha: f64,
    beta: f64,
    samples: usize,
    speakers: Cache<Speaker>,
    listeners: Cache<Listener>,
}

impl CheckpointAgents {
    pub fn new(store: CheckpointStore, alpha: f64, beta: f64, samples: usize) -> Self {
        Self { store, alpha, beta, samples, speakers: Mutex::default(), listeners: Mutex::default() }
    }

    fn get<M: Checkpointed>(&self, cache: &Cache<M>, id: &str) -> ServiceResult<Arc<Loaded<M>>> {
        if let Some(hit) = cache.lock().unwrap().get(id) {
            return Ok(hit.clone());
        }
        let (model, vocab) = self.store.load::<M>(id).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let tokenizer = Tokenizer::from_corpus(vocab.tokens().iter().map(String::as_str));
        let loaded = Arc::new(Loaded { model, vocab, tokenizer });
        cache.lock().unwrap().insert(id.to_string(), loaded.clone());
        Ok(loaded)
    }
}

impl Agents for CheckpointAgents {
    fn check_speaker(&self, id: &str) -> ServiceResult<()> {
        self.get(&self.speakers, id).map(drop)
    }

    fn check_listener(&self, id: &str) -> ServiceResult<()> {
        self.get(&self.listeners, id).map(drop)
    }

    fn describe(&self, speaker: &str, listener: Option<&str>, objects: &[&ObjectRepresentation], target: usize, seed: u64) -> ServiceResult<String> {
        let s = self.get(&self.speakers, speaker)?;
        let mut cands = s.model.candidates(objects, target, self.samples, seed)?;
        let beta = match listener {
            Some(id) if self.beta > 0.0 => {
                let l = self.get(&self.listeners, id)?;
                if l.vocab.digest() != s.vocab.digest() {
                    return Err(ServiceError::BadRequest(format!("listener {id} and speaker {speaker} use different vocabularies")));
                }
                score_with_listener(&mut cands, &l.model, objects, target)?;
                self.beta
            }
            _ => 0.0,
        };
        let best = rerank(&cands, self.alpha, beta)?.into_iter().next().ok_or_else(|| ServiceError::BadRequest("speaker produced no candidates".into()))?;
        Ok(detokenize(&s.vocab.decode(&best.token_ids)))
    }

    fn interpret(&self, listener: &str, objects: &[&ObjectRepresentation], text: &str) -> ServiceResult<usize> {
        let l = self.get(&self.listeners, listener)?;
        let utt = encode_dropping_unknown(text, &l.tokenizer, &l.vocab);
        if utt.token_ids.is_empty() {
            return Err(ServiceError::BadRequest("none of the words in this utterance are known to the listener".into()));
        }
        Ok(l.model.predict(objects, &utt.token_ids)?.0)
    }
}
