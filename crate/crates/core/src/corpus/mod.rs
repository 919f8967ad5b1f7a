//! Transcript ingestion: trial records, tokenisation, vocabularies, and the
//! language/object generalisation splits.

mod split;
mod tokenize;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use split::{make_split, target_ids, DatasetSplit, SplitMode, CANONICAL_SEEDS};
pub use tokenize::{tokenize, Tokenizer, COMPARATIVE, SUPERLATIVE};
pub use vocab::{
    Vocabulary, DEFAULT_MIN_COUNT, DIA, DIA_ID, EOS, EOS_ID, PAD, PAD_ID, SOS, SOS_ID, SPECIALS, UNK, UNK_ID,
};

use crate::{util, Error, Result};

pub const MAX_UTTERANCE_LEN: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Hard,
    Easy,
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Hard => "hard",
            Difficulty::Easy => "easy",
        })
    }
}

/// One reference-game trial as recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTrial {
    pub game_id: String,
    pub context_id: String,
    pub object_ids: [String; 3],
    pub target_index: usize,
    pub speaker_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listener_text: Option<String>,
    #[serde(with = "bool_as_int")]
    pub correct: bool,
    pub difficulty: Difficulty,
}

impl RawTrial {
    pub fn validate(&self) -> Result<()> {
        if self.target_index > 2 {
            return Err(Error::Invalid(format!("trial in {}: target index {} out of range", self.context_id, self.target_index)));
        }
        let [a, b, c] = &self.object_ids;
        if a == b || a == c || b == c {
            return Err(Error::Invalid(format!("trial in {}: object ids are not distinct", self.context_id)));
        }
        Ok(())
    }

    pub fn target_id(&self) -> &str {
        &self.object_ids[self.target_index]
    }
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}

/// Reads a line-delimited trial file, validating every record.
pub fn read_trials(path: &Path) -> Result<Vec<RawTrial>> {
    let trials: Vec<RawTrial> = util::read_jsonl(path)?;
    for (i, t) in trials.iter().enumerate() {
        t.validate().map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[RawTrial]) -> Result<()> {
    util::write_jsonl(path, trials)
}

/// Tokenised, vocabulary-encoded utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
}

impl Utterance {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Self {
        let token_ids = vocab.encode(tokens);
        let tokens = vocab.decode(&token_ids);
        Self { tokens, token_ids }
    }

    pub fn from_ids(ids: Vec<usize>, vocab: &Vocabulary) -> Self {
        Self { tokens: vocab.decode(&ids), token_ids: ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Token sequence of a trial: speaker tokens, then `<DIA>` and the listener's reply when present.
pub fn dialogue_tokens(raw: &RawTrial, tokenizer: &Tokenizer) -> Vec<String> {
    let mut tokens = tokenizer.tokenize(&raw.speaker_text);
    if let Some(reply) = raw.listener_text.as_deref() {
        let reply = tokenizer.tokenize(reply);
        if !reply.is_empty() {
            tokens.push(DIA.to_string());
            tokens.extend(reply);
        }
    }
    tokens
}

/// Filters and encodes one trial.
///
/// Returns `None` when the human listener missed the target or the concatenated
/// dialogue exceeds `max_length` tokens.
pub fn preprocess_trial(raw: &RawTrial, tokenizer: &Tokenizer, vocab: &Vocabulary, max_length: usize) -> Option<Utterance> {
    if !raw.correct {
        return None;
    }
    let tokens = dialogue_tokens(raw, tokenizer);
    if tokens.len() > max_length {
        return None;
    }
    Some(Utterance::from_tokens(&tokens, vocab))
}

/// Encodes text for a listener trained on another vocabulary, dropping unknown
/// tokens instead of mapping them to `<UNK>`.
pub fn encode_dropping_unknown(text: &str, tokenizer: &Tokenizer, vocab: &Vocabulary) -> Utterance {
    let kept: Vec<String> = tokenizer.tokenize(text).into_iter().filter(|t| vocab.contains(t)).collect();
    Utterance::from_tokens(&kept, vocab)
}

/// A preprocessed trial ready for the agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub trial: usize,
    pub game_id: String,
    pub context_id: String,
    pub object_ids: [String; 3],
    pub target: usize,
    pub difficulty: Difficulty,
    pub utterance: Utterance,
}

impl Example {
    pub fn target_id(&self) -> &str {
        &self.object_ids[self.target]
    }
}

/// Result of [`prepare`]: the fitted tokenizer and vocabulary plus the surviving examples.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

/// Tokenises all trials, builds the vocabulary from the training partition only,
/// and encodes every trial that survives filtering.
pub fn prepare(trials: &[RawTrial], split: &DatasetSplit, min_count: u64, max_length: usize) -> Prepared {
    let tokenizer = Tokenizer::from_corpus(
        trials.iter().flat_map(|t| std::iter::once(t.speaker_text.as_str()).chain(t.listener_text.as_deref())),
    );
    let train_tokens: Vec<Vec<String>> = split
        .train
        .iter()
        .map(|&i| &trials[i])
        .filter(|t| t.correct)
        .map(|t| dialogue_tokens(t, &tokenizer))
        .filter(|toks| toks.len() <= max_length)
        .collect();
    let vocab = Vocabulary::build(&train_tokens, min_count);
    let examples = trials
        .iter()
        .enumerate()
        .filter_map(|(i, raw)| {
            let utterance = preprocess_trial(raw, &tokenizer, &vocab, max_length)?;
            Some(Example {
                trial: i,
                game_id: raw.game_id.clone(),
                context_id: raw.context_id.clone(),
                object_ids: raw.object_ids.clone(),
                target: raw.target_index,
                difficulty: raw.difficulty,
                utterance,
            })
        })
        .collect();
    Prepared { tokenizer, vocab, examples }
}
