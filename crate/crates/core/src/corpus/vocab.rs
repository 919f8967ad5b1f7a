use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::util::{hash_lines, read_text, write_text};
use crate::{Error, Result};

pub const PAD: &str = "<PAD>";
pub const SOS: &str = "<SOS>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";
pub const DIA: &str = "<DIA>";

pub const SPECIALS: [&str; 5] = [PAD, SOS, EOS, UNK, DIA];
pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const DIA_ID: usize = 4;

pub const DEFAULT_MIN_COUNT: u64 = 2;

/// Token ↔ id mapping; specials occupy the first ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenised training utterances. Tokens seen fewer than
    /// `min_count` times are left out and map to `<UNK>`.
    ///
    /// Non-special ids are ordered by descending count, then lexicographically.
    pub fn build<S: AsRef<str>>(train: &[Vec<S>], min_count: u64) -> Self {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for utt in train {
            for t in utt {
                *freq.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> =
            freq.iter().filter(|(t, &c)| c >= min_count && !SPECIALS.contains(t)).map(|(t, &c)| (*t, c)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let unk: u64 = freq.iter().filter(|(t, &c)| c < min_count && !SPECIALS.contains(t)).map(|(_, &c)| c).sum();
        let mut counts = vec![0, 0, train.len() as u64, unk, freq.get(DIA).copied().unwrap_or(0)];
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for (t, c) in kept {
            id_to_token.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(id_to_token, counts)
    }

    pub fn from_parts(id_to_token: Vec<String>, counts: Vec<u64>) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_token, counts, token_to_id }
    }

    /// Restores the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.token_to_id = self.id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.id_to_token[i].clone()).collect()
    }

    /// Stable digest of the token list, stored in checkpoints.
    pub fn digest(&self) -> String {
        hash_lines(&self.id_to_token)
    }

    /// Writes one token per line in id order, plus a `<path>.counts` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        write_text(path, &text)?;
        let counts: String =
            self.id_to_token.iter().zip(&self.counts).map(|(t, c)| format!("{t}\t{c}\n")).collect();
        write_text(&counts_path(path), &counts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = read_text(path)?.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::parse(path.display().to_string(), format!("expected special {s} at line {}", i + 1)));
            }
        }
        let sidecar = counts_path(path);
        let counts = if sidecar.exists() {
            let mut counts = Vec::with_capacity(tokens.len());
            for (n, line) in read_text(&sidecar)?.lines().enumerate() {
                let (_, c) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| Error::parse(format!("{}:{}", sidecar.display(), n + 1), "expected token<TAB>count"))?;
                counts.push(c.parse().map_err(|e| Error::parse(format!("{}:{}", sidecar.display(), n + 1), format!("{e}")))?);
            }
            counts
        } else {
            vec![0; tokens.len()]
        };
        if counts.len() != tokens.len() {
            return Err(Error::parse(sidecar.display().to_string(), "count/token length mismatch"));
        }
        Ok(Self::from_parts(tokens, counts))
    }
}

fn counts_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".counts");
    p.into()
}
