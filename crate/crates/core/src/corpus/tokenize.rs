use std::collections::HashSet;

/// Adjective stems recognised without corpus evidence.
const BASE_STEMS: &[&str] = &[
    "big", "bright", "broad", "dark", "deep", "fat", "few", "flat", "high", "large", "light", "long", "low", "narrow",
    "plain", "round", "short", "simple", "slim", "small", "smooth", "square", "straight", "tall", "thick", "thin",
    "tight", "wide",
];

pub const COMPARATIVE: &str = "er";
pub const SUPERLATIVE: &str = "est";

/// Lowercasing, punctuation-splitting tokenizer that separates comparative and
/// superlative suffixes from known stems (`"thinner"` → `["thin", "er"]`).
#[derive(Clone, Debug)]
pub struct Tokenizer {
    stems: HashSet<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { stems: BASE_STEMS.iter().map(|s| s.to_string()).collect() }
    }
}

impl Tokenizer {
    /// Extends the built-in stems with every word observed in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self::default();
        for t in texts {
            for w in split_words(&t.to_lowercase()) {
                if w.chars().all(char::is_alphabetic) {
                    tok.stems.insert(w);
                }
            }
        }
        tok
    }

    pub fn knows(&self, word: &str) -> bool {
        self.stems.contains(word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in split_words(&text.to_lowercase()) {
            match self.split_suffix(&w) {
                Some((stem, suffix)) => {
                    out.push(stem);
                    out.push(suffix.to_string());
                }
                None => out.push(w),
            }
        }
        out
    }

    /// Stem and suffix for a comparative/superlative form, if the stem is known.
    pub fn split_suffix(&self, word: &str) -> Option<(String, &'static str)> {
        for suffix in [SUPERLATIVE, COMPARATIVE] {
            let Some(stripped) = word.strip_suffix(suffix) else { continue };
            if stripped.chars().count() < 2 || !stripped.chars().all(char::is_alphabetic) {
                continue;
            }
            for cand in stem_candidates(stripped) {
                if self.stems.contains(&cand) {
                    return Some((cand, suffix));
                }
            }
        }
        None
    }
}

fn stem_candidates(stripped: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(3);
    let chars: Vec<char> = stripped.chars().collect();
    let n = chars.len();
    if n >= 3 && chars[n - 1] == chars[n - 2] && !is_vowel(chars[n - 1]) {
        out.push(chars[..n - 1].iter().collect());
    }
    out.push(format!("{stripped}e"));
    out.push(stripped.to_string());
    out
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Whitespace split with every non-alphanumeric character emitted as its own token.
fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokenizes with the built-in stem list only.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}
