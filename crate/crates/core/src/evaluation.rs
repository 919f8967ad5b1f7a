//! Analysis battery: subpopulation tagging, accuracy reports aggregated over
//! seeds, word and part lesions, distinctive-word tables and α/β sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Difficulty, Example, Utterance, Vocabulary, COMPARATIVE, SUPERLATIVE, UNK, UNK_ID};
use crate::encoders::{resolve, ObjectEncoder, ObjectMap, ObjectRepresentation, PointCloud};
use crate::listener::Listener;
use crate::nn::Mat;
use crate::speaker::{rerank, score_with_listener, Speaker, SpeakerSample};
use crate::{par, util, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Hard,
    Easy,
    SupComp,
    Negative,
    SplitLanguage,
    KnownVocab,
    WithPart,
    WithoutPart,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::Hard,
        Tag::Easy,
        Tag::SupComp,
        Tag::Negative,
        Tag::SplitLanguage,
        Tag::KnownVocab,
        Tag::WithPart,
        Tag::WithoutPart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Hard => "hard",
            Tag::Easy => "easy",
            Tag::SupComp => "sup_comp",
            Tag::Negative => "negative",
            Tag::SplitLanguage => "split_language",
            Tag::KnownVocab => "known_vocab",
            Tag::WithPart => "with_part",
            Tag::WithoutPart => "without_part",
        }
    }
}

impl From<Difficulty> for Tag {
    fn from(d: Difficulty) -> Self {
        match d {
            Difficulty::Hard => Tag::Hard,
            Difficulty::Easy => Tag::Easy,
        }
    }
}

pub type TagSet = BTreeSet<Tag>;

/// Word lists behind the tags. `part_aliases` maps every part word to the
/// annotation name it refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    pub part_aliases: BTreeMap<String, String>,
    pub negatives: BTreeSet<String>,
    pub superlatives: BTreeSet<String>,
    /// Token sequences that mark an utterance as describing a split of the context.
    pub split_patterns: Vec<Vec<String>>,
}

impl Default for Lexicons {
    fn default() -> Self {
        let aliases = [
            ("back", "back"),
            ("legs", "legs"),
            ("leg", "legs"),
            ("seat", "seat"),
            ("arms", "arms"),
            ("arm", "arms"),
            ("armrests", "arms"),
            ("armrest", "arms"),
            ("base", "legs"),
            ("wheels", "legs"),
        ];
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            part_aliases: aliases.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            negatives: words(&["not", "no", "but", "without", "lacks", "none"]),
            superlatives: words(&["most", "least", "more", "less", "best", "worst", "better", "worse"]),
            split_patterns: [&["of", "the", "two"][..], &["from", "the", "two"], &["between", "the"]]
                .iter()
                .map(|p| p.iter().map(|w| w.to_string()).collect())
                .collect(),
        }
    }
}

impl Lexicons {
    /// Adds synonyms from a file of `word part` lines (`#` starts a comment).
    pub fn extend_parts(&mut self, path: &Path) -> Result<()> {
        let text = util::read_text(path)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[..] {
                [word, part] => {
                    self.part_aliases.insert(word.to_lowercase(), part.to_lowercase());
                }
                [word] => {
                    self.part_aliases.insert(word.to_lowercase(), word.to_lowercase());
                }
                _ => return Err(Error::parse(format!("{}:{}", path.display(), n + 1), "expected `word [part]`")),
            }
        }
        Ok(())
    }

    /// Annotation names mentioned by `tokens`, in order of first mention.
    pub fn mentioned_parts<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in tokens {
            if let Some(p) = self.part_aliases.get(t.as_ref()) {
                if !out.contains(p) {
                    out.push(p.clone());
                }
            }
        }
        out
    }
}

/// Tags one utterance. `difficulty` adds the hard or easy tag when known.
pub fn tag_subpopulations<S: AsRef<str>>(
    tokens: &[S],
    difficulty: Option<Difficulty>,
    vocab: &Vocabulary,
    lexicons: &Lexicons,
) -> TagSet {
    let mut tags = TagSet::new();
    if let Some(d) = difficulty {
        tags.insert(d.into());
    }
    let words: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
    if words.iter().any(|w| *w == COMPARATIVE || *w == SUPERLATIVE || lexicons.superlatives.contains(*w)) {
        tags.insert(Tag::SupComp);
    }
    if words.iter().any(|w| lexicons.negatives.contains(*w)) {
        tags.insert(Tag::Negative);
    }
    if lexicons.split_patterns.iter().any(|p| !p.is_empty() && words.windows(p.len()).any(|w| w.iter().zip(p).all(|(a, b)| *a == b))) {
        tags.insert(Tag::SplitLanguage);
    }
    if words.iter().all(|w| vocab.contains(w)) {
        tags.insert(Tag::KnownVocab);
        if words.iter().any(|w| lexicons.part_aliases.contains_key(*w)) {
            tags.insert(Tag::WithPart);
        } else {
            tags.insert(Tag::WithoutPart);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    HighToLow,
    LowToHigh,
    Random,
}

impl WordOrder {
    pub const ALL: [WordOrder; 3] = [WordOrder::HighToLow, WordOrder::Random, WordOrder::LowToHigh];

    pub fn name(self) -> &'static str {
        match self {
            WordOrder::HighToLow => "high_to_low",
            WordOrder::LowToHigh => "low_to_high",
            WordOrder::Random => "random",
        }
    }
}

/// Replaces `⌈fraction·|U|⌉` tokens with `<UNK>`, visiting positions by
/// attention (ties broken by position) or in a random order drawn from `rng`.
pub fn lesion_words(
    utterance: &Utterance,
    attention: &[f64],
    order: WordOrder,
    fraction: f64,
    rng: &mut util::Rng,
) -> Result<Utterance> {
    if attention.len() != utterance.len() {
        return Err(Error::Invalid(format!("{} attention weights for {} tokens", attention.len(), utterance.len())));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("lesion fraction {fraction} outside [0, 1]")));
    }
    let mut positions: Vec<usize> = (0..utterance.len()).collect();
    match order {
        WordOrder::HighToLow => positions.sort_by(|&a, &b| attention[b].total_cmp(&attention[a])),
        WordOrder::LowToHigh => positions.sort_by(|&a, &b| attention[a].total_cmp(&attention[b])),
        WordOrder::Random => positions.shuffle(rng),
    }
    let n = ((fraction * utterance.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = utterance.clone();
    for &p in positions.iter().take(n) {
        out.tokens[p] = UNK.to_string();
        out.token_ids[p] = UNK_ID;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartMode {
    RemovePart,
    KeepPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartChoice {
    Mentioned,
    Random,
}

/// Applies a part lesion to the raw assets. Removing a part paints its pixels
/// with the background and drops its points; keeping a part does the same to
/// every other annotated part. Surviving points are resampled back to the
/// original cloud size. Codes and part annotations of the result are cleared.
pub fn mask_part(obj: &ObjectRepresentation, part: &str, mode: PartMode, rng: &mut util::Rng) -> Result<ObjectRepresentation> {
    let annotation = obj.parts.get(part).ok_or_else(|| Error::UnknownPart {
        part: part.to_string(),
        available: obj.parts.keys().cloned().collect(),
    })?;
    let (pixels, points): (BTreeSet<usize>, BTreeSet<usize>) = match mode {
        PartMode::RemovePart => (annotation.pixels.iter().copied().collect(), annotation.points.iter().copied().collect()),
        PartMode::KeepPart => {
            let own_px: BTreeSet<usize> = annotation.pixels.iter().copied().collect();
            let own_pt: BTreeSet<usize> = annotation.points.iter().copied().collect();
            let others = obj.parts.iter().filter(|(name, _)| name.as_str() != part);
            let mut px = BTreeSet::new();
            let mut pt = BTreeSet::new();
            for (_, a) in others {
                px.extend(a.pixels.iter().filter(|p| !own_px.contains(p)));
                pt.extend(a.points.iter().filter(|p| !own_pt.contains(p)));
            }
            (px, pt)
        }
    };
    let mut out = obj.clone();
    out.image_code = None;
    out.pc_code = None;
    out.parts.clear();
    if let Some(img) = &mut out.image {
        let bg = img.background;
        for &p in &pixels {
            if p < img.pixel_count() {
                img.paint(p, bg);
            }
        }
    }
    if let Some(cloud) = &obj.cloud {
        let survivors: Vec<usize> = (0..cloud.len()).filter(|i| !points.contains(i)).collect();
        if survivors.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut rows = Vec::with_capacity(cloud.len());
        for &i in &survivors {
            rows.push(cloud.points.row(i).to_vec());
        }
        while rows.len() < cloud.len() {
            let &i = survivors.choose(rng).expect("non-empty");
            rows.push(cloud.points.row(i).to_vec());
        }
        out.cloud = Some(PointCloud::new(Mat::from_rows(&rows))?);
    }
    Ok(out)
}

/// [`mask_part`] followed by re-encoding the lesioned assets.
pub fn lesion_parts(
    obj: &ObjectRepresentation,
    part: &str,
    mode: PartMode,
    encoder: &ObjectEncoder,
    rng: &mut util::Rng,
) -> Result<ObjectRepresentation> {
    let masked = mask_part(obj, part, mode, rng)?;
    let mut encoded = encoder.encode(&masked)?;
    // Modalities the encoder does not cover keep their intact codes.
    if encoder.image.is_none() {
        encoded.image_code = obj.image_code.clone();
    }
    if encoder.cloud.is_none() {
        encoded.pc_code = obj.pc_code.clone();
    }
    Ok(encoded)
}

/// One judged trial, as written to line-delimited record files. The service's
/// results export uses the same field names, so its files load here directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub context_id: String,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub tags: TagSet,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    /// Records per seed.
    pub counts: Vec<usize>,
    /// Mean over seeds with a non-empty bucket; `None` when every seed is empty.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
}

impl BucketStat {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: usize,
    pub overall: BucketStat,
    pub per_tag: BTreeMap<Tag, BucketStat>,
    pub runtime_secs: f64,
}

fn bucket(runs: &[Vec<EvalRecord>], keep: impl Fn(&EvalRecord) -> bool) -> BucketStat {
    let mut counts = Vec::new();
    let mut accs = Vec::new();
    for run in runs {
        let (n, hits) = run.iter().filter(|r| keep(r)).fold((0, 0), |(n, h), r| (n + 1, h + usize::from(r.correct)));
        counts.push(n);
        if n > 0 {
            accs.push(hits as f64 / n as f64);
        }
    }
    if accs.is_empty() {
        return BucketStat { counts, mean: None, stderr: None };
    }
    let (mean, se) = util::mean_stderr(&accs);
    BucketStat { counts, mean: Some(mean), stderr: Some(se) }
}

/// Aggregates per-seed record sets into mean ± standard error per bucket.
pub fn summarize(runs: &[Vec<EvalRecord>], runtime_secs: f64) -> EvalReport {
    let per_tag = Tag::ALL.iter().map(|&t| (t, bucket(runs, |r| r.tags.contains(&t)))).collect();
    EvalReport { seeds: runs.len(), overall: bucket(runs, |_| true), per_tag, runtime_secs }
}

impl EvalReport {
    pub fn tag(&self, tag: Tag) -> &BucketStat {
        &self.per_tag[&tag]
    }

    /// Fixed-width table with one row per bucket; accuracies in percent.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = format!("{title} ({} seed{})\n", self.seeds, if self.seeds == 1 { "" } else { "s" });
        let _ = writeln!(out, "{:<16}{:>10}{:>18}", "bucket", "n", "accuracy");
        let rows = std::iter::once(("overall", &self.overall)).chain(Tag::ALL.iter().map(|&t| (t.name(), &self.per_tag[&t])));
        for (name, stat) in rows {
            let acc = match (stat.mean, stat.stderr) {
                (Some(m), Some(s)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s),
                _ => "n/a".to_string(),
            };
            let _ = writeln!(out, "{name:<16}{:>10}{acc:>18}", stat.total());
        }
        out
    }

    /// Writes `<stem>.txt` (table), `<stem>.json` (report) and `<stem>.records.jsonl`.
    pub fn write(&self, dir: &Path, stem: &str, title: &str, runs: &[Vec<EvalRecord>]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        util::write_text(&dir.join(format!("{stem}.txt")), &self.to_table(title))?;
        util::write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        util::write_jsonl(&dir.join(format!("{stem}.records.jsonl")), runs.iter().flatten())
    }
}

/// Judges every example with `listener` and tags it by its own utterance.
pub fn evaluate_listener(
    listener: &Listener,
    examples: &[Example],
    objects: &ObjectMap,
    vocab: &Vocabulary,
    lexicons: &Lexicons,
) -> Result<Vec<EvalRecord>> {
    let outputs = listener.score_examples(examples, objects)?;
    Ok(examples
        .iter()
        .zip(outputs)
        .map(|(ex, out)| EvalRecord {
            context_id: ex.context_id.clone(),
            difficulty: ex.difficulty,
            tags: tag_subpopulations(&ex.utterance.tokens, Some(ex.difficulty), vocab, lexicons),
            correct: out.prediction() == ex.target,
            utterance: None,
        })
        .collect())
}

/// Unique `(objects, target)` examples in first-seen order.
pub fn unique_contexts(examples: &[Example]) -> Vec<&Example> {
    let mut seen = BTreeSet::new();
    examples.iter().filter(|ex| seen.insert((ex.object_ids.clone(), ex.target))).collect()
}

/// Generates one utterance per unique context with `generate` and judges it
/// with the evaluating listener. An empty generation counts as a miss.
pub fn evaluate_speaker<G>(
    generate: G,
    evaluator: &Listener,
    examples: &[Example],
    objects: &ObjectMap,
    vocab: &Vocabulary,
    lexicons: &Lexicons,
    seed: u64,
) -> Result<Vec<EvalRecord>>
where
    G: Fn(&[&ObjectRepresentation], usize, u64) -> Result<Vec<usize>> + Sync,
{
    let contexts = unique_contexts(examples);
    let records = par::map_range(contexts.len(), |i| {
        let ex = contexts[i];
        let objs = resolve(objects, &ex.object_ids)?;
        let ids = generate(&objs, ex.target, seed.wrapping_add(i as u64))?;
        let tokens = vocab.decode(&ids);
        let correct = !ids.is_empty() && evaluator.predict(&objs, &ids)?.0 == ex.target;
        Ok(EvalRecord {
            context_id: ex.context_id.clone(),
            difficulty: ex.difficulty,
            tags: tag_subpopulations(&tokens, Some(ex.difficulty), vocab, lexicons),
            correct,
            utterance: Some(tokens.join(" ")),
        })
    });
    records.into_iter().collect()
}

fn fraction_correct(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return f64::NAN;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionPoint {
    pub order: WordOrder,
    pub fraction: f64,
    pub accuracy: f64,
}

/// Word-lesion curves. Attention comes from `attentive` (averaged over the
/// objects); accuracy is measured with `evaluator`, which must not attend.
pub fn word_lesion_curve(
    attentive: &Listener,
    evaluator: &Listener,
    examples: &[Example],
    objects: &ObjectMap,
    orders: &[WordOrder],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<LesionPoint>> {
    if evaluator.config.use_attention {
        return Err(Error::Invalid("word lesions must be judged by a listener trained without attention".into()));
    }
    if !attentive.config.use_attention {
        return Err(Error::Invalid("lesion order needs a listener with word attention".into()));
    }
    let attention: Vec<Vec<f64>> = attentive
        .score_examples(examples, objects)?
        .into_iter()
        .map(|o| o.mean_attention().expect("attentive listener"))
        .collect();
    let mut out = Vec::new();
    for &order in orders {
        for &fraction in fractions {
            let hits = par::map_range(examples.len(), |i| {
                let ex = &examples[i];
                let mut rng = util::derived_rng(seed, 0x1e, i as u64);
                let lesioned = lesion_words(&ex.utterance, &attention[i], order, fraction, &mut rng)?;
                let objs = resolve(objects, &ex.object_ids)?;
                Ok(evaluator.predict(&objs, &lesioned.token_ids)?.0 == ex.target)
            });
            let hits = hits.into_iter().collect::<Result<Vec<bool>>>()?;
            out.push(LesionPoint { order, fraction, accuracy: fraction_correct(&hits) });
        }
    }
    Ok(out)
}

pub fn lesion_curve_csv(points: &[LesionPoint]) -> String {
    let mut out = String::from("order,fraction,accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.order.name(), p.fraction, p.accuracy);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLesionResult {
    pub mode: PartMode,
    pub choice: PartChoice,
    /// Examples whose utterance mentions an annotated part of the target.
    pub evaluated: usize,
    pub intact_accuracy: f64,
    pub lesioned_accuracy: f64,
}

impl PartLesionResult {
    pub fn reduction(&self) -> f64 {
        self.intact_accuracy - self.lesioned_accuracy
    }
}

/// Lesions one part on all three objects of each context and re-encodes them.
/// Only examples that mention a part annotated on the target are evaluated;
/// `Random` draws uniformly from the target's annotated parts instead.
#[allow(clippy::too_many_arguments)]
pub fn part_lesion(
    listener: &Listener,
    examples: &[Example],
    objects: &ObjectMap,
    encoder: &ObjectEncoder,
    lexicons: &Lexicons,
    mode: PartMode,
    choice: PartChoice,
    seed: u64,
) -> Result<PartLesionResult> {
    let eligible: Vec<(&Example, String)> = examples
        .iter()
        .filter_map(|ex| {
            let target = objects.get(ex.target_id())?;
            let part = lexicons.mentioned_parts(&ex.utterance.tokens).into_iter().find(|p| target.parts.contains_key(p))?;
            Some((ex, part))
        })
        .collect();
    let results = par::map_range(eligible.len(), |i| {
        let (ex, mentioned) = &eligible[i];
        let objs = resolve(objects, &ex.object_ids)?;
        let intact = listener.predict(&objs, &ex.utterance.token_ids)?.0 == ex.target;
        let mut rng = util::derived_rng(seed, 0x9a, i as u64);
        let part = match choice {
            PartChoice::Mentioned => mentioned.clone(),
            PartChoice::Random => {
                let names: Vec<&String> = objs[ex.target].parts.keys().collect();
                names.choose(&mut rng).expect("target has parts").to_string()
            }
        };
        let lesioned: Vec<ObjectRepresentation> =
            objs.iter().map(|o| lesion_parts(o, &part, mode, encoder, &mut rng)).collect::<Result<_>>()?;
        let refs: Vec<&ObjectRepresentation> = lesioned.iter().collect();
        let after = listener.predict(&refs, &ex.utterance.token_ids)?.0 == ex.target;
        Ok((intact, after))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let intact: Vec<bool> = results.iter().map(|r| r.0).collect();
    let after: Vec<bool> = results.iter().map(|r| r.1).collect();
    Ok(PartLesionResult {
        mode,
        choice,
        evaluated: results.len(),
        intact_accuracy: fraction_correct(&intact),
        lesioned_accuracy: fraction_correct(&after),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmiEntry {
    pub word: String,
    pub count: u64,
    /// `ln(P(w | hard) / P(w))`; positive values lean hard, negative lean easy.
    pub pmi: f64,
}

/// Token-level PMI of each word with hard contexts, sorted most-hard first
/// (ties by word). Words seen fewer than `min_count` times are dropped.
pub fn pmi_table<S: AsRef<str>>(utterances: &[(Vec<S>, Difficulty)], min_count: u64) -> Vec<PmiEntry> {
    let mut total: HashMap<&str, u64> = HashMap::new();
    let mut hard: HashMap<&str, u64> = HashMap::new();
    let (mut n_total, mut n_hard) = (0u64, 0u64);
    for (tokens, d) in utterances {
        for t in tokens {
            *total.entry(t.as_ref()).or_default() += 1;
            n_total += 1;
            if *d == Difficulty::Hard {
                *hard.entry(t.as_ref()).or_default() += 1;
                n_hard += 1;
            }
        }
    }
    if n_hard == 0 {
        return Vec::new();
    }
    let mut out: Vec<PmiEntry> = total
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(&w, &c)| {
            let h = hard.get(w).copied().unwrap_or(0);
            let pmi = ((h as f64 / n_hard as f64) / (c as f64 / n_total as f64)).ln();
            PmiEntry { word: w.to_string(), count: c, pmi }
        })
        .collect();
    out.sort_by(|a, b| b.pmi.total_cmp(&a.pmi).then_with(|| a.word.cmp(&b.word)));
    out
}

pub fn pmi_table_text(entries: &[PmiEntry]) -> String {
    let mut out = format!("{:<20}{:>8}{:>10}\n", "word", "count", "pmi");
    for e in entries {
        let _ = writeln!(out, "{:<20}{:>8}{:>10.3}", e.word, e.count, e.pmi);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `accuracy[i][j]` is the accuracy at `alphas[i]`, `betas[j]`.
    pub accuracy: Vec<Vec<f64>>,
    /// `(i, j)` of the best cell; the first one wins ties.
    pub best: (usize, usize),
}

impl SweepGrid {
    pub fn best_alpha(&self) -> f64 {
        self.alphas[self.best.0]
    }

    pub fn best_beta(&self) -> f64 {
        self.betas[self.best.1]
    }

    pub fn best_accuracy(&self) -> f64 {
        self.accuracy[self.best.0][self.best.1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,accuracy\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.accuracy[i][j]);
            }
        }
        out
    }
}

/// Candidate pools for each unique context: samples scored by the internal
/// listener, plus the evaluating listener's verdict on every distinct utterance.
pub struct CandidatePools {
    contexts: Vec<Example>,
    pools: Vec<Vec<SpeakerSample>>,
    verdicts: Vec<HashMap<Vec<usize>, bool>>,
}

impl CandidatePools {
    pub fn build(
        speaker: &Speaker,
        internal: &Listener,
        evaluator: &Listener,
        examples: &[Example],
        objects: &ObjectMap,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let contexts: Vec<Example> = unique_contexts(examples).into_iter().cloned().collect();
        let built = par::map_range(contexts.len(), |i| {
            let ex = &contexts[i];
            let objs = resolve(objects, &ex.object_ids)?;
            let mut pool = speaker.candidates(&objs, ex.target, samples, seed.wrapping_add(i as u64))?;
            score_with_listener(&mut pool, internal, &objs, ex.target)?;
            let mut verdicts = HashMap::new();
            for s in &pool {
                if !verdicts.contains_key(&s.token_ids) {
                    let ok = !s.token_ids.is_empty() && evaluator.predict(&objs, &s.token_ids)?.0 == ex.target;
                    verdicts.insert(s.token_ids.clone(), ok);
                }
            }
            Ok((pool, verdicts))
        });
        let (pools, verdicts) = built.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok(Self { contexts, pools, verdicts })
    }

    pub fn contexts(&self) -> &[Example] {
        &self.contexts
    }

    /// Top-1 candidate by [`pragmatic_score`](crate::speaker::pragmatic_score) for every context.
    pub fn top(&self, alpha: f64, beta: f64) -> Result<Vec<SpeakerSample>> {
        self.pools.iter().map(|p| Ok(rerank(p, alpha, beta)?.swap_remove(0))).collect()
    }

    /// Evaluating-listener accuracy of the top-1 utterances.
    pub fn accuracy(&self, alpha: f64, beta: f64) -> Result<f64> {
        let top = self.top(alpha, beta)?;
        let hits: Vec<bool> = top.iter().zip(&self.verdicts).map(|(s, v)| v[&s.token_ids]).collect();
        Ok(fraction_correct(&hits))
    }

    /// Per-context records for the top-1 utterances.
    pub fn records(&self, alpha: f64, beta: f64, vocab: &Vocabulary, lexicons: &Lexicons) -> Result<Vec<EvalRecord>> {
        let top = self.top(alpha, beta)?;
        Ok(top
            .iter()
            .zip(&self.verdicts)
            .zip(&self.contexts)
            .map(|((s, v), ex)| {
                let tokens = vocab.decode(&s.token_ids);
                EvalRecord {
                    context_id: ex.context_id.clone(),
                    difficulty: ex.difficulty,
                    tags: tag_subpopulations(&tokens, Some(ex.difficulty), vocab, lexicons),
                    correct: v[&s.token_ids],
                    utterance: Some(tokens.join(" ")),
                }
            })
            .collect())
    }

    pub fn sweep(&self, alphas: &[f64], betas: &[f64]) -> Result<SweepGrid> {
        if alphas.is_empty() || betas.is_empty() {
            return Err(Error::Invalid("sweep needs at least one α and one β".into()));
        }
        let mut accuracy = Vec::with_capacity(alphas.len());
        let mut best = (0, 0);
        let mut best_acc = f64::NEG_INFINITY;
        for (i, &a) in alphas.iter().enumerate() {
            let mut row = Vec::with_capacity(betas.len());
            for (j, &b) in betas.iter().enumerate() {
                let acc = self.accuracy(a, b)?;
                if acc > best_acc {
                    best_acc = acc;
                    best = (i, j);
                }
                row.push(acc);
            }
            accuracy.push(row);
        }
        Ok(SweepGrid { alphas: alphas.to_vec(), betas: betas.to_vec(), accuracy, best })
    }
}

/// Re-ranks fresh candidate pools over an α × β grid and reports the
/// evaluating listener's accuracy on each cell's top-1 utterances.
#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha_beta(
    speaker: &Speaker,
    internal: &Listener,
    evaluator: &Listener,
    examples: &[Example],
    objects: &ObjectMap,
    alphas: &[f64],
    betas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<SweepGrid> {
    CandidatePools::build(speaker, internal, evaluator, examples, objects, samples, seed)?.sweep(alphas, betas)
}

/// Times a closure, for the runtime field of reports.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}
