//! The `refgame` command line. Every verb reads and writes under one work
//! directory (`--out`), so the stages chain with their default paths:
//!
//! ```text
//! refgame synth-world && refgame preprocess && refgame train-listener --id lis
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use refgame_core::checkpoint::CheckpointStore;
use refgame_core::config::Config;
use refgame_core::context::{build_contexts, build_knn_graph, read_contexts, select_seeds, write_contexts, ContextParams, ContextRecord, EmbeddingIndex};
use refgame_core::corpus::{make_split, prepare, read_trials, DatasetSplit, Example, Tokenizer, Vocabulary};
use refgame_core::encoders::{
    fit_image_encoder, fit_pc_autoencoder, resolve, BackboneSource, ImageClassifier, ObjectEncoder, ObjectMap, ObjectRepresentation, PcAutoencoder,
};
use refgame_core::evaluation::{
    evaluate_listener, evaluate_speaker, lesion_curve_csv, part_lesion, pmi_table, pmi_table_text, summarize, sweep_alpha_beta,
    tag_subpopulations, word_lesion_curve, EvalRecord, Lexicons, PartChoice, PartMode,
};
use refgame_core::listener::{train_listener, Listener};
use refgame_core::speaker::{rerank, score_with_listener, train_speaker, Speaker};
use refgame_core::synthetic::{read_objects, SyntheticWorld};
use refgame_core::{util, Error, Result};

use crate::agents::{detokenize, CheckpointAgents};
use crate::engine::{ContextPool, Engine};

const GENERATE_STREAM: u64 = 0x9e;

#[derive(Parser, Debug)]
#[command(name = "refgame", version, about = "Train, evaluate and play reference-game agents")]
pub struct Cli {
    /// TOML run configuration, overlaid on the chosen preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Work directory holding every stage's inputs and outputs.
    #[arg(long, global = true, default_value = "work")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Small models that train in minutes on one core.
    Desk,
    /// Full-size architectures.
    Full,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world (objects, contexts, transcripts, renders).
    SynthWorld,
    /// Build hard and easy contexts from an object embedding.
    BuildContexts {
        /// Whitespace-separated matrix, one row per object.
        #[arg(long)]
        embedding: PathBuf,
        /// One object id per line, aligned with the matrix rows.
        #[arg(long)]
        ids: PathBuf,
    },
    /// Split transcripts, build the vocabulary and encode utterances.
    Preprocess {
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Fit the point-cloud autoencoder and the image classifier, then fill object codes.
    FitEncoders {
        #[arg(long)]
        objects: Option<PathBuf>,
        /// `object_id class` lines; the image encoder is fitted only when given.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Pretrained backbone parameters for the image encoder.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    TrainListener {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        data: DataArgs,
    },
    TrainSpeaker {
        #[arg(long)]
        id: String,
        /// Listener checkpoint used for model selection.
        #[arg(long)]
        selector: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Subpopulation accuracy of a listener, a speaker, or recorded rounds.
    Evaluate {
        #[arg(long)]
        listener: Option<String>,
        #[arg(long)]
        speaker: Option<String>,
        /// Listener that judges speaker output.
        #[arg(long)]
        evaluator: Option<String>,
        /// Listener that re-ranks speaker candidates.
        #[arg(long)]
        internal: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Line-delimited round records, one file per run.
        #[arg(long, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Partition::Test)]
        partition: Partition,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Word-lesion curves, or part lesions with `--parts`.
    Lesion {
        /// Attentive listener whose attention orders the words.
        #[arg(long)]
        attentive: Option<String>,
        /// Non-attentive listener scoring the lesioned utterances.
        #[arg(long)]
        evaluator: Option<String>,
        #[arg(long)]
        parts: bool,
        #[arg(long)]
        listener: Option<String>,
        #[arg(long, value_enum, default_value_t = PartModeArg::Remove)]
        mode: PartModeArg,
        /// Serialised image classifier used to re-encode lesioned images.
        #[arg(long)]
        image_encoder: Option<PathBuf>,
        /// Synthetic world whose feature extractor re-encodes lesioned images.
        #[arg(long)]
        world: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Grid search of the re-ranking weights on the validation partition.
    Sweep {
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        internal: String,
        #[arg(long)]
        evaluator: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Words most associated with hard contexts.
    Pmi {
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        min_count: u64,
    },
    /// Top-ranked utterances for every target of every context, with a manifest.
    Generate {
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        listener: Option<String>,
        #[command(flatten)]
        pool: PoolArgs,
    },
    /// Run the HTTP game service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Directory served under `/static` (object renders).
        #[arg(long)]
        assets: Option<PathBuf>,
        #[command(flatten)]
        pool: PoolArgs,
    },
    /// Rebuild a service store from its request log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Fresh directory to write the rebuilt store into.
        #[arg(long)]
        into: PathBuf,
        #[command(flatten)]
        pool: PoolArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub objects: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PoolArgs {
    #[arg(long)]
    pub objects: Option<PathBuf>,
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PartModeArg {
    Remove,
    Keep,
}

/// Default locations inside the work directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn objects(&self) -> PathBuf {
        let fitted = self.root.join("objects.jsonl");
        if fitted.exists() {
            fitted
        } else {
            self.world().join("objects.jsonl")
        }
    }

    pub fn contexts(&self) -> PathBuf {
        let built = self.root.join("contexts.jsonl");
        if built.exists() {
            built
        } else {
            self.world().join("contexts.jsonl")
        }
    }

    pub fn trials(&self) -> PathBuf {
        self.world().join("trials.jsonl")
    }

    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let base = match cli.preset {
        Preset::Desk => Config::desk(),
        Preset::Full => Config::default(),
    };
    let mut config = match &cli.config {
        Some(path) => Config::overlay(base, &util::read_text(path)?)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.world.seed = config.seed;
    config.listener.seed = config.seed;
    config.speaker.seed = config.seed;
    config.pc_autoencoder.seed = config.seed;
    config.image_encoder.seed = config.seed;
    Ok(config)
}

/// Vocabulary and examples written by `preprocess`, partitioned by the stored split.
pub struct PreparedData {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl PreparedData {
    pub fn load(dir: &Path) -> Result<Self> {
        let split: DatasetSplit = serde_json::from_str(&util::read_text(&dir.join("split.json"))?)?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let examples: Vec<Example> = util::read_jsonl(&dir.join("examples.jsonl"))?;
        let part = |idx: &[usize]| {
            let set: HashSet<usize> = idx.iter().copied().collect();
            examples.iter().filter(|e| set.contains(&e.trial)).cloned().collect::<Vec<_>>()
        };
        Ok(Self { train: part(&split.train), val: part(&split.val), test: part(&split.test), split, vocab })
    }

    pub fn partition(&self, p: Partition) -> &[Example] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

fn lexicons(config: &Config) -> Result<Lexicons> {
    let mut lex = Lexicons::default();
    if let Some(path) = &config.evaluation.part_synonyms {
        lex.extend_parts(Path::new(path))?;
    }
    Ok(lex)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    util::write_text(path, &serde_json::to_string_pretty(value)?)
}

fn need<'a>(value: &'a Option<String>, flag: &str) -> Result<&'a str> {
    value.as_deref().ok_or_else(|| Error::Invalid(format!("--{flag} is required here")))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let layout = Layout { root: cli.out.clone() };
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let store = CheckpointStore::new(layout.checkpoints());
    let objects_at = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| layout.objects());

    match &cli.command {
        Command::SynthWorld => {
            let world = SyntheticWorld::generate(config.world.clone())?;
            world.save(&layout.world())?;
            println!("wrote {} objects, {} contexts, {} trials to {}", world.objects.len(), world.contexts.len(), world.trials.len(), layout.world().display());
        }
        Command::BuildContexts { embedding, ids } => {
            let ids: Vec<String> = util::read_text(ids)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            let index = EmbeddingIndex::new(ids, util::read_matrix(embedding)?)?;
            let graph = build_knn_graph(&index, config.contexts.k)?;
            let seeds = select_seeds(&graph, config.contexts.seeds);
            let params = ContextParams::from_index(&index, config.contexts.duplicate_percentile);
            let (contexts, skipped) = build_contexts(&index, &seeds, &params);
            for e in &skipped {
                log::warn!("skipped context: {e}");
            }
            let path = layout.root.join("contexts.jsonl");
            write_contexts(&path, &contexts)?;
            println!("wrote {} contexts ({} skipped) to {}", contexts.len(), skipped.len(), path.display());
        }
        Command::Preprocess { trials } => {
            let trials = read_trials(&trials.clone().unwrap_or_else(|| layout.trials()))?;
            let s = &config.split;
            let split = make_split(&trials, s.mode, s.fractions, config.seed)?;
            let prepared = prepare(&trials, &split, s.min_count, s.max_length);
            let dir = layout.prepared();
            write_json(&dir.join("split.json"), &split)?;
            prepared.vocab.save(&dir.join("vocab.json"))?;
            util::write_jsonl(&dir.join("examples.jsonl"), &prepared.examples)?;
            println!(
                "{} of {} trials kept; vocabulary of {} tokens; split {}/{}/{}",
                prepared.examples.len(),
                trials.len(),
                prepared.vocab.len(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::FitEncoders { objects, labels, backbone } => fit_encoders(&config, &layout, &objects_at(objects), labels.as_deref(), backbone.as_deref())?,
        Command::TrainListener { id, data } => {
            let objects = read_objects(&objects_at(&data.objects))?;
            let d = PreparedData::load(&layout.prepared())?;
            let (model, log) = train_listener(&config.listener, &d.train, &d.val, &objects, d.vocab.len(), None)?;
            let path = store.save(id, &model, &d.vocab, &log)?;
            println!("val accuracy {:?} (epoch {:?}); test accuracy {:.4}; saved {}", log.best_val_accuracy, log.best_epoch, model.accuracy(&d.test, &objects)?, path.display());
        }
        Command::TrainSpeaker { id, selector, data } => {
            let objects = read_objects(&objects_at(&data.objects))?;
            let d = PreparedData::load(&layout.prepared())?;
            let selector = selector.as_deref().map(|s| store.load::<Listener>(s)).transpose()?;
            let (model, log) = train_speaker(&config.speaker, &d.train, &d.val, &objects, &d.vocab, selector.as_ref().map(|(l, _)| l))?;
            let path = store.save(id, &model, &d.vocab, &log)?;
            println!("best epoch {:?} selection accuracy {:?}; saved {}", log.best_epoch, log.best_selection_accuracy, path.display());
        }
        Command::Evaluate { listener, speaker, evaluator, internal, alpha, beta, records, partition, data } => {
            let lex = lexicons(&config)?;
            let started = std::time::Instant::now();
            let (runs, stem) = if !records.is_empty() {
                (records.iter().map(|p| ingest_records(p, &lex)).collect::<Result<Vec<_>>>()?, "records".to_string())
            } else {
                let objects = read_objects(&objects_at(&data.objects))?;
                let d = PreparedData::load(&layout.prepared())?;
                let examples = d.partition(*partition);
                if let Some(sid) = speaker {
                    let (spk, _) = store.load::<Speaker>(sid)?;
                    let (judge, _) = store.load::<Listener>(need(evaluator, "evaluator")?)?;
                    let inner = internal.as_deref().map(|i| store.load::<Listener>(i)).transpose()?;
                    let (a, b) = (alpha.unwrap_or(config.service.alpha), beta.unwrap_or(config.service.beta));
                    let samples = config.evaluation.samples;
                    let mut runs = Vec::new();
                    for &seed in &config.evaluation.seeds {
                        let generate = |objs: &[&ObjectRepresentation], target: usize, s: u64| -> Result<Vec<usize>> {
                            let mut cands = spk.candidates(objs, target, samples, s)?;
                            let b = match &inner {
                                Some((l, _)) if b > 0.0 => {
                                    score_with_listener(&mut cands, l, objs, target)?;
                                    b
                                }
                                _ => 0.0,
                            };
                            Ok(rerank(&cands, a, b)?.swap_remove(0).token_ids)
                        };
                        runs.push(evaluate_speaker(generate, &judge, examples, &objects, &d.vocab, &lex, seed)?);
                    }
                    (runs, format!("speaker-{sid}"))
                } else {
                    let lid = need(listener, "listener")?;
                    let (lis, _) = store.load::<Listener>(lid)?;
                    (vec![evaluate_listener(&lis, examples, &objects, &d.vocab, &lex)?], format!("listener-{lid}"))
                }
            };
            let report = summarize(&runs, started.elapsed().as_secs_f64());
            report.write(&layout.reports(), &stem, &stem, &runs)?;
            print!("{}", report.to_table(&stem));
        }
        Command::Lesion { attentive, evaluator, parts, listener, mode, image_encoder, world, data } => {
            let objects = read_objects(&objects_at(&data.objects))?;
            let d = PreparedData::load(&layout.prepared())?;
            if *parts {
                let (lis, _) = store.load::<Listener>(need(listener, "listener")?)?;
                let encoder = match (world, image_encoder) {
                    (Some(w), _) => SyntheticWorld::load(w)?.image_encoder(),
                    (None, Some(p)) => {
                        let clf: ImageClassifier = serde_json::from_str(&util::read_text(p)?)?;
                        ObjectEncoder { image: Some(Box::new(clf)), cloud: None }
                    }
                    (None, None) => return Err(Error::Invalid("part lesions need --world or --image-encoder to re-encode images".into())),
                };
                let mode = match mode {
                    PartModeArg::Remove => PartMode::RemovePart,
                    PartModeArg::Keep => PartMode::KeepPart,
                };
                let lex = lexicons(&config)?;
                let mut rows = Vec::new();
                for choice in [PartChoice::Mentioned, PartChoice::Random] {
                    let r = part_lesion(&lis, &d.test, &objects, &encoder, &lex, mode, choice, config.seed)?;
                    println!(
                        "{:?}/{:?}: {} examples, intact {:.4}, lesioned {:.4}, reduction {:.4}",
                        r.mode,
                        r.choice,
                        r.evaluated,
                        r.intact_accuracy,
                        r.lesioned_accuracy,
                        r.reduction()
                    );
                    rows.push(r);
                }
                write_json(&layout.reports().join("part-lesion.json"), &rows)?;
            } else {
                let (att, _) = store.load::<Listener>(need(attentive, "attentive")?)?;
                let (judge, _) = store.load::<Listener>(need(evaluator, "evaluator")?)?;
                let e = &config.evaluation;
                let points = word_lesion_curve(&att, &judge, &d.test, &objects, &e.lesion_orders, &e.lesion_fractions, config.seed)?;
                let csv = lesion_curve_csv(&points);
                let path = layout.reports().join("word-lesion.csv");
                std::fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
                util::write_text(&path, &csv)?;
                print!("{csv}");
            }
        }
        Command::Sweep { speaker, internal, evaluator, data } => {
            let objects = read_objects(&objects_at(&data.objects))?;
            let d = PreparedData::load(&layout.prepared())?;
            let (spk, _) = store.load::<Speaker>(speaker)?;
            let (inner, _) = store.load::<Listener>(internal)?;
            let (judge, _) = store.load::<Listener>(evaluator)?;
            let e = &config.evaluation;
            let grid = sweep_alpha_beta(&spk, &inner, &judge, &d.val, &objects, &e.alphas, &e.betas, e.samples, config.seed)?;
            std::fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
            util::write_text(&layout.reports().join("sweep.csv"), &grid.to_csv())?;
            print!("{}", grid.to_csv());
            println!("best alpha {} beta {} accuracy {:.4}", grid.best_alpha(), grid.best_beta(), grid.best_accuracy());
        }
        Command::Pmi { trials, min_count } => {
            let trials = read_trials(&trials.clone().unwrap_or_else(|| layout.trials()))?;
            let tok = Tokenizer::from_corpus(trials.iter().map(|t| t.speaker_text.as_str()));
            let utts: Vec<(Vec<String>, _)> = trials.iter().map(|t| (tok.tokenize(&t.speaker_text), t.difficulty)).collect();
            let text = pmi_table_text(&pmi_table(&utts, *min_count));
            std::fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
            util::write_text(&layout.reports().join("pmi.txt"), &text)?;
            print!("{text}");
        }
        Command::Generate { speaker, listener, pool } => generate(&config, &layout, speaker, listener.as_deref(), pool)?,
        Command::Serve { bind, assets, pool } => {
            let engine = build_engine(&config, &layout, pool, Some(&layout.root.join("service")))?;
            let bind = bind.clone().unwrap_or_else(|| config.service.bind.clone());
            let assets = assets.clone().or_else(|| Some(layout.world().join("renders")).filter(|p| p.exists()));
            serve(Arc::new(engine), &bind, assets.as_deref())?;
        }
        Command::Replay { log, into, pool } => {
            let p = load_pool(&layout, pool)?;
            let agents = agents(&config, &layout, pool);
            let engine = Engine::replay(p, Box::new(agents), log, into).map_err(into_core)?;
            let report = engine.aggregate();
            println!("replayed {} sessions into {}", report.sessions, into.display());
        }
    }
    Ok(())
}

fn into_core(e: crate::ServiceError) -> Error {
    match e {
        crate::ServiceError::Core(c) => c,
        other => Error::Invalid(other.to_string()),
    }
}

/// Reads a record file and tags utterances that arrive without tags.
pub fn ingest_records(path: &Path, lex: &Lexicons) -> Result<Vec<EvalRecord>> {
    let mut records: Vec<EvalRecord> = util::read_jsonl(path)?;
    let tok = Tokenizer::default();
    let tokens: Vec<Vec<String>> = records.iter().map(|r| r.utterance.as_deref().map(|u| tok.tokenize(u)).unwrap_or_default()).collect();
    let vocab = Vocabulary::build(&tokens, 1);
    for (r, t) in records.iter_mut().zip(&tokens) {
        if r.tags.is_empty() {
            r.tags = tag_subpopulations(t, Some(r.difficulty), &vocab, lex);
        }
    }
    Ok(records)
}

fn fit_encoders(config: &Config, layout: &Layout, objects: &Path, labels: Option<&Path>, backbone: Option<&Path>) -> Result<()> {
    let objects = read_objects(objects)?;
    let dir = layout.root.join("encoders");
    let mut encoder = ObjectEncoder::default();
    let clouds: Vec<_> = objects.values().filter_map(|o| o.cloud.clone()).collect();
    if !clouds.is_empty() {
        let (ae, log): (PcAutoencoder, _) = fit_pc_autoencoder(&clouds, config.pc_autoencoder.clone())?;
        write_json(&dir.join("pc-autoencoder.json"), &ae)?;
        println!("point-cloud autoencoder: final loss {:?}", log.epoch_losses.last());
        encoder.cloud = Some(Box::new(ae));
    }
    if let Some(labels) = labels {
        let mut images = Vec::new();
        let mut classes = Vec::new();
        for (n, line) in util::read_text(labels)?.lines().enumerate() {
            let mut f = line.split_whitespace();
            let (Some(id), Some(class)) = (f.next(), f.next()) else { continue };
            let class: usize = class.parse().map_err(|_| Error::parse(format!("{}:{}", labels.display(), n + 1), "class must be an integer"))?;
            let obj = objects.get(id).ok_or_else(|| Error::UnknownObject(id.to_string()))?;
            let img = obj.image.clone().ok_or_else(|| Error::MissingCode { object: id.to_string(), modality: "image asset" })?;
            images.push(img);
            classes.push(class);
        }
        let source = match backbone {
            Some(p) => BackboneSource::Pretrained(p.to_path_buf()),
            None => BackboneSource::RandomInit(config.seed),
        };
        let (clf, log) = fit_image_encoder(&images, &classes, &source, &config.image_encoder)?;
        write_json(&dir.join("image-classifier.json"), &clf)?;
        println!("image classifier: train accuracy {:.4}", log.train_accuracy);
        encoder.image = Some(Box::new(clf));
    }
    if encoder.image.is_none() && encoder.cloud.is_none() {
        return Err(Error::Invalid("nothing to fit: no point clouds and no --labels".into()));
    }
    let encoded: Vec<ObjectRepresentation> = objects.values().map(|o| encoder.encode(o)).collect::<Result<_>>()?;
    let path = layout.root.join("objects.jsonl");
    util::write_jsonl(&path, &encoded)?;
    println!("encoded {} objects into {}", encoded.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct GeneratedUtterance {
    context_id: String,
    object_ids: [String; 3],
    target: usize,
    utterance: String,
    speaker_log_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    listener_log_prob: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    speaker: &'a str,
    listener: Option<&'a str>,
    alpha: f64,
    beta: f64,
    samples: usize,
    seed: u64,
    contexts: String,
    contexts_digest: String,
    utterances: usize,
}

fn generate(config: &Config, layout: &Layout, speaker: &str, listener: Option<&str>, pool: &PoolArgs) -> Result<()> {
    let store = CheckpointStore::new(pool.checkpoints.clone().unwrap_or_else(|| layout.checkpoints()));
    let (spk, vocab) = store.load::<Speaker>(speaker)?;
    let inner = listener.map(|l| store.load::<Listener>(l)).transpose()?;
    let p = load_pool(layout, pool)?;
    let s = &config.service;
    let beta = if inner.is_some() { s.beta } else { 0.0 };
    let mut out = Vec::new();
    for (c, ctx) in p.contexts.iter().enumerate() {
        let objs = resolve(&p.objects, &ctx.object_ids)?;
        for target in 0..3 {
            let seed: u64 = util::derived_rng(config.seed, GENERATE_STREAM, (c * 3 + target) as u64).random();
            let mut cands = spk.candidates(&objs, target, s.samples, seed)?;
            if let Some((l, _)) = &inner {
                if beta > 0.0 {
                    score_with_listener(&mut cands, l, &objs, target)?;
                }
            }
            let best = rerank(&cands, s.alpha, beta)?.swap_remove(0);
            out.push(GeneratedUtterance {
                context_id: ctx.context_id.clone(),
                object_ids: ctx.object_ids.clone(),
                target,
                utterance: detokenize(&vocab.decode(&best.token_ids)),
                speaker_log_prob: best.speaker_log_prob,
                listener_log_prob: best.listener_log_prob,
            });
        }
    }
    let dir = layout.root.join("generated");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    util::write_jsonl(&dir.join("utterances.jsonl"), &out)?;
    let contexts_path = pool.contexts.clone().unwrap_or_else(|| layout.contexts());
    let manifest = Manifest {
        speaker,
        listener,
        alpha: s.alpha,
        beta,
        samples: s.samples,
        seed: config.seed,
        contexts_digest: util::hash_lines(p.contexts.iter().map(|c| c.context_id.as_str())),
        contexts: contexts_path.display().to_string(),
        utterances: out.len(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {} utterances to {}", out.len(), dir.display());
    Ok(())
}

fn load_pool(layout: &Layout, pool: &PoolArgs) -> Result<ContextPool> {
    let objects: ObjectMap = read_objects(&pool.objects.clone().unwrap_or_else(|| layout.objects()))?;
    let contexts: Vec<ContextRecord> = read_contexts(&pool.contexts.clone().unwrap_or_else(|| layout.contexts()))?;
    ContextPool::new(objects, contexts).map_err(into_core)
}

fn agents(config: &Config, layout: &Layout, pool: &PoolArgs) -> CheckpointAgents {
    let s = &config.service;
    CheckpointAgents::new(CheckpointStore::new(pool.checkpoints.clone().unwrap_or_else(|| layout.checkpoints())), s.alpha, s.beta, s.samples)
}

pub fn build_engine(config: &Config, layout: &Layout, pool: &PoolArgs, data: Option<&Path>) -> Result<Engine> {
    let p = load_pool(layout, pool)?;
    Engine::open(p, Box::new(agents(config, layout, pool)), data).map_err(into_core)
}

fn serve(engine: Arc<Engine>, bind: &str, assets: Option<&Path>) -> Result<()> {
    let app = crate::api::router(engine, assets);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| Error::Invalid(format!("bind {bind}: {e}")))?;
        log::info!("listening on {bind}");
        println!("listening on http://{bind}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Invalid(format!("server: {e}")))
    })
}
