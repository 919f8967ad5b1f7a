//! Neural speakers: an LSTM decoder grounded on object codes, plus the
//! listener-aware re-ranking that turns a literal speaker into a pragmatic one.
//!
//! The context is consumed before the first token: each distractor (in
//! ascending id order) and then the target, so the target's position never
//! has to be encoded. A context-unaware speaker sees the target alone.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocabulary, EOS_ID, PAD_ID, SOS_ID};
use crate::encoders::{resolve, Modality, ObjectMap, ObjectRepresentation, MISSING_ROW_LIMIT};
use crate::listener::Listener;
use crate::nn::{
    argmax, dropout_mask, log_softmax, uniform, Adam, Grads, Graph, Linear, Lstm, LstmState, Mat, NodeId, ParamId,
    ParamSet,
};
use crate::{par, util, Error, Result};

/// Logit offset that removes a token from the output distribution.
const MASKED: f64 = -1e30;
const DROPOUT_STREAM: u64 = 0x5e;
const SAMPLE_STREAM: u64 = 0x5a;

/// How image and point-cloud codes are combined when both are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Two half-width projections, concatenated.
    #[default]
    Concat100,
    /// Two full-width projections, concatenated; the recurrent input doubles.
    Concat200,
    Sum,
    /// Point-cloud code, then image code, on consecutive steps.
    Serial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Multinomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerConfig {
    pub modality: Modality,
    pub mixing: Mixing,
    pub context_aware: bool,
    pub lstm_hidden: usize,
    pub projection_dim: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub word_dropout_keep: f64,
    pub image_dropout_keep: f64,
    pub cloud_dropout_keep: f64,
    pub output_dropout_keep: f64,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub max_decode_length: usize,
    /// Epochs between greedy decoding rounds scored by the selection listener.
    pub select_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SpeakerConfig {
    pub fn for_modality(modality: Modality) -> Self {
        Self {
            modality,
            mixing: Mixing::default(),
            context_aware: true,
            lstm_hidden: 200,
            projection_dim: 100,
            learning_rate: 0.003,
            l2_weight: 0.005,
            word_dropout_keep: 0.8,
            image_dropout_keep: 0.5,
            cloud_dropout_keep: 1.0,
            output_dropout_keep: 0.9,
            grad_clip_norm: 5.0,
            max_epochs: if modality == Modality::Image { 300 } else { 400 },
            max_decode_length: crate::corpus::MAX_UTTERANCE_LEN,
            select_every: 10,
            batch_size: 64,
            seed: 0,
        }
    }

    /// Width of every recurrent input (object steps and word embeddings).
    pub fn input_dim(&self) -> usize {
        if self.modality == Modality::Both && self.mixing == Mixing::Concat200 {
            2 * self.projection_dim
        } else {
            self.projection_dim
        }
    }

    fn projection_width(&self) -> usize {
        if self.modality == Modality::Both && self.mixing == Mixing::Concat100 {
            self.projection_dim / 2
        } else {
            self.projection_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let keeps = [self.word_dropout_keep, self.image_dropout_keep, self.cloud_dropout_keep, self.output_dropout_keep];
        if keeps.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::Invalid("dropout keep probabilities must lie in (0, 1]".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Invalid(format!("gradient clip norm {} must be positive", self.grad_clip_norm)));
        }
        if self.modality == Modality::Both && self.mixing == Mixing::Concat100 && self.projection_dim % 2 != 0 {
            return Err(Error::Invalid("concat_100 mixing needs an even projection dim".into()));
        }
        if self.lstm_hidden == 0 || self.max_decode_length == 0 || self.batch_size == 0 || self.select_every == 0 {
            return Err(Error::Invalid("sizes and intervals must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self::for_modality(Modality::Image)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerDims {
    pub vocab: usize,
    pub image: usize,
    pub cloud: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSample {
    pub token_ids: Vec<usize>,
    /// `log P_S(U | O, t)`, including the end-of-sequence step when one was emitted.
    pub speaker_log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listener_log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pragmatic_score: Option<f64>,
}

/// Recurrent state after the context steps, detached from any graph.
#[derive(Clone, Debug)]
struct Primed {
    h: Mat,
    c: Mat,
}

struct Noise {
    image: Mat,
    cloud: Mat,
    words: Vec<Mat>,
    outputs: Vec<Mat>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Speaker {
    pub config: SpeakerConfig,
    pub dims: SpeakerDims,
    params: ParamSet,
    embedding: ParamId,
    image_proj: Option<Linear>,
    cloud_proj: Option<Linear>,
    lstm: Lstm,
    output: Linear,
}

impl Speaker {
    /// `token_counts` (aligned with vocabulary ids) initialises the output bias to log frequencies.
    pub fn new(config: SpeakerConfig, dims: SpeakerDims, token_counts: Option<&[u64]>) -> Result<Self> {
        config.validate()?;
        let mut rng = util::rng(config.seed);
        let mut params = ParamSet::new();
        let input = config.input_dim();
        let embedding = params.add("embedding", uniform(&mut rng, dims.vocab, input, MISSING_ROW_LIMIT));
        let pw = config.projection_width();
        let image_proj = config.modality.uses_image().then(|| Linear::new(&mut params, "proj.image", dims.image, pw, &mut rng));
        let cloud_proj = config.modality.uses_cloud().then(|| Linear::new(&mut params, "proj.cloud", dims.cloud, pw, &mut rng));
        let lstm = Lstm::new(&mut params, "lstm", input, config.lstm_hidden, &mut rng);
        let output = Linear::new(&mut params, "output", config.lstm_hidden, dims.vocab, &mut rng);
        if let Some(counts) = token_counts {
            if counts.len() != dims.vocab {
                return Err(Error::Invalid(format!("{} token counts for a vocabulary of {}", counts.len(), dims.vocab)));
            }
            let total = counts.iter().sum::<u64>().max(1) as f64;
            let bias = params.get_mut(output.b);
            for (b, &c) in bias.data_mut().iter_mut().zip(counts) {
                *b = (c.max(1) as f64 / total).ln();
            }
        }
        Ok(Self { config, dims, params, embedding, image_proj, cloud_proj, lstm, output })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    fn l2_ids(&self) -> Vec<ParamId> {
        self.image_proj.iter().chain(&self.cloud_proj).map(|l| l.w).collect()
    }

    /// Objects in feed order: distractors by ascending id, then the target.
    fn feed_order<'a>(
        &self,
        objects: &[&'a ObjectRepresentation],
        target: usize,
    ) -> Result<Vec<&'a ObjectRepresentation>> {
        if target >= objects.len() {
            return Err(Error::Invalid(format!("target {target} outside context of {}", objects.len())));
        }
        if !self.config.context_aware {
            return Ok(vec![objects[target]]);
        }
        let mut distractors: Vec<&ObjectRepresentation> =
            objects.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, o)| *o).collect();
        distractors.sort_by(|a, b| a.object_id.cmp(&b.object_id));
        distractors.push(objects[target]);
        Ok(distractors)
    }

    fn code(&self, obj: &ObjectRepresentation, image: bool) -> Result<Mat> {
        let (code, want, what) = if image {
            (obj.image_code()?, self.dims.image, "image")
        } else {
            (obj.pc_code()?, self.dims.cloud, "point-cloud")
        };
        if code.len() != want {
            return Err(Error::Invalid(format!("{what} code of {} has {} dims, speaker expects {want}", obj.object_id, code.len())));
        }
        Ok(Mat::row_vector(code.to_vec()))
    }

    fn project(&self, g: &mut Graph, layer: Linear, code: Mat, mask: Option<&Mat>) -> NodeId {
        let x = g.constant(code);
        let x = match mask {
            Some(m) => g.mul_const(x, m.clone()),
            None => x,
        };
        let h = layer.forward(g, x);
        g.relu(h)
    }

    /// Recurrent inputs encoding the context, in feed order.
    fn context_inputs(&self, g: &mut Graph, ordered: &[&ObjectRepresentation], noise: Option<&Noise>) -> Result<Vec<NodeId>> {
        let mut steps = Vec::new();
        for obj in ordered {
            let img = match self.image_proj {
                Some(l) => Some(self.project(g, l, self.code(obj, true)?, noise.map(|n| &n.image))),
                None => None,
            };
            let pc = match self.cloud_proj {
                Some(l) => Some(self.project(g, l, self.code(obj, false)?, noise.map(|n| &n.cloud))),
                None => None,
            };
            match (img, pc) {
                (Some(i), None) => steps.push(i),
                (None, Some(p)) => steps.push(p),
                (Some(i), Some(p)) => match self.config.mixing {
                    Mixing::Concat100 | Mixing::Concat200 => steps.push(g.concat_cols(&[i, p])),
                    Mixing::Sum => steps.push(g.add(i, p)),
                    Mixing::Serial => {
                        steps.push(p);
                        steps.push(i);
                    }
                },
                (None, None) => unreachable!("a modality is always configured"),
            }
        }
        Ok(steps)
    }

    /// Number of recurrent steps spent on the context (3, 6 for serial mixing, or 1/2 without context).
    pub fn context_steps(&self, k: usize) -> usize {
        let objects = if self.config.context_aware { k } else { 1 };
        let per_object = if self.config.modality == Modality::Both && self.config.mixing == Mixing::Serial { 2 } else { 1 };
        objects * per_object
    }

    fn prime(&self, objects: &[&ObjectRepresentation], target: usize) -> Result<Primed> {
        let ordered = self.feed_order(objects, target)?;
        let mut g = Graph::new(&self.params);
        let inputs = self.context_inputs(&mut g, &ordered, None)?;
        let mut state = self.lstm.zero_state(&mut g);
        for x in inputs {
            state = self.lstm.step(&mut g, x, state);
        }
        Ok(Primed { h: g.value(state.h).clone(), c: g.value(state.c).clone() })
    }

    fn logit_mask(&self, position: usize) -> Mat {
        let mut m = Mat::zeros(1, self.dims.vocab);
        m.set(0, PAD_ID, MASKED);
        m.set(0, SOS_ID, MASKED);
        if position == 0 {
            m.set(0, EOS_ID, MASKED);
        }
        m
    }

    /// Consumes `input` and returns masked next-token logits.
    fn decode_step(
        &self,
        g: &mut Graph,
        input: usize,
        position: usize,
        state: LstmState,
        noise: Option<&Noise>,
    ) -> (NodeId, LstmState) {
        let e = g.row(self.embedding, input);
        let e = match noise {
            Some(n) => g.mul_const(e, n.words[position].clone()),
            None => e,
        };
        let state = self.lstm.step(g, e, state);
        let h = match noise {
            Some(n) => g.mul_const(state.h, n.outputs[position].clone()),
            None => state.h,
        };
        let logits = self.output.forward(g, h);
        let mask = g.constant(self.logit_mask(position));
        (g.add(logits, mask), state)
    }

    /// Log-probabilities of the next token after `prefix` (which excludes `<SOS>`).
    pub fn next_token_log_probs(&self, objects: &[&ObjectRepresentation], target: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        let primed = self.prime(objects, target)?;
        let mut g = Graph::new(&self.params);
        let mut state = LstmState { h: g.constant(primed.h), c: g.constant(primed.c) };
        let mut input = SOS_ID;
        let mut logits = None;
        for pos in 0..=prefix.len() {
            let (l, s) = self.decode_step(&mut g, input, pos, state, None);
            state = s;
            logits = Some(l);
            if pos < prefix.len() {
                input = prefix[pos];
            }
        }
        Ok(log_softmax(g.value(logits.expect("at least one step")).data()))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab || t == PAD_ID || t == SOS_ID) {
            return Err(Error::Invalid(format!("token id {bad} cannot be emitted by the speaker")));
        }
        Ok(())
    }

    /// Teacher-forced negative log-likelihood node and the number of predicted tokens.
    fn nll(&self, g: &mut Graph, ordered: &[&ObjectRepresentation], tokens: &[usize], noise: Option<&Noise>) -> Result<(NodeId, usize)> {
        let inputs = self.context_inputs(g, ordered, noise)?;
        let mut state = self.lstm.zero_state(g);
        for x in inputs {
            state = self.lstm.step(g, x, state);
        }
        let with_eos = tokens.len() < self.config.max_decode_length;
        let mut targets: Vec<usize> = tokens.to_vec();
        if with_eos {
            targets.push(EOS_ID);
        }
        let mut terms = Vec::with_capacity(targets.len());
        let mut input = SOS_ID;
        for (pos, &next) in targets.iter().enumerate() {
            let (logits, s) = self.decode_step(g, input, pos, state, noise);
            state = s;
            let lp = g.log_softmax_rows(logits);
            let mut pick = Mat::zeros(1, self.dims.vocab);
            pick.set(0, next, -1.0);
            let picked = g.mul_const(lp, pick);
            terms.push(g.sum(picked));
            input = next;
        }
        let stacked = g.vstack(&terms);
        Ok((g.sum(stacked), targets.len()))
    }

    /// Exact `log P_S(U | O, t)` under teacher forcing. The end-of-sequence
    /// probability is included unless `U` already has the maximum length.
    pub fn sequence_log_prob(&self, objects: &[&ObjectRepresentation], target: usize, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        if tokens.len() > self.config.max_decode_length {
            return Err(Error::Invalid(format!("utterance of {} tokens exceeds the decode limit", tokens.len())));
        }
        self.check_tokens(tokens)?;
        let ordered = self.feed_order(objects, target)?;
        let mut g = Graph::new(&self.params);
        let (nll, _) = self.nll(&mut g, &ordered, tokens, None)?;
        Ok(-g.value(nll).scalar_value())
    }

    /// Loss with optional gradient accumulation; no dropout.
    pub fn loss(&self, objects: &[&ObjectRepresentation], target: usize, tokens: &[usize], grads: Option<&mut Grads>) -> Result<f64> {
        let ordered = self.feed_order(objects, target)?;
        let mut g = Graph::new(&self.params);
        let (nll, _) = self.nll(&mut g, &ordered, tokens, None)?;
        if let Some(grads) = grads {
            g.backward(nll, grads);
        }
        Ok(g.value(nll).scalar_value())
    }

    fn rollout(&self, primed: &Primed, strategy: Strategy, rng: &mut util::Rng) -> SpeakerSample {
        let mut g = Graph::new(&self.params);
        let mut state = LstmState { h: g.constant(primed.h.clone()), c: g.constant(primed.c.clone()) };
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut input = SOS_ID;
        for pos in 0..self.config.max_decode_length {
            let (logits, s) = self.decode_step(&mut g, input, pos, state, None);
            state = s;
            let lp = log_softmax(g.value(logits).data());
            let next = match strategy {
                Strategy::Greedy => argmax(&lp),
                Strategy::Multinomial => sample_index(&lp, rng),
            };
            log_prob += lp[next];
            if next == EOS_ID {
                break;
            }
            tokens.push(next);
            input = next;
        }
        SpeakerSample { token_ids: tokens, speaker_log_prob: log_prob, listener_log_prob: None, pragmatic_score: None }
    }

    /// Draws utterances for `target`. Greedy returns one rollout regardless of `n`.
    pub fn sample_utterances(
        &self,
        objects: &[&ObjectRepresentation],
        target: usize,
        n: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Result<Vec<SpeakerSample>> {
        let primed = self.prime(objects, target)?;
        Ok(match strategy {
            Strategy::Greedy => vec![self.rollout(&primed, Strategy::Greedy, &mut util::rng(seed))],
            Strategy::Multinomial => par::map_range(n, |i| {
                let mut rng = util::derived_rng(seed, SAMPLE_STREAM, i as u64);
                self.rollout(&primed, Strategy::Multinomial, &mut rng)
            }),
        })
    }

    /// `n` multinomial samples followed by the greedy rollout.
    pub fn candidates(&self, objects: &[&ObjectRepresentation], target: usize, n: usize, seed: u64) -> Result<Vec<SpeakerSample>> {
        let mut out = self.sample_utterances(objects, target, n, Strategy::Multinomial, seed)?;
        out.extend(self.sample_utterances(objects, target, 1, Strategy::Greedy, seed)?);
        Ok(out)
    }

    fn sample_noise(&self, rng: &mut util::Rng, positions: usize) -> Noise {
        let c = &self.config;
        Noise {
            image: dropout_mask(rng, self.dims.image, c.image_dropout_keep),
            cloud: dropout_mask(rng, self.dims.cloud, c.cloud_dropout_keep),
            words: (0..positions).map(|_| dropout_mask(rng, c.input_dim(), c.word_dropout_keep)).collect(),
            outputs: (0..positions).map(|_| dropout_mask(rng, c.lstm_hidden, c.output_dropout_keep)).collect(),
        }
    }
}

fn sample_index(log_probs: &[f64], rng: &mut util::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Candidate score `β·log P_L + ((1 − β)/|U|^α)·log P_S`.
///
/// A term whose coefficient is zero is skipped, so `β = 1` ignores the speaker
/// and `β = 0` ignores the listener. With `β > 0` a zero listener probability
/// gives `−∞`.
pub fn pragmatic_score(length: usize, listener_log_prob: f64, speaker_log_prob: f64, alpha: f64, beta: f64) -> f64 {
    let mut score = 0.0;
    if beta > 0.0 {
        if listener_log_prob == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        score += beta * listener_log_prob;
    }
    if beta < 1.0 {
        score += (1.0 - beta) / (length as f64).powf(alpha) * speaker_log_prob;
    }
    score
}

/// Attaches `log P_L(target | U, O)` to every sample.
pub fn score_with_listener(
    samples: &mut [SpeakerSample],
    listener: &Listener,
    objects: &[&ObjectRepresentation],
    target: usize,
) -> Result<()> {
    let scored: Vec<Result<f64>> = par::map(samples, |s| {
        if s.token_ids.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let out = listener.score_context(objects, &s.token_ids)?;
        Ok(log_softmax(&out.per_object_logits)[target])
    });
    for (s, lp) in samples.iter_mut().zip(scored) {
        s.listener_log_prob = Some(lp?);
    }
    Ok(())
}

/// Sorts samples by descending [`pragmatic_score`]; ties keep their sampling order.
pub fn rerank(samples: &[SpeakerSample], alpha: f64, beta: f64) -> Result<Vec<SpeakerSample>> {
    let mut out = samples.to_vec();
    for s in &mut out {
        let lpl = match (s.listener_log_prob, beta > 0.0) {
            (Some(v), _) => v,
            (None, false) => 0.0,
            (None, true) => return Err(Error::Invalid("re-ranking with β > 0 needs listener scores".into())),
        };
        s.pragmatic_score = Some(pragmatic_score(s.token_ids.len().max(1), lpl, s.speaker_log_prob, alpha, beta));
    }
    out.sort_by(|a, b| b.pragmatic_score.unwrap().total_cmp(&a.pragmatic_score.unwrap()));
    Ok(out)
}

/// A pragmatic speaker: a literal (or context-unaware) speaker whose candidates
/// are re-ranked with an internal listener.
pub struct Pragmatic<'a> {
    pub speaker: &'a Speaker,
    pub listener: &'a Listener,
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
}

impl Pragmatic<'_> {
    /// Candidates sorted best first.
    pub fn generate(&self, objects: &[&ObjectRepresentation], target: usize, seed: u64) -> Result<Vec<SpeakerSample>> {
        let mut cands = self.speaker.candidates(objects, target, self.samples, seed)?;
        if self.beta > 0.0 {
            score_with_listener(&mut cands, self.listener, objects, target)?;
        }
        rerank(&cands, self.alpha, self.beta)
    }
}

/// One context to speak about: object ids and the target index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakingTask {
    pub object_ids: Vec<String>,
    pub target: usize,
}

/// Distinct `(objects, target)` pairs of a dataset, in first-seen order.
pub fn unique_tasks(examples: &[Example]) -> Vec<SpeakingTask> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for ex in examples {
        let task = SpeakingTask { object_ids: ex.object_ids.to_vec(), target: ex.target };
        if seen.insert(task.clone()) {
            out.push(task);
        }
    }
    out
}

/// Listener accuracy on one greedy utterance per task.
pub fn greedy_listener_accuracy(speaker: &Speaker, listener: &Listener, tasks: &[SpeakingTask], objects: &ObjectMap) -> Result<f64> {
    let hits: Vec<Result<bool>> = par::map(tasks, |task| {
        let objs = resolve(objects, &task.object_ids)?;
        let sample = speaker.sample_utterances(&objs, task.target, 1, Strategy::Greedy, 0)?.remove(0);
        if sample.token_ids.is_empty() {
            return Ok(false);
        }
        Ok(listener.predict(&objs, &sample.token_ids)?.0 == task.target)
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Largest pre-clipping gradient norm seen in the epoch.
    pub max_grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerLog {
    pub epochs: Vec<SpeakerEpoch>,
    pub best_epoch: Option<usize>,
    pub best_selection_accuracy: Option<f64>,
    pub diverged_at: Option<usize>,
}

pub fn infer_dims(config: &SpeakerConfig, vocab: usize, examples: &[Example], objects: &ObjectMap) -> Result<SpeakerDims> {
    let first = examples.first().ok_or(Error::EmptyPartition("train"))?;
    let objs = resolve(objects, &first.object_ids)?;
    let image = if config.modality.uses_image() { objs[0].image_code()?.len() } else { 0 };
    let cloud = if config.modality.uses_cloud() { objs[0].pc_code()?.len() } else { 0 };
    Ok(SpeakerDims { vocab, image, cloud })
}

/// Trains with teacher forcing. Every `select_every` epochs one greedy
/// utterance per validation task is judged by `selection`, and the most
/// accurate checkpoint is returned. Without a selection listener (or
/// validation data) the final weights are returned.
pub fn train_speaker(
    config: &SpeakerConfig,
    train: &[Example],
    val: &[Example],
    objects: &ObjectMap,
    vocab: &Vocabulary,
    selection: Option<&Listener>,
) -> Result<(Speaker, SpeakerLog)> {
    let dims = infer_dims(config, vocab.len(), train, objects)?;
    let mut model = Speaker::new(config.clone(), dims, Some(vocab.counts()))?;
    let prepared: Vec<(Vec<&ObjectRepresentation>, &[usize])> = train
        .iter()
        .filter(|ex| !ex.utterance.is_empty())
        .map(|ex| {
            let objs = resolve(objects, &ex.object_ids)?;
            let ordered = model.feed_order(&objs, ex.target)?;
            let tokens = &ex.utterance.token_ids[..ex.utterance.len().min(config.max_decode_length)];
            model.check_tokens(tokens)?;
            Ok((ordered, tokens))
        })
        .collect::<Result<_>>()?;
    if prepared.is_empty() {
        return Err(Error::EmptyPartition("train"));
    }
    let tasks = unique_tasks(val);
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut order_rng = util::rng(config.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let l2_ids = model.l2_ids();
    let mut log = SpeakerLog::default();
    let mut best: Option<Speaker> = None;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let parts = par::fold_chunks(
                batch,
                8,
                || (Grads::zeros_like(&model.params), 0.0, 0usize),
                |(grads, loss, count), _, &i| {
                    let (ordered, tokens) = &prepared[i];
                    let mut rng = util::derived_rng(config.seed, DROPOUT_STREAM + epoch as u64, i as u64);
                    let noise = model.sample_noise(&mut rng, tokens.len() + 1);
                    let mut g = Graph::new(&model.params);
                    let (nll, n) = model.nll(&mut g, ordered, tokens, Some(&noise)).expect("validated inputs");
                    *loss += g.value(nll).scalar_value();
                    *count += n;
                    g.backward(nll, grads);
                },
            );
            let mut grads = Grads::zeros_like(&model.params);
            let mut tokens = 0;
            for (p, l, n) in &parts {
                grads.accumulate(p);
                total += l;
                tokens += n;
            }
            grads.scale(1.0 / tokens.max(1) as f64);
            grads.add_l2(&model.params, &l2_ids, config.l2_weight);
            if !grads.all_finite() {
                diverged = true;
                break;
            }
            max_norm = max_norm.max(grads.clip_global_norm(config.grad_clip_norm));
            opt.step(&mut model.params, &grads);
        }
        if diverged || !total.is_finite() || !model.params.all_finite() {
            log::warn!("speaker training diverged at epoch {epoch}");
            log.diverged_at = Some(epoch);
            return match best {
                Some(b) => Ok((b, log)),
                None => Err(Error::Diverged { epoch }),
            };
        }
        let mut record = SpeakerEpoch { epoch, train_loss: total / prepared.len() as f64, max_grad_norm: max_norm, selection_accuracy: None };
        if let Some(listener) = selection {
            if !tasks.is_empty() && ((epoch + 1) % config.select_every == 0 || epoch + 1 == config.max_epochs) {
                let acc = greedy_listener_accuracy(&model, listener, &tasks, objects)?;
                record.selection_accuracy = Some(acc);
                if log.best_selection_accuracy.is_none_or(|b| acc > b) {
                    log.best_selection_accuracy = Some(acc);
                    log.best_epoch = Some(epoch);
                    best = Some(model.clone());
                }
            }
        }
        log::debug!("speaker epoch {epoch}: loss {:.4}", record.train_loss);
        log.epochs.push(record);
    }
    Ok(match best {
        Some(b) => (b, log),
        None => {
            log.best_epoch = config.max_epochs.checked_sub(1);
            (model, log)
        }
    })
}

/// Disjoint halves of a training set for the fair-evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairHalves {
    /// Trains the evaluating listener.
    pub evaluating: Vec<Example>,
    /// Trains the listener used inside the pragmatic speaker.
    pub internal: Vec<Example>,
    pub evaluating_hash: String,
    pub internal_hash: String,
}

impl FairHalves {
    pub fn split(train: &[Example], seed: u64) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::EmptyPartition("half"));
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut util::rng(seed));
        let (a, b) = idx.split_at(train.len() / 2);
        let take = |ids: &[usize]| {
            let mut v: Vec<usize> = ids.to_vec();
            v.sort_unstable();
            v.into_iter().map(|i| train[i].clone()).collect::<Vec<_>>()
        };
        let (evaluating, internal) = (take(a), take(b));
        let hash = |xs: &[Example]| util::hash_lines(xs.iter().map(|e| e.trial.to_string()));
        Ok(Self { evaluating_hash: hash(&evaluating), internal_hash: hash(&internal), evaluating, internal })
    }

    pub fn is_disjoint(&self) -> bool {
        let a: BTreeSet<usize> = self.evaluating.iter().map(|e| e.trial).collect();
        self.internal.iter().all(|e| !a.contains(&e.trial))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Difficulty, Utterance, EOS_ID};
    use crate::listener::{ListenerConfig, ListenerDims};
    use crate::nn::testing::check_gradients;

    fn object(id: &str, rng: &mut util::Rng) -> ObjectRepresentation {
        ObjectRepresentation::from_codes(
            id,
            Some((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
        )
    }

    fn triplet(seed: u64) -> Vec<ObjectRepresentation> {
        let mut rng = util::rng(seed);
        ["b", "c", "a"].iter().map(|id| object(id, &mut rng)).collect()
    }

    const DIMS: SpeakerDims = SpeakerDims { vocab: 8, image: 4, cloud: 3 };

    fn tiny(modality: Modality, mixing: Mixing, context_aware: bool, max_len: usize) -> SpeakerConfig {
        SpeakerConfig {
            modality,
            mixing,
            context_aware,
            lstm_hidden: 6,
            projection_dim: 4,
            max_decode_length: max_len,
            seed: 4,
            ..SpeakerConfig::for_modality(modality)
        }
    }

    fn variants() -> Vec<SpeakerConfig> {
        let mut out = vec![tiny(Modality::Image, Mixing::Concat100, true, 5), tiny(Modality::PointCloud, Mixing::Concat100, false, 5)];
        for mixing in [Mixing::Concat100, Mixing::Concat200, Mixing::Sum, Mixing::Serial] {
            out.push(tiny(Modality::Both, mixing, true, 5));
        }
        out
    }

    #[test]
    fn context_step_counts() {
        assert_eq!(Speaker::new(tiny(Modality::Image, Mixing::Concat100, true, 5), DIMS, None).unwrap().context_steps(3), 3);
        assert_eq!(Speaker::new(tiny(Modality::Both, Mixing::Serial, true, 5), DIMS, None).unwrap().context_steps(3), 6);
        assert_eq!(Speaker::new(tiny(Modality::Image, Mixing::Concat100, false, 5), DIMS, None).unwrap().context_steps(3), 1);
    }

    #[test]
    fn feed_order_puts_target_last() {
        let objs = triplet(0);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        let s = Speaker::new(tiny(Modality::Image, Mixing::Concat100, true, 5), DIMS, None).unwrap();
        let order: Vec<&str> = s.feed_order(&refs, 0).unwrap().iter().map(|o| o.object_id.as_str()).collect();
        assert_eq!(order, ["a", "c", "b"]);
    }

    #[test]
    fn stored_log_probs_match_recomputation() {
        let objs = triplet(1);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        for config in variants() {
            let s = Speaker::new(config, DIMS, None).unwrap();
            for sample in s.candidates(&refs, 2, 20, 9).unwrap() {
                if sample.token_ids.is_empty() {
                    continue;
                }
                let lp = s.sequence_log_prob(&refs, 2, &sample.token_ids).unwrap();
                assert!((lp - sample.speaker_log_prob).abs() < 1e-6, "{lp} vs {}", sample.speaker_log_prob);
                assert!(sample.speaker_log_prob <= 0.0);
                assert!(sample.token_ids.len() <= 5);
            }
        }
    }

    #[test]
    fn exhaustive_mass_is_one() {
        let objs = triplet(2);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        let s = Speaker::new(tiny(Modality::Image, Mixing::Concat100, true, 2), DIMS, None).unwrap();
        let emit: Vec<usize> = (0..DIMS.vocab).filter(|&t| t != PAD_ID && t != SOS_ID && t != EOS_ID).collect();
        let mut total = 0.0;
        for &a in &emit {
            total += s.sequence_log_prob(&refs, 1, &[a]).unwrap().exp();
            for &b in &emit {
                total += s.sequence_log_prob(&refs, 1, &[a, b]).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "mass {total}");
    }

    #[test]
    fn forced_token_rolls_out_to_max_length() {
        let objs = triplet(3);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        let mut s = Speaker::new(tiny(Modality::Image, Mixing::Concat100, true, 4), DIMS, None).unwrap();
        let out = s.output_layer();
        let (rows, cols) = s.params().get(out.w).shape();
        *s.params_mut().get_mut(out.w) = Mat::zeros(rows, cols);
        let mut bias = Mat::filled(1, cols, -1e6);
        bias.set(0, 6, 0.0);
        *s.params_mut().get_mut(out.b) = bias;
        for sample in s.candidates(&refs, 0, 5, 1).unwrap() {
            assert_eq!(sample.token_ids, vec![6; 4]);
            assert_eq!(sample.speaker_log_prob, 0.0);
        }
    }

    #[test]
    fn context_unaware_ignores_distractors() {
        let a = triplet(4);
        let b = triplet(5);
        let s = Speaker::new(tiny(Modality::Image, Mixing::Concat100, false, 5), DIMS, None).unwrap();
        let ctx_a = [&a[0], &a[1], &a[2]];
        let ctx_b = [&b[0], &b[1], &a[2]];
        let pa = s.next_token_log_probs(&ctx_a, 2, &[5]).unwrap();
        let pb = s.next_token_log_probs(&ctx_b, 2, &[5]).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn uniform_output_gives_length_times_log_inverse_vocab() {
        let objs = triplet(6);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        let mut s = Speaker::new(tiny(Modality::Image, Mixing::Concat100, true, 3), DIMS, None).unwrap();
        let out = s.output_layer();
        let (rows, cols) = s.params().get(out.w).shape();
        *s.params_mut().get_mut(out.w) = Mat::zeros(rows, cols);
        *s.params_mut().get_mut(out.b) = Mat::zeros(1, cols);
        // PAD and SOS are never emittable; EOS is unavailable at the first position.
        let lp = s.sequence_log_prob(&refs, 0, &[5, 6, 7]).unwrap();
        let expected = (1.0f64 / 5.0).ln() + 2.0 * (1.0f64 / 6.0).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let objs = triplet(7);
        let refs: Vec<&ObjectRepresentation> = objs.iter().collect();
        for config in variants() {
            let mut s = Speaker::new(config.clone(), DIMS, None).unwrap();
            let mut rng = util::rng(8);
            for id in s.params().ids().collect::<Vec<_>>() {
                s.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
            }
            let report = check_gradients(s.params(), 1e-5, |params, grads| {
                let mut probe = s.clone();
                *probe.params_mut() = params.clone();
                probe.loss(&refs, 1, &[5, 7, 3], grads).unwrap()
            });
            assert!(report.max_rel_error < 1e-4, "{config:?}: {report:?}");
        }
    }

    #[test]
    fn score_cases() {
        assert_eq!(pragmatic_score(4, -0.3, -7.0, 0.6, 1.0), -0.3);
        assert_eq!(pragmatic_score(4, -0.3, -7.0, 0.0, 0.0), -7.0);
        let expected = 0.5 * -0.105 + (0.5 / 4f64.powf(0.6)) * -6.0;
        assert!((pragmatic_score(4, -0.105, -6.0, 0.6, 0.5) - expected).abs() < 1e-12);
        assert_eq!(pragmatic_score(3, f64::NEG_INFINITY, -1.0, 0.6, 0.5), f64::NEG_INFINITY);
        assert_eq!(pragmatic_score(3, f64::NEG_INFINITY, -1.0, 0.6, 0.0), -1.0 / 3f64.powf(0.6));
    }

    fn sample(len: usize, lps: f64, lpl: f64) -> SpeakerSample {
        SpeakerSample { token_ids: vec![5; len], speaker_log_prob: lps, listener_log_prob: Some(lpl), pragmatic_score: None }
    }

    #[test]
    fn rerank_degenerate_orderings_and_stability() {
        let samples = vec![sample(2, -1.0, -0.5), sample(3, -0.5, -0.1), sample(1, -0.5, -2.0), sample(2, -3.0, -0.1)];
        let by_listener: Vec<f64> = rerank(&samples, 0.7, 1.0).unwrap().iter().map(|s| s.listener_log_prob.unwrap()).collect();
        assert_eq!(by_listener, [-0.1, -0.1, -0.5, -2.0]);
        let top = rerank(&samples, 0.7, 1.0).unwrap();
        assert_eq!(top[0].speaker_log_prob, -0.5, "ties keep sampling order");
        let by_speaker: Vec<f64> = rerank(&samples, 0.0, 0.0).unwrap().iter().map(|s| s.speaker_log_prob).collect();
        assert_eq!(by_speaker, [-0.5, -0.5, -1.0, -3.0]);
        assert_eq!(rerank(&samples, 0.0, 0.0).unwrap()[0].token_ids.len(), 3);
        let unscored = vec![SpeakerSample { listener_log_prob: None, ..sample(1, -1.0, 0.0) }];
        assert!(rerank(&unscored, 0.5, 0.5).is_err());
    }

    fn dataset(n: usize) -> (ObjectMap, Vec<Example>, Vocabulary) {
        let mut rng = util::rng(30);
        let mut objects = ObjectMap::new();
        let words = ["red", "blue", "green"];
        let mut examples = Vec::new();
        let train: Vec<Vec<&str>> = words.iter().map(|w| vec![*w, "chair"]).collect();
        let vocab = Vocabulary::build(&train, 1);
        for i in 0..n {
            let mut ids = Vec::new();
            for j in 0..3 {
                // The image code's first three entries say which word describes the object.
                let colour = (i + j) % 3;
                let mut code: Vec<f64> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
                code[colour] += 1.0;
                let id = format!("o{i}-{j}");
                objects.insert(id.clone(), ObjectRepresentation::from_codes(&id, Some(code), Some(vec![0.0; 3])));
                ids.push(id);
            }
            let target = i % 3;
            let word = words[(i + target) % 3];
            examples.push(Example {
                trial: i,
                game_id: format!("g{i}"),
                context_id: format!("c{i}"),
                object_ids: [ids[0].clone(), ids[1].clone(), ids[2].clone()],
                target,
                difficulty: Difficulty::Easy,
                utterance: Utterance::from_tokens(&[word, "chair"], &vocab),
            });
        }
        (objects, examples, vocab)
    }

    #[test]
    fn learns_grounded_words_and_clips() {
        let (objects, examples, vocab) = dataset(30);
        let config = SpeakerConfig {
            lstm_hidden: 16,
            projection_dim: 8,
            max_epochs: 60,
            batch_size: 10,
            learning_rate: 0.01,
            grad_clip_norm: 1.0,
            ..SpeakerConfig::for_modality(Modality::Image)
        };
        let (speaker, log) = train_speaker(&config, &examples, &[], &objects, &vocab, None).unwrap();
        assert!(log.epochs.first().unwrap().train_loss > log.epochs.last().unwrap().train_loss);
        let mut hits = 0;
        for ex in &examples {
            let objs = resolve(&objects, &ex.object_ids).unwrap();
            let s = speaker.sample_utterances(&objs, ex.target, 1, Strategy::Greedy, 0).unwrap().remove(0);
            hits += usize::from(s.token_ids == ex.utterance.token_ids);
        }
        assert!(hits >= 27, "greedy reproduced {hits}/30 utterances");
    }

    #[test]
    fn selection_keeps_best_checkpoint() {
        let (objects, examples, vocab) = dataset(12);
        let lconfig = ListenerConfig { lstm_hidden: 4, mlp_sizes: vec![4, 3], projection_dim: 4, word_dim: 4, modality: Modality::Image, ..Default::default() };
        let listener = Listener::new(lconfig, ListenerDims { vocab: vocab.len(), image: 4, cloud: 0 }, None).unwrap();
        let config = SpeakerConfig { lstm_hidden: 4, projection_dim: 4, max_epochs: 6, select_every: 2, batch_size: 6, ..Default::default() };
        let (speaker, log) = train_speaker(&config, &examples, &examples, &objects, &vocab, Some(&listener)).unwrap();
        let recorded: Vec<usize> = log.epochs.iter().filter(|e| e.selection_accuracy.is_some()).map(|e| e.epoch).collect();
        assert_eq!(recorded, [1, 3, 5]);
        let best = log.best_selection_accuracy.unwrap();
        let tasks = unique_tasks(&examples);
        assert_eq!(greedy_listener_accuracy(&speaker, &listener, &tasks, &objects).unwrap(), best);
    }

    #[test]
    fn output_bias_starts_at_log_frequencies() {
        let (_, _, vocab) = dataset(1);
        let s = Speaker::new(SpeakerConfig::default(), SpeakerDims { vocab: vocab.len(), image: 4, cloud: 0 }, Some(vocab.counts())).unwrap();
        let total: u64 = vocab.counts().iter().sum();
        let chair = vocab.id("chair").unwrap();
        let b = s.params().get(s.output_layer().b).get(0, chair);
        assert!((b - (vocab.count(chair) as f64 / total as f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn fair_halves_are_disjoint_and_hashed() {
        let (_, examples, _) = dataset(11);
        let halves = FairHalves::split(&examples, 3).unwrap();
        assert!(halves.is_disjoint());
        assert_eq!(halves.evaluating.len() + halves.internal.len(), 11);
        assert_ne!(halves.evaluating_hash, halves.internal_hash);
        assert_eq!(FairHalves::split(&examples, 3).unwrap(), halves);
    }
}
