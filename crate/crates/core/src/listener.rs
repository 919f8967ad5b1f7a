//! Neural listeners: given a context of objects and an utterance, a
//! distribution over which object the utterance refers to.
//!
//! Three architectures share one recurrent core:
//!
//! - `Baseline` scores each object independently with shared weights.
//! - `EarlyContext` grounds each object with a convolution over its own code
//!   and symmetric pools of the other objects' codes.
//! - `CombinedInterpretation` reads all object codes in sequence and emits
//!   every logit at once.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::encoders::{resolve, stack_codes, Modality, ObjectMap, ObjectRepresentation, WordEmbeddingTable, MISSING_ROW_LIMIT};
use crate::nn::{argmax, dropout_mask, softmax, uniform, Adam, Grads, Graph, Linear, Lstm, LstmState, Mat, NodeId, ParamId, ParamSet, PlateauHalving};
use crate::{par, util, Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_EPS: f64 = 1e-12;

const DROPOUT_STREAM: u64 = 0x11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Baseline,
    EarlyContext,
    CombinedInterpretation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ListenerConfig {
    pub architecture: Architecture,
    pub modality: Modality,
    pub use_attention: bool,
    pub lstm_hidden: usize,
    /// Hidden widths of the scoring MLP followed by the context size.
    pub mlp_sizes: Vec<usize>,
    pub projection_dim: usize,
    pub word_dim: usize,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub l2_weight: f64,
    /// Keep probability on every recurrent input (tokens and grounding codes).
    pub input_dropout_keep: f64,
    /// Keep probability on object codes before the projection layers.
    pub projection_dropout_keep: f64,
    pub max_epochs: usize,
    pub val_every: usize,
    pub lr_halving_window: usize,
    pub batch_size: usize,
    /// Width of the early-context grounding convolution.
    pub conv_width: usize,
    /// L2-normalise codes before and after the early-context pooling.
    pub normalize_pooled: bool,
    pub seed: u64,
}

impl ListenerConfig {
    pub fn for_architecture(architecture: Architecture) -> Self {
        let (learning_rate, l2_weight, input_dropout_keep, max_epochs) = match architecture {
            Architecture::Baseline => (0.0005, 0.3, 0.5, 500),
            Architecture::EarlyContext => (0.001, 0.05, 0.7, 350),
            Architecture::CombinedInterpretation => (0.001, 0.09, 0.45, 500),
        };
        Self {
            architecture,
            modality: Modality::Both,
            use_attention: true,
            lstm_hidden: 100,
            mlp_sizes: vec![100, 50, 3],
            projection_dim: 100,
            word_dim: 100,
            label_smoothing: 0.9,
            learning_rate,
            l2_weight,
            input_dropout_keep,
            projection_dropout_keep: 0.5,
            max_epochs,
            val_every: 5,
            lr_halving_window: 50,
            batch_size: 64,
            conv_width: 8,
            normalize_pooled: true,
            seed: 0,
        }
    }

    pub fn context_size(&self) -> usize {
        *self.mlp_sizes.last().unwrap_or(&3)
    }

    pub fn validate(&self) -> Result<()> {
        let keep_ok = |k: f64| k > 0.0 && k <= 1.0;
        if !(self.label_smoothing > 0.0 && self.label_smoothing <= 1.0) {
            return Err(Error::Invalid(format!("label smoothing {} outside (0, 1]", self.label_smoothing)));
        }
        if !keep_ok(self.input_dropout_keep) || !keep_ok(self.projection_dropout_keep) {
            return Err(Error::Invalid("dropout keep probabilities must lie in (0, 1]".into()));
        }
        if self.mlp_sizes.len() < 2 || self.context_size() < 2 {
            return Err(Error::Invalid(format!("mlp sizes {:?} must end with a context size ≥ 2", self.mlp_sizes)));
        }
        if self.projection_dim != self.word_dim {
            return Err(Error::Invalid(format!(
                "projection dim {} must equal word dim {}: grounding codes share the token input",
                self.projection_dim, self.word_dim
            )));
        }
        if self.lstm_hidden == 0 || self.batch_size == 0 || self.val_every == 0 || self.conv_width == 0 {
            return Err(Error::Invalid("sizes and intervals must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self::for_architecture(Architecture::Baseline)
    }
}

/// Input sizes fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerDims {
    pub vocab: usize,
    pub image: usize,
    pub cloud: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListenerOutput {
    pub scores: Vec<f64>,
    pub per_object_logits: Vec<f64>,
    /// Token weights, one row per grounding pass (per object, or one for a combined pass).
    pub attention: Option<Vec<Vec<f64>>>,
}

impl ListenerOutput {
    pub fn prediction(&self) -> usize {
        argmax(&self.scores)
    }

    /// Attention averaged over grounding passes.
    pub fn mean_attention(&self) -> Option<Vec<f64>> {
        let rows = self.attention.as_ref()?;
        let n = rows.len() as f64;
        let mut out = vec![0.0; rows.first()?.len()];
        for r in rows {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v / n);
        }
        Some(out)
    }
}

/// Object codes for one context, as `k × d` matrices.
struct Codes {
    image: Option<Mat>,
    cloud: Option<Mat>,
    k: usize,
}

impl Codes {
    fn permuted(&self, order: &[usize]) -> Codes {
        let pick = |m: &Mat| Mat::from_rows(&order.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>());
        Codes { image: self.image.as_ref().map(pick), cloud: self.cloud.as_ref().map(pick), k: self.k }
    }
}

/// Dropout masks for one training example, shared by every object in the context.
struct Noise {
    image: Mat,
    cloud: Mat,
    inputs: Vec<Mat>,
}

struct Forward {
    logits: NodeId,
    attention: Option<NodeId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Listener {
    pub config: ListenerConfig,
    pub dims: ListenerDims,
    params: ParamSet,
    embedding: ParamId,
    freeze_embedding: bool,
    image_proj: Option<Linear>,
    cloud_proj: Option<Linear>,
    conv_kernel: Option<ParamId>,
    conv_bias: Option<ParamId>,
    lstm: Lstm,
    attention: Option<ParamId>,
    mlp: Vec<Linear>,
}

impl Listener {
    pub fn new(config: ListenerConfig, dims: ListenerDims, embeddings: Option<&WordEmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let mut rng = util::rng(config.seed);
        let mut params = ParamSet::new();
        let embedding = match embeddings {
            Some(table) => {
                if table.len() != dims.vocab || table.dim() != config.word_dim {
                    return Err(Error::Invalid(format!(
                        "embedding table is {}×{}, listener expects {}×{}",
                        table.len(),
                        table.dim(),
                        dims.vocab,
                        config.word_dim
                    )));
                }
                params.add("embedding", table.matrix.clone())
            }
            None => params.add("embedding", uniform(&mut rng, dims.vocab, config.word_dim, MISSING_ROW_LIMIT)),
        };
        let freeze_embedding = embeddings.is_some_and(|t| !t.trainable);
        let p = config.projection_dim;
        let image_proj =
            config.modality.uses_image().then(|| Linear::new(&mut params, "proj.image", dims.image, p, &mut rng));
        let cloud_proj =
            config.modality.uses_cloud().then(|| Linear::new(&mut params, "proj.cloud", dims.cloud, p, &mut rng));
        let (conv_kernel, conv_bias) = if config.architecture == Architecture::EarlyContext {
            let limit = (6.0 / (3 * config.conv_width + 1) as f64).sqrt();
            let k = params.add("conv.kernel", uniform(&mut rng, config.conv_width, 3, limit));
            let b = params.add("conv.bias", Mat::zeros(1, 1));
            (Some(k), Some(b))
        } else {
            (None, None)
        };
        let lstm = Lstm::new(&mut params, "lstm", config.word_dim, config.lstm_hidden, &mut rng);
        let attention = config.use_attention.then(|| params.add("attention.diag", Mat::filled(1, config.lstm_hidden, 1.0)));

        let late_clouds = match (config.modality, config.architecture) {
            (Modality::Both, Architecture::CombinedInterpretation) => config.context_size(),
            (Modality::Both, _) => 1,
            _ => 0,
        };
        let mut width = config.lstm_hidden + late_clouds * p;
        let mut mlp = Vec::new();
        let hidden = &config.mlp_sizes[..config.mlp_sizes.len() - 1];
        for (i, &w) in hidden.iter().enumerate() {
            mlp.push(Linear::new(&mut params, &format!("mlp.{i}"), width, w, &mut rng));
            width = w;
        }
        let out = if config.architecture == Architecture::CombinedInterpretation { config.context_size() } else { 1 };
        mlp.push(Linear::new(&mut params, "mlp.out", width, out, &mut rng));

        Ok(Self {
            config,
            dims,
            params,
            embedding,
            freeze_embedding,
            image_proj,
            cloud_proj,
            conv_kernel,
            conv_bias,
            lstm,
            attention,
            mlp,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Ids of the tensors penalised by weight decay (the projection weights).
    fn l2_ids(&self) -> Vec<ParamId> {
        self.image_proj.iter().chain(&self.cloud_proj).map(|l| l.w).collect()
    }

    pub fn final_layer(&self) -> Linear {
        *self.mlp.last().expect("mlp has an output layer")
    }

    fn gather(&self, objects: &[&ObjectRepresentation]) -> Result<Codes> {
        let k = objects.len();
        if k < 2 {
            return Err(Error::Invalid(format!("a context needs at least 2 objects, got {k}")));
        }
        if self.config.architecture == Architecture::CombinedInterpretation && k != self.config.context_size() {
            return Err(Error::Invalid(format!(
                "combined-interpretation listener takes exactly {} objects, got {k}",
                self.config.context_size()
            )));
        }
        let check = |m: &Mat, want: usize, what: &str| {
            if m.cols() == want {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{what} codes have {} dims, listener expects {want}", m.cols())))
            }
        };
        let image = if self.config.modality.uses_image() {
            let m = stack_codes(objects, true)?;
            check(&m, self.dims.image, "image")?;
            Some(m)
        } else {
            None
        };
        let cloud = if self.config.modality.uses_cloud() {
            let m = stack_codes(objects, false)?;
            check(&m, self.dims.cloud, "point-cloud")?;
            Some(m)
        } else {
            None
        };
        Ok(Codes { image, cloud, k })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.dims.vocab)));
        }
        Ok(())
    }

    fn sample_noise(&self, rng: &mut util::Rng, steps: usize) -> Noise {
        let c = &self.config;
        Noise {
            image: dropout_mask(rng, self.dims.image, c.projection_dropout_keep),
            cloud: dropout_mask(rng, self.dims.cloud, c.projection_dropout_keep),
            inputs: (0..steps).map(|_| dropout_mask(rng, c.word_dim, c.input_dropout_keep)).collect(),
        }
    }

    fn input_steps(&self, k: usize, tokens: usize) -> usize {
        match self.config.architecture {
            Architecture::CombinedInterpretation => k + tokens,
            _ => 1 + tokens,
        }
    }

    fn forward(&self, g: &mut Graph, codes: &Codes, tokens: &[usize], noise: Option<&Noise>) -> Forward {
        match self.config.architecture {
            Architecture::CombinedInterpretation => self.forward_combined(g, codes, tokens, noise),
            _ => self.forward_per_object(g, codes, tokens, noise),
        }
    }

    /// Projects `k × d` codes with a dropout mask shared by all rows.
    fn project(&self, g: &mut Graph, layer: Linear, codes: &Mat, mask: Option<&Mat>) -> NodeId {
        let x = g.constant(codes.clone());
        let x = match mask {
            Some(m) => g.mul_const(x, broadcast_rows(m, codes.rows())),
            None => x,
        };
        let h = layer.forward(g, x);
        g.relu(h)
    }

    fn grounding_layer(&self) -> (Linear, bool) {
        if self.config.modality.uses_image() {
            (self.image_proj.expect("image projection"), true)
        } else {
            (self.cloud_proj.expect("cloud projection"), false)
        }
    }

    fn ground_mask<'n>(&self, noise: Option<&'n Noise>, image: bool) -> Option<&'n Mat> {
        noise.map(|n| if image { &n.image } else { &n.cloud })
    }

    fn grounding_codes<'c>(&self, codes: &'c Codes, image: bool) -> &'c Mat {
        if image {
            codes.image.as_ref().expect("image codes")
        } else {
            codes.cloud.as_ref().expect("cloud codes")
        }
    }

    fn forward_per_object(&self, g: &mut Graph, codes: &Codes, tokens: &[usize], noise: Option<&Noise>) -> Forward {
        let k = codes.k;
        let (layer, image) = self.grounding_layer();
        let source = self.grounding_codes(codes, image);
        let mask = self.ground_mask(noise, image);
        let ground = if self.config.architecture == Architecture::EarlyContext {
            let rows: Vec<NodeId> = (0..k)
                .map(|i| self.project(g, layer, &Mat::row_vector(source.row(i).to_vec()), mask))
                .collect();
            let grounded: Vec<NodeId> = (0..k).map(|i| self.early_grounding(g, &rows, i)).collect();
            g.vstack(&grounded)
        } else {
            self.project(g, layer, source, mask)
        };

        let h = self.config.lstm_hidden;
        let mut state = LstmState { h: g.constant(Mat::zeros(k, h)), c: g.constant(Mat::zeros(k, h)) };
        let x0 = input_dropout(g, ground, noise.map(|n| &n.inputs[0]));
        state = self.lstm.step(g, x0, state);
        let mut states = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let e = g.row(self.embedding, tok);
            let e = if k > 1 { g.vstack(&vec![e; k]) } else { e };
            let x = input_dropout(g, e, noise.map(|n| &n.inputs[1 + t]));
            state = self.lstm.step(g, x, state);
            states.push(state.h);
        }
        let (pooled, attention) = self.pool(g, &states, state.h);
        let features = match (&codes.cloud, self.config.modality) {
            (Some(cloud), Modality::Both) => {
                let pc = self.project(g, self.cloud_proj.expect("cloud projection"), cloud, noise.map(|n| &n.cloud));
                g.concat_cols(&[pooled, pc])
            }
            _ => pooled,
        };
        let column = self.mlp_forward(g, features);
        let logits = g.transpose(column);
        Forward { logits, attention }
    }

    fn forward_combined(&self, g: &mut Graph, codes: &Codes, tokens: &[usize], noise: Option<&Noise>) -> Forward {
        let k = codes.k;
        let (layer, image) = self.grounding_layer();
        let source = self.grounding_codes(codes, image);
        let mask = self.ground_mask(noise, image);
        let h = self.config.lstm_hidden;
        let mut state = LstmState { h: g.constant(Mat::zeros(1, h)), c: g.constant(Mat::zeros(1, h)) };
        for i in 0..k {
            let x = self.project(g, layer, &Mat::row_vector(source.row(i).to_vec()), mask);
            let x = input_dropout(g, x, noise.map(|n| &n.inputs[i]));
            state = self.lstm.step(g, x, state);
        }
        let mut states = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let e = g.row(self.embedding, tok);
            let x = input_dropout(g, e, noise.map(|n| &n.inputs[k + t]));
            state = self.lstm.step(g, x, state);
            states.push(state.h);
        }
        let (pooled, attention) = self.pool(g, &states, state.h);
        let features = match (&codes.cloud, self.config.modality) {
            (Some(cloud), Modality::Both) => {
                let cloud_proj = self.cloud_proj.expect("cloud projection");
                let mut parts = vec![pooled];
                for i in 0..k {
                    let row = Mat::row_vector(cloud.row(i).to_vec());
                    parts.push(self.project(g, cloud_proj, &row, noise.map(|n| &n.cloud)));
                }
                g.concat_cols(&parts)
            }
            _ => pooled,
        };
        let logits = self.mlp_forward(g, features);
        Forward { logits, attention }
    }

    /// Convolves `[max(others) ‖ mean(others) ‖ own]` into a grounding vector for object `i`.
    fn early_grounding(&self, g: &mut Graph, projected: &[NodeId], i: usize) -> NodeId {
        let norm = |g: &mut Graph, x: NodeId| if self.config.normalize_pooled { g.l2_normalize_rows(x) } else { x };
        let all: Vec<NodeId> = projected.iter().map(|&p| norm(g, p)).collect();
        let others: Vec<NodeId> = (0..all.len()).filter(|&j| j != i).map(|j| all[j]).collect();
        let mut max = others[0];
        let mut sum = others[0];
        for &o in &others[1..] {
            max = g.max2(max, o);
            sum = g.add(sum, o);
        }
        let mean = g.scale(sum, 1.0 / others.len() as f64);
        let max = norm(g, max);
        let mean = norm(g, mean);
        let stacked = g.vstack(&[max, mean, all[i]]);
        let signal = g.transpose(stacked);
        let (kernel, bias) = (g.param(self.conv_kernel.expect("conv kernel")), g.param(self.conv_bias.expect("conv bias")));
        let conv = g.conv1d_same(signal, kernel, bias);
        let conv = g.relu(conv);
        g.transpose(conv)
    }

    fn pool(&self, g: &mut Graph, states: &[NodeId], last: NodeId) -> (NodeId, Option<NodeId>) {
        match self.attention {
            Some(w) => {
                let w = g.param(w);
                let (pooled, weights) = attend(g, states, last, w);
                (pooled, Some(weights))
            }
            None => (last, None),
        }
    }

    fn mlp_forward(&self, g: &mut Graph, mut x: NodeId) -> NodeId {
        let last = self.mlp.len() - 1;
        for (i, layer) in self.mlp.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }

    /// Scores every object of a context against an utterance.
    pub fn score_context(&self, objects: &[&ObjectRepresentation], tokens: &[usize]) -> Result<ListenerOutput> {
        self.check_tokens(tokens)?;
        let codes = self.gather(objects)?;
        let mut g = Graph::new(&self.params);
        let fwd = self.forward(&mut g, &codes, tokens, None);
        let logits = g.value(fwd.logits).data().to_vec();
        let attention = fwd.attention.map(|a| {
            let m = g.value(a);
            (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
        });
        Ok(ListenerOutput { scores: softmax(&logits), per_object_logits: logits, attention })
    }

    /// Index of the most probable object (lowest index on ties) with the full output.
    pub fn predict(&self, objects: &[&ObjectRepresentation], tokens: &[usize]) -> Result<(usize, ListenerOutput)> {
        let out = self.score_context(objects, tokens)?;
        Ok((out.prediction(), out))
    }

    pub fn score_example(&self, example: &Example, objects: &ObjectMap) -> Result<ListenerOutput> {
        let objs = resolve(objects, &example.object_ids)?;
        self.score_context(&objs, &example.utterance.token_ids)
    }

    pub fn score_examples(&self, examples: &[Example], objects: &ObjectMap) -> Result<Vec<ListenerOutput>> {
        par::map(examples, |ex| self.score_example(ex, objects)).into_iter().collect()
    }

    /// Fraction of examples whose target receives the highest score.
    pub fn accuracy(&self, examples: &[Example], objects: &ObjectMap) -> Result<f64> {
        if examples.is_empty() {
            return Ok(f64::NAN);
        }
        let outs = self.score_examples(examples, objects)?;
        let hits = outs.iter().zip(examples).filter(|(o, ex)| o.prediction() == ex.target).count();
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Smoothed cross-entropy of one example, with gradients accumulated into `grads`.
    fn example_loss(
        &self,
        codes: &Codes,
        tokens: &[usize],
        target: usize,
        rng: Option<&mut util::Rng>,
        grads: Option<&mut Grads>,
    ) -> f64 {
        let mut codes_view = None;
        let mut target = target;
        let noise = match rng {
            Some(rng) => {
                if self.config.architecture == Architecture::CombinedInterpretation {
                    let mut order: Vec<usize> = (0..codes.k).collect();
                    order.shuffle(rng);
                    target = order.iter().position(|&i| i == target).expect("target in permutation");
                    codes_view = Some(codes.permuted(&order));
                }
                Some(self.sample_noise(rng, self.input_steps(codes.k, tokens.len())))
            }
            None => None,
        };
        let codes = codes_view.as_ref().unwrap_or(codes);
        let mut g = Graph::new(&self.params);
        let fwd = self.forward(&mut g, codes, tokens, noise.as_ref());
        let loss = smoothed_cross_entropy(&mut g, fwd.logits, target, self.config.label_smoothing);
        if let Some(grads) = grads {
            g.backward(loss, grads);
        }
        g.value(loss).scalar_value()
    }

    /// Loss of one context without dropout; optionally accumulates its gradient.
    pub fn loss(
        &self,
        objects: &[&ObjectRepresentation],
        tokens: &[usize],
        target: usize,
        grads: Option<&mut Grads>,
    ) -> Result<f64> {
        self.check_tokens(tokens)?;
        let codes = self.gather(objects)?;
        if target >= codes.k {
            return Err(Error::Invalid(format!("target {target} outside context of {}", codes.k)));
        }
        Ok(self.example_loss(&codes, tokens, target, None, grads))
    }
}

fn broadcast_rows(row: &Mat, rows: usize) -> Mat {
    if rows == 1 {
        return row.clone();
    }
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(row.data());
    }
    Mat::from_vec(rows, row.cols(), data)
}

fn input_dropout(g: &mut Graph, x: NodeId, mask: Option<&Mat>) -> NodeId {
    match mask {
        Some(m) => {
            let rows = g.value(x).rows();
            g.mul_const(x, broadcast_rows(m, rows))
        }
        None => x,
    }
}

/// Bilinear attention with a diagonal weight, batched over rows.
///
/// `states[t]` and `last` are `r × h`; `w` is `1 × h`. Returns the pooled
/// `r × h` state and the `r × |U|` weights.
fn attend(g: &mut Graph, states: &[NodeId], last: NodeId, w: NodeId) -> (NodeId, NodeId) {
    let (rows, h) = g.value(last).shape();
    let w = if rows == 1 { w } else { g.vstack(&vec![w; rows]) };
    let query = g.mul(last, w);
    let ones_col = g.constant(Mat::filled(h, 1, 1.0));
    let ones_row = g.constant(Mat::filled(1, h, 1.0));
    let scores: Vec<NodeId> = states
        .iter()
        .map(|&r| {
            let prod = g.mul(r, query);
            g.matmul(prod, ones_col)
        })
        .collect();
    let scores = g.concat_cols(&scores);
    let weights = g.softmax_rows(scores);
    let mut pooled = None;
    for (t, &r) in states.iter().enumerate() {
        let a = g.slice_cols(weights, t, 1);
        let spread = g.matmul(a, ones_row);
        let term = g.mul(r, spread);
        pooled = Some(match pooled {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    (pooled.expect("at least one state"), weights)
}

/// Attention pooling of hidden states `r_1..r_n` (rows of `states`) against a
/// final state `h` with diagonal weight `w_diag`.
///
/// Returns the pooled vector `Σ_t â_t r_t` and the weights `â = softmax(r_tᵀ W h)`.
pub fn attention_pool(states: &Mat, final_state: &[f64], w_diag: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if states.rows() == 0 {
        return Err(Error::EmptyUtterance);
    }
    if final_state.len() != states.cols() || w_diag.len() != states.cols() {
        return Err(Error::Invalid("attention dimensions disagree".into()));
    }
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let rows: Vec<NodeId> = (0..states.rows()).map(|t| g.constant(Mat::row_vector(states.row(t).to_vec()))).collect();
    let h = g.constant(Mat::row_vector(final_state.to_vec()));
    let w = g.constant(Mat::row_vector(w_diag.to_vec()));
    let (pooled, weights) = attend(&mut g, &rows, h, w);
    Ok((g.value(pooled).data().to_vec(), g.value(weights).data().to_vec()))
}

/// Target distribution `s·onehot + (1 − s)/k`.
pub fn smoothed_target(k: usize, target: usize, smoothing: f64) -> Vec<f64> {
    let floor = (1.0 - smoothing) / k as f64;
    (0..k).map(|i| if i == target { smoothing + floor } else { floor }).collect()
}

/// Cross-entropy `−Σ q_i ln p_i` of scores against the smoothed target.
pub fn listener_loss(scores: &[f64], target: usize, smoothing: f64) -> f64 {
    let q = smoothed_target(scores.len(), target, smoothing);
    -q.iter().zip(scores).map(|(q, p)| q * p.max(LOG_EPS).ln()).sum::<f64>()
}

fn smoothed_cross_entropy(g: &mut Graph, logits: NodeId, target: usize, smoothing: f64) -> NodeId {
    let k = g.value(logits).cols();
    let log_p = g.log_softmax_rows(logits);
    let neg_q = Mat::row_vector(smoothed_target(k, target, smoothing).iter().map(|q| -q).collect());
    let weighted = g.mul_const(log_p, neg_q);
    g.sum(weighted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub diverged_at: Option<usize>,
}

/// Infers code widths from the first training example.
pub fn infer_dims(config: &ListenerConfig, vocab: usize, examples: &[Example], objects: &ObjectMap) -> Result<ListenerDims> {
    let first = examples.first().ok_or(Error::EmptyPartition("train"))?;
    let objs = resolve(objects, &first.object_ids)?;
    let image = if config.modality.uses_image() { objs[0].image_code()?.len() } else { 0 };
    let cloud = if config.modality.uses_cloud() { objs[0].pc_code()?.len() } else { 0 };
    Ok(ListenerDims { vocab, image, cloud })
}

/// Trains a listener and returns the checkpoint with the best validation accuracy.
///
/// When `val` is empty the final weights are returned.
pub fn train_listener(
    config: &ListenerConfig,
    train: &[Example],
    val: &[Example],
    objects: &ObjectMap,
    vocab_size: usize,
    embeddings: Option<&WordEmbeddingTable>,
) -> Result<(Listener, TrainingLog)> {
    let dims = infer_dims(config, vocab_size, train, objects)?;
    let mut model = Listener::new(config.clone(), dims, embeddings)?;
    let prepared: Vec<(Codes, &[usize], usize)> = train
        .iter()
        .map(|ex| {
            let objs = resolve(objects, &ex.object_ids)?;
            model.check_tokens(&ex.utterance.token_ids)?;
            Ok((model.gather(&objs)?, ex.utterance.token_ids.as_slice(), ex.target))
        })
        .collect::<Result<_>>()?;
    for ex in val {
        resolve(objects, &ex.object_ids)?;
    }

    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut schedule = PlateauHalving::new(config.learning_rate, config.lr_halving_window);
    let mut order_rng = util::rng(config.seed.wrapping_add(7));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let l2_ids = model.l2_ids();
    let frozen = model.freeze_embedding.then_some(model.embedding);
    let mut log = TrainingLog::default();
    let mut best: Option<Listener> = None;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let parts = par::fold_chunks(
                batch,
                8,
                || (Grads::zeros_like(&model.params), 0.0),
                |(grads, total), _, &i| {
                    let (codes, tokens, target) = &prepared[i];
                    let mut rng = util::derived_rng(config.seed, DROPOUT_STREAM + epoch as u64, i as u64);
                    *total += model.example_loss(codes, tokens, *target, Some(&mut rng), Some(grads));
                },
            );
            let mut grads = Grads::zeros_like(&model.params);
            for (p, l) in &parts {
                grads.accumulate(p);
                epoch_loss += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.add_l2(&model.params, &l2_ids, config.l2_weight);
            if !grads.all_finite() {
                diverged = true;
                break;
            }
            opt.step_filtered(&mut model.params, &grads, |id| Some(id) != frozen);
        }
        let train_loss = epoch_loss / prepared.len() as f64;
        if diverged || !train_loss.is_finite() || !model.params.all_finite() {
            log::warn!("listener training diverged at epoch {epoch}");
            log.diverged_at = Some(epoch);
            return match best {
                Some(b) => Ok((b, log)),
                None => Err(Error::Diverged { epoch }),
            };
        }
        let mut record = EpochRecord { epoch, train_loss, learning_rate: opt.lr, val_accuracy: None };
        if !val.is_empty() && (epoch + 1) % config.val_every == 0 {
            let acc = model.accuracy(val, objects)?;
            record.val_accuracy = Some(acc);
            if schedule.observe(acc) {
                log.best_epoch = Some(epoch);
                log.best_val_accuracy = Some(acc);
                best = Some(model.clone());
            }
        }
        log::debug!("listener epoch {epoch}: loss {train_loss:.4} lr {}", opt.lr);
        log.epochs.push(record);
        opt.lr = schedule.end_epoch();
    }
    let model = match best {
        Some(b) => b,
        None => {
            log.best_epoch = config.max_epochs.checked_sub(1);
            model
        }
    };
    Ok((model, log))
}
