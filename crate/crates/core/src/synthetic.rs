//! A procedurally generated reference-game world.
//!
//! Every object is a chair-like thing with four part slots, each taking one of
//! five adjective values. Objects come with a tiny grey-scale render, a point
//! cloud and per-part annotations, so the full pipeline (encoding, context
//! building, part lesions) runs on them. Utterances are templated minimal
//! descriptions: the speaker names the most salient slot that tells the target
//! apart from both distractors, wrapped in filler words.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{build_contexts, ContextParams, ContextSpec, EmbeddingIndex, DEFAULT_DUPLICATE_PERCENTILE};
use crate::corpus::RawTrial;
use crate::encoders::{
    CloudFeatures, Image, ImageFeatures, ImageSource, ObjectEncoder, ObjectMap, ObjectRepresentation, PartAnnotation,
    PointCloud,
};
use crate::nn::{uniform, Mat};
use crate::{util, Error, Result};

pub const SLOTS: [&str; 4] = ["back", "legs", "seat", "arms"];
pub const VALUES: usize = 5;
pub const ADJECTIVES: [[&str; VALUES]; 4] = [
    ["tall", "short", "round", "slatted", "solid"],
    ["thin", "thick", "straight", "curved", "metal"],
    ["wide", "narrow", "square", "padded", "flat"],
    ["high", "low", "wooden", "rolled", "open"],
];
/// Relative odds of naming each slot when several would do.
pub const SALIENCE: [f64; 4] = [8.0, 4.0, 2.0, 1.0];

const LEVELS: [f64; VALUES] = [0.2, 0.4, 0.6, 0.8, 1.0];
const KERNEL_WIDTH: f64 = 0.06;
const IMAGE_HEIGHT: usize = 4;
const PART_COLUMNS: usize = 6;
const NUISANCE_COLUMNS: usize = 2;
const IMAGE_WIDTH: usize = PART_COLUMNS + NUISANCE_COLUMNS;
const POINTS_PER_SLOT: usize = 16;

const TEMPLATES: [&str; 6] = [
    "{}",
    "the one with {}",
    "chair with {}",
    "it has {}",
    "the chair that has {}",
    "look for the one with {}",
];
const REPLIES: [&str; 3] = ["ok", "got it", "yes"];

pub type Attributes = [usize; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub objects: usize,
    /// Uniform noise amplitude added to every rendered part pixel.
    pub pixel_noise: f64,
    pub cloud_code_dim: usize,
    /// Probability that a trial names a random true slot instead of a distinguishing one.
    pub utterance_noise: f64,
    pub comparative_rate: f64,
    pub dialogue_rate: f64,
    /// Utterances per (context, target) pair.
    pub repeats: usize,
    pub trials_per_game: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            objects: 300,
            pixel_noise: 0.03,
            cloud_code_dim: 12,
            utterance_noise: 0.05,
            comparative_rate: 0.2,
            dialogue_rate: 0.1,
            repeats: 1,
            trials_per_game: 69,
            seed: 0,
        }
    }
}

fn soft_one_hot(mean: Option<f64>, out: &mut Vec<f64>) {
    for level in LEVELS {
        out.push(mean.map_or(0.0, |m| (-((m - level) / KERNEL_WIDTH).powi(2)).exp()));
    }
}

/// Reads slot values off a render: a soft one-hot per slot, then the raw nuisance pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderFeatures;

impl ImageFeatures for RenderFeatures {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width != IMAGE_WIDTH || image.height != IMAGE_HEIGHT || image.channels != 1 {
            return Err(Error::Invalid(format!("expected a {IMAGE_WIDTH}×{IMAGE_HEIGHT} grey render")));
        }
        let mut out = Vec::with_capacity(4 * VALUES + IMAGE_HEIGHT * NUISANCE_COLUMNS);
        for row in 0..IMAGE_HEIGHT {
            let px: Vec<f64> = (0..PART_COLUMNS).map(|c| image.data[row * IMAGE_WIDTH + c]).collect();
            let visible: Vec<f64> = px.into_iter().filter(|&v| v != image.background).collect();
            let mean = (!visible.is_empty()).then(|| visible.iter().sum::<f64>() / visible.len() as f64);
            soft_one_hot(mean, &mut out);
        }
        for row in 0..IMAGE_HEIGHT {
            out.extend((PART_COLUMNS..IMAGE_WIDTH).map(|c| image.data[row * IMAGE_WIDTH + c]));
        }
        Ok(out)
    }
}

/// Soft slot one-hots recovered from point heights, mixed by a fixed random matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMixFeatures {
    pub mix: Mat,
}

impl CloudFeatures for CloudMixFeatures {
    fn features(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut onehot = Vec::with_capacity(4 * VALUES);
        for slot in 0..4 {
            let ys: Vec<f64> = (0..cloud.len())
                .filter(|&i| cloud.points.get(i, 0).floor() as usize == slot)
                .map(|i| cloud.points.get(i, 1))
                .collect();
            let mean = (!ys.is_empty()).then(|| ys.iter().sum::<f64>() / ys.len() as f64);
            soft_one_hot(mean, &mut onehot);
        }
        Ok(Mat::row_vector(onehot).matmul(&self.mix).into_vec())
    }
}

fn render(attrs: &Attributes, noise: f64, rng: &mut util::Rng) -> (Image, BTreeMap<String, Vec<usize>>) {
    let mut data = vec![0.0; IMAGE_WIDTH * IMAGE_HEIGHT];
    let mut parts = BTreeMap::new();
    for (slot, &v) in attrs.iter().enumerate() {
        let pixels: Vec<usize> = (0..PART_COLUMNS).map(|c| slot * IMAGE_WIDTH + c).collect();
        for &p in &pixels {
            data[p] = LEVELS[v] + rng.random_range(-noise..=noise);
        }
        for c in PART_COLUMNS..IMAGE_WIDTH {
            data[slot * IMAGE_WIDTH + c] = rng.random_range(0.05..1.0);
        }
        parts.insert(SLOTS[slot].to_string(), pixels);
    }
    let image = Image { width: IMAGE_WIDTH, height: IMAGE_HEIGHT, channels: 1, data, background: 0.0, source: ImageSource::Render };
    (image, parts)
}

fn sample_cloud(attrs: &Attributes, rng: &mut util::Rng) -> Result<(PointCloud, BTreeMap<String, Vec<usize>>)> {
    let mut rows = Vec::with_capacity(4 * POINTS_PER_SLOT);
    let mut parts = BTreeMap::new();
    for (slot, &v) in attrs.iter().enumerate() {
        let start = rows.len();
        for _ in 0..POINTS_PER_SLOT {
            rows.push(vec![
                slot as f64 + rng.random_range(0.1..0.9),
                LEVELS[v] + rng.random_range(-0.02..0.02),
                rng.random_range(-1.0..1.0),
            ]);
        }
        parts.insert(SLOTS[slot].to_string(), (start..rows.len()).collect());
    }
    Ok((PointCloud::new(Mat::from_rows(&rows))?, parts))
}

/// Slots on which the target differs from every distractor.
pub fn distinguishing_slots(target: &Attributes, distractors: &[&Attributes]) -> Vec<usize> {
    (0..4).filter(|&s| distractors.iter().all(|d| d[s] != target[s])).collect()
}

/// Comparative surface form for adjectives that take one.
pub fn comparative(adjective: &str) -> Option<&'static str> {
    Some(match adjective {
        "tall" => "taller",
        "short" => "shorter",
        "thin" => "thinner",
        "thick" => "thicker",
        "wide" => "wider",
        "narrow" => "narrower",
        "high" => "higher",
        "low" => "lower",
        "flat" => "flatter",
        "round" => "rounder",
        _ => return None,
    })
}

fn weighted_slot(candidates: &[usize], rng: &mut util::Rng) -> usize {
    *candidates.choose_weighted(rng, |&s| SALIENCE[s]).expect("non-empty candidates")
}

/// A generated world: objects with assets and codes, contexts and trials.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub attributes: BTreeMap<String, Attributes>,
    pub objects: ObjectMap,
    pub contexts: Vec<ContextSpec>,
    pub trials: Vec<RawTrial>,
    pub cloud_features: CloudMixFeatures,
}

impl SyntheticWorld {
    pub fn generate(config: WorldConfig) -> Result<Self> {
        let combos = VALUES.pow(4);
        if config.objects < 4 || config.objects > combos {
            return Err(Error::Invalid(format!("object count must lie in 4..={combos}, got {}", config.objects)));
        }
        let mut rng = util::rng(config.seed);
        let cloud_features = CloudMixFeatures { mix: uniform(&mut rng, 4 * VALUES, config.cloud_code_dim, 1.0) };
        let mut codes: Vec<usize> = (0..combos).collect();
        codes.shuffle(&mut rng);
        codes.truncate(config.objects);

        let encoder = ObjectEncoder { image: Some(Box::new(RenderFeatures)), cloud: Some(Box::new(cloud_features.clone())) };
        let mut attributes = BTreeMap::new();
        let mut objects = ObjectMap::new();
        for (i, &code) in codes.iter().enumerate() {
            let attrs = [code % VALUES, code / VALUES % VALUES, code / VALUES.pow(2) % VALUES, code / VALUES.pow(3)];
            let id = format!("obj{i:04}");
            let (image, pixel_parts) = render(&attrs, config.pixel_noise, &mut rng);
            let (cloud, point_parts) = sample_cloud(&attrs, &mut rng)?;
            let mut obj = ObjectRepresentation::from_codes(id.clone(), None, None);
            obj.parts = SLOTS
                .iter()
                .map(|s| (s.to_string(), PartAnnotation { pixels: pixel_parts[*s].clone(), points: point_parts[*s].clone() }))
                .collect();
            obj.image = Some(image);
            obj.cloud = Some(cloud);
            objects.insert(id.clone(), encoder.encode(&obj)?);
            attributes.insert(id, attrs);
        }

        // Contexts are built over the slot features alone, so hard distractors share most attributes.
        let ids: Vec<String> = objects.keys().cloned().collect();
        let rows: Vec<Vec<f64>> = ids.iter().map(|id| objects[id].image_code().map(|c| c[..4 * VALUES].to_vec())).collect::<Result<_>>()?;
        let index = EmbeddingIndex::new(ids, Mat::from_rows(&rows))?;
        let params = ContextParams::from_index(&index, DEFAULT_DUPLICATE_PERCENTILE);
        let seeds: Vec<usize> = (0..index.len()).collect();
        let (contexts, _) = build_contexts(&index, &seeds, &params);

        let mut world = Self { config, attributes, objects, contexts, trials: Vec::new(), cloud_features };
        world.trials = world.make_trials(&mut rng);
        Ok(world)
    }

    fn make_trials(&self, rng: &mut util::Rng) -> Vec<RawTrial> {
        let mut pending = Vec::new();
        for ctx in &self.contexts {
            let ids = ctx.object_ids();
            for target in 0..3 {
                for _ in 0..self.config.repeats {
                    pending.push((ids.clone(), target, ctx.context_id(), ctx.difficulty));
                }
            }
        }
        pending.shuffle(rng);
        let per_game = self.config.trials_per_game.max(1);
        let games = pending.len().div_ceil(per_game);
        // Each game has one speaker with a favourite template.
        let styles: Vec<usize> = (0..games).map(|_| rng.random_range(0..TEMPLATES.len())).collect();
        let mut trials = Vec::with_capacity(pending.len());
        for (n, (ids, target, context_id, difficulty)) in pending.into_iter().enumerate() {
            let game = n / per_game;
            let Some(text) = self.describe(&ids, target, styles[game], rng) else { continue };
            let mut order = [0usize, 1, 2];
            order.shuffle(rng);
            let object_ids = order.map(|i| ids[i].clone());
            let target_index = order.iter().position(|&i| i == target).expect("permutation");
            let listener_text = (rng.random::<f64>() < self.config.dialogue_rate).then(|| REPLIES.choose(rng).unwrap().to_string());
            trials.push(RawTrial {
                game_id: format!("game{game:04}"),
                context_id,
                object_ids,
                target_index,
                speaker_text: text,
                listener_text,
                correct: true,
                difficulty,
            });
        }
        trials
    }

    /// A templated description of `ids[target]`, or `None` when the target
    /// cannot be told apart from a distractor.
    pub fn describe(&self, ids: &[String; 3], target: usize, style: usize, rng: &mut util::Rng) -> Option<String> {
        let t = &self.attributes[&ids[target]];
        let others: Vec<&Attributes> = (0..3).filter(|&i| i != target).map(|i| &self.attributes[&ids[i]]).collect();
        let slots = if rng.random::<f64>() < self.config.utterance_noise {
            vec![weighted_slot(&[0, 1, 2, 3], rng)]
        } else {
            let both = distinguishing_slots(t, &others);
            if !both.is_empty() {
                vec![weighted_slot(&both, rng)]
            } else {
                let a = distinguishing_slots(t, &others[..1]);
                let b = distinguishing_slots(t, &others[1..]);
                if a.is_empty() || b.is_empty() {
                    return None;
                }
                let first = weighted_slot(&a, rng);
                let rest: Vec<usize> = b.into_iter().filter(|&s| s != first).collect();
                if rest.is_empty() {
                    return None;
                }
                vec![first, weighted_slot(&rest, rng)]
            }
        };
        let phrases: Vec<String> = slots
            .iter()
            .map(|&s| {
                let adj = ADJECTIVES[s][t[s]];
                let word = match comparative(adj) {
                    Some(c) if rng.random::<f64>() < self.config.comparative_rate => c,
                    _ => adj,
                };
                format!("{word} {}", SLOTS[s])
            })
            .collect();
        // Most trials use the speaker's habitual template.
        let template = if rng.random::<f64>() < 0.7 { TEMPLATES[style] } else { TEMPLATES.choose(rng).unwrap() };
        Some(template.replace("{}", &phrases.join(" and ")))
    }

    pub fn object_encoder(&self) -> ObjectEncoder {
        ObjectEncoder { image: Some(Box::new(RenderFeatures)), cloud: Some(Box::new(self.cloud_features.clone())) }
    }

    /// Encoder that re-derives only the image code (for image-only lesion studies).
    pub fn image_encoder(&self) -> ObjectEncoder {
        ObjectEncoder { image: Some(Box::new(RenderFeatures)), cloud: None }
    }

    pub fn slot_of(part: &str) -> Option<usize> {
        SLOTS.iter().position(|s| *s == part)
    }

    /// Every adjective, slot name and template word the generator can emit.
    pub fn lexicon() -> BTreeSet<String> {
        let mut words: BTreeSet<String> = SLOTS.iter().map(|s| s.to_string()).collect();
        for row in ADJECTIVES {
            words.extend(row.iter().map(|a| a.to_string()));
        }
        for t in TEMPLATES.iter().chain(&REPLIES) {
            words.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
        }
        words.insert("and".into());
        words
    }

    /// Writes `trials.jsonl`, `contexts.jsonl`, `objects.jsonl`, `world.json`
    /// and one SVG render per object under `renders/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::corpus::write_trials(&dir.join("trials.jsonl"), &self.trials)?;
        crate::context::write_contexts(&dir.join("contexts.jsonl"), &self.contexts)?;
        util::write_jsonl(&dir.join("objects.jsonl"), self.objects.values())?;
        let meta = WorldMeta { config: self.config.clone(), attributes: self.attributes.clone(), cloud_features: self.cloud_features.clone() };
        util::write_text(&dir.join("world.json"), &serde_json::to_string_pretty(&meta)?)?;
        let renders = dir.join("renders");
        std::fs::create_dir_all(&renders).map_err(|e| Error::io(&renders, e))?;
        for obj in self.objects.values() {
            if let Some(img) = &obj.image {
                util::write_text(&renders.join(format!("{}.svg", obj.object_id)), &img.to_svg(24))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: WorldMeta = serde_json::from_str(&util::read_text(&dir.join("world.json"))?)?;
        let objects: Vec<ObjectRepresentation> = util::read_jsonl(&dir.join("objects.jsonl"))?;
        let trials = crate::corpus::read_trials(&dir.join("trials.jsonl"))?;
        let contexts = crate::context::read_contexts(&dir.join("contexts.jsonl"))?
            .into_iter()
            .map(|r| ContextSpec {
                seed_object: r.object_ids[0].clone(),
                distractors: [r.object_ids[1].clone(), r.object_ids[2].clone()],
                difficulty: r.difficulty,
            })
            .collect();
        Ok(Self {
            config: meta.config,
            attributes: meta.attributes,
            objects: objects.into_iter().map(|o| (o.object_id.clone(), o)).collect(),
            contexts,
            trials,
            cloud_features: meta.cloud_features,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WorldMeta {
    config: WorldConfig,
    attributes: BTreeMap<String, Attributes>,
    cloud_features: CloudMixFeatures,
}

/// Reads objects written by [`SyntheticWorld::save`] or any other `objects.jsonl`.
pub fn read_objects(path: &Path) -> Result<ObjectMap> {
    let objects: Vec<ObjectRepresentation> = util::read_jsonl(path)?;
    let mut map = ObjectMap::new();
    for o in objects {
        o.validate()?;
        map.insert(o.object_id.clone(), o);
    }
    Ok(map)
}
