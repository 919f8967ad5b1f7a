use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Image, ImageFeatures, ImageSource};
use crate::nn::{Adam, Grads, Graph, Linear, Mat, NodeId, ParamSet};
use crate::{par, util, Error, Result};

/// Mean RGB of the backbone's pretraining images, subtracted from photos.
pub const IMAGENET_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

/// Where the feature backbone's initial weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BackboneSource {
    /// JSON parameter file holding `backbone.w` (`pixels × hidden`) and `backbone.b`.
    Pretrained(PathBuf),
    /// Random initialisation; used for synthetic worlds.
    RandomInit(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFitConfig {
    pub hidden: usize,
    pub classes: usize,
    pub head_epochs: usize,
    pub full_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ImageFitConfig {
    fn default() -> Self {
        Self {
            hidden: super::IMAGE_CODE_DIM,
            classes: 8,
            head_epochs: 15,
            full_epochs: 15,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ImageFitLog {
    /// Mean training cross-entropy per epoch across both phases.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Classifier whose penultimate activations serve as the image code.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageClassifier {
    params: ParamSet,
    backbone: Linear,
    head: Linear,
}

impl ImageClassifier {
    pub fn new(source: &BackboneSource, input: usize, config: &ImageFitConfig) -> Result<Self> {
        let mut rng = util::rng(config.seed);
        let mut params = ParamSet::new();
        let backbone = Linear::new(&mut params, "backbone", input, config.hidden, &mut rng);
        let head = Linear::new(&mut params, "head", config.hidden, config.classes, &mut rng);
        if let BackboneSource::Pretrained(path) = source {
            load_backbone(path, &mut params, backbone, input)?;
        }
        Ok(Self { params, backbone, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.fan_out(&self.params)
    }

    fn features_node(&self, g: &mut Graph, image: &Image) -> NodeId {
        let x = g.constant(Mat::row_vector(normalize_pixels(image)));
        let h = self.backbone.forward(g, x);
        g.relu(h)
    }

    pub fn logits(&self, image: &Image) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let h = self.features_node(&mut g, image);
        let out = self.head.forward(&mut g, h);
        g.value(out).data().to_vec()
    }

    pub fn predict(&self, image: &Image) -> usize {
        crate::nn::argmax(&self.logits(image))
    }

    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> f64 {
        let hits = par::map_range(images.len(), |i| usize::from(self.predict(&images[i]) == labels[i]));
        hits.iter().sum::<usize>() as f64 / images.len().max(1) as f64
    }
}

impl ImageFeatures for ImageClassifier {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let h = self.features_node(&mut g, image);
        let out = g.value(h).data().to_vec();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image features".into()));
        }
        Ok(out)
    }
}

/// Pixels in channel-interleaved order; photos have the pretraining mean RGB removed.
fn normalize_pixels(image: &Image) -> Vec<f64> {
    if image.source == ImageSource::Photo && image.channels == 3 {
        image.data.iter().enumerate().map(|(i, v)| v - IMAGENET_MEAN_RGB[i % 3]).collect()
    } else {
        image.data.clone()
    }
}

fn load_backbone(path: &Path, params: &mut ParamSet, backbone: Linear, input: usize) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingBackbone {
            path: path.to_path_buf(),
            hint: "download the pretrained backbone, convert it to a JSON parameter file with \
                   `backbone.w` and `backbone.b`, and set `encoders.backbone` in the config \
                   (or use a random-init backbone for synthetic data)"
                .into(),
        });
    }
    let stored: ParamSet = serde_json::from_str(&util::read_text(path)?)?;
    for (name, id) in [("backbone.w", backbone.w), ("backbone.b", backbone.b)] {
        let src = stored.find(name).ok_or_else(|| Error::Checkpoint(format!("{} lacks {name}", path.display())))?;
        let value = stored.get(src);
        if value.shape() != params.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {:?} for {input}-pixel inputs",
                value.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = value.clone();
    }
    Ok(())
}

/// Fine-tunes a classifier in two phases: the head alone, then every layer.
pub fn fit_image_encoder(
    images: &[Image],
    labels: &[usize],
    source: &BackboneSource,
    config: &ImageFitConfig,
) -> Result<(ImageClassifier, ImageFitLog)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Invalid(format!("{} images with {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {} classes", config.classes)));
    }
    let input = images[0].data.len();
    if images.iter().any(|im| im.data.len() != input) {
        return Err(Error::Invalid("images differ in size".into()));
    }
    let mut model = ImageClassifier::new(source, input, config)?;
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut rng = util::rng(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = ImageFitLog::default();
    let head_ids = [model.head.w, model.head.b];

    for epoch in 0..config.head_epochs + config.full_epochs {
        let head_only = epoch < config.head_epochs;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let parts = par::fold_chunks(
                batch,
                8,
                || (Grads::zeros_like(&model.params), 0.0),
                |(grads, loss), _, &i| {
                    let mut g = Graph::new(&model.params);
                    let h = model.features_node(&mut g, &images[i]);
                    let logits = model.head.forward(&mut g, h);
                    let lp = g.log_softmax_rows(logits);
                    let mut pick = Mat::zeros(1, config.classes);
                    pick.set(0, labels[i], -1.0);
                    let nll = g.mul_const(lp, pick);
                    let nll = g.sum(nll);
                    *loss += g.value(nll).scalar_value();
                    g.backward(nll, grads);
                },
            );
            let mut grads = Grads::zeros_like(&model.params);
            for (p, l) in &parts {
                grads.accumulate(p);
                total += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            if head_only {
                opt.step_filtered(&mut model.params, &grads, |id| head_ids.contains(&id));
            } else {
                opt.step(&mut model.params, &grads);
            }
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.epoch_losses.push(mean);
    }
    log.train_accuracy = model.accuracy(images, labels);
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_set(per_class: usize) -> (Vec<Image>, Vec<usize>) {
        let mut rng = util::rng(5);
        let (w, h) = (6, 6);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..8 {
            for _ in 0..per_class {
                let mut data: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..0.3)).collect();
                // Each class lights a different row-or-column stripe.
                for k in 0..6 {
                    let p = if class < 6 { class * w + k } else { k * w + (class - 6) * 5 };
                    data[p] += 1.0;
                }
                images.push(Image { width: w, height: h, channels: 1, data, background: 0.0, source: ImageSource::Render });
                labels.push(class);
            }
        }
        (images, labels)
    }

    #[test]
    fn fits_synthetic_classes() {
        let (images, labels) = synthetic_set(6);
        let config = ImageFitConfig { hidden: 32, head_epochs: 10, full_epochs: 20, learning_rate: 1e-2, batch_size: 8, ..Default::default() };
        let (model, log) = fit_image_encoder(&images, &labels, &BackboneSource::RandomInit(0), &config).unwrap();
        assert!(log.train_accuracy >= 0.95, "accuracy {}", log.train_accuracy);
        assert_eq!(model.features(&images[0]).unwrap().len(), 32);
    }

    #[test]
    fn head_phase_leaves_backbone_untouched() {
        let (images, labels) = synthetic_set(2);
        let config = ImageFitConfig { hidden: 8, head_epochs: 3, full_epochs: 0, ..Default::default() };
        let fresh = ImageClassifier::new(&BackboneSource::RandomInit(0), 36, &config).unwrap();
        let (model, _) = fit_image_encoder(&images, &labels, &BackboneSource::RandomInit(0), &config).unwrap();
        assert_eq!(fresh.params.get(fresh.backbone.w), model.params.get(model.backbone.w));
        assert_ne!(fresh.params.get(fresh.head.w), model.params.get(model.head.w));
    }

    #[test]
    fn default_feature_width() {
        let m = ImageClassifier::new(&BackboneSource::RandomInit(1), 12, &ImageFitConfig::default()).unwrap();
        assert_eq!(m.feature_dim(), 4096);
    }

    #[test]
    fn missing_backbone_explains_fix() {
        let err = ImageClassifier::new(&BackboneSource::Pretrained("/nonexistent/vgg.json".into()), 12, &ImageFitConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingBackbone { .. }));
        assert!(err.to_string().contains("config"));
    }

    #[test]
    fn pretrained_weights_are_loaded() {
        let config = ImageFitConfig { hidden: 4, classes: 2, ..Default::default() };
        let donor = ImageClassifier::new(&BackboneSource::RandomInit(9), 3, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.json");
        std::fs::write(&path, serde_json::to_string(&donor.params).unwrap()).unwrap();
        let m = ImageClassifier::new(&BackboneSource::Pretrained(path), 3, &config).unwrap();
        assert_eq!(m.params.get(m.backbone.w), donor.params.get(donor.backbone.w));
    }

    #[test]
    fn photos_are_mean_subtracted() {
        let img = Image { width: 1, height: 1, channels: 3, data: vec![123.68, 116.779, 103.939], background: 0.0, source: ImageSource::Photo };
        assert_eq!(normalize_pixels(&img), vec![0.0, 0.0, 0.0]);
        let render = Image { source: ImageSource::Render, ..img };
        assert_eq!(normalize_pixels(&render), render.data);
    }

    #[test]
    fn inference_is_deterministic() {
        let (images, _) = synthetic_set(1);
        let m = ImageClassifier::new(&BackboneSource::RandomInit(2), 36, &ImageFitConfig { hidden: 16, ..Default::default() }).unwrap();
        let a = m.features(&images[3]).unwrap();
        let b = m.features(&images[3]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
