use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CloudFeatures, PointCloud};
use crate::nn::{Adam, Grads, Graph, Linear, Mat, NodeId, ParamSet};
use crate::{par, util, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcAeConfig {
    pub bottleneck: usize,
    /// Widths of the shared per-point layers before max-pooling.
    pub point_layers: Vec<usize>,
    pub decoder_hidden: usize,
    /// Points emitted by the decoder.
    pub out_points: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PcAeConfig {
    fn default() -> Self {
        Self {
            bottleneck: super::PC_CODE_DIM,
            point_layers: vec![64, 128],
            decoder_hidden: 256,
            out_points: super::POINTS_PER_CLOUD,
            epochs: 100,
            learning_rate: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// PointNet-style encoder (shared per-point MLP, max-pool, linear bottleneck)
/// with a fully connected decoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcAutoencoder {
    pub config: PcAeConfig,
    params: ParamSet,
    point_layers: Vec<Linear>,
    to_code: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PcAeLog {
    /// Mean training Chamfer loss after every epoch.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, loss)` for every saved checkpoint; losses never increase.
    pub checkpoints: Vec<(usize, f64)>,
}

impl PcAutoencoder {
    pub fn new(config: PcAeConfig) -> Self {
        let mut rng = util::rng(config.seed);
        let mut params = ParamSet::new();
        let mut width = 3;
        let mut point_layers = Vec::new();
        for (i, &w) in config.point_layers.iter().enumerate() {
            point_layers.push(Linear::new(&mut params, &format!("enc.point{i}"), width, w, &mut rng));
            width = w;
        }
        let to_code = Linear::new(&mut params, "enc.code", width, config.bottleneck, &mut rng);
        let dec_hidden = Linear::new(&mut params, "dec.hidden", config.bottleneck, config.decoder_hidden, &mut rng);
        let dec_out = Linear::new(&mut params, "dec.out", config.decoder_hidden, config.out_points * 3, &mut rng);
        Self { config, params, point_layers, to_code, dec_hidden, dec_out }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn encode_node(&self, g: &mut Graph, cloud: &Mat) -> NodeId {
        let mut h = g.constant(cloud.clone());
        for layer in &self.point_layers {
            h = layer.forward(g, h);
            h = g.relu(h);
        }
        let pooled = g.col_max(h);
        self.to_code.forward(g, pooled)
    }

    fn decode_node(&self, g: &mut Graph, code: NodeId) -> NodeId {
        let h = self.dec_hidden.forward(g, code);
        let h = g.relu(h);
        let flat = self.dec_out.forward(g, h);
        g.reshape(flat, self.config.out_points, 3)
    }

    fn loss_node(&self, g: &mut Graph, cloud: &Mat) -> NodeId {
        let code = self.encode_node(g, cloud);
        let recon = self.decode_node(g, code);
        let target = g.constant(cloud.clone());
        g.chamfer(target, recon)
    }

    pub fn encode(&self, cloud: &PointCloud) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let code = self.encode_node(&mut g, &cloud.points);
        g.value(code).data().to_vec()
    }

    pub fn reconstruct(&self, cloud: &PointCloud) -> Mat {
        let mut g = Graph::new(&self.params);
        let code = self.encode_node(&mut g, &cloud.points);
        let out = self.decode_node(&mut g, code);
        g.value(out).clone()
    }

    pub fn reconstruction_loss(&self, cloud: &PointCloud) -> f64 {
        let mut g = Graph::new(&self.params);
        let l = self.loss_node(&mut g, &cloud.points);
        g.value(l).scalar_value()
    }

    pub fn mean_loss(&self, clouds: &[PointCloud]) -> f64 {
        par::map(clouds, |c| self.reconstruction_loss(c)).iter().sum::<f64>() / clouds.len() as f64
    }
}

impl CloudFeatures for PcAutoencoder {
    fn features(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.encode(cloud))
    }
}

/// Trains an autoencoder under the Chamfer loss and returns the checkpoint with
/// the lowest mean training loss.
pub fn fit_pc_autoencoder(clouds: &[PointCloud], config: PcAeConfig) -> Result<(PcAutoencoder, PcAeLog)> {
    if clouds.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 clouds to fit an autoencoder, got {}", clouds.len())));
    }
    let mut model = PcAutoencoder::new(config.clone());
    let mut rng = util::rng(config.seed.wrapping_add(1));
    // Starting the decoder at a real shape sidesteps most Chamfer matching minima.
    let template = &clouds[rng.random_range(0..clouds.len())].points;
    let bias = model.params.get_mut(model.dec_out.b);
    for (j, v) in bias.data_mut().iter_mut().enumerate() {
        let (p, c) = (j / 3, j % 3);
        *v = template.get(p % template.rows(), c);
    }
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    let mut log = PcAeLog::default();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let parts = par::fold_chunks(batch, 4, || Grads::zeros_like(&model.params), |grads, _, &i| {
                let mut g = Graph::new(&model.params);
                let l = model.loss_node(&mut g, &clouds[i].points);
                g.backward(l, grads);
            });
            let mut grads = Grads::zeros_like(&model.params);
            parts.iter().for_each(|p| grads.accumulate(p));
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grads);
        }
        let loss = model.mean_loss(clouds);
        if !loss.is_finite() {
            log::error!("autoencoder diverged at epoch {epoch}; best checkpoint loss {best_loss}");
            return Err(Error::Diverged { epoch });
        }
        log.epoch_losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = model.clone();
            log.checkpoints.push((epoch, loss));
        }
    }
    Ok((best, log))
}
