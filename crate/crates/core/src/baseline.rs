//! Sequential fine-tuning of a linear head on frozen [class] features.

use l2p_tensor::{AdamConfig, AdamState, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::classifier::Classifier;
use crate::data::{labels, Sample};
use crate::error::{Error, Result};
use crate::harness::ContinualLearner;
use crate::learner::TrainReport;
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_mask: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 0.03, batch_size: 32, epochs: 5, train_mask: false, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenProbe {
    config: ProbeConfig,
    backbone: Backbone<f32>,
    classifier: Classifier<f32>,
    adam: AdamState<f32>,
}

impl FrozenProbe {
    pub fn new(config: ProbeConfig, backbone: Backbone<f32>, num_classes: usize) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Input("the backbone must be frozen".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let classifier = Classifier::new(
            backbone.config().embed_dim,
            num_classes,
            rng::derive_seed(config.seed, &[purpose::HEAD_INIT]),
        );
        let adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(FrozenProbe { config, backbone, classifier, adam })
    }

    pub fn classifier(&self) -> &Classifier<f32> {
        &self.classifier
    }

    fn features(&self, samples: &[&Sample]) -> Result<Tensor<f32>> {
        let images: Vec<&[f32]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
        self.backbone.query_feature(&images)
    }

    fn step(&mut self, features: &[f32], labels: &[usize]) -> Result<f64> {
        let d = self.backbone.config().embed_dim;
        let c = self.classifier.num_classes();
        let mut g = Graph::new();
        let x = g.constant([labels.len(), d], features.to_vec())?;
        let (w, b) = self.classifier.bind(&mut g, true);
        let mut logits = Classifier::<f32>::apply(&mut g, x, w, b)?;
        if self.config.train_mask {
            let mut mask = vec![-1e9f32; c];
            for &l in labels {
                if l < c {
                    mask[l] = 0.0;
                }
            }
            let m = g.constant([c], mask)?;
            logits = g.add(logits, m)?;
        }
        let loss = g.cross_entropy(logits, labels)?;
        g.backward(loss)?;
        self.classifier.accumulate(&g, w, b)?;
        let value = g.value(loss)[0] as f64;
        let cl = &mut self.classifier;
        self.adam.step(&mut [("classifier.weight", &mut cl.weight), ("classifier.bias", &mut cl.bias)])?;
        Ok(value)
    }
}

impl ContinualLearner for FrozenProbe {
    fn train_task(&mut self, data: &[Sample], task: usize) -> Result<TrainReport> {
        let d = self.backbone.config().embed_dim;
        let refs: Vec<&Sample> = data.iter().collect();
        let mut feats = Vec::with_capacity(data.len() * d);
        for chunk in refs.chunks(64) {
            feats.extend_from_slice(self.features(chunk)?.data());
        }
        let mut report = TrainReport::default();
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::rng_for(self.config.seed, &[purpose::SHUFFLE, task as u64, epoch as u64]));
            let (mut total, mut n) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let x: Vec<f32> = chunk.iter().flat_map(|&i| feats[i * d..(i + 1) * d].iter().copied()).collect();
                let y: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
                total += self.step(&x, &y)?;
                n += 1;
                report.steps += 1;
            }
            report.epoch_losses.push(if n == 0 { 0.0 } else { total / n as f64 });
        }
        Ok(report)
    }

    fn train_batch(&mut self, batch: &[&Sample]) -> Result<()> {
        let x = self.features(batch)?;
        self.step(x.data(), &labels(batch)).map(|_| ())
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        let q = self.backbone.query_feature(images)?;
        self.classifier.predict(&q)
    }
}
