//! Desk-scale vision transformer: patch embedding with a [class] token and
//! learned positions (`embed`), followed by pre-norm self-attention blocks
//! and a final layer norm (`forward_features`).

use std::collections::BTreeSet;

use l2p_tensor::{AdamConfig, AdamState, Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::Classifier;
use crate::data::{labels, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

const LN_EPS: f64 = 1e-6;
const PARAMS_PER_BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Query/key width. The query is the [class] output row, so this must
    /// equal `embed_dim`.
    pub key_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pretrain_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_side: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            key_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 2,
            pretrain_classes: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("pretrain_classes", self.pretrain_classes),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be positive"));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image side {}", self.patch_size, self.image_side),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("{} does not divide embed_dim {}", self.heads, self.embed_dim)));
        }
        if self.key_dim != self.embed_dim {
            return Err(Error::config("key_dim", "must equal embed_dim (the query is the [class] output row)"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Tokens per image including the [class] token.
    pub fn token_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }

    fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_dim();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.token_len(), d]),
        ];
        for i in 0..self.depth {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("norm1.gain"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.query.weight"), vec![d, d]),
                (p("attn.query.bias"), vec![d]),
                (p("attn.key.weight"), vec![d, d]),
                (p("attn.key.bias"), vec![d]),
                (p("attn.value.weight"), vec![d, d]),
                (p("attn.value.bias"), vec![d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("norm2.gain"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        if self.depth > 0 {
            out.push(("norm.gain".to_string(), vec![d]));
            out.push(("norm.bias".to_string(), vec![d]));
        }
        out
    }
}

/// Graph handles of every backbone parameter, in layout order.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    vars: Vec<Var>,
}

impl BoundBackbone {
    fn block(&self, i: usize, slot: usize) -> Var {
        self.vars[4 + i * PARAMS_PER_BLOCK + slot]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Backbone<T: Scalar = f32> {
    config: BackboneConfig,
    params: Vec<(String, Tensor<T>)>,
    frozen: bool,
}

impl<T: Scalar> Backbone<T> {
    /// Fresh, trainable backbone.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &[purpose::BACKBONE_INIT]);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let params = config
            .layout()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let values: Vec<T> = if name.ends_with(".gain") {
                    vec![T::one(); n]
                } else if name.ends_with(".bias") {
                    vec![T::zero(); n]
                } else if name == "cls_token" || name == "pos_embed" {
                    (0..n).map(|_| T::of(small.sample(&mut rng))).collect()
                } else {
                    let limit = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
                };
                let t = Tensor::new(dims, values).expect("layout shape").with_grad();
                (name, t)
            })
            .collect();
        Ok(Backbone { config, params, frozen: false })
    }

    pub(crate) fn from_parts(config: BackboneConfig, params: Vec<(String, Tensor<T>)>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Input(format!("expected {} parameters, got {}", layout.len(), params.len())));
        }
        for ((name, dims), (pname, t)) in layout.iter().zip(&params) {
            if name != pname || dims.as_slice() != t.dims() {
                return Err(Error::Input(format!(
                    "parameter `{pname}` {:?} does not match expected `{name}` {dims:?}",
                    t.dims()
                )));
            }
        }
        let mut b = Backbone { config, params, frozen: false };
        b.set_frozen(frozen);
        Ok(b)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen parameters are recorded as graph leaves without gradients.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for (_, t) in &mut self.params {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and values of all parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Records every parameter in `g`. With `trainable = false` they enter
    /// as constants even if the backbone is not frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBackbone {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t.shape().clone(), t.data().to_vec()).expect("shape") })
            .collect();
        BoundBackbone { vars }
    }

    /// Splits images into flattened patches, `[B × patches × patch_dim]`.
    pub fn patchify(&self, images: &[&[f32]]) -> Result<Vec<T>> {
        let c = &self.config;
        let (side, ch, s) = (c.image_side, c.channels, c.patch_size);
        let per_side = side / s;
        let mut out = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for (row, img) in images.iter().enumerate() {
            if img.len() != c.pixels() {
                return Err(Error::Row {
                    row,
                    source: Box::new(Error::Input(format!(
                        "image has {} values, expected {side}×{side}×{ch} = {}",
                        img.len(),
                        c.pixels()
                    ))),
                });
            }
            for py in 0..per_side {
                for px in 0..per_side {
                    for y in 0..s {
                        let start = ((py * s + y) * side + px * s) * ch;
                        out.extend(img[start..start + s * ch].iter().map(|&v| T::of(v as f64)));
                    }
                }
            }
        }
        Ok(out)
    }

    /// `f_e`: `[B × L × D]` token embeddings; row 0 is the [class] token.
    pub fn embed(&self, g: &mut Graph<T>, bound: &BoundBackbone, images: &[&[f32]]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let c = &self.config;
        let b = images.len();
        let patches = g.constant([b, c.num_patches(), c.patch_dim()], self.patchify(images)?)?;
        let proj = g.matmul(patches, bound.vars[0])?;
        let proj = g.add(proj, bound.vars[1])?;
        let cls = g.reshape(bound.vars[2], [1, c.embed_dim])?;
        let cls = g.stack(&vec![cls; b])?;
        let tokens = g.concat(&[cls, proj], 1)?;
        Ok(g.add(tokens, bound.vars[3])?)
    }

    /// `f_r`: the block stack plus final norm. Accepts any token length.
    pub fn forward_features(&self, g: &mut Graph<T>, bound: &BoundBackbone, tokens: Var) -> Result<Var> {
        let dims = g.shape(tokens).dims().to_vec();
        if dims.len() != 3 || dims[2] != self.config.embed_dim {
            return Err(Error::Input(format!(
                "tokens {} do not have embed dim {}",
                g.shape(tokens),
                self.config.embed_dim
            )));
        }
        let mut x = tokens;
        for i in 0..self.config.depth {
            x = self.block(g, bound, i, x, dims[0], dims[1])?;
        }
        if self.config.depth > 0 {
            let n = bound.vars.len();
            x = g.layer_norm(x, bound.vars[n - 2], bound.vars[n - 1], LN_EPS)?;
        }
        Ok(x)
    }

    fn block(&self, g: &mut Graph<T>, bound: &BoundBackbone, i: usize, x: Var, b: usize, l: usize) -> Result<Var> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let p = |slot| bound.block(i, slot);

        let h = g.layer_norm(x, p(0), p(1), LN_EPS)?;
        let split = |g: &mut Graph<T>, w: Var, bias: Var| -> Result<Var> {
            let y = g.matmul(h, w)?;
            let y = g.add(y, bias)?;
            let y = g.reshape(y, [b, l, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, [b * heads, l, dh])?)
        };
        let q = split(g, p(2), p(3))?;
        let k = split(g, p(4), p(5))?;
        let v = split(g, p(6), p(7))?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, [b, heads, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, [b, l, d])?;
        let out = g.matmul(ctx, p(8))?;
        let out = g.add(out, p(9))?;
        let x = g.add(x, out)?;

        let h = g.layer_norm(x, p(10), p(11), LN_EPS)?;
        let h = g.matmul(h, p(12))?;
        let h = g.add(h, p(13))?;
        let h = g.gelu(h);
        let h = g.matmul(h, p(14))?;
        let h = g.add(h, p(15))?;
        Ok(g.add(x, h)?)
    }

    /// [class] output rows `[B × D]` inside an existing graph.
    pub fn class_rows(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        Ok(g.select(features, 1, 0)?)
    }

    /// `q(x) = f(x)[0, :]` without prompts, as a plain tensor `[B × D_k]`.
    /// It lives outside any caller's graph, so no gradient can reach the
    /// backbone or the image through it.
    pub fn query_feature(&self, images: &[&[f32]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = self.embed(&mut g, &bound, images)?;
        let h = self.forward_features(&mut g, &bound, x)?;
        let q = self.class_rows(&mut g, h)?;
        Ok(g.to_tensor(q))
    }

    /// Trains the backbone with a throwaway linear head on the [class] row,
    /// then freezes it. A `holdout_fraction` of `data` (stratified by label)
    /// is kept out of training and scored at the end.
    pub fn pretrain(
        &mut self,
        data: &[Sample],
        config: &PretrainConfig,
        forbidden_classes: Option<&BTreeSet<usize>>,
    ) -> Result<PretrainReport> {
        if data.is_empty() {
            return Err(Error::Input("empty pretraining set".into()));
        }
        if let Some(forbidden) = forbidden_classes {
            if let Some(s) = data.iter().find(|s| forbidden.contains(&s.id.class)) {
                return Err(Error::Input(format!(
                    "pretraining sample of class {} overlaps the continual-learning classes",
                    s.id.class
                )));
            }
        }
        let classes = self.config.pretrain_classes;
        if let Some(s) = data.iter().find(|s| s.label >= classes) {
            return Err(Error::Input(format!("pretraining label {} outside {classes} classes", s.label)));
        }
        let (train, holdout) = stratified_split(data, config.holdout_fraction, config.seed);
        if train.is_empty() {
            return Err(Error::Input("holdout fraction leaves no training data".into()));
        }

        self.set_frozen(false);
        let mut head = Classifier::new(self.config.embed_dim, classes, rng::derive_seed(config.seed, &[purpose::HEAD_INIT]));
        let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut order: Vec<&Sample> = train.clone();
            order.shuffle(&mut rng::rng_for(config.seed, &[purpose::SHUFFLE, epoch as u64]));
            let mut total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(config.batch_size.max(1)) {
                let images: Vec<&[f32]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
                let mut g = Graph::new();
                let bound = self.bind(&mut g, true);
                let (hw, hb) = head.bind(&mut g, true);
                let x = self.embed(&mut g, &bound, &images)?;
                let h = self.forward_features(&mut g, &bound, x)?;
                let cls = self.class_rows(&mut g, h)?;
                let logits = Classifier::<T>::apply(&mut g, cls, hw, hb)?;
                let loss = g.cross_entropy(logits, &labels(batch))?;
                g.backward(loss)?;
                total += g.value(loss)[0].as_f64();
                batches += 1;
                for ((_, t), v) in self.params.iter_mut().zip(&bound.vars) {
                    t.accumulate_grad(g.grad(*v).expect("backbone parameter on the loss path"))?;
                }
                head.accumulate(&g, hw, hb)?;
                let mut named: Vec<(&str, &mut Tensor<T>)> =
                    self.params.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
                named.push(("head.weight", &mut head.weight));
                named.push(("head.bias", &mut head.bias));
                adam.step(&mut named)?;
            }
            epoch_losses.push(total / batches as f64);
        }
        self.set_frozen(true);

        let score = |set: &[&Sample]| -> Result<f64> {
            if set.is_empty() {
                return Ok(f64::NAN);
            }
            let mut correct = 0usize;
            for batch in set.chunks(64) {
                let images: Vec<&[f32]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
                let q = self.query_feature(&images)?;
                let pred = head.predict(&q)?;
                correct += pred.iter().zip(batch).filter(|(p, s)| **p == s.label).count();
            }
            Ok(correct as f64 / set.len() as f64)
        };
        Ok(PretrainReport {
            epoch_losses,
            train_accuracy: score(&train)?,
            holdout_accuracy: score(&holdout)?,
            chance: 1.0 / classes as f64,
        })
    }
}

fn stratified_split(data: &[Sample], fraction: f64, seed: u64) -> (Vec<&Sample>, Vec<&Sample>) {
    let mut by_label: std::collections::BTreeMap<usize, Vec<&Sample>> = Default::default();
    for s in data {
        by_label.entry(s.label).or_default().push(s);
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (label, mut group) in by_label {
        group.shuffle(&mut rng::rng_for(seed, &[purpose::SHUFFLE, u64::MAX, label as u64]));
        let k = ((group.len() as f64) * fraction).round() as usize;
        holdout.extend_from_slice(&group[..k]);
        train.extend_from_slice(&group[k..]);
    }
    (train, holdout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 8, batch_size: 32, lr: 1e-3, holdout_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub chance: f64,
}
