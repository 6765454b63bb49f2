//! Prompt-pool learner: a frozen backbone, a prompt pool queried per input,
//! and a shared linear head trained on the average of the prompt outputs.

use l2p_tensor::{kernels, AdamConfig, AdamState, Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::classifier::Classifier;
use crate::data::{labels, Sample};
use crate::error::{Error, Result};
use crate::prompt::{BoundPool, FrequencyTable, Lookup, PoolConfig, PromptPool, Selection};
use crate::rehearsal::RehearsalBuffer;
use crate::rng::{self, purpose};

/// Full method or one of its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// One prompt, always used; no query and no key term.
    SinglePrompt,
    /// Keys are the row means of their prompts instead of learned vectors.
    MeanKey,
    /// Diversified lookup disabled.
    NoDiversify,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "single_prompt" => Ok(Variant::SinglePrompt),
            "mean_key" => Ok(Variant::MeanKey),
            "no_diversify" => Ok(Variant::NoDiversify),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}` (expected full, single_prompt, mean_key or no_diversify)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub pool_size: usize,
    pub prompt_length: usize,
    pub top_n: usize,
    /// Weight of the key-matching term.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub diversify: bool,
    /// Replay buffer capacity per class; 0 disables rehearsal.
    pub rehearsal_per_class: usize,
    /// Restrict training logits to the classes present in the batch.
    pub train_mask: bool,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            pool_size: 10,
            prompt_length: 5,
            top_n: 5,
            lambda: 0.5,
            lr: 0.03,
            batch_size: 32,
            epochs: 5,
            diversify: false,
            rehearsal_per_class: 0,
            train_mask: false,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl LearnerConfig {
    /// Applies the settings an ablation implies: one prompt for
    /// `SinglePrompt`, no diversified lookup for `NoDiversify`.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        match variant {
            Variant::SinglePrompt => {
                self.pool_size = 1;
                self.top_n = 1;
                self.diversify = false;
            }
            Variant::NoDiversify => self.diversify = false,
            Variant::Full | Variant::MeanKey => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be nonnegative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        match self.variant {
            Variant::SinglePrompt if self.pool_size != 1 || self.top_n != 1 => {
                Err(Error::config("variant", "single_prompt needs pool_size = 1 and top_n = 1"))
            }
            Variant::SinglePrompt | Variant::NoDiversify if self.diversify => {
                Err(Error::config("diversify", "this variant runs without diversified selection"))
            }
            _ => Ok(()),
        }
    }

    pub fn pool(&self, embed_dim: usize, key_dim: usize) -> PoolConfig {
        PoolConfig { size: self.pool_size, length: self.prompt_length, top_n: self.top_n, embed_dim, key_dim }
    }
}

/// Graph handles produced by [`Learner::loss_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub logits: Var,
    /// Mean cross-entropy.
    pub prediction: Var,
    /// Mean over the batch of the summed key distances; absent without a query.
    pub surrogate: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub selections: Vec<Selection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// How often each prompt was chosen during this task.
    pub selection_counts: Vec<u64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Learner<T: Scalar = f32> {
    config: LearnerConfig,
    backbone: Backbone<T>,
    pool: PromptPool<T>,
    classifier: Classifier<T>,
    adam: AdamState<T>,
    /// Counts over every training batch so far.
    running: FrequencyTable,
    /// Counts as of the end of the previous task, when boundaries are known.
    snapshot: Option<FrequencyTable>,
    tasks_started: usize,
}

impl<T: Scalar> Learner<T> {
    pub fn new(config: LearnerConfig, backbone: Backbone<T>, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::Input("the backbone must be frozen before continual training".into()));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        let bc = backbone.config();
        let pool = PromptPool::new(
            config.pool(bc.embed_dim, bc.key_dim),
            rng::derive_seed(config.seed, &[purpose::POOL_INIT]),
        )?;
        let classifier = Classifier::new(bc.embed_dim, num_classes, rng::derive_seed(config.seed, &[purpose::HEAD_INIT]));
        let adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let running = FrequencyTable::new(config.pool_size);
        let mut learner =
            Learner { config, backbone, pool, classifier, adam, running, snapshot: None, tasks_started: 0 };
        if learner.config.variant == Variant::MeanKey {
            learner.refresh_mean_keys();
        }
        Ok(learner)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn pool(&self) -> &PromptPool<T> {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut PromptPool<T> {
        &mut self.pool
    }

    pub fn classifier(&self) -> &Classifier<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier<T> {
        &mut self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn frequency(&self) -> &FrequencyTable {
        &self.running
    }

    /// Reads of the frequency tables so far, for instrumentation.
    pub fn table_reads(&self) -> u64 {
        self.running.reads() + self.snapshot.as_ref().map_or(0, FrequencyTable::reads)
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn tasks_started(&self) -> usize {
        self.tasks_started
    }

    pub fn cast<U: Scalar>(&self) -> Learner<U> {
        Learner {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            pool: self.pool.cast(),
            classifier: self.classifier.cast(),
            adam: self.adam.cast(),
            running: self.running.clone(),
            snapshot: self.snapshot.clone(),
            tasks_started: self.tasks_started,
        }
    }

    fn uses_query(&self) -> bool {
        self.config.variant != Variant::SinglePrompt
    }

    /// `q(x)` for a batch, or `None` for the single-prompt ablation.
    pub fn queries(&self, images: &[&[f32]]) -> Result<Option<Tensor<T>>> {
        if self.uses_query() {
            Ok(Some(self.backbone.query_feature(images)?))
        } else {
            Ok(None)
        }
    }

    /// Test-time lookup: nearest keys, never the frequency table.
    pub fn select(&self, queries: Option<&Tensor<T>>, batch: usize) -> Result<Vec<Selection>> {
        self.lookup(queries, batch, Lookup::Standard)
    }

    fn lookup(&self, queries: Option<&Tensor<T>>, batch: usize, mode: Lookup<'_>) -> Result<Vec<Selection>> {
        match queries {
            Some(q) => self.pool.select_batch(q, mode),
            None => Ok(vec![Selection { indices: vec![0], distances: Vec::new() }; batch]),
        }
    }

    fn train_lookup(&self, queries: Option<&Tensor<T>>, batch: usize) -> Result<Vec<Selection>> {
        if self.config.diversify {
            let table = self.snapshot.as_ref().unwrap_or(&self.running);
            self.lookup(queries, batch, Lookup::Diversified(table))
        } else {
            self.lookup(queries, batch, Lookup::Standard)
        }
    }

    /// Builds the training objective in `g` for fixed `selections`:
    /// cross-entropy of the head applied to the mean of the first `N·L_p`
    /// output tokens, plus `λ` times the summed distance between each query
    /// and its chosen keys, both averaged over the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        images: &[&[f32]],
        labels: &[usize],
        queries: Option<&Tensor<T>>,
        selections: &[Selection],
        bound: &BoundPool,
        head: (Var, Var),
        class_mask: Option<&[bool]>,
    ) -> Result<LossParts> {
        let b = images.len();
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes()) {
            return Err(Error::Row {
                row,
                source: Box::new(Error::Input(format!("label {label} outside {} classes", self.num_classes()))),
            });
        }
        let frozen = self.backbone.bind(g, false);
        let x_e = self.backbone.embed(g, &frozen, images)?;
        let x_p = self.pool.prepend_batch(g, bound, selections, x_e)?;
        let h = self.backbone.forward_features(g, &frozen, x_p)?;
        let prompt_rows = self.pool.config().prompt_tokens();
        let pooled = g.narrow(h, 1, 0, prompt_rows)?;
        let pooled = g.mean_axis(pooled, 1)?;
        let mut logits = Classifier::<T>::apply(g, pooled, head.0, head.1)?;
        if let Some(mask) = class_mask {
            let offsets = mask.iter().map(|&on| if on { T::zero() } else { T::of(-1e9) }).collect();
            let m = g.constant([mask.len()], offsets)?;
            logits = g.add(logits, m)?;
        }
        let prediction = g.cross_entropy(logits, labels)?;

        let surrogate = match queries {
            Some(q) => {
                let mut terms = Vec::with_capacity(b * self.config.top_n);
                for (row, s) in selections.iter().enumerate() {
                    let qv = g.constant([q.dims()[1]], q.row(row).to_vec())?;
                    for i in &s.indices {
                        let k = *bound.keys.get(i).ok_or_else(|| Error::Input(format!("key {i} is not bound")))?;
                        let d = g.cosine_distance(qv, k)?;
                        terms.push(g.reshape(d, [1])?);
                    }
                }
                let all = g.concat(&terms, 0)?;
                let total = g.sum(all);
                Some(g.scale(total, T::of(1.0 / b as f64)))
            }
            None => None,
        };
        let loss = match surrogate {
            Some(s) => {
                let weighted = g.scale(s, T::of(self.config.lambda));
                g.add(prediction, weighted)?
            }
            None => prediction,
        };
        Ok(LossParts { loss, logits, prediction, surrogate })
    }

    /// Call at a known task boundary: freezes the frequency snapshot used by
    /// diversified lookup for the coming task.
    pub fn begin_task(&mut self) {
        self.snapshot = Some(self.running.clone());
        self.tasks_started += 1;
    }

    /// One update on `batch`: lookup, loss, backward, then Adam on the chosen
    /// prompts and keys and on the head. Nothing else changes.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let images: Vec<&[f32]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
        let labels = labels(batch);
        let queries = self.queries(&images)?;
        let selections = self.train_lookup(queries.as_ref(), batch.len())?;
        let mask = self.config.train_mask.then(|| {
            let mut m = vec![false; self.num_classes()];
            for &l in &labels {
                if l < m.len() {
                    m[l] = true;
                }
            }
            m
        });

        let mut g = Graph::new();
        let bound = self.pool.bind(&mut g, &selections);
        let head = self.classifier.bind(&mut g, true);
        let parts =
            self.loss_graph(&mut g, &images, &labels, queries.as_ref(), &selections, &bound, head, mask.as_deref())?;
        g.backward(parts.loss)?;
        let loss = g.value(parts.loss)[0].as_f64();

        let prompt_ids: Vec<usize> = bound.prompts.keys().copied().collect();
        let mut key_ids = Vec::new();
        for (&i, &v) in &bound.prompts {
            self.pool.prompt_mut(i).accumulate_grad(g.grad(v).expect("selected prompt on the loss path"))?;
        }
        for (&i, &v) in &bound.keys {
            if let Some(grad) = g.grad(v) {
                self.pool.key_mut(i).accumulate_grad(grad)?;
                key_ids.push(i);
            }
        }
        self.classifier.accumulate(&g, head.0, head.1)?;

        let names: Vec<String> = prompt_ids
            .iter()
            .map(|i| format!("prompt.{i}"))
            .chain(key_ids.iter().map(|i| format!("key.{i}")))
            .collect();
        let mut params: Vec<(&str, &mut Tensor<T>)> =
            names.iter().map(String::as_str).zip(self.pool.tensors_mut(&prompt_ids, &key_ids)).collect();
        params.push(("classifier.weight", &mut self.classifier.weight));
        params.push(("classifier.bias", &mut self.classifier.bias));
        self.adam.step(&mut params)?;

        if self.config.variant == Variant::MeanKey {
            self.refresh_mean_keys();
        }
        self.running.update(&selections);
        Ok(StepReport { loss, selections })
    }

    fn refresh_mean_keys(&mut self) {
        let cfg = self.pool.config().clone();
        for i in 0..cfg.size {
            let prompt = self.pool.prompts()[i].data().to_vec();
            let mut mean = vec![T::zero(); cfg.embed_dim];
            for row in prompt.chunks(cfg.embed_dim) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            let inv = T::one() / T::of(cfg.length as f64);
            mean.iter_mut().for_each(|m| *m = *m * inv);
            *self.pool.key_mut(i) = Tensor::new([cfg.key_dim], mean).expect("key_dim equals embed_dim");
        }
    }

    /// Shuffled visiting order of `len` samples for one epoch of one task.
    pub fn epoch_order(&self, len: usize, task: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng::rng_for(self.config.seed, &[purpose::SHUFFLE, task as u64, epoch as u64]));
        order
    }

    /// Trains on one task's data for the configured number of epochs.
    pub fn train_task(&mut self, data: &[Sample], task: usize) -> Result<TrainReport> {
        self.train_task_inner(data, task, None)
    }

    /// Like [`train_task`](Self::train_task), but every batch is topped up
    /// with an equal number of replayed samples, and the task's data is
    /// folded into `buffer` afterwards.
    pub fn train_task_with_rehearsal(
        &mut self,
        data: &[Sample],
        task: usize,
        buffer: &mut RehearsalBuffer,
    ) -> Result<TrainReport> {
        if buffer.per_class() == 0 {
            return Err(Error::config("rehearsal_per_class", "rehearsal needs a positive buffer capacity"));
        }
        let report = self.train_task_inner(data, task, Some(buffer))?;
        buffer.retain(data, self.config.seed, task as u64);
        Ok(report)
    }

    fn train_task_inner(&mut self, data: &[Sample], task: usize, buffer: Option<&RehearsalBuffer>) -> Result<TrainReport> {
        self.begin_task();
        let mut report = TrainReport { selection_counts: vec![0; self.config.pool_size], ..TrainReport::default() };
        for epoch in 0..self.config.epochs {
            let order = self.epoch_order(data.len(), task, epoch);
            let (mut total, mut batches) = (0.0, 0usize);
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let mut batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
                if let Some(buf) = buffer {
                    batch.extend(buf.draw(chunk.len(), self.config.seed, &[task as u64, epoch as u64, b as u64]));
                }
                let step = self.train_step(&batch)?;
                for s in &step.selections {
                    for &i in &s.indices {
                        report.selection_counts[i] += 1;
                    }
                }
                total += step.loss;
                batches += 1;
                report.steps += 1;
            }
            report.epoch_losses.push(if batches == 0 { 0.0 } else { total / batches as f64 });
        }
        Ok(report)
    }

    /// Logits `[B × C]` over the full class vocabulary using the nearest-key
    /// lookup. Reads no frequency table and changes nothing.
    pub fn logits(&self, images: &[&[f32]]) -> Result<Tensor<T>> {
        let queries = self.queries(images)?;
        let selections = self.select(queries.as_ref(), images.len())?;
        let mut g = Graph::new();
        let bound = self.pool.bind(&mut g, &selections);
        let head = self.classifier.bind(&mut g, false);
        let frozen = self.backbone.bind(&mut g, false);
        let x_e = self.backbone.embed(&mut g, &frozen, images)?;
        let x_p = self.pool.prepend_batch(&mut g, &bound, &selections, x_e)?;
        let h = self.backbone.forward_features(&mut g, &frozen, x_p)?;
        let pooled = g.narrow(h, 1, 0, self.pool.config().prompt_tokens())?;
        let pooled = g.mean_axis(pooled, 1)?;
        let logits = Classifier::<T>::apply(&mut g, pooled, head.0, head.1)?;
        Ok(g.to_tensor(logits))
    }

    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.data().chunks(self.num_classes()).map(kernels::argmax).collect())
    }
}
