//! Key-value prompt pool: `M` prompts of `L_p × D` tokens, each paired with
//! a learnable key of width `D_k`, looked up by cosine distance to a query.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use l2p_tensor::{kernels, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// `M`, number of prompts.
    pub size: usize,
    /// `L_p`, tokens per prompt.
    pub length: usize,
    /// `N`, prompts prepended per input.
    pub top_n: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("size", self.size),
            ("length", self.length),
            ("top_n", self.top_n),
            ("embed_dim", self.embed_dim),
            ("key_dim", self.key_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.top_n > self.size {
            return Err(Error::config(
                "top_n",
                format!("cannot select {} prompts from a pool of {}", self.top_n, self.size),
            ));
        }
        Ok(())
    }

    /// `M·L_p·D + M·D_k`.
    pub fn param_count(&self) -> usize {
        self.size * self.length * self.embed_dim + self.size * self.key_dim
    }

    /// Number of prepended prompt tokens, `N·L_p`.
    pub fn prompt_tokens(&self) -> usize {
        self.top_n * self.length
    }
}

/// Indices of the `n` smallest scores, ordered by (score, index). Because
/// the lookup objective is a sum of independent per-index terms, this is
/// also the minimizing `n`-subset.
pub fn top_n_smallest(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Prompts chosen for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// `N` distinct prompt indices, best match first.
    pub indices: Vec<usize>,
    /// Cosine distance between the query and each chosen key.
    pub distances: Vec<f64>,
}

/// Which lookup rule to apply.
#[derive(Clone, Copy, Debug)]
pub enum Lookup<'a> {
    /// Smallest cosine distances.
    Standard,
    /// Smallest frequency-penalized distances `γ·h`.
    Diversified(&'a FrequencyTable),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PromptPool<T: Scalar = f32> {
    config: PoolConfig,
    prompts: Vec<Tensor<T>>,
    keys: Vec<Tensor<T>>,
}

impl<T: Scalar> PromptPool<T> {
    /// Prompts then keys, each entry drawn from `U(-1, 1)`.
    pub fn new(config: PoolConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &[purpose::POOL_INIT]);
        let mut draw = |dims: Vec<usize>| Tensor::from_fn(dims, |_| T::of(rng.random_range(-1.0..1.0))).with_grad();
        let prompts = (0..config.size).map(|_| draw(vec![config.length, config.embed_dim])).collect();
        let keys = (0..config.size).map(|_| draw(vec![config.key_dim])).collect();
        Ok(PromptPool { config, prompts, keys })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn prompts(&self) -> &[Tensor<T>] {
        &self.prompts
    }

    pub fn keys(&self) -> &[Tensor<T>] {
        &self.keys
    }

    pub fn prompt_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.prompts[i]
    }

    pub fn key_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.keys[i]
    }

    /// Mutable prompts `prompt_ids` followed by keys `key_ids`, each list in
    /// ascending index order.
    pub fn tensors_mut(&mut self, prompt_ids: &[usize], key_ids: &[usize]) -> Vec<&mut Tensor<T>> {
        let prompts = self.prompts.iter_mut().enumerate().filter(|(i, _)| prompt_ids.contains(i));
        let keys = self.keys.iter_mut().enumerate().filter(|(i, _)| key_ids.contains(i));
        prompts.chain(keys).map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.prompts.iter().chain(&self.keys).map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> PromptPool<U> {
        PromptPool {
            config: self.config.clone(),
            prompts: self.prompts.iter().map(Tensor::cast).collect(),
            keys: self.keys.iter().map(Tensor::cast).collect(),
        }
    }

    /// `γ(q, k_i)` for every key.
    pub fn distances(&self, query: &[T]) -> Result<Vec<f64>> {
        if query.len() != self.config.key_dim {
            return Err(Error::Input(format!(
                "query has {} values, keys have {}",
                query.len(),
                self.config.key_dim
            )));
        }
        self.keys
            .iter()
            .map(|k| Ok(kernels::cosine_distance(query, k.data())?.as_f64()))
            .collect()
    }

    pub fn select(&self, query: &[T]) -> Result<Selection> {
        let d = self.distances(query)?;
        Ok(pick(&d, &d, self.config.top_n))
    }

    /// Training-time lookup that penalizes frequently used prompts. A
    /// prompt never selected before has penalized score 0.
    pub fn select_diversified(&self, query: &[T], table: &FrequencyTable) -> Result<Selection> {
        if table.len() != self.config.size {
            return Err(Error::Input(format!(
                "frequency table covers {} prompts, pool has {}",
                table.len(),
                self.config.size
            )));
        }
        let d = self.distances(query)?;
        let h = table.normalized();
        let scores: Vec<f64> = d.iter().zip(&h).map(|(d, h)| d * h).collect();
        Ok(pick(&scores, &d, self.config.top_n))
    }

    /// One selection per row of `queries [B × D_k]`.
    pub fn select_batch(&self, queries: &Tensor<T>, lookup: Lookup<'_>) -> Result<Vec<Selection>> {
        if queries.dims().len() != 2 {
            return Err(Error::Input(format!("queries must be B×D_k, got {}", queries.shape())));
        }
        (0..queries.dims()[0])
            .map(|row| {
                let q = queries.row(row);
                match lookup {
                    Lookup::Standard => self.select(q),
                    Lookup::Diversified(table) => self.select_diversified(q, table),
                }
                .map_err(|e| Error::Row { row, source: Box::new(e) })
            })
            .collect()
    }

    /// Records the prompts and keys used by `selections` in `g`. Only these
    /// can receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, selections: &[Selection]) -> BoundPool {
        let mut bound = BoundPool::default();
        for s in selections {
            for &i in &s.indices {
                bound.prompts.entry(i).or_insert_with(|| g.param(&self.prompts[i]));
                bound.keys.entry(i).or_insert_with(|| g.param(&self.keys[i]));
            }
        }
        bound
    }

    /// `[P_s1; …; P_sN; x_e]` along the token axis for a single sequence
    /// `x_e [L × D]`.
    pub fn prepend(&self, g: &mut Graph<T>, bound: &BoundPool, selection: &Selection, x_e: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(selection.indices.len() + 1);
        for i in &selection.indices {
            parts.push(*bound.prompts.get(i).ok_or_else(|| Error::Input(format!("prompt {i} is not bound")))?);
        }
        parts.push(x_e);
        Ok(g.concat(&parts, 0)?)
    }

    /// Batched [`prepend`](Self::prepend): `x_e [B × L × D]` to
    /// `[B × (N·L_p + L) × D]`, one selection per sequence.
    pub fn prepend_batch(
        &self,
        g: &mut Graph<T>,
        bound: &BoundPool,
        selections: &[Selection],
        x_e: Var,
    ) -> Result<Var> {
        let b = g.shape(x_e).dims()[0];
        if b != selections.len() {
            return Err(Error::Input(format!("{b} sequences but {} selections", selections.len())));
        }
        let mut rows = Vec::with_capacity(b);
        for (i, s) in selections.iter().enumerate() {
            let x = g.select(x_e, 0, i)?;
            rows.push(self.prepend(g, bound, s, x)?);
        }
        Ok(g.stack(&rows)?)
    }
}

fn pick(scores: &[f64], distances: &[f64], n: usize) -> Selection {
    let indices = top_n_smallest(scores, n);
    let distances = indices.iter().map(|&i| distances[i]).collect();
    Selection { indices, distances }
}

/// Graph handles of the prompts and keys bound for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundPool {
    pub prompts: BTreeMap<usize, Var>,
    pub keys: BTreeMap<usize, Var>,
}

/// Per-prompt selection counts. Reads of the normalized view are counted,
/// so tests can check that a code path never consults the table.
#[derive(Debug, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    #[serde(skip)]
    reads: AtomicU64,
}

impl Clone for FrequencyTable {
    fn clone(&self) -> Self {
        FrequencyTable { counts: self.counts.clone(), reads: AtomicU64::new(0) }
    }
}

impl PartialEq for FrequencyTable {
    fn eq(&self, other: &Self) -> bool {
        self.counts == other.counts
    }
}

impl FrequencyTable {
    pub fn new(size: usize) -> Self {
        FrequencyTable { counts: vec![0; size], reads: AtomicU64::new(0) }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Adds one count per occurrence of each selected index.
    pub fn update(&mut self, selections: &[Selection]) {
        for s in selections {
            for &i in &s.indices {
                self.counts[i] += 1;
            }
        }
    }

    /// `h_i = count_i / Σ count`; all zeros when nothing has been counted.
    pub fn normalized(&self) -> Vec<f64> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// How many times [`normalized`](Self::normalized) has been called.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}
