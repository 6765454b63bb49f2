//! Learner-agnostic training and evaluation over streams.

use crate::data::Sample;
use crate::error::Result;
use crate::learner::{Learner, TrainReport};
use crate::metrics::AccuracyMatrix;
use crate::stream::TaskStream;

/// Anything that learns from a sequence of tasks or batches and predicts
/// labels over the full vocabulary.
pub trait ContinualLearner {
    /// Trains on one task with a known boundary.
    fn train_task(&mut self, data: &[Sample], task: usize) -> Result<TrainReport>;
    /// One update on a single batch, without boundary information.
    fn train_batch(&mut self, batch: &[&Sample]) -> Result<()>;
    fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>>;
}

impl ContinualLearner for Learner<f32> {
    fn train_task(&mut self, data: &[Sample], task: usize) -> Result<TrainReport> {
        Learner::train_task(self, data, task)
    }

    fn train_batch(&mut self, batch: &[&Sample]) -> Result<()> {
        self.train_step(batch).map(|_| ())
    }

    fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        Learner::predict(self, images)
    }
}

const EVAL_BATCH: usize = 64;

/// Fraction of `samples` predicted correctly.
pub fn accuracy<L: ContinualLearner + ?Sized>(learner: &L, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&[f32]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let pred = learner.predict(&images)?;
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Row `t` of the accuracy matrix: accuracy on tasks `0..=t`.
pub fn evaluate_row<L: ContinualLearner + ?Sized>(learner: &L, stream: &TaskStream, t: usize) -> Result<Vec<f64>> {
    if let Some(shared) = stream.shared_test() {
        let acc = accuracy(learner, shared)?;
        return Ok(vec![acc; t + 1]);
    }
    (0..=t).map(|i| accuracy(learner, &stream.tasks()[i].test)).collect()
}

/// Trains through every task of `stream`, evaluating after each one.
pub fn run_stream<L: ContinualLearner + ?Sized>(
    learner: &mut L,
    stream: &TaskStream,
) -> Result<(AccuracyMatrix, Vec<TrainReport>)> {
    let mut matrix = AccuracyMatrix::new();
    let mut reports = Vec::with_capacity(stream.tasks().len());
    for (t, task) in stream.tasks().iter().enumerate() {
        reports.push(learner.train_task(&task.train, t)?);
        matrix.push_row(evaluate_row(learner, stream, t)?)?;
    }
    Ok((matrix, reports))
}
