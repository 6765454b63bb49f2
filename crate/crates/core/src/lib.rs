//! A frozen vision transformer steered by a key-value prompt pool for
//! continual learning, plus the streams, baselines and metrics used to
//! evaluate it.

pub mod backbone;
pub mod baseline;
pub mod classifier;
pub mod data;
pub mod learner;
pub mod metrics;
pub mod prompt;
pub mod rehearsal;
mod error;
pub mod harness;
pub mod idx;
pub mod rng;
pub mod stream;
pub mod synthetic;
pub mod weights;

pub use backbone::{Backbone, BackboneConfig, BoundBackbone, PretrainConfig, PretrainReport};
pub use classifier::Classifier;
pub use data::{Sample, SampleId};
pub use error::{Error, Result};
pub use learner::{Learner, LearnerConfig, LossParts, StepReport, TrainReport, Variant};
pub use prompt::{FrequencyTable, Lookup, PoolConfig, PromptPool, Selection};
pub use rehearsal::RehearsalBuffer;
pub use baseline::{FrozenProbe, ProbeConfig};
pub use harness::ContinualLearner;
pub use metrics::{average_accuracy, forgetting, AccuracyMatrix, Forgetting};
pub use stream::{GaussianStream, Setting, TaskStream};
pub use synthetic::{Generator, GeneratorConfig};
