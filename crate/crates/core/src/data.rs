use serde::{Deserialize, Serialize};

/// Where a sample came from: generator class, instance index, and domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub class: usize,
    pub index: u64,
    pub domain: u32,
}

/// One labeled image, stored height × width × channels, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    /// Index into the stream's class vocabulary.
    pub label: usize,
    pub pixels: Vec<f32>,
}

pub fn labels(batch: &[&Sample]) -> Vec<usize> {
    batch.iter().map(|s| s.label).collect()
}
