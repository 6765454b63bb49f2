//! Accuracy matrix and the two summary metrics derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[t][i]`: accuracy on task `i` after training through task `t`, for
/// `i ≤ t`. Row `t` therefore holds `t + 1` entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(Error::Input(format!("row {t} needs {} entries, got {}", t + 1, row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("accuracy {v} outside [0, 1] in row {t}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }
}

/// Mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.last_row().ok_or_else(|| Error::Input("empty accuracy matrix".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forgetting {
    /// A single task has nothing to forget.
    NotApplicable,
    Value(f64),
}

impl Forgetting {
    pub fn value(self) -> Option<f64> {
        match self {
            Forgetting::NotApplicable => None,
            Forgetting::Value(v) => Some(v),
        }
    }
}

/// Mean over tasks `i < T` of the best earlier accuracy on `i` minus the
/// final one. Terms may be negative unless `clamp` is set.
pub fn forgetting(m: &AccuracyMatrix, clamp: bool) -> Result<Forgetting> {
    let t = m.tasks();
    match t {
        0 => Err(Error::Input("empty accuracy matrix".into())),
        1 => Ok(Forgetting::NotApplicable),
        _ => {
            let last = t - 1;
            let total: f64 = (0..last)
                .map(|i| {
                    let best = (i..last).map(|s| m.get(s, i)).fold(f64::NEG_INFINITY, f64::max);
                    let drop = best - m.get(last, i);
                    if clamp {
                        drop.max(0.0)
                    } else {
                        drop
                    }
                })
                .sum();
            Ok(Forgetting::Value(total / last as f64))
        }
    }
}
