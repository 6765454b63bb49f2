//! Prompt-usage tables derived from a run's selection histogram.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::record::Histogram;

/// The `n` most used prompts of a row, ties broken by lower index; unused
/// prompts never count.
pub fn top_prompts(row: &[u64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0).collect();
    idx.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise Jaccard overlap of the rows' top-N prompt sets.
pub fn jaccard_table(h: &Histogram) -> Vec<Vec<f64>> {
    let tops: Vec<Vec<usize>> = h.rows.iter().map(|r| top_prompts(r, h.top_n)).collect();
    tops.iter().map(|a| tops.iter().map(|b| jaccard(a, b)).collect()).collect()
}

/// Mean over unordered pairs of distinct rows; `None` with fewer than two rows.
pub fn mean_pairwise_jaccard(h: &Histogram) -> Option<f64> {
    let table = jaccard_table(h);
    let t = table.len();
    if t < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            total += table[i][j];
        }
    }
    Some(total / (t * (t - 1) / 2) as f64)
}

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let as_io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(as_io)?;
    for r in rows {
        w.write_record(&r).map_err(as_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the raw counts to `path` and the Jaccard table next to it as
/// `<stem>-jaccard.csv`; returns the second path.
pub fn emit(h: &Histogram, path: &Path) -> Result<PathBuf> {
    let m = h.rows.first().map_or(0, Vec::len);
    let header = std::iter::once("task".to_string()).chain((0..m).map(|i| i.to_string())).collect();
    let rows = h
        .rows
        .iter()
        .enumerate()
        .map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(u64::to_string)).collect())
        .collect();
    write_rows(path, header, rows)?;

    let table = jaccard_table(h);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("histogram");
    let jpath = path.with_file_name(format!("{stem}-jaccard.csv"));
    let header = std::iter::once("task".to_string()).chain((0..table.len()).map(|i| i.to_string())).collect();
    let rows = table
        .iter()
        .enumerate()
        .map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(|v| format!("{v:.4}"))).collect())
        .collect();
    write_rows(&jpath, header, rows)?;
    Ok(jpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_prompts_break_ties_by_index() {
        assert_eq!(top_prompts(&[3, 5, 5, 0, 1], 2), vec![1, 2]);
        assert_eq!(top_prompts(&[3, 5, 5, 0, 1], 3), vec![0, 1, 2]);
        assert_eq!(top_prompts(&[0, 0, 2], 2), vec![2]);
    }

    #[test]
    fn jaccard_of_identical_and_disjoint_sets() {
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
    }

    #[test]
    fn mean_over_pairs() {
        let h = Histogram { top_n: 1, rows: vec![vec![5, 0], vec![4, 1], vec![0, 3]] };
        assert_eq!(mean_pairwise_jaccard(&h), Some(1.0 / 3.0));
        assert_eq!(mean_pairwise_jaccard(&Histogram { top_n: 1, rows: vec![vec![1]] }), None);
    }
}
