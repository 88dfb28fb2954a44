//! Per-sample softmax score files and two-stream fusion.
//!
//! Score file format: one line per sample, `id<TAB>s_0 s_1 … s_{K−1}`,
//! each score printed with 9 significant digits (which round-trips any
//! single-precision score exactly).

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn num_classes(&self) -> usize {
        self.scores.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|row| argmax(row)).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Canonicalizes a score to the value of its 9-significant-digit decimal
/// form — the score file's precision. Tables built from canonical values
/// round-trip through files bit-exactly; 9 digits preserve any
/// single-precision score.
pub fn canon9(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap()
}

pub fn write_scores(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut out = String::new();
    for (id, row) in table.ids.iter().zip(&table.scores) {
        let formatted: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&format!("{id}\t{}\n", formatted.join(" ")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path)?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!("score file line {}: missing tab", lineno + 1))
        })?;
        let row: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::format(format!("score file line {}: bad score '{t}'", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if row.is_empty() {
            return Err(Error::format(format!(
                "score file line {}: no scores",
                lineno + 1
            )));
        }
        if let Some(first) = scores.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::format(format!(
                    "score file line {}: {} scores, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        ids.push(id.to_string());
        scores.push(row);
    }
    Ok(ScoreTable { ids, scores })
}

/// Weighted elementwise sum of two score tables; with unit weights this is
/// the exact sum. Sample ids must match in order.
pub fn fuse_scores(a: &ScoreTable, b: &ScoreTable, w_a: f64, w_b: f64) -> Result<ScoreTable> {
    if a.ids.len() != b.ids.len() {
        return Err(Error::invalid(format!(
            "fuse: {} vs {} samples",
            a.ids.len(),
            b.ids.len()
        )));
    }
    for (i, (x, y)) in a.ids.iter().zip(&b.ids).enumerate() {
        if x != y {
            return Err(Error::invalid(format!(
                "fuse: sample {i} id mismatch: '{x}' vs '{y}'"
            )));
        }
    }
    if a.num_classes() != b.num_classes() {
        return Err(Error::invalid(format!(
            "fuse: {} vs {} classes",
            a.num_classes(),
            b.num_classes()
        )));
    }
    let scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(&x, &y)| w_a * x + w_b * y)
                .collect()
        })
        .collect();
    Ok(ScoreTable {
        ids: a.ids.clone(),
        scores,
    })
}

/// Top-1 and top-5 accuracy of a score table against labels. Top-k counts
/// a hit when fewer than k classes score strictly higher than the target.
pub fn table_accuracy(table: &ScoreTable, labels: &[usize]) -> Result<(f64, f64)> {
    if table.ids.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy: {} scores vs {} labels",
            table.ids.len(),
            labels.len()
        )));
    }
    if table.ids.is_empty() {
        return Err(Error::invalid("accuracy: empty score table"));
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &label) in table.scores.iter().zip(labels) {
        if argmax(row) == label {
            top1 += 1;
        }
        let higher = row.iter().filter(|&&v| v > row[label]).count();
        if higher < 5 {
            top5 += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}
