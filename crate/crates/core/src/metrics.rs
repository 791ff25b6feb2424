//! Accuracy bookkeeping and the incremental-learning summary metrics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator magnitude below which an oracle channel is left out of the
/// deviation mean.
pub const ORACLE_EPS: f64 = 1e-8;

/// Per-channel Grad-CAM importances of the base classes, before and after
/// the incremental stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCamRecord {
    pub classes: Vec<u32>,
    /// `alpha_base[k]` for `classes[k]`, from the task-0 model.
    pub alpha_base: Vec<Vec<f64>>,
    /// Same classes, from the final model.
    pub alpha_final: Vec<Vec<f64>>,
}

/// Outcome of one pass over a task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub oracle: bool,
    pub seed: u64,
    pub task_classes: Vec<Vec<u32>>,
    /// `acc[t][i]`: accuracy on task `i`'s test classes after task `t`
    /// (mean of that task's per-class accuracies), for `i <= t`.
    pub acc: Vec<Vec<f64>>,
    /// Accuracy on every seen class after task `t`, weighted by class count.
    pub overall: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// SHA-256 of the model snapshot after each task.
    pub checksums: Vec<String>,
    pub exemplars: BTreeMap<u32, Vec<usize>>,
    pub gradcam: Option<GradCamRecord>,
}

impl RunRecord {
    pub fn tasks(&self) -> usize {
        self.acc.len()
    }

    /// Append a row and the derived overall accuracy.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.acc.len();
        if row.len() != t + 1 || t >= self.task_classes.len() {
            return Err(Error::contract(format!("row {t} has {} cells", row.len())));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract(format!("accuracy outside [0, 1] in row {t}")));
        }
        self.overall.push(weighted_overall(&row, &self.task_classes[..=t]));
        self.acc.push(row);
        Ok(())
    }

    fn complete(&self) -> Result<()> {
        if self.acc.is_empty() || self.acc.len() != self.task_classes.len() {
            return Err(Error::contract(format!(
                "record holds {} of {} tasks",
                self.acc.len(),
                self.task_classes.len()
            )));
        }
        Ok(())
    }

    pub fn aia(&self) -> Result<f64> {
        self.complete()?;
        aia(&self.overall)
    }

    pub fn bt(&self) -> Result<f64> {
        self.complete()?;
        bt(&self.acc)
    }

    pub fn fgt(&self) -> Result<f64> {
        self.complete()?;
        fgt(&self.acc)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.overall.last().copied()
    }
}

fn weighted_overall(row: &[f64], classes: &[Vec<u32>]) -> f64 {
    let total: usize = classes.iter().map(Vec::len).sum();
    row.iter()
        .zip(classes)
        .map(|(a, c)| a * c.len() as f64)
        .sum::<f64>()
        / total as f64
}

fn check_triangle(acc: &[Vec<f64>]) -> Result<()> {
    for (t, row) in acc.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::contract(format!("row {t} has {} entries, expected {}", row.len(), t + 1)));
        }
    }
    Ok(())
}

/// Average incremental accuracy in percent: mean of the overall accuracies,
/// base task included.
pub fn aia(overall: &[f64]) -> Result<f64> {
    if overall.is_empty() {
        return Err(Error::contract("no task accuracies"));
    }
    Ok(100.0 * overall.iter().sum::<f64>() / overall.len() as f64)
}

/// Backward transfer in percent, `mean_i (a[T][i] - a[i][i])` over `i < T`.
pub fn bt(acc: &[Vec<f64>]) -> Result<f64> {
    check_triangle(acc)?;
    let t = acc.len().saturating_sub(1);
    if t == 0 {
        return Err(Error::contract("backward transfer needs at least two tasks"));
    }
    let last = &acc[t];
    Ok(100.0 * (0..t).map(|i| last[i] - acc[i][i]).sum::<f64>() / t as f64)
}

/// Forgetting in percent: mean over `i < T` of the drop from task `i`'s best
/// accuracy (over `t` in `i..=T`) to its final accuracy.
pub fn fgt(acc: &[Vec<f64>]) -> Result<f64> {
    check_triangle(acc)?;
    let t = acc.len().saturating_sub(1);
    if t == 0 {
        return Err(Error::contract("forgetting needs at least two tasks"));
    }
    let last = &acc[t];
    let total: f64 = (0..t)
        .map(|i| {
            let best = (i..=t).map(|s| acc[s][i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum();
    Ok(100.0 * total / t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDeviation {
    pub value: f64,
    /// Channels whose oracle evolution was too small to divide by.
    pub excluded: Vec<usize>,
}

/// `mean_j (1 - (mT_j - m0_j) / (oT_j - o0_j))^2` over channels whose
/// oracle evolution `|oT_j - o0_j|` is at least [`ORACLE_EPS`].
pub fn oracle_deviation(m_final: &[f64], m_base: &[f64], o_final: &[f64], o_base: &[f64]) -> Result<OracleDeviation> {
    let n = m_final.len();
    if n == 0 || [m_base.len(), o_final.len(), o_base.len()].iter().any(|&l| l != n) {
        return Err(Error::dim("oracle_deviation", "importance vectors differ in length or are empty"));
    }
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    for j in 0..n {
        let den = o_final[j] - o_base[j];
        if den.abs() < ORACLE_EPS {
            excluded.push(j);
            continue;
        }
        let ratio = (m_final[j] - m_base[j]) / den;
        sum += (1.0 - ratio) * (1.0 - ratio);
    }
    let used = n - excluded.len();
    if used == 0 {
        return Err(Error::guard("oracle_deviation", "oracle evolution is ~0 on every channel"));
    }
    Ok(OracleDeviation {
        value: sum / used as f64,
        excluded,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        source: std::io::Error::other(e),
    }
}

/// One row per `(t, i)` accuracy cell.
pub fn write_accuracy_csv<W: Write>(out: W, runs: &[(String, &RunRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "mode", "oracle", "seed", "t", "i", "accuracy"]).map_err(csv_err)?;
    for (name, r) in runs {
        for (t, row) in r.acc.iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    r.mode.clone(),
                    r.oracle.to_string(),
                    r.seed.to_string(),
                    t.to_string(),
                    i.to_string(),
                    format!("{a:.6}"),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
