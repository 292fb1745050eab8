//! Confusion-matrix metrics for the area and moment maps.

use std::fmt::Write as _;

use crate::data::ChangeLabels;
use crate::error::{CaimError, Result};

/// `K × K` counts, rows = reference, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(CaimError::Label(format!("class pair ({truth}, {pred}) outside 0..{}", self.k)));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(CaimError::Metrics(format!("merging {}-class into {}-class matrix", other.k, self.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn overall_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total() as f64
    }

    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        let po = self.overall_accuracy();
        let pe: f64 = (0..self.k).map(|c| self.row_sum(c) as f64 * self.col_sum(c) as f64).sum::<f64>() / (n * n);
        if pe >= 1.0 {
            // a single class everywhere in both maps: perfect agreement by convention
            return if po >= 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    /// `(precision, recall, f1)` of class `c`; zero denominators give 0 and `ok = false`.
    pub fn class_scores(&self, c: usize) -> (f64, f64, f64, bool) {
        let tp = self.get(c, c) as f64;
        let (col, row) = (self.col_sum(c) as f64, self.row_sum(c) as f64);
        let mut ok = true;
        let pre = if col > 0.0 { tp / col } else { ok = false; 0.0 };
        let rec = if row > 0.0 { tp / row } else { ok = false; 0.0 };
        let f1 = if pre + rec > 0.0 { 2.0 * pre * rec / (pre + rec) } else { 0.0 };
        (pre, rec, f1, ok)
    }
}

/// Percentages (×100).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Scores {
    pub oa: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub area: Scores,
    /// F1/Pre/Rec macro-averaged over moment classes present in the reference.
    pub moment: Scores,
    /// As `moment`, leaving out class 0 from the averages.
    pub moment_changed: Scores,
    pub area_confusion: ConfusionMatrix,
    pub moment_confusion: ConfusionMatrix,
    /// Classes whose precision or recall had a zero denominator.
    pub flags: Vec<String>,
}

fn macro_scores(cm: &ConfusionMatrix, classes: &[usize], flags: &mut Vec<String>, tag: &str) -> Scores {
    let (mut pre, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for &c in classes {
        let (p, r, f, ok) = cm.class_scores(c);
        if !ok {
            flags.push(format!("{tag}: class {c} has a zero denominator"));
        }
        pre += p;
        rec += r;
        f1 += f;
    }
    let n = classes.len().max(1) as f64;
    Scores {
        oa: 100.0 * cm.overall_accuracy(),
        pre: 100.0 * pre / n,
        rec: 100.0 * rec / n,
        f1: 100.0 * f1 / n,
        kappa: 100.0 * cm.kappa(),
    }
}

impl MetricsReport {
    pub fn from_confusions(area: ConfusionMatrix, moment: ConfusionMatrix) -> Result<Self> {
        if area.total() == 0 || moment.total() == 0 {
            return Err(CaimError::Metrics("no pixels to score".into()));
        }
        if area.k != 2 {
            return Err(CaimError::Metrics(format!("area matrix must be 2-class, got {}", area.k)));
        }
        let mut flags = Vec::new();
        let area_scores = macro_scores(&area, &[1], &mut flags, "area");
        let present: Vec<usize> = (0..moment.k).filter(|&c| moment.row_sum(c) > 0).collect();
        let changed: Vec<usize> = present.iter().copied().filter(|&c| c != 0).collect();
        let moment_scores = macro_scores(&moment, &present, &mut flags, "moment");
        let mut ignore = Vec::new();
        let moment_changed = macro_scores(&moment, &changed, &mut ignore, "moment");
        Ok(MetricsReport {
            area: area_scores,
            moment: moment_scores,
            moment_changed,
            area_confusion: area,
            moment_confusion: moment,
            flags,
        })
    }

    /// Key–value text, one `key = value` per line, fixed formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (tag, sc) in [("area", &self.area), ("moment", &self.moment), ("moment_changed", &self.moment_changed)] {
            for (k, v) in [("oa", sc.oa), ("f1", sc.f1), ("kappa", sc.kappa), ("pre", sc.pre), ("rec", sc.rec)] {
                let _ = writeln!(s, "{tag}.{k} = {v:.4}");
            }
        }
        for (tag, cm) in [("area", &self.area_confusion), ("moment", &self.moment_confusion)] {
            for r in 0..cm.k {
                let row: Vec<String> = (0..cm.k).map(|c| cm.get(r, c).to_string()).collect();
                let _ = writeln!(s, "{tag}.confusion.{r} = {}", row.join(" "));
            }
        }
        for f in &self.flags {
            let _ = writeln!(s, "flag = {f}");
        }
        s
    }
}

/// Accumulates both confusion matrices over many maps.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    pub area: ConfusionMatrix,
    pub moment: ConfusionMatrix,
}

impl MetricsAccumulator {
    pub fn new(t_len: usize) -> Self {
        MetricsAccumulator { area: ConfusionMatrix::new(2), moment: ConfusionMatrix::new(t_len) }
    }

    pub fn add(&mut self, pred_moment: &[u16], pred_area: &[u8], labels: &ChangeLabels) -> Result<()> {
        let n = labels.moment.len();
        if pred_moment.len() != n || pred_area.len() != n {
            return Err(CaimError::Metrics(format!(
                "prediction sizes {}/{} for {} reference pixels",
                pred_moment.len(),
                pred_area.len(),
                n
            )));
        }
        for i in 0..n {
            self.moment.add(labels.moment[i] as usize, pred_moment[i] as usize)?;
            self.area.add(labels.area[i] as usize, pred_area[i] as usize)?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        MetricsReport::from_confusions(self.area.clone(), self.moment.clone())
    }
}

pub fn compute_metrics(pred_moment: &[u16], pred_area: &[u8], labels: &ChangeLabels) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(labels.t_len);
    acc.add(pred_moment, pred_area, labels)?;
    acc.report()
}
