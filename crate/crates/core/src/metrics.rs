//! Confusion matrices, summary metrics, and per-letter / per-pair tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::labels::{LetterClass, PositionClass};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::InvalidConfig(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        (0..self.k).map(|p| self.get(t, p)).sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, p)).sum()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidConfig("label sequences differ in length".into()));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::InvalidConfig(format!("label out of range for {k} classes")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Per-class values weighted by true-class support.
    #[default]
    Weighted,
    /// Unweighted mean over classes with non-zero support.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy plus averaged precision/recall/F1; classes without support are skipped.
pub fn summary_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<Summary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidConfig("confusion matrix is empty".into()));
    }
    let (mut p_sum, mut r_sum, mut f_sum, mut w_sum) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..cm.classes() {
        let support = cm.row_sum(c);
        if support == 0 {
            continue;
        }
        let tp = cm.get(c, c) as f64;
        let predicted = cm.col_sum(c);
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = match averaging {
            Averaging::Weighted => support as f64,
            Averaging::Macro => 1.0,
        };
        p_sum += w * precision;
        r_sum += w * recall;
        f_sum += w * f1;
        w_sum += w;
    }
    Ok(Summary {
        accuracy: cm.trace() as f64 / total as f64,
        precision: p_sum / w_sum,
        recall: r_sum / w_sum,
        f1: f_sum / w_sum,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub letter: LetterClass,
    pub position: PositionClass,
    pub support: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterRow {
    pub letter: LetterClass,
    pub support: usize,
    pub accuracy: f64,
}

fn check_aligned(n: usize, others: &[usize]) -> Result<()> {
    if others.iter().any(|&m| m != n) {
        return Err(Error::InvalidConfig("sequences are not aligned".into()));
    }
    Ok(())
}

/// A sample counts for its true pair only when both heads are right.
pub fn per_pair_accuracy(
    truth: &[(LetterClass, PositionClass)],
    letter_preds: &[usize],
    position_preds: &[usize],
) -> Result<Vec<PairRow>> {
    if truth.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    check_aligned(truth.len(), &[letter_preds.len(), position_preds.len()])?;
    let mut tally: BTreeMap<(LetterClass, PositionClass), (usize, usize)> = BTreeMap::new();
    for (i, &(l, p)) in truth.iter().enumerate() {
        let e = tally.entry((l, p)).or_default();
        e.0 += 1;
        if letter_preds[i] == l.index() && position_preds[i] == p.index() {
            e.1 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|((letter, position), (support, correct))| PairRow {
            letter,
            position,
            support,
            accuracy: correct as f64 / support as f64,
        })
        .collect())
}

/// Letter-head accuracy per true letter; letters absent from `truth` are omitted.
pub fn per_letter_accuracy(truth: &[LetterClass], letter_preds: &[usize]) -> Result<Vec<LetterRow>> {
    check_aligned(truth.len(), &[letter_preds.len()])?;
    let mut tally: BTreeMap<LetterClass, (usize, usize)> = BTreeMap::new();
    for (&l, &p) in truth.iter().zip(letter_preds) {
        let e = tally.entry(l).or_default();
        e.0 += 1;
        if p == l.index() {
            e.1 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|(letter, (support, correct))| LetterRow {
            letter,
            support,
            accuracy: correct as f64 / support as f64,
        })
        .collect())
}

/// Class-weighted mean of `-ln p[y]` over probability rows, the counterpart of
/// the training loss for models that only expose probabilities.
pub fn probability_cross_entropy(rows: &[&[f64]], labels: &[usize], weights: &[f64]) -> Result<f64> {
    check_aligned(rows.len(), &[labels.len()])?;
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &y) in rows.iter().zip(labels) {
        let (Some(&p), Some(&w)) = (row.get(y), weights.get(y)) else {
            return Err(Error::InvalidConfig(format!("label {y} out of range")));
        };
        num -= w * p.max(f64::MIN_POSITIVE).ln();
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub letter: TaskMetrics,
    pub position: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Overall,
    pub per_letter: Vec<LetterRow>,
    pub per_pair: Vec<PairRow>,
}

/// Predictions of both heads for an evaluated set.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub truth: Vec<(LetterClass, PositionClass)>,
    pub letter: Vec<usize>,
    pub position: Vec<usize>,
}

fn task(cm: &ConfusionMatrix, averaging: Averaging, loss: Option<f64>) -> Result<TaskMetrics> {
    let s = summary_metrics(cm, averaging)?;
    Ok(TaskMetrics {
        accuracy: s.accuracy,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        test_loss: loss,
    })
}

/// Round half away from zero to `d` decimals.
pub fn round_to(v: f64, d: i32) -> f64 {
    let f = 10f64.powi(d);
    (v * f).round() / f
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PER_LETTER_CSV: &str = "per_letter.csv";
pub const PER_PAIR_CSV: &str = "per_pair.csv";

/// How rates are rendered in CSV tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RateFormat {
    /// `0.9638`
    #[default]
    Fraction,
    /// `96.38%`
    Percent,
}

impl RateFormat {
    /// Rounds half away from zero first; `format!` alone would round exact ties to even.
    fn render(self, v: f64) -> String {
        let v = round_to(v, 4);
        match self {
            Self::Fraction => format!("{v:.4}"),
            Self::Percent => format!("{:.2}%", v * 100.0),
        }
    }

    fn parse(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
        match s.strip_suffix('%') {
            // Percent strings carry two decimals, so the fraction has four.
            Some(p) => p.trim().parse::<f64>().map(|v| round_to(v / 100.0, 4)),
            None => s.trim().parse(),
        }
    }
}

impl EvalReport {
    /// `letter_loss`/`position_loss` are the per-head test losses when known.
    pub fn build(preds: &Predictions, losses: Option<(f64, f64)>, averaging: Averaging) -> Result<Self> {
        let n = preds.truth.len();
        if n == 0 {
            return Err(Error::InvalidConfig("empty test set".into()));
        }
        check_aligned(n, &[preds.letter.len(), preds.position.len()])?;
        let true_l: Vec<usize> = preds.truth.iter().map(|t| t.0.index()).collect();
        let true_p: Vec<usize> = preds.truth.iter().map(|t| t.1.index()).collect();
        let cm_l = confusion(&true_l, &preds.letter, crate::labels::NUM_LETTERS)?;
        let cm_p = confusion(&true_p, &preds.position, crate::labels::NUM_POSITIONS)?;
        let letters: Vec<LetterClass> = preds.truth.iter().map(|t| t.0).collect();
        Ok(Self {
            overall: Overall {
                letter: task(&cm_l, averaging, losses.map(|l| l.0))?,
                position: task(&cm_p, averaging, losses.map(|l| l.1))?,
            },
            per_letter: per_letter_accuracy(&letters, &preds.letter)?,
            per_pair: per_pair_accuracy(&preds.truth, &preds.letter, &preds.position)?,
        })
    }

    /// Same report with every real rounded to four decimals.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| round_to(v, 4);
        let t = |m: &TaskMetrics| TaskMetrics {
            accuracy: r(m.accuracy),
            precision: r(m.precision),
            recall: r(m.recall),
            f1: r(m.f1),
            test_loss: m.test_loss.map(r),
        };
        Self {
            overall: Overall {
                letter: t(&self.overall.letter),
                position: t(&self.overall.position),
            },
            per_letter: self
                .per_letter
                .iter()
                .map(|l| LetterRow {
                    accuracy: r(l.accuracy),
                    ..l.clone()
                })
                .collect(),
            per_pair: self
                .per_pair
                .iter()
                .map(|p| PairRow {
                    accuracy: r(p.accuracy),
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.rounded())? + "\n").at(path)
    }

    /// Writes `report.csv`, `per_letter.csv` and `per_pair.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path, format: RateFormat) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(REPORT_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["task", "accuracy", "precision", "recall", "f1", "test_loss"])?;
        for (name, m) in [("letter", &self.overall.letter), ("position", &self.overall.position)] {
            w.write_record([
                name.to_string(),
                format.render(m.accuracy),
                format.render(m.precision),
                format.render(m.recall),
                format.render(m.f1),
                m.test_loss.map(|l| format!("{l:.4}")).unwrap_or_default(),
            ])?;
        }
        w.flush().at(&path)?;

        let path = dir.join(PER_LETTER_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["letter", "support", "accuracy"])?;
        for l in &self.per_letter {
            w.write_record([
                l.letter.name().to_string(),
                l.support.to_string(),
                format.render(l.accuracy),
            ])?;
        }
        w.flush().at(&path)?;

        let path = dir.join(PER_PAIR_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["letter", "position", "support", "accuracy"])?;
        for p in &self.per_pair {
            w.write_record([
                p.letter.name().to_string(),
                p.position.code().to_string(),
                p.support.to_string(),
                format.render(p.accuracy),
            ])?;
        }
        w.flush().at(&path)?;
        Ok(())
    }

    /// Writes the JSON report and the CSV tables.
    pub fn write_all(&self, dir: &Path, format: RateFormat) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.write_json(&dir.join(REPORT_JSON))?;
        self.write_csv(dir, format)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Reads the three CSV tables back (fraction or percent rates).
    pub fn read_csv(dir: &Path) -> Result<Self> {
        let fmt = |path: &Path, reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let path = dir.join(REPORT_CSV);
        let mut r = csv::Reader::from_path(&path)?;
        let mut tasks = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| RateFormat::parse(&rec[i]).map_err(|e| fmt(&path, e.to_string()));
            let loss = if rec[5].is_empty() {
                None
            } else {
                Some(rec[5].parse::<f64>().map_err(|e| fmt(&path, e.to_string()))?)
            };
            tasks.insert(
                rec[0].to_string(),
                TaskMetrics {
                    accuracy: num(1)?,
                    precision: num(2)?,
                    recall: num(3)?,
                    f1: num(4)?,
                    test_loss: loss,
                },
            );
        }
        let mut take = |name: &str| {
            tasks
                .remove(name)
                .ok_or_else(|| fmt(&path, format!("missing {name} row")))
        };
        let overall = Overall {
            letter: take("letter")?,
            position: take("position")?,
        };

        let path = dir.join(PER_LETTER_CSV);
        let mut per_letter = Vec::new();
        for rec in csv::Reader::from_path(&path)?.records() {
            let rec = rec?;
            per_letter.push(LetterRow {
                letter: rec[0].parse().map_err(|e: String| fmt(&path, e))?,
                support: rec[1]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| fmt(&path, e.to_string()))?,
                accuracy: RateFormat::parse(&rec[2]).map_err(|e| fmt(&path, e.to_string()))?,
            });
        }

        let path = dir.join(PER_PAIR_CSV);
        let mut per_pair = Vec::new();
        for rec in csv::Reader::from_path(&path)?.records() {
            let rec = rec?;
            per_pair.push(PairRow {
                letter: rec[0].parse().map_err(|e: String| fmt(&path, e))?,
                position: rec[1].parse().map_err(|e: String| fmt(&path, e))?,
                support: rec[2]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| fmt(&path, e.to_string()))?,
                accuracy: RateFormat::parse(&rec[3]).map_err(|e| fmt(&path, e.to_string()))?,
            });
        }
        Ok(Self {
            overall,
            per_letter,
            per_pair,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 1));
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        assert!(confusion(&[2], &[0], 2).is_err());
    }

    #[test]
    fn summary_examples() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        let s = summary_metrics(&cm, Averaging::Weighted).unwrap();
        assert!((s.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        // precision per class (1, 0.5), weighted by supports (2, 1)
        assert!((s.precision - (2.0 * 1.0 + 0.5) / 3.0).abs() < 1e-15);
        let m = summary_metrics(&cm, Averaging::Macro).unwrap();
        assert!((m.recall - 0.75).abs() < 1e-15);
        let diag = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let s = summary_metrics(&diag, Averaging::Weighted).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(summary_metrics(&confusion(&[], &[], 2).unwrap(), Averaging::Weighted).is_err());
    }

    #[test]
    fn per_letter_omits_absent_letters() {
        let alef = LetterClass::from_name("Alef").unwrap();
        let rows = per_letter_accuracy(&[alef; 4], &[0, 0, 0, 3]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracy, 0.75);
    }

    #[test]
    fn percent_rendering_parses_back() {
        assert_eq!(RateFormat::Percent.render(0.96384), "96.38%");
        assert_eq!(RateFormat::parse("96.38%").unwrap(), 0.9638);
        assert_eq!(RateFormat::Fraction.render(0.96384), "0.9638");
    }
}
