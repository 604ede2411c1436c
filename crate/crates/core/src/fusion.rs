//! Confidence-weighted fusion of two models' probability vectors.
//!
//! Each model's confidence is its largest class probability; the ensemble
//! vector is the confidence-weighted average, computed per task.

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::labels::{NUM_LETTERS, NUM_POSITIONS};
use crate::models::{check_distribution, DualDistribution};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Largest probability of a valid distribution.
pub fn confidence(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter().copied().fold(0.0, f64::max))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// `(c_E·p_E + c_V·p_V) / (c_E + c_V + eps)` elementwise.
pub fn fuse(p_e: &[f64], p_v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if p_e.len() != p_v.len() {
        return Err(Error::MalformedDistribution(format!(
            "length mismatch: {} vs {}",
            p_e.len(),
            p_v.len()
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be non-negative, got {eps}")));
    }
    let (c_e, c_v) = (confidence(p_e)?, confidence(p_v)?);
    let denom = c_e + c_v + eps;
    Ok(p_e.iter().zip(p_v).map(|(a, b)| (c_e * a + c_v * b) / denom).collect())
}

/// Two models' outputs for the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput {
    pub dist_e: DualDistribution,
    pub dist_v: DualDistribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub ensemble_letter: Vec<f64>,
    pub ensemble_position: Vec<f64>,
    pub letter_class: usize,
    pub position_class: usize,
    /// `(c_letter_E, c_letter_V, c_pos_E, c_pos_V)`.
    pub confidences: [f64; 4],
}

impl FusionResult {
    pub fn distribution(&self) -> DualDistribution {
        DualDistribution {
            letter: self.ensemble_letter.clone(),
            position: self.ensemble_position.clone(),
        }
    }
}

/// Fuses the letter and position tasks independently and takes each argmax.
pub fn ensemble_predict(input: &FusionInput, eps: f64) -> Result<FusionResult> {
    let (e, v) = (&input.dist_e, &input.dist_v);
    let ensemble_letter = fuse(&e.letter, &v.letter, eps)?;
    let ensemble_position = fuse(&e.position, &v.position, eps)?;
    Ok(FusionResult {
        letter_class: argmax(&ensemble_letter),
        position_class: argmax(&ensemble_position),
        confidences: [
            confidence(&e.letter)?,
            confidence(&v.letter)?,
            confidence(&e.position)?,
            confidence(&v.position)?,
        ],
        ensemble_letter,
        ensemble_position,
    })
}

/// One row of a prediction dump.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub dist: DualDistribution,
}

/// Header of a prediction dump: `sample_id, p_letter_0..27, p_pos_0..3`.
pub fn prediction_header() -> Vec<String> {
    std::iter::once("sample_id".to_string())
        .chain((0..NUM_LETTERS).map(|i| format!("p_letter_{i}")))
        .chain((0..NUM_POSITIONS).map(|i| format!("p_pos_{i}")))
        .collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(prediction_header())?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone()];
        // Shortest round-trip representation keeps dumps lossless.
        rec.extend(r.dist.letter.iter().chain(&r.dist.position).map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != prediction_header() {
        return Err(fmt("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt(format!("row {}: {e}", line + 1)))?;
        let dist = DualDistribution::new(vals[..NUM_LETTERS].to_vec(), vals[NUM_LETTERS..].to_vec())
            .map_err(|e| fmt(format!("row {}: {e}", line + 1)))?;
        rows.push(PredictionRow {
            sample_id: rec[0].to_string(),
            dist,
        });
    }
    Ok(rows)
}

/// Fuses two dumps row by row; sample ids must line up.
pub fn fuse_predictions(
    a: &[PredictionRow],
    b: &[PredictionRow],
    eps: f64,
) -> Result<Vec<(PredictionRow, FusionResult)>> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig(format!(
            "dumps have {} and {} rows",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.sample_id != y.sample_id {
                return Err(Error::InvalidConfig(format!(
                    "sample ids differ: {:?} vs {:?}",
                    x.sample_id, y.sample_id
                )));
            }
            let res = ensemble_predict(
                &FusionInput {
                    dist_e: x.dist.clone(),
                    dist_v: y.dist.clone(),
                },
                eps,
            )?;
            Ok((
                PredictionRow {
                    sample_id: x.sample_id.clone(),
                    dist: res.distribution(),
                },
                res,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.25; 4]).unwrap(), 0.25);
        assert_eq!(confidence(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(confidence(&[0.7, 0.2, 0.1]).unwrap(), 0.7);
        assert!(confidence(&[0.7, 0.7]).is_err());
        assert!(confidence(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn worked_example() {
        let f = fuse(&[0.7, 0.2, 0.1], &[0.2, 0.5, 0.3], 0.0).unwrap();
        let expected = [0.59 / 1.2, 0.39 / 1.2, 0.22 / 1.2];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&f), 0);
        assert!(fuse(&[1.0], &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
