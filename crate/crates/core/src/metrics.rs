//! Per-iteration metrics and weight-curve CSVs.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::ensemble::WeightPair;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "iteration,epoch,ce,kd_van,kd_aux,total,beta_mean,gamma_mean,meta_loss,error_subset_size,eval_acc";
pub const CURVES_HEADER: &str = "epoch,iteration,beta_mean,beta_std,gamma_mean,gamma_std,frac_low_uncertainty";

/// One training iteration. Optional fields are empty in the CSV when unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub ce: f64,
    pub kd_van: f64,
    pub kd_aux: f64,
    pub total: f64,
    pub beta_mean: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub meta_loss: Option<f64>,
    pub error_subset_size: Option<usize>,
    /// Filled on the last iteration of each epoch.
    pub eval_acc: Option<f64>,
}

/// Batch-level (or epoch-level) statistics of the applied weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub iteration: usize,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub frac_low_uncertainty: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CurveRow {
    pub fn from_batch(epoch: usize, iteration: usize, weights: &[WeightPair], frac_low_uncertainty: f64) -> Self {
        let (beta_mean, beta_std) = mean_std(weights.iter().map(|w| w.beta));
        let (gamma_mean, gamma_std) = mean_std(weights.iter().map(|w| w.gamma));
        Self {
            epoch,
            iteration,
            beta_mean,
            beta_std,
            gamma_mean,
            gamma_std,
            frac_low_uncertainty,
        }
    }
}

/// One row per epoch: mean and spread of that epoch's batch means; the
/// iteration column is the epoch's last iteration.
pub fn epoch_curves(rows: &[CurveRow]) -> Vec<CurveRow> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let epoch = rows[start].epoch;
        let end = start + rows[start..].iter().take_while(|r| r.epoch == epoch).count();
        let chunk = &rows[start..end];
        let (beta_mean, beta_std) = mean_std(chunk.iter().map(|r| r.beta_mean));
        let (gamma_mean, gamma_std) = mean_std(chunk.iter().map(|r| r.gamma_mean));
        let (frac, _) = mean_std(chunk.iter().map(|r| r.frac_low_uncertainty));
        out.push(CurveRow {
            epoch,
            iteration: chunk[chunk.len() - 1].iteration,
            beta_mean,
            beta_std,
            gamma_mean,
            gamma_std,
            frac_low_uncertainty: frac,
        });
        start = end;
    }
    out
}

/// CSV text with a header line, even when `rows` is empty.
pub fn to_csv<T: Serialize>(header: &str, rows: &[T]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("UTF-8 CSV");
    format!("{header}\n{body}")
}

pub fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    write_atomic(path, to_csv(header, rows).as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    if first != header {
        return Err(Error::parse(path, 0, format!("expected header `{header}`")));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| {
                let offset = e.position().map(|p| p.byte()).unwrap_or(0);
                Error::parse(path, offset, e.to_string())
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, iteration: usize, beta: f64) -> CurveRow {
        CurveRow {
            epoch,
            iteration,
            beta_mean: beta,
            beta_std: 0.0,
            gamma_mean: 1.0,
            gamma_std: 0.0,
            frac_low_uncertainty: 0.5,
        }
    }

    #[test]
    fn headers_match_serialized_fields() {
        let m = MetricsRow {
            iteration: 3,
            epoch: 0,
            ce: 1.5,
            kd_van: 0.25,
            kd_aux: 0.125,
            total: 1.875,
            beta_mean: Some(1.0),
            gamma_mean: Some(1.0),
            meta_loss: None,
            error_subset_size: None,
            eval_acc: Some(0.5),
        };
        let text = to_csv(METRICS_HEADER, std::slice::from_ref(&m));
        assert_eq!(text, format!("{METRICS_HEADER}\n3,0,1.5,0.25,0.125,1.875,1.0,1.0,,,0.5\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, METRICS_HEADER, std::slice::from_ref(&m)).unwrap();
        assert_eq!(read_csv::<MetricsRow>(&path, METRICS_HEADER).unwrap(), vec![m]);
        assert_eq!(to_csv::<CurveRow>(CURVES_HEADER, &[]), format!("{CURVES_HEADER}\n"));
    }

    #[test]
    fn epoch_aggregation() {
        let rows = [row(0, 0, 1.0), row(0, 1, 1.2), row(1, 2, 0.9)];
        let e = epoch_curves(&rows);
        assert_eq!(e.len(), 2);
        assert!((e[0].beta_mean - 1.1).abs() < 1e-15);
        assert!((e[0].beta_std - 0.1).abs() < 1e-15);
        assert_eq!(e[0].iteration, 1);
        assert_eq!(e[1].beta_std, 0.0);
    }

    #[test]
    fn batch_stats() {
        let w = [WeightPair { beta: 0.5, gamma: 1.0 }, WeightPair { beta: 1.5, gamma: 1.0 }];
        let r = CurveRow::from_batch(0, 0, &w, 0.25);
        assert_eq!((r.beta_mean, r.beta_std, r.gamma_std), (1.0, 0.5, 0.0));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_csv::<CurveRow>(&path, CURVES_HEADER), Err(Error::Parse { .. })));
    }
}
