//! Evasion and classifier metrics.
//!
//! MAPE compares the norm profiles of min-max-normalized token embeddings
//! of a generated packet against its template. AFR is the share of attack
//! attempts the NIDS still flags; ASR its exact complement; ASIR the gain
//! of ASR over the unmodified-malicious baseline.

use ndarray::Array1;

use crate::embedding::EmbeddingMatrix;
use crate::packet::{Granularity, Label, TokenSequence};
use crate::{Error, Result};

const MAPE_EPS: f64 = 1e-8;

/// Per-epoch metric observations for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub nids_kind: String,
    pub mu: usize,
    pub embedding_mode: Granularity,
    pub afr: f64,
    pub asr: f64,
    pub asir: f64,
    pub mape: f64,
}

pub const METRIC_CSV_HEADER: &str = "epoch,nids_kind,mu,embedding_mode,afr,asr,asir,mape";

impl MetricRecord {
    /// One CSV row. Floats use shortest-roundtrip formatting, so identical
    /// runs produce byte-identical files and parsing back is lossless.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.nids_kind,
            self.mu,
            self.embedding_mode.as_str(),
            self.afr,
            self.asr,
            self.asir,
            self.mape
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<MetricRecord> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Metrics(format!(
                "expected 8 CSV fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Metrics(format!("bad numeric field {s:?} in {line:?}")))
        };
        Ok(MetricRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Metrics(format!("bad epoch {:?}", fields[0])))?,
            nids_kind: fields[1].to_string(),
            mu: fields[2]
                .parse()
                .map_err(|_| Error::Metrics(format!("bad mu {:?}", fields[2])))?,
            embedding_mode: Granularity::parse(fields[3]).map_err(|e| Error::Metrics(e.to_string()))?,
            afr: num(fields[4])?,
            asr: num(fields[5])?,
            asir: num(fields[6])?,
            mape: num(fields[7])?,
        })
    }
}

/// Per-dimension min and max over the embedding table rows, used to min-max
/// normalize token embeddings before taking norms.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub min: Array1<f64>,
    pub max: Array1<f64>,
}

impl NormalizationStats {
    /// Global stats over the full table, so MAPE is comparable across
    /// packets.
    pub fn from_table(emb: &EmbeddingMatrix) -> Self {
        let d = emb.dim();
        let mut min = Array1::from_elem(d, f64::INFINITY);
        let mut max = Array1::from_elem(d, f64::NEG_INFINITY);
        for row in emb.table.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v < min[j] {
                    min[j] = v;
                }
                if v > max[j] {
                    max[j] = v;
                }
            }
        }
        NormalizationStats { min, max }
    }

    /// L2 norm of a token's min-max-normalized embedding. Constant
    /// dimensions normalize to 0.
    fn normalized_norm(&self, emb: &EmbeddingMatrix, token: u32) -> f64 {
        let row = emb.row(token);
        let mut acc = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let range = self.max[j] - self.min[j];
            let n = if range > 0.0 { (v - self.min[j]) / range } else { 0.0 };
            acc += n * n;
        }
        acc.sqrt()
    }
}

/// Modified mean absolute percentage error between the norm profiles of two
/// sequences' normalized embeddings, in percent. The denominator is the
/// first argument's norm (guarded by epsilon when zero), so the measure is
/// deliberately asymmetric: call as `mape(original, generated, ..)`.
pub fn mape(
    x: &TokenSequence,
    y: &TokenSequence,
    emb: &EmbeddingMatrix,
    stats: &NormalizationStats,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Metrics(format!(
            "length mismatch: {} vs {} tokens",
            x.len(),
            y.len()
        )));
    }
    if x.granularity != y.granularity || x.granularity != emb.granularity {
        return Err(Error::Metrics("granularity mismatch".into()));
    }
    if x.is_empty() {
        return Err(Error::Metrics("empty sequences".into()));
    }
    let mut total = 0.0;
    for (&xt, &yt) in x.tokens.iter().zip(&y.tokens) {
        let nx = stats.normalized_norm(emb, xt);
        let ny = stats.normalized_norm(emb, yt);
        let denom = if nx > 0.0 { nx } else { MAPE_EPS };
        total += ((nx - ny) / denom).abs();
    }
    Ok(100.0 * total / x.len() as f64)
}

/// Attack failure rate: percent of attempts the NIDS still labels
/// malicious.
pub fn afr(labels: &[Label]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Metrics("no labels to rate".into()));
    }
    let malicious = labels.iter().filter(|&&l| l == Label::Malicious).count();
    Ok(100.0 * malicious as f64 / labels.len() as f64)
}

/// Attack success rate: the exact complement of [`afr`] over the same
/// labels.
pub fn asr(labels: &[Label]) -> Result<f64> {
    Ok(100.0 - afr(labels)?)
}

/// Attack success increase rate: ASR under generation minus the original
/// ASR of unmodified malicious packets. May be negative.
pub fn asir(asr_attack: f64, asr_original: f64) -> f64 {
    asr_attack - asr_original
}

/// Standard binary-classification metrics with malicious as the positive
/// class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion counts (tp, fp, tn, fn) with malicious positive.
pub fn confusion(truth: &[Label], predicted: &[Label]) -> Result<(usize, usize, usize, usize)> {
    if truth.len() != predicted.len() {
        return Err(Error::Metrics(format!(
            "label length mismatch: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fneg = 0;
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Benign, Label::Malicious) => fp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Malicious, Label::Benign) => fneg += 1,
        }
    }
    Ok((tp, fp, tn, fneg))
}

pub fn class_metrics(truth: &[Label], predicted: &[Label]) -> Result<ClassMetrics> {
    if truth.is_empty() {
        return Err(Error::Metrics("no labels to score".into()));
    }
    let (tp, fp, tn, fneg) = confusion(truth, predicted)?;
    let total = (tp + fp + tn + fneg) as f64;
    Ok(ClassMetrics {
        accuracy: (tp + tn) as f64 / total,
        precision: if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        },
        recall: if tp + fneg > 0 {
            tp as f64 / (tp + fneg) as f64
        } else {
            0.0
        },
    })
}
