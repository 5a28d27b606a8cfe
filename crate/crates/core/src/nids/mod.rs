//! The black-box intrusion detectors.
//!
//! Four conventional classifier families (MLP, RBF-kernel SVM, decision
//! tree, logistic regression) trained on per-packet byte-scaled features.
//! After training, only `predict` and `evaluate_nids` are exposed; nothing
//! downstream reads model internals. Hard labels, not probabilities, flow
//! to the discriminator.

mod logreg;
mod mlp;
mod svm;
mod tree;

use std::path::Path;

use ndarray::Array2;

use crate::checkpoint::Container;
use crate::ingest::LabeledDataset;
use crate::metrics::{class_metrics, ClassMetrics};
use crate::packet::{Label, NormalizedPacket};
use crate::{Error, Result};

/// Detector family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NidsKind {
    Mlp,
    Svm,
    Dt,
    Lr,
}

impl NidsKind {
    pub const ALL: [NidsKind; 4] = [NidsKind::Mlp, NidsKind::Svm, NidsKind::Dt, NidsKind::Lr];

    pub fn as_str(&self) -> &'static str {
        match self {
            NidsKind::Mlp => "mlp",
            NidsKind::Svm => "svm",
            NidsKind::Dt => "dt",
            NidsKind::Lr => "lr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(NidsKind::Mlp),
            "svm" => Ok(NidsKind::Svm),
            "dt" => Ok(NidsKind::Dt),
            "lr" => Ok(NidsKind::Lr),
            other => Err(Error::Nids(format!(
                "unknown NIDS kind {other:?} (expected mlp, svm, dt, or lr)"
            ))),
        }
    }
}

/// A detector input: real-valued features in [0, 1] under the default
/// extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source_packet_id: Option<u64>,
}

/// Pure, deterministic mapping from packets to feature vectors.
pub trait FeatureExtractor {
    fn id(&self) -> &'static str;
    fn extract(&self, pkt: &NormalizedPacket) -> FeatureVector;
}

/// The default extractor: F = P, value_i = byte_i / 255.
pub struct ByteScaleExtractor;

pub const BYTE_SCALE_EXTRACTOR_ID: &str = "byte_scale_v1";

impl FeatureExtractor for ByteScaleExtractor {
    fn id(&self) -> &'static str {
        BYTE_SCALE_EXTRACTOR_ID
    }

    fn extract(&self, pkt: &NormalizedPacket) -> FeatureVector {
        FeatureVector {
            values: pkt.bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            source_packet_id: None,
        }
    }
}

/// Extract features with the default byte-scale extractor.
pub fn extract_features(pkt: &NormalizedPacket) -> FeatureVector {
    ByteScaleExtractor.extract(pkt)
}

/// Training provenance kept with every fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct NidsMeta {
    pub extractor_id: String,
    pub feature_len: usize,
    pub seed: u64,
    pub hyperparams: String,
    pub train_metrics: Option<ClassMetrics>,
}

#[derive(Debug, Clone)]
enum Inner {
    Mlp(mlp::MlpModel),
    Svm(svm::SvmModel),
    Dt(tree::TreeModel),
    Lr(logreg::LogRegModel),
}

/// A fitted black-box detector. Parameters are private; inference is the
/// only operation other modules can perform.
#[derive(Debug, Clone)]
pub struct NidsModel {
    kind: NidsKind,
    inner: Inner,
    meta: NidsMeta,
}

fn dataset_features(ds: &LabeledDataset) -> (Array2<f64>, Vec<Label>) {
    let n = ds.len();
    let f = ds.packet_len().unwrap_or(0);
    let mut x = Array2::zeros((n, f));
    let mut y = Vec::with_capacity(n);
    for (i, pkt) in ds.packets().iter().enumerate() {
        for (j, &b) in pkt.bytes.iter().enumerate() {
            x[[i, j]] = b as f64 / 255.0;
        }
        y.push(pkt.label);
    }
    (x, y)
}

/// Fit a detector of the given family. Deterministic under `seed` for the
/// stochastic kinds; training accuracy/precision/recall are recorded in the
/// model metadata.
pub fn train_nids(kind: NidsKind, train: &LabeledDataset, seed: u64) -> Result<NidsModel> {
    if train.is_empty() {
        return Err(Error::Nids("training set is empty".into()));
    }
    if train.count(Label::Benign) == 0 || train.count(Label::Malicious) == 0 {
        return Err(Error::Nids(format!(
            "training set needs both classes (benign={}, malicious={})",
            train.count(Label::Benign),
            train.count(Label::Malicious)
        )));
    }
    let (x, y) = dataset_features(train);
    let (inner, hyperparams) = match kind {
        NidsKind::Mlp => {
            let m = mlp::MlpModel::train(&x, &y, seed)?;
            let hp = m.hyperparams();
            (Inner::Mlp(m), hp)
        }
        NidsKind::Svm => {
            let m = svm::SvmModel::train(&x, &y, seed)?;
            let hp = m.hyperparams();
            (Inner::Svm(m), hp)
        }
        NidsKind::Dt => {
            let m = tree::TreeModel::train(&x, &y)?;
            let hp = m.hyperparams();
            (Inner::Dt(m), hp)
        }
        NidsKind::Lr => {
            let m = logreg::LogRegModel::train(&x, &y)?;
            let hp = m.hyperparams();
            (Inner::Lr(m), hp)
        }
    };
    let mut model = NidsModel {
        kind,
        inner,
        meta: NidsMeta {
            extractor_id: BYTE_SCALE_EXTRACTOR_ID.to_string(),
            feature_len: x.ncols(),
            seed,
            hyperparams,
            train_metrics: None,
        },
    };
    let preds = model.predict_features(&x);
    model.meta.train_metrics = Some(class_metrics(&y, &preds)?);
    Ok(model)
}

impl NidsModel {
    pub fn kind(&self) -> NidsKind {
        self.kind
    }

    pub fn meta(&self) -> &NidsMeta {
        &self.meta
    }

    fn predict_features(&self, x: &Array2<f64>) -> Vec<Label> {
        match &self.inner {
            Inner::Mlp(m) => m.predict(x),
            Inner::Svm(m) => m.predict(x),
            Inner::Dt(m) => m.predict(x),
            Inner::Lr(m) => m.predict(x),
        }
    }

    /// Hard labels for a batch. Inference only: the model never changes.
    pub fn predict(&self, batch: &[FeatureVector]) -> Result<Vec<Label>> {
        let f = self.meta.feature_len;
        let mut x = Array2::zeros((batch.len(), f));
        for (i, fv) in batch.iter().enumerate() {
            if fv.values.len() != f {
                return Err(Error::Nids(format!(
                    "feature vector {i} has length {}, model expects {f}",
                    fv.values.len()
                )));
            }
            for (j, &v) in fv.values.iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Ok(self.predict_features(&x))
    }

    /// Convenience: predict directly on packets via the default extractor.
    pub fn predict_packets(&self, packets: &[NormalizedPacket]) -> Result<Vec<Label>> {
        let features: Vec<FeatureVector> = packets.iter().map(extract_features).collect();
        self.predict(&features)
    }

    /// Round stored parameters through f32 (checkpoint precision).
    pub fn snap(&mut self) {
        match &mut self.inner {
            Inner::Mlp(m) => m.snap(),
            Inner::Svm(m) => m.snap(),
            Inner::Dt(m) => m.snap(),
            Inner::Lr(m) => m.snap(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("nids");
        let kind_code = match self.kind {
            NidsKind::Mlp => 0.0,
            NidsKind::Svm => 1.0,
            NidsKind::Dt => 2.0,
            NidsKind::Lr => 3.0,
        };
        c.push_scalars(
            "nids/meta",
            &[kind_code, self.meta.feature_len as f64, self.meta.seed as f64],
        );
        let id_bytes: Vec<f64> = self
            .meta
            .extractor_id
            .bytes()
            .map(|b| b as f64)
            .collect();
        c.push_scalars("nids/extractor_id", &id_bytes);
        match &self.inner {
            Inner::Mlp(m) => m.store(&mut c),
            Inner::Svm(m) => m.store(&mut c),
            Inner::Dt(m) => m.store(&mut c),
            Inner::Lr(m) => m.store(&mut c),
        }
        c.write(path)
    }

    /// Load a persisted model, refusing when the stored extractor id does
    /// not match the expected one.
    pub fn load(path: &Path, expected_extractor_id: &str) -> Result<NidsModel> {
        let c = Container::read(path)?;
        if c.module != "nids" {
            return Err(Error::Nids(format!(
                "{}: container holds module {:?}, expected nids",
                path.display(),
                c.module
            )));
        }
        let meta = c.scalars("nids/meta")?;
        if meta.len() != 3 {
            return Err(Error::Nids("malformed nids/meta tensor".into()));
        }
        let extractor_id: String = c
            .scalars("nids/extractor_id")?
            .iter()
            .map(|&b| b as u8 as char)
            .collect();
        if extractor_id != expected_extractor_id {
            return Err(Error::Nids(format!(
                "extractor id mismatch: model trained with {extractor_id:?}, dataset configured for {expected_extractor_id:?}"
            )));
        }
        let (kind, inner, hyperparams) = match meta[0] as i64 {
            0 => {
                let m = mlp::MlpModel::restore(&c)?;
                let hp = m.hyperparams();
                (NidsKind::Mlp, Inner::Mlp(m), hp)
            }
            1 => {
                let m = svm::SvmModel::restore(&c)?;
                let hp = m.hyperparams();
                (NidsKind::Svm, Inner::Svm(m), hp)
            }
            2 => {
                let m = tree::TreeModel::restore(&c)?;
                let hp = m.hyperparams();
                (NidsKind::Dt, Inner::Dt(m), hp)
            }
            3 => {
                let m = logreg::LogRegModel::restore(&c)?;
                let hp = m.hyperparams();
                (NidsKind::Lr, Inner::Lr(m), hp)
            }
            other => return Err(Error::Nids(format!("unknown kind code {other}"))),
        };
        Ok(NidsModel {
            kind,
            inner,
            meta: NidsMeta {
                extractor_id,
                feature_len: meta[1] as usize,
                seed: meta[2] as u64,
                hyperparams,
                train_metrics: None,
            },
        })
    }
}

/// Hard labels for a batch (free-function form of [`NidsModel::predict`]).
pub fn predict(model: &NidsModel, batch: &[FeatureVector]) -> Result<Vec<Label>> {
    model.predict(batch)
}

/// Accuracy, precision, and recall on a test set, malicious positive.
pub fn evaluate_nids(model: &NidsModel, test: &LabeledDataset) -> Result<ClassMetrics> {
    if test.is_empty() {
        return Err(Error::Nids("test set is empty".into()));
    }
    let (x, y) = dataset_features(test);
    let preds = model.predict_features(&x);
    class_metrics(&y, &preds).map_err(|e| Error::Nids(e.to_string()))
}
