//! Run configuration: a flat JSON object with dotted keys (for example
//! `"gen.hidden": 64`), overridable from the command line with
//! `--set key=value`. Unknown keys are rejected with the list of valid
//! keys. A run manifest can be fed back in as a config: its embedded
//! `config` object is used, which reproduces the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::ingest::SynthSpec;
use crate::nids::NidsKind;
use crate::packet::Granularity;
use crate::rng;
use crate::{Error, Result};

pub const SEED_ENV_VAR: &str = "ATTACKGAN_SEED";

/// Every recognized key with a short description. Kept sorted.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("baseline.enabled", "subtract a moving-average reward baseline (default false)"),
    ("baseline.momentum", "baseline moving-average momentum (default 0.9)"),
    ("d_steps", "discriminator steps per adversarial epoch (default 3)"),
    ("data.path", "dataset container to load (omit to synthesize via synth.*)"),
    ("disc.batch", "discriminator minibatch size (default 64)"),
    ("disc.dropout", "dropout probability on pooled features (default 0)"),
    ("disc.filters", "convolution filters per window size (default 64)"),
    ("disc.lr", "discriminator Adam learning rate (default 1e-3)"),
    ("disc.pretrain_epochs", "discriminator pretraining epochs (default 3)"),
    ("disc.windows", "convolution window sizes (default 3,4,5)"),
    ("early_stop.enabled", "stop when discriminator loss plateaus (default false)"),
    ("early_stop.rel_tol", "plateau relative tolerance (default 1e-3)"),
    ("early_stop.window", "plateau window in epochs (default 3)"),
    ("embed.dim", "embedding dimension d (default 32)"),
    ("embed.epochs", "skip-gram training epochs (default 3)"),
    ("embed.load", "load a pretrained embedding container instead of training"),
    ("embed.lr", "skip-gram learning rate (default 0.05)"),
    ("embed.negatives", "negative samples per pair for the large vocabulary (default 5)"),
    ("embed.window", "skip-gram context radius (default 2)"),
    ("eval.batch", "generated packets per evaluation batch (default 512)"),
    ("g_steps", "generator steps per adversarial epoch (default 1)"),
    ("gen.hidden", "LSTM hidden size (default 64)"),
    ("ingest.benign_pcap", "pcap file of benign packets (ingest verb)"),
    ("ingest.malicious_pcap", "pcap file of malicious packets (ingest verb)"),
    ("ingest.strip_offset", "bytes of link-layer prefix to drop (default 0)"),
    ("k", "discriminator epochs per d-step (default 3)"),
    ("mask.positions", "ordered candidate byte positions for the constraint mask"),
    ("mle.batch", "MLE pretraining batch size (default 64)"),
    ("mle.epochs", "MLE pretraining epochs (default 10)"),
    ("mle.lr", "MLE Adam learning rate (default 1e-3)"),
    ("mu", "how many bytes from mask.positions stay fixed (default: all)"),
    ("nids", "black-box detector kind: mlp, svm, dt, or lr (default dt)"),
    ("nids.load", "load a pretrained NIDS container instead of training"),
    ("packet.granularity", "one_byte or two_byte (default one_byte)"),
    ("packet.length", "normalized packet length P (default 300)"),
    ("pg.batch", "trajectories per generator step (default 16)"),
    ("pg.lr", "policy-gradient Adam learning rate (default 1e-4)"),
    ("rollout.lag", "epochs between rollout-policy refreshes; 0 = live (default 0)"),
    ("rollout.m", "Monte Carlo rollouts per position (default 16)"),
    ("run.epochs", "adversarial training epochs (default 30)"),
    ("run.seed", "global run seed (default: ATTACKGAN_SEED or 42)"),
    ("synth.benign_range", "inclusive benign byte range at signature positions, lo,hi"),
    ("synth.malicious_range", "inclusive malicious byte range at signature positions, lo,hi"),
    ("synth.n_benign", "synthetic benign packet count"),
    ("synth.n_malicious", "synthetic malicious packet count"),
    ("synth.seed", "synthesis noise seed (default: derived from run.seed)"),
    ("synth.signature_positions", "byte positions carrying the class signature"),
    ("train.adv_batch", "generated packets per d-step batch (default 256)"),
    ("train.split", "train fraction for the stratified split (default 0.75)"),
];

/// The parsed flat key/value map.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    values: BTreeMap<String, Value>,
}

fn known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

fn unknown_key_error(key: &str) -> Error {
    let list: Vec<&str> = KNOWN_KEYS.iter().map(|(k, _)| *k).collect();
    Error::Config(format!(
        "unknown config key {key:?}; valid keys: {}",
        list.join(", ")
    ))
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a config file. A run manifest is accepted too: its embedded
    /// `config` object is extracted.
    pub fn from_json_str(text: &str) -> Result<FlatConfig> {
        let parsed: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = match &parsed {
            Value::Object(map) if map.contains_key("config") && map.contains_key("status") => {
                match &map["config"] {
                    Value::Object(inner) => inner.clone(),
                    _ => return Err(Error::Config("manifest config field is not an object".into())),
                }
            }
            Value::Object(map) => map.clone(),
            _ => return Err(Error::Config("config root must be a JSON object".into())),
        };
        let mut cfg = FlatConfig::new();
        for (k, v) in obj {
            if !known(&k) {
                return Err(unknown_key_error(&k));
            }
            cfg.values.insert(k, v);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<FlatConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Apply a `key=value` override. Values parse as JSON when possible;
    /// bare words become strings; comma-separated values become arrays.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?} is not of the form key=value"))
        })?;
        let key = key.trim();
        if !known(key) {
            return Err(unknown_key_error(key));
        }
        let raw = raw.trim();
        let value = if raw.contains(',') && !raw.starts_with('[') {
            Value::Array(
                raw.split(',')
                    .map(|part| {
                        serde_json::from_str(part.trim())
                            .unwrap_or_else(|_| Value::String(part.trim().to_string()))
                    })
                    .collect(),
            )
        } else {
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: Value) -> Result<()> {
        if !known(key) {
            return Err(unknown_key_error(key));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    /// Canonical JSON with sorted keys, suitable for hashing and manifests.
    pub fn to_canonical_json(&self) -> Value {
        Value::Object(self.values.clone().into_iter().collect())
    }

    fn u64_at(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => {
                let n = v
                    .as_i64()
                    .ok_or_else(|| Error::Config(format!("{key} must be an integer, got {v}")))?;
                if n < 0 {
                    return Err(Error::Config(format!("{key} must be >= 0, got {n}")));
                }
                Ok(n as u64)
            }
        }
    }

    fn usize_at(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_at(key, default as u64)? as usize)
    }

    fn positive_usize_at(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.usize_at(key, default)?;
        if v == 0 {
            return Err(Error::Config(format!("{key} must be >= 1, got 0")));
        }
        Ok(v)
    }

    fn f64_at(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("{key} must be a number, got {v}"))),
        }
    }

    fn bool_at(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(Error::Config(format!("{key} must be true or false, got {v}"))),
        }
    }

    fn string_at(&self, key: &str) -> Result<Option<String>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Error::Config(format!("{key} must be a string, got {v}"))),
        }
    }

    fn usize_list_at(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    let n = item.as_i64().ok_or_else(|| {
                        Error::Config(format!("{key} entries must be integers, got {item}"))
                    })?;
                    if n < 0 {
                        return Err(Error::Config(format!(
                            "{key} entries must be >= 0, got {n}"
                        )));
                    }
                    out.push(n as usize);
                }
                Ok(Some(out))
            }
            Some(Value::Number(_)) => {
                // single-element list
                Ok(Some(vec![self.usize_at(key, 0)?]))
            }
            Some(v) => Err(Error::Config(format!("{key} must be a list, got {v}"))),
        }
    }
}

/// Fully resolved settings for a training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub data_path: Option<PathBuf>,
    pub train_split: f64,
    pub packet_len: usize,
    pub granularity: Granularity,
    /// Priority-ordered candidate mask positions; the first `mu` are fixed.
    pub mask_positions: Vec<usize>,
    pub mu: usize,
    pub nids_kind: NidsKind,
    pub embed_dim: usize,
    pub embed_window: usize,
    pub embed_epochs: usize,
    pub embed_lr: f64,
    pub embed_negatives: usize,
    pub embed_load: Option<PathBuf>,
    pub nids_load: Option<PathBuf>,
    pub gen_hidden: usize,
    pub mle_epochs: usize,
    pub mle_batch: usize,
    pub mle_lr: f64,
    pub pg_lr: f64,
    pub pg_batch: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub d_epochs: usize,
    pub rollout_m: usize,
    pub rollout_lag: usize,
    pub disc_windows: Vec<usize>,
    pub disc_filters: usize,
    pub disc_lr: f64,
    pub disc_batch: usize,
    pub disc_dropout: f64,
    pub disc_pretrain_epochs: usize,
    pub adv_batch: usize,
    pub eval_batch: usize,
    pub baseline_enabled: bool,
    pub baseline_momentum: f64,
    pub early_stop: bool,
    pub early_stop_rel_tol: f64,
    pub early_stop_window: usize,
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    pub fn from_flat(flat: &FlatConfig) -> Result<RunConfig> {
        let seed = match flat.get("run.seed") {
            Some(_) => flat.u64_at("run.seed", 0)?,
            None => match std::env::var(SEED_ENV_VAR) {
                Ok(s) => s.parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got {s:?}"))
                })?,
                Err(_) => 42,
            },
        };
        let packet_len = flat.positive_usize_at("packet.length", 300)?;
        let granularity = match flat.string_at("packet.granularity")? {
            Some(s) => Granularity::parse(&s).map_err(|e| Error::Config(e.to_string()))?,
            None => Granularity::OneByte,
        };
        if granularity == Granularity::TwoByte && packet_len % 2 != 0 {
            return Err(Error::Config(format!(
                "two_byte granularity requires even packet.length, got {packet_len}"
            )));
        }
        let mask_positions = flat.usize_list_at("mask.positions")?.unwrap_or_default();
        for &pos in &mask_positions {
            if pos >= packet_len {
                return Err(Error::Config(format!(
                    "mask position {pos} out of range for packet.length {packet_len}"
                )));
            }
        }
        let mu = flat.usize_at("mu", mask_positions.len())?;
        if mu > mask_positions.len() {
            return Err(Error::Config(format!(
                "mu={mu} exceeds the {} candidate mask.positions",
                mask_positions.len()
            )));
        }
        let nids_kind = match flat.string_at("nids")? {
            Some(s) => NidsKind::parse(&s).map_err(|e| Error::Config(e.to_string()))?,
            None => NidsKind::Dt,
        };
        let train_split = flat.f64_at("train.split", 0.75)?;
        if !(train_split > 0.0 && train_split < 1.0) {
            return Err(Error::Config(format!(
                "train.split must be in (0, 1), got {train_split}"
            )));
        }
        let disc_windows = flat
            .usize_list_at("disc.windows")?
            .unwrap_or_else(|| vec![3, 4, 5]);
        if disc_windows.is_empty() || disc_windows.iter().any(|&w| w == 0) {
            return Err(Error::Config("disc.windows must be positive".into()));
        }
        let token_len = packet_len / granularity.bytes_per_token();
        if disc_windows.iter().any(|&w| w > token_len) {
            return Err(Error::Config(format!(
                "disc.windows exceed the {token_len}-token sequence length"
            )));
        }
        let synth = match (
            flat.get("synth.n_benign").is_some() || flat.get("synth.n_malicious").is_some(),
            flat.get("data.path").is_some(),
        ) {
            (false, _) => None,
            (true, _) => {
                let signature_positions = flat
                    .usize_list_at("synth.signature_positions")?
                    .unwrap_or_default();
                let range = |key: &str, default: (u8, u8)| -> Result<(u8, u8)> {
                    match flat.usize_list_at(key)? {
                        None => Ok(default),
                        Some(v) if v.len() == 2 && v[0] <= 255 && v[1] <= 255 => {
                            Ok((v[0] as u8, v[1] as u8))
                        }
                        Some(v) => Err(Error::Config(format!(
                            "{key} must be two bytes lo,hi; got {v:?}"
                        ))),
                    }
                };
                Some(SynthSpec {
                    n_benign: flat.usize_at("synth.n_benign", 0)?,
                    n_malicious: flat.usize_at("synth.n_malicious", 0)?,
                    p: packet_len,
                    signature_positions,
                    benign_range: range("synth.benign_range", (0, 99))?,
                    malicious_range: range("synth.malicious_range", (156, 255))?,
                    noise_seed: flat.u64_at("synth.seed", rng::mix(seed, &[0x53594e54]))?,
                })
            }
        };
        let dropout = flat.f64_at("disc.dropout", 0.0)?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "disc.dropout must be in [0, 1), got {dropout}"
            )));
        }
        Ok(RunConfig {
            seed,
            epochs: flat.positive_usize_at("run.epochs", 30)?,
            data_path: flat.string_at("data.path")?.map(PathBuf::from),
            train_split,
            packet_len,
            granularity,
            mask_positions,
            mu,
            nids_kind,
            embed_dim: flat.positive_usize_at("embed.dim", 32)?,
            embed_window: flat.positive_usize_at("embed.window", 2)?,
            embed_epochs: flat.positive_usize_at("embed.epochs", 3)?,
            embed_lr: flat.f64_at("embed.lr", 0.05)?,
            embed_negatives: flat.positive_usize_at("embed.negatives", 5)?,
            embed_load: flat.string_at("embed.load")?.map(PathBuf::from),
            nids_load: flat.string_at("nids.load")?.map(PathBuf::from),
            gen_hidden: flat.positive_usize_at("gen.hidden", 64)?,
            mle_epochs: flat.usize_at("mle.epochs", 10)?,
            mle_batch: flat.positive_usize_at("mle.batch", 64)?,
            mle_lr: flat.f64_at("mle.lr", 1e-3)?,
            pg_lr: flat.f64_at("pg.lr", 1e-4)?,
            pg_batch: flat.positive_usize_at("pg.batch", 16)?,
            g_steps: flat.positive_usize_at("g_steps", 1)?,
            d_steps: flat.positive_usize_at("d_steps", 3)?,
            d_epochs: flat.positive_usize_at("k", 3)?,
            rollout_m: flat.positive_usize_at("rollout.m", 16)?,
            rollout_lag: flat.usize_at("rollout.lag", 0)?,
            disc_windows,
            disc_filters: flat.positive_usize_at("disc.filters", 64)?,
            disc_lr: flat.f64_at("disc.lr", 1e-3)?,
            disc_batch: flat.positive_usize_at("disc.batch", 64)?,
            disc_dropout: dropout,
            disc_pretrain_epochs: flat.positive_usize_at("disc.pretrain_epochs", 3)?,
            adv_batch: flat.positive_usize_at("train.adv_batch", 256)?,
            eval_batch: flat.positive_usize_at("eval.batch", 512)?,
            baseline_enabled: flat.bool_at("baseline.enabled", false)?,
            baseline_momentum: flat.f64_at("baseline.momentum", 0.9)?,
            early_stop: flat.bool_at("early_stop.enabled", false)?,
            early_stop_rel_tol: flat.f64_at("early_stop.rel_tol", 1e-3)?,
            early_stop_window: flat.positive_usize_at("early_stop.window", 3)?,
            synth,
        })
    }

    /// The byte positions actually fixed: the first `mu` candidates.
    pub fn effective_mask_positions(&self) -> std::collections::BTreeSet<usize> {
        self.mask_positions.iter().take(self.mu).copied().collect()
    }

    /// Tokens per sequence.
    pub fn token_len(&self) -> usize {
        self.packet_len / self.granularity.bytes_per_token()
    }
}

/// Settings for the pcap ingestion verb.
#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub benign_pcap: Option<PathBuf>,
    pub malicious_pcap: Option<PathBuf>,
    pub strip_offset: usize,
    pub packet_len: usize,
}

impl IngestConfig {
    pub fn from_flat(flat: &FlatConfig) -> Result<IngestConfig> {
        let cfg = IngestConfig {
            benign_pcap: flat.string_at("ingest.benign_pcap")?.map(PathBuf::from),
            malicious_pcap: flat.string_at("ingest.malicious_pcap")?.map(PathBuf::from),
            strip_offset: flat.usize_at("ingest.strip_offset", 0)?,
            packet_len: flat.positive_usize_at("packet.length", 300)?,
        };
        if cfg.benign_pcap.is_none() && cfg.malicious_pcap.is_none() {
            return Err(Error::Config(
                "ingest needs ingest.benign_pcap and/or ingest.malicious_pcap".into(),
            ));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let flat = FlatConfig::from_json_str("{}").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.packet_len, 300);
        assert_eq!(cfg.eval_batch, 512);
        assert_eq!(cfg.disc_windows, vec![3, 4, 5]);
        assert_eq!(cfg.granularity, Granularity::OneByte);
        assert_eq!(cfg.nids_kind, NidsKind::Dt);
        assert!(cfg.synth.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_valid_list() {
        let err = FlatConfig::from_json_str(r#"{"generator.hiden": 64}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key"));
        assert!(msg.contains("gen.hidden"), "should list valid keys: {msg}");
        let mut flat = FlatConfig::new();
        assert!(flat.set("nope=1").is_err());
    }

    #[test]
    fn negative_mu_names_the_invariant() {
        let mut flat = FlatConfig::new();
        flat.set("mu=-1").unwrap();
        let err = RunConfig::from_flat(&flat).unwrap_err();
        assert!(err.to_string().contains("mu must be >= 0"), "{err}");
    }

    #[test]
    fn mu_selects_a_prefix_of_positions() {
        let mut flat = FlatConfig::new();
        flat.set("packet.length=64").unwrap();
        flat.set("mask.positions=0,1,2,3,4,5,6,7").unwrap();
        flat.set("mu=3").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(
            cfg.effective_mask_positions(),
            [0usize, 1, 2].into_iter().collect()
        );
        flat.set("mu=9").unwrap();
        assert!(RunConfig::from_flat(&flat).is_err());
    }

    #[test]
    fn overrides_parse_lists_and_scalars() {
        let mut flat = FlatConfig::new();
        flat.set("disc.windows=2,3").unwrap();
        flat.set("nids=svm").unwrap();
        flat.set("packet.length=32").unwrap();
        flat.set("train.split=0.5").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.disc_windows, vec![2, 3]);
        assert_eq!(cfg.nids_kind, NidsKind::Svm);
        assert_eq!(cfg.train_split, 0.5);
    }

    #[test]
    fn manifest_embedded_config_is_accepted() {
        let manifest = r#"{
            "status": "ok",
            "config": {"packet.length": 64, "run.epochs": 5},
            "content_hash": "deadbeef"
        }"#;
        let flat = FlatConfig::from_json_str(manifest).unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.packet_len, 64);
        assert_eq!(cfg.epochs, 5);
    }

    #[test]
    fn two_byte_requires_even_length_and_window_fits() {
        let mut flat = FlatConfig::new();
        flat.set("packet.granularity=two_byte").unwrap();
        flat.set("packet.length=33").unwrap();
        assert!(RunConfig::from_flat(&flat).is_err());
        flat.set("packet.length=8").unwrap();
        flat.set("disc.windows=5").unwrap();
        // 4 tokens < window 5
        assert!(RunConfig::from_flat(&flat).is_err());
    }

    #[test]
    fn synth_spec_resolves_from_keys() {
        let mut flat = FlatConfig::new();
        flat.set("packet.length=64").unwrap();
        flat.set("synth.n_benign=100").unwrap();
        flat.set("synth.n_malicious=100").unwrap();
        flat.set("synth.signature_positions=8,9,10").unwrap();
        flat.set("run.seed=7").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        let synth = cfg.synth.unwrap();
        assert_eq!(synth.p, 64);
        assert_eq!(synth.signature_positions, vec![8, 9, 10]);
        assert_eq!(synth.benign_range, (0, 99));
        // derived synth seed is stable
        let again = RunConfig::from_flat(&flat).unwrap().synth.unwrap();
        assert_eq!(synth.noise_seed, again.noise_seed);
    }
}
