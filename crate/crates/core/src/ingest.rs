//! Dataset ingestion: classic pcap reading/writing, synthetic labeled
//! corpora with plantable malicious byte signatures, stratified splits, and
//! the flat binary dataset container.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::packet::{normalize_packet, Label, NormalizedPacket, Origin, RawPacket};
use crate::rng;
use crate::{Error, Result};

const PCAP_MAGIC: u32 = 0xA1B2_C3D4;
const PCAP_MAGIC_SWAPPED: u32 = 0xD4C3_B2A1;
const PCAP_GLOBAL_HEADER_LEN: usize = 24;
const PCAP_RECORD_HEADER_LEN: usize = 16;

/// Field byte order of a pcap file, resolved from its magic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// One record of a classic pcap file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub captured_len: u32,
    pub original_len: u32,
    pub payload: Vec<u8>,
}

fn read_u32(buf: &[u8], off: usize, endian: Endianness) -> u32 {
    let raw: [u8; 4] = buf[off..off + 4].try_into().unwrap();
    match endian {
        Endianness::Little => u32::from_le_bytes(raw),
        Endianness::Big => u32::from_be_bytes(raw),
    }
}

/// Parse a classic pcap file into its records. Byte order is resolved from
/// the magic number; truncated records abort with the record index and file
/// offset.
pub fn read_pcap_records(path: &Path) -> Result<Vec<PcapRecord>> {
    let buf = fs::read(path)?;
    if buf.len() < PCAP_GLOBAL_HEADER_LEN {
        return Err(Error::Ingest(format!(
            "{}: file too short for a pcap global header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let magic_le = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let endian = match magic_le {
        PCAP_MAGIC => Endianness::Little,
        PCAP_MAGIC_SWAPPED => Endianness::Big,
        other => {
            return Err(Error::Ingest(format!(
                "{}: unknown pcap magic 0x{other:08x}",
                path.display()
            )))
        }
    };
    let snaplen = read_u32(&buf, 16, endian);
    let mut records = Vec::new();
    let mut off = PCAP_GLOBAL_HEADER_LEN;
    let mut index = 0usize;
    while off < buf.len() {
        if buf.len() - off < PCAP_RECORD_HEADER_LEN {
            return Err(Error::Ingest(format!(
                "{}: truncated record header for record {index} at offset {off}",
                path.display()
            )));
        }
        let ts_sec = read_u32(&buf, off, endian);
        let ts_usec = read_u32(&buf, off + 4, endian);
        let captured_len = read_u32(&buf, off + 8, endian);
        let original_len = read_u32(&buf, off + 12, endian);
        off += PCAP_RECORD_HEADER_LEN;
        if captured_len as usize > buf.len() - off {
            return Err(Error::Ingest(format!(
                "{}: record {index} at offset {off} claims {captured_len} captured bytes beyond end of file",
                path.display()
            )));
        }
        if captured_len == 0 {
            return Err(Error::Ingest(format!(
                "{}: record {index} at offset {off} has zero captured length",
                path.display()
            )));
        }
        if captured_len > original_len {
            return Err(Error::Ingest(format!(
                "{}: record {index} captured length {captured_len} exceeds original length {original_len}",
                path.display()
            )));
        }
        if captured_len > snaplen {
            return Err(Error::Ingest(format!(
                "{}: record {index} captured length {captured_len} exceeds snaplen {snaplen}",
                path.display()
            )));
        }
        let payload = buf[off..off + captured_len as usize].to_vec();
        off += captured_len as usize;
        records.push(PcapRecord {
            ts_sec,
            ts_usec,
            captured_len,
            original_len,
            payload,
        });
        index += 1;
    }
    Ok(records)
}

/// Read a classic pcap file as raw (unlabeled) packets in capture order.
pub fn read_pcap(path: &Path) -> Result<Vec<RawPacket>> {
    Ok(read_pcap_records(path)?
        .into_iter()
        .map(|rec| RawPacket {
            capture_ts: Some(rec.ts_sec as f64 + rec.ts_usec as f64 * 1e-6),
            bytes: rec.payload,
            label: None,
        })
        .collect())
}

/// Write records as a classic pcap file in the given byte order. Used for
/// corpus round trips and tests; snaplen is set to the longest payload.
pub fn write_pcap(path: &Path, records: &[PcapRecord], endian: Endianness) -> Result<()> {
    let snaplen = records
        .iter()
        .map(|r| r.captured_len)
        .max()
        .unwrap_or(65535)
        .max(1);
    let mut buf = Vec::new();
    let w32 = |buf: &mut Vec<u8>, v: u32| match endian {
        Endianness::Little => buf.extend_from_slice(&v.to_le_bytes()),
        Endianness::Big => buf.extend_from_slice(&v.to_be_bytes()),
    };
    let w16 = |buf: &mut Vec<u8>, v: u16| match endian {
        Endianness::Little => buf.extend_from_slice(&v.to_le_bytes()),
        Endianness::Big => buf.extend_from_slice(&v.to_be_bytes()),
    };
    w32(&mut buf, PCAP_MAGIC);
    w16(&mut buf, 2); // version major
    w16(&mut buf, 4); // version minor
    w32(&mut buf, 0); // thiszone
    w32(&mut buf, 0); // sigfigs
    w32(&mut buf, snaplen);
    w32(&mut buf, 1); // linktype: ethernet
    for (i, rec) in records.iter().enumerate() {
        if rec.captured_len as usize != rec.payload.len() {
            return Err(Error::Ingest(format!(
                "record {i}: captured_len {} does not match payload length {}",
                rec.captured_len,
                rec.payload.len()
            )));
        }
        w32(&mut buf, rec.ts_sec);
        w32(&mut buf, rec.ts_usec);
        w32(&mut buf, rec.captured_len);
        w32(&mut buf, rec.original_len);
        buf.extend_from_slice(&rec.payload);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Drop a fixed-size link-layer prefix from a raw packet.
pub fn strip_prefix(raw: &RawPacket, offset: usize) -> Result<RawPacket> {
    if raw.bytes.len() <= offset {
        return Err(Error::Ingest(format!(
            "cannot strip {offset} bytes from a {}-byte packet",
            raw.bytes.len()
        )));
    }
    Ok(RawPacket {
        bytes: raw.bytes[offset..].to_vec(),
        capture_ts: raw.capture_ts,
        label: raw.label,
    })
}

/// Which partition a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    All,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::All => "all",
        }
    }
}

/// An immutable collection of normalized, labeled packets.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    packets: Vec<NormalizedPacket>,
    n_benign: usize,
    n_malicious: usize,
    split_tag: SplitTag,
}

impl LabeledDataset {
    /// Class counts are derived from the packets, so they cannot drift.
    pub fn new(packets: Vec<NormalizedPacket>, split_tag: SplitTag) -> Self {
        let n_benign = packets.iter().filter(|p| p.label == Label::Benign).count();
        let n_malicious = packets.len() - n_benign;
        LabeledDataset {
            packets,
            n_benign,
            n_malicious,
            split_tag,
        }
    }

    pub fn packets(&self) -> &[NormalizedPacket] {
        &self.packets
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Benign => self.n_benign,
            Label::Malicious => self.n_malicious,
        }
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    /// Packet length P, if the dataset is nonempty.
    pub fn packet_len(&self) -> Option<usize> {
        self.packets.first().map(|p| p.len())
    }

    /// Indices of packets with the given label, in dataset order.
    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.packets
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Recipe for a synthetic desk-scale corpus: malicious packets carry byte
/// values from `malicious_range` at the signature positions, benign packets
/// values from the disjoint `benign_range`; all other bytes are uniform
/// noise. Disjoint ranges make the classes separable by construction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_benign: usize,
    pub n_malicious: usize,
    pub p: usize,
    pub signature_positions: Vec<usize>,
    /// Inclusive byte range planted at signature positions of benign packets.
    pub benign_range: (u8, u8),
    /// Inclusive byte range planted at signature positions of malicious packets.
    pub malicious_range: (u8, u8),
    pub noise_seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Ingest("synth: packet length P must be >= 1".into()));
        }
        if self.n_benign + self.n_malicious == 0 {
            return Err(Error::Ingest("synth: at least one packet required".into()));
        }
        for &pos in &self.signature_positions {
            if pos >= self.p {
                return Err(Error::Ingest(format!(
                    "synth: signature position {pos} out of range for P={}",
                    self.p
                )));
            }
        }
        let (bl, bh) = self.benign_range;
        let (ml, mh) = self.malicious_range;
        if bl > bh || ml > mh {
            return Err(Error::Ingest("synth: byte range lo must be <= hi".into()));
        }
        if !self.signature_positions.is_empty() && bl <= mh && ml <= bh {
            return Err(Error::Ingest(format!(
                "synth: class byte ranges overlap ([{bl},{bh}] vs [{ml},{mh}]); classes would be inseparable by construction"
            )));
        }
        Ok(())
    }
}

/// Generate a labeled synthetic corpus. Bitwise deterministic under the
/// spec's noise seed.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let sig: BTreeSet<usize> = spec.signature_positions.iter().copied().collect();
    let mut rng = rng::stream(spec.noise_seed, "synth", &[]);
    let mut packets = Vec::with_capacity(spec.n_benign + spec.n_malicious);
    let emit = |label: Label, range: (u8, u8), rng: &mut rand_chacha::ChaCha8Rng| {
        let bytes: Vec<u8> = (0..spec.p)
            .map(|pos| {
                if sig.contains(&pos) {
                    rng.random_range(range.0..=range.1)
                } else {
                    rng.random::<u8>()
                }
            })
            .collect();
        NormalizedPacket {
            bytes,
            label,
            origin: Origin::Synthetic,
        }
    };
    for _ in 0..spec.n_benign {
        packets.push(emit(Label::Benign, spec.benign_range, &mut rng));
    }
    for _ in 0..spec.n_malicious {
        packets.push(emit(Label::Malicious, spec.malicious_range, &mut rng));
    }
    Ok(LabeledDataset::new(packets, SplitTag::All))
}

/// Stratified train/test split. Per-class train counts are
/// round(count * train_fraction); the partition is exact and deterministic
/// under the seed.
pub fn split_dataset(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Ingest(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, label) in [Label::Benign, Label::Malicious].into_iter().enumerate() {
        let mut idx = ds.indices_of(label);
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Ingest(format!(
                "class {} has {} member(s); need >= 2 to stratify",
                label.as_str(),
                idx.len()
            )));
        }
        let mut rng = rng::stream(seed, "split", &[class as u64]);
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize)
            .clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let collect = |idx: &[usize], tag| {
        LabeledDataset::new(idx.iter().map(|&i| ds.packets[i].clone()).collect(), tag)
    };
    Ok((
        collect(&train_idx, SplitTag::Train),
        collect(&test_idx, SplitTag::Test),
    ))
}

const ATKD_MAGIC: &[u8; 4] = b"ATKD";
const ATKD_VERSION: u16 = 1;

/// Persist a dataset in the flat binary container (magic "ATKD", version,
/// P, count, then one `label u8 + P bytes` record per packet), plus a
/// sidecar text manifest at `<path>.manifest` listing counts and provenance.
pub fn save_dataset(path: &Path, ds: &LabeledDataset, provenance: &str) -> Result<()> {
    let p = ds
        .packet_len()
        .ok_or_else(|| Error::Ingest("cannot save an empty dataset".into()))?;
    let mut buf = Vec::with_capacity(12 + ds.len() * (1 + p));
    buf.extend_from_slice(ATKD_MAGIC);
    buf.extend_from_slice(&ATKD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for pkt in ds.packets() {
        if pkt.len() != p {
            return Err(Error::Ingest("dataset has mixed packet lengths".into()));
        }
        buf.push(match pkt.label {
            Label::Benign => 0,
            Label::Malicious => 1,
        });
        buf.extend_from_slice(&pkt.bytes);
    }
    fs::write(path, &buf)?;
    let origin = match ds.packets()[0].origin {
        Origin::Synthetic => "synthetic",
        _ => "captured",
    };
    let manifest = format!(
        "format=atkd\nversion={ATKD_VERSION}\np={p}\ncount={}\nbenign={}\nmalicious={}\nsplit={}\norigin={origin}\nprovenance={provenance}\n",
        ds.len(),
        ds.count(Label::Benign),
        ds.count(Label::Malicious),
        ds.split_tag().as_str(),
    );
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest");
    std::path::PathBuf::from(s)
}

/// Load a dataset from the flat binary container.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let buf = fs::read(path)?;
    if buf.len() < 14 || &buf[0..4] != ATKD_MAGIC {
        return Err(Error::Ingest(format!(
            "{}: not a dataset container (bad magic)",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != ATKD_VERSION {
        return Err(Error::Ingest(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let p = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let expected = 14 + count * (1 + p);
    if buf.len() != expected {
        return Err(Error::Ingest(format!(
            "{}: container length {} does not match header (expected {expected})",
            path.display(),
            buf.len()
        )));
    }
    let origin = match fs::read_to_string(manifest_path(path)) {
        Ok(m) if m.lines().any(|l| l.trim() == "origin=synthetic") => Origin::Synthetic,
        _ => Origin::Captured,
    };
    let mut packets = Vec::with_capacity(count);
    let mut off = 14;
    for i in 0..count {
        let label = match buf[off] {
            0 => Label::Benign,
            1 => Label::Malicious,
            other => {
                return Err(Error::Ingest(format!(
                    "{}: record {i} has invalid label byte {other}",
                    path.display()
                )))
            }
        };
        packets.push(NormalizedPacket {
            bytes: buf[off + 1..off + 1 + p].to_vec(),
            label,
            origin,
        });
        off += 1 + p;
    }
    Ok(LabeledDataset::new(packets, SplitTag::All))
}

/// Normalize raw packets to length `p` under a single label.
pub fn normalize_all(
    raws: &[RawPacket],
    label: Label,
    p: usize,
) -> Result<Vec<NormalizedPacket>> {
    raws.iter()
        .map(|r| {
            let mut r = r.clone();
            r.label = Some(label);
            normalize_packet(&r, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn sample_records() -> Vec<PcapRecord> {
        vec![
            PcapRecord {
                ts_sec: 100,
                ts_usec: 5,
                captured_len: 4,
                original_len: 4,
                payload: vec![1, 2, 3, 4],
            },
            PcapRecord {
                ts_sec: 101,
                ts_usec: 0,
                captured_len: 2,
                original_len: 6,
                payload: vec![9, 8],
            },
            PcapRecord {
                ts_sec: 102,
                ts_usec: 999_999,
                captured_len: 6,
                original_len: 6,
                payload: vec![0, 0, 7, 7, 0, 0],
            },
        ]
    }

    #[test]
    fn pcap_round_trips_in_capture_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pcap");
        let records = sample_records();
        write_pcap(&path, &records, Endianness::Little).unwrap();
        let back = read_pcap_records(&path).unwrap();
        assert_eq!(back, records);
        let raws = read_pcap(&path).unwrap();
        assert_eq!(raws.len(), 3);
        assert_eq!(raws[0].bytes, vec![1, 2, 3, 4]);
        assert!((raws[0].capture_ts.unwrap() - 100.000005).abs() < 1e-9);
    }

    #[test]
    fn byte_swapped_magic_reads_identically() {
        let dir = tempdir().unwrap();
        let le = dir.path().join("le.pcap");
        let be = dir.path().join("be.pcap");
        let records = sample_records();
        write_pcap(&le, &records, Endianness::Little).unwrap();
        write_pcap(&be, &records, Endianness::Big).unwrap();
        assert_ne!(fs::read(&le).unwrap(), fs::read(&be).unwrap());
        assert_eq!(read_pcap_records(&le).unwrap(), read_pcap_records(&be).unwrap());
    }

    #[test]
    fn truncated_record_names_the_index() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pcap");
        write_pcap(&path, &sample_records(), Endianness::Little).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3); // cut into record 2's payload
        fs::write(&path, &bytes).unwrap();
        let err = read_pcap_records(&path).unwrap_err();
        assert!(err.to_string().contains("record 2"), "{err}");
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pcap");
        fs::write(&path, [0u8; 64]).unwrap();
        let err = read_pcap_records(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn strip_prefix_drops_link_layer() {
        let raw = RawPacket::new(vec![1, 2, 3, 4, 5], Some(Label::Benign));
        assert_eq!(strip_prefix(&raw, 2).unwrap().bytes, vec![3, 4, 5]);
        assert!(strip_prefix(&raw, 5).is_err());
    }

    fn toy_spec() -> SynthSpec {
        SynthSpec {
            n_benign: 100,
            n_malicious: 100,
            p: 64,
            signature_positions: vec![0, 1],
            benign_range: (0, 99),
            malicious_range: (156, 255),
            noise_seed: 7,
        }
    }

    #[test]
    fn synthesis_is_bitwise_deterministic() {
        let a = synthesize_corpus(&toy_spec()).unwrap();
        let b = synthesize_corpus(&toy_spec()).unwrap();
        assert_eq!(a.packets(), b.packets());
    }

    /// Depth-1 stump on one signature byte must already separate the classes.
    #[test]
    fn stump_reaches_perfect_train_accuracy() {
        let ds = synthesize_corpus(&toy_spec()).unwrap();
        let values: Vec<(u8, Label)> = ds
            .packets()
            .iter()
            .map(|p| (p.bytes[0], p.label))
            .collect();
        let mut best = 0usize;
        for threshold in 0..=255u16 {
            let correct = values
                .iter()
                .filter(|(v, l)| {
                    let predicted = if (*v as u16) <= threshold {
                        Label::Benign
                    } else {
                        Label::Malicious
                    };
                    predicted == *l
                })
                .count();
            best = best.max(correct);
        }
        assert_eq!(best, ds.len(), "stump should reach 100% train accuracy");
    }

    #[test]
    fn empty_malicious_class_is_allowed() {
        let mut spec = toy_spec();
        spec.n_malicious = 0;
        let ds = synthesize_corpus(&spec).unwrap();
        assert_eq!(ds.count(Label::Malicious), 0);
        assert_eq!(ds.count(Label::Benign), 100);
    }

    #[test]
    fn overlapping_class_ranges_are_rejected() {
        let mut spec = toy_spec();
        spec.malicious_range = (90, 200);
        assert!(synthesize_corpus(&spec).is_err());
    }

    #[test]
    fn split_reproduces_published_corpus_counts() {
        let mut packets = Vec::new();
        for i in 0..58_532usize {
            packets.push(NormalizedPacket {
                bytes: vec![(i % 256) as u8; 8],
                label: if i < 18_532 {
                    Label::Malicious
                } else {
                    Label::Benign
                },
                origin: Origin::Synthetic,
            });
        }
        let ds = LabeledDataset::new(packets, SplitTag::All);
        let (train, test) = split_dataset(&ds, 0.75, 3).unwrap();
        assert_eq!(train.count(Label::Malicious), 13_899);
        assert_eq!(test.count(Label::Malicious), 4_633);
        assert_eq!(train.count(Label::Benign), 30_000);
        assert_eq!(test.count(Label::Benign), 10_000);
    }

    #[test]
    fn split_half_and_half() {
        let mut spec = toy_spec();
        spec.n_benign = 10;
        spec.n_malicious = 10;
        let ds = synthesize_corpus(&spec).unwrap();
        let (train, test) = split_dataset(&ds, 0.5, 1).unwrap();
        assert_eq!(train.count(Label::Benign), 5);
        assert_eq!(train.count(Label::Malicious), 5);
        assert_eq!(test.count(Label::Benign), 5);
        assert_eq!(test.count(Label::Malicious), 5);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ds = synthesize_corpus(&toy_spec()).unwrap();
        let (tr1, te1) = split_dataset(&ds, 0.7, 11).unwrap();
        let (tr2, te2) = split_dataset(&ds, 0.7, 11).unwrap();
        assert_eq!(tr1.packets(), tr2.packets());
        assert_eq!(te1.packets(), te2.packets());
        assert_eq!(tr1.len() + te1.len(), ds.len());
        // multiset union equals the dataset
        let key = |p: &NormalizedPacket| (p.bytes.clone(), p.label);
        let mut counts: BTreeMap<_, i64> = BTreeMap::new();
        for p in ds.packets() {
            *counts.entry(key(p)).or_default() += 1;
        }
        for p in tr1.packets().iter().chain(te1.packets()) {
            *counts.entry(key(p)).or_default() -= 1;
        }
        assert!(counts.values().all(|&c| c == 0));
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let mut spec = toy_spec();
        spec.n_malicious = 1;
        let ds = synthesize_corpus(&spec).unwrap();
        assert!(split_dataset(&ds, 0.5, 1).is_err());
    }

    #[test]
    fn dataset_container_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.atkd");
        let ds = synthesize_corpus(&toy_spec()).unwrap();
        save_dataset(&path, &ds, "synthetic seed=7").unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.packets(), ds.packets());
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("benign=100"));
        assert!(manifest.contains("malicious=100"));
        assert!(manifest.contains("provenance=synthetic seed=7"));
    }

    #[test]
    fn container_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.atkd");
        let ds = synthesize_corpus(&toy_spec()).unwrap();
        save_dataset(&path, &ds, "x").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
