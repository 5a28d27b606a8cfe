//! Packet representation: fixed-length normalization, tokenization under
//! one-byte and two-byte granularities, and constraint masks that pin
//! attack-functional bytes to a template packet.

use std::collections::BTreeSet;

use crate::{Error, Result};

/// Class label carried by a packet.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

/// Where a packet came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    Captured,
    Synthetic,
    Generated,
}

/// Tokenization granularity: each token is one octet (V=256) or an octet
/// pair (V=65536).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Granularity {
    OneByte,
    TwoByte,
}

impl Granularity {
    pub fn vocab_size(&self) -> usize {
        match self {
            Granularity::OneByte => 256,
            Granularity::TwoByte => 65536,
        }
    }

    pub fn bytes_per_token(&self) -> usize {
        match self {
            Granularity::OneByte => 1,
            Granularity::TwoByte => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::OneByte => "one_byte",
            Granularity::TwoByte => "two_byte",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_byte" => Ok(Granularity::OneByte),
            "two_byte" => Ok(Granularity::TwoByte),
            other => Err(Error::Packet(format!(
                "unknown granularity {other:?} (expected one_byte or two_byte)"
            ))),
        }
    }
}

/// Token vocabulary for a granularity. Token 0 doubles as the padding token
/// and as an ordinary data byte; there is no sentinel.
#[derive(Debug, Clone, Copy)]
pub struct Vocabulary {
    pub granularity: Granularity,
}

impl Vocabulary {
    pub const PADDING: u32 = 0;

    pub fn new(granularity: Granularity) -> Self {
        Vocabulary { granularity }
    }

    pub fn size(&self) -> usize {
        self.granularity.vocab_size()
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.size()
    }
}

/// A captured packet before normalization: a variable-length byte string,
/// an optional capture timestamp (seconds since epoch), and a label that may
/// still be unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPacket {
    pub bytes: Vec<u8>,
    pub capture_ts: Option<f64>,
    pub label: Option<Label>,
}

impl RawPacket {
    pub fn new(bytes: Vec<u8>, label: Option<Label>) -> Self {
        RawPacket {
            bytes,
            capture_ts: None,
            label,
        }
    }
}

/// A packet rescaled to exactly `P` bytes: truncated if longer, zero-padded
/// if shorter. The unit of all training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedPacket {
    pub bytes: Vec<u8>,
    pub label: Label,
    pub origin: Origin,
}

impl NormalizedPacket {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// A packet viewed as vocabulary indices under a granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub granularity: Granularity,
}

impl TokenSequence {
    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Packet length in bytes represented by this sequence.
    pub fn packet_len(&self) -> usize {
        self.tokens.len() * self.granularity.bytes_per_token()
    }
}

/// Rescale a raw packet to exactly `p` bytes, keeping the prefix and padding
/// with zero bytes. The label must be resolved before normalization.
pub fn normalize_packet(raw: &RawPacket, p: usize) -> Result<NormalizedPacket> {
    if p == 0 {
        return Err(Error::Packet("packet length P must be >= 1".into()));
    }
    if raw.bytes.is_empty() {
        return Err(Error::Packet("cannot normalize an empty packet".into()));
    }
    let label = raw
        .label
        .ok_or_else(|| Error::Packet("cannot normalize an unlabeled packet".into()))?;
    let mut bytes = vec![0u8; p];
    let keep = raw.bytes.len().min(p);
    bytes[..keep].copy_from_slice(&raw.bytes[..keep]);
    Ok(NormalizedPacket {
        bytes,
        label,
        origin: Origin::Captured,
    })
}

/// View a normalized packet as a token sequence. Two-byte tokens pair
/// adjacent octets big-endian: token_i = byte_{2i} * 256 + byte_{2i+1},
/// matching network byte order of multi-octet header fields.
pub fn tokenize(pkt: &NormalizedPacket, granularity: Granularity) -> Result<TokenSequence> {
    let tokens = match granularity {
        Granularity::OneByte => pkt.bytes.iter().map(|&b| b as u32).collect(),
        Granularity::TwoByte => {
            if pkt.len() % 2 != 0 {
                return Err(Error::Packet(format!(
                    "two_byte tokenization requires even P, got {}",
                    pkt.len()
                )));
            }
            pkt.bytes
                .chunks_exact(2)
                .map(|pair| (pair[0] as u32) * 256 + pair[1] as u32)
                .collect()
        }
    };
    Ok(TokenSequence {
        tokens,
        granularity,
    })
}

/// Invert [`tokenize`]. The output is labeled malicious with
/// origin=Generated: detokenization is only reached for generator output;
/// real packets keep their own `NormalizedPacket`.
pub fn detokenize(seq: &TokenSequence, p: usize) -> Result<NormalizedPacket> {
    let vocab = Vocabulary::new(seq.granularity);
    if seq.packet_len() != p {
        return Err(Error::Packet(format!(
            "token sequence covers {} bytes, expected P={p}",
            seq.packet_len()
        )));
    }
    let mut bytes = Vec::with_capacity(p);
    for &t in &seq.tokens {
        if !vocab.contains(t) {
            return Err(Error::Packet(format!(
                "token {t} out of range for vocabulary size {}",
                vocab.size()
            )));
        }
        match seq.granularity {
            Granularity::OneByte => bytes.push(t as u8),
            Granularity::TwoByte => {
                bytes.push((t / 256) as u8);
                bytes.push((t % 256) as u8);
            }
        }
    }
    Ok(NormalizedPacket {
        bytes,
        label: Label::Malicious,
        origin: Origin::Generated,
    })
}

/// The set of byte positions pinned to a template packet so generated
/// packets retain attack-functional bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMask {
    fixed_byte_positions: BTreeSet<usize>,
    template: NormalizedPacket,
    granularity: Granularity,
}

impl ConstraintMask {
    /// Number of fixed bytes (after any pair expansion).
    pub fn mu(&self) -> usize {
        self.fixed_byte_positions.len()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn template(&self) -> &NormalizedPacket {
        &self.template
    }

    pub fn packet_len(&self) -> usize {
        self.template.len()
    }

    /// Number of tokens in sequences this mask applies to.
    pub fn token_len(&self) -> usize {
        self.template.len() / self.granularity.bytes_per_token()
    }

    pub fn fixed_byte_positions(&self) -> &BTreeSet<usize> {
        &self.fixed_byte_positions
    }

    /// Token indices that are fixed under this mask's granularity.
    pub fn fixed_token_positions(&self) -> BTreeSet<usize> {
        let bpt = self.granularity.bytes_per_token();
        self.fixed_byte_positions.iter().map(|&p| p / bpt).collect()
    }

    /// The template's token at a fixed token position.
    pub fn template_token(&self, token_pos: usize) -> u32 {
        match self.granularity {
            Granularity::OneByte => self.template.bytes[token_pos] as u32,
            Granularity::TwoByte => {
                (self.template.bytes[2 * token_pos] as u32) * 256
                    + self.template.bytes[2 * token_pos + 1] as u32
            }
        }
    }

    /// True when `seq` carries the template's value at every fixed position.
    pub fn is_satisfied_by(&self, seq: &TokenSequence) -> bool {
        seq.granularity == self.granularity
            && seq.len() == self.token_len()
            && self
                .fixed_token_positions()
                .iter()
                .all(|&tp| seq.tokens[tp] == self.template_token(tp))
    }
}

/// Build a constraint mask over `positions` of the template. Under two-byte
/// granularity, positions given on odd boundaries are expanded to the whole
/// octet pair so masks align to tokens; `mu` reports the expanded count.
pub fn build_mask(
    template: &NormalizedPacket,
    positions: &BTreeSet<usize>,
    granularity: Granularity,
) -> Result<ConstraintMask> {
    let p = template.len();
    if granularity == Granularity::TwoByte && p % 2 != 0 {
        return Err(Error::Packet(format!(
            "two_byte mask requires even P, got {p}"
        )));
    }
    let mut fixed = BTreeSet::new();
    for &pos in positions {
        if pos >= p {
            return Err(Error::Packet(format!(
                "mask position {pos} out of range for P={p}"
            )));
        }
        fixed.insert(pos);
        if granularity == Granularity::TwoByte {
            fixed.insert(pos ^ 1);
        }
    }
    Ok(ConstraintMask {
        fixed_byte_positions: fixed,
        template: template.clone(),
        granularity,
    })
}

/// Overwrite the masked positions of `seq` with the template's tokens.
pub fn apply_mask(seq: &TokenSequence, mask: &ConstraintMask) -> Result<TokenSequence> {
    if seq.granularity != mask.granularity() {
        return Err(Error::Packet(format!(
            "granularity mismatch: sequence {}, mask {}",
            seq.granularity.as_str(),
            mask.granularity().as_str()
        )));
    }
    if seq.len() != mask.token_len() {
        return Err(Error::Packet(format!(
            "length mismatch: sequence {} tokens, mask {}",
            seq.len(),
            mask.token_len()
        )));
    }
    let mut tokens = seq.tokens.clone();
    for tp in mask.fixed_token_positions() {
        tokens[tp] = mask.template_token(tp);
    }
    Ok(TokenSequence {
        tokens,
        granularity: seq.granularity,
    })
}

/// Post-generation validator: checks that a generated packet carries the
/// template's bytes at every masked position. Constraint enforcement is the
/// mask itself; this re-checks the emitted bytes independently.
pub fn validate_against_mask(pkt: &NormalizedPacket, mask: &ConstraintMask) -> Result<()> {
    if pkt.len() != mask.packet_len() {
        return Err(Error::Packet(format!(
            "length mismatch: packet {} bytes, mask {}",
            pkt.len(),
            mask.packet_len()
        )));
    }
    for &pos in mask.fixed_byte_positions() {
        if pkt.bytes[pos] != mask.template().bytes[pos] {
            return Err(Error::Packet(format!(
                "constraint violation at byte {pos}: got 0x{:02x}, template 0x{:02x}",
                pkt.bytes[pos],
                mask.template().bytes[pos]
            )));
        }
    }
    Ok(())
}
