//! Client↔server wire messages and byte accounting.
//!
//! Every frame starts with the same 20-byte little-endian header:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 1    | tag: frame format (high nibble) + kind |
//! | 1      | 3    | round (u24)                            |
//! | 4      | 2    | client id                              |
//! | 6      | 4    | iteration                              |
//! | 10     | 2    | batch `B`                              |
//! | 12     | 2    | total channels `N`                     |
//! | 14     | 2    | kept channels `k`                      |
//! | 16     | 2    | height `H`                             |
//! | 18     | 2    | width `W`                              |
//!
//! A channel frame ([`WireMessage`]) continues with `k` u16 kept indices and
//! `B*k*H*W` f32 values, channel-major in kept order. The sparse and quantized
//! baseline frames reuse the header with their own bodies.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 20;
pub const MAX_ROUND: u32 = 0x00FF_FFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    /// Client → server activations.
    Smashed,
    /// Server → client gradients.
    Gradient,
}

impl MessageKind {
    pub fn direction(self) -> Direction {
        match self {
            MessageKind::Smashed => Direction::Uplink,
            MessageKind::Gradient => Direction::Downlink,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameFormat {
    Channels,
    Sparse,
    Quantized,
}

impl FrameFormat {
    fn nibble(self) -> u8 {
        match self {
            FrameFormat::Channels => 0xC,
            FrameFormat::Sparse => 0x5,
            FrameFormat::Quantized => 0x9,
        }
    }
}

pub fn encode_tag(format: FrameFormat, kind: MessageKind) -> u8 {
    let k = match kind {
        MessageKind::Smashed => 0x3,
        MessageKind::Gradient => 0xA,
    };
    format.nibble() << 4 | k
}

pub fn decode_tag(tag: u8) -> Result<(FrameFormat, MessageKind)> {
    let format = match tag >> 4 {
        0xC => FrameFormat::Channels,
        0x5 => FrameFormat::Sparse,
        0x9 => FrameFormat::Quantized,
        other => {
            return Err(Error::Deserialize(format!(
                "unknown frame format nibble {other:#x}"
            )))
        }
    };
    let kind = match tag & 0xF {
        0x3 => MessageKind::Smashed,
        0xA => MessageKind::Gradient,
        other => {
            return Err(Error::Deserialize(format!(
                "unknown message kind {other:#x}"
            )))
        }
    };
    Ok((format, kind))
}

/// Addressing fields common to every frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Envelope {
    pub round: u32,
    pub client_id: u16,
    pub iteration: u32,
}

/// Decoded fixed header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub format: FrameFormat,
    pub kind: MessageKind,
    pub envelope: Envelope,
    pub batch: u16,
    pub channels: u16,
    pub kept: u16,
    pub height: u16,
    pub width: u16,
}

impl FrameHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        debug_assert!(self.envelope.round <= MAX_ROUND);
        out.push(encode_tag(self.format, self.kind));
        out.extend_from_slice(&self.envelope.round.to_le_bytes()[..3]);
        out.extend_from_slice(&self.envelope.client_id.to_le_bytes());
        out.extend_from_slice(&self.envelope.iteration.to_le_bytes());
        for v in [
            self.batch,
            self.channels,
            self.kept,
            self.height,
            self.width,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Deserialize(format!(
                "frame of {} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        let (format, kind) = decode_tag(bytes[0])?;
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let header = FrameHeader {
            format,
            kind,
            envelope: Envelope {
                round: u32::from_le_bytes([bytes[1], bytes[2], bytes[3], 0]),
                client_id: u16_at(4),
                iteration: u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]),
            },
            batch: u16_at(10),
            channels: u16_at(12),
            kept: u16_at(14),
            height: u16_at(16),
            width: u16_at(18),
        };
        if header.batch == 0 || header.channels == 0 || header.height == 0 || header.width == 0 {
            return Err(Error::Deserialize("zero dimension in frame header".into()));
        }
        Ok(header)
    }

    /// `(B, N, H, W)` of the tensor this frame reconstructs to.
    pub fn tensor_shape(&self) -> [usize; 4] {
        [
            self.batch as usize,
            self.channels as usize,
            self.height as usize,
            self.width as usize,
        ]
    }

    /// Builds a header for a `(B, N, H, W)` tensor, checking every field fits.
    pub fn for_tensor(
        format: FrameFormat,
        kind: MessageKind,
        envelope: Envelope,
        shape: &[usize],
        kept: usize,
    ) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::Protocol(format!(
                "expected a 4-d tensor, got shape {shape:?}"
            )));
        }
        if envelope.round > MAX_ROUND {
            return Err(Error::Protocol(format!(
                "round {} exceeds {MAX_ROUND}",
                envelope.round
            )));
        }
        let narrow = |v: usize, what: &str| -> Result<u16> {
            u16::try_from(v)
                .ok()
                .filter(|&v| v > 0 || what == "kept")
                .ok_or_else(|| {
                    Error::Protocol(format!("{what} = {v} does not fit the wire header"))
                })
        };
        Ok(FrameHeader {
            format,
            kind,
            envelope,
            batch: narrow(shape[0], "batch")?,
            channels: narrow(shape[1], "channels")?,
            kept: narrow(kept, "kept")?,
            height: narrow(shape[2], "height")?,
            width: narrow(shape[3], "width")?,
        })
    }
}

/// Something that travels over a simulated link.
pub trait Frame: Sized {
    fn to_bytes(&self) -> Vec<u8>;
    fn from_bytes(bytes: &[u8]) -> Result<Self>;
    /// Bytes of tensor content, excluding header and index/side information.
    fn payload_len(&self) -> usize;
    /// Receiver-side full-shape reconstruction.
    fn reconstruct(&self) -> Result<Tensor<f32>>;
}

/// Channel-pruned smashed data or gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub envelope: Envelope,
    pub batch: u16,
    pub total_channels: u16,
    pub height: u16,
    pub width: u16,
    pub kept_indices: Vec<u16>,
    /// `B*k*H*W` values, channel-major in kept order.
    pub payload: Vec<f32>,
}

impl WireMessage {
    pub fn kept_count(&self) -> usize {
        self.kept_indices.len()
    }

    /// `20 + 2k + 4*B*k*H*W`.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 2 * self.kept_count() + 4 * self.payload.len()
    }

    fn map_len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    /// Checks the structural invariants: indices strictly increasing and below
    /// `N`, at least one kept channel, and a payload of the right length.
    pub fn validate(&self) -> Result<()> {
        if self.kept_indices.is_empty() {
            return Err(Error::Protocol(
                "a channel frame must keep at least one channel".into(),
            ));
        }
        if self.batch == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Protocol("zero dimension in channel frame".into()));
        }
        if self.kept_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Protocol(
                "kept indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.kept_indices.last() {
            if last >= self.total_channels {
                return Err(Error::Protocol(format!(
                    "kept index {last} out of range for {} channels",
                    self.total_channels
                )));
            }
        }
        let expected = self.batch as usize * self.kept_count() * self.map_len();
        if self.payload.len() != expected {
            return Err(Error::Protocol(format!(
                "payload has {} values, expected {expected}",
                self.payload.len()
            )));
        }
        Ok(())
    }
}

impl Frame for WireMessage {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        FrameHeader {
            format: FrameFormat::Channels,
            kind: self.kind,
            envelope: self.envelope,
            batch: self.batch,
            channels: self.total_channels,
            kept: self.kept_count() as u16,
            height: self.height,
            width: self.width,
        }
        .write(&mut out);
        for idx in &self.kept_indices {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = FrameHeader::read(bytes)?;
        if header.format != FrameFormat::Channels {
            return Err(Error::Deserialize(format!(
                "expected a channel frame, got {:?}",
                header.format
            )));
        }
        let k = header.kept as usize;
        if k == 0 || k > header.channels as usize {
            return Err(Error::Deserialize(format!(
                "kept count {k} invalid for {} channels",
                header.channels
            )));
        }
        let values = header.batch as usize * k * header.height as usize * header.width as usize;
        let expected = HEADER_LEN + 2 * k + 4 * values;
        if bytes.len() != expected {
            return Err(Error::Deserialize(format!(
                "channel frame length {} does not match header ({expected})",
                bytes.len()
            )));
        }
        let kept_indices = bytes[HEADER_LEN..HEADER_LEN + 2 * k]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let payload = bytes[HEADER_LEN + 2 * k..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let msg = WireMessage {
            kind: header.kind,
            envelope: header.envelope,
            batch: header.batch,
            total_channels: header.channels,
            height: header.height,
            width: header.width,
            kept_indices,
            payload,
        };
        msg.validate()
            .map_err(|e| Error::Deserialize(e.to_string()))?;
        Ok(msg)
    }

    fn payload_len(&self) -> usize {
        4 * self.payload.len()
    }

    fn reconstruct(&self) -> Result<Tensor<f32>> {
        unpack_zero_fill(self)
    }
}

/// Copies the `kept` channels of a `(B, N, H, W)` tensor into a channel frame.
pub fn pack(
    tensor: &Tensor<f32>,
    kept: &[usize],
    kind: MessageKind,
    envelope: Envelope,
) -> Result<WireMessage> {
    let header = FrameHeader::for_tensor(
        FrameFormat::Channels,
        kind,
        envelope,
        tensor.shape(),
        kept.len(),
    )?;
    let [batch, channels, h, w] = header.tensor_shape();
    if kept.is_empty() {
        return Err(Error::Protocol(
            "a channel frame must keep at least one channel".into(),
        ));
    }
    for pair in kept.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Protocol(
                "kept indices must be strictly increasing".into(),
            ));
        }
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= channels) {
        return Err(Error::Protocol(format!(
            "kept index {bad} out of range for {channels} channels"
        )));
    }
    let hw = h * w;
    let src = tensor.data();
    let mut payload = Vec::with_capacity(batch * kept.len() * hw);
    for &c in kept {
        for b in 0..batch {
            let start = (b * channels + c) * hw;
            payload.extend_from_slice(&src[start..start + hw]);
        }
    }
    Ok(WireMessage {
        kind,
        envelope,
        batch: header.batch,
        total_channels: header.channels,
        height: header.height,
        width: header.width,
        kept_indices: kept.iter().map(|&i| i as u16).collect(),
        payload,
    })
}

/// Rebuilds the full `(B, N, H, W)` tensor with pruned channels set to zero.
pub fn unpack_zero_fill(msg: &WireMessage) -> Result<Tensor<f32>> {
    msg.validate()?;
    let (batch, channels, hw) = (
        msg.batch as usize,
        msg.total_channels as usize,
        msg.map_len(),
    );
    let mut out = Tensor::zeros(&[batch, channels, msg.height as usize, msg.width as usize]);
    let dst = out.data_mut();
    for (slot, &c) in msg.kept_indices.iter().enumerate() {
        for b in 0..batch {
            let src = &msg.payload[(slot * batch + b) * hw..][..hw];
            dst[(b * channels + c as usize) * hw..][..hw].copy_from_slice(src);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Client → server.
    Uplink,
    /// Server → client.
    Downlink,
}

/// Cumulative bytes per direction, total and tensor payload only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteLedger {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub uplink_payload_bytes: u64,
    pub downlink_payload_bytes: u64,
    pub messages: u64,
}

impl ByteLedger {
    pub fn record(&mut self, direction: Direction, encoded_len: usize, payload_len: usize) {
        self.messages += 1;
        match direction {
            Direction::Uplink => {
                self.uplink_bytes += encoded_len as u64;
                self.uplink_payload_bytes += payload_len as u64;
            }
            Direction::Downlink => {
                self.downlink_bytes += encoded_len as u64;
                self.downlink_payload_bytes += payload_len as u64;
            }
        }
    }

    pub fn record_message(&mut self, msg: &WireMessage) {
        self.record(msg.kind.direction(), msg.encoded_len(), msg.payload_len());
    }

    pub fn total_bytes(&self) -> u64 {
        self.uplink_bytes + self.downlink_bytes
    }
}

/// In-process link: every frame is serialized, counted, optionally traced, and
/// decoded again on the receiving side.
#[derive(Debug, Default)]
pub struct SimulatedLink {
    ledger: ByteLedger,
    trace: Option<Vec<u8>>,
}

impl SimulatedLink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trace() -> Self {
        SimulatedLink {
            ledger: ByteLedger::default(),
            trace: Some(Vec::new()),
        }
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    /// Length-prefixed concatenation of every frame sent, if tracing.
    pub fn trace(&self) -> Option<&[u8]> {
        self.trace.as_deref()
    }

    pub fn transmit<F: Frame>(&mut self, direction: Direction, frame: &F) -> Result<F> {
        let bytes = frame.to_bytes();
        self.ledger
            .record(direction, bytes.len(), frame.payload_len());
        if let Some(trace) = &mut self.trace {
            append_trace(trace, &bytes)?;
        }
        F::from_bytes(&bytes)
    }
}

/// Appends one `u32` length-prefixed record to a trace.
pub fn append_trace<W: Write>(mut out: W, frame: &[u8]) -> io::Result<()> {
    let len = u32::try_from(frame.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame larger than 4 GiB"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(frame)
}

/// Splits a trace back into frames.
pub fn read_trace(mut bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(Error::Deserialize("truncated trace length prefix".into()));
        }
        let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        bytes = &bytes[4..];
        if bytes.len() < len {
            return Err(Error::Deserialize("truncated trace record".into()));
        }
        frames.push(bytes[..len].to_vec());
        bytes = &bytes[len..];
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: [usize; 4]) -> Tensor<f32> {
        Tensor::from_fn(&shape, |i| i as f32 * 0.5 - 3.0)
    }

    #[test]
    fn small_frame_is_38_bytes() {
        let msg = pack(
            &tensor([1, 4, 2, 2]),
            &[2],
            MessageKind::Smashed,
            Envelope::default(),
        )
        .unwrap();
        assert_eq!(msg.payload_len(), 16);
        assert_eq!(msg.encoded_len(), 38);
        assert_eq!(msg.to_bytes().len(), 38);
    }

    #[test]
    fn minimal_frame_is_26_bytes() {
        let msg = pack(
            &tensor([1, 1, 1, 1]),
            &[0],
            MessageKind::Gradient,
            Envelope::default(),
        )
        .unwrap();
        assert_eq!(msg.to_bytes().len(), 26);
    }

    #[test]
    fn keep_all_round_trips_exactly() {
        let t = tensor([2, 3, 2, 3]);
        let msg = pack(&t, &[0, 1, 2], MessageKind::Smashed, Envelope::default()).unwrap();
        assert_eq!(msg.encoded_len(), 20 + 2 * 3 + 4 * 2 * 3 * 2 * 3);
        assert_eq!(unpack_zero_fill(&msg).unwrap(), t);
    }

    #[test]
    fn one_of_four_leaves_three_zero_channels() {
        let t = tensor([2, 4, 2, 2]).map(|v| v + 100.0);
        let msg = pack(&t, &[1], MessageKind::Smashed, Envelope::default()).unwrap();
        let back = unpack_zero_fill(&msg).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let s = &back.data()[(b * 4 + c) * 4..][..4];
                if c == 1 {
                    assert_eq!(s, &t.data()[(b * 4 + c) * 4..][..4]);
                } else {
                    assert!(s.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn pack_rejects_bad_indices() {
        let t = tensor([1, 4, 1, 1]);
        let env = Envelope::default();
        assert!(pack(&t, &[4], MessageKind::Smashed, env).is_err());
        assert!(pack(&t, &[2, 1], MessageKind::Smashed, env).is_err());
        assert!(pack(&t, &[], MessageKind::Smashed, env).is_err());
    }

    #[test]
    fn deserialize_rejects_truncation_and_bad_tag() {
        let msg = pack(
            &tensor([1, 2, 2, 2]),
            &[0, 1],
            MessageKind::Smashed,
            Envelope::default(),
        )
        .unwrap();
        let bytes = msg.to_bytes();
        assert!(WireMessage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(WireMessage::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0x00;
        assert!(WireMessage::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(WireMessage::from_bytes(&extra).is_err());
    }

    #[test]
    fn ledger_counts_exact_sizes() {
        let mut ledger = ByteLedger::default();
        let msg = pack(
            &tensor([1, 4, 2, 2]),
            &[0],
            MessageKind::Smashed,
            Envelope::default(),
        )
        .unwrap();
        ledger.record_message(&msg);
        assert_eq!((ledger.uplink_bytes, ledger.downlink_bytes), (38, 0));
        ledger.record_message(&msg);
        assert_eq!(ledger.uplink_bytes, 76);
    }

    #[test]
    fn link_traces_frames() {
        let mut link = SimulatedLink::with_trace();
        let msg = pack(
            &tensor([1, 2, 1, 1]),
            &[1],
            MessageKind::Smashed,
            Envelope::default(),
        )
        .unwrap();
        let got = link.transmit(Direction::Uplink, &msg).unwrap();
        assert_eq!(got, msg);
        let frames = read_trace(link.trace().unwrap()).unwrap();
        assert_eq!(frames, vec![msg.to_bytes()]);
        assert!(read_trace(&[1, 0, 0]).is_err());
    }

    #[test]
    fn round_is_limited_to_24_bits() {
        let env = Envelope {
            round: MAX_ROUND + 1,
            ..Envelope::default()
        };
        assert!(pack(&tensor([1, 1, 1, 1]), &[0], MessageKind::Smashed, env).is_err());
    }
}
