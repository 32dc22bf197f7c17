//! Wire messages, low-level adapter selection, the `.fsca` binary format and
//! the communication ledger.
//!
//! Byte layout of a serialized parameter record (all little-endian):
//!
//! ```text
//! magic        4 bytes   "FSCA"
//! version      u32       1
//! layer_count  u32
//! layer table  layer_count x (index: u32, length: u64)
//! payload      8 x total_length bytes of f64, layer-major
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter_net::ToyFM;
use crate::error::{Error, Result};
use crate::numerics::{FlatParams, LayerSpan};

pub const MAGIC: [u8; 4] = *b"FSCA";
pub const FORMAT_VERSION: u32 = 1;
const FIXED_HEADER: usize = 12;
const LAYER_ENTRY: usize = 12;

/// Size in bytes of the header for `layers` manifest entries.
pub fn header_len(layers: usize) -> usize {
    FIXED_HEADER + LAYER_ENTRY * layers
}

/// Adapter layers `1..=layers` of `model`, the only part that leaves a client.
pub fn select_for_transmission(model: &ToyFM, layers: usize) -> Result<FlatParams> {
    model.low_params(layers)
}

pub fn serialize(p: &FlatParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(p.manifest().len()) + 8 * p.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.manifest().len() as u32).to_le_bytes());
    for span in p.manifest() {
        out.extend_from_slice(&span.layer.to_le_bytes());
        out.extend_from_slice(&(span.len as u64).to_le_bytes());
    }
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::decode(
                field,
                format!("truncated: need {n} bytes at offset {}, have {}", self.at, self.bytes.len() - self.at),
            )
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Parses a record produced by [`serialize`]. Rejects bad magic, unknown
/// versions, truncation, trailing bytes and non-finite values.
pub fn deserialize(bytes: &[u8]) -> Result<FlatParams> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::decode("magic", "not an FSCA record"));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::decode("version", format!("unsupported format version {version}")));
    }
    let layers = cur.u32("layer_count")? as usize;
    let mut manifest = Vec::with_capacity(layers.min(bytes.len() / LAYER_ENTRY));
    let mut total: usize = 0;
    for _ in 0..layers {
        let layer = cur.u32("layer_table")?;
        let len = usize::try_from(cur.u64("layer_table")?)
            .map_err(|_| Error::decode("layer_table", "layer length overflows"))?;
        total = total
            .checked_add(len)
            .ok_or_else(|| Error::decode("layer_table", "total length overflows"))?;
        manifest.push(LayerSpan { layer, len });
    }
    let expected = total
        .checked_mul(8)
        .ok_or_else(|| Error::decode("layer_table", "payload size overflows"))?;
    let remaining = bytes.len() - cur.at;
    if remaining != expected {
        return Err(Error::decode(
            "payload",
            format!("expected {expected} payload bytes, found {remaining}"),
        ));
    }
    let values = cur.bytes[cur.at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlatParams::new(values, manifest).map_err(|e| Error::decode("payload", e.to_string()))
}

pub fn write_checkpoint(path: &Path, p: &FlatParams) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&serialize(p)))
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<FlatParams> {
    deserialize(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A serialized parameter record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedParams(Vec<u8>);

impl SerializedParams {
    pub fn encode(p: &FlatParams) -> Self {
        SerializedParams(serialize(p))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn decode(&self) -> Result<FlatParams> {
        deserialize(&self.0)
    }

    /// Parameter scalars carried, read from the header.
    pub fn scalar_count(&self) -> Result<usize> {
        Ok(self.decode()?.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Broadcast,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Upload => "upload",
            Direction::Broadcast => "broadcast",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: Direction,
    pub client_id: usize,
    pub round: usize,
    pub payload: SerializedParams,
}

impl WireMessage {
    pub fn new(kind: Direction, client_id: usize, round: usize, params: &FlatParams) -> Self {
        WireMessage {
            kind,
            client_id,
            round,
            payload: SerializedParams::encode(params),
        }
    }

    /// Decodes the payload and checks it is exactly adapter layers `1..=layers`.
    pub fn open(&self, layers: usize) -> Result<FlatParams> {
        let p = self.payload.decode()?;
        let ok = p.manifest().len() == layers
            && p.manifest().iter().enumerate().all(|(i, s)| s.layer as usize == i + 1);
        if !ok {
            return Err(Error::protocol(format!(
                "{} from client {} carries layers {:?}, expected 1..={layers}",
                self.kind.as_str(),
                self.client_id,
                p.manifest().iter().map(|s| s.layer).collect::<Vec<_>>()
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub direction: Direction,
    pub client_id: usize,
    pub scalar_count: usize,
}

/// Count of transmitted parameter scalars, per message and in total.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    total: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        CommLedger::default()
    }

    pub fn record(&mut self, msg: &WireMessage) -> Result<()> {
        let scalar_count = msg.payload.scalar_count()?;
        self.entries.push(LedgerEntry {
            round: msg.round,
            direction: msg.kind,
            client_id: msg.client_id,
            scalar_count,
        });
        self.total += scalar_count as u64;
        Ok(())
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        let total = entries.iter().map(|e| e.scalar_count as u64).sum();
        CommLedger { entries, total }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Total through the end of `round`.
    pub fn total_through(&self, round: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round <= round)
            .map(|e| e.scalar_count as u64)
            .sum()
    }

    /// CSV with columns `round,direction,client_id,scalar_count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::io("<ledger csv>", std::io::Error::other(e));
        w.write_record(["round", "direction", "client_id", "scalar_count"])
            .map_err(to_err)?;
        for e in &self.entries {
            w.write_record([
                e.round.to_string(),
                e.direction.as_str().to_string(),
                e.client_id.to_string(),
                e.scalar_count.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io("<ledger csv>", e))
    }
}

/// Closed-form cost: `2 * rounds * clients * sum_{k <= L} |adapter_k|`.
pub fn communication_cost(rounds: usize, clients: usize, transmitted_layer_sizes: &[usize]) -> u64 {
    2 * rounds as u64 * clients as u64 * transmitted_layer_sizes.iter().map(|&s| s as u64).sum::<u64>()
}

/// Free-function form of [`CommLedger::record`].
pub fn ledger_record(ledger: &mut CommLedger, msg: &WireMessage) -> Result<()> {
    ledger.record(msg)
}

pub fn ledger_total(ledger: &CommLedger) -> u64 {
    ledger.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter_net::ModelDims;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn sample() -> FlatParams {
        FlatParams::concat(vec![(1, vec![1.5, -2.0, 0.0]), (2, vec![3.25])]).unwrap()
    }

    #[test]
    fn byte_layout() {
        let bytes = serialize(&sample());
        assert_eq!(bytes.len(), header_len(2) + 8 * 4);
        assert_eq!(&bytes[..4], b"FSCA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(&bytes[36..44], &1.5f64.to_le_bytes());
    }

    #[test]
    fn malformed_records_name_the_field() {
        let good = serialize(&sample());
        let field = |bytes: &[u8]| match deserialize(bytes) {
            Err(Error::Decode { field, .. }) => field,
            other => panic!("expected decode error, got {other:?}"),
        };
        assert_eq!(field(&good[..good.len() - 1]), "payload");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(field(&bad), "version");
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(field(&bad), "payload");
        assert_eq!(field(&good[..2]), "magic");
        assert_eq!(field(&good[..14]), "layer_table");
        let mut bad = good.clone();
        bad[36..44].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(field(&bad), "payload");
    }

    #[test]
    fn selection_sizes() {
        let dims = ModelDims {
            blocks: 6,
            feature_dim: 16,
            bottleneck_dim: 4,
        };
        let m = ToyFM::new(dims, 0, 0).unwrap();
        assert_eq!(select_for_transmission(&m, 6).unwrap(), m.adapter_params());
        assert_eq!(select_for_transmission(&m, 1).unwrap().len(), 2 * 16 * 4);
        let sizes: Vec<usize> = (1..=6).map(|l| select_for_transmission(&m, l).unwrap().len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert!(select_for_transmission(&m, 0).is_err());
        assert!(select_for_transmission(&m, 7).is_err());
    }

    #[test]
    fn ledger_matches_closed_form() {
        let layer = FlatParams::concat(vec![(1, vec![0.5; 100])]).unwrap();
        let mut ledger = CommLedger::new();
        for round in 1..=2 {
            for client in 0..3 {
                ledger.record(&WireMessage::new(Direction::Broadcast, client, round, &layer)).unwrap();
                ledger.record(&WireMessage::new(Direction::Upload, client, round, &layer)).unwrap();
            }
        }
        assert_eq!(ledger_total(&ledger), 1200);
        assert_eq!(ledger.total(), communication_cost(2, 3, &[100]));
        assert_eq!(ledger.total_through(1), 600);
        assert_eq!(communication_cost(10, 4, &[7; 6]), 6 * communication_cost(10, 4, &[7]));
        let mut csv = Vec::new();
        ledger.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("round,direction,client_id,scalar_count\n1,broadcast,0,100\n"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn open_rejects_higher_layers() {
        let p = FlatParams::concat(vec![(1, vec![1.0]), (2, vec![2.0])]).unwrap();
        let msg = WireMessage::new(Direction::Upload, 0, 1, &p);
        assert!(msg.open(2).is_ok());
        assert!(matches!(msg.open(1), Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), lens in prop::collection::vec(0usize..20, 0..5)) {
            let mut rng = RngStream::new(seed, 0);
            let layers = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| (i as u32 + 1, rng.gaussian(n).iter().map(|v| v * 1e3).collect()))
                .collect();
            let p = FlatParams::concat(layers).unwrap();
            let bytes = serialize(&p);
            prop_assert_eq!(bytes.len(), header_len(lens.len()) + 8 * p.len());
            let back = deserialize(&bytes).unwrap();
            prop_assert!(back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back, p);
        }
    }
}
