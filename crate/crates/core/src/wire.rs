//! Canonical byte layout of sparse layers.
//!
//! ```text
//! header (16 bytes, little-endian u32 each):
//!   ordinal | entry count | dim | crc32 of the entry bytes
//! entries (8 bytes each):
//!   index: u32 LE | value: f32 LE
//! ```
//!
//! Values are narrowed to `f32` on the wire. The simulator keeps layers in
//! memory at full precision and uses this layout for byte accounting and dumps.

use crate::error::{Error, Result};
use crate::sparsifier::{LayeredUpdate, SparseLayer};

pub const HEADER_BYTES: u64 = 16;
pub const ENTRY_BYTES: u64 = 8;

pub fn encoded_len(entries: usize) -> u64 {
    HEADER_BYTES + ENTRY_BYTES * entries as u64
}

pub fn encode_layer(ordinal: u32, layer: &SparseLayer) -> Vec<u8> {
    let mut body = Vec::with_capacity(layer.len() * ENTRY_BYTES as usize);
    for (&i, &v) in layer.indices().iter().zip(layer.values()) {
        body.extend_from_slice(&i.to_le_bytes());
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(HEADER_BYTES as usize + body.len());
    out.extend_from_slice(&ordinal.to_le_bytes());
    out.extend_from_slice(&(layer.len() as u32).to_le_bytes());
    out.extend_from_slice(&(layer.dim() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4-byte slice"))
}

/// Decodes one layer from the front of `buf`, returning it with its ordinal
/// and the number of bytes consumed.
pub fn decode_layer(buf: &[u8]) -> Result<(u32, SparseLayer, usize)> {
    if buf.len() < HEADER_BYTES as usize {
        return Err(Error::CorruptUpdate("truncated layer header".into()));
    }
    let ordinal = read_u32(buf, 0);
    let count = read_u32(buf, 4) as usize;
    let dim = read_u32(buf, 8) as usize;
    let checksum = read_u32(buf, 12);
    let end = encoded_len(count) as usize;
    if buf.len() < end {
        return Err(Error::CorruptUpdate(format!(
            "layer {ordinal} declares {count} entries but only {} bytes follow",
            buf.len() - HEADER_BYTES as usize
        )));
    }
    let body = &buf[HEADER_BYTES as usize..end];
    if crc32fast::hash(body) != checksum {
        return Err(Error::CorruptUpdate(format!("checksum mismatch in layer {ordinal}")));
    }
    let entries: Vec<(u32, f64)> = body
        .chunks_exact(ENTRY_BYTES as usize)
        .map(|c| (read_u32(c, 0), f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64))
        .collect();
    let layer = SparseLayer::from_entries(dim, &entries)
        .map_err(|e| Error::CorruptUpdate(format!("layer {ordinal}: {e}")))?;
    Ok((ordinal, layer, end))
}

pub fn encode_update(update: &LayeredUpdate) -> Vec<u8> {
    update
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(c, l)| encode_layer(c as u32, l))
        .collect()
}

/// Decodes a concatenation of layers; ordinals must run 0, 1, 2, ...
pub fn decode_layers(mut buf: &[u8]) -> Result<Vec<SparseLayer>> {
    let mut layers = Vec::new();
    while !buf.is_empty() {
        let (ordinal, layer, used) = decode_layer(buf)?;
        if ordinal as usize != layers.len() {
            return Err(Error::CorruptUpdate(format!(
                "expected layer {}, found {ordinal}",
                layers.len()
            )));
        }
        layers.push(layer);
        buf = &buf[used..];
    }
    Ok(layers)
}
