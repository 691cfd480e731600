//! Per-patch bit depths: computation, embedding table, and the side-info
//! byte layout stored in the bitstream.
//!
//! The bit depth of a value v is the smallest b with v < 2^b, i.e. the
//! integer bit length of v. Patch depths are tight upper bounds over the
//! non-padded samples and bound the symbol alphabet used by the entropy
//! model, so an off-by-one here breaks losslessness.

use crate::error::{Error, Result};
use crate::raw::RggbPatch;

/// Number of distinct bit depths (0..=16 inclusive).
pub const DEPTH_TABLE_ROWS: usize = 17;

/// Bit length of `v`: ceil(log2(v+1)), computed in integer arithmetic.
pub fn pixel_bit_depth(v: u16) -> u8 {
    (16 - v.leading_zeros()) as u8
}

/// Tight per-channel bit depths of a patch. Padded pixels are excluded
/// unless the whole patch is padding (hand-built patches only).
pub fn patch_bit_depth(patch: &RggbPatch) -> [u8; 4] {
    let mask = patch.pad_mask();
    let all_padded = mask.iter().all(|&m| m);
    let mut depths = [0u8; 4];
    for (c, depth) in depths.iter_mut().enumerate() {
        let mut max = 0u16;
        for (i, &v) in patch.channel(c).iter().enumerate() {
            if (all_padded || !mask[i]) && v > max {
                max = v;
            }
        }
        *depth = pixel_bit_depth(max);
    }
    depths
}

/// Per-patch bit depths, either shared across the four channels or stored
/// per channel. This is the side information transmitted in the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BitDepthMap {
    Shared(Vec<u8>),
    PerChannel(Vec<[u8; 4]>),
}

impl BitDepthMap {
    pub fn from_patches(patches: &[RggbPatch], per_channel: bool) -> Self {
        if per_channel {
            BitDepthMap::PerChannel(patches.iter().map(patch_bit_depth).collect())
        } else {
            BitDepthMap::Shared(
                patches
                    .iter()
                    .map(|p| patch_bit_depth(p).into_iter().max().unwrap())
                    .collect(),
            )
        }
    }

    pub fn patch_count(&self) -> usize {
        match self {
            BitDepthMap::Shared(v) => v.len(),
            BitDepthMap::PerChannel(v) => v.len(),
        }
    }

    /// Depth of channel `c` in patch `i`.
    pub fn channel_depth(&self, patch: usize, c: usize) -> u8 {
        match self {
            BitDepthMap::Shared(v) => v[patch],
            BitDepthMap::PerChannel(v) => v[patch][c],
        }
    }

    pub fn channel_depths(&self, patch: usize) -> [u8; 4] {
        match self {
            BitDepthMap::Shared(v) => [v[patch]; 4],
            BitDepthMap::PerChannel(v) => v[patch],
        }
    }

    /// Depth of the whole patch: max over channels.
    pub fn patch_depth(&self, patch: usize) -> u8 {
        self.channel_depths(patch).into_iter().max().unwrap()
    }

    pub fn max_depth(&self) -> u8 {
        (0..self.patch_count())
            .map(|i| self.patch_depth(i))
            .max()
            .unwrap_or(0)
    }

    fn raw_values(&self) -> Vec<u8> {
        match self {
            BitDepthMap::Shared(v) => v.clone(),
            BitDepthMap::PerChannel(v) => v.iter().flatten().copied().collect(),
        }
    }
}

const FLAG_PER_CHANNEL: u8 = 0b01;
const FLAG_WIDE: u8 = 0b10;

/// Serialized size in bytes of a map covering `patches` patches: one flag
/// byte plus packed 4-bit values (two per byte), or one byte per value in
/// wide mode (needed when any depth is 16).
pub fn side_info_len(patches: usize, per_channel: bool, wide: bool) -> usize {
    let values = if per_channel { patches * 4 } else { patches };
    1 + if wide { values } else { values.div_ceil(2) }
}

/// Encode the map as a flag byte plus packed nibbles (low nibble first).
/// Depths above 15 force the 8-bit-per-value fallback, signalled in the flag.
pub fn serialize_bit_depths(map: &BitDepthMap) -> Vec<u8> {
    let values = map.raw_values();
    let wide = values.iter().any(|&v| v > 15);
    let mut flag = 0u8;
    if matches!(map, BitDepthMap::PerChannel(_)) {
        flag |= FLAG_PER_CHANNEL;
    }
    if wide {
        flag |= FLAG_WIDE;
    }
    let mut out = Vec::with_capacity(side_info_len(
        map.patch_count(),
        matches!(map, BitDepthMap::PerChannel(_)),
        wide,
    ));
    out.push(flag);
    if wide {
        out.extend_from_slice(&values);
    } else {
        for pair in values.chunks(2) {
            let lo = pair[0] & 0x0F;
            let hi = if pair.len() == 2 { pair[1] & 0x0F } else { 0 };
            out.push(lo | (hi << 4));
        }
    }
    out
}

pub fn deserialize_bit_depths(bytes: &[u8], patch_count: usize) -> Result<BitDepthMap> {
    let (&flag, payload) = bytes
        .split_first()
        .ok_or_else(|| Error::Truncated("empty bit-depth block".into()))?;
    if flag & !(FLAG_PER_CHANNEL | FLAG_WIDE) != 0 {
        return Err(Error::Parse(format!("unknown bit-depth flag {flag:#04x}")));
    }
    let per_channel = flag & FLAG_PER_CHANNEL != 0;
    let wide = flag & FLAG_WIDE != 0;
    let expected = side_info_len(patch_count, per_channel, wide) - 1;
    if payload.len() != expected {
        return Err(Error::Truncated(format!(
            "bit-depth payload holds {} of {expected} bytes",
            payload.len()
        )));
    }
    let value_count = if per_channel { patch_count * 4 } else { patch_count };
    let mut values = Vec::with_capacity(value_count);
    if wide {
        values.extend_from_slice(payload);
    } else {
        for &b in payload {
            values.push(b & 0x0F);
            if values.len() < value_count {
                values.push(b >> 4);
            }
        }
        values.truncate(value_count);
    }
    if values.iter().any(|&v| v > 16) {
        return Err(Error::Range("bit depth above 16 in side info".into()));
    }
    if per_channel {
        Ok(BitDepthMap::PerChannel(
            values.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        ))
    } else {
        Ok(BitDepthMap::Shared(values))
    }
}

/// Learnable embedding table with one row per bit depth 0..=16.
#[derive(Debug, Clone, PartialEq)]
pub struct BitDepthEmbedding {
    dim: usize,
    table: Vec<f64>,
}

impl BitDepthEmbedding {
    pub fn new(dim: usize, table: Vec<f64>) -> Result<Self> {
        if dim == 0 || table.len() != DEPTH_TABLE_ROWS * dim {
            return Err(Error::Config(format!(
                "embedding table must hold {DEPTH_TABLE_ROWS} rows of dim {dim}"
            )));
        }
        Ok(Self { dim, table })
    }

    /// Init from a unit normal scaled by 1/sqrt(dim).
    pub fn init<R: rand::Rng>(dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let table = (0..DEPTH_TABLE_ROWS * dim)
            .map(|_| crate::nn::sample_standard_normal(rng) * scale)
            .collect();
        Self { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    /// Row `b` of the table.
    pub fn lookup(&self, b: u8) -> Result<&[f64]> {
        if b as usize >= DEPTH_TABLE_ROWS {
            return Err(Error::Range(format!("bit depth {b} outside [0,16]")));
        }
        let start = b as usize * self.dim;
        Ok(&self.table[start..start + self.dim])
    }

    /// Conditioning vector for a patch: the mean of the four per-channel
    /// rows. Equals a plain lookup when all channels share one depth.
    pub fn condition(&self, depths: [u8; 4]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for &d in &depths {
            let row = self.lookup(d)?;
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        for o in &mut out {
            *o *= 0.25;
        }
        Ok(out)
    }
}
