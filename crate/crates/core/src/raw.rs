//! Bayer mosaic ingestion: RGGB packing, patch tiling, and the raw container
//! file format.
//!
//! A Bayer image is a single-channel mosaic where each 2x2 quad carries one
//! red, two green and one blue sample. Packing rearranges each quad into four
//! half-resolution planes (r, g1, g2, b) without interpolation; `g1` is the
//! green site sharing a row with red, `g2` the one sharing a row with blue.
//! All operations here are exact and invertible.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 2x2 color filter array layouts. Plane order after packing is always
/// (r, g1, g2, b) regardless of the sensor pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BayerPattern::Rggb => 0,
            BayerPattern::Bggr => 1,
            BayerPattern::Grbg => 2,
            BayerPattern::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(BayerPattern::Rggb),
            1 => Ok(BayerPattern::Bggr),
            2 => Ok(BayerPattern::Grbg),
            3 => Ok(BayerPattern::Gbrg),
            other => Err(Error::Parse(format!("unknown Bayer pattern code {other}"))),
        }
    }

    /// Quad offsets (row, col) of the (r, g1, g2, b) sites. Derivable from the
    /// pattern alone, so decode can restore the original mosaic.
    pub fn plane_offsets(self) -> [(usize, usize); 4] {
        match self {
            BayerPattern::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            BayerPattern::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            BayerPattern::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            BayerPattern::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
        }
    }
}

/// Single-channel sensor mosaic with even dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BayerImage {
    width: usize,
    height: usize,
    pattern: BayerPattern,
    container_bit_depth: u8,
    samples: Vec<u16>,
}

impl BayerImage {
    pub fn new(
        width: usize,
        height: usize,
        pattern: BayerPattern,
        container_bit_depth: u8,
        samples: Vec<u16>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::Dimension(format!(
                "Bayer dimensions must be even and nonzero, got {width}x{height}"
            )));
        }
        if !(1..=16).contains(&container_bit_depth) {
            return Err(Error::Config(format!(
                "container bit depth must be in [1,16], got {container_bit_depth}"
            )));
        }
        if samples.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        if container_bit_depth < 16 {
            let limit = 1u32 << container_bit_depth;
            if let Some(bad) = samples.iter().find(|&&s| u32::from(s) >= limit) {
                return Err(Error::Range(format!(
                    "sample {bad} exceeds container bit depth {container_bit_depth}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            pattern,
            container_bit_depth,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pattern(&self) -> BayerPattern {
        self.pattern
    }

    pub fn container_bit_depth(&self) -> u8 {
        self.container_bit_depth
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Four half-resolution planes (r, g1, g2, b) produced by packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RggbImage {
    half_width: usize,
    half_height: usize,
    container_bit_depth: u8,
    channels: [Vec<u16>; 4],
}

impl RggbImage {
    pub fn new(
        half_width: usize,
        half_height: usize,
        container_bit_depth: u8,
        channels: [Vec<u16>; 4],
    ) -> Result<Self> {
        if half_width == 0 || half_height == 0 {
            return Err(Error::Dimension("RGGB planes must be nonempty".into()));
        }
        let n = half_width * half_height;
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension(format!(
                "each plane must hold {n} samples"
            )));
        }
        Ok(Self {
            half_width,
            half_height,
            container_bit_depth,
            channels,
        })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn half_height(&self) -> usize {
        self.half_height
    }

    pub fn container_bit_depth(&self) -> u8 {
        self.container_bit_depth
    }

    pub fn channel(&self, c: usize) -> &[u16] {
        &self.channels[c]
    }
}

/// One P x P tile of an `RggbImage`. Boundary tiles are edge-replicated to
/// full size; `pad_mask` marks the replicated pixels so they can be dropped
/// losslessly on merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RggbPatch {
    patch_size: usize,
    origin: (usize, usize),
    container_bit_depth: u8,
    channels: [Vec<u16>; 4],
    pad_mask: Vec<bool>,
}

impl RggbPatch {
    pub fn new(
        patch_size: usize,
        origin: (usize, usize),
        container_bit_depth: u8,
        channels: [Vec<u16>; 4],
        pad_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = patch_size * patch_size;
        if patch_size == 0 {
            return Err(Error::Dimension("patch size must be nonzero".into()));
        }
        if channels.iter().any(|c| c.len() != n) || pad_mask.len() != n {
            return Err(Error::Dimension(format!(
                "patch planes and mask must hold {n} entries"
            )));
        }
        Ok(Self {
            patch_size,
            origin,
            container_bit_depth,
            channels,
            pad_mask,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    pub fn container_bit_depth(&self) -> u8 {
        self.container_bit_depth
    }

    pub fn channel(&self, c: usize) -> &[u16] {
        &self.channels[c]
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn is_padded(&self, row: usize, col: usize) -> bool {
        self.pad_mask[row * self.patch_size + col]
    }

    /// Number of non-replicated rows/cols. Padding is always a lower-right
    /// border, so the valid region is a rectangle.
    pub fn valid_extent(&self) -> (usize, usize) {
        let p = self.patch_size;
        let rows = (0..p).take_while(|&r| !self.pad_mask[r * p]).count();
        let cols = (0..p).take_while(|&c| !self.pad_mask[c]).count();
        (rows, cols)
    }

    pub fn sample(&self, c: usize, row: usize, col: usize) -> u16 {
        self.channels[c][row * self.patch_size + col]
    }
}

/// Rearrange each 2x2 quad into the four planes. Non-RGGB patterns are
/// permuted so plane order is always (r, g1, g2, b).
pub fn pack_bayer(img: &BayerImage) -> RggbImage {
    let hw = img.width / 2;
    let hh = img.height / 2;
    let offsets = img.pattern.plane_offsets();
    let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0u16; hw * hh]);
    for qr in 0..hh {
        for qc in 0..hw {
            let base_r = qr * 2;
            let base_c = qc * 2;
            for (plane, &(dr, dc)) in offsets.iter().enumerate() {
                channels[plane][qr * hw + qc] =
                    img.samples[(base_r + dr) * img.width + (base_c + dc)];
            }
        }
    }
    RggbImage {
        half_width: hw,
        half_height: hh,
        container_bit_depth: img.container_bit_depth,
        channels,
    }
}

/// Exact inverse of [`pack_bayer`] for the given pattern.
pub fn unpack_bayer(img: &RggbImage, pattern: BayerPattern) -> BayerImage {
    let width = img.half_width * 2;
    let height = img.half_height * 2;
    let offsets = pattern.plane_offsets();
    let mut samples = vec![0u16; width * height];
    for qr in 0..img.half_height {
        for qc in 0..img.half_width {
            let base_r = qr * 2;
            let base_c = qc * 2;
            for (plane, &(dr, dc)) in offsets.iter().enumerate() {
                samples[(base_r + dr) * width + (base_c + dc)] =
                    img.channels[plane][qr * img.half_width + qc];
            }
        }
    }
    BayerImage {
        width,
        height,
        pattern,
        container_bit_depth: img.container_bit_depth,
        samples,
    }
}

/// Tile an `RggbImage` into non-overlapping P x P patches in raster order.
/// Partial boundary tiles are filled by edge replication.
pub fn split_patches(img: &RggbImage, patch_size: usize) -> Result<Vec<RggbPatch>> {
    if patch_size < 8 || patch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "patch size must be even and >= 8, got {patch_size}"
        )));
    }
    let p = patch_size;
    let hw = img.half_width;
    let hh = img.half_height;
    let grid_rows = hh.div_ceil(p);
    let grid_cols = hw.div_ceil(p);
    let mut patches = Vec::with_capacity(grid_rows * grid_cols);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let origin = (gr * p, gc * p);
            let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0u16; p * p]);
            let mut pad_mask = vec![false; p * p];
            for r in 0..p {
                let src_r = (origin.0 + r).min(hh - 1);
                let row_pad = origin.0 + r >= hh;
                for c in 0..p {
                    let src_c = (origin.1 + c).min(hw - 1);
                    let pad = row_pad || origin.1 + c >= hw;
                    pad_mask[r * p + c] = pad;
                    for ch in 0..4 {
                        channels[ch][r * p + c] = img.channels[ch][src_r * hw + src_c];
                    }
                }
            }
            patches.push(RggbPatch {
                patch_size: p,
                origin,
                container_bit_depth: img.container_bit_depth,
                channels,
                pad_mask,
            });
        }
    }
    Ok(patches)
}

/// Reassemble patches into the original image, dropping replicated padding.
/// Placement is origin-driven, so patch order does not matter.
pub fn merge_patches(patches: &[RggbPatch]) -> Result<RggbImage> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Structure("no patches to merge".into()))?;
    let p = first.patch_size;
    let depth = first.container_bit_depth;
    if patches
        .iter()
        .any(|pt| pt.patch_size != p || pt.container_bit_depth != depth)
    {
        return Err(Error::Structure(
            "patches disagree on size or bit depth".into(),
        ));
    }

    let mut hh = 0;
    let mut hw = 0;
    for pt in patches {
        let (vr, vc) = pt.valid_extent();
        if vr == 0 || vc == 0 {
            return Err(Error::Structure("patch with empty valid region".into()));
        }
        if pt.origin.0 % p != 0 || pt.origin.1 % p != 0 {
            return Err(Error::Structure("patch origin off the tile grid".into()));
        }
        hh = hh.max(pt.origin.0 + vr);
        hw = hw.max(pt.origin.1 + vc);
    }

    let expected = hh.div_ceil(p) * hw.div_ceil(p);
    if patches.len() != expected {
        return Err(Error::Structure(format!(
            "expected {expected} patches for a {hw}x{hh} image, got {}",
            patches.len()
        )));
    }

    let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0u16; hw * hh]);
    let mut written = vec![false; hw * hh];
    for pt in patches {
        let (vr, vc) = pt.valid_extent();
        for r in 0..vr {
            for c in 0..vc {
                let dst = (pt.origin.0 + r) * hw + (pt.origin.1 + c);
                if written[dst] {
                    return Err(Error::Structure(format!(
                        "overlapping patches at ({}, {})",
                        pt.origin.0 + r,
                        pt.origin.1 + c
                    )));
                }
                written[dst] = true;
                for ch in 0..4 {
                    channels[ch][dst] = pt.channels[ch][r * p + c];
                }
            }
        }
    }
    if written.iter().any(|&w| !w) {
        return Err(Error::Structure("missing patches leave holes".into()));
    }
    RggbImage::new(hw, hh, depth, channels)
}

/// Raw container magic. Layout: magic, width u32, height u32, pattern u8,
/// container bit depth u8, then width*height little-endian u16 samples.
pub const RAW_MAGIC: [u8; 4] = *b"BAYR";

const RAW_HEADER_LEN: usize = 14;

pub fn raw_container_bytes(img: &BayerImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + img.samples.len() * 2);
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.push(img.pattern.code());
    out.push(img.container_bit_depth);
    for s in &img.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn parse_raw_container(bytes: &[u8]) -> Result<BayerImage> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::Truncated(format!(
            "raw container shorter than {RAW_HEADER_LEN}-byte header"
        )));
    }
    if bytes[0..4] != RAW_MAGIC {
        return Err(Error::Parse("bad raw container magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let pattern = BayerPattern::from_code(bytes[12])?;
    let depth = bytes[13];
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse("sample count overflow".into()))?;
    let body = &bytes[RAW_HEADER_LEN..];
    if body.len() < n * 2 {
        return Err(Error::Truncated(format!(
            "raw container holds {} of {} sample bytes",
            body.len(),
            n * 2
        )));
    }
    if body.len() > n * 2 {
        return Err(Error::Parse("trailing bytes after samples".into()));
    }
    let samples: Vec<u16> = body
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    BayerImage::new(width, height, pattern, depth, samples)
}

pub fn write_raw_container(img: &BayerImage, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&raw_container_bytes(img))?;
    Ok(())
}

pub fn read_raw_container(path: &Path) -> Result<BayerImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_raw_container(&bytes)
}
