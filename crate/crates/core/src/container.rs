//! Compressed container: header, bit-depth side info, per-patch stream
//! index, and the image-level compress/decompress pipeline.
//!
//! The header alone locates every patch, so patches decode independently
//! and in parallel. Each index entry carries the patch's absolute offset,
//! byte length and a CRC of the reconstructed samples; inside a patch the
//! three sub-streams are length-prefixed (4-byte little-endian each).

use rayon::prelude::*;

use crate::bitdepth::{deserialize_bit_depths, serialize_bit_depths, BitDepthMap};
use crate::codec::{decode_patch, encode_patch, DepthMode, PatchGeometry, PatchStreams};
use crate::error::{Error, Result};
use crate::nn::ModelWeights;
use crate::raw::{merge_patches, pack_bayer, split_patches, unpack_bayer, BayerImage, BayerPattern};

pub const CONTAINER_MAGIC: [u8; 4] = *b"RWIC";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub offset: u64,
    pub length: u32,
    pub crc: u32,
}

#[derive(Debug, Clone)]
pub struct ContainerHeader {
    pub width: usize,
    pub height: usize,
    pub pattern: BayerPattern,
    pub container_bit_depth: u8,
    pub patch_size: usize,
    pub mode: DepthMode,
    pub weights_hash: [u8; 32],
    pub depth_map: BitDepthMap,
    pub index: Vec<PatchEntry>,
}

impl ContainerHeader {
    pub fn grid(&self) -> (usize, usize) {
        let hh = self.height / 2;
        let hw = self.width / 2;
        (hh.div_ceil(self.patch_size), hw.div_ceil(self.patch_size))
    }

    pub fn patch_count(&self) -> usize {
        let (rows, cols) = self.grid();
        rows * cols
    }

    pub fn geometry(&self, index: usize) -> PatchGeometry {
        let (_, cols) = self.grid();
        let hh = self.height / 2;
        let hw = self.width / 2;
        let p = self.patch_size;
        let origin = ((index / cols) * p, (index % cols) * p);
        PatchGeometry {
            patch_size: p,
            origin,
            valid_rows: p.min(hh - origin.0),
            valid_cols: p.min(hw - origin.1),
            container_bit_depth: self.container_bit_depth,
        }
    }
}

/// Exact bit accounting of one container. `total_bits` always equals the
/// byte length of the file times eight; the four parts sum to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    pub pixel_bits: u64,
    pub latent_bits: u64,
    pub side_info_bits: u64,
    pub header_bits: u64,
    pub pixel_count: u64,
}

impl Breakdown {
    pub fn total_bits(&self) -> u64 {
        self.pixel_bits + self.latent_bits + self.side_info_bits + self.header_bits
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / self.pixel_count as f64
    }

    pub fn accumulate(&mut self, other: &Breakdown) {
        self.pixel_bits += other.pixel_bits;
        self.latent_bits += other.latent_bits;
        self.side_info_bits += other.side_info_bits;
        self.header_bits += other.header_bits;
        self.pixel_count += other.pixel_count;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressOptions {
    pub patch_size: usize,
    pub mode: DepthMode,
    pub per_channel_depths: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            patch_size: 64,
            mode: DepthMode::Adaptive,
            per_channel_depths: false,
        }
    }
}

pub struct Compressed {
    pub bytes: Vec<u8>,
    pub breakdown: Breakdown,
}

pub fn compress_image(
    img: &BayerImage,
    weights: &ModelWeights,
    opts: &CompressOptions,
) -> Result<Compressed> {
    let rggb = pack_bayer(img);
    let patches = split_patches(&rggb, opts.patch_size)?;
    let true_map = BitDepthMap::from_patches(&patches, opts.per_channel_depths);
    let stored_map = match opts.mode {
        DepthMode::Fixed(d) => BitDepthMap::Shared(vec![d; patches.len()]),
        _ => true_map.clone(),
    };

    let streams: Vec<PatchStreams> = patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| encode_patch(weights, patch, true_map.channel_depths(i), opts.mode))
        .collect::<Result<Vec<_>>>()?;

    let side_info = serialize_bit_depths(&stored_map);
    let (mode_code, cond_depth) = opts.mode.code();

    let mut header = Vec::new();
    header.extend_from_slice(&CONTAINER_MAGIC);
    header.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    header.extend_from_slice(&(img.width() as u32).to_le_bytes());
    header.extend_from_slice(&(img.height() as u32).to_le_bytes());
    header.push(img.pattern().code());
    header.push(img.container_bit_depth());
    header.extend_from_slice(&(opts.patch_size as u16).to_le_bytes());
    header.push(mode_code);
    header.push(cond_depth);
    header.extend_from_slice(&weights.content_hash());
    header.extend_from_slice(&(side_info.len() as u32).to_le_bytes());
    header.extend_from_slice(&side_info);
    header.extend_from_slice(&(patches.len() as u32).to_le_bytes());

    let header_len = header.len() + patches.len() * 16;
    let mut offset = header_len as u64;
    let mut body = Vec::new();
    for s in &streams {
        header.extend_from_slice(&offset.to_le_bytes());
        let length = (12 + s.byte_len()) as u32;
        header.extend_from_slice(&length.to_le_bytes());
        header.extend_from_slice(&s.crc.to_le_bytes());
        body.extend_from_slice(&(s.z.len() as u32).to_le_bytes());
        body.extend_from_slice(&s.z);
        body.extend_from_slice(&(s.y.len() as u32).to_le_bytes());
        body.extend_from_slice(&s.y);
        body.extend_from_slice(&(s.pixels.len() as u32).to_le_bytes());
        body.extend_from_slice(&s.pixels);
        offset += u64::from(length);
    }
    debug_assert_eq!(header.len(), header_len);

    let mut bytes = header;
    bytes.extend_from_slice(&body);

    let pixel_bits: u64 = streams.iter().map(|s| s.pixels.len() as u64 * 8).sum();
    let latent_bits: u64 = streams
        .iter()
        .map(|s| (s.z.len() + s.y.len()) as u64 * 8)
        .sum();
    let side_info_bits = side_info.len() as u64 * 8;
    let total_bits = bytes.len() as u64 * 8;
    let breakdown = Breakdown {
        pixel_bits,
        latent_bits,
        side_info_bits,
        header_bits: total_bits - pixel_bits - latent_bits - side_info_bits,
        pixel_count: img.pixel_count() as u64,
    };
    Ok(Compressed { bytes, breakdown })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "container ends at byte {} of {}",
                self.bytes.len(),
                self.pos + n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<ContainerHeader> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(Error::Parse("bad container magic".into()));
    }
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Parse(format!("unsupported container version {version}")));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let pattern = BayerPattern::from_code(r.take(1)?[0])?;
    let container_bit_depth = r.take(1)?[0];
    let patch_size = r.u16()? as usize;
    let mode_code = r.take(1)?[0];
    let cond_depth = r.take(1)?[0];
    let mode = DepthMode::from_code(mode_code, cond_depth)?;
    let weights_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let side_len = r.u32()? as usize;
    let side_info = r.take(side_len)?.to_vec();
    let patch_count = r.u32()? as usize;

    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Parse(format!("invalid dimensions {width}x{height}")));
    }
    if patch_size < 8 || patch_size % 2 != 0 {
        return Err(Error::Parse(format!("invalid patch size {patch_size}")));
    }
    let expected_patches =
        (height / 2).div_ceil(patch_size) * (width / 2).div_ceil(patch_size);
    if patch_count != expected_patches {
        return Err(Error::Parse(format!(
            "header declares {patch_count} patches, geometry implies {expected_patches}"
        )));
    }
    let depth_map = deserialize_bit_depths(&side_info, patch_count)?;

    let mut index = Vec::with_capacity(patch_count);
    for _ in 0..patch_count {
        index.push(PatchEntry {
            offset: r.u64()?,
            length: r.u32()?,
            crc: r.u32()?,
        });
    }
    for e in &index {
        let end = e
            .offset
            .checked_add(u64::from(e.length))
            .ok_or_else(|| Error::Parse("patch extent overflow".into()))?;
        if end > bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "patch extent {end} beyond container size {}",
                bytes.len()
            )));
        }
    }

    Ok(ContainerHeader {
        width,
        height,
        pattern,
        container_bit_depth,
        patch_size,
        mode,
        weights_hash,
        depth_map,
        index,
    })
}

fn read_patch_streams(bytes: &[u8], entry: &PatchEntry, crc: u32) -> Result<PatchStreams> {
    let start = entry.offset as usize;
    let end = start + entry.length as usize;
    let mut r = Reader {
        bytes: &bytes[start..end],
        pos: 0,
    };
    let z_len = r.u32()? as usize;
    let z = r.take(z_len)?.to_vec();
    let y_len = r.u32()? as usize;
    let y = r.take(y_len)?.to_vec();
    let px_len = r.u32()? as usize;
    let pixels = r.take(px_len)?.to_vec();
    if r.pos != entry.length as usize {
        return Err(Error::Parse("patch record has trailing bytes".into()));
    }
    Ok(PatchStreams { z, y, pixels, crc })
}

pub fn decompress_image(bytes: &[u8], weights: &ModelWeights) -> Result<BayerImage> {
    let header = parse_header(bytes)?;
    let actual = weights.content_hash();
    if actual != header.weights_hash {
        return Err(Error::HashMismatch {
            expected: hex(&header.weights_hash),
            actual: hex(&actual),
        });
    }

    let patches = (0..header.patch_count())
        .into_par_iter()
        .map(|i| {
            let entry = &header.index[i];
            let streams = read_patch_streams(bytes, entry, entry.crc)?;
            decode_patch(
                weights,
                header.geometry(i),
                header.depth_map.channel_depths(i),
                header.mode,
                &streams,
                i,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let rggb = merge_patches(&patches)?;
    Ok(unpack_bayer(&rggb, header.pattern))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use rand::Rng;

    fn random_image(width: usize, height: usize, depth: u8, seed: u64) -> BayerImage {
        let mut rng = crate::nn::seeded_rng(seed);
        let samples = (0..width * height)
            .map(|_| rng.gen_range(0..(1u32 << depth)) as u16)
            .collect();
        BayerImage::new(width, height, BayerPattern::Grbg, depth, samples).unwrap()
    }

    fn tiny_weights() -> ModelWeights {
        ModelWeights::init(ModelConfig::tiny(), 99).unwrap()
    }

    #[test]
    fn image_round_trip() {
        let weights = tiny_weights();
        let img = random_image(40, 36, 10, 1);
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        assert_eq!(
            compressed.breakdown.total_bits(),
            compressed.bytes.len() as u64 * 8
        );
        let back = decompress_image(&compressed.bytes, &weights).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn wrong_weights_rejected_before_decode() {
        let weights = tiny_weights();
        let img = random_image(16, 16, 8, 2);
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        let other = ModelWeights::init(ModelConfig::tiny(), 100).unwrap();
        assert!(matches!(
            decompress_image(&compressed.bytes, &other).unwrap_err(),
            Error::HashMismatch { .. }
        ));
    }

    #[test]
    fn header_parses_and_locates_patches() {
        let weights = tiny_weights();
        let img = random_image(48, 32, 8, 3);
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        let header = parse_header(&compressed.bytes).unwrap();
        assert_eq!(header.width, 48);
        assert_eq!(header.height, 32);
        assert_eq!(header.patch_count(), 6);
        assert_eq!(header.pattern, BayerPattern::Grbg);
        let geo = header.geometry(5);
        assert_eq!(geo.origin, (8, 16));
    }

    #[test]
    fn truncated_container_detected() {
        let weights = tiny_weights();
        let img = random_image(16, 16, 8, 4);
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        for cut in [3, 20, compressed.bytes.len() - 5] {
            let err = decompress_image(&compressed.bytes[..cut], &weights).unwrap_err();
            assert!(
                matches!(err, Error::Truncated(_) | Error::Decode { .. } | Error::Parse(_)),
                "cut {cut} gave {err}"
            );
        }
    }

    #[test]
    fn bit_flip_reports_patch_index() {
        let weights = tiny_weights();
        let img = random_image(32, 16, 12, 5);
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        let header = parse_header(&compressed.bytes).unwrap();
        // Flip a byte in the middle of the second patch's record, where the
        // coder is guaranteed to consume it. (The final flush bytes of a
        // stream can be redundant, so a flip there may be harmless.)
        let mut corrupt = compressed.bytes.clone();
        let target = header.index[1].offset as usize + header.index[1].length as usize / 2;
        corrupt[target] ^= 0x08;
        match decompress_image(&corrupt, &weights) {
            Err(Error::Decode { patch, .. }) => assert_eq!(patch, 1),
            other => panic!("expected decode error for patch 1, got {other:?}"),
        }
    }

    #[test]
    fn all_zero_image_has_no_pixel_bits() {
        let weights = tiny_weights();
        let img = BayerImage::new(32, 32, BayerPattern::Rggb, 12, vec![0; 1024]).unwrap();
        let opts = CompressOptions {
            patch_size: 8,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        assert_eq!(compressed.breakdown.pixel_bits, 0);
        assert_eq!(compressed.breakdown.latent_bits, 0);
        let back = decompress_image(&compressed.bytes, &weights).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn fixed_and_masked_image_round_trips() {
        let weights = tiny_weights();
        let img = random_image(24, 24, 6, 6);
        for mode in [DepthMode::Fixed(9), DepthMode::Masked(9)] {
            let opts = CompressOptions {
                patch_size: 8,
                mode,
                ..CompressOptions::default()
            };
            let compressed = compress_image(&img, &weights, &opts).unwrap();
            let back = decompress_image(&compressed.bytes, &weights).unwrap();
            assert_eq!(back, img, "{mode:?}");
        }
    }

    #[test]
    fn masked_container_never_larger_than_fixed() {
        let weights = tiny_weights();
        let img = random_image(64, 48, 7, 7);
        let fixed = compress_image(
            &img,
            &weights,
            &CompressOptions {
                patch_size: 8,
                mode: DepthMode::Fixed(12),
                ..CompressOptions::default()
            },
        )
        .unwrap();
        let masked = compress_image(
            &img,
            &weights,
            &CompressOptions {
                patch_size: 8,
                mode: DepthMode::Masked(12),
                ..CompressOptions::default()
            },
        )
        .unwrap();
        assert!(masked.bytes.len() <= fixed.bytes.len());
    }

    #[test]
    fn per_channel_depth_mode_round_trips() {
        let weights = tiny_weights();
        let mut rng = crate::nn::seeded_rng(8);
        // Give channels very different ranges so per-channel depths differ.
        let mut samples = vec![0u16; 32 * 32];
        for (i, s) in samples.iter_mut().enumerate() {
            let (r, c) = (i / 32 % 2, i % 2);
            *s = match (r, c) {
                (0, 0) => rng.gen_range(0..4096),
                (1, 1) => rng.gen_range(0..16),
                _ => rng.gen_range(0..256),
            };
        }
        let img = BayerImage::new(32, 32, BayerPattern::Rggb, 12, samples).unwrap();
        let opts = CompressOptions {
            patch_size: 8,
            per_channel_depths: true,
            ..CompressOptions::default()
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        let header = parse_header(&compressed.bytes).unwrap();
        assert!(matches!(header.depth_map, BitDepthMap::PerChannel(_)));
        let back = decompress_image(&compressed.bytes, &weights).unwrap();
        assert_eq!(back, img);
    }
}
