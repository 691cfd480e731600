//! Property tests for the exactly-invertible plumbing: packing, tiling,
//! container files, side info, and symbol coding.

use proptest::prelude::*;
use rwic_core::bitdepth::{deserialize_bit_depths, serialize_bit_depths, BitDepthMap};
use rwic_core::coder::{RangeDecoder, RangeEncoder};
use rwic_core::entropy::build_cdf_table;
use rwic_core::raw::{
    merge_patches, pack_bayer, parse_raw_container, raw_container_bytes, split_patches,
    unpack_bayer, BayerImage, BayerPattern,
};

fn arb_pattern() -> impl Strategy<Value = BayerPattern> {
    prop_oneof![
        Just(BayerPattern::Rggb),
        Just(BayerPattern::Bggr),
        Just(BayerPattern::Grbg),
        Just(BayerPattern::Gbrg),
    ]
}

fn arb_image(max_half: usize) -> impl Strategy<Value = BayerImage> {
    (1..=max_half, 1..=max_half, 1u8..=16, arb_pattern(), any::<u64>()).prop_map(
        |(hw, hh, depth, pattern, seed)| {
            use rand::Rng;
            let mut rng = rwic_core::nn::seeded_rng(seed);
            let (w, h) = (hw * 2, hh * 2);
            let samples = (0..w * h)
                .map(|_| rng.gen_range(0..(1u32 << depth)) as u16)
                .collect();
            BayerImage::new(w, h, pattern, depth, samples).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_is_identity(img in arb_image(32)) {
        let packed = pack_bayer(&img);
        let back = unpack_bayer(&packed, img.pattern());
        prop_assert_eq!(back, img);
    }

    #[test]
    fn split_merge_is_identity(img in arb_image(24), p in 0usize..4) {
        let patch_size = [8, 16, 32, 64][p];
        let packed = pack_bayer(&img);
        let patches = split_patches(&packed, patch_size).unwrap();
        let expected = packed.half_height().div_ceil(patch_size)
            * packed.half_width().div_ceil(patch_size);
        prop_assert_eq!(patches.len(), expected);
        prop_assert_eq!(merge_patches(&patches).unwrap(), packed);
    }

    #[test]
    fn merge_is_order_independent(img in arb_image(16), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let packed = pack_bayer(&img);
        let mut patches = split_patches(&packed, 8).unwrap();
        let mut rng = rwic_core::nn::seeded_rng(seed);
        patches.shuffle(&mut rng);
        prop_assert_eq!(merge_patches(&patches).unwrap(), packed);
    }

    #[test]
    fn raw_container_round_trips(img in arb_image(24)) {
        let bytes = raw_container_bytes(&img);
        prop_assert_eq!(parse_raw_container(&bytes).unwrap(), img);
    }

    #[test]
    fn side_info_round_trips_and_has_documented_size(
        depths in proptest::collection::vec(0u8..=16, 0..50),
        per_channel in any::<bool>(),
    ) {
        let map = if per_channel {
            BitDepthMap::PerChannel(
                depths.chunks(4).filter(|c| c.len() == 4)
                    .map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            )
        } else {
            BitDepthMap::Shared(depths)
        };
        let bytes = serialize_bit_depths(&map);
        let wide = match &map {
            BitDepthMap::Shared(v) => v.iter().any(|&d| d > 15),
            BitDepthMap::PerChannel(v) => v.iter().flatten().any(|&d| d > 15),
        };
        let expected = rwic_core::bitdepth::side_info_len(
            map.patch_count(),
            matches!(map, BitDepthMap::PerChannel(_)),
            wide,
        );
        prop_assert_eq!(bytes.len(), expected);
        prop_assert_eq!(deserialize_bit_depths(&bytes, map.patch_count()).unwrap(), map);
    }

    #[test]
    fn coder_round_trips_arbitrary_tables(
        weights in proptest::collection::vec(1u32..1000, 2..40),
        symbols in proptest::collection::vec(any::<u32>(), 1..400),
    ) {
        let total: u64 = weights.iter().map(|&w| u64::from(w)).sum();
        let pmf: Vec<f64> = weights.iter().map(|&w| f64::from(w) / total as f64).collect();
        let cdf = build_cdf_table(&pmf, 16).unwrap();
        let symbols: Vec<u32> = symbols.iter().map(|&s| s % weights.len() as u32).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(s, &cdf);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            prop_assert_eq!(dec.decode(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn quantized_cdf_is_monotone_with_exact_total(
        weights in proptest::collection::vec(0.0f64..1.0, 1..200),
    ) {
        let sum: f64 = weights.iter().sum::<f64>().max(1e-9);
        let pmf: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let cdf = build_cdf_table(&pmf, 16).unwrap();
        let cum = cdf.cum();
        prop_assert_eq!(cum[0], 0);
        prop_assert_eq!(*cum.last().unwrap(), 1 << 16);
        for w in cum.windows(2) {
            prop_assert!(w[1] > w[0], "every symbol needs at least one count");
        }
    }
}
