#![allow(dead_code)]

use std::collections::BTreeMap;

use dse_sim::accel::{ConvParams, GemmCoreSpec};
use dse_sim::remap::BankLocation;
use dse_sim::{Agu, BankMap, DseDesign, StreamConfig};

/// Every geometry with at most `max_bytes` bytes, offering every
/// power-of-two group size as a mode option.
pub fn geometries(max_bytes: u64) -> Vec<BankMap> {
    let mut out = Vec::new();
    for width_bits in [8u32, 16, 32, 64] {
        let word = width_bits as u64 / 8;
        for banks_log in 0..=5 {
            let banks = 1usize << banks_log;
            for depth_log in 0..=20 {
                let depth = 1usize << depth_log;
                if banks as u64 * depth as u64 * word > max_bytes {
                    break;
                }
                let groups = (0..=banks_log).map(|g| 1usize << g).collect();
                out.push(BankMap::new(width_bits, banks, depth, groups).unwrap());
            }
        }
    }
    out
}

fn flat(map: &BankMap, loc: BankLocation) -> usize {
    loc.bank * map.bank_depth_words() + loc.wordline
}

#[derive(Debug, Default)]
pub struct RemapReport {
    pub geometries: usize,
    pub words_checked: u64,
    pub violations: Vec<String>,
}

/// Exhaustive bijectivity, inverse and fixed-bit-permutation check.
pub fn check_remap(max_bytes: u64) -> RemapReport {
    let mut rep = RemapReport::default();
    for map in geometries(max_bytes) {
        rep.geometries += 1;
        let word = map.word_bytes();
        let words = map.num_banks() * map.bank_depth_words();
        let loc_bits = words.trailing_zeros();
        for r_s in 0..map.group_options().len() {
            let mut bad = |what: &str, w: u64| {
                rep.violations.push(format!(
                    "{what} at word {w}: {} banks x {} words x {} bits, {:?}",
                    map.num_banks(),
                    map.bank_depth_words(),
                    map.bank_width_bits(),
                    map.mode_of(r_s)
                ))
            };
            let images: Vec<usize> = (0..loc_bits)
                .map(|i| flat(&map, map.map_with(r_s, (1u64 << i) * word).unwrap()))
                .collect();
            if images.iter().any(|im| im.count_ones() != 1) {
                bad("bit image is not a single bit", 0);
            }
            let mut seen = vec![false; words];
            for w in 0..words as u64 {
                let addr = w * word + (w % word);
                let loc = map.map_with(r_s, addr).unwrap();
                if loc.byte_offset as u64 != w % word {
                    bad("byte offset", w);
                }
                let f = flat(&map, loc);
                if seen[f] {
                    bad("collision", w);
                }
                seen[f] = true;
                let composed = (0..loc_bits)
                    .filter(|&i| w >> i & 1 == 1)
                    .fold(0usize, |acc, i| acc | images[i as usize]);
                if composed != f {
                    bad("not a bit permutation", w);
                }
                if map.unmap_with(r_s, loc).ok() != Some(addr) {
                    bad("inverse", w);
                }
            }
            rep.words_checked += words as u64;
        }
    }
    rep
}

/// Lane start addresses of every im2col patch element over blocked-channel
/// storage: one entry per output pixel, kernel position and channel block.
pub fn patch_oracle(p: &ConvParams, base: u64, core: &GemmCoreSpec) -> BTreeMap<u64, u64> {
    let (ho, wo) = p.output_hw().unwrap();
    let cb_bytes = core.ks as u64;
    let mut out = BTreeMap::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for kh in 0..p.kernel_h {
                for kw in 0..p.kernel_w {
                    for cb in 0..p.c_in / core.ks {
                        let y = oy * p.stride_h + kh;
                        let x = ox * p.stride_w + kw;
                        let a = base + (((cb * p.h + y) * p.w + x) as u64) * cb_bytes;
                        *out.entry(a).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    out
}

/// Multiset of lane start addresses a stream requests.
pub fn stream_multiset(cfg: &StreamConfig, design: &DseDesign) -> BTreeMap<u64, u64> {
    assert!(cfg.gather.is_none());
    let mut out = BTreeMap::new();
    for step in Agu::configure(&cfg.pattern, design, u64::MAX >> 1).unwrap() {
        for &off in &step.spatial_offsets {
            *out.entry((step.temporal_address as i64 + off) as u64)
                .or_insert(0) += 1;
        }
    }
    out
}
