//! Datapath extensions between a streaming engine and the accelerator.
//!
//! Extensions are combinational: a chain rewrites a wide word in the cycle
//! it is presented. Each stage can be bypassed at runtime.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtError {
    #[error("transposer needs a square byte tile, got {lanes} lanes of {lane_bytes} bytes")]
    ShapeMismatch { lanes: usize, lane_bytes: usize },
    #[error("broadcast source lane {lane} out of range for {lanes} lanes")]
    LaneOutOfRange { lane: usize, lanes: usize },
}

/// `lanes` channels of `lane_bytes` bytes each, lane-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WideWord {
    lanes: usize,
    bytes: Vec<u8>,
}

impl WideWord {
    pub fn zeroed(lanes: usize, lane_bytes: usize) -> Self {
        Self {
            lanes,
            bytes: vec![0; lanes * lane_bytes],
        }
    }

    /// Builds a word from raw bytes. Panics if `bytes` is not a whole
    /// number of lanes.
    pub fn from_bytes(lanes: usize, bytes: Vec<u8>) -> Self {
        assert!(
            lanes > 0 && bytes.len().is_multiple_of(lanes),
            "{} bytes do not split into {} lanes",
            bytes.len(),
            lanes
        );
        Self { lanes, bytes }
    }

    /// Builds a word from little-endian lane values of `lane_bytes` each.
    pub fn from_lanes(lane_bytes: usize, lanes: &[u64]) -> Self {
        let mut bytes = Vec::with_capacity(lanes.len() * lane_bytes);
        for &l in lanes {
            bytes.extend_from_slice(&l.to_le_bytes()[..lane_bytes]);
        }
        Self::from_bytes(lanes.len(), bytes)
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn lane_bytes(&self) -> usize {
        self.bytes.len() / self.lanes
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn lane(&self, i: usize) -> &[u8] {
        let lb = self.lane_bytes();
        &self.bytes[i * lb..(i + 1) * lb]
    }

    pub fn lane_mut(&mut self, i: usize) -> &mut [u8] {
        let lb = self.lane_bytes();
        &mut self.bytes[i * lb..(i + 1) * lb]
    }

    pub fn lane_u64(&self, i: usize) -> u64 {
        let mut buf = [0u8; 8];
        let lane = self.lane(i);
        buf[..lane.len()].copy_from_slice(lane);
        u64::from_le_bytes(buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionKind {
    Transposer,
    Broadcaster,
}

/// One runtime-configured stage of an extension chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionStage {
    pub kind: ExtensionKind,
    pub enabled: bool,
    /// Broadcaster only.
    #[serde(default)]
    pub source_lane: usize,
}

impl ExtensionStage {
    pub fn transposer(enabled: bool) -> Self {
        Self {
            kind: ExtensionKind::Transposer,
            enabled,
            source_lane: 0,
        }
    }

    pub fn broadcaster(enabled: bool, source_lane: usize) -> Self {
        Self {
            kind: ExtensionKind::Broadcaster,
            enabled,
            source_lane,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionSpec {
    pub stages: Vec<ExtensionStage>,
}

impl ExtensionSpec {
    pub fn new(stages: Vec<ExtensionStage>) -> Self {
        Self { stages }
    }

    /// All stages of `kinds`, bypassed.
    pub fn bypassed(kinds: &[ExtensionKind]) -> Self {
        Self {
            stages: kinds
                .iter()
                .map(|&kind| ExtensionStage {
                    kind,
                    enabled: false,
                    source_lane: 0,
                })
                .collect(),
        }
    }

    /// Source lane of the first enabled broadcaster, if any.
    pub fn broadcast_source(&self) -> Option<usize> {
        self.stages
            .iter()
            .find(|s| s.enabled && s.kind == ExtensionKind::Broadcaster)
            .map(|s| s.source_lane)
    }

    /// Checks every enabled stage against the word shape it will see.
    pub fn validate(&self, lanes: usize, lane_bytes: usize) -> Result<(), ExtError> {
        for s in self.stages.iter().filter(|s| s.enabled) {
            match s.kind {
                ExtensionKind::Transposer if lanes != lane_bytes => {
                    return Err(ExtError::ShapeMismatch { lanes, lane_bytes })
                }
                ExtensionKind::Broadcaster if s.source_lane >= lanes => {
                    return Err(ExtError::LaneOutOfRange {
                        lane: s.source_lane,
                        lanes,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Byte-level transpose of a square tile: `out[i][j] = in[j][i]`.
pub fn transpose_word(word: &WideWord) -> Result<WideWord, ExtError> {
    let n = word.lanes();
    if word.lane_bytes() != n {
        return Err(ExtError::ShapeMismatch {
            lanes: n,
            lane_bytes: word.lane_bytes(),
        });
    }
    let src = word.bytes();
    let mut out = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = src[j * n + i];
        }
    }
    Ok(WideWord::from_bytes(n, out))
}

/// Copies lane `source_lane` into every lane.
pub fn broadcast_word(word: &WideWord, source_lane: usize) -> Result<WideWord, ExtError> {
    if source_lane >= word.lanes() {
        return Err(ExtError::LaneOutOfRange {
            lane: source_lane,
            lanes: word.lanes(),
        });
    }
    let src = word.lane(source_lane).to_vec();
    let mut out = word.clone();
    for i in 0..out.lanes() {
        out.lane_mut(i).copy_from_slice(&src);
    }
    Ok(out)
}

/// Runs `word` through the enabled stages in order.
pub fn apply_chain(spec: &ExtensionSpec, word: WideWord) -> Result<WideWord, ExtError> {
    let mut w = word;
    for stage in spec.stages.iter().filter(|s| s.enabled) {
        w = match stage.kind {
            ExtensionKind::Transposer => transpose_word(&w)?,
            ExtensionKind::Broadcaster => broadcast_word(&w, stage.source_lane)?,
        };
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile8() -> WideWord {
        WideWord::from_bytes(8, (0..64u8).collect())
    }

    #[test]
    fn transposes_index_tile() {
        let t = transpose_word(&tile8()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(t.lane(i)[j] as usize, 8 * j + i);
            }
        }
    }

    #[test]
    fn symmetric_tile_is_fixed_point() {
        let mut bytes = vec![0u8; 64];
        for i in 0..8 {
            for j in 0..8 {
                bytes[i * 8 + j] = (i + j) as u8;
            }
        }
        let w = WideWord::from_bytes(8, bytes);
        assert_eq!(transpose_word(&w).unwrap(), w);
    }

    #[test]
    fn non_square_transposer_rejected() {
        let w = WideWord::zeroed(32, 8);
        assert_eq!(
            transpose_word(&w).unwrap_err(),
            ExtError::ShapeMismatch {
                lanes: 32,
                lane_bytes: 8
            }
        );
    }

    #[test]
    fn broadcast_lane_zero() {
        let w = WideWord::from_lanes(2, &[0xa, 0xb, 0xc, 0xd]);
        let b = broadcast_word(&w, 0).unwrap();
        assert_eq!(b, WideWord::from_lanes(2, &[0xa; 4]));
        let one = WideWord::from_lanes(8, &[42]);
        assert_eq!(broadcast_word(&one, 0).unwrap(), one);
        assert!(broadcast_word(&w, 4).is_err());
    }

    #[test]
    fn chain_bypass_and_composition() {
        let kinds = [ExtensionKind::Transposer, ExtensionKind::Broadcaster];
        assert_eq!(
            apply_chain(&ExtensionSpec::bypassed(&kinds), tile8()).unwrap(),
            tile8()
        );

        let t_only = ExtensionSpec::new(vec![ExtensionStage::transposer(true)]);
        assert_eq!(
            apply_chain(&t_only, tile8()).unwrap(),
            transpose_word(&tile8()).unwrap()
        );

        let both = ExtensionSpec::new(vec![
            ExtensionStage::transposer(true),
            ExtensionStage::broadcaster(true, 0),
        ]);
        let out = apply_chain(&both, tile8()).unwrap();
        // row 0 of the transposed tile is column 0 of the input: 0, 8, 16, ...
        let expected_row: Vec<u8> = (0..8).map(|j| 8 * j).collect();
        for i in 0..8 {
            assert_eq!(out.lane(i), &expected_row[..]);
        }
    }

    #[test]
    fn validate_catches_bad_stages() {
        let s = ExtensionSpec::new(vec![ExtensionStage::transposer(true)]);
        assert!(s.validate(8, 8).is_ok());
        assert!(s.validate(32, 8).is_err());
        let b = ExtensionSpec::new(vec![ExtensionStage::broadcaster(true, 40)]);
        assert!(b.validate(32, 8).is_err());
        assert_eq!(
            ExtensionSpec::new(vec![ExtensionStage::broadcaster(false, 3)]).broadcast_source(),
            None
        );
    }
}
