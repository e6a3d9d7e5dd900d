//! N-dimensional affine address generation.
//!
//! A stream walks a temporal loop nest (one temporal address per step) and,
//! for every temporal address, a design-time spatial loop nest that yields
//! one offset per channel. Temporal dimension 0 is the innermost loop.
//!
//! [`Agu`] models the dual-counter hardware: each temporal dimension keeps a
//! bound counter and a stride accumulator, and advancing is a carry chain.
//! [`address_at`] evaluates the same affine function in closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dse::DseDesign;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AguError {
    #[error("pattern has {got} temporal dimensions, design supports {max}")]
    DimensionOverflow { got: usize, max: usize },
    #[error("pattern has {got} spatial strides, design has {expected} spatial dimensions")]
    SpatialDimensionMismatch { got: usize, expected: usize },
    #[error("temporal bounds ({bounds}) and strides ({strides}) differ in length")]
    LengthMismatch { bounds: usize, strides: usize },
    #[error("temporal bound of dimension {dim} must be at least 1")]
    InvalidBound { dim: usize },
    #[error("pattern reaches addresses [{min}, {max}] outside memory of {limit} bytes")]
    AddressOutOfRange { min: i128, max: i128, limit: u64 },
    #[error("iteration {index} out of range for {len} temporal steps")]
    IndexOutOfRange { index: u64, len: u64 },
}

/// Runtime affine descriptor of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessPattern {
    pub base_address: u64,
    pub temporal_bounds: Vec<usize>,
    pub temporal_strides: Vec<i64>,
    pub spatial_strides: Vec<i64>,
}

impl AccessPattern {
    pub fn new(
        base_address: u64,
        temporal_bounds: Vec<usize>,
        temporal_strides: Vec<i64>,
        spatial_strides: Vec<i64>,
    ) -> Self {
        Self {
            base_address,
            temporal_bounds,
            temporal_strides,
            spatial_strides,
        }
    }

    /// Number of temporal steps, i.e. the product of the temporal bounds.
    pub fn total_steps(&self) -> u64 {
        self.temporal_bounds.iter().map(|&b| b as u64).product()
    }

    /// Equivalent pattern with unit dimensions dropped and contiguous
    /// neighbouring dimensions merged. Two patterns with the same simplified
    /// form generate the same temporal address sequence.
    pub fn simplified(&self) -> AccessPattern {
        let mut bounds: Vec<usize> = Vec::new();
        let mut strides: Vec<i64> = Vec::new();
        for (&b, &s) in self.temporal_bounds.iter().zip(&self.temporal_strides) {
            if b == 1 {
                continue;
            }
            if let (Some(lb), Some(ls)) = (bounds.last_mut(), strides.last()) {
                if *ls * (*lb as i64) == s {
                    *lb *= b;
                    continue;
                }
            }
            bounds.push(b);
            strides.push(s);
        }
        AccessPattern {
            base_address: self.base_address,
            temporal_bounds: bounds,
            temporal_strides: strides,
            spatial_strides: self.spatial_strides.clone(),
        }
    }

    fn validate_shape(&self, design: &DseDesign) -> Result<(), AguError> {
        if self.temporal_bounds.len() != self.temporal_strides.len() {
            return Err(AguError::LengthMismatch {
                bounds: self.temporal_bounds.len(),
                strides: self.temporal_strides.len(),
            });
        }
        if self.temporal_bounds.len() > design.max_temporal_dims {
            return Err(AguError::DimensionOverflow {
                got: self.temporal_bounds.len(),
                max: design.max_temporal_dims,
            });
        }
        if self.spatial_strides.len() != design.spatial_bounds.len() {
            return Err(AguError::SpatialDimensionMismatch {
                got: self.spatial_strides.len(),
                expected: design.spatial_bounds.len(),
            });
        }
        if let Some(dim) = self.temporal_bounds.iter().position(|&b| b == 0) {
            return Err(AguError::InvalidBound { dim });
        }
        Ok(())
    }

    /// Smallest and largest byte address reachable by the temporal and
    /// spatial nests together.
    pub fn address_range(&self, spatial_bounds: &[usize]) -> (i128, i128) {
        let mut lo = self.base_address as i128;
        let mut hi = lo;
        let dims = self
            .temporal_bounds
            .iter()
            .zip(&self.temporal_strides)
            .chain(spatial_bounds.iter().zip(&self.spatial_strides));
        for (&b, &s) in dims {
            let reach = s as i128 * (b as i128 - 1);
            lo += reach.min(0);
            hi += reach.max(0);
        }
        (lo, hi)
    }
}

/// Offsets of the spatial loop nest, dimension 0 outermost.
pub fn spatial_offsets(bounds: &[usize], strides: &[i64]) -> Vec<i64> {
    let mut offsets = vec![0i64];
    for (&b, &s) in bounds.iter().zip(strides) {
        let mut next = Vec::with_capacity(offsets.len() * b);
        for &o in &offsets {
            for i in 0..b {
                next.push(o + i as i64 * s);
            }
        }
        offsets = next;
    }
    offsets
}

/// Dual-counter state of the temporal AGU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AguState {
    pub bound_counters: Vec<usize>,
    pub stride_accumulators: Vec<i64>,
    pub exhausted: bool,
}

/// One generated step: a temporal address plus the per-channel offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AguStep {
    pub temporal_address: u64,
    pub spatial_offsets: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct Agu {
    pattern: AccessPattern,
    spatial: Vec<i64>,
    state: AguState,
    emitted: u64,
}

impl Agu {
    /// Validates `pattern` against the design and the memory size and
    /// returns a generator positioned at the first step.
    pub fn configure(
        pattern: &AccessPattern,
        design: &DseDesign,
        memory_bytes: u64,
    ) -> Result<Self, AguError> {
        pattern.validate_shape(design)?;
        let (min, max) = pattern.address_range(&design.spatial_bounds);
        if min < 0 || max >= memory_bytes as i128 {
            return Err(AguError::AddressOutOfRange {
                min,
                max,
                limit: memory_bytes,
            });
        }
        let dims = pattern.temporal_bounds.len();
        Ok(Self {
            pattern: pattern.clone(),
            spatial: spatial_offsets(&design.spatial_bounds, &pattern.spatial_strides),
            state: AguState {
                bound_counters: vec![0; dims],
                stride_accumulators: vec![0; dims],
                exhausted: pattern.total_steps() == 0,
            },
            emitted: 0,
        })
    }

    pub fn state(&self) -> &AguState {
        &self.state
    }

    pub fn pattern(&self) -> &AccessPattern {
        &self.pattern
    }

    pub fn spatial_offsets(&self) -> &[i64] {
        &self.spatial
    }

    pub fn total_steps(&self) -> u64 {
        self.pattern.total_steps()
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn is_exhausted(&self) -> bool {
        self.state.exhausted
    }

    /// Emits the current temporal address and advances the counters.
    pub fn advance(&mut self) -> Option<u64> {
        if self.state.exhausted {
            return None;
        }
        let offset: i64 = self.state.stride_accumulators.iter().sum();
        let address = (self.pattern.base_address as i64 + offset) as u64;
        self.emitted += 1;

        // carry chain, dimension 0 first
        let mut carried = true;
        for d in 0..self.state.bound_counters.len() {
            self.state.bound_counters[d] += 1;
            self.state.stride_accumulators[d] += self.pattern.temporal_strides[d];
            if self.state.bound_counters[d] < self.pattern.temporal_bounds[d] {
                carried = false;
                break;
            }
            self.state.bound_counters[d] = 0;
            self.state.stride_accumulators[d] = 0;
        }
        if carried {
            self.state.exhausted = true;
        }
        Some(address)
    }
}

impl Iterator for Agu {
    type Item = AguStep;

    fn next(&mut self) -> Option<AguStep> {
        self.advance().map(|temporal_address| AguStep {
            temporal_address,
            spatial_offsets: self.spatial.clone(),
        })
    }
}

/// Closed-form evaluation of step `t`: mixed-radix decomposition of `t`
/// with dimension 0 fastest.
pub fn address_at(
    pattern: &AccessPattern,
    design: &DseDesign,
    t: u64,
) -> Result<AguStep, AguError> {
    pattern.validate_shape(design)?;
    let len = pattern.total_steps();
    if t >= len {
        return Err(AguError::IndexOutOfRange { index: t, len });
    }
    let mut rest = t;
    let mut offset = 0i64;
    for (&b, &s) in pattern
        .temporal_bounds
        .iter()
        .zip(&pattern.temporal_strides)
    {
        let idx = rest % b as u64;
        rest /= b as u64;
        offset += idx as i64 * s;
    }
    Ok(AguStep {
        temporal_address: (pattern.base_address as i64 + offset) as u64,
        spatial_offsets: spatial_offsets(&design.spatial_bounds, &pattern.spatial_strides),
    })
}
