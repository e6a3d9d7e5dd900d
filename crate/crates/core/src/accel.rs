//! GeMM and requantization cores plus golden reference kernels.
//!
//! Word formats (all little endian, row-major inside a tile):
//! A is `Ms x Ks` int8, B is `Ks x Ns` int8, C and D are `Ms x Ns` int32,
//! E is `Ms x Ns` int8. Only the total byte count of a word is checked, the
//! lane split is the streaming engine's business.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ext::WideWord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccelError {
    #[error("{operand} word has {got} bytes, expected {expected}")]
    ShapeMismatch {
        operand: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{what}: got {got} elements, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid quantization constants: {0}")]
    InvalidQuant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmCoreSpec {
    pub ms: usize,
    pub ns: usize,
    pub ks: usize,
}

impl Default for GemmCoreSpec {
    fn default() -> Self {
        Self {
            ms: 8,
            ns: 8,
            ks: 8,
        }
    }
}

impl GemmCoreSpec {
    pub fn a_bytes(&self) -> usize {
        self.ms * self.ks
    }

    pub fn b_bytes(&self) -> usize {
        self.ks * self.ns
    }

    pub fn acc_bytes(&self) -> usize {
        self.ms * self.ns * 4
    }

    pub fn out_bytes(&self) -> usize {
        self.ms * self.ns
    }
}

/// Temporal loop counts of one tile pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmSchedule {
    pub mt: usize,
    pub nt: usize,
    pub kt: usize,
    /// Initialize each accumulator from a C tile.
    pub use_c: bool,
}

impl GemmSchedule {
    pub fn ideal_cycles(&self) -> u64 {
        (self.mt * self.nt * self.kt) as u64
    }

    pub fn output_tiles(&self) -> u64 {
        (self.mt * self.nt) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreCounters {
    pub mac_cycles: u64,
    pub stall_cycles: u64,
    pub tiles_emitted: u64,
}

/// What happened in one core cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GemmTick {
    pub consumed_a: bool,
    pub consumed_b: bool,
    pub consumed_c: bool,
    pub output: Option<WideWord>,
}

/// Output-stationary `Ms x Ns x Ks` PE array.
#[derive(Debug, Clone)]
pub struct GemmCore {
    spec: GemmCoreSpec,
    schedule: GemmSchedule,
    out_lanes: usize,
    acc: Vec<i32>,
    k: usize,
    counters: CoreCounters,
}

fn check_len(operand: &'static str, word: &WideWord, expected: usize) -> Result<(), AccelError> {
    let got = word.bytes().len();
    if got != expected {
        return Err(AccelError::ShapeMismatch {
            operand,
            got,
            expected,
        });
    }
    Ok(())
}

fn i32_at(bytes: &[u8], i: usize) -> i32 {
    i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"))
}

impl GemmCore {
    /// `out_lanes` is the lane count of emitted D words.
    pub fn new(spec: GemmCoreSpec, schedule: GemmSchedule, out_lanes: usize) -> Self {
        Self {
            acc: vec![0; spec.ms * spec.ns],
            spec,
            schedule,
            out_lanes,
            k: 0,
            counters: CoreCounters::default(),
        }
    }

    pub fn spec(&self) -> &GemmCoreSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &GemmSchedule {
        &self.schedule
    }

    pub fn counters(&self) -> &CoreCounters {
        &self.counters
    }

    pub fn is_done(&self) -> bool {
        self.counters.tiles_emitted == self.schedule.output_tiles()
    }

    /// Whether the next MAC needs a C tile.
    pub fn needs_c(&self) -> bool {
        self.schedule.use_c && self.k == 0 && !self.is_done()
    }

    /// Whether the next MAC emits an output tile.
    pub fn at_last_k(&self) -> bool {
        self.k + 1 == self.schedule.kt
    }

    /// Performs one MAC step when every needed input is present and the
    /// output, if one is due, can leave. Otherwise counts a stall.
    pub fn tick(
        &mut self,
        a: Option<&WideWord>,
        b: Option<&WideWord>,
        c: Option<&WideWord>,
        out_ready: bool,
    ) -> Result<GemmTick, AccelError> {
        if self.is_done() {
            return Ok(GemmTick::default());
        }
        let needs_c = self.needs_c();
        let last = self.at_last_k();
        let (Some(a), Some(b)) = (a, b) else {
            self.counters.stall_cycles += 1;
            return Ok(GemmTick::default());
        };
        if (needs_c && c.is_none()) || (last && !out_ready) {
            self.counters.stall_cycles += 1;
            return Ok(GemmTick::default());
        }
        let GemmCoreSpec { ms, ns, ks } = self.spec;
        check_len("A", a, self.spec.a_bytes())?;
        check_len("B", b, self.spec.b_bytes())?;

        if self.k == 0 {
            match c.filter(|_| needs_c) {
                Some(c) => {
                    check_len("C", c, self.spec.acc_bytes())?;
                    for (i, v) in self.acc.iter_mut().enumerate() {
                        *v = i32_at(c.bytes(), i);
                    }
                }
                None => self.acc.fill(0),
            }
        }
        let (ab, bb) = (a.bytes(), b.bytes());
        for m in 0..ms {
            for n in 0..ns {
                let mut s = self.acc[m * ns + n];
                for k in 0..ks {
                    let p = (ab[m * ks + k] as i8 as i32) * (bb[k * ns + n] as i8 as i32);
                    s = s.wrapping_add(p);
                }
                self.acc[m * ns + n] = s;
            }
        }
        self.counters.mac_cycles += 1;

        let mut out = GemmTick {
            consumed_a: true,
            consumed_b: true,
            consumed_c: needs_c,
            output: None,
        };
        if last {
            let bytes: Vec<u8> = self.acc.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.output = Some(WideWord::from_bytes(self.out_lanes, bytes));
            self.counters.tiles_emitted += 1;
            self.k = 0;
        } else {
            self.k += 1;
        }
        Ok(out)
    }
}

/// Requantization constants, packed into 8 bytes on the C stream:
/// multiplier (i32 LE), shift (u8), zero point (i8), two pad bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub multiplier: i32,
    pub shift: u8,
    pub zero_point: i8,
}

impl QuantSpec {
    pub const PACKED_BYTES: usize = 8;
    pub const MAX_SHIFT: u8 = 62;

    pub fn identity() -> Self {
        Self {
            multiplier: 1,
            shift: 0,
            zero_point: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AccelError> {
        if self.shift > Self::MAX_SHIFT {
            return Err(AccelError::InvalidQuant(format!(
                "shift {} above {}",
                self.shift,
                Self::MAX_SHIFT
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.multiplier.to_le_bytes());
        out[4] = self.shift;
        out[5] = self.zero_point as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AccelError> {
        if bytes.len() < Self::PACKED_BYTES {
            return Err(AccelError::ShapeMismatch {
                operand: "quant constants",
                got: bytes.len(),
                expected: Self::PACKED_BYTES,
            });
        }
        let q = Self {
            multiplier: i32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")),
            shift: bytes[4],
            zero_point: bytes[5] as i8,
        };
        q.validate()?;
        Ok(q)
    }
}

/// `clamp(round_half_away((d * multiplier) / 2^shift) + zero_point, -128, 127)`.
pub fn rescale(d: i32, q: &QuantSpec) -> i8 {
    let prod = d as i64 * q.multiplier as i64;
    let scaled = if q.shift == 0 {
        prod
    } else {
        let half = 1i64 << (q.shift - 1);
        let mag = (prod.unsigned_abs() + half as u64) >> q.shift;
        if prod < 0 {
            -(mag as i64)
        } else {
            mag as i64
        }
    };
    (scaled + q.zero_point as i64).clamp(-128, 127) as i8
}

/// Lane-parallel rescale unit. D lane `j` is rescaled with the constants in
/// lane `j` of the scale word.
#[derive(Debug, Clone)]
pub struct QuantCore {
    spec: GemmCoreSpec,
    out_lanes: usize,
    tiles: u64,
}

impl QuantCore {
    pub fn new(spec: GemmCoreSpec, out_lanes: usize) -> Self {
        Self {
            spec,
            out_lanes,
            tiles: 0,
        }
    }

    pub fn tiles(&self) -> u64 {
        self.tiles
    }

    pub fn tick(
        &mut self,
        d: Option<&WideWord>,
        scale: Option<&WideWord>,
    ) -> Result<Option<WideWord>, AccelError> {
        let (Some(d), Some(scale)) = (d, scale) else {
            return Ok(None);
        };
        check_len("D", d, self.spec.acc_bytes())?;
        if scale.lanes() != d.lanes() || scale.lane_bytes() < QuantSpec::PACKED_BYTES {
            return Err(AccelError::ShapeMismatch {
                operand: "scale",
                got: scale.bytes().len(),
                expected: d.lanes() * QuantSpec::PACKED_BYTES,
            });
        }
        let per_lane = d.lane_bytes() / 4;
        let mut out = Vec::with_capacity(self.spec.out_bytes());
        for lane in 0..d.lanes() {
            let q = QuantSpec::from_bytes(scale.lane(lane))?;
            let src = d.lane(lane);
            for i in 0..per_lane {
                out.push(rescale(i32_at(src, i), &q) as u8);
            }
        }
        self.tiles += 1;
        Ok(Some(WideWord::from_bytes(self.out_lanes, out)))
    }
}

/// Convolution geometry, no padding. Input is `H x W x C_in` (channels
/// innermost), weights are `KH x KW x C_in x C_out`, output is
/// `Ho x Wo x C_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl ConvParams {
    /// `None` when the kernel does not fit or a stride is zero.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride_h == 0
            || self.stride_w == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.kernel_h > self.h
            || self.kernel_w > self.w
        {
            return None;
        }
        Some((
            (self.h - self.kernel_h) / self.stride_h + 1,
            (self.w - self.kernel_w) / self.stride_w + 1,
        ))
    }

    /// Reduction length of the equivalent GeMM.
    pub fn gemm_k(&self) -> usize {
        self.kernel_h * self.kernel_w * self.c_in
    }
}

fn check_dim(what: &'static str, got: usize, expected: usize) -> Result<(), AccelError> {
    if got != expected {
        Err(AccelError::DimensionMismatch {
            what,
            got,
            expected,
        })
    } else {
        Ok(())
    }
}

/// `D = A * B + C` with int8 operands and wrapping int32 accumulation.
pub fn reference_gemm(
    a: &[i8],
    b: &[i8],
    c: Option<&[i32]>,
    m: usize,
    n: usize,
    k: usize,
) -> Result<Vec<i32>, AccelError> {
    check_dim("A", a.len(), m * k)?;
    check_dim("B", b.len(), k * n)?;
    if let Some(c) = c {
        check_dim("C", c.len(), m * n)?;
    }
    let mut d = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = c.map_or(0, |c| c[i * n + j]);
            for p in 0..k {
                s = s.wrapping_add(a[i * k + p] as i32 * b[p * n + j] as i32);
            }
            d[i * n + j] = s;
        }
    }
    Ok(d)
}

/// Sliding-window convolution with optional per-output-channel bias.
pub fn reference_conv(
    input: &[i8],
    weights: &[i8],
    bias: Option<&[i32]>,
    p: &ConvParams,
) -> Result<Vec<i32>, AccelError> {
    let (ho, wo) = p.output_hw().ok_or(AccelError::DimensionMismatch {
        what: "kernel window",
        got: p.kernel_h.max(p.kernel_w),
        expected: p.h.min(p.w),
    })?;
    check_dim("input", input.len(), p.h * p.w * p.c_in)?;
    check_dim(
        "weights",
        weights.len(),
        p.kernel_h * p.kernel_w * p.c_in * p.c_out,
    )?;
    if let Some(bias) = bias {
        check_dim("bias", bias.len(), p.c_out)?;
    }
    let mut out = vec![0i32; ho * wo * p.c_out];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..p.c_out {
                let mut s = bias.map_or(0, |b| b[co]);
                for ky in 0..p.kernel_h {
                    for kx in 0..p.kernel_w {
                        let iy = oy * p.stride_h + ky;
                        let ix = ox * p.stride_w + kx;
                        for ci in 0..p.c_in {
                            let x = input[(iy * p.w + ix) * p.c_in + ci] as i32;
                            let wt = weights[((ky * p.kernel_w + kx) * p.c_in + ci) * p.c_out + co]
                                as i32;
                            s = s.wrapping_add(x * wt);
                        }
                    }
                }
                out[(oy * wo + ox) * p.c_out + co] = s;
            }
        }
    }
    Ok(out)
}

pub fn reference_quant(d: &[i32], q: &QuantSpec) -> Vec<i8> {
    d.iter().map(|&v| rescale(v, q)).collect()
}
