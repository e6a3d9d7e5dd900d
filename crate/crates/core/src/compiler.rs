//! Workload lowering: tensor allocation, per-stream access patterns,
//! extension enables, addressing-mode selection and core schedules.
//!
//! Tensors are stored tile-contiguous. Matrices use a block-row-major
//! layout whose blocks are the core's tile shapes; convolution inputs use a
//! channel-blocked `C/Ks x H x W x Ks` layout. Convolution weights are
//! pre-linearized into the `K x N` matrix with `k = (kh * KW + kw) * C_in + ci`,
//! so the weight stream is an ordinary GeMM B stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accel::{ConvParams, GemmCoreSpec, GemmSchedule, QuantSpec};
use crate::agu::{address_at, AccessPattern};
use crate::dse::{DseDesign, IssuePolicy, LaneGather, StreamConfig, StreamMode};
use crate::ext::{ExtensionKind, ExtensionSpec, ExtensionStage};
use crate::remap::BankMap;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("workload not divisible by the core tiling: {0}")]
    IndivisibleWorkload(String),
    #[error("tensor regions {first} and {second} overlap")]
    LayoutOverlap {
        first: &'static str,
        second: &'static str,
    },
    #[error("explicit im2col needs {needed} scratch bytes, {available} available")]
    InsufficientScratch { needed: u64, available: u64 },
    #[error("tensors need {needed} bytes, memory holds {available}")]
    OutOfMemory { needed: u64, available: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Ablation feature switches. Level 1 has everything off, each further
/// level adds one feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub prefetch: bool,
    pub transposer: bool,
    pub broadcaster: bool,
    pub implicit_im2col: bool,
    pub addr_mode_switching: bool,
}

impl FeatureFlags {
    pub const LEVELS: std::ops::RangeInclusive<u8> = 1..=6;

    pub fn ladder(level: u8) -> Option<Self> {
        if !Self::LEVELS.contains(&level) {
            return None;
        }
        Some(Self {
            prefetch: level >= 2,
            transposer: level >= 3,
            broadcaster: level >= 4,
            implicit_im2col: level >= 5,
            addr_mode_switching: level >= 6,
        })
    }

    pub fn all() -> Self {
        Self::ladder(6).expect("level 6 exists")
    }

    /// Ladder level of this flag set, if it is one.
    pub fn level(&self) -> Option<u8> {
        Self::LEVELS
            .clone()
            .find(|&l| Self::ladder(l) == Some(*self))
    }

    /// Ladder level as a digit, otherwise the five switches as bits in
    /// ladder order.
    pub fn label(&self) -> String {
        match self.level() {
            Some(l) => l.to_string(),
            None => [
                self.prefetch,
                self.transposer,
                self.broadcaster,
                self.implicit_im2col,
                self.addr_mode_switching,
            ]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect(),
        }
    }

    pub fn issue_policy(&self) -> IssuePolicy {
        if self.prefetch {
            IssuePolicy::Prefetch
        } else {
            IssuePolicy::Synchronous
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadShape {
    Gemm {
        m: usize,
        n: usize,
        k: usize,
    },
    TransposedGemm {
        m: usize,
        n: usize,
        k: usize,
    },
    Conv {
        h: usize,
        w: usize,
        c_in: usize,
        c_out: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride_h: usize,
        stride_w: usize,
    },
}

impl WorkloadShape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WorkloadShape::Gemm { .. } => "gemm",
            WorkloadShape::TransposedGemm { .. } => "transposed_gemm",
            WorkloadShape::Conv { .. } => "conv",
        }
    }

    pub fn conv_params(&self) -> Option<ConvParams> {
        match *self {
            WorkloadShape::Conv {
                h,
                w,
                c_in,
                c_out,
                kernel_h,
                kernel_w,
                stride_h,
                stride_w,
            } => Some(ConvParams {
                h,
                w,
                c_in,
                c_out,
                kernel_h,
                kernel_w,
                stride_h,
                stride_w,
            }),
            _ => None,
        }
    }

    /// `(M, N, K)` of the GeMM this workload runs as. `None` for a conv
    /// whose kernel does not fit.
    pub fn gemm_dims(&self) -> Option<(usize, usize, usize)> {
        match *self {
            WorkloadShape::Gemm { m, n, k } | WorkloadShape::TransposedGemm { m, n, k } => {
                Some((m, n, k))
            }
            WorkloadShape::Conv { .. } => {
                let p = self.conv_params()?;
                let (ho, wo) = p.output_hw()?;
                Some((ho * wo, p.c_out, p.gemm_k()))
            }
        }
    }

    /// Compact dimension string used in reports.
    pub fn dims_label(&self) -> String {
        match *self {
            WorkloadShape::Gemm { m, n, k } | WorkloadShape::TransposedGemm { m, n, k } => {
                format!("{m}x{n}x{k}")
            }
            WorkloadShape::Conv {
                h,
                w,
                c_in,
                c_out,
                kernel_h,
                kernel_w,
                stride_h,
                stride_w,
            } => format!("{h}x{w}x{c_in}->{c_out} k{kernel_h}x{kernel_w} s{stride_h}x{stride_w}"),
        }
    }
}

/// User-facing workload description.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub id: String,
    #[serde(flatten)]
    pub shape: WorkloadShape,
    #[serde(default)]
    pub quantize_output: bool,
    /// Add a C initializer (full `M x N` for GeMM, per output channel for conv).
    #[serde(default)]
    pub bias: bool,
    /// Test hook: corrupt the golden result so the correctness check fails.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupt_golden: bool,
}

impl WorkloadSpec {
    pub fn new(id: impl Into<String>, shape: WorkloadShape) -> Self {
        Self {
            id: id.into(),
            shape,
            quantize_output: false,
            bias: false,
            corrupt_golden: false,
        }
    }

    pub fn gemm(m: usize, n: usize, k: usize) -> Self {
        Self::new(format!("gemm-{m}x{n}x{k}"), WorkloadShape::Gemm { m, n, k })
    }

    pub fn transposed_gemm(m: usize, n: usize, k: usize) -> Self {
        Self::new(
            format!("tgemm-{m}x{n}x{k}"),
            WorkloadShape::TransposedGemm { m, n, k },
        )
    }

    pub fn conv(p: ConvParams) -> Self {
        Self::new(
            format!(
                "conv-{}x{}x{}-{}-k{}x{}-s{}x{}",
                p.h, p.w, p.c_in, p.c_out, p.kernel_h, p.kernel_w, p.stride_h, p.stride_w
            ),
            WorkloadShape::Conv {
                h: p.h,
                w: p.w,
                c_in: p.c_in,
                c_out: p.c_out,
                kernel_h: p.kernel_h,
                kernel_w: p.kernel_w,
                stride_h: p.stride_h,
                stride_w: p.stride_w,
            },
        )
    }

    pub fn with_quantization(mut self) -> Self {
        self.quantize_output = true;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// Checks the tiling constraints against `core`.
    pub fn validate(&self, core: &GemmCoreSpec) -> Result<(), CompileError> {
        let indivisible = |m: String| Err(CompileError::IndivisibleWorkload(m));
        if self.bias && self.quantize_output {
            return Err(CompileError::Unsupported(
                "bias together with quantized output".into(),
            ));
        }
        if let Some(p) = self.shape.conv_params() {
            let Some((ho, wo)) = p.output_hw() else {
                return Err(CompileError::ShapeMismatch(format!(
                    "kernel {}x{} with stride {}x{} does not fit a {}x{} input",
                    p.kernel_h, p.kernel_w, p.stride_h, p.stride_w, p.h, p.w
                )));
            };
            if p.c_in == 0 || p.c_in % core.ks != 0 {
                return indivisible(format!("C_in = {} vs Ks = {}", p.c_in, core.ks));
            }
            if p.c_out == 0 || p.c_out % core.ns != 0 {
                return indivisible(format!("C_out = {} vs Ns = {}", p.c_out, core.ns));
            }
            // an output tile is Ms pixels of one output row
            if wo % core.ms != 0 {
                return indivisible(format!("output width {wo} vs Ms = {}", core.ms));
            }
            debug_assert_eq!((ho * wo) % core.ms, 0);
            return Ok(());
        }
        let (m, n, k) = self.shape.gemm_dims().expect("matrix workload");
        for (name, v, t) in [("M", m, core.ms), ("N", n, core.ns), ("K", k, core.ks)] {
            if v == 0 || v % t != 0 {
                return indivisible(format!("{name} = {v} vs tile {t}"));
            }
        }
        Ok(())
    }

    /// Temporal loop counts of the GeMM pass.
    pub fn tiling(&self, core: &GemmCoreSpec) -> Result<(usize, usize, usize), CompileError> {
        self.validate(core)?;
        let (m, n, k) = self.shape.gemm_dims().expect("validated");
        Ok((m / core.ms, n / core.ns, k / core.ks))
    }
}

/// Design-time shapes of the five streams: A and B operands, C
/// initializer or quantization constants, D int32 result, E int8 result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDesigns {
    pub a: DseDesign,
    pub b: DseDesign,
    pub c: DseDesign,
    pub d: DseDesign,
    pub e: DseDesign,
}

fn design(
    mode: StreamMode,
    spatial_bounds: Vec<usize>,
    max_temporal_dims: usize,
    data_buffer_depth: usize,
    bank_width_bits: u32,
    extensions: Vec<ExtensionKind>,
) -> DseDesign {
    DseDesign {
        mode,
        num_channels: spatial_bounds.iter().product(),
        spatial_bounds,
        max_temporal_dims,
        address_buffer_depth: 8,
        data_buffer_depth,
        bank_width_bits,
        extensions,
    }
}

impl Default for StreamDesigns {
    /// The evaluation system: 8x8x8 core, 64-bit lanes.
    fn default() -> Self {
        use ExtensionKind::*;
        use StreamMode::*;
        Self {
            a: design(Read, vec![8], 6, 8, 64, vec![Transposer]),
            b: design(Read, vec![8], 3, 8, 64, vec![Transposer]),
            c: design(Read, vec![8, 4], 3, 1, 64, vec![Broadcaster]),
            d: design(Write, vec![8, 4], 3, 1, 64, vec![]),
            e: design(Write, vec![8], 3, 1, 64, vec![]),
        }
    }
}

impl StreamDesigns {
    /// One-dimensional spatial unrolling sized for `core` with
    /// `bank_width_bits` lanes.
    pub fn for_core(core: &GemmCoreSpec, bank_width_bits: u32) -> Self {
        let lane = (bank_width_bits / 8) as usize;
        let lanes = |bytes: usize| vec![bytes.div_ceil(lane).max(1)];
        use ExtensionKind::*;
        use StreamMode::*;
        Self {
            a: design(
                Read,
                lanes(core.a_bytes()),
                6,
                8,
                bank_width_bits,
                vec![Transposer],
            ),
            b: design(
                Read,
                lanes(core.b_bytes()),
                3,
                8,
                bank_width_bits,
                vec![Transposer],
            ),
            c: design(
                Read,
                lanes(core.acc_bytes()),
                3,
                1,
                bank_width_bits,
                vec![Broadcaster],
            ),
            d: design(
                Write,
                lanes(core.acc_bytes()),
                3,
                1,
                bank_width_bits,
                vec![],
            ),
            e: design(
                Write,
                lanes(core.out_bytes()),
                3,
                1,
                bank_width_bits,
                vec![],
            ),
        }
    }

    pub fn get(&self, id: StreamId) -> &DseDesign {
        match id {
            StreamId::A => &self.a,
            StreamId::B => &self.b,
            StreamId::C => &self.c,
            StreamId::D => &self.d,
            StreamId::E => &self.e,
        }
    }

    pub fn get_mut(&mut self, id: StreamId) -> &mut DseDesign {
        match id {
            StreamId::A => &mut self.a,
            StreamId::B => &mut self.b,
            StreamId::C => &mut self.c,
            StreamId::D => &mut self.d,
            StreamId::E => &mut self.e,
        }
    }

    /// Checks that every port carries exactly one core tile.
    pub fn check_core(&self, core: &GemmCoreSpec) -> Result<(), CompileError> {
        let checks = [
            (StreamId::A, core.a_bytes()),
            (StreamId::B, core.b_bytes()),
            (StreamId::C, core.acc_bytes()),
            (StreamId::D, core.acc_bytes()),
            (StreamId::E, core.out_bytes()),
        ];
        for (id, bytes) in checks {
            let d = self.get(id);
            let port = d.num_channels * d.lane_bytes();
            if port != bytes {
                return Err(CompileError::ShapeMismatch(format!(
                    "stream {id} port is {port} bytes, the core tile is {bytes}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamId {
    A,
    B,
    C,
    D,
    E,
}

impl StreamId {
    pub const ALL: [StreamId; 5] = [
        StreamId::A,
        StreamId::B,
        StreamId::C,
        StreamId::D,
        StreamId::E,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for StreamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Matrix of core tiles, tiles and their contents row-major.
    BlockRowMajor,
    /// Matrix of core tiles, tiles column-major, contents row-major.
    BlockColMajor,
    /// The transpose stored block-row-major (a `K x M` operand for A).
    TransposedBlockRowMajor,
    /// `C/Ks x H x W x Ks`.
    BlockedChannel,
    /// One row of tiles shared by every row block.
    RowBroadcast,
    /// Consecutive copies of one packed record.
    Replicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorLayout {
    pub base: u64,
    pub bytes: u64,
    pub scheme: Scheme,
    pub mode_select: usize,
}

impl TensorLayout {
    pub fn end(&self) -> u64 {
        self.base + self.bytes
    }
}

/// Placement of every tensor of one workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub a: TensorLayout,
    pub b: TensorLayout,
    /// Initializer or quantization constants.
    pub c: Option<TensorLayout>,
    /// int32 result.
    pub d: Option<TensorLayout>,
    /// int8 result.
    pub e: Option<TensorLayout>,
    /// Materialized im2col matrix.
    pub scratch: Option<TensorLayout>,
}

impl Layout {
    pub fn tensors(&self) -> Vec<(&'static str, TensorLayout)> {
        let mut out = vec![("a", self.a), ("b", self.b)];
        for (name, t) in [
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("scratch", self.scratch),
        ] {
            if let Some(t) = t {
                out.push((name, t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorLayout> {
        let mut out = vec![&mut self.a, &mut self.b];
        for t in [&mut self.c, &mut self.d, &mut self.e, &mut self.scratch] {
            if let Some(t) = t.as_mut() {
                out.push(t);
            }
        }
        out
    }

    /// Regions must be disjoint and inside `memory_bytes`.
    pub fn validate(&self, memory_bytes: u64) -> Result<(), CompileError> {
        let ts = self.tensors();
        for (i, (n1, t1)) in ts.iter().enumerate() {
            if t1.end() > memory_bytes {
                return Err(CompileError::OutOfMemory {
                    needed: t1.end(),
                    available: memory_bytes,
                });
            }
            for (n2, t2) in &ts[i + 1..] {
                if t1.base < t2.end() && t2.base < t1.end() {
                    return Err(CompileError::LayoutOverlap {
                        first: n1,
                        second: n2,
                    });
                }
            }
        }
        Ok(())
    }

    /// Output tensor (E when quantized, D otherwise).
    pub fn output(&self) -> TensorLayout {
        self.e.or(self.d).expect("layout has an output tensor")
    }
}

/// How addressing modes are chosen for tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModePolicy {
    /// Packed placement, every tensor in mode option `r_s`.
    Fixed(usize),
    /// Tensors in separate group regions, modes minimizing the static
    /// bank-collision estimate of the schedule.
    Heuristic,
}

impl ModePolicy {
    /// Heuristic under address mode switching, FIMA otherwise.
    pub fn for_flags(flags: &FeatureFlags, map: &BankMap) -> Self {
        if flags.addr_mode_switching {
            ModePolicy::Heuristic
        } else {
            ModePolicy::Fixed(fima_index(map))
        }
    }
}

/// Index of the fully interleaved option, or 0 if there is none.
pub fn fima_index(map: &BankMap) -> usize {
    map.group_options()
        .iter()
        .position(|&g| g == map.num_banks())
        .unwrap_or(0)
}

/// Byte sizes of the tensors a workload needs under `flags`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSizes {
    pub a: u64,
    pub b: u64,
    pub c: Option<u64>,
    pub d: Option<u64>,
    pub e: Option<u64>,
    pub scratch: Option<u64>,
}

impl TensorSizes {
    pub fn of(
        w: &WorkloadSpec,
        core: &GemmCoreSpec,
        designs: &StreamDesigns,
        flags: &FeatureFlags,
    ) -> Result<Self, CompileError> {
        w.validate(core)?;
        let (m, n, k) = w.shape.gemm_dims().expect("validated");
        let (m, n, k) = (m as u64, n as u64, k as u64);
        let conv = w.shape.conv_params();
        let a = match conv {
            Some(p) => (p.h * p.w * p.c_in) as u64,
            None => m * k,
        };
        let c = if w.quantize_output {
            let copies = if flags.broadcaster {
                1
            } else {
                designs.c.num_channels as u64
            };
            Some(copies * QuantSpec::PACKED_BYTES as u64)
        } else if w.bias {
            Some(match conv {
                Some(_) => core.ms as u64 * n * 4,
                None => m * n * 4,
            })
        } else {
            None
        };
        let scratch = (conv.is_some() && !flags.implicit_im2col).then_some(m * k);
        Ok(Self {
            a,
            b: k * n,
            c,
            d: (!w.quantize_output).then_some(m * n * 4),
            e: w.quantize_output.then_some(m * n),
            scratch,
        })
    }
}

fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

fn schemes(w: &WorkloadSpec) -> (Scheme, Option<Scheme>) {
    let a = match w.shape {
        WorkloadShape::Gemm { .. } => Scheme::BlockRowMajor,
        WorkloadShape::TransposedGemm { .. } => Scheme::TransposedBlockRowMajor,
        WorkloadShape::Conv { .. } => Scheme::BlockedChannel,
    };
    let c = if w.quantize_output {
        Some(Scheme::Replicated)
    } else if w.bias {
        Some(match w.shape {
            WorkloadShape::Conv { .. } => Scheme::RowBroadcast,
            _ => Scheme::BlockRowMajor,
        })
    } else {
        None
    };
    (a, c)
}

fn packed_layout(w: &WorkloadSpec, sizes: &TensorSizes, word: u64, r_s: usize) -> Layout {
    let mut cursor = 0u64;
    let mut place = |bytes: u64, scheme: Scheme| {
        let t = TensorLayout {
            base: cursor,
            bytes,
            scheme,
            mode_select: r_s,
        };
        cursor = align_up(cursor + bytes, word);
        t
    };
    let (a_scheme, c_scheme) = schemes(w);
    let a = place(sizes.a, a_scheme);
    let b = place(sizes.b, Scheme::BlockRowMajor);
    let c = sizes.c.map(|s| place(s, c_scheme.expect("c scheme")));
    let d = sizes.d.map(|s| place(s, Scheme::BlockRowMajor));
    let e = sizes.e.map(|s| place(s, Scheme::BlockRowMajor));
    let scratch = sizes.scratch.map(|s| place(s, Scheme::BlockRowMajor));
    Layout {
        a,
        b,
        c,
        d,
        e,
        scratch,
    }
}

/// Places A, B, C and the output at the start of four different bank-group
/// regions so that grouped interleaving keeps them on disjoint banks. The
/// scratch matrix follows C. `None` if the memory has no grouped option or
/// a tensor does not fit its region.
fn grouped_layout(w: &WorkloadSpec, sizes: &TensorSizes, map: &BankMap) -> Option<Layout> {
    let groups = map
        .group_options()
        .iter()
        .filter(|&&g| g > 1 && g < map.num_banks())
        .map(|&g| map.num_banks() / g)
        .max()?;
    if groups < 4 {
        return None;
    }
    let region = map.size_bytes() / groups as u64;
    let word = map.word_bytes();
    let (a_scheme, c_scheme) = schemes(w);
    let at = |idx: u64, offset: u64, bytes: u64, scheme: Scheme| -> Option<TensorLayout> {
        (offset + bytes <= region).then_some(TensorLayout {
            base: idx * region + offset,
            bytes,
            scheme,
            mode_select: 0,
        })
    };
    let a = at(0, 0, sizes.a, a_scheme)?;
    let b = at(1, 0, sizes.b, Scheme::BlockRowMajor)?;
    let c = match sizes.c {
        Some(s) => Some(at(2, 0, s, c_scheme.expect("c scheme"))?),
        None => None,
    };
    let d = match sizes.d {
        Some(s) => Some(at(3, 0, s, Scheme::BlockRowMajor)?),
        None => None,
    };
    let e = match sizes.e {
        Some(s) => Some(at(3, 0, s, Scheme::BlockRowMajor)?),
        None => None,
    };
    let scratch = match sizes.scratch {
        Some(s) => {
            let off = c.map_or(0, |c| align_up(c.bytes, word));
            Some(at(2, off, s, Scheme::BlockRowMajor)?)
        }
        None => None,
    };
    Some(Layout {
        a,
        b,
        c,
        d,
        e,
        scratch,
    })
}

/// Assigns base addresses and addressing modes.
pub fn allocate(
    w: &WorkloadSpec,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    map: &BankMap,
    flags: &FeatureFlags,
    policy: ModePolicy,
) -> Result<Layout, CompileError> {
    let sizes = TensorSizes::of(w, core, designs, flags)?;
    let word = map.word_bytes();
    let memory = map.size_bytes();
    match policy {
        ModePolicy::Fixed(r_s) => {
            if r_s >= map.group_options().len() {
                return Err(CompileError::Unsupported(format!(
                    "mode option {r_s} of {}",
                    map.group_options().len()
                )));
            }
            let layout = packed_layout(w, &sizes, word, r_s);
            check_fits(&layout, memory)?;
            Ok(layout)
        }
        ModePolicy::Heuristic => {
            let base = match grouped_layout(w, &sizes, map) {
                Some(l) => l,
                None => {
                    let l = packed_layout(w, &sizes, word, 0);
                    check_fits(&l, memory)?;
                    l
                }
            };
            Ok(choose_modes(base, w, core, designs, map, flags))
        }
    }
}

fn check_fits(layout: &Layout, memory: u64) -> Result<(), CompileError> {
    let end = layout
        .tensors()
        .iter()
        .map(|(_, t)| t.end())
        .max()
        .unwrap_or(0);
    if end > memory {
        return Err(CompileError::OutOfMemory {
            needed: end,
            available: memory,
        });
    }
    layout.validate(memory)
}

/// Tries every per-tensor mode combination and keeps the cheapest; ties go
/// to the lexicographically smallest option indices.
fn choose_modes(
    base: Layout,
    w: &WorkloadSpec,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    map: &BankMap,
    flags: &FeatureFlags,
) -> Layout {
    let options = map.group_options().len();
    let count = base.tensors().len();
    let combos = options.pow(count as u32);
    let mut best: Option<(u64, Layout)> = None;
    for combo in 0..combos {
        let mut layout = base.clone();
        let mut rest = combo;
        // most significant digit first so that index order is lexicographic
        let mut digits = vec![0; count];
        for d in digits.iter_mut().rev() {
            *d = rest % options;
            rest /= options;
        }
        for (t, &r_s) in layout.tensors_mut().into_iter().zip(&digits) {
            t.mode_select = r_s;
        }
        let Ok(schedule) = lower(w, &layout, core, designs, flags) else {
            continue;
        };
        let cost = static_conflict_cost(&schedule, designs, map);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, layout));
        }
    }
    best.map(|(_, l)| l).unwrap_or(base)
}

/// Virtual cycles per sampled window of [`static_conflict_cost`].
pub const COST_WINDOW: u64 = 64;
/// Windows sampled per phase.
pub const COST_WINDOWS: u64 = 16;

/// Window start cycles: the whole phase when it is short, otherwise
/// golden-ratio offsets, which do not alias with power-of-two tile loops.
fn cost_windows(cycles: u64) -> Vec<u64> {
    if cycles <= COST_WINDOW * COST_WINDOWS {
        return (0..cycles.div_ceil(COST_WINDOW))
            .map(|i| i * COST_WINDOW)
            .collect();
    }
    let span = cycles - COST_WINDOW;
    let mut starts: Vec<u64> = (0..COST_WINDOWS)
        .map(|i| ((i as f64 * 0.618_033_988_75).fract() * span as f64) as u64)
        .collect();
    starts.sort_unstable();
    starts
}

/// Word addresses one stream requests at temporal step `t`.
pub fn step_requests(cfg: &StreamConfig, design: &DseDesign, t: u64, word_bytes: u64) -> Vec<u64> {
    let step = address_at(&cfg.pattern, design, t).expect("step inside the pattern");
    let lanes: Vec<usize> = match cfg.extensions.broadcast_source() {
        Some(l) => vec![l],
        None => (0..design.num_channels).collect(),
    };
    let (elements, stride) = cfg.gather.map_or((1, 0), |g| (g.elements, g.stride));
    let mut out = Vec::with_capacity(lanes.len() * elements);
    for c in lanes {
        for j in 0..elements {
            let a =
                (step.temporal_address as i64 + step.spatial_offsets[c] + j as i64 * stride) as u64;
            out.push(a - a % word_bytes);
        }
    }
    out
}

/// Static bank-collision estimate. Streams advance in lock step with the
/// core (A and B every cycle, C at the first and the output at the last
/// k-iteration), every bank serves one request per virtual cycle, and the
/// cost is the summed backlog over sampled windows. A bank that one stream already keeps busy
/// every cycle never recovers from an extra request, which the backlog
/// captures.
pub fn static_conflict_cost(schedule: &Schedule, designs: &StreamDesigns, map: &BankMap) -> u64 {
    let word = map.word_bytes();
    let mut backlog = vec![0u64; map.num_banks()];
    let mut cost = 0u64;
    for phase in &schedule.phases {
        let (cycles, kt) = match phase.kind {
            PhaseKind::Gemm { schedule: s, .. } => (s.ideal_cycles(), s.kt as u64),
            PhaseKind::Copy => (
                phase
                    .stream(StreamId::A)
                    .map_or(0, |c| c.pattern.total_steps()),
                1,
            ),
        };
        for start in cost_windows(cycles) {
            backlog.fill(0);
            for t in start..(start + COST_WINDOW).min(cycles) {
                for b in &phase.streams {
                    let step = match b.stream {
                        StreamId::A | StreamId::B => Some(t),
                        StreamId::C => (t % kt == 0).then_some(t / kt),
                        StreamId::D | StreamId::E if matches!(phase.kind, PhaseKind::Copy) => {
                            Some(t)
                        }
                        StreamId::D | StreamId::E => (t % kt == kt - 1).then_some(t / kt),
                    };
                    let Some(step) = step else { continue };
                    if step >= b.config.pattern.total_steps() {
                        continue;
                    }
                    let design = designs.get(b.stream);
                    for addr in step_requests(&b.config, design, step, word) {
                        let bank = map
                            .map_with(b.config.mode_select, addr)
                            .expect("pattern checked against memory")
                            .bank;
                        backlog[bank] += 1;
                    }
                }
                for b in backlog.iter_mut() {
                    *b = b.saturating_sub(1);
                    cost += *b;
                }
            }
        }
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamBinding {
    pub stream: StreamId,
    pub config: StreamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Stream A is copied word for word into stream E.
    Copy,
    Gemm {
        schedule: GemmSchedule,
        /// D goes through the rescale unit and leaves on E; C carries the
        /// constants.
        quantize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub streams: Vec<StreamBinding>,
}

impl Phase {
    pub fn stream(&self, id: StreamId) -> Option<&StreamConfig> {
        self.streams
            .iter()
            .find(|b| b.stream == id)
            .map(|b| &b.config)
    }
}

/// Sequential phases; each starts when the previous one completed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

impl Schedule {
    /// Stall-free core cycles: the sum of `Mt * Nt * Kt` over GeMM phases.
    pub fn ideal_cycles(&self) -> u64 {
        self.phases
            .iter()
            .map(|p| match p.kind {
                PhaseKind::Gemm { schedule, .. } => schedule.ideal_cycles(),
                PhaseKind::Copy => 0,
            })
            .sum()
    }

    pub fn gemm_phase(&self) -> Option<&Phase> {
        self.phases
            .iter()
            .find(|p| matches!(p.kind, PhaseKind::Gemm { .. }))
    }

    /// Stream word counts agree with the core schedule.
    pub fn check_word_counts(&self) -> Result<(), CompileError> {
        let words = |p: &Phase, id| p.stream(id).map(|c| c.pattern.total_steps());
        for p in &self.phases {
            let mismatch = |what: String| Err(CompileError::ShapeMismatch(what));
            match p.kind {
                PhaseKind::Copy => {
                    if words(p, StreamId::A) != words(p, StreamId::E) {
                        return mismatch("copy phase read and write lengths differ".into());
                    }
                }
                PhaseKind::Gemm { schedule, quantize } => {
                    let mac = Some(schedule.ideal_cycles());
                    let tiles = Some(schedule.output_tiles());
                    if words(p, StreamId::A) != mac || words(p, StreamId::B) != mac {
                        return mismatch("operand streams do not match Mt*Nt*Kt".into());
                    }
                    let out = if quantize { StreamId::E } else { StreamId::D };
                    if words(p, out) != tiles {
                        return mismatch("output stream does not match Mt*Nt".into());
                    }
                    if (schedule.use_c || quantize) && words(p, StreamId::C) != tiles {
                        return mismatch("C stream does not match Mt*Nt".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Strides that lay the lanes of `design` out back to back.
pub fn contiguous_strides(design: &DseDesign) -> Vec<i64> {
    let lane = design.lane_bytes() as i64;
    let mut strides = vec![0i64; design.spatial_bounds.len()];
    let mut acc = lane;
    for (s, &b) in strides.iter_mut().zip(&design.spatial_bounds).rev() {
        *s = acc;
        acc *= b as i64;
    }
    strides
}

fn extensions_for(
    design: &DseDesign,
    stream: StreamId,
    transposer: bool,
    broadcaster: bool,
) -> Result<ExtensionSpec, CompileError> {
    let has = |k| design.extensions.contains(&k);
    if transposer && !has(ExtensionKind::Transposer) {
        return Err(CompileError::Unsupported(format!(
            "stream {stream} has no transposer"
        )));
    }
    if broadcaster && !has(ExtensionKind::Broadcaster) {
        return Err(CompileError::Unsupported(format!(
            "stream {stream} has no broadcaster"
        )));
    }
    Ok(ExtensionSpec::new(
        design
            .extensions
            .iter()
            .map(|&k| match k {
                ExtensionKind::Transposer => ExtensionStage::transposer(transposer),
                ExtensionKind::Broadcaster => ExtensionStage::broadcaster(broadcaster, 0),
            })
            .collect(),
    ))
}

fn binding(
    stream: StreamId,
    pattern: AccessPattern,
    tensor: &TensorLayout,
    extensions: ExtensionSpec,
    flags: &FeatureFlags,
) -> StreamBinding {
    StreamBinding {
        stream,
        config: StreamConfig {
            pattern,
            mode_select: tensor.mode_select,
            extensions,
            gather: None,
            policy: flags.issue_policy(),
        },
    }
}

fn missing(what: &str) -> CompileError {
    CompileError::ShapeMismatch(format!("layout has no {what} tensor"))
}

/// Output-side streams (C, D or E) for an `Mt x Nt` tile grid.
fn output_streams(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
    mt: usize,
    nt: usize,
) -> Result<(Vec<StreamBinding>, bool), CompileError> {
    let mut out = Vec::new();
    let nt_i = nt as i64;
    let acc = core.acc_bytes() as i64;
    let mut use_c = false;
    if w.quantize_output {
        let c = layout
            .c
            .as_ref()
            .ok_or_else(|| missing("quantization constant"))?;
        let spatial = if flags.broadcaster {
            vec![0; designs.c.spatial_bounds.len()]
        } else {
            contiguous_strides(&designs.c)
        };
        let p = AccessPattern::new(c.base, vec![nt, mt], vec![0, 0], spatial);
        let ext = extensions_for(&designs.c, StreamId::C, false, flags.broadcaster)?;
        out.push(binding(StreamId::C, p, c, ext, flags));
        let e = layout.e.as_ref().ok_or_else(|| missing("E"))?;
        let eb = core.out_bytes() as i64;
        let p = AccessPattern::new(
            e.base,
            vec![nt, mt],
            vec![eb, nt_i * eb],
            contiguous_strides(&designs.e),
        );
        out.push(binding(StreamId::E, p, e, ExtensionSpec::default(), flags));
    } else {
        if w.bias {
            let c = layout.c.as_ref().ok_or_else(|| missing("C"))?;
            let m_stride = match c.scheme {
                Scheme::RowBroadcast => 0,
                _ => nt_i * acc,
            };
            let p = AccessPattern::new(
                c.base,
                vec![nt, mt],
                vec![acc, m_stride],
                contiguous_strides(&designs.c),
            );
            let ext = extensions_for(&designs.c, StreamId::C, false, false)?;
            out.push(binding(StreamId::C, p, c, ext, flags));
            use_c = true;
        }
        let d = layout.d.as_ref().ok_or_else(|| missing("D"))?;
        let p = AccessPattern::new(
            d.base,
            vec![nt, mt],
            vec![acc, nt_i * acc],
            contiguous_strides(&designs.d),
        );
        out.push(binding(StreamId::D, p, d, ExtensionSpec::default(), flags));
    }
    Ok((out, use_c))
}

/// B stream over a block-row-major `K x N` operand.
fn b_stream(
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
    (mt, nt, kt): (usize, usize, usize),
) -> Result<StreamBinding, CompileError> {
    let bb = core.b_bytes() as i64;
    let p = AccessPattern::new(
        layout.b.base,
        vec![kt, nt, mt],
        vec![nt as i64 * bb, bb, 0],
        contiguous_strides(&designs.b),
    );
    let ext = extensions_for(&designs.b, StreamId::B, false, false)?;
    Ok(binding(StreamId::B, p, &layout.b, ext, flags))
}

fn gemm_phase(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
    a: StreamBinding,
    tiles: (usize, usize, usize),
) -> Result<Phase, CompileError> {
    let (mt, nt, kt) = tiles;
    let mut streams = vec![a, b_stream(layout, core, designs, flags, tiles)?];
    let (outs, use_c) = output_streams(w, layout, core, designs, flags, mt, nt)?;
    streams.extend(outs);
    Ok(Phase {
        kind: PhaseKind::Gemm {
            schedule: GemmSchedule { mt, nt, kt, use_c },
            quantize: w.quantize_output,
        },
        streams,
    })
}

/// A stream over a matrix operand stored block-row-major or
/// block-column-major.
fn matrix_a_stream(
    tensor: &TensorLayout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
    (mt, nt, kt): (usize, usize, usize),
) -> Result<StreamBinding, CompileError> {
    let ab = core.a_bytes() as i64;
    let strides = match tensor.scheme {
        Scheme::BlockRowMajor => vec![ab, 0, kt as i64 * ab],
        Scheme::BlockColMajor => vec![mt as i64 * ab, 0, ab],
        other => {
            return Err(CompileError::ShapeMismatch(format!(
                "operand A scheme {other:?} is not a plain matrix layout"
            )))
        }
    };
    let p = AccessPattern::new(
        tensor.base,
        vec![kt, nt, mt],
        strides,
        contiguous_strides(&designs.a),
    );
    let ext = extensions_for(&designs.a, StreamId::A, false, false)?;
    Ok(binding(StreamId::A, p, tensor, ext, flags))
}

pub fn lower_gemm(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
) -> Result<Schedule, CompileError> {
    let tiles = w.tiling(core)?;
    let a = matrix_a_stream(&layout.a, core, designs, flags, tiles)?;
    let phase = gemm_phase(w, layout, core, designs, flags, a, tiles)?;
    Ok(Schedule {
        phases: vec![phase],
    })
}

/// Operand A is stored as `A^T` (`K x M`, block-row-major). With the
/// transposer the stream fetches whole `Ks x Ms` tiles and transposes them
/// in flight; without it every lane gathers its `Ks` bytes one by one.
pub fn lower_transposed_gemm(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
) -> Result<Schedule, CompileError> {
    let (mt, nt, kt) = w.tiling(core)?;
    let a = &designs.a;
    let ab = core.a_bytes() as i64;
    let temporal_strides = vec![mt as i64 * ab, 0, ab];
    let binding = if flags.transposer {
        if core.ms != core.ks || a.num_channels != core.ms || a.lane_bytes() != core.ks {
            return Err(CompileError::ShapeMismatch(format!(
                "transposer needs a square tile on {} lanes of {} bytes, core tile is {}x{}",
                a.num_channels,
                a.lane_bytes(),
                core.ms,
                core.ks
            )));
        }
        let p = AccessPattern::new(
            layout.a.base,
            vec![kt, nt, mt],
            temporal_strides,
            contiguous_strides(a),
        );
        let ext = extensions_for(a, StreamId::A, true, false)?;
        binding(StreamId::A, p, &layout.a, ext, flags)
    } else {
        if a.spatial_bounds.len() != 1 || a.num_channels != core.ms || a.lane_bytes() != core.ks {
            return Err(CompileError::ShapeMismatch(
                "element gather needs one A lane per tile row".into(),
            ));
        }
        let p = AccessPattern::new(layout.a.base, vec![kt, nt, mt], temporal_strides, vec![1]);
        let ext = extensions_for(a, StreamId::A, false, false)?;
        let mut b = binding(StreamId::A, p, &layout.a, ext, flags);
        b.config.gather = Some(LaneGather {
            elements: core.ks,
            stride: core.ms as i64,
        });
        b
    };
    let phase = gemm_phase(w, layout, core, designs, flags, binding, (mt, nt, kt))?;
    Ok(Schedule {
        phases: vec![phase],
    })
}

/// Input-side nest of a convolution over the blocked-channel input. The
/// reduction loops (channel block, kernel column, kernel row) are innermost,
/// then the output-channel tile when `with_n`, then output-column tile and
/// output row. Lane `m` reads output pixel `m` of the tile.
fn im2col_pattern(
    p: &ConvParams,
    base: u64,
    core: &GemmCoreSpec,
    nt: Option<usize>,
) -> AccessPattern {
    let (ho, wo) = p.output_hw().expect("validated");
    let ks = core.ks as i64;
    let (h, w) = (p.h as i64, p.w as i64);
    let (sh, sw) = (p.stride_h as i64, p.stride_w as i64);
    let mut bounds = vec![p.c_in / core.ks, p.kernel_w, p.kernel_h];
    let mut strides = vec![h * w * ks, ks, w * ks];
    if let Some(nt) = nt {
        bounds.push(nt);
        strides.push(0);
    }
    bounds.extend([wo / core.ms, ho]);
    strides.extend([core.ms as i64 * sw * ks, sh * w * ks]);
    AccessPattern::new(base, bounds, strides, vec![sw * ks])
}

/// Implicit mode streams the im2col matrix straight out of the input
/// tensor. Explicit mode first copies it into the scratch region, then
/// runs a plain GeMM on the copy.
pub fn lower_conv(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
) -> Result<Schedule, CompileError> {
    let p = w
        .shape
        .conv_params()
        .ok_or_else(|| CompileError::ShapeMismatch("not a convolution".into()))?;
    let (mt, nt, kt) = w.tiling(core)?;
    let a = &designs.a;
    if a.spatial_bounds.len() != 1 || a.num_channels != core.ms || a.lane_bytes() != core.ks {
        return Err(CompileError::ShapeMismatch(
            "convolution needs one A lane per output pixel of Ks channels".into(),
        ));
    }
    let no_ext = || extensions_for(a, StreamId::A, false, false);
    if flags.implicit_im2col {
        let pat = im2col_pattern(&p, layout.a.base, core, Some(nt));
        let a_bind = binding(StreamId::A, pat, &layout.a, no_ext()?, flags);
        let phase = gemm_phase(w, layout, core, designs, flags, a_bind, (mt, nt, kt))?;
        return Ok(Schedule {
            phases: vec![phase],
        });
    }

    let needed = (mt * kt * core.a_bytes()) as u64;
    let scratch = layout.scratch.ok_or(CompileError::InsufficientScratch {
        needed,
        available: 0,
    })?;
    if scratch.bytes < needed {
        return Err(CompileError::InsufficientScratch {
            needed,
            available: scratch.bytes,
        });
    }
    let e = &designs.e;
    if e.num_channels * e.lane_bytes() != core.a_bytes() {
        return Err(CompileError::ShapeMismatch(
            "explicit im2col copies A tiles through stream E".into(),
        ));
    }
    let read = binding(
        StreamId::A,
        im2col_pattern(&p, layout.a.base, core, None),
        &layout.a,
        no_ext()?,
        flags,
    );
    let write = binding(
        StreamId::E,
        AccessPattern::new(
            scratch.base,
            vec![mt * kt],
            vec![core.a_bytes() as i64],
            contiguous_strides(e),
        ),
        &scratch,
        ExtensionSpec::default(),
        flags,
    );
    let copy = Phase {
        kind: PhaseKind::Copy,
        streams: vec![read, write],
    };
    let scratch_a = TensorLayout {
        scheme: Scheme::BlockRowMajor,
        ..scratch
    };
    let a_bind = matrix_a_stream(&scratch_a, core, designs, flags, (mt, nt, kt))?;
    let gemm = gemm_phase(w, layout, core, designs, flags, a_bind, (mt, nt, kt))?;
    Ok(Schedule {
        phases: vec![copy, gemm],
    })
}

/// Dispatches on the workload kind.
pub fn lower(
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    flags: &FeatureFlags,
) -> Result<Schedule, CompileError> {
    let s = match w.shape {
        WorkloadShape::Gemm { .. } => lower_gemm(w, layout, core, designs, flags)?,
        WorkloadShape::TransposedGemm { .. } => {
            lower_transposed_gemm(w, layout, core, designs, flags)?
        }
        WorkloadShape::Conv { .. } => lower_conv(w, layout, core, designs, flags)?,
    };
    s.check_word_counts()?;
    Ok(s)
}

/// Allocation plus lowering, with the mode policy taken from `flags`.
pub fn compile(
    w: &WorkloadSpec,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    map: &BankMap,
    flags: &FeatureFlags,
) -> Result<(Layout, Schedule), CompileError> {
    compile_with(
        w,
        core,
        designs,
        map,
        flags,
        ModePolicy::for_flags(flags, map),
    )
}

/// [`compile`] with an explicit mode policy.
pub fn compile_with(
    w: &WorkloadSpec,
    core: &GemmCoreSpec,
    designs: &StreamDesigns,
    map: &BankMap,
    flags: &FeatureFlags,
    policy: ModePolicy,
) -> Result<(Layout, Schedule), CompileError> {
    designs.check_core(core)?;
    let layout = allocate(w, core, designs, map, flags, policy)?;
    let schedule = lower(w, &layout, core, designs, flags)?;
    Ok((layout, schedule))
}

/// Reorders a row-major `rows x cols` matrix of `elem`-byte values into
/// `br x bc` tiles, tiles row-major and row-major inside.
pub fn pack_block_row_major(
    data: &[u8],
    rows: usize,
    cols: usize,
    br: usize,
    bc: usize,
    elem: usize,
) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols * elem, "matrix size");
    assert!(
        rows.is_multiple_of(br) && cols.is_multiple_of(bc),
        "tile shape divides matrix"
    );
    let mut out = Vec::with_capacity(data.len());
    for ti in 0..rows / br {
        for tj in 0..cols / bc {
            for r in 0..br {
                let row = ti * br + r;
                let start = (row * cols + tj * bc) * elem;
                out.extend_from_slice(&data[start..start + bc * elem]);
            }
        }
    }
    out
}

/// Inverse of [`pack_block_row_major`].
pub fn unpack_block_row_major(
    data: &[u8],
    rows: usize,
    cols: usize,
    br: usize,
    bc: usize,
    elem: usize,
) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols * elem, "matrix size");
    let mut out = vec![0u8; data.len()];
    let mut src = 0;
    for ti in 0..rows / br {
        for tj in 0..cols / bc {
            for r in 0..br {
                let row = ti * br + r;
                let start = (row * cols + tj * bc) * elem;
                out[start..start + bc * elem].copy_from_slice(&data[src..src + bc * elem]);
                src += bc * elem;
            }
        }
    }
    out
}

/// Tiles in column-major order, row-major inside.
pub fn pack_block_col_major(
    data: &[u8],
    rows: usize,
    cols: usize,
    br: usize,
    bc: usize,
    elem: usize,
) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols * elem, "matrix size");
    let mut out = Vec::with_capacity(data.len());
    for tj in 0..cols / bc {
        for ti in 0..rows / br {
            for r in 0..br {
                let start = ((ti * br + r) * cols + tj * bc) * elem;
                out.extend_from_slice(&data[start..start + bc * elem]);
            }
        }
    }
    out
}

/// Row-major transpose of a byte matrix.
pub fn transpose_bytes(data: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols, "matrix size");
    let mut out = vec![0u8; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `H x W x C` (channels innermost) into `C/cb x H x W x cb`.
pub fn pack_blocked_channel(data: &[u8], h: usize, w: usize, c: usize, cb: usize) -> Vec<u8> {
    assert_eq!(data.len(), h * w * c, "tensor size");
    assert_eq!(c % cb, 0, "channel block divides C");
    let mut out = Vec::with_capacity(data.len());
    for blk in 0..c / cb {
        for px in 0..h * w {
            let start = px * c + blk * cb;
            out.extend_from_slice(&data[start..start + cb]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn core2() -> GemmCoreSpec {
        GemmCoreSpec {
            ms: 2,
            ns: 2,
            ks: 2,
        }
    }

    fn fixed_layout(w: &WorkloadSpec, core: &GemmCoreSpec, designs: &StreamDesigns) -> Layout {
        let map = BankMap::new(designs.a.bank_width_bits, 32, 8192, vec![32, 8]).unwrap();
        allocate(
            w,
            core,
            designs,
            &map,
            &FeatureFlags::all(),
            ModePolicy::Fixed(0),
        )
        .unwrap()
    }

    #[test]
    fn small_gemm_a_pattern() {
        let core = core2();
        let designs = StreamDesigns::for_core(&core, 16);
        let w = WorkloadSpec::gemm(4, 4, 4);
        let layout = fixed_layout(&w, &core, &designs);
        assert_eq!(layout.a.base, 0);
        let s = lower_gemm(&w, &layout, &core, &designs, &FeatureFlags::all()).unwrap();
        let a = s.phases[0].stream(StreamId::A).unwrap();
        assert_eq!(a.pattern.temporal_bounds, vec![2, 2, 2]);
        assert_eq!(a.pattern.temporal_strides, vec![4, 0, 8]);
        let b = s.phases[0].stream(StreamId::B).unwrap();
        assert_eq!(b.pattern.temporal_strides, vec![8, 4, 0]);
    }

    #[test]
    fn single_tile_gemm() {
        let core = GemmCoreSpec::default();
        let designs = StreamDesigns::default();
        let w = WorkloadSpec::gemm(8, 8, 8);
        let layout = fixed_layout(&w, &core, &designs);
        let s = lower(&w, &layout, &core, &designs, &FeatureFlags::all()).unwrap();
        for b in &s.phases[0].streams {
            assert!(b.config.pattern.temporal_bounds.iter().all(|&x| x == 1));
        }
        assert_eq!(s.ideal_cycles(), 1);
    }

    #[test]
    fn indivisible_rejected() {
        let w = WorkloadSpec::gemm(7, 8, 8);
        assert!(matches!(
            w.validate(&GemmCoreSpec::default()),
            Err(CompileError::IndivisibleWorkload(_))
        ));
    }

    #[test]
    fn flags_ladder() {
        assert_eq!(FeatureFlags::ladder(1), Some(FeatureFlags::default()));
        assert_eq!(FeatureFlags::ladder(0), None);
        assert_eq!(FeatureFlags::ladder(7), None);
        for l in 1..=6 {
            assert_eq!(FeatureFlags::ladder(l).unwrap().level(), Some(l));
        }
        let odd = FeatureFlags {
            broadcaster: true,
            ..FeatureFlags::default()
        };
        assert_eq!(odd.level(), None);
        assert_eq!(odd.label(), "00100");
    }

    #[test]
    fn packed_regions_are_disjoint_and_aligned() {
        let core = GemmCoreSpec::default();
        let designs = StreamDesigns::default();
        let w = WorkloadSpec::gemm(16, 32, 32).with_bias();
        let layout = fixed_layout(&w, &core, &designs);
        layout.validate(2 << 20).unwrap();
        for (_, t) in layout.tensors() {
            assert_eq!(t.base % 8, 0);
            assert_eq!(t.mode_select, 0);
        }
        assert_eq!(layout.a.bytes, 16 * 32);
        assert_eq!(layout.c.unwrap().bytes, 16 * 32 * 4);
    }

    #[test]
    fn overlap_detected() {
        let t = TensorLayout {
            base: 0,
            bytes: 64,
            scheme: Scheme::BlockRowMajor,
            mode_select: 0,
        };
        let l = Layout {
            a: t,
            b: TensorLayout { base: 32, ..t },
            c: None,
            d: Some(TensorLayout { base: 128, ..t }),
            e: None,
            scratch: None,
        };
        assert_eq!(
            l.validate(1024).unwrap_err(),
            CompileError::LayoutOverlap {
                first: "a",
                second: "b"
            }
        );
        let l = Layout {
            b: TensorLayout { base: 64, ..t },
            ..l
        };
        assert!(matches!(
            l.validate(100),
            Err(CompileError::OutOfMemory { .. })
        ));
    }

    #[test]
    fn out_of_memory() {
        let core = GemmCoreSpec::default();
        let designs = StreamDesigns::default();
        let map = BankMap::new(64, 4, 16, vec![4]).unwrap();
        let w = WorkloadSpec::gemm(64, 64, 64);
        assert!(matches!(
            allocate(
                &w,
                &core,
                &designs,
                &map,
                &FeatureFlags::all(),
                ModePolicy::Fixed(0)
            ),
            Err(CompileError::OutOfMemory { .. })
        ));
    }

    #[test]
    fn one_by_one_conv_matches_block_col_major_gemm() {
        let core = GemmCoreSpec::default();
        let designs = StreamDesigns::default();
        let flags = FeatureFlags::all();
        let p = ConvParams {
            h: 8,
            w: 16,
            c_in: 32,
            c_out: 16,
            kernel_h: 1,
            kernel_w: 1,
            stride_h: 1,
            stride_w: 1,
        };
        let conv = WorkloadSpec::conv(p);
        let layout = fixed_layout(&conv, &core, &designs);
        let s = lower_conv(&conv, &layout, &core, &designs, &flags).unwrap();

        let gemm = WorkloadSpec::gemm(8 * 16, 16, 32);
        let mut glayout = layout.clone();
        glayout.a.scheme = Scheme::BlockColMajor;
        let g = lower_gemm(&gemm, &glayout, &core, &designs, &flags).unwrap();
        let ca = s.phases[0].stream(StreamId::A).unwrap();
        let ga = g.phases[0].stream(StreamId::A).unwrap();
        assert_eq!(ca.pattern.simplified(), ga.pattern.simplified());
    }

    #[test]
    fn explicit_conv_has_copy_phase() {
        let core = GemmCoreSpec::default();
        let designs = StreamDesigns::default();
        let flags = FeatureFlags::ladder(4).unwrap();
        let p = ConvParams {
            h: 10,
            w: 10,
            c_in: 8,
            c_out: 16,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 1,
            stride_w: 1,
        };
        let w = WorkloadSpec::conv(p);
        let map = BankMap::new(64, 32, 8192, vec![32, 8]).unwrap();
        let (layout, s) = compile(&w, &core, &designs, &map, &flags).unwrap();
        assert_eq!(s.phases.len(), 2);
        assert!(matches!(s.phases[0].kind, PhaseKind::Copy));
        assert_eq!(layout.scratch.unwrap().bytes, 64 * 72);
        assert_eq!(s.ideal_cycles(), 8 * 2 * 9);

        let mut no_scratch = layout.clone();
        no_scratch.scratch = None;
        assert!(matches!(
            lower_conv(&w, &no_scratch, &core, &designs, &flags),
            Err(CompileError::InsufficientScratch { .. })
        ));
    }

    #[test]
    fn transposer_needs_square_tile() {
        let core = GemmCoreSpec {
            ms: 4,
            ns: 8,
            ks: 16,
        };
        let mut designs = StreamDesigns::for_core(&core, 64);
        designs.a.spatial_bounds = vec![8];
        designs.a.num_channels = 8;
        let w = WorkloadSpec::transposed_gemm(8, 8, 16);
        let layout = fixed_layout(&w, &core, &designs);
        assert!(matches!(
            lower_transposed_gemm(&w, &layout, &core, &designs, &FeatureFlags::all()),
            Err(CompileError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn block_packing_round_trips() {
        let data: Vec<u8> = (0..96).collect();
        let packed = pack_block_row_major(&data, 4, 6, 2, 3, 4);
        assert_eq!(&packed[..12], &data[..12]);
        assert_eq!(&packed[12..24], &data[24..36]);
        assert_eq!(unpack_block_row_major(&packed, 4, 6, 2, 3, 4), data);
        let m: Vec<u8> = (0..16).collect();
        let cm = pack_block_col_major(&m, 4, 4, 2, 2, 1);
        assert_eq!(
            cm,
            vec![0, 1, 4, 5, 8, 9, 12, 13, 2, 3, 6, 7, 10, 11, 14, 15]
        );
        assert_eq!(
            transpose_bytes(&[1, 2, 3, 4, 5, 6], 2, 3),
            vec![1, 4, 2, 5, 3, 6]
        );
        let hwc: Vec<u8> = (0..16).collect();
        assert_eq!(
            pack_blocked_channel(&hwc, 1, 4, 4, 2),
            vec![0, 1, 4, 5, 8, 9, 12, 13, 2, 3, 6, 7, 10, 11, 14, 15]
        );
    }

    #[test]
    fn workload_json_shape() {
        let w = WorkloadSpec::gemm(8, 16, 24);
        let j = serde_json::to_value(&w).unwrap();
        assert_eq!(j["kind"], "gemm");
        assert_eq!(j["m"], 8);
        let back: WorkloadSpec = serde_json::from_value(j).unwrap();
        assert_eq!(back, w);
        let parsed: WorkloadSpec = serde_json::from_str(
            r#"{"kind":"conv","h":10,"w":10,"c_in":8,"c_out":8,
                "kernel_h":3,"kernel_w":3,"stride_h":1,"stride_w":1}"#,
        )
        .unwrap();
        assert_eq!(parsed.shape.gemm_dims(), Some((64, 8, 72)));
    }
}
