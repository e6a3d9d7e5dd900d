//! System harness: five streaming engines, the scratchpad, the GeMM core and
//! the rescale unit, stepped by one deterministic scheduler.
//!
//! Per cycle: read engines collect responses and issue, write engines
//! collect acknowledgements, the core consumes (the extension chains run as
//! part of the read engines' output), the rescale unit runs, write engines
//! accept and issue, and finally the memory commits one request per bank.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accel::{
    reference_conv, reference_gemm, reference_quant, AccelError, GemmCore, GemmCoreSpec, QuantCore,
    QuantSpec,
};
pub use crate::compiler::FeatureFlags;
use crate::compiler::{
    compile_with, pack_block_row_major, pack_blocked_channel, transpose_bytes,
    unpack_block_row_major, CompileError, Layout, ModePolicy, Phase, PhaseKind, Schedule,
    StreamDesigns, StreamId, WorkloadShape, WorkloadSpec,
};
use crate::dse::{Dse, DseError};
use crate::memory::{MemError, Scratchpad};
use crate::remap::{BankMap, RemapError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid system configuration: {0}")]
    Config(String),
    #[error("invalid workload data: {0}")]
    Data(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Dse(#[from] DseError),
    #[error(transparent)]
    Accel(#[from] AccelError),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error(transparent)]
    Remap(#[from] RemapError),
    #[error("deadlock: no progress for {idle} cycles (phase {phase}, cycle {cycle})")]
    Deadlock { cycle: u64, phase: usize, idle: u64 },
    #[error("metrics of a run that never issued a request")]
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub bank_width_bits: u32,
    pub num_banks: usize,
    pub bank_depth_words: usize,
    pub group_options: Vec<usize>,
    pub latency: u64,
}

impl Default for MemoryConfig {
    /// 32 banks of 64 bits (2048 bits per row), 2 MiB, full or 8-bank
    /// groups, one cycle read latency.
    fn default() -> Self {
        Self {
            bank_width_bits: 64,
            num_banks: 32,
            bank_depth_words: 8192,
            group_options: vec![32, 8],
            latency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub memory: MemoryConfig,
    pub core: GemmCoreSpec,
    pub streams: StreamDesigns,
    pub flags: FeatureFlags,
    /// Cycles without progress before a run is declared deadlocked;
    /// `None` means ten times the ideal cycle count.
    pub deadlock_budget: Option<u64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            core: GemmCoreSpec::default(),
            streams: StreamDesigns::default(),
            flags: FeatureFlags::all(),
            deadlock_budget: None,
        }
    }
}

impl SystemConfig {
    pub fn with_flags(&self, flags: FeatureFlags) -> Self {
        Self {
            flags,
            ..self.clone()
        }
    }

    pub fn bank_map(&self) -> Result<BankMap, SimError> {
        let m = &self.memory;
        Ok(BankMap::new(
            m.bank_width_bits,
            m.num_banks,
            m.bank_depth_words,
            m.group_options.clone(),
        )?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let map = self.bank_map()?;
        for id in StreamId::ALL {
            let d = self.streams.get(id);
            d.validate()?;
            if d.bank_width_bits != map.bank_width_bits() {
                return Err(SimError::Config(format!(
                    "stream {id} lanes are {} bits, banks are {}",
                    d.bank_width_bits,
                    map.bank_width_bits()
                )));
            }
        }
        self.streams.check_core(&self.core)?;
        Ok(())
    }
}

/// Dense input tensors of one workload. A is `M x K` (or `H x W x C_in`
/// for a conv), B is `K x N` (or `KH x KW x C_in x C_out`), the bias is
/// `M x N` (or `C_out`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadData {
    pub a: Vec<i8>,
    pub b: Vec<i8>,
    pub bias: Option<Vec<i32>>,
    pub quant: Option<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Int32(Vec<i32>),
    Int8(Vec<i8>),
}

impl Output {
    pub fn len(&self) -> usize {
        match self {
            Output::Int32(v) => v.len(),
            Output::Int8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn operand_lengths(w: &WorkloadSpec) -> (usize, usize, usize) {
    let (m, n, k) = w.shape.gemm_dims().unwrap_or((0, 0, 0));
    let a = match w.shape.conv_params() {
        Some(p) => p.h * p.w * p.c_in,
        None => m * k,
    };
    let bias = if w.shape.conv_params().is_some() {
        n
    } else {
        m * n
    };
    (a, k * n, bias)
}

impl WorkloadData {
    /// Uniform int8 operands, bias in `[-2^15, 2^15)` and rescale
    /// constants that keep typical outputs off the clamp rails.
    pub fn random(w: &WorkloadSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a_len, b_len, bias_len) = operand_lengths(w);
        let a = (0..a_len).map(|_| rng.random::<i8>()).collect();
        let b = (0..b_len).map(|_| rng.random::<i8>()).collect();
        let bias = w.bias.then(|| {
            (0..bias_len)
                .map(|_| rng.random_range(-32768..32768))
                .collect()
        });
        let quant = w.quantize_output.then(|| QuantSpec {
            multiplier: rng.random_range(64..=512),
            shift: rng.random_range(15..=18),
            zero_point: rng.random_range(-8..=8),
        });
        Self { a, b, bias, quant }
    }

    pub fn validate(&self, w: &WorkloadSpec) -> Result<(), SimError> {
        let (a_len, b_len, bias_len) = operand_lengths(w);
        let bad = |m: String| Err(SimError::Data(m));
        if self.a.len() != a_len {
            return bad(format!("A has {} elements, expected {a_len}", self.a.len()));
        }
        if self.b.len() != b_len {
            return bad(format!("B has {} elements, expected {b_len}", self.b.len()));
        }
        match (&self.bias, w.bias) {
            (Some(b), true) if b.len() != bias_len => {
                return bad(format!(
                    "bias has {} elements, expected {bias_len}",
                    b.len()
                ))
            }
            (None, true) => return bad("workload needs a bias".into()),
            (Some(_), false) => return bad("workload has no bias".into()),
            _ => {}
        }
        match (&self.quant, w.quantize_output) {
            (None, true) => return bad("workload needs quantization constants".into()),
            (Some(_), false) => return bad("workload is not quantized".into()),
            (Some(q), true) => q.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Reference result from the golden kernels.
    pub fn golden(&self, w: &WorkloadSpec) -> Result<Output, SimError> {
        let d = match w.shape.conv_params() {
            Some(p) => reference_conv(&self.a, &self.b, self.bias.as_deref(), &p)?,
            None => {
                let (m, n, k) = w.shape.gemm_dims().expect("matrix workload");
                reference_gemm(&self.a, &self.b, self.bias.as_deref(), m, n, k)?
            }
        };
        Ok(match &self.quant {
            Some(q) => Output::Int8(reference_quant(&d, q)),
            None => Output::Int32(d),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ideal_cycles: u64,
    pub active_cycles: u64,
    /// Cycles from reset to completion, including the idle prologue.
    pub total_cycles: u64,
    pub utilization: f64,
    pub total_memory_accesses: u64,
    pub conflict_stall_cycles: u64,
    pub core_stall_cycles: u64,
    pub stream_requests: BTreeMap<StreamId, u64>,
}

/// `ideal / active`.
pub fn utilization(m: &Metrics) -> Result<f64, SimError> {
    if m.active_cycles == 0 {
        return Err(SimError::NotRun);
    }
    Ok(m.ideal_cycles as f64 / m.active_cycles as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub output: Output,
    pub golden: Output,
    pub correct: bool,
    pub metrics: Metrics,
    pub layout: Layout,
}

fn i32_bytes(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn i8_bytes(v: &[i8]) -> Vec<u8> {
    v.iter().map(|&x| x as u8).collect()
}

fn load_tensors(
    mem: &mut Scratchpad,
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
    data: &WorkloadData,
) -> Result<(), SimError> {
    let (m, n, k) = w.shape.gemm_dims().expect("validated");
    let GemmCoreSpec { ms, ns, ks } = *core;
    let a = i8_bytes(&data.a);
    let a_image = match w.shape {
        WorkloadShape::Gemm { .. } => pack_block_row_major(&a, m, k, ms, ks, 1),
        WorkloadShape::TransposedGemm { .. } => {
            pack_block_row_major(&transpose_bytes(&a, m, k), k, m, ks, ms, 1)
        }
        WorkloadShape::Conv { .. } => {
            let p = w.shape.conv_params().expect("conv");
            pack_blocked_channel(&a, p.h, p.w, p.c_in, ks)
        }
    };
    mem.load(layout.a.base, &a_image)?;
    mem.load(
        layout.b.base,
        &pack_block_row_major(&i8_bytes(&data.b), k, n, ks, ns, 1),
    )?;
    if let Some(c) = layout.c {
        let image = match (&data.quant, &data.bias) {
            (Some(q), _) => q
                .to_bytes()
                .repeat(c.bytes as usize / QuantSpec::PACKED_BYTES),
            (None, Some(bias)) if w.shape.conv_params().is_some() => {
                let rows: Vec<i32> = (0..ms).flat_map(|_| bias.iter().copied()).collect();
                pack_block_row_major(&i32_bytes(&rows), ms, n, ms, ns, 4)
            }
            (None, Some(bias)) => pack_block_row_major(&i32_bytes(bias), m, n, ms, ns, 4),
            (None, None) => return Err(SimError::Data("layout has C but data has none".into())),
        };
        mem.load(c.base, &image)?;
    }
    Ok(())
}

fn read_output(
    mem: &Scratchpad,
    w: &WorkloadSpec,
    layout: &Layout,
    core: &GemmCoreSpec,
) -> Result<Output, SimError> {
    let (m, n, _) = w.shape.gemm_dims().expect("validated");
    if let Some(e) = layout.e {
        let raw = mem.dump(e.base, m * n)?;
        let bytes = unpack_block_row_major(raw, m, n, core.ms, core.ns, 1);
        return Ok(Output::Int8(bytes.into_iter().map(|b| b as i8).collect()));
    }
    let d = layout.d.expect("D or E present");
    let raw = mem.dump(d.base, m * n * 4)?;
    let bytes = unpack_block_row_major(raw, m, n, core.ms, core.ns, 4);
    Ok(Output::Int32(
        bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    ))
}

/// Live engines of one phase, indexed by stream.
struct Engines {
    dse: [Option<Dse>; 5],
}

impl Engines {
    fn new(phase: &Phase, designs: &StreamDesigns, mem: &mut Scratchpad) -> Result<Self, SimError> {
        let mut dse: [Option<Dse>; 5] = Default::default();
        for b in &phase.streams {
            let mut e = Dse::new(designs.get(b.stream).clone(), b.stream.index())?;
            e.configure(b.config.clone(), mem)?;
            dse[b.stream.index()] = Some(e);
        }
        Ok(Self { dse })
    }

    fn get(&mut self, id: StreamId) -> Option<&mut Dse> {
        self.dse[id.index()].as_mut()
    }

    fn peek(&self, id: StreamId) -> Option<crate::ext::WideWord> {
        self.dse[id.index()].as_ref().and_then(|d| d.peek())
    }

    fn can_accept(&self, id: StreamId) -> bool {
        self.dse[id.index()]
            .as_ref()
            .is_some_and(|d| d.can_accept())
    }

    fn pop(&mut self, id: StreamId, cycle: u64) {
        let popped = self.get(id).is_some_and(|d| d.pop(cycle));
        debug_assert!(popped, "pop without a word on {id}");
    }

    fn all_complete(&self) -> bool {
        self.dse.iter().flatten().all(|d| d.is_complete())
    }

    /// Monotone count of everything engines have done so far.
    fn activity(&self) -> u64 {
        self.dse
            .iter()
            .flatten()
            .map(|d| d.counters().issued_requests + d.counters().delivered_words)
            .sum()
    }

    fn step_reads(&mut self, mem: &mut Scratchpad, cycle: u64) -> Result<(), SimError> {
        for id in [StreamId::A, StreamId::B, StreamId::C] {
            if let Some(d) = self.get(id) {
                d.step_read(mem, cycle)?;
            }
        }
        for id in [StreamId::D, StreamId::E] {
            if let Some(d) = self.get(id) {
                d.collect(mem, cycle)?;
            }
        }
        Ok(())
    }

    fn observe(&mut self, cycle: u64) {
        for d in self.dse.iter_mut().flatten() {
            d.observe(cycle);
        }
    }
}

struct Clock {
    cycle: u64,
    first_issue: Option<u64>,
    budget: u64,
}

/// Runs one phase to completion. Returns the cycle it completed in.
fn run_phase(
    index: usize,
    phase: &Phase,
    system: &SystemConfig,
    mem: &mut Scratchpad,
    clock: &mut Clock,
    requests: &mut BTreeMap<StreamId, u64>,
    core_stalls: &mut u64,
) -> Result<u64, SimError> {
    let mut eng = Engines::new(phase, &system.streams, mem)?;
    let out_lanes = |id: StreamId| system.streams.get(id).num_channels;
    let (mut core, quantize) = match phase.kind {
        PhaseKind::Gemm { schedule, quantize } => (
            Some(GemmCore::new(system.core, schedule, out_lanes(StreamId::D))),
            quantize,
        ),
        PhaseKind::Copy => (None, false),
    };
    let mut quant = QuantCore::new(system.core, out_lanes(StreamId::E));
    let mut idle = 0u64;
    let mut last_activity = u64::MAX;

    loop {
        let cycle = clock.cycle;
        eng.step_reads(mem, cycle)?;

        let (sink, word) = match core.as_mut() {
            None => {
                let w = if eng.can_accept(StreamId::E) {
                    eng.peek(StreamId::A)
                } else {
                    None
                };
                if w.is_some() {
                    eng.pop(StreamId::A, cycle);
                }
                (StreamId::E, w)
            }
            Some(core) => {
                let sink = if quantize { StreamId::E } else { StreamId::D };
                let a = eng.peek(StreamId::A);
                let b = eng.peek(StreamId::B);
                let c = if core.needs_c() || (quantize && core.at_last_k()) {
                    eng.peek(StreamId::C)
                } else {
                    None
                };
                let out_ready =
                    !core.at_last_k() || (eng.can_accept(sink) && (!quantize || c.is_some()));
                let c_in = if quantize { None } else { c.as_ref() };
                let t = core.tick(a.as_ref(), b.as_ref(), c_in, out_ready)?;
                if t.consumed_a {
                    eng.pop(StreamId::A, cycle);
                }
                if t.consumed_b {
                    eng.pop(StreamId::B, cycle);
                }
                if t.consumed_c {
                    eng.pop(StreamId::C, cycle);
                }
                let word = match t.output {
                    Some(d) if quantize => {
                        let e = quant.tick(Some(&d), c.as_ref())?;
                        eng.pop(StreamId::C, cycle);
                        e
                    }
                    other => other,
                };
                (sink, word)
            }
        };
        let offered = word.is_some();
        let accepted = match eng.get(sink) {
            Some(d) => d.tick_write(mem, word, cycle)?,
            None => false,
        };
        debug_assert_eq!(offered, accepted, "core emitted into a full sink");

        mem.tick(cycle);
        eng.observe(cycle);

        if clock.first_issue.is_none() && mem.counters().accepted > 0 {
            clock.first_issue = Some(cycle);
        }
        let done = eng.all_complete() && core.as_ref().is_none_or(|c| c.is_done());
        if done {
            for id in StreamId::ALL {
                if let Some(d) = eng.get(id) {
                    *requests.entry(id).or_insert(0) += d.counters().issued_requests;
                }
            }
            if let Some(c) = &core {
                *core_stalls += c.counters().stall_cycles;
            }
            clock.cycle += 1;
            return Ok(cycle);
        }

        let activity = eng.activity() + core.as_ref().map_or(0, |c| c.counters().mac_cycles);
        if activity == last_activity && mem.is_idle() {
            idle += 1;
            if idle >= clock.budget {
                return Err(SimError::Deadlock {
                    cycle,
                    phase: index,
                    idle,
                });
            }
        } else {
            idle = 0;
        }
        last_activity = activity;
        clock.cycle += 1;
    }
}

/// Simulates `workload` on `system` with the given inputs and checks the
/// result against the golden kernels.
pub fn run(
    system: &SystemConfig,
    workload: &WorkloadSpec,
    data: &WorkloadData,
) -> Result<RunResult, SimError> {
    let map = system.bank_map()?;
    run_with_policy(
        system,
        workload,
        data,
        ModePolicy::for_flags(&system.flags, &map),
    )
}

/// [`run`] with an explicit addressing-mode policy.
pub fn run_with_policy(
    system: &SystemConfig,
    workload: &WorkloadSpec,
    data: &WorkloadData,
    policy: ModePolicy,
) -> Result<RunResult, SimError> {
    system.validate()?;
    workload.validate(&system.core)?;
    data.validate(workload)?;
    let map = system.bank_map()?;
    let (layout, schedule) = compile_with(
        workload,
        &system.core,
        &system.streams,
        &map,
        &system.flags,
        policy,
    )?;
    let mut mem = Scratchpad::new(map, system.memory.latency)?;
    load_tensors(&mut mem, workload, &layout, &system.core, data)?;
    let metrics = simulate(system, &schedule, &mut mem)?;

    let output = read_output(&mem, workload, &layout, &system.core)?;
    let mut golden = data.golden(workload)?;
    if workload.corrupt_golden {
        match &mut golden {
            Output::Int32(v) => v[0] = v[0].wrapping_add(1),
            Output::Int8(v) => v[0] = v[0].wrapping_add(1),
        }
    }
    Ok(RunResult {
        correct: output == golden,
        output,
        golden,
        metrics,
        layout,
    })
}

/// Runs every phase of `schedule` against an already loaded memory.
pub fn simulate(
    system: &SystemConfig,
    schedule: &Schedule,
    mem: &mut Scratchpad,
) -> Result<Metrics, SimError> {
    let ideal = schedule.ideal_cycles();
    let mut clock = Clock {
        cycle: 0,
        first_issue: None,
        budget: system.deadlock_budget.unwrap_or(10 * ideal).max(1),
    };
    let mut requests = BTreeMap::new();
    let mut core_stalls = 0;
    let mut end = 0;
    for (i, phase) in schedule.phases.iter().enumerate() {
        end = run_phase(
            i,
            phase,
            system,
            mem,
            &mut clock,
            &mut requests,
            &mut core_stalls,
        )?;
    }
    let start = clock.first_issue.ok_or(SimError::NotRun)?;
    let counters = mem.counters();
    let mut metrics = Metrics {
        ideal_cycles: ideal,
        active_cycles: end - start + 1,
        total_cycles: end + 1,
        utilization: 0.0,
        total_memory_accesses: counters.total_accesses,
        conflict_stall_cycles: counters.conflict_stall_cycles,
        core_stall_cycles: core_stalls,
        stream_requests: requests,
    };
    metrics.utilization = utilization(&metrics)?;
    Ok(metrics)
}

/// Random inputs from `seed`, then [`run`].
pub fn run_seeded(
    system: &SystemConfig,
    workload: &WorkloadSpec,
    seed: u64,
) -> Result<RunResult, SimError> {
    run(system, workload, &WorkloadData::random(workload, seed))
}

/// Per-workload data seed: FNV-1a of the id mixed into `seed`.
pub fn workload_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub workload: WorkloadSpec,
    pub flags: FeatureFlags,
    pub result: Result<RunResult, String>,
}

impl AblationRow {
    pub fn group(&self) -> &'static str {
        self.workload.shape.kind_name()
    }

    pub fn metrics(&self) -> Option<&Metrics> {
        self.result.as_ref().ok().map(|r| &r.metrics)
    }
}

/// Runs every (workload, flag set) pair; failures are recorded in the row.
/// Rows come back workload-major in input order.
pub fn ablate(
    system: &SystemConfig,
    workloads: &[WorkloadSpec],
    ladder: &[FeatureFlags],
    seed: u64,
) -> Vec<AblationRow> {
    let pairs: Vec<(&WorkloadSpec, FeatureFlags)> = workloads
        .iter()
        .flat_map(|w| ladder.iter().map(move |&f| (w, f)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(w, flags)| {
            let sys = system.with_flags(flags);
            let result = run_seeded(&sys, w, workload_seed(seed, &w.id)).map_err(|e| e.to_string());
            AblationRow {
                workload: w.clone(),
                flags,
                result,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub flags: String,
    pub runs: usize,
    pub mean_utilization: f64,
    /// Mean of per-workload access counts divided by the same workload's
    /// level-1 count; NaN when no level-1 run exists.
    pub mean_normalized_accesses: f64,
}

/// Per group and flag set aggregates, groups and flag sets in first-seen
/// order.
pub fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let baseline = FeatureFlags::ladder(1).expect("level 1");
    let base_access: BTreeMap<&str, u64> = rows
        .iter()
        .filter(|r| r.flags == baseline)
        .filter_map(|r| Some((r.workload.id.as_str(), r.metrics()?.total_memory_accesses)))
        .collect();
    let mut keys: Vec<(&'static str, FeatureFlags)> = Vec::new();
    for r in rows {
        let key = (r.group(), r.flags);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(group, flags)| {
            let ms: Vec<(&str, &Metrics)> = rows
                .iter()
                .filter(|r| r.group() == group && r.flags == flags)
                .filter_map(|r| Some((r.workload.id.as_str(), r.metrics()?)))
                .collect();
            let n = ms.len();
            let mean_util = ms.iter().map(|(_, m)| m.utilization).sum::<f64>() / n as f64;
            let norm: Vec<f64> = ms
                .iter()
                .filter_map(|(id, m)| {
                    let b = *base_access.get(id)?;
                    Some(m.total_memory_accesses as f64 / b as f64)
                })
                .collect();
            let mean_norm = if norm.is_empty() {
                f64::NAN
            } else {
                norm.iter().sum::<f64>() / norm.len() as f64
            };
            SummaryRow {
                group: group.to_string(),
                flags: flags.label(),
                runs: n,
                mean_utilization: mean_util,
                mean_normalized_accesses: mean_norm,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::ConvParams;

    #[test]
    fn utilization_examples() {
        let mut m = Metrics {
            ideal_cycles: 100,
            active_cycles: 100,
            total_cycles: 100,
            utilization: 0.0,
            total_memory_accesses: 0,
            conflict_stall_cycles: 0,
            core_stall_cycles: 0,
            stream_requests: BTreeMap::new(),
        };
        assert_eq!(utilization(&m).unwrap(), 1.0);
        m.active_cycles = 200;
        assert_eq!(utilization(&m).unwrap(), 0.5);
        m.active_cycles = 0;
        assert_eq!(utilization(&m).unwrap_err(), SimError::NotRun);
    }

    #[test]
    fn single_tile_gemm() {
        let r = run_seeded(&SystemConfig::default(), &WorkloadSpec::gemm(8, 8, 8), 1).unwrap();
        assert!(r.correct);
        let m = &r.metrics;
        assert_eq!(m.ideal_cycles, 1);
        assert!(m.utilization > 0.0 && m.utilization <= 1.0);
    }

    #[test]
    fn every_level_is_correct_on_small_workloads() {
        let conv = WorkloadSpec::conv(ConvParams {
            h: 10,
            w: 10,
            c_in: 8,
            c_out: 16,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 1,
            stride_w: 1,
        });
        let workloads = [
            WorkloadSpec::gemm(16, 24, 32).with_bias(),
            WorkloadSpec::transposed_gemm(24, 16, 16),
            WorkloadSpec::gemm(16, 16, 16).with_quantization(),
            conv.clone(),
            conv.with_bias(),
        ];
        for w in &workloads {
            for level in 1..=6 {
                let sys = SystemConfig::default().with_flags(FeatureFlags::ladder(level).unwrap());
                let r = run_seeded(&sys, w, 7).unwrap();
                assert!(r.correct, "{} at level {level}", w.id);
            }
        }
    }

    #[test]
    fn corrupted_golden_is_reported() {
        let mut w = WorkloadSpec::gemm(8, 8, 8);
        w.corrupt_golden = true;
        assert!(!run_seeded(&SystemConfig::default(), &w, 1).unwrap().correct);
    }

    #[test]
    fn prefetch_speeds_up_gemm() {
        let w = WorkloadSpec::gemm(32, 32, 32);
        let base = SystemConfig::default().with_flags(FeatureFlags::ladder(1).unwrap());
        let pre = SystemConfig::default().with_flags(FeatureFlags::ladder(2).unwrap());
        let a = run_seeded(&base, &w, 3).unwrap().metrics;
        let b = run_seeded(&pre, &w, 3).unwrap().metrics;
        assert!(b.active_cycles < a.active_cycles);
    }

    #[test]
    fn bad_data_rejected() {
        let w = WorkloadSpec::gemm(8, 8, 8);
        let mut d = WorkloadData::random(&w, 0);
        d.a.pop();
        assert!(matches!(
            run(&SystemConfig::default(), &w, &d),
            Err(SimError::Data(_))
        ));
    }

    #[test]
    fn summary_normalizes_to_baseline() {
        let w = [WorkloadSpec::gemm(16, 16, 16)];
        let ladder: Vec<_> = (1..=6).map(|l| FeatureFlags::ladder(l).unwrap()).collect();
        let rows = ablate(&SystemConfig::default(), &w, &ladder, 5);
        assert_eq!(rows.len(), 6);
        let s = summarize(&rows);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].flags, "1");
        assert_eq!(s[0].mean_normalized_accesses, 1.0);
    }
}
