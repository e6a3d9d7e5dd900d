//! Data streaming engine.
//!
//! A read engine turns an affine pattern into per-channel scratchpad reads
//! and gathers the responses into wide words; a write engine scatters wide
//! words back. Every channel owns a memory interface controller (one request
//! port) and a data FIFO of `data_buffer_depth` lanes. A FIFO slot is
//! reserved when a channel starts a temporal step and released when the lane
//! leaves the FIFO, so a response never finds its FIFO full.
//!
//! Channels run independently under [`IssuePolicy::Prefetch`]. Under
//! [`IssuePolicy::Synchronous`] the engine behaves like a plain data mover:
//! a step's requests go out only after the previous word was consumed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agu::{AccessPattern, Agu, AguError};
use crate::ext::{apply_chain, ExtError, ExtensionKind, ExtensionSpec, WideWord};
use crate::memory::{AccessKind, MemError, MemRequest, MemResponse, Scratchpad};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DseError {
    #[error("stream engine has no runtime configuration")]
    NotConfigured,
    #[error("operation needs a {expected:?} engine, this one is {actual:?}")]
    WrongMode {
        expected: StreamMode,
        actual: StreamMode,
    },
    #[error("stream of {total} words already complete, extra word offered")]
    StreamOverrun { total: u64 },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid runtime configuration: {0}")]
    InvalidConfig(String),
    #[error("word of {lanes}x{lane_bytes}B offered to a {channels}x{channel_bytes}B engine")]
    WordShape {
        lanes: usize,
        lane_bytes: usize,
        channels: usize,
        channel_bytes: usize,
    },
    #[error(transparent)]
    Agu(#[from] AguError),
    #[error(transparent)]
    Ext(#[from] ExtError),
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Read,
    Write,
}

/// Design-time shape of one engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseDesign {
    pub mode: StreamMode,
    pub num_channels: usize,
    pub spatial_bounds: Vec<usize>,
    pub max_temporal_dims: usize,
    pub address_buffer_depth: usize,
    pub data_buffer_depth: usize,
    pub bank_width_bits: u32,
    #[serde(default)]
    pub extensions: Vec<ExtensionKind>,
}

impl DseDesign {
    pub fn num_spatial_dims(&self) -> usize {
        self.spatial_bounds.len()
    }

    pub fn lane_bytes(&self) -> usize {
        (self.bank_width_bits / 8) as usize
    }

    pub fn validate(&self) -> Result<(), DseError> {
        let bad = |m: String| Err(DseError::InvalidDesign(m));
        if self.num_channels == 0 {
            return bad("at least one channel is required".into());
        }
        let points: usize = self.spatial_bounds.iter().product();
        if points != self.num_channels {
            return bad(format!(
                "spatial bounds {:?} cover {} points, expected one per channel ({})",
                self.spatial_bounds, points, self.num_channels
            ));
        }
        if self.address_buffer_depth == 0 || self.data_buffer_depth == 0 {
            return bad("buffer depths must be at least 1".into());
        }
        if !self.bank_width_bits.is_power_of_two()
            || self.bank_width_bits < 8
            || self.bank_width_bits > 64
        {
            return bad(format!(
                "bank width {} must be a power of two in 8..=64",
                self.bank_width_bits
            ));
        }
        if self.mode == StreamMode::Write && !self.extensions.is_empty() {
            return bad("write engines carry no datapath extensions".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssuePolicy {
    #[default]
    Prefetch,
    Synchronous,
}

/// Sub-word gather: each lane is assembled from `elements` equal pieces
/// fetched at `spatial address + j * stride`, one request per piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaneGather {
    pub elements: usize,
    pub stride: i64,
}

/// Runtime configuration of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub pattern: AccessPattern,
    /// Addressing mode selection (index into the bank map's group options).
    #[serde(default)]
    pub mode_select: usize,
    #[serde(default)]
    pub extensions: ExtensionSpec,
    #[serde(default)]
    pub gather: Option<LaneGather>,
    #[serde(default)]
    pub policy: IssuePolicy,
}

impl StreamConfig {
    pub fn new(pattern: AccessPattern) -> Self {
        Self {
            pattern,
            mode_select: 0,
            extensions: ExtensionSpec::default(),
            gather: None,
            policy: IssuePolicy::Prefetch,
        }
    }

    /// Requests issued per temporal step.
    pub fn requests_per_step(&self, num_channels: usize) -> u64 {
        let channels = if self.extensions.broadcast_source().is_some() {
            1
        } else {
            num_channels
        };
        (channels * self.gather.map_or(1, |g| g.elements)) as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseCounters {
    pub issued_requests: u64,
    pub delivered_words: u64,
    pub busy_cycles: u64,
    pub first_issue_cycle: Option<u64>,
    pub completion_cycle: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    data: u64,
    /// Read: element responses still missing. Write: 1 until acknowledged.
    remaining: usize,
    issued: bool,
}

#[derive(Debug, Clone, Default)]
struct Channel {
    slots: VecDeque<Slot>,
    /// Step index of `slots[0]`.
    head_seq: u64,
    /// Next step this channel issues for.
    issue_step: u64,
    /// Next gather element within `issue_step` (reads).
    issue_elem: usize,
}

#[derive(Debug, Clone)]
struct Active {
    config: StreamConfig,
    agu: Agu,
    spatial: Vec<i64>,
    active_channels: Vec<usize>,
    elements: usize,
    elem_bytes: usize,
    gather_stride: i64,
    addr_queue: VecDeque<u64>,
    addr_head: u64,
    channels: Vec<Channel>,
    total_steps: u64,
    delivered: u64,
    last_collect: Option<u64>,
    first_tick: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Dse {
    design: DseDesign,
    requester: usize,
    word_bytes: u64,
    state: Option<Active>,
    counters: DseCounters,
    scratch: Vec<MemResponse>,
}

impl Dse {
    pub fn new(design: DseDesign, requester: usize) -> Result<Self, DseError> {
        design.validate()?;
        Ok(Self {
            word_bytes: design.lane_bytes() as u64,
            design,
            requester,
            state: None,
            counters: DseCounters::default(),
            scratch: Vec::new(),
        })
    }

    pub fn design(&self) -> &DseDesign {
        &self.design
    }

    pub fn requester(&self) -> usize {
        self.requester
    }

    pub fn counters(&self) -> &DseCounters {
        &self.counters
    }

    pub fn config(&self) -> Option<&StreamConfig> {
        self.state.as_ref().map(|s| &s.config)
    }

    pub fn total_steps(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.total_steps)
    }

    /// Loads a runtime configuration and selects the stream's addressing
    /// mode in `mem`. Counters restart.
    pub fn configure(
        &mut self,
        config: StreamConfig,
        mem: &mut Scratchpad,
    ) -> Result<(), DseError> {
        let d = &self.design;
        let invalid = |m: String| Err(DseError::InvalidConfig(m));
        if mem.bank_map().bank_width_bits() != d.bank_width_bits {
            return invalid(format!(
                "engine lane is {} bits but memory banks are {} bits",
                d.bank_width_bits,
                mem.bank_map().bank_width_bits()
            ));
        }

        let mut extensions = config.extensions.clone();
        if extensions.stages.is_empty() {
            extensions = ExtensionSpec::bypassed(&d.extensions);
        }
        let kinds: Vec<ExtensionKind> = extensions.stages.iter().map(|s| s.kind).collect();
        if kinds != d.extensions {
            return invalid(format!(
                "extension stages {:?} do not match the design chain {:?}",
                kinds, d.extensions
            ));
        }
        extensions.validate(d.num_channels, d.lane_bytes())?;

        let lane_bytes = d.lane_bytes();
        let (elements, gather_stride) = match config.gather {
            None => (1, 0),
            Some(g) => {
                if d.mode == StreamMode::Write {
                    return invalid("write engines do not gather".into());
                }
                if g.elements == 0 || g.elements > 256 || !lane_bytes.is_multiple_of(g.elements) {
                    return invalid(format!(
                        "cannot split a {lane_bytes}-byte lane into {} elements",
                        g.elements
                    ));
                }
                (g.elements, g.stride)
            }
        };
        let elem_bytes = lane_bytes / elements;

        let agu = Agu::configure(&config.pattern, d, mem.size_bytes())?;
        let p = &config.pattern;
        let align = elem_bytes as i64;
        let misaligned = p.base_address as i64 % align != 0
            || p.temporal_strides.iter().any(|s| s % align != 0)
            || p.spatial_strides.iter().any(|s| s % align != 0)
            || gather_stride % align != 0;
        if misaligned {
            return invalid(format!("pattern is not aligned to {align}-byte accesses"));
        }
        if elements > 1 {
            let (lo, hi) = p.address_range(&d.spatial_bounds);
            let reach = gather_stride as i128 * (elements as i128 - 1);
            let (lo, hi) = (lo + reach.min(0), hi + reach.max(0));
            if lo < 0 || hi >= mem.size_bytes() as i128 {
                return Err(AguError::AddressOutOfRange {
                    min: lo,
                    max: hi,
                    limit: mem.size_bytes(),
                }
                .into());
            }
        }

        let active_channels = match extensions.broadcast_source() {
            Some(lane) if d.mode == StreamMode::Write => {
                return invalid(format!("write engine cannot broadcast lane {lane}"))
            }
            Some(lane) => vec![lane],
            None => (0..d.num_channels).collect(),
        };

        mem.set_requester_mode(self.requester, config.mode_select)?;

        let spatial = agu.spatial_offsets().to_vec();
        let total_steps = agu.total_steps();
        let config = StreamConfig {
            extensions,
            ..config
        };
        self.state = Some(Active {
            config,
            agu,
            spatial,
            active_channels,
            elements,
            elem_bytes,
            gather_stride,
            addr_queue: VecDeque::with_capacity(d.address_buffer_depth),
            addr_head: 0,
            channels: vec![Channel::default(); d.num_channels],
            total_steps,
            delivered: 0,
            last_collect: None,
            first_tick: None,
        });
        self.counters = DseCounters::default();
        Ok(())
    }

    fn state_mut(&mut self, expected: StreamMode) -> Result<&mut Active, DseError> {
        if self.design.mode != expected {
            return Err(DseError::WrongMode {
                expected,
                actual: self.design.mode,
            });
        }
        self.state.as_mut().ok_or(DseError::NotConfigured)
    }

    /// Pulls this engine's completed memory responses into its FIFOs.
    /// Idempotent within a cycle.
    pub fn collect(&mut self, mem: &mut Scratchpad, cycle: u64) -> Result<(), DseError> {
        let requester = self.requester;
        let mode = self.design.mode;
        let st = self.state.as_mut().ok_or(DseError::NotConfigured)?;
        if st.last_collect == Some(cycle) {
            return Ok(());
        }
        st.last_collect = Some(cycle);
        st.first_tick.get_or_insert(cycle);

        self.scratch.clear();
        mem.drain_ready(requester, cycle, &mut self.scratch);
        for r in &self.scratch {
            let step = r.tag >> 16;
            let ch = &mut st.channels[r.channel];
            let idx = (step - ch.head_seq) as usize;
            let slot = &mut ch.slots[idx];
            match (mode, r.kind) {
                (StreamMode::Read, AccessKind::Read) => {
                    let byte_off = ((r.tag >> 8) & 0xff) as usize;
                    let elem = (r.tag & 0xff) as usize;
                    let eb = st.elem_bytes;
                    let piece = (r.data >> (8 * byte_off)) & mask(eb);
                    slot.data |= piece << (8 * eb * elem);
                    slot.remaining -= 1;
                }
                (StreamMode::Write, AccessKind::Write) => {
                    slot.remaining = 0;
                    while ch
                        .slots
                        .front()
                        .is_some_and(|s| s.issued && s.remaining == 0)
                    {
                        ch.slots.pop_front();
                        ch.head_seq += 1;
                    }
                }
                _ => unreachable!("response kind does not match engine mode"),
            }
        }
        Ok(())
    }

    fn refill(st: &mut Active, depth: usize) {
        if st.addr_queue.len() < depth {
            if let Some(a) = st.agu.advance() {
                st.addr_queue.push_back(a);
            }
        }
    }

    fn retire_addresses(st: &mut Active) {
        while !st.addr_queue.is_empty() {
            let head = st.addr_head;
            let done = st
                .active_channels
                .iter()
                .all(|&c| st.channels[c].issue_step > head);
            if !done {
                break;
            }
            st.addr_queue.pop_front();
            st.addr_head += 1;
        }
    }

    fn note_issue(counters: &mut DseCounters, cycle: u64) {
        counters.issued_requests += 1;
        counters.first_issue_cycle.get_or_insert(cycle);
    }

    /// Read engine: collect responses, refill the address buffer and let
    /// every channel issue at most one request.
    pub fn step_read(&mut self, mem: &mut Scratchpad, cycle: u64) -> Result<(), DseError> {
        self.state_mut(StreamMode::Read)?;
        self.collect(mem, cycle)?;
        let depth = self.design.data_buffer_depth;
        let abuf = self.design.address_buffer_depth;
        let word_bytes = self.word_bytes;
        let requester = self.requester;
        let st = self.state.as_mut().expect("checked above");
        Self::refill(st, abuf);

        for i in 0..st.active_channels.len() {
            let c = st.active_channels[i];
            let ch = &mut st.channels[c];
            let step = ch.issue_step;
            if step >= st.total_steps || step >= st.addr_head + st.addr_queue.len() as u64 {
                continue;
            }
            if ch.issue_elem == 0 {
                let room = match st.config.policy {
                    IssuePolicy::Prefetch => ch.slots.len() < depth,
                    IssuePolicy::Synchronous => ch.slots.is_empty(),
                };
                if !room {
                    continue;
                }
                ch.slots.push_back(Slot {
                    data: 0,
                    remaining: st.elements,
                    issued: true,
                });
            }
            let temporal = st.addr_queue[(step - st.addr_head) as usize];
            let addr =
                (temporal as i64 + st.spatial[c] + ch.issue_elem as i64 * st.gather_stride) as u64;
            let byte_off = addr % word_bytes;
            let tag = (step << 16) | (byte_off << 8) | ch.issue_elem as u64;
            mem.submit_one(MemRequest::read(requester, c, addr - byte_off, cycle).with_tag(tag))?;
            Self::note_issue(&mut self.counters, cycle);

            ch.issue_elem += 1;
            if ch.issue_elem == st.elements {
                ch.issue_elem = 0;
                ch.issue_step += 1;
            }
        }
        Self::retire_addresses(st);
        Ok(())
    }

    /// The word at the FIFO heads after the extension chain, if every
    /// active channel has its lane.
    pub fn peek(&self) -> Option<WideWord> {
        let st = self.state.as_ref()?;
        if self.design.mode != StreamMode::Read {
            return None;
        }
        let ready = st.active_channels.iter().all(|&c| {
            st.channels[c]
                .slots
                .front()
                .is_some_and(|s| s.remaining == 0)
        });
        if !ready {
            return None;
        }
        let lane_bytes = self.design.lane_bytes();
        let mut word = WideWord::zeroed(self.design.num_channels, lane_bytes);
        for &c in &st.active_channels {
            let data = st.channels[c].slots[0].data;
            word.lane_mut(c)
                .copy_from_slice(&data.to_le_bytes()[..lane_bytes]);
        }
        Some(apply_chain(&st.config.extensions, word).expect("chain validated at configure"))
    }

    /// Removes the head word. Returns false when no complete word exists.
    pub fn pop(&mut self, cycle: u64) -> bool {
        if self.peek().is_none() {
            return false;
        }
        let st = self.state.as_mut().expect("peek succeeded");
        for &c in &st.active_channels {
            let ch = &mut st.channels[c];
            ch.slots.pop_front();
            ch.head_seq += 1;
        }
        st.delivered += 1;
        self.counters.delivered_words += 1;
        self.finish_if_complete(cycle);
        true
    }

    /// One read-engine cycle with the consumer's readiness known up front.
    pub fn tick_read(
        &mut self,
        mem: &mut Scratchpad,
        cycle: u64,
        consumer_ready: bool,
    ) -> Result<Option<WideWord>, DseError> {
        self.step_read(mem, cycle)?;
        if !consumer_ready {
            return Ok(None);
        }
        let word = self.peek();
        if word.is_some() {
            self.pop(cycle);
        }
        Ok(word)
    }

    /// Whether a write engine would take a word this cycle.
    pub fn can_accept(&self) -> bool {
        let Some(st) = self.state.as_ref() else {
            return false;
        };
        if self.design.mode != StreamMode::Write || st.delivered >= st.total_steps {
            return false;
        }
        let depth = self.design.data_buffer_depth;
        st.active_channels.iter().all(|&c| {
            let n = st.channels[c].slots.len();
            match st.config.policy {
                IssuePolicy::Prefetch => n < depth,
                IssuePolicy::Synchronous => n == 0,
            }
        })
    }

    fn accept(&mut self, word: WideWord) -> Result<bool, DseError> {
        let d = &self.design;
        if word.lanes() != d.num_channels || word.lane_bytes() != d.lane_bytes() {
            return Err(DseError::WordShape {
                lanes: word.lanes(),
                lane_bytes: word.lane_bytes(),
                channels: d.num_channels,
                channel_bytes: d.lane_bytes(),
            });
        }
        let st = self.state.as_ref().ok_or(DseError::NotConfigured)?;
        if st.delivered >= st.total_steps {
            return Err(DseError::StreamOverrun {
                total: st.total_steps,
            });
        }
        if !self.can_accept() {
            return Ok(false);
        }
        let st = self.state.as_mut().expect("checked");
        for &c in &st.active_channels {
            st.channels[c].slots.push_back(Slot {
                data: word.lane_u64(c),
                remaining: 1,
                issued: false,
            });
        }
        st.delivered += 1;
        self.counters.delivered_words += 1;
        Ok(true)
    }

    /// One write-engine cycle: collect acknowledgements, take `word` if
    /// there is room, then issue pending writes. Returns acceptance.
    pub fn tick_write(
        &mut self,
        mem: &mut Scratchpad,
        word: Option<WideWord>,
        cycle: u64,
    ) -> Result<bool, DseError> {
        self.state_mut(StreamMode::Write)?;
        self.collect(mem, cycle)?;
        let accepted = match word {
            Some(w) => self.accept(w)?,
            None => false,
        };
        let abuf = self.design.address_buffer_depth;
        let requester = self.requester;
        let st = self.state.as_mut().expect("checked above");
        Self::refill(st, abuf);
        for i in 0..st.active_channels.len() {
            let c = st.active_channels[i];
            let ch = &mut st.channels[c];
            let step = ch.issue_step;
            let idx = (step - ch.head_seq) as usize;
            if idx >= ch.slots.len() || step >= st.addr_head + st.addr_queue.len() as u64 {
                continue;
            }
            let temporal = st.addr_queue[(step - st.addr_head) as usize];
            let addr = (temporal as i64 + st.spatial[c]) as u64;
            let slot = &mut ch.slots[idx];
            mem.submit_one(
                MemRequest::write(requester, c, addr, slot.data, cycle).with_tag(step << 16),
            )?;
            slot.issued = true;
            ch.issue_step += 1;
            Self::note_issue(&mut self.counters, cycle);
        }
        Self::retire_addresses(st);
        self.finish_if_complete(cycle);
        Ok(accepted)
    }

    fn finish_if_complete(&mut self, cycle: u64) {
        if self.counters.completion_cycle.is_none() && self.is_complete() {
            self.counters.completion_cycle = Some(cycle);
            if let Some(start) = self.state.as_ref().and_then(|s| s.first_tick) {
                self.counters.busy_cycles = cycle - start + 1;
            }
        }
    }

    /// Records completion observed after `collect` (write acknowledgements
    /// arrive without a tick of their own).
    pub fn observe(&mut self, cycle: u64) {
        self.finish_if_complete(cycle);
    }

    pub fn is_complete(&self) -> bool {
        let Some(st) = self.state.as_ref() else {
            return false;
        };
        st.delivered == st.total_steps
            && st.agu.is_exhausted()
            && st
                .active_channels
                .iter()
                .all(|&c| st.channels[c].slots.is_empty())
    }

    /// Reserved-but-unfilled slots (reads) or issued-but-unacknowledged
    /// writes on channel `c`.
    pub fn in_flight(&self, c: usize) -> usize {
        self.state.as_ref().map_or(0, |st| {
            st.channels[c]
                .slots
                .iter()
                .filter(|s| s.issued && s.remaining > 0)
                .count()
        })
    }

    /// Lanes held in channel `c`'s FIFO: complete lanes waiting for the
    /// consumer (reads) or accepted lanes not yet issued (writes).
    pub fn fifo_occupancy(&self, c: usize) -> usize {
        self.state.as_ref().map_or(0, |st| {
            st.channels[c]
                .slots
                .iter()
                .filter(|s| match self.design.mode {
                    StreamMode::Read => s.remaining == 0,
                    StreamMode::Write => !s.issued,
                })
                .count()
        })
    }

    pub fn delivered(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.delivered)
    }
}

fn mask(bytes: usize) -> u64 {
    if bytes >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * bytes)) - 1
    }
}
