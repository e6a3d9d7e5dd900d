//! Multi-banked, single-ported scratchpad behind a full crossbar.
//!
//! Requests are queued at the bank they map to (per-requester addressing
//! mode). Each cycle every bank commits at most one queued request, chosen
//! round-robin over requester ids. A committed request completes `latency`
//! cycles later and its response waits in the owner's delivery queue.
//! Contents live in a flat byte array, so the addressing mode only decides
//! which bank a request occupies.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remap::{BankMap, RemapError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("address {address:#x} outside memory of {size} bytes")]
    AddressOutOfRange { address: u64, size: u64 },
    #[error("address {address:#x} is not aligned to the {word_bytes}-byte bank word")]
    Misaligned { address: u64, word_bytes: u64 },
    #[error("bank width {0} bits exceeds the 64-bit payload of the data path")]
    UnsupportedWidth(u32),
    #[error("image of {got} bytes does not match memory of {expected} bytes")]
    ImageSize { got: usize, expected: usize },
    #[error(transparent)]
    Remap(#[from] RemapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub requester: usize,
    pub channel: usize,
    /// Opaque to the memory; returned unchanged in the response.
    pub tag: u64,
    pub kind: AccessKind,
    pub address: u64,
    /// Little-endian word to store (writes only).
    pub payload: u64,
    pub issue_cycle: u64,
}

impl MemRequest {
    pub fn read(requester: usize, channel: usize, address: u64, cycle: u64) -> Self {
        Self {
            requester,
            channel,
            tag: 0,
            kind: AccessKind::Read,
            address,
            payload: 0,
            issue_cycle: cycle,
        }
    }

    pub fn write(requester: usize, channel: usize, address: u64, payload: u64, cycle: u64) -> Self {
        Self {
            requester,
            channel,
            tag: 0,
            kind: AccessKind::Write,
            address,
            payload,
            issue_cycle: cycle,
        }
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemResponse {
    pub requester: usize,
    pub channel: usize,
    pub tag: u64,
    pub kind: AccessKind,
    pub address: u64,
    /// Read data (zero for writes).
    pub data: u64,
    pub bank: usize,
    pub issue_cycle: u64,
    pub commit_cycle: u64,
    pub completion_cycle: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemCounters {
    pub accepted: u64,
    pub total_accesses: u64,
    pub reads: u64,
    pub writes: u64,
    /// Sum over committed requests of the cycles spent waiting for a busy bank.
    pub conflict_stall_cycles: u64,
    pub bank_accesses: Vec<u64>,
    pub requester_accesses: Vec<u64>,
}

#[derive(Debug, Clone)]
struct Pending {
    req: MemRequest,
    wordline: usize,
}

#[derive(Debug, Clone)]
pub struct Scratchpad {
    map: BankMap,
    latency: u64,
    content: Vec<u8>,
    requester_modes: Vec<usize>,
    banks: Vec<VecDeque<Pending>>,
    rr_next: Vec<usize>,
    active: Vec<usize>,
    is_active: Vec<bool>,
    delivery: Vec<VecDeque<MemResponse>>,
    queued: usize,
    undelivered: usize,
    counters: MemCounters,
}

impl Scratchpad {
    pub fn new(map: BankMap, latency: u64) -> Result<Self, MemError> {
        if map.bank_width_bits() > 64 {
            return Err(MemError::UnsupportedWidth(map.bank_width_bits()));
        }
        let banks = map.num_banks();
        Ok(Self {
            content: vec![0; map.size_bytes() as usize],
            latency,
            requester_modes: Vec::new(),
            banks: vec![VecDeque::new(); banks],
            rr_next: vec![0; banks],
            active: Vec::new(),
            is_active: vec![false; banks],
            delivery: Vec::new(),
            queued: 0,
            undelivered: 0,
            counters: MemCounters {
                bank_accesses: vec![0; banks],
                ..MemCounters::default()
            },
            map,
        })
    }

    pub fn bank_map(&self) -> &BankMap {
        &self.map
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn size_bytes(&self) -> u64 {
        self.content.len() as u64
    }

    pub fn counters(&self) -> &MemCounters {
        &self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = MemCounters {
            bank_accesses: vec![0; self.map.num_banks()],
            ..MemCounters::default()
        };
    }

    fn ensure_requester(&mut self, requester: usize) {
        if self.requester_modes.len() <= requester {
            self.requester_modes
                .resize(requester + 1, self.map.selected_mode());
            self.delivery.resize(requester + 1, VecDeque::new());
            self.counters.requester_accesses.resize(requester + 1, 0);
        }
    }

    /// Selects the addressing mode used to route `requester`'s requests.
    pub fn set_requester_mode(&mut self, requester: usize, r_s: usize) -> Result<(), MemError> {
        self.map.select_mode(r_s)?;
        self.ensure_requester(requester);
        self.requester_modes[requester] = r_s;
        Ok(())
    }

    pub fn requester_mode(&self, requester: usize) -> usize {
        self.requester_modes
            .get(requester)
            .copied()
            .unwrap_or(self.map.selected_mode())
    }

    fn check(&self, req: &MemRequest) -> Result<(), MemError> {
        let size = self.size_bytes();
        if req.address >= size {
            return Err(MemError::AddressOutOfRange {
                address: req.address,
                size,
            });
        }
        let wb = self.map.word_bytes();
        if !req.address.is_multiple_of(wb) {
            return Err(MemError::Misaligned {
                address: req.address,
                word_bytes: wb,
            });
        }
        Ok(())
    }

    /// Enqueues all requests at their banks. Either every request is
    /// accepted or none is.
    pub fn submit(&mut self, requests: &[MemRequest], _cycle: u64) -> Result<usize, MemError> {
        for r in requests {
            self.check(r)?;
        }
        for r in requests {
            self.enqueue(*r)?;
        }
        Ok(requests.len())
    }

    pub fn submit_one(&mut self, request: MemRequest) -> Result<(), MemError> {
        self.check(&request)?;
        self.enqueue(request)
    }

    fn enqueue(&mut self, req: MemRequest) -> Result<(), MemError> {
        self.ensure_requester(req.requester);
        let loc = self
            .map
            .map_with(self.requester_modes[req.requester], req.address)?;
        self.banks[loc.bank].push_back(Pending {
            req,
            wordline: loc.wordline,
        });
        if !self.is_active[loc.bank] {
            self.is_active[loc.bank] = true;
            self.active.push(loc.bank);
        }
        self.queued += 1;
        self.counters.accepted += 1;
        Ok(())
    }

    /// Commits at most one request per bank and returns the committed
    /// requests' responses. The same responses become visible to their
    /// owners through [`Scratchpad::drain_ready`] at `completion_cycle`.
    pub fn tick(&mut self, cycle: u64) -> Vec<MemResponse> {
        if self.active.is_empty() {
            return Vec::new();
        }
        self.active.sort_unstable();
        let num_requesters = self.requester_modes.len().max(1);
        let mut out = Vec::with_capacity(self.active.len());
        let mut still_active = Vec::with_capacity(self.active.len());
        let active = std::mem::take(&mut self.active);
        for &bank in &active {
            let queue = &mut self.banks[bank];
            let start = self.rr_next[bank];
            let mut best: Option<(usize, usize)> = None;
            for (i, p) in queue.iter().enumerate() {
                let key =
                    (p.req.requester + num_requesters - start % num_requesters) % num_requesters;
                if best.is_none_or(|(k, _)| key < k) {
                    best = Some((key, i));
                    if key == 0 {
                        break;
                    }
                }
            }
            let (_, idx) = best.expect("active bank has a queued request");
            let pending = queue.remove(idx).expect("index in range");
            if queue.is_empty() {
                self.is_active[bank] = false;
            } else {
                still_active.push(bank);
            }
            self.rr_next[bank] = pending.req.requester + 1;
            out.push(self.commit(pending, bank, cycle));
        }
        self.active = still_active;
        out
    }

    fn commit(&mut self, pending: Pending, bank: usize, cycle: u64) -> MemResponse {
        let req = pending.req;
        let wb = self.map.word_bytes() as usize;
        let at = req.address as usize;
        let data = match req.kind {
            AccessKind::Read => {
                self.counters.reads += 1;
                let mut buf = [0u8; 8];
                buf[..wb].copy_from_slice(&self.content[at..at + wb]);
                u64::from_le_bytes(buf)
            }
            AccessKind::Write => {
                self.counters.writes += 1;
                let bytes = req.payload.to_le_bytes();
                self.content[at..at + wb].copy_from_slice(&bytes[..wb]);
                0
            }
        };
        self.queued -= 1;
        self.undelivered += 1;
        self.counters.total_accesses += 1;
        self.counters.bank_accesses[bank] += 1;
        self.counters.requester_accesses[req.requester] += 1;
        self.counters.conflict_stall_cycles += cycle.saturating_sub(req.issue_cycle);
        let resp = MemResponse {
            requester: req.requester,
            channel: req.channel,
            tag: req.tag,
            kind: req.kind,
            address: req.address,
            data,
            bank,
            issue_cycle: req.issue_cycle,
            commit_cycle: cycle,
            completion_cycle: cycle + self.latency,
        };
        self.delivery[req.requester].push_back(resp);
        resp
    }

    /// Moves responses of `requester` completed by `cycle` into `out`.
    pub fn drain_ready(&mut self, requester: usize, cycle: u64, out: &mut Vec<MemResponse>) {
        let Some(queue) = self.delivery.get_mut(requester) else {
            return;
        };
        while let Some(front) = queue.front() {
            if front.completion_cycle > cycle {
                break;
            }
            out.push(queue.pop_front().expect("front exists"));
            self.undelivered -= 1;
        }
    }

    /// Requests waiting at banks.
    pub fn queued(&self) -> usize {
        self.queued
    }

    /// True when nothing is queued and every response has been drained.
    pub fn is_idle(&self) -> bool {
        self.queued == 0 && self.undelivered == 0
    }

    pub fn bank_queue_len(&self, bank: usize) -> usize {
        self.banks[bank].len()
    }

    /// Wordline of every queued request at `bank`, in arrival order.
    pub fn bank_queue_wordlines(&self, bank: usize) -> Vec<usize> {
        self.banks[bank].iter().map(|p| p.wordline).collect()
    }

    pub fn load(&mut self, address: u64, bytes: &[u8]) -> Result<(), MemError> {
        let end = address as usize + bytes.len();
        if end > self.content.len() {
            return Err(MemError::AddressOutOfRange {
                address: end as u64,
                size: self.size_bytes(),
            });
        }
        self.content[address as usize..end].copy_from_slice(bytes);
        Ok(())
    }

    pub fn dump(&self, address: u64, len: usize) -> Result<&[u8], MemError> {
        let end = address as usize + len;
        if end > self.content.len() {
            return Err(MemError::AddressOutOfRange {
                address: end as u64,
                size: self.size_bytes(),
            });
        }
        Ok(&self.content[address as usize..end])
    }

    /// Replaces the whole content with a raw little-endian image.
    pub fn load_image(&mut self, image: &[u8]) -> Result<(), MemError> {
        if image.len() != self.content.len() {
            return Err(MemError::ImageSize {
                got: image.len(),
                expected: self.content.len(),
            });
        }
        self.content.copy_from_slice(image);
        Ok(())
    }

    pub fn image(&self) -> &[u8] {
        &self.content
    }
}
