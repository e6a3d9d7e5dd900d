//! Byte address to (bank, wordline) mapping with runtime mode selection.
//!
//! Every addressing mode is a bit permutation of the word index. From the
//! LSB up the word index holds `[intra-group bank | wordline | group id]`,
//! with `log2(G)`, `log2(depth)` and `log2(N/G)` bits respectively, where
//! `G` is the selected group size. `G == N` is fully interleaved (FIMA),
//! `G == 1` is non-interleaved (NIMA), anything in between grouped (GIMA).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemapError {
    #[error("{what} = {value} is not a power of two")]
    NotPowerOfTwo { what: &'static str, value: u64 },
    #[error("bank width must be at least 8 bits, got {0}")]
    BankTooNarrow(u32),
    #[error("group size {group} does not divide {banks} banks")]
    GroupDoesNotDivide { group: usize, banks: usize },
    #[error("at least one group option is required")]
    NoGroupOptions,
    #[error("mode index {index} out of range for {options} options")]
    InvalidModeIndex { index: usize, options: usize },
    #[error("address {address:#x} outside memory of {size} bytes")]
    AddressOutOfRange { address: u64, size: u64 },
    #[error("location bank {bank} wordline {wordline} outside the bank array")]
    LocationOutOfRange { bank: usize, wordline: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressingMode {
    Fima,
    Gima { group: usize },
    Nima,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BankLocation {
    pub bank: usize,
    pub wordline: usize,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMap {
    bank_width_bits: u32,
    num_banks: usize,
    bank_depth_words: usize,
    group_options: Vec<usize>,
    selected_mode: usize,
}

fn check_pow2(what: &'static str, value: u64) -> Result<(), RemapError> {
    if value.is_power_of_two() {
        Ok(())
    } else {
        Err(RemapError::NotPowerOfTwo { what, value })
    }
}

impl BankMap {
    pub fn new(
        bank_width_bits: u32,
        num_banks: usize,
        bank_depth_words: usize,
        group_options: Vec<usize>,
    ) -> Result<Self, RemapError> {
        check_pow2("bank width", bank_width_bits as u64)?;
        if bank_width_bits < 8 {
            return Err(RemapError::BankTooNarrow(bank_width_bits));
        }
        check_pow2("bank count", num_banks as u64)?;
        check_pow2("bank depth", bank_depth_words as u64)?;
        if group_options.is_empty() {
            return Err(RemapError::NoGroupOptions);
        }
        for &g in &group_options {
            check_pow2("group size", g as u64)?;
            if g > num_banks || !num_banks.is_multiple_of(g) {
                return Err(RemapError::GroupDoesNotDivide {
                    group: g,
                    banks: num_banks,
                });
            }
        }
        Ok(Self {
            bank_width_bits,
            num_banks,
            bank_depth_words,
            group_options,
            selected_mode: 0,
        })
    }

    pub fn bank_width_bits(&self) -> u32 {
        self.bank_width_bits
    }

    pub fn word_bytes(&self) -> u64 {
        (self.bank_width_bits / 8) as u64
    }

    pub fn num_banks(&self) -> usize {
        self.num_banks
    }

    pub fn bank_depth_words(&self) -> usize {
        self.bank_depth_words
    }

    pub fn group_options(&self) -> &[usize] {
        &self.group_options
    }

    pub fn selected_mode(&self) -> usize {
        self.selected_mode
    }

    pub fn size_bytes(&self) -> u64 {
        self.num_banks as u64 * self.bank_depth_words as u64 * self.word_bytes()
    }

    /// Returns a copy with `r_s` selected.
    pub fn select_mode(&self, r_s: usize) -> Result<BankMap, RemapError> {
        self.check_mode(r_s)?;
        Ok(BankMap {
            selected_mode: r_s,
            ..self.clone()
        })
    }

    pub fn mode(&self) -> AddressingMode {
        self.mode_of(self.selected_mode)
    }

    pub fn mode_of(&self, r_s: usize) -> AddressingMode {
        let g = self.group_options[r_s];
        if g == self.num_banks {
            AddressingMode::Fima
        } else if g == 1 {
            AddressingMode::Nima
        } else {
            AddressingMode::Gima { group: g }
        }
    }

    fn check_mode(&self, r_s: usize) -> Result<(), RemapError> {
        if r_s >= self.group_options.len() {
            Err(RemapError::InvalidModeIndex {
                index: r_s,
                options: self.group_options.len(),
            })
        } else {
            Ok(())
        }
    }

    pub fn map(&self, address: u64) -> Result<BankLocation, RemapError> {
        self.map_with(self.selected_mode, address)
    }

    /// Maps under mode `r_s` without changing the selection.
    pub fn map_with(&self, r_s: usize, address: u64) -> Result<BankLocation, RemapError> {
        self.check_mode(r_s)?;
        let size = self.size_bytes();
        if address >= size {
            return Err(RemapError::AddressOutOfRange { address, size });
        }
        let offset_bits = self.word_bytes().trailing_zeros();
        let word = address >> offset_bits;
        let g = self.group_options[r_s] as u64;
        let g_bits = g.trailing_zeros();
        let depth_bits = (self.bank_depth_words as u64).trailing_zeros();

        let intra = word & (g - 1);
        let wordline = (word >> g_bits) & (self.bank_depth_words as u64 - 1);
        let group = word >> (g_bits + depth_bits);
        Ok(BankLocation {
            bank: (group * g + intra) as usize,
            wordline: wordline as usize,
            byte_offset: (address & (self.word_bytes() - 1)) as usize,
        })
    }

    /// Inverse of [`BankMap::map_with`].
    pub fn unmap_with(&self, r_s: usize, loc: BankLocation) -> Result<u64, RemapError> {
        self.check_mode(r_s)?;
        if loc.bank >= self.num_banks || loc.wordline >= self.bank_depth_words {
            return Err(RemapError::LocationOutOfRange {
                bank: loc.bank,
                wordline: loc.wordline,
            });
        }
        let g = self.group_options[r_s] as u64;
        let g_bits = g.trailing_zeros();
        let depth_bits = (self.bank_depth_words as u64).trailing_zeros();
        let bank = loc.bank as u64;
        let word = (bank & (g - 1))
            | ((loc.wordline as u64) << g_bits)
            | ((bank / g) << (g_bits + depth_bits));
        Ok((word << self.word_bytes().trailing_zeros()) | loc.byte_offset as u64)
    }
}
