//! Bit-exact range coder over quantized CDFs.
//!
//! Carry propagation uses the classic byte cache with a pending-0xFF run;
//! renormalization is byte-wise at the 2^24 threshold. The model is fully
//! specified before each symbol, so encoder and decoder stay in lockstep as
//! long as they evaluate identical CDFs.

use crate::entropy::{CdfTable, LazyMixtureCdf};
use crate::error::{Error, Result};

const RENORM_THRESHOLD: u32 = 1 << 24;

/// Integer CDF interface the coder drives: a power-of-two total, cumulative
/// bounds per symbol, and inverse lookup for decoding.
pub trait SymbolCdf {
    fn precision(&self) -> u8;
    fn bounds(&self, symbol: u32) -> (u32, u32);
    fn find(&self, value: u32) -> u32;
    fn alphabet_size(&self) -> u32;

    fn total(&self) -> u32 {
        1u32 << self.precision()
    }
}

impl SymbolCdf for CdfTable {
    fn precision(&self) -> u8 {
        CdfTable::precision(self)
    }

    fn bounds(&self, symbol: u32) -> (u32, u32) {
        CdfTable::bounds(self, symbol as usize)
    }

    fn find(&self, value: u32) -> u32 {
        CdfTable::find(self, value) as u32
    }

    fn alphabet_size(&self) -> u32 {
        CdfTable::alphabet_size(self) as u32
    }
}

impl SymbolCdf for LazyMixtureCdf {
    fn precision(&self) -> u8 {
        crate::entropy::CDF_PRECISION
    }

    fn bounds(&self, symbol: u32) -> (u32, u32) {
        LazyMixtureCdf::bounds(self, symbol)
    }

    fn find(&self, value: u32) -> u32 {
        LazyMixtureCdf::find(self, value)
    }

    fn alphabet_size(&self) -> u32 {
        LazyMixtureCdf::alphabet_size(self)
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: u32, cdf: &impl SymbolCdf) {
        assert!(symbol < cdf.alphabet_size(), "symbol outside alphabet");
        debug_assert!(cdf.precision() <= 24);
        let (lo, hi) = cdf.bounds(symbol);
        debug_assert!(lo < hi && hi <= cdf.total());
        let r = self.range >> cdf.precision();
        self.low += u64::from(r) * u64::from(lo);
        if hi == cdf.total() {
            // Give the top interval the truncation remainder.
            self.range -= r * lo;
        } else {
            self.range = r * (hi - lo);
        }
        while self.range < RENORM_THRESHOLD {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low >> 32) != 0 || (self.low as u32) < 0xFF00_0000 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.cache_size > 0 {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flush and return the stream. Five tail bytes pin the final interval.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            range: u32::MAX,
            code: 0,
            buf,
            pos: 0,
        };
        // First byte is the encoder's initial cache; its bits fall off the
        // 32-bit code register.
        for _ in 0..5 {
            dec.code = (dec.code << 8) | u32::from(dec.read_byte()?);
        }
        Ok(dec)
    }

    fn read_byte(&mut self) -> Result<u8> {
        let b = self
            .buf
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Truncated(format!("range stream ends at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    /// Byte offset of the next unread input byte, for error reports.
    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn decode(&mut self, cdf: &impl SymbolCdf) -> Result<u32> {
        debug_assert!(cdf.precision() <= 24);
        let r = self.range >> cdf.precision();
        let dv = (self.code / r).min(cdf.total() - 1);
        let symbol = cdf.find(dv);
        let (lo, hi) = cdf.bounds(symbol);
        self.code -= r * lo;
        if hi == cdf.total() {
            self.range -= r * lo;
        } else {
            self.range = r * (hi - lo);
        }
        while self.range < RENORM_THRESHOLD {
            self.code = (self.code << 8) | u32::from(self.read_byte()?);
            self.range <<= 8;
        }
        Ok(symbol)
    }
}
