//! Framed distribution-matcher blocks.
//!
//! Byte layout (integers little-endian):
//!
//! | offset | size  | field                                        |
//! |--------|-------|----------------------------------------------|
//! | 0      | 4     | magic `NPDM`                                 |
//! | 4      | 1     | version (1)                                  |
//! | 5      | 1     | bits per symbol, `log2 M`                    |
//! | 6      | 2     | reserved, zero                               |
//! | 8      | 32    | SHA-256 model hash                           |
//! | 40     | 4     | `L_out`, symbols in the payload              |
//! | 44     | 4     | information bits carried                     |
//! | 48     | 4     | block capacity `K` (bits after zero padding) |
//! | 52     | L_out | symbol indices, one byte each                |

use nps_core::encoder::EncoderModel;
use nps_core::matcher::Matcher;

use crate::checkpoint::model_hash;
use crate::{NpsError, Result};

pub const MAGIC: &[u8; 4] = b"NPDM";
pub const VERSION: u8 = 1;
const HEADER: usize = 52;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub bits_per_symbol: u8,
    pub model_hash: [u8; 32],
    pub bit_count: u32,
    pub capacity: u32,
    pub symbols: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.symbols.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.bits_per_symbol);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.symbols.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.bit_count.to_le_bytes());
        out.extend_from_slice(&self.capacity.to_le_bytes());
        out.extend_from_slice(&self.symbols);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| NpsError::Runtime(format!("frame: {m}"));
        if b.len() < HEADER || &b[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        if b[4] != VERSION {
            return Err(bad("unsupported version"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("four bytes"));
        let len = u32_at(40) as usize;
        if b.len() != HEADER + len {
            return Err(bad("payload length mismatch"));
        }
        let f = Frame {
            bits_per_symbol: b[5],
            model_hash: b[8..40].try_into().expect("32 bytes"),
            bit_count: u32_at(44),
            capacity: u32_at(48),
            symbols: b[HEADER..].to_vec(),
        };
        if f.bit_count > f.capacity || f.bits_per_symbol == 0 || f.bits_per_symbol > 8 {
            return Err(bad("inconsistent header"));
        }
        Ok(f)
    }
}

/// Matches `bits` (values 0/1) onto `l_out` symbols and frames them.
pub fn encode(model: &EncoderModel, bits: &[u8], l_out: usize) -> Result<Frame> {
    let m = Matcher::new(model, l_out)?;
    let enc = m.encode(bits)?;
    Ok(Frame {
        bits_per_symbol: model.config().order.trailing_zeros() as u8,
        model_hash: model_hash(model),
        bit_count: bits.len() as u32,
        capacity: m.capacity() as u32,
        symbols: enc.symbols.iter().map(|&s| s as u8).collect(),
    })
}

/// Recovers the information bits of a frame; the model must hash to the
/// frame's model hash.
pub fn decode(model: &EncoderModel, frame: &Frame) -> Result<Vec<u8>> {
    if model_hash(model) != frame.model_hash {
        return Err(NpsError::Runtime("frame: model hash mismatch".into()));
    }
    let m = Matcher::new(model, frame.symbols.len())?;
    if m.capacity() != frame.capacity as usize {
        return Err(NpsError::Runtime("frame: capacity mismatch".into()));
    }
    let symbols: Vec<usize> = frame.symbols.iter().map(|&s| s as usize).collect();
    let mut bits = m.decode(&symbols)?;
    if bits[frame.bit_count as usize..].iter().any(|&b| b != 0) {
        return Err(NpsError::Runtime("frame: non-zero padding".into()));
    }
    bits.truncate(frame.bit_count as usize);
    Ok(bits)
}
