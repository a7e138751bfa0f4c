//! Fixed-length arithmetic distribution matcher driven by a frozen encoder.
//!
//! The input bits, read as a `K`-bit integer `x`, select one sequence out of
//! `2^K`. At every step the current count `N` (initially `2^K`) is split
//! among the symbols in proportion to the 16-bit quantised conditionals and
//! `x` falls into exactly one share. Shares are capped at `M^(remaining)`,
//! which makes the count reach one after the last symbol: the map from
//! `[0, 2^K)` to symbol sequences is injective and decoding recovers `x`
//! exactly. Counts are exact big integers, so no renormalisation is needed.

use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigUint;

use crate::encoder::{Context, EncoderModel};
use crate::math::{floor, log2, sqrt};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Fractional bits of the probability quantiser.
pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;

/// Seed of the capacity estimate.
const CAPACITY_SEED: u64 = 0x5eed_d15c;
/// Sequences drawn for the capacity estimate.
const CAPACITY_SAMPLES: usize = 64;

/// Quantises a probability vector to integer units summing to
/// [`PROB_ONE`]. Entries with `p > 0` get at least one unit; the rest is
/// assigned by largest remainder (ties to the lower index).
pub fn quantize(probs: &[f64]) -> Result<Vec<u32>> {
    if probs.is_empty() || probs.len() > PROB_ONE as usize {
        return Err(Error::invalid("cannot quantise this many symbols"));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("probabilities sum to zero"));
    }
    let one = PROB_ONE as f64;
    let raw: Vec<f64> = probs.iter().map(|p| p / total * one).collect();
    let mut units: Vec<u32> = raw
        .iter()
        .map(|&r| if r > 0.0 { (r as u32).max(1) } else { 0 })
        .collect();
    let frac = |i: usize, u: &[u32]| raw[i] - u[i] as f64;
    let mut sum: i64 = units.iter().map(|&u| u as i64).sum();
    while sum < PROB_ONE as i64 {
        let i = (0..units.len())
            .filter(|&i| raw[i] > 0.0)
            .max_by(|&a, &b| frac(a, &units).partial_cmp(&frac(b, &units)).unwrap().then(b.cmp(&a)))
            .expect("some positive probability");
        units[i] += 1;
        sum += 1;
    }
    while sum > PROB_ONE as i64 {
        let i = (0..units.len())
            .filter(|&i| units[i] > 1)
            .min_by(|&a, &b| frac(a, &units).partial_cmp(&frac(b, &units)).unwrap().then(a.cmp(&b)))
            .expect("some entry above one unit");
        units[i] -= 1;
        sum -= 1;
    }
    Ok(units)
}

/// Splits `n` into shares proportional to `units`, each at most `cap`
/// (if given). Shares sum to `n`.
fn split(n: &BigUint, units: &[u32], cap: Option<&BigUint>) -> Vec<BigUint> {
    let q: BigUint = n >> PROB_BITS;
    let rem = (n & BigUint::from(PROB_ONE - 1))
        .iter_u64_digits()
        .next()
        .unwrap_or(0);
    let mut small: Vec<u64> = Vec::with_capacity(units.len());
    let mut rems: Vec<u64> = Vec::with_capacity(units.len());
    for &u in units {
        let v = rem * u as u64;
        small.push(v >> PROB_BITS);
        rems.push(v & (PROB_ONE as u64 - 1));
    }
    let deficit = rem - small.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(units[b].cmp(&units[a])).then(a.cmp(&b)));
    for &i in order.iter().take(deficit as usize) {
        small[i] += 1;
    }
    let mut shares: Vec<BigUint> = units
        .iter()
        .zip(&small)
        .map(|(&u, &s)| &q * u + s)
        .collect();
    if let Some(cap) = cap {
        let mut excess = BigUint::from(0u8);
        for s in shares.iter_mut() {
            if &*s > cap {
                excess += &*s - cap;
                *s = cap.clone();
            }
        }
        if excess > BigUint::from(0u8) {
            let mut by_units: Vec<usize> = (0..units.len()).collect();
            by_units.sort_by(|&a, &b| units[b].cmp(&units[a]).then(a.cmp(&b)));
            for i in by_units {
                if excess == BigUint::from(0u8) {
                    break;
                }
                let room = cap - &shares[i];
                let give = if room < excess { room } else { excess.clone() };
                excess -= &give;
                shares[i] += give;
            }
        }
    }
    shares
}

/// Result of matching one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub symbols: Vec<usize>,
    /// `bits_read[t]`: shortest input prefix that fixes symbols `0..=t`.
    pub bits_read: Vec<usize>,
}

/// Matcher for blocks of `length` symbols under a frozen encoder.
#[derive(Clone, Debug)]
pub struct Matcher<'a> {
    model: &'a EncoderModel,
    length: usize,
    capacity: usize,
    bits_per_symbol: usize,
}

impl<'a> Matcher<'a> {
    /// Matcher with capacity `K = floor(L Ĥ_q - σ/2)`, where `Ĥ_q` and `σ`
    /// are the mean (per symbol) and standard deviation (per block) of the
    /// quantised information content over a fixed-seed sample of blocks.
    pub fn new(model: &'a EncoderModel, length: usize) -> Result<Self> {
        let (mean, sd) = quantized_information(model, length, CAPACITY_SAMPLES, &mut rng::seeded(CAPACITY_SEED))?;
        let k = floor(length as f64 * mean - 0.5 * sd).max(0.0) as usize;
        Self::with_capacity(model, length, k)
    }

    pub fn with_capacity(model: &'a EncoderModel, length: usize, capacity: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::invalid("block length must be positive"));
        }
        let m = model.config().order;
        if !m.is_power_of_two() {
            return Err(Error::UnsupportedOrder(m));
        }
        let bits_per_symbol = m.trailing_zeros() as usize;
        Ok(Matcher {
            model,
            length,
            capacity: capacity.min(length * bits_per_symbol),
            bits_per_symbol,
        })
    }

    /// Input bits per block, `K`.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Matching rate `K / L`, bits per symbol.
    pub fn rate(&self) -> f64 {
        self.capacity as f64 / self.length as f64
    }

    fn cap(&self, remaining_after: usize) -> BigUint {
        BigUint::from(1u8) << (remaining_after * self.bits_per_symbol)
    }

    /// Maps up to `K` bits (values 0/1) to `L` symbols; shorter inputs are
    /// padded with zeros.
    pub fn encode(&self, bits: &[u8]) -> Result<Encoded> {
        if bits.len() > self.capacity {
            return Err(Error::invalid("more input bits than the block capacity"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("bits must be 0 or 1"));
        }
        let k = self.capacity;
        let mut x = BigUint::from(0u8);
        for i in 0..k {
            x <<= 1;
            if bits.get(i) == Some(&1) {
                x += 1u8;
            }
        }
        let x0 = x.clone();
        let mut n = BigUint::from(1u8) << k;
        let mut lo = BigUint::from(0u8);
        let mut ctx = Context::new(self.model);
        let mut out = Encoded {
            symbols: Vec::with_capacity(self.length),
            bits_read: Vec::with_capacity(self.length),
        };
        for t in 0..self.length {
            let units = quantize(ctx.probs())?;
            let cap = self.cap(self.length - t - 1);
            let shares = split(&n, &units, Some(&cap));
            let mut c = BigUint::from(0u8);
            let mut chosen = None;
            for (s, share) in shares.iter().enumerate() {
                let next = &c + share;
                if x < next {
                    chosen = Some(s);
                    break;
                }
                c = next;
            }
            let s = chosen.ok_or(Error::ContextDesync(t))?;
            x -= &c;
            lo += &c;
            n = shares[s].clone();
            out.symbols.push(s);
            out.bits_read.push(prefix_bits(&x0, &lo, &n, k));
            ctx.advance(s);
        }
        debug_assert!(n == BigUint::from(1u8));
        Ok(out)
    }

    /// Recovers the `K` input bits (including padding) from a block.
    pub fn decode(&self, symbols: &[usize]) -> Result<Vec<u8>> {
        if symbols.len() != self.length {
            return Err(Error::invalid("block length mismatch"));
        }
        let k = self.capacity;
        let mut n = BigUint::from(1u8) << k;
        let mut lo = BigUint::from(0u8);
        let mut ctx = Context::new(self.model);
        for (t, &s) in symbols.iter().enumerate() {
            if s >= self.model.config().order {
                return Err(Error::ContextDesync(t));
            }
            let units = quantize(ctx.probs())?;
            let cap = self.cap(self.length - t - 1);
            let shares = split(&n, &units, Some(&cap));
            if shares[s] == BigUint::from(0u8) {
                return Err(Error::ContextDesync(t));
            }
            for share in &shares[..s] {
                lo += share;
            }
            n = shares[s].clone();
            ctx.advance(s);
        }
        if n != BigUint::from(1u8) {
            return Err(Error::ContextDesync(symbols.len()));
        }
        let mut bits = vec![0u8; k];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = lo.bit((k - 1 - i) as u64) as u8;
        }
        Ok(bits)
    }
}

/// Shortest prefix length `P` such that every `K`-bit integer sharing its
/// first `P` bits with `x` lies inside `[lo, lo + n)`.
fn prefix_bits(x: &BigUint, lo: &BigUint, n: &BigUint, k: usize) -> usize {
    let hi = lo + n;
    (0..=k)
        .find(|&p| {
            let start = (x >> (k - p)) << (k - p);
            &start >= lo && start + (BigUint::from(1u8) << (k - p)) <= hi
        })
        .unwrap_or(k)
}

/// Mean per-symbol and per-block spread of `-log2 q(x)` for blocks drawn
/// from the quantised conditionals.
fn quantized_information(model: &EncoderModel, length: usize, samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut ctx = Context::new(model);
        let mut info = 0.0;
        for _ in 0..length {
            let u = quantize(ctx.probs())?;
            let p: Vec<f64> = u.iter().map(|&v| v as f64).collect();
            let s = rng::categorical(rng, &p);
            info -= log2(u[s] as f64 / PROB_ONE as f64);
            ctx.advance(s);
        }
        vals.push(info);
    }
    let n = samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean / length as f64, sqrt(var)))
}

/// Maps `bits` to `l_out` symbols with the capacity rule of
/// [`Matcher::new`].
pub fn dm_encode(bits: &[u8], model: &EncoderModel, l_out: usize) -> Result<Vec<usize>> {
    Ok(Matcher::new(model, l_out)?.encode(bits)?.symbols)
}

/// Inverse of [`dm_encode`]; returns the first `n_bits` bits.
pub fn dm_decode(symbols: &[usize], model: &EncoderModel, n_bits: usize) -> Result<Vec<u8>> {
    let m = Matcher::new(model, symbols.len())?;
    if n_bits > m.capacity() {
        return Err(Error::invalid("bit count exceeds block capacity"));
    }
    let mut bits = m.decode(symbols)?;
    bits.truncate(n_bits);
    Ok(bits)
}

/// Rate loss estimate `Ĥ - K/L` with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct RateLoss {
    /// Model entropy per symbol, bits.
    pub entropy: f64,
    /// Matching rate `K / L`, bits per symbol.
    pub rate: f64,
    pub loss: f64,
    pub stderr: f64,
}

/// Monte Carlo rate loss of the matcher at `block_len`, with the entropy
/// estimated from `blocks` sampled sequences of the model's conditionals.
pub fn rate_loss(model: &EncoderModel, block_len: usize, blocks: usize, seed: u64) -> Result<RateLoss> {
    if block_len == 0 || blocks == 0 {
        return Err(Error::invalid("block length and count must be positive"));
    }
    let matcher = Matcher::new(model, block_len)?;
    let mut r = rng::seeded(seed);
    let mut vals = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let mut ctx = Context::new(model);
        let mut info = 0.0;
        for _ in 0..block_len {
            let p = ctx.probs().to_vec();
            let s = rng::categorical(&mut r, &p);
            info -= log2(p[s]);
            ctx.advance(s);
        }
        vals.push(info / block_len as f64);
    }
    let n = blocks as f64;
    let entropy = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - entropy) * (v - entropy)).sum::<f64>() / (n - 1.0).max(1.0);
    let rate = matcher.rate();
    Ok(RateLoss {
        entropy,
        rate,
        loss: entropy - rate,
        stderr: sqrt(var / n),
    })
}
