//! Bit and block arithmetic shared by the codec: message partitioning,
//! index/bit conversions, the belief matrix, and rate bookkeeping.
//!
//! Bit order is big-endian throughout: the first bit of a block is the most
//! significant bit of its label.

use crate::error::{Error, Result};
use ndarray::Array2;
use num_integer::Integer;

/// Largest supported block size in bits.
pub const MAX_BLOCK_BITS: usize = 16;

/// A K-bit message split into `l` blocks of `m` bits, with per-block class
/// labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageBlockSequence {
    pub bits: Vec<u8>,
    pub blocks: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub block_bits: usize,
}

impl MessageBlockSequence {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Splits `bits` into blocks of `m` bits and assigns each block its label.
pub fn partition_message(bits: &[u8], m: usize) -> Result<MessageBlockSequence> {
    if m == 0 || m > MAX_BLOCK_BITS {
        return Err(Error::Config(format!(
            "block size must be in 1..={MAX_BLOCK_BITS}, got {m}"
        )));
    }
    if bits.len() % m != 0 {
        return Err(Error::Config(format!(
            "message length {} is not divisible by block size {m}",
            bits.len()
        )));
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::Domain(format!("message entries must be 0 or 1, got {b}")));
    }
    let blocks: Vec<Vec<u8>> = bits.chunks(m).map(|c| c.to_vec()).collect();
    let labels = blocks.iter().map(|b| bits_to_index(b)).collect();
    Ok(MessageBlockSequence {
        bits: bits.to_vec(),
        blocks,
        labels,
        block_bits: m,
    })
}

/// Big-endian binary expansion of `index` into `m` bits.
pub fn index_to_bits(index: usize, m: usize) -> Result<Vec<u8>> {
    if m == 0 || m > MAX_BLOCK_BITS {
        return Err(Error::Config(format!(
            "block size must be in 1..={MAX_BLOCK_BITS}, got {m}"
        )));
    }
    if index >= 1 << m {
        return Err(Error::Domain(format!(
            "index {index} out of range for {m}-bit blocks"
        )));
    }
    Ok((0..m).map(|k| ((index >> (m - 1 - k)) & 1) as u8).collect())
}

/// Inverse of [`index_to_bits`]: interprets `bits` as a big-endian integer.
pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

/// Bipolar symbol for a bit: 0 maps to -1, 1 maps to +1.
pub fn bipolar<T: crate::scalar::Scalar>(bit: u8) -> T {
    if bit == 0 {
        -T::one()
    } else {
        T::one()
    }
}

/// Binary matrix of shape `m x 2^m` whose column `c` holds the big-endian
/// expansion of `c`. Multiplying a class-probability vector by it yields the
/// per-bit marginal probabilities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeliefMatrix {
    pub block_bits: usize,
    pub matrix: Array2<u8>,
}

impl BeliefMatrix {
    pub fn num_classes(&self) -> usize {
        1 << self.block_bits
    }

    /// The matrix as floating-point entries, for use inside network graphs.
    pub fn to_float<T: crate::scalar::Scalar>(&self) -> Array2<T> {
        self.matrix.mapv(|b| T::from_f64(b as f64))
    }
}

/// Builds the belief matrix for block size `m`.
pub fn make_belief_matrix(m: usize) -> Result<BeliefMatrix> {
    if m == 0 || m > MAX_BLOCK_BITS {
        return Err(Error::Config(format!(
            "block size must be in 1..={MAX_BLOCK_BITS}, got {m}"
        )));
    }
    let classes = 1usize << m;
    let mut matrix = Array2::zeros((m, classes));
    for c in 0..classes {
        for (k, &bit) in index_to_bits(c, m)?.iter().enumerate() {
            matrix[(k, c)] = bit;
        }
    }
    Ok(BeliefMatrix {
        block_bits: m,
        matrix,
    })
}

/// Converts a class-probability vector into per-bit marginals: entry `k` of
/// the result is the probability that bit `k` of the block equals 1.
pub fn belief_from_probs(probs: &[f64], a: &BeliefMatrix) -> Result<Vec<f64>> {
    if probs.len() != a.num_classes() {
        return Err(Error::Contract(format!(
            "probability vector has length {}, expected {}",
            probs.len(),
            a.num_classes()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "probabilities must be nonnegative and sum to 1 (sum = {sum})"
        )));
    }
    Ok((0..a.block_bits)
        .map(|k| {
            probs
                .iter()
                .enumerate()
                .map(|(c, &p)| a.matrix[(k, c)] as f64 * p)
                .sum()
        })
        .collect())
}

/// Code-rate bookkeeping for a two-user episode: `N = T * l` channel uses
/// carry `2K` information bits in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateSpec {
    pub message_bits: usize,
    pub num_blocks: usize,
    pub rounds: usize,
    pub channel_uses: usize,
    pub rate_num: usize,
    pub rate_den: usize,
}

impl RateSpec {
    pub fn rate(&self) -> f64 {
        self.rate_num as f64 / self.rate_den as f64
    }
}

/// Sum rate of a two-user episode with `k` bits per user, `l` blocks and `t`
/// rounds, reduced to lowest terms.
pub fn sum_rate(k: usize, l: usize, t: usize) -> Result<RateSpec> {
    if k == 0 || l == 0 || t == 0 {
        return Err(Error::Config(format!(
            "rate parameters must be positive (k={k}, l={l}, t={t})"
        )));
    }
    let channel_uses = t * l;
    let g = (2 * k).gcd(&channel_uses);
    Ok(RateSpec {
        message_bits: k,
        num_blocks: l,
        rounds: t,
        channel_uses,
        rate_num: 2 * k / g,
        rate_den: channel_uses / g,
    })
}
