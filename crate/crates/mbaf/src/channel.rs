//! Additive white Gaussian noise multiple-access channel with output
//! feedback.
//!
//! Noise is always drawn at f64 precision and cast to the working scalar
//! afterwards, so per-episode and batched code paths consume identical
//! random streams.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Noise variance for a forward SNR given in dB, with unit transmit power
/// per user: `sigma^2 = 10^(-snr_db / 10)`.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Draws `len` i.i.d. zero-mean Gaussian samples with variance `sigma2`.
pub fn awgn_noise<R: Rng + ?Sized>(rng: &mut R, sigma2: f64, len: usize) -> Vec<f64> {
    let scale = sigma2.sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// One channel round: superposes the user symbols and adds fresh noise.
///
/// Pass `c2 = None` for single-user transmission. All users see the same
/// channel output, which is also what the feedback link returns.
pub fn transmit<T: Scalar, R: Rng + ?Sized>(
    c1: &[T],
    c2: Option<&[T]>,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if let Some(c2) = c2 {
        if c2.len() != c1.len() {
            return Err(Error::Contract(format!(
                "user symbol vectors differ in length: {} vs {}",
                c1.len(),
                c2.len()
            )));
        }
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!(
            "noise variance must be finite and nonnegative, got {sigma2}"
        )));
    }
    let noise = awgn_noise(rng, sigma2, c1.len());
    Ok((0..c1.len())
        .map(|i| {
            let superposed = match c2 {
                Some(c2) => c1[i] + c2[i],
                None => c1[i],
            };
            superposed + T::from_f64(noise[i])
        })
        .collect())
}

/// Feedback as seen by one user: the channel output minus that user's own
/// contribution.
pub fn residual_feedback<T: Scalar>(y: &[T], own: &[T]) -> Result<Vec<T>> {
    if y.len() != own.len() {
        return Err(Error::Contract(format!(
            "feedback and symbol vectors differ in length: {} vs {}",
            y.len(),
            own.len()
        )));
    }
    Ok(y.iter().zip(own).map(|(&y, &c)| y - c).collect())
}

/// Full record of one episode: every transmitted symbol per user and every
/// channel output, round by round.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace<T> {
    /// `symbols[j][tau]` holds user `j`'s block of symbols in round `tau`.
    pub symbols: Vec<Vec<Vec<T>>>,
    /// `received[tau]` holds the channel output block of round `tau`.
    pub received: Vec<Vec<T>>,
}

impl<T: Scalar> EpisodeTrace<T> {
    pub fn new(num_users: usize) -> Self {
        EpisodeTrace {
            symbols: vec![Vec::new(); num_users],
            received: Vec::new(),
        }
    }

    pub fn num_rounds(&self) -> usize {
        self.received.len()
    }

    pub fn num_symbols(&self, user: usize) -> usize {
        self.symbols[user].iter().map(Vec::len).sum()
    }

    /// Average transmit power per channel use for one user, computed at f64.
    pub fn average_power(&self, user: usize) -> f64 {
        let n = self.num_symbols(user);
        if n == 0 {
            return 0.0;
        }
        let energy: f64 = self.symbols[user]
            .iter()
            .flatten()
            .map(|&c| c.as_f64() * c.as_f64())
            .sum();
        energy / n as f64
    }
}
