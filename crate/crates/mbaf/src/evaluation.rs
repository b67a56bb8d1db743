//! Monte Carlo block-error estimation, power calibration and audit, the
//! time-division baseline, and the analytic reference curves (finite-
//! blocklength normal approximation and MAC sum capacity).

use crate::channel::{awgn_noise, snr_to_sigma2};
use crate::config::{ExperimentConfig, Mode};
use crate::decoder::harden;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::MbafModel;
use crate::rng::{derive_rng, derive_subseed};
use crate::rollout::{build_rollout, NoiseSource, Phase};
use crate::scalar::Scalar;
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Two-sided 95% confidence factor.
pub const WILSON_Z: f64 = 1.959963984540054;

/// Standard normal tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of [`q_function`], bisected to absolute tolerance 1e-12.
pub fn q_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("tail probability {p} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if q_function(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sum capacity of the two-user Gaussian MAC in bits per channel use, as a
/// function of the total received SNR (both users' power over the noise).
pub fn mac_sum_capacity(snr_total: f64) -> Result<f64> {
    if !(snr_total > 0.0) {
        return Err(Error::Domain(format!(
            "total SNR must be positive, got {snr_total}"
        )));
    }
    Ok(0.5 * (1.0 + snr_total).log2())
}

/// Normal-approximation achievable rate for the real AWGN channel at
/// blocklength `n` and block error probability `epsilon`:
/// `C - sqrt(V/n)·Q⁻¹(ε) + log₂(n)/(2n)`.
pub fn normal_approx_rate(n: usize, snr_linear: f64, epsilon: f64) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("blocklength must be at least 1".into()));
    }
    if !(snr_linear > 0.0) {
        return Err(Error::Domain(format!(
            "SNR must be positive, got {snr_linear}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let s = snr_linear;
    let log2e = std::f64::consts::LOG2_E;
    let c = 0.5 * (1.0 + s).log2();
    let v = (s * (s + 2.0) / (2.0 * (1.0 + s) * (1.0 + s))) * log2e * log2e;
    let n_f = n as f64;
    Ok(c - (v / n_f).sqrt() * q_inv(epsilon)? + n_f.log2() / (2.0 * n_f))
}

/// Wilson score interval for `successes` out of `n` Bernoulli trials.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    // At the boundary counts the exact bounds are 0 and 1; sqrt rounding
    // otherwise leaves a stray epsilon.
    let lo = if successes == 0 { 0.0 } else { ((center - half) / denom).max(0.0) };
    let hi = if successes == n { 1.0 } else { ((center + half) / denom).min(1.0) };
    (lo, hi)
}

/// One Monte Carlo BLER measurement at a single operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct BlerEstimate {
    pub snr_db: f64,
    /// Interaction rounds of the scheme under test.
    pub t: usize,
    /// Sum rate in bits per channel use.
    pub rate: f64,
    /// Episodes counted per user.
    pub trials: u64,
    /// Block errors per user.
    pub errors: Vec<u64>,
    /// Average block error rate over users.
    pub bler: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl BlerEstimate {
    /// Builds the estimate from raw counts; the interval pools both users'
    /// trials.
    pub fn from_counts(snr_db: f64, t: usize, rate: f64, trials: u64, errors: Vec<u64>) -> Self {
        let users = errors.len().max(1) as u64;
        let total: u64 = errors.iter().sum();
        let n = users * trials;
        let bler = if n == 0 { 0.0 } else { total as f64 / n as f64 };
        let (ci_low, ci_high) = wilson_interval(total, n, WILSON_Z);
        BlerEstimate {
            snr_db,
            t,
            rate,
            trials,
            errors,
            bler,
            ci_low,
            ci_high,
        }
    }
}

fn episode_messages(cfg: &ExperimentConfig, seed: u64, first: u64, count: usize) -> Vec<Vec<u8>> {
    let users = cfg.num_users();
    let k = cfg.code.k;
    let mut msgs = vec![Vec::with_capacity(count * k); users];
    for ep in 0..count {
        let mut rng = derive_rng(seed, "message", first + ep as u64);
        for msg in msgs.iter_mut() {
            for _ in 0..k {
                msg.push(rng.gen_range(0..=1u8));
            }
        }
    }
    msgs
}

fn episode_noise(seed: u64, first: u64, count: usize) -> NoiseSource {
    NoiseSource::per_episode(
        (0..count as u64)
            .map(|ep| derive_rng(seed, "noise", first + ep))
            .collect(),
    )
}

/// Estimates BLER over independent episodes with per-episode derived
/// randomness. A user's episode is an error when any of its blocks decodes
/// wrongly. With `stop_at_errors`, estimation ends early once every user
/// has accumulated that many errors.
pub fn estimate_bler<T: Scalar>(
    model: &MbafModel<T>,
    snr_db: f64,
    trials: u64,
    seed: u64,
    stop_at_errors: Option<u64>,
) -> Result<BlerEstimate> {
    if trials == 0 {
        return Err(Error::Contract("at least one trial is required".into()));
    }
    let cfg = &model.config;
    let (k, l) = (cfg.code.k, cfg.code.l);
    let users = cfg.num_users();
    let sigma2 = snr_to_sigma2(snr_db);
    let chunk_size = cfg.eval.chunk.max(1);
    let mut errors = vec![0u64; users];
    let mut done = 0u64;
    while done < trials {
        let count = chunk_size.min((trials - done) as usize);
        let msgs = episode_messages(cfg, seed, done, count);
        let mut noise = episode_noise(seed, done, count);
        let mut g = Graph::new();
        let ro = build_rollout(&mut g, model, &msgs, &mut noise, sigma2, Phase::Eval, false)?;
        for (j, &probs_id) in ro.probs.iter().enumerate() {
            let probs = g.value(probs_id);
            let (labels, _) = harden(probs, cfg.code.m)?;
            for ep in 0..count {
                let wrong = (0..l).any(|i| {
                    let row = ep * l + i;
                    labels[row] != ro.labels[j][row]
                });
                if wrong {
                    errors[j] += 1;
                }
            }
        }
        done += count as u64;
        if let Some(target) = stop_at_errors {
            if errors.iter().all(|&e| e >= target) {
                break;
            }
        }
    }
    let _ = k;
    Ok(BlerEstimate::from_counts(
        snr_db,
        cfg.code.t,
        cfg.sum_rate(),
        done,
        errors,
    ))
}

/// Closed-form block error rate of uncoded bipolar signaling over a
/// single-user AWGN channel: `1 - (1 - Q(1/σ))^k`.
pub fn uncoded_bler_oracle(k: usize, snr_db: f64) -> f64 {
    let sigma = snr_to_sigma2(snr_db).sqrt();
    if sigma == 0.0 {
        return 0.0;
    }
    1.0 - (1.0 - q_function(1.0 / sigma)).powi(k as i32)
}

/// Monte Carlo BLER of the uncoded plug-in encoder, mirroring the episode
/// and seed structure of [`estimate_bler`] so the harness can be validated
/// against [`uncoded_bler_oracle`].
pub fn estimate_bler_uncoded(k: usize, snr_db: f64, trials: u64, seed: u64) -> Result<BlerEstimate> {
    if trials == 0 || k == 0 {
        return Err(Error::Contract("trials and k must be positive".into()));
    }
    let sigma2 = snr_to_sigma2(snr_db);
    let mut errors = 0u64;
    for ep in 0..trials {
        let mut msg_rng = derive_rng(seed, "message", ep);
        let mut noise_rng = derive_rng(seed, "noise", ep);
        let bits: Vec<u8> = (0..k).map(|_| msg_rng.gen_range(0..=1u8)).collect();
        let noise = awgn_noise(&mut noise_rng, sigma2, k);
        let wrong = bits.iter().zip(&noise).any(|(&b, &n)| {
            let y = crate::bits::bipolar::<f64>(b) + n;
            (y > 0.0) != (b == 1)
        });
        if wrong {
            errors += 1;
        }
    }
    Ok(BlerEstimate::from_counts(snr_db, 0, 1.0, trials, vec![errors]))
}

fn accumulate_raw_moments<T: Scalar>(
    model: &MbafModel<T>,
    episodes: usize,
    phase: Phase,
    sigma2: f64,
    seed: u64,
    pass: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let cfg = &model.config;
    let users = cfg.num_users();
    let t = cfg.code.t;
    let chunk_size = cfg.eval.chunk.max(1);
    let mut count = vec![vec![0u64; t]; users];
    let mut sum = vec![vec![0.0f64; t]; users];
    let mut sumsq = vec![vec![0.0f64; t]; users];
    let mut msg_rng = derive_rng(seed, "calibrate-messages", pass);
    let mut noise_rng = derive_rng(seed, "calibrate-noise", pass);
    let mut done = 0usize;
    while done < episodes {
        let n = chunk_size.min(episodes - done);
        let msgs = crate::rollout::draw_messages(&mut msg_rng, users, cfg.code.k, n);
        let mut noise = NoiseSource::shared(noise_rng.clone());
        let mut g = Graph::new();
        let ro = build_rollout(&mut g, model, &msgs, &mut noise, sigma2, phase, false)?;
        noise_rng = noise.into_shared_rng().expect("shared source");
        for j in 0..users {
            for round in 0..t {
                let raw = g.value(ro.raw_symbols[j][round]);
                for &v in raw.iter() {
                    let v = v.as_f64();
                    count[j][round] += 1;
                    sum[j][round] += v;
                    sumsq[j][round] += v * v;
                }
            }
        }
        done += n;
    }
    Ok((0..users)
        .map(|j| {
            (0..t)
                .map(|r| {
                    let n = count[j][r] as f64;
                    let mean = sum[j][r] / n;
                    (mean, (sumsq[j][r] / n - mean * mean).max(0.0))
                })
                .collect()
        })
        .collect())
}

/// Measures raw parity-output moments and installs them as the frozen
/// normalization statistics. The first pass standardizes with batch
/// statistics (so an uncalibrated model works); each refinement pass
/// re-measures under the previously installed statistics, converging to
/// the self-consistent operating point.
pub fn calibrate_power<T: Scalar>(
    model: &mut MbafModel<T>,
    episodes: usize,
    refine_passes: usize,
    snr_db: f64,
    seed: u64,
) -> Result<()> {
    if episodes == 0 {
        return Err(Error::Contract("calibration needs at least one episode".into()));
    }
    let sigma2 = snr_to_sigma2(snr_db);
    let stats = accumulate_raw_moments(model, episodes, Phase::Train, sigma2, seed, 0)?;
    for (j, per_user) in stats.iter().enumerate() {
        model.power[j].assign(per_user)?;
    }
    for pass in 1..=refine_passes {
        let stats =
            accumulate_raw_moments(model, episodes, Phase::Eval, sigma2, seed, pass as u64)?;
        for (j, per_user) in stats.iter().enumerate() {
            model.power[j].assign(per_user)?;
        }
    }
    Ok(())
}

/// Per-user average transmitted power (mean squared symbol) measured over
/// evaluation episodes.
pub fn measure_power<T: Scalar>(
    model: &MbafModel<T>,
    episodes: usize,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::Contract("power audit needs at least one episode".into()));
    }
    let cfg = &model.config;
    let users = cfg.num_users();
    let sigma2 = snr_to_sigma2(snr_db);
    let chunk_size = cfg.eval.chunk.max(1);
    let mut sumsq = vec![0.0f64; users];
    let mut count = vec![0u64; users];
    let mut done = 0usize;
    while done < episodes {
        let n = chunk_size.min(episodes - done);
        let msgs = episode_messages(cfg, seed, done as u64, n);
        let mut noise = episode_noise(seed, done as u64, n);
        let mut g = Graph::new();
        let ro = build_rollout(&mut g, model, &msgs, &mut noise, sigma2, Phase::Eval, false)?;
        for j in 0..users {
            for round in 0..cfg.code.t {
                let c = g.value(ro.symbols[j][round]);
                for &v in c.iter() {
                    sumsq[j] += v.as_f64() * v.as_f64();
                    count[j] += 1;
                }
            }
        }
        done += n;
    }
    Ok(sumsq
        .iter()
        .zip(&count)
        .map(|(&s, &n)| s / n as f64)
        .collect())
}

/// Evaluates the time-division baseline: a single-user model covering
/// `t / 2` rounds per user at 3 dB higher forward SNR (half the channel
/// uses, twice the energy per use). Both users' runs use independently
/// derived seeds; the reported estimate is their pooled average at the
/// nominal `snr_db`.
pub fn tdma_baseline<T: Scalar>(
    checkpoint: &Path,
    snr_db: f64,
    t: usize,
    k: usize,
    trials: u64,
    seed: u64,
    stop_at_errors: Option<u64>,
) -> Result<BlerEstimate> {
    if t % 2 != 0 {
        return Err(Error::Config(format!(
            "time division needs an even round count, got {t}"
        )));
    }
    let (model, _) = crate::checkpoint::load::<T>(checkpoint)?;
    let cfg = &model.config;
    if cfg.mode != Mode::SingleUser {
        return Err(Error::Config("time-division checkpoint must be a single-user model".into()));
    }
    if cfg.code.t != t / 2 {
        return Err(Error::Config(format!(
            "single-user model covers {} rounds, expected {}",
            cfg.code.t,
            t / 2
        )));
    }
    if cfg.code.k != k {
        return Err(Error::Config(format!(
            "single-user model carries {} bits, expected {k}",
            cfg.code.k
        )));
    }
    let boosted = snr_db + 3.0;
    let a = estimate_bler(&model, boosted, trials, derive_subseed(seed, "tdma-user", 0), stop_at_errors)?;
    let b = estimate_bler(&model, boosted, trials, derive_subseed(seed, "tdma-user", 1), stop_at_errors)?;
    let rate = 2.0 * k as f64 / (t * cfg.code.l) as f64;
    let total_trials = a.trials + b.trials;
    let errors = vec![a.errors[0], b.errors[0]];
    let total: u64 = errors.iter().sum();
    let (ci_low, ci_high) = wilson_interval(total, total_trials, WILSON_Z);
    Ok(BlerEstimate {
        snr_db,
        t,
        rate,
        trials: total_trials / 2,
        errors,
        bler: total as f64 / total_trials as f64,
        ci_low,
        ci_high,
    })
}

/// One reference-curve sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub snr_db: f64,
    pub t: usize,
    /// Blocklength `t * l`.
    pub n: usize,
    pub normal_approx_rate: f64,
    pub sum_capacity: f64,
}

/// Reference curves over the configured SNR sweep: for each round count in
/// `bounds.t_list`, the finite-blocklength rate at `n = t * l` for a super
/// user of total power 2, plus the sum capacity.
pub fn compute_bounds(cfg: &ExperimentConfig) -> Result<Vec<BoundsRow>> {
    let b = &cfg.bounds;
    if !(b.snr_db_step > 0.0) {
        return Err(Error::Config(format!(
            "SNR step must be positive, got {}",
            b.snr_db_step
        )));
    }
    if b.t_list.is_empty() {
        return Err(Error::Config("bounds need at least one round count".into()));
    }
    let mut rows = Vec::new();
    let mut i = 0usize;
    loop {
        let snr_db = b.snr_db_min + i as f64 * b.snr_db_step;
        if snr_db > b.snr_db_max + 1e-9 {
            break;
        }
        let s_total = 2.0 / snr_to_sigma2(snr_db);
        let capacity = mac_sum_capacity(s_total)?;
        for &t in &b.t_list {
            let n = t * cfg.code.l;
            rows.push(BoundsRow {
                snr_db,
                t,
                n,
                normal_approx_rate: normal_approx_rate(n, s_total, b.epsilon)?,
                sum_capacity: capacity,
            });
        }
        i += 1;
    }
    Ok(rows)
}

pub const ESTIMATES_CSV_HEADER: &str = "snr_db,t,rate,bler,ci_low,ci_high,trials";
pub const BOUNDS_CSV_HEADER: &str = "snr_db,t,n,normal_approx_rate,sum_capacity";

/// Writes BLER estimates as CSV, sorted by `(snr_db, rate)`.
pub fn write_estimates_csv(path: &Path, estimates: &[BlerEstimate]) -> Result<()> {
    let mut rows: Vec<&BlerEstimate> = estimates.iter().collect();
    rows.sort_by(|a, b| {
        a.snr_db
            .total_cmp(&b.snr_db)
            .then(a.rate.total_cmp(&b.rate))
    });
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{ESTIMATES_CSV_HEADER}")?;
    for e in rows {
        writeln!(
            w,
            "{},{},{},{:e},{:e},{:e},{}",
            e.snr_db, e.t, e.rate, e.bler, e.ci_low, e.ci_high, e.trials
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes reference curves as CSV, sorted by `(snr_db, n)`.
pub fn write_bounds_csv(path: &Path, rows: &[BoundsRow]) -> Result<()> {
    let mut sorted: Vec<&BoundsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db).then(a.n.cmp(&b.n)));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{BOUNDS_CSV_HEADER}")?;
    for r in sorted {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.snr_db, r.t, r.n, r.normal_approx_rate, r.sum_capacity
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Companion path for the reference curves next to a results file.
pub fn bounds_companion_path(path: &Path) -> PathBuf {
    path.with_extension("bounds.csv")
}

/// Writes the estimates CSV at `path` and the reference curves at the
/// companion path.
pub fn emit_results(estimates: &[BlerEstimate], bounds: &[BoundsRow], path: &Path) -> Result<()> {
    if estimates.is_empty() || bounds.is_empty() {
        return Err(Error::Contract("nothing to emit".into()));
    }
    write_estimates_csv(path, estimates)?;
    write_bounds_csv(&bounds_companion_path(path), bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use tempfile::tempdir;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.code.k = 6;
        cfg.code.m = 2;
        cfg.code.l = 3;
        cfg.code.t = 3;
        cfg.code.n_iter = 1;
        cfg.model.d_model = 8;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 16;
        cfg.eval.chunk = 64;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn q_function_and_inverse() {
        assert!((q_function(1.0) - 0.15865525393145705).abs() < 1e-15);
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        assert!((q_inv(1e-6).unwrap() - 4.753424308822899).abs() < 1e-9);
        assert!(q_inv(0.5).unwrap().abs() < 1e-11);
        for &p in &[1e-9, 1e-6, 1e-3, 0.1, 0.5, 0.9] {
            assert!((q_function(q_inv(p).unwrap()) - p).abs() < 1e-12 * p.max(1e-3));
        }
        assert!(q_inv(0.0).is_err());
        assert!(q_inv(1.0).is_err());
    }

    #[test]
    fn capacity_pins_and_monotonicity() {
        assert!((mac_sum_capacity(2.0).unwrap() - 0.7924812503605781).abs() < 1e-12);
        assert!(mac_sum_capacity(1e-12).unwrap() < 1e-11);
        let mut prev = 0.0;
        for i in 1..100 {
            let c = mac_sum_capacity(i as f64 * 0.1).unwrap();
            assert!(c > prev);
            prev = c;
        }
        assert!(mac_sum_capacity(0.0).is_err());
        assert!(mac_sum_capacity(-1.0).is_err());
    }

    #[test]
    fn normal_approx_golden_and_limits() {
        let r = normal_approx_rate(136, 2.0, 1e-6).unwrap();
        assert!((r - 0.42650710071572605).abs() < 1e-9, "got {r}");
        // Median epsilon removes the dispersion term.
        let c = mac_sum_capacity(2.0).unwrap();
        let median = normal_approx_rate(136, 2.0, 0.5).unwrap();
        let log_corr = (136f64).log2() / 272.0;
        assert!((median - (c + log_corr)).abs() < 1e-9);
        // Large blocklength approaches capacity.
        let big = normal_approx_rate(100_000_000, 2.0, 1e-6).unwrap();
        assert!((big - c).abs() < 1e-3);
        assert!(normal_approx_rate(0, 2.0, 0.5).is_err());
        assert!(normal_approx_rate(10, 2.0, 0.0).is_err());
        assert!(normal_approx_rate(10, -1.0, 0.5).is_err());
    }

    #[test]
    fn bound_stays_below_capacity_on_sweep() {
        let mut snr_db = -1.0;
        while snr_db <= 1.0 + 1e-9 {
            let s = 2.0 / snr_to_sigma2(snr_db);
            let cap = mac_sum_capacity(s).unwrap();
            let fin = normal_approx_rate(136, s, 1e-6).unwrap();
            assert!(fin < cap, "at {snr_db} dB: {fin} !< {cap}");
            snr_db += 0.1;
        }
    }

    #[test]
    fn wilson_brackets_the_point_estimate() {
        let (lo, hi) = wilson_interval(10, 100, WILSON_Z);
        assert!(lo < 0.1 && 0.1 < hi);
        assert!(lo > 0.0 && hi < 1.0);
        let (lo, hi) = wilson_interval(0, 100, WILSON_Z);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.06);
        let (lo, hi) = wilson_interval(0, 0, WILSON_Z);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn bler_counts_match_the_per_user_average() {
        let est = BlerEstimate::from_counts(0.0, 3, 1.0, 10, vec![3, 5]);
        assert!((est.bler - 0.4).abs() < 1e-15);
        assert!((est.bler - 0.5 * (0.3 + 0.5)).abs() < 1e-15);
        assert!(est.ci_low < est.bler && est.bler < est.ci_high);
    }

    #[test]
    fn uncoded_oracle_pins() {
        assert!((uncoded_bler_oracle(1, 0.0) - 0.15865525393145705).abs() < 1e-12);
        assert!((uncoded_bler_oracle(51, 0.0) - 0.9998508327995064).abs() < 1e-12);
        assert!(uncoded_bler_oracle(51, 200.0) < 1e-15);
    }

    #[test]
    fn uncoded_monte_carlo_matches_oracle() {
        let est = estimate_bler_uncoded(51, 0.0, 100_000, 77).unwrap();
        let oracle = uncoded_bler_oracle(51, 0.0);
        let half_width = (est.ci_high - est.ci_low) / 2.0;
        assert!(
            (est.bler - oracle).abs() <= 3.0 * half_width,
            "estimate {} vs oracle {oracle} (half width {half_width})",
            est.bler
        );
    }

    #[test]
    fn calibration_reaches_unit_power() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        calibrate_power(&mut model, 1024, cfg.code.t, 2.0, 99).unwrap();
        // Fresh episodes, so the measurement carries ~3% sampling noise on
        // top of the calibration's own estimate.
        let power = measure_power(&model, 1024, 2.0, 100).unwrap();
        for (j, p) in power.iter().enumerate() {
            assert!((p - 1.0).abs() < 0.08, "user {j} power {p}");
        }
    }

    #[test]
    fn untrained_model_has_chance_level_bler() {
        let cfg = ExperimentConfig::desk();
        let mut model: MbafModel<f64> = MbafModel::init(cfg).unwrap();
        calibrate_power(&mut model, 256, 1, 2.0, 5).unwrap();
        let est = estimate_bler(&model, 2.0, 400, 6, None).unwrap();
        assert!(est.bler >= 0.99, "untrained bler {}", est.bler);
    }

    #[test]
    fn identical_seeds_identical_estimates() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        calibrate_power(&mut model, 128, 1, 2.0, 7).unwrap();
        let a = estimate_bler(&model, 1.0, 300, 42, None).unwrap();
        let b = estimate_bler(&model, 1.0, 300, 42, None).unwrap();
        assert_eq!(a, b);
        // Chunk size must not change which noise an episode sees.
        let mut model2 = model.clone();
        model2.config.eval.chunk = 17;
        let c = estimate_bler(&model2, 1.0, 300, 42, None).unwrap();
        assert_eq!(a.errors, c.errors);
    }

    #[test]
    fn early_stop_caps_trials() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        calibrate_power(&mut model, 128, 1, 2.0, 8).unwrap();
        // Untrained: nearly every episode errs, so one chunk suffices.
        let est = estimate_bler(&model, 1.0, 100_000, 43, Some(10)).unwrap();
        assert!(est.trials <= 2 * cfg.eval.chunk as u64);
        assert!(est.errors.iter().all(|&e| e >= 10));
    }

    #[test]
    fn tdma_energy_accounting() {
        // Half the channel uses at twice the energy per use: the 3 dB boost
        // makes per-user energy 10^{0.3}/2 of the two-user scheme's.
        let ratio = 10f64.powf(0.3) / 2.0;
        assert!((ratio - 1.0).abs() < 0.05, "energy ratio {ratio}");
    }

    #[test]
    fn csv_emission_and_ordering() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let estimates = vec![
            BlerEstimate::from_counts(1.0, 3, 0.67, 100, vec![5, 7]),
            BlerEstimate::from_counts(-1.0, 3, 0.67, 100, vec![50, 60]),
        ];
        let bounds = vec![
            BoundsRow {
                snr_db: 0.0,
                t: 3,
                n: 9,
                normal_approx_rate: 0.4,
                sum_capacity: 0.8,
            },
        ];
        emit_results(&estimates, &bounds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ESTIMATES_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        // Sorted by SNR: the -1 dB row first.
        assert!(lines[1].starts_with("-1,"));
        assert!(lines[1].contains("e-1") || lines[1].contains("e0"));
        let companion = bounds_companion_path(&path);
        let btext = std::fs::read_to_string(&companion).unwrap();
        assert_eq!(btext.lines().next(), Some(BOUNDS_CSV_HEADER));
        assert_eq!(btext.lines().count(), 2);
        assert!(emit_results(&[], &bounds, &path).is_err());
    }

    #[test]
    fn bounds_sweep_shape() {
        let mut cfg = tiny_config();
        cfg.bounds.snr_db_min = -1.0;
        cfg.bounds.snr_db_max = 1.0;
        cfg.bounds.snr_db_step = 0.1;
        cfg.bounds.t_list = vec![3];
        let rows = compute_bounds(&cfg).unwrap();
        assert_eq!(rows.len(), 21);
        for w in rows.windows(2) {
            assert!(w[1].sum_capacity > w[0].sum_capacity);
        }
        assert!(rows.iter().all(|r| r.n == 9));
    }
}
