//! Per-user parity encoding as an explicit interaction protocol: build the
//! knowledge vectors for the current round, emit one symbol per block, then
//! ingest the broadcast channel output before the next round.

use crate::bits::bipolar;
use crate::channel::{transmit, EpisodeTrace};
use crate::decoder::{decode, DecodingResult};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::MbafModel;
use crate::nn::{forward_features, forward_head, forward_s2s, register, NetworkParams, PowerNormState};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// One transmitter's view of an episode: its message blocks plus everything
/// it has sent and heard so far.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    user: usize,
    /// Bipolar message bits, one row per block.
    blocks: Array2<T>,
    /// Symbols sent so far, one `l`-vector per completed round.
    sent: Vec<Vec<T>>,
    /// Residual feedback heard so far, one `l`-vector per completed round.
    residuals: Vec<Vec<T>>,
}

impl<T: Scalar> EncoderState<T> {
    /// Starts an episode from raw message bits (length a multiple of `m`).
    pub fn new(user: usize, message: &[u8], m: usize) -> Result<Self> {
        if m == 0 || message.is_empty() || message.len() % m != 0 {
            return Err(Error::Contract(format!(
                "message length {} is not a positive multiple of m={m}",
                message.len()
            )));
        }
        if let Some(&b) = message.iter().find(|&&b| b > 1) {
            return Err(Error::Domain(format!("message entries must be 0 or 1, got {b}")));
        }
        let l = message.len() / m;
        let mut blocks = Array2::zeros((l, m));
        for i in 0..l {
            for q in 0..m {
                blocks[(i, q)] = bipolar(message[i * m + q]);
            }
        }
        Ok(EncoderState {
            user,
            blocks,
            sent: Vec::new(),
            residuals: Vec::new(),
        })
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.nrows()
    }

    /// Current round, 1-based: one more than the number of completed rounds.
    pub fn round(&self) -> usize {
        self.sent.len() + 1
    }
}

/// Assembles the fixed-width knowledge vectors for the current round: per
/// block, `[bipolar bits, sent symbols, residual feedback, zero padding]`,
/// always `m + 2(t - 1)` wide.
pub fn build_knowledge_vectors<T: Scalar>(
    state: &EncoderState<T>,
    t: usize,
) -> Result<Array2<T>> {
    let l = state.num_blocks();
    let m = state.blocks.ncols();
    let tau = state.round();
    if state.sent.len() != state.residuals.len() {
        return Err(Error::State(format!(
            "{} sent rounds but {} feedback rounds",
            state.sent.len(),
            state.residuals.len()
        )));
    }
    if tau > t {
        return Err(Error::State(format!("round {tau} exceeds horizon {t}")));
    }
    if state
        .sent
        .iter()
        .chain(state.residuals.iter())
        .any(|v| v.len() != l)
    {
        return Err(Error::State("history block count drifted".into()));
    }
    let width = m + 2 * (t - 1);
    let mut q = Array2::zeros((l, width));
    for i in 0..l {
        let mut col = 0;
        for b in 0..m {
            q[(i, col)] = state.blocks[(i, b)];
            col += 1;
        }
        for round in &state.sent {
            q[(i, col)] = round[i];
            col += 1;
        }
        for round in &state.residuals {
            q[(i, col)] = round[i];
            col += 1;
        }
    }
    Ok(q)
}

/// Emits this round's symbol block without normalization. Pure: the state
/// is unchanged; call [`ingest_feedback`] to advance.
pub fn encode_round_raw<T: Scalar>(
    params: &NetworkParams<T>,
    state: &EncoderState<T>,
    t: usize,
) -> Result<Vec<T>> {
    if state.round() > t {
        return Err(Error::Protocol(format!(
            "round {} exceeds horizon {t}",
            state.round()
        )));
    }
    let q = build_knowledge_vectors(state, t)?;
    let mut g: Graph<T> = Graph::new();
    let net = register(&mut g, params, false);
    let x = g.constant(q);
    let h = forward_features(&mut g, &net, x);
    let h = forward_s2s(&mut g, &net, h);
    let raw = forward_head(&mut g, &net, h);
    Ok(g.value(raw).column(0).to_vec())
}

/// Emits this round's transmitted symbols: the raw parity outputs shifted
/// and scaled by the frozen power statistics for this round.
pub fn encode_round<T: Scalar>(
    params: &NetworkParams<T>,
    power: &PowerNormState,
    state: &EncoderState<T>,
    t: usize,
) -> Result<Vec<T>> {
    let raw = encode_round_raw(params, state, t)?;
    let (mean, var) = power.frozen(state.round() - 1)?;
    // Same constant casts and operation order as the batched graph path, so
    // the two agree for every scalar type.
    let inv_std = T::from_f64(1.0 / (var + crate::graph::NORM_EPS).sqrt());
    let mean_t = T::from_f64(mean);
    Ok(raw.into_iter().map(|v| (v - mean_t) * inv_std).collect())
}

/// Records the round's broadcast output: appends the sent symbols and the
/// residual `y - own`, advancing to the next round. `round` must be the
/// state's current round; replays and skips are protocol errors.
pub fn ingest_feedback<T: Scalar>(
    state: &mut EncoderState<T>,
    round: usize,
    y: &[T],
    own: &[T],
) -> Result<()> {
    if round != state.round() {
        return Err(Error::Protocol(format!(
            "feedback for round {round} but encoder is at round {}",
            state.round()
        )));
    }
    let l = state.num_blocks();
    if y.len() != l || own.len() != l {
        return Err(Error::Contract(format!(
            "feedback lengths ({}, {}) for {l} blocks",
            y.len(),
            own.len()
        )));
    }
    let residual: Vec<T> = y.iter().zip(own).map(|(&a, &b)| a - b).collect();
    state.sent.push(own.to_vec());
    state.residuals.push(residual);
    Ok(())
}

/// Runs one full episode: `t` rounds of simultaneous encoding, channel
/// superposition, and feedback ingestion, then joint decoding. `messages`
/// holds exactly `k` bits per user.
pub fn run_episode<T: Scalar>(
    model: &MbafModel<T>,
    sigma2: f64,
    messages: &[Vec<u8>],
    rng: &mut ChaCha8Rng,
) -> Result<(EpisodeTrace<T>, DecodingResult<T>)> {
    let cfg = &model.config;
    let users = cfg.num_users();
    if messages.len() != users {
        return Err(Error::Contract(format!(
            "got messages for {} users, expected {users}",
            messages.len()
        )));
    }
    for msg in messages {
        if msg.len() != cfg.code.k {
            return Err(Error::Contract(format!(
                "message has {} bits, expected k={}",
                msg.len(),
                cfg.code.k
            )));
        }
    }
    let mut states: Vec<EncoderState<T>> = messages
        .iter()
        .enumerate()
        .map(|(j, msg)| EncoderState::new(j, msg, cfg.code.m))
        .collect::<Result<_>>()?;
    let mut trace = EpisodeTrace::new(users);
    for tau in 1..=cfg.code.t {
        let symbols: Vec<Vec<T>> = states
            .iter()
            .enumerate()
            .map(|(j, st)| {
                encode_round(model.encoder(j), &model.power[j], st, cfg.code.t)
            })
            .collect::<Result<_>>()?;
        let y = transmit(
            &symbols[0],
            symbols.get(1).map(|v| v.as_slice()),
            sigma2,
            rng,
        )?;
        if tau < cfg.code.t {
            for (j, st) in states.iter_mut().enumerate() {
                ingest_feedback(st, tau, &y, &symbols[j])?;
            }
        }
        for (j, c) in symbols.into_iter().enumerate() {
            trace.symbols[j].push(c);
        }
        trace.received.push(y);
    }
    let result = decode(model, &trace.received, cfg.code.n_iter)?;
    Ok((trace, result))
}
