//! Batched differentiable episode: all rounds of simultaneous encoding,
//! channel superposition, feedback ingestion, and iterative decoding,
//! expressed as one graph so gradients reach every parameter through the
//! feedback path.
//!
//! Episodes are laid out example-major: row `e * l + i` of every array
//! belongs to block `i` of episode `e`.

use crate::bits::{bipolar, bits_to_index};
use crate::channel::awgn_noise;
use crate::decoder::decode_iterations;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::MbafModel;
use crate::nn::{forward_features, forward_head, forward_s2s, register, NetworkNodes};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Numerical floor under probabilities entering the log loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Whether symbol statistics come from the current batch or from frozen
/// running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

enum NoiseKind {
    /// One stream for the whole batch, drawn round-major.
    Shared(ChaCha8Rng),
    /// One stream per episode, so episode `e` sees the same noise it would
    /// see when run alone.
    PerEpisode(Vec<ChaCha8Rng>),
    /// Pre-drawn noise, one `(batch * l, 1)` array per round.
    Fixed(Vec<Array2<f64>>),
}

/// Source of channel noise for one rollout; draws are consumed round by
/// round.
pub struct NoiseSource {
    kind: NoiseKind,
    round: usize,
}

impl NoiseSource {
    pub fn shared(rng: ChaCha8Rng) -> Self {
        NoiseSource {
            kind: NoiseKind::Shared(rng),
            round: 0,
        }
    }

    pub fn per_episode(rngs: Vec<ChaCha8Rng>) -> Self {
        NoiseSource {
            kind: NoiseKind::PerEpisode(rngs),
            round: 0,
        }
    }

    pub fn fixed(rounds: Vec<Array2<f64>>) -> Self {
        NoiseSource {
            kind: NoiseKind::Fixed(rounds),
            round: 0,
        }
    }

    /// Recovers the shared stream with its post-rollout position, so a
    /// caller can keep drawing from where the rollout left off.
    pub fn into_shared_rng(self) -> Option<ChaCha8Rng> {
        match self.kind {
            NoiseKind::Shared(rng) => Some(rng),
            _ => None,
        }
    }

    fn draw_round(&mut self, batch: usize, l: usize, sigma2: f64) -> Result<Array2<f64>> {
        let rows = batch * l;
        let out = match &mut self.kind {
            NoiseKind::Shared(rng) => {
                Array2::from_shape_vec((rows, 1), awgn_noise(rng, sigma2, rows))
                    .expect("shape matches draw count")
            }
            NoiseKind::PerEpisode(rngs) => {
                if rngs.len() != batch {
                    return Err(Error::Contract(format!(
                        "{} episode streams for batch of {batch}",
                        rngs.len()
                    )));
                }
                let mut arr = Array2::zeros((rows, 1));
                for (e, rng) in rngs.iter_mut().enumerate() {
                    for (i, v) in awgn_noise(rng, sigma2, l).into_iter().enumerate() {
                        arr[(e * l + i, 0)] = v;
                    }
                }
                arr
            }
            NoiseKind::Fixed(rounds) => {
                let arr = rounds.get(self.round).ok_or_else(|| {
                    Error::Contract(format!("fixed noise exhausted at round {}", self.round))
                })?;
                if arr.dim() != (rows, 1) {
                    return Err(Error::Contract(format!(
                        "fixed noise round {} has shape {:?}, expected ({rows}, 1)",
                        self.round,
                        arr.dim()
                    )));
                }
                arr.clone()
            }
        };
        self.round += 1;
        Ok(out)
    }
}

/// Handles into a built rollout graph.
pub struct Rollout {
    /// Parameter leaves in the model's `visit_params` order.
    pub param_nodes: Vec<NodeId>,
    /// Mean episode loss per user, a `(1, 1)` node.
    pub loss: NodeId,
    /// Final-iteration class probabilities per user, `(batch * l, 2^m)`.
    pub probs: Vec<NodeId>,
    /// Parity outputs before power normalization, per user per round.
    pub raw_symbols: Vec<Vec<NodeId>>,
    /// Transmitted symbols after power normalization, per user per round.
    pub symbols: Vec<Vec<NodeId>>,
    /// Channel outputs per round, `(batch * l, 1)`.
    pub received: Vec<NodeId>,
    /// Per-user per-round batch statistics (train phase only).
    pub batch_stats: Vec<Vec<(f64, f64)>>,
    /// Block labels per user, one per row.
    pub labels: Vec<Vec<usize>>,
    pub batch: usize,
}

/// Builds the full differentiable episode for a batch of messages.
///
/// `messages[j]` holds user `j`'s bits for all episodes back to back. With
/// `trainable`, parameters become differentiable leaves; pass `false` for
/// pure evaluation.
pub fn build_rollout<T: Scalar>(
    g: &mut Graph<T>,
    model: &MbafModel<T>,
    messages: &[Vec<u8>],
    noise: &mut NoiseSource,
    sigma2: f64,
    phase: Phase,
    trainable: bool,
) -> Result<Rollout> {
    let cfg = &model.config;
    let (k, m, l, t) = (cfg.code.k, cfg.code.m, cfg.code.l, cfg.code.t);
    let users = cfg.num_users();
    if messages.len() != users {
        return Err(Error::Contract(format!(
            "got messages for {} users, expected {users}",
            messages.len()
        )));
    }
    if messages[0].is_empty() || messages[0].len() % k != 0 {
        return Err(Error::Contract(format!(
            "message stream length {} is not a positive multiple of k={k}",
            messages[0].len()
        )));
    }
    let batch = messages[0].len() / k;
    if messages.iter().any(|ms| ms.len() != batch * k) {
        return Err(Error::Contract("users have unequal message counts".into()));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!(
            "noise variance must be finite and nonnegative, got {sigma2}"
        )));
    }
    let rows = batch * l;

    // Parameters, in visit order: encoders then decoder.
    let mut param_nodes = Vec::new();
    let enc_nodes: Vec<NetworkNodes> = model
        .encoders
        .iter()
        .map(|enc| {
            let nodes = register(g, enc, trainable);
            param_nodes.extend_from_slice(&nodes.flat);
            nodes
        })
        .collect();
    let dec_nodes = register(g, &model.decoder, trainable);
    param_nodes.extend_from_slice(&dec_nodes.flat);
    let user_enc: Vec<&NetworkNodes> = (0..users)
        .map(|j| &enc_nodes[model.encoder_index(j)])
        .collect();

    // Message constants and labels, example-major.
    let mut bit_nodes = Vec::with_capacity(users);
    let mut labels = Vec::with_capacity(users);
    for msg in messages {
        if let Some(&b) = msg.iter().find(|&&b| b > 1) {
            return Err(Error::Domain(format!("message entries must be 0 or 1, got {b}")));
        }
        let mut bip = Array2::zeros((rows, m));
        let mut labs = Vec::with_capacity(rows);
        for e in 0..batch {
            for i in 0..l {
                let block = &msg[e * k + i * m..e * k + (i + 1) * m];
                labs.push(bits_to_index(block));
                for (q, &bit) in block.iter().enumerate() {
                    bip[(e * l + i, q)] = bipolar::<T>(bit);
                }
            }
        }
        bit_nodes.push(g.constant(bip));
        labels.push(labs);
    }

    let mut zero_cache: HashMap<usize, NodeId> = HashMap::new();
    let mut zeros = |g: &mut Graph<T>, width: usize| {
        *zero_cache
            .entry(width)
            .or_insert_with(|| g.constant(Array2::zeros((rows, width))))
    };

    // Interaction rounds.
    let mut raw_symbols: Vec<Vec<NodeId>> = vec![Vec::with_capacity(t); users];
    let mut symbols: Vec<Vec<NodeId>> = vec![Vec::with_capacity(t); users];
    let mut residuals: Vec<Vec<NodeId>> = vec![Vec::with_capacity(t); users];
    let mut received = Vec::with_capacity(t);
    let mut batch_stats: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(t); users];
    for tau in 1..=t {
        for j in 0..users {
            let mut parts = vec![bit_nodes[j]];
            parts.extend_from_slice(&symbols[j]);
            parts.extend_from_slice(&residuals[j]);
            let pad = 2 * (t - tau);
            if pad > 0 {
                parts.push(zeros(g, pad));
            }
            let x = g.concat_cols(&parts);
            let h = forward_features(g, user_enc[j], x);
            let h = forward_s2s(g, user_enc[j], h);
            let raw = forward_head(g, user_enc[j], h);
            let c = match phase {
                Phase::Train => {
                    let c = g.batch_standardize(raw);
                    batch_stats[j].push(g.standardize_stats(c).expect("standardize node"));
                    c
                }
                Phase::Eval => {
                    let (mean, var) = model.power[j].frozen(tau - 1)?;
                    g.normalize_fixed(raw, mean, var)
                }
            };
            raw_symbols[j].push(raw);
            symbols[j].push(c);
        }
        let mut superposed = symbols[0][tau - 1];
        for j in 1..users {
            superposed = g.add(superposed, symbols[j][tau - 1]);
        }
        let noise_arr = noise.draw_round(batch, l, sigma2)?;
        let n = g.constant(noise_arr.mapv(T::from_f64));
        let y = g.add(superposed, n);
        received.push(y);
        if tau < t {
            for j in 0..users {
                let r = g.sub(y, symbols[j][tau - 1]);
                residuals[j].push(r);
            }
        }
    }

    // Joint successive decoding with belief refinement.
    let probs = decode_iterations(g, &dec_nodes, &received, users, m, cfg.code.n_iter)?;

    // Mean episode loss per user.
    let floor = T::from_f64(LOSS_FLOOR);
    let mut total = None;
    for j in 0..users {
        let nll = g.nll_sum(probs[j], &labels[j], floor);
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll),
        });
    }
    let loss = g.scale(
        total.expect("at least one user"),
        T::from_f64(1.0 / (users * batch) as f64),
    );

    Ok(Rollout {
        param_nodes,
        loss,
        probs,
        raw_symbols,
        symbols,
        received,
        batch_stats,
        labels,
        batch,
    })
}

/// Draws i.i.d. message bits for every user: per episode, user streams are
/// contiguous `k`-bit runs.
pub fn draw_messages(rng: &mut ChaCha8Rng, users: usize, k: usize, batch: usize) -> Vec<Vec<u8>> {
    use rand::Rng;
    let mut msgs = vec![Vec::with_capacity(batch * k); users];
    for _ in 0..batch {
        for msg in msgs.iter_mut() {
            for _ in 0..k {
                msg.push(rng.gen_range(0..=1u8));
            }
        }
    }
    msgs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::rng::derive_rng;

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
        cfg.validate().unwrap();
        cfg
    }

    fn messages_for(cfg: &ExperimentConfig, batch: usize, tag: u64) -> Vec<Vec<u8>> {
        let mut rng = derive_rng(11, "rollout-msg", tag);
        draw_messages(&mut rng, cfg.num_users(), cfg.code.k, batch)
    }

    #[test]
    fn shapes_and_probability_contracts() {
        let cfg = tiny_config();
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 4, 0);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 0));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Train, false).unwrap();
        assert_eq!(ro.batch, 4);
        assert_eq!(ro.received.len(), 3);
        for j in 0..2 {
            assert_eq!(ro.symbols[j].len(), 3);
            assert_eq!(g.value(ro.symbols[j][0]).dim(), (12, 1));
            assert_eq!(g.value(ro.probs[j]).dim(), (12, 4));
            for r in 0..12 {
                let s: f64 = (0..4).map(|c| g.value(ro.probs[j])[(r, c)]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            assert_eq!(ro.batch_stats[j].len(), 3);
        }
        assert_eq!(g.value(ro.loss).dim(), (1, 1));
        assert!(g.value(ro.loss)[(0, 0)] > 0.0);
    }

    #[test]
    fn train_phase_symbols_are_standardized() {
        let cfg = tiny_config();
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 64, 1);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 1));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 0.5, Phase::Train, false).unwrap();
        for j in 0..2 {
            for tau in 0..3 {
                let v = g.value(ro.symbols[j][tau]);
                let n = v.len() as f64;
                let mean: f64 = v.iter().sum::<f64>() / n;
                let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-10, "round {tau} mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "round {tau} variance {var}");
            }
        }
    }

    #[test]
    fn eval_requires_calibration() {
        let cfg = tiny_config();
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 2, 2);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 2));
        let err = build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Eval, false);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn eval_uses_frozen_statistics() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        for p in &mut model.power {
            p.assign(&[(0.2, 1.5), (0.0, 1.0), (-0.1, 0.8)]).unwrap();
        }
        let msgs = messages_for(&cfg, 2, 3);
        let build = |model: &MbafModel<f64>| {
            let mut g = Graph::new();
            let mut noise = NoiseSource::per_episode(vec![
                derive_rng(11, "ep-noise", 0),
                derive_rng(11, "ep-noise", 1),
            ]);
            let ro =
                build_rollout(&mut g, model, &msgs, &mut noise, 1.0, Phase::Eval, false).unwrap();
            (g.value(ro.symbols[0][0]).clone(), g.value(ro.probs[0]).clone())
        };
        let (sym_a, probs_a) = build(&model);
        let (sym_b, probs_b) = build(&model);
        assert_eq!(sym_a, sym_b);
        assert_eq!(probs_a, probs_b);
    }

    #[test]
    fn zeroed_decoder_head_gives_uniform_loss() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        model.decoder.head.w.fill(0.0);
        model.decoder.head.b.fill(0.0);
        let msgs = messages_for(&cfg, 8, 4);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 4));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Train, false).unwrap();
        // Uniform probabilities: loss per user per episode is l·m·ln 2.
        let expected = 3.0 * 2.0 * std::f64::consts::LN_2;
        assert!((g.value(ro.loss)[(0, 0)] - expected).abs() < 1e-10);
    }

    #[test]
    fn gradients_reach_all_networks_and_round_one() {
        let cfg = tiny_config();
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 2, 5);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 5));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Train, true).unwrap();
        g.backward(ro.loss).unwrap();

        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names.len(), ro.param_nodes.len());
        for group in ["encoder0.", "encoder1.", "decoder."] {
            let nonzero = names
                .iter()
                .zip(&ro.param_nodes)
                .filter(|(n, _)| n.starts_with(group))
                .any(|(_, &id)| g.grad(id).unwrap().iter().any(|&v| v != 0.0));
            assert!(nonzero, "no gradient reached {group}");
        }
        // Feedback path: the loss is sensitive to round-1 symbols.
        for j in 0..2 {
            let raw = ro.raw_symbols[j][0];
            assert!(g.grad(raw).unwrap().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn noise_perturbation_respects_causality() {
        let cfg = tiny_config();
        let mut model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        for p in &mut model.power {
            p.assign(&[(0.0, 1.0); 3]).unwrap();
        }
        let msgs = messages_for(&cfg, 2, 6);
        let rows = 2 * cfg.code.l;
        let mut rng = derive_rng(11, "fixed-noise", 0);
        let rounds: Vec<Array2<f64>> = (0..3)
            .map(|_| {
                Array2::from_shape_vec((rows, 1), awgn_noise(&mut rng, 1.0, rows)).unwrap()
            })
            .collect();
        let run = |rounds: Vec<Array2<f64>>| {
            let mut g = Graph::new();
            let mut noise = NoiseSource::fixed(rounds);
            let ro =
                build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Eval, false).unwrap();
            let syms: Vec<Vec<Array2<f64>>> = ro
                .symbols
                .iter()
                .map(|per_round| per_round.iter().map(|&id| g.value(id).clone()).collect())
                .collect();
            syms
        };
        let base = run(rounds.clone());
        // Perturb round-2 noise (index 1): rounds 1 and 2 symbols must be
        // unchanged, round 3 symbols must differ.
        let mut perturbed = rounds.clone();
        perturbed[1][(0, 0)] += 2.0;
        let alt = run(perturbed);
        for j in 0..2 {
            assert_eq!(base[j][0], alt[j][0], "round 1 changed");
            assert_eq!(base[j][1], alt[j][1], "round 2 changed");
            assert_ne!(base[j][2], alt[j][2], "round 3 ignored feedback");
        }
    }

    #[test]
    fn shared_parity_registers_one_encoder() {
        let mut cfg = tiny_config();
        cfg.model.shared_parity = true;
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 2, 7);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 7));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 1.0, Phase::Train, true).unwrap();
        assert_eq!(
            ro.param_nodes.len(),
            model.encoders[0].num_arrays() + model.decoder.num_arrays()
        );
        g.backward(ro.loss).unwrap();
        assert!(g
            .grad(ro.param_nodes[0])
            .unwrap()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn single_user_mode_rolls_out() {
        let mut cfg = tiny_config();
        cfg.mode = crate::config::Mode::SingleUser;
        let model: MbafModel<f64> = MbafModel::init(cfg.clone()).unwrap();
        let msgs = messages_for(&cfg, 3, 8);
        assert_eq!(msgs.len(), 1);
        let mut g = Graph::new();
        let mut noise = NoiseSource::shared(derive_rng(11, "rollout-noise", 8));
        let ro = build_rollout(&mut g, &model, &msgs, &mut noise, 0.25, Phase::Train, false).unwrap();
        assert_eq!(ro.probs.len(), 1);
        assert_eq!(ro.symbols.len(), 1);
        assert_eq!(g.value(ro.probs[0]).dim(), (9, 4));
    }

    #[test]
    fn draw_messages_layout() {
        let mut rng = derive_rng(11, "msg", 0);
        let msgs = draw_messages(&mut rng, 2, 4, 3);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].len(), 12);
        assert!(msgs.iter().flatten().all(|&b| b <= 1));
        let mut rng2 = derive_rng(11, "msg", 0);
        assert_eq!(draw_messages(&mut rng2, 2, 4, 3), msgs);
    }
}
