//! Joint successive decoding: one network maps the stacked received history
//! to both users' block posteriors, then refines them by feeding bit-wise
//! beliefs back into its own input.

use crate::bits::{index_to_bits, make_belief_matrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::MbafModel;
use crate::nn::{forward, register, NetworkNodes};
use crate::scalar::Scalar;
use ndarray::Array2;

/// Per-user posteriors, hard labels, and recovered bitstreams for one
/// episode.
#[derive(Debug, Clone)]
pub struct DecodingResult<T> {
    /// Per user: `(l, 2^m)` class probabilities from the final iteration.
    pub probs: Vec<Array2<T>>,
    /// Per user: hard block labels.
    pub labels: Vec<Vec<usize>>,
    /// Per user: concatenated decoded bits, length `l * m`.
    pub bits: Vec<Vec<u8>>,
}

/// Runs the initial decoding pass plus `n_iter` belief-refinement passes
/// inside an existing graph. `received` holds one `(rows, 1)` node per
/// round; returns per-user probability nodes of shape `(rows, 2^m)`.
///
/// Iteration 0 fills the belief slots with zeros; later iterations insert
/// `probs · Aᵀ` where column `c` of `A` is the bit pattern of class `c`.
pub fn decode_iterations<T: Scalar>(
    g: &mut Graph<T>,
    dec: &NetworkNodes,
    received: &[NodeId],
    users: usize,
    m: usize,
    n_iter: usize,
) -> Result<Vec<NodeId>> {
    if received.is_empty() {
        return Err(Error::Contract("no received rounds".into()));
    }
    let rows = g.value(received[0]).dim().0;
    let classes = 1usize << m;
    let a_t = {
        let a = make_belief_matrix(m)?;
        let mut arr = Array2::zeros((classes, m));
        for r in 0..m {
            for c in 0..classes {
                arr[(c, r)] = T::from_f64(a.matrix[(r, c)] as f64);
            }
        }
        g.constant(arr)
    };
    let zero_beliefs = g.constant(Array2::zeros((rows, m)));
    let mut probs: Vec<NodeId> = Vec::new();
    for iter in 0..=n_iter {
        let mut parts = received.to_vec();
        for j in 0..users {
            if iter == 0 {
                parts.push(zero_beliefs);
            } else {
                parts.push(g.matmul(probs[j], a_t));
            }
        }
        let x = g.concat_cols(&parts);
        let w = forward(g, dec, x);
        probs = (0..users)
            .map(|j| g.slice_cols(w, j * classes, classes))
            .collect();
    }
    Ok(probs)
}

fn received_nodes<T: Scalar>(
    g: &mut Graph<T>,
    received: &[Vec<T>],
    t: usize,
    l: usize,
) -> Result<Vec<NodeId>> {
    if received.len() != t {
        return Err(Error::Contract(format!(
            "received {} rounds, expected {t}",
            received.len()
        )));
    }
    received
        .iter()
        .map(|round| {
            if round.len() != l {
                return Err(Error::Contract(format!(
                    "received block has {} symbols, expected {l}",
                    round.len()
                )));
            }
            let col = Array2::from_shape_vec((l, 1), round.clone()).expect("length checked");
            Ok(g.constant(col))
        })
        .collect()
}

/// Decodes one episode's received history (`t` rounds of `l` symbols) with
/// `n_iter` refinement passes, then hardens to labels and bits.
pub fn decode<T: Scalar>(
    model: &MbafModel<T>,
    received: &[Vec<T>],
    n_iter: usize,
) -> Result<DecodingResult<T>> {
    let cfg = &model.config;
    let (m, l, t) = (cfg.code.m, cfg.code.l, cfg.code.t);
    let users = cfg.num_users();
    let mut g: Graph<T> = Graph::new();
    let dec = register(&mut g, &model.decoder, false);
    let y = received_nodes(&mut g, received, t, l)?;
    let prob_nodes = decode_iterations(&mut g, &dec, &y, users, m, n_iter)?;
    let probs: Vec<Array2<T>> = prob_nodes.iter().map(|&id| g.value(id).clone()).collect();
    let mut labels = Vec::with_capacity(users);
    let mut bits = Vec::with_capacity(users);
    for w in &probs {
        let (labs, bs) = harden(w, m)?;
        labels.push(labs);
        bits.push(bs);
    }
    Ok(DecodingResult { probs, labels, bits })
}

/// One belief-refinement pass on its own: rebuilds the decoder input from
/// the received history and the previous per-user probabilities.
pub fn refine_step<T: Scalar>(
    model: &MbafModel<T>,
    received: &[Vec<T>],
    prev_probs: &[Array2<T>],
) -> Result<Vec<Array2<T>>> {
    let cfg = &model.config;
    let (m, l, t) = (cfg.code.m, cfg.code.l, cfg.code.t);
    let users = cfg.num_users();
    if prev_probs.len() != users {
        return Err(Error::Contract(format!(
            "{} probability sets for {users} users",
            prev_probs.len()
        )));
    }
    let a = make_belief_matrix(m)?;
    let classes = 1usize << m;
    let mut g: Graph<T> = Graph::new();
    let dec = register(&mut g, &model.decoder, false);
    let y = received_nodes(&mut g, received, t, l)?;
    let mut parts = y;
    for w in prev_probs {
        if w.dim() != (l, classes) {
            return Err(Error::Contract(format!(
                "probabilities have shape {:?}, expected ({l}, {classes})",
                w.dim()
            )));
        }
        let mut beliefs = Array2::zeros((l, m));
        for i in 0..l {
            let row: Vec<f64> = (0..classes).map(|c| w[(i, c)].as_f64()).collect();
            for (q, b) in crate::bits::belief_from_probs(&row, &a)?.into_iter().enumerate() {
                beliefs[(i, q)] = T::from_f64(b);
            }
        }
        parts.push(g.constant(beliefs));
    }
    let x = g.concat_cols(&parts);
    let w = forward(&mut g, &dec, x);
    let mut out = Vec::with_capacity(users);
    for j in 0..users {
        let s = g.slice_cols(w, j * classes, classes);
        out.push(g.value(s).clone());
    }
    Ok(out)
}

/// Hardens per-block distributions to labels (argmax, ties to the smaller
/// index) and the corresponding big-endian bit blocks.
pub fn harden<T: Scalar>(probs: &Array2<T>, m: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let classes = 1usize << m;
    if probs.ncols() != classes {
        return Err(Error::Contract(format!(
            "{} columns for m={m}",
            probs.ncols()
        )));
    }
    let mut labels = Vec::with_capacity(probs.nrows());
    let mut bits = Vec::with_capacity(probs.nrows() * m);
    for row in probs.rows() {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        labels.push(best);
        bits.extend(index_to_bits(best, m)?);
    }
    Ok((labels, bits))
}
