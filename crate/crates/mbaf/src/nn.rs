//! Network building blocks: parameter containers, initialization, and
//! graph forward passes for the feature extractor, the sequence-to-sequence
//! encoder, and the output heads.
//!
//! The same architecture serves both the parity encoders and the decoder;
//! only the input width and the head differ. A forward pass works on a
//! batch of sequences laid out example-major: row `b * seq_len + i` is
//! block `i` of example `b`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What the network emits per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One real parity symbol per block.
    Parity,
    /// A probability vector of `classes` entries for each of `users` users,
    /// normalized independently per user.
    ClassProbs { users: usize, classes: usize },
}

impl HeadKind {
    pub fn output_width(&self) -> usize {
        match *self {
            HeadKind::Parity => 1,
            HeadKind::ClassProbs { users, classes } => users * classes,
        }
    }
}

/// Shape of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    /// Symmetric clamp applied to extracted features, in working-scalar
    /// units.
    pub clamp_bound: u32,
    pub head: HeadKind,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.seq_len == 0
        {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.clamp_bound == 0 {
            return Err(Error::Config("clamp bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: Array2<T>,
    pub b: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub norm1: NormParams<T>,
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub norm2: NormParams<T>,
    pub ff1: LinearParams<T>,
    pub ff2: LinearParams<T>,
}

/// All weights of one network, in a fixed traversal order used by the
/// optimizer and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    pub extract: Vec<LinearParams<T>>,
    pub pos: Array2<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub final_norm: NormParams<T>,
    pub head: LinearParams<T>,
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| {
        T::from_f64(rng.gen_range(-limit..limit))
    })
}

fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearParams<T> {
    LinearParams {
        w: xavier(rng, d_in, d_out),
        b: Array2::zeros((1, d_out)),
    }
}

fn norm_init<T: Scalar>(d: usize) -> NormParams<T> {
    NormParams {
        gamma: Array2::from_elem((1, d), T::one()),
        beta: Array2::zeros((1, d)),
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Fresh parameters for `config`, drawn from `rng`.
    pub fn init(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let extract = vec![
            linear_init(rng, config.d_in, d),
            linear_init(rng, d, d),
            linear_init(rng, d, d),
        ];
        let pos = Array2::from_shape_fn((config.seq_len, d), |_| {
            T::from_f64(rng.gen_range(-0.02..0.02))
        });
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayerParams {
                norm1: norm_init(d),
                wq: linear_init(rng, d, d),
                wk: linear_init(rng, d, d),
                wv: linear_init(rng, d, d),
                wo: linear_init(rng, d, d),
                norm2: norm_init(d),
                ff1: linear_init(rng, d, config.d_ff),
                ff2: linear_init(rng, config.d_ff, d),
            })
            .collect();
        Ok(NetworkParams {
            config,
            extract,
            pos,
            layers,
            final_norm: norm_init(d),
            head: linear_init(rng, d, config.head.output_width()),
        })
    }

    /// Visits every parameter array in traversal order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Array2<T>)) {
        for (i, lin) in self.extract.iter().enumerate() {
            f(&format!("extract.{i}.w"), &lin.w);
            f(&format!("extract.{i}.b"), &lin.b);
        }
        f("pos", &self.pos);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.norm1.gamma"), &layer.norm1.gamma);
            f(&format!("layers.{i}.norm1.beta"), &layer.norm1.beta);
            for (name, lin) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
            ] {
                f(&format!("layers.{i}.{name}.w"), &lin.w);
                f(&format!("layers.{i}.{name}.b"), &lin.b);
            }
            f(&format!("layers.{i}.norm2.gamma"), &layer.norm2.gamma);
            f(&format!("layers.{i}.norm2.beta"), &layer.norm2.beta);
            f(&format!("layers.{i}.ff1.w"), &layer.ff1.w);
            f(&format!("layers.{i}.ff1.b"), &layer.ff1.b);
            f(&format!("layers.{i}.ff2.w"), &layer.ff2.w);
            f(&format!("layers.{i}.ff2.b"), &layer.ff2.b);
        }
        f("final_norm.gamma", &self.final_norm.gamma);
        f("final_norm.beta", &self.final_norm.beta);
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<T>)) {
        for (i, lin) in self.extract.iter_mut().enumerate() {
            f(&format!("extract.{i}.w"), &mut lin.w);
            f(&format!("extract.{i}.b"), &mut lin.b);
        }
        f("pos", &mut self.pos);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.norm1.gamma"), &mut layer.norm1.gamma);
            f(&format!("layers.{i}.norm1.beta"), &mut layer.norm1.beta);
            for (name, lin) in [
                ("wq", &mut layer.wq),
                ("wk", &mut layer.wk),
                ("wv", &mut layer.wv),
                ("wo", &mut layer.wo),
            ] {
                f(&format!("layers.{i}.{name}.w"), &mut lin.w);
                f(&format!("layers.{i}.{name}.b"), &mut lin.b);
            }
            f(&format!("layers.{i}.norm2.gamma"), &mut layer.norm2.gamma);
            f(&format!("layers.{i}.norm2.beta"), &mut layer.norm2.beta);
            f(&format!("layers.{i}.ff1.w"), &mut layer.ff1.w);
            f(&format!("layers.{i}.ff1.b"), &mut layer.ff1.b);
            f(&format!("layers.{i}.ff2.w"), &mut layer.ff2.w);
            f(&format!("layers.{i}.ff2.b"), &mut layer.ff2.b);
        }
        f("final_norm.gamma", &mut self.final_norm.gamma);
        f("final_norm.beta", &mut self.final_norm.beta);
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    pub fn num_arrays(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    /// Converts every parameter to a new scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let recast = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.as_f64()));
        let lin = |l: &LinearParams<T>| LinearParams {
            w: recast(&l.w),
            b: recast(&l.b),
        };
        let norm = |n: &NormParams<T>| NormParams {
            gamma: recast(&n.gamma),
            beta: recast(&n.beta),
        };
        NetworkParams {
            config: self.config,
            extract: self.extract.iter().map(lin).collect(),
            pos: recast(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    norm1: norm(&l.norm1),
                    wq: lin(&l.wq),
                    wk: lin(&l.wk),
                    wv: lin(&l.wv),
                    wo: lin(&l.wo),
                    norm2: norm(&l.norm2),
                    ff1: lin(&l.ff1),
                    ff2: lin(&l.ff2),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            head: lin(&self.head),
        }
    }
}

/// Node handles for one network's parameters on a graph, in traversal
/// order; `flat` mirrors the `visit` order for gradient readout.
#[derive(Debug, Clone)]
pub struct NetworkNodes {
    pub extract: Vec<(NodeId, NodeId)>,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_norm: (NodeId, NodeId),
    pub head: (NodeId, NodeId),
    pub flat: Vec<NodeId>,
    config: NetworkConfig,
}

#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub norm1: (NodeId, NodeId),
    pub wq: (NodeId, NodeId),
    pub wk: (NodeId, NodeId),
    pub wv: (NodeId, NodeId),
    pub wo: (NodeId, NodeId),
    pub norm2: (NodeId, NodeId),
    pub ff1: (NodeId, NodeId),
    pub ff2: (NodeId, NodeId),
}

/// Places every parameter of `params` on the graph as a leaf.
pub fn register<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    trainable: bool,
) -> NetworkNodes {
    let mut flat = Vec::with_capacity(params.num_arrays());
    let mut put = |g: &mut Graph<T>, a: &Array2<T>| {
        let id = g.leaf(a.clone(), trainable);
        flat.push(id);
        id
    };
    let extract = params
        .extract
        .iter()
        .map(|l| {
            let w = put(g, &l.w);
            let b = put(g, &l.b);
            (w, b)
        })
        .collect();
    let pos = put(g, &params.pos);
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let norm1 = (put(g, &l.norm1.gamma), put(g, &l.norm1.beta));
            let wq = (put(g, &l.wq.w), put(g, &l.wq.b));
            let wk = (put(g, &l.wk.w), put(g, &l.wk.b));
            let wv = (put(g, &l.wv.w), put(g, &l.wv.b));
            let wo = (put(g, &l.wo.w), put(g, &l.wo.b));
            let norm2 = (put(g, &l.norm2.gamma), put(g, &l.norm2.beta));
            let ff1 = (put(g, &l.ff1.w), put(g, &l.ff1.b));
            let ff2 = (put(g, &l.ff2.w), put(g, &l.ff2.b));
            LayerNodes {
                norm1,
                wq,
                wk,
                wv,
                wo,
                norm2,
                ff1,
                ff2,
            }
        })
        .collect();
    let final_norm = (put(g, &params.final_norm.gamma), put(g, &params.final_norm.beta));
    let head = (put(g, &params.head.w), put(g, &params.head.b));
    NetworkNodes {
        extract,
        pos,
        layers,
        final_norm,
        head,
        flat,
        config: params.config,
    }
}

/// Feature extraction: a three-layer ReLU perceptron from raw block inputs
/// to model width, clamped to keep activations bounded.
pub fn forward_features<T: Scalar>(g: &mut Graph<T>, net: &NetworkNodes, x: NodeId) -> NodeId {
    let bound = T::from_f64(net.config.clamp_bound as f64);
    let mut h = x;
    for (i, &(w, b)) in net.extract.iter().enumerate() {
        h = g.linear(h, w, b);
        if i + 1 < net.extract.len() {
            h = g.relu(h);
        }
    }
    g.clamp(h, T::zero() - bound, bound)
}

/// Sequence mixing: learned positional embeddings followed by pre-norm
/// transformer encoder layers and a final normalization.
pub fn forward_s2s<T: Scalar>(g: &mut Graph<T>, net: &NetworkNodes, h: NodeId) -> NodeId {
    let cfg = &net.config;
    let mut x = g.add_sequence_bias(h, net.pos, cfg.seq_len);
    for layer in &net.layers {
        let a = g.layer_norm(x, layer.norm1.0, layer.norm1.1);
        let q = g.linear(a, layer.wq.0, layer.wq.1);
        let k = g.linear(a, layer.wk.0, layer.wk.1);
        let v = g.linear(a, layer.wv.0, layer.wv.1);
        let mixed = g.attention(q, k, v, cfg.n_heads, cfg.seq_len);
        let proj = g.linear(mixed, layer.wo.0, layer.wo.1);
        x = g.add(x, proj);
        let f = g.layer_norm(x, layer.norm2.0, layer.norm2.1);
        let f1 = g.linear(f, layer.ff1.0, layer.ff1.1);
        let f1 = g.relu(f1);
        let f2 = g.linear(f1, layer.ff2.0, layer.ff2.1);
        x = g.add(x, f2);
    }
    g.layer_norm(x, net.final_norm.0, net.final_norm.1)
}

/// Output head: raw parity symbols, or per-user class probabilities.
pub fn forward_head<T: Scalar>(g: &mut Graph<T>, net: &NetworkNodes, h: NodeId) -> NodeId {
    let out = g.linear(h, net.head.0, net.head.1);
    match net.config.head {
        HeadKind::Parity => out,
        HeadKind::ClassProbs { users, .. } => g.softmax_groups(out, users),
    }
}

/// Full pass: features, sequence mixing, head.
pub fn forward<T: Scalar>(g: &mut Graph<T>, net: &NetworkNodes, x: NodeId) -> NodeId {
    let h = forward_features(g, net, x);
    let h = forward_s2s(g, net, h);
    forward_head(g, net, h)
}

/// Running statistics that turn raw parity outputs into unit-power
/// symbols. Trained with exponential moving averages of batch statistics;
/// frozen copies are used whenever no batch is available.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNormState {
    pub momentum: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub calibrated: bool,
}

impl PowerNormState {
    pub fn new(rounds: usize) -> Self {
        PowerNormState {
            momentum: 0.1,
            mean: vec![0.0; rounds],
            var: vec![1.0; rounds],
            calibrated: false,
        }
    }

    pub fn rounds(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch's per-round statistics into the running averages.
    pub fn update(&mut self, stats: &[(f64, f64)]) -> Result<()> {
        if stats.len() != self.rounds() {
            return Err(Error::Contract(format!(
                "expected statistics for {} rounds, got {}",
                self.rounds(),
                stats.len()
            )));
        }
        for (round, &(mean, var)) in stats.iter().enumerate() {
            self.mean[round] = (1.0 - self.momentum) * self.mean[round] + self.momentum * mean;
            self.var[round] = (1.0 - self.momentum) * self.var[round] + self.momentum * var;
        }
        self.calibrated = true;
        Ok(())
    }

    /// Replaces the running statistics outright, as done by a dedicated
    /// calibration pass over a large batch.
    pub fn assign(&mut self, stats: &[(f64, f64)]) -> Result<()> {
        if stats.len() != self.rounds() {
            return Err(Error::Contract(format!(
                "expected statistics for {} rounds, got {}",
                self.rounds(),
                stats.len()
            )));
        }
        for (round, &(mean, var)) in stats.iter().enumerate() {
            self.mean[round] = mean;
            self.var[round] = var;
        }
        self.calibrated = true;
        Ok(())
    }

    /// Per-round `(mean, variance)` pairs.
    pub fn stats(&self) -> Vec<(f64, f64)> {
        self.mean.iter().copied().zip(self.var.iter().copied()).collect()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    /// Reinstates persisted state; the round count must match.
    pub fn restore(&mut self, momentum: f64, calibrated: bool, stats: Vec<(f64, f64)>) -> Result<()> {
        if stats.len() != self.rounds() {
            return Err(Error::Contract(format!(
                "expected statistics for {} rounds, got {}",
                self.rounds(),
                stats.len()
            )));
        }
        self.momentum = momentum;
        self.calibrated = calibrated;
        for (round, (mean, var)) in stats.into_iter().enumerate() {
            self.mean[round] = mean;
            self.var[round] = var;
        }
        Ok(())
    }

    /// Frozen statistics for one round; available only after calibration.
    pub fn frozen(&self, round: usize) -> Result<(f64, f64)> {
        if !self.calibrated {
            return Err(Error::State(
                "power statistics not calibrated; run training or a calibration pass first".into(),
            ));
        }
        if round >= self.rounds() {
            return Err(Error::Contract(format!(
                "round {round} out of range for {} rounds",
                self.rounds()
            )));
        }
        Ok((self.mean[round], self.var[round]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_config(head: HeadKind) -> NetworkConfig {
        NetworkConfig {
            d_in: 3,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            seq_len: 3,
            clamp_bound: 10,
            head,
        }
    }

    fn random_input(rows: usize, cols: usize, tag: u64) -> Array2<f64> {
        let mut rng = derive_rng(9, "nn-test", tag);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_count() {
        let cfg = tiny_config(HeadKind::Parity);
        let mut rng = derive_rng(1, "init", 0);
        let p: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        assert_eq!(p.extract.len(), 3);
        assert_eq!(p.extract[0].w.dim(), (3, 4));
        assert_eq!(p.pos.dim(), (3, 4));
        assert_eq!(p.head.w.dim(), (4, 1));
        // extract: (3*4+4) + 2*(4*4+4) = 56; pos: 12;
        // layer: 2*(4+4) + 4*(4*4+4) + (4*8+8) + (8*4+4) = 172;
        // final norm: 8; head: 5.
        assert_eq!(p.num_scalars(), 56 + 12 + 172 + 8 + 5);
        let mut names = Vec::new();
        p.visit(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names.first().map(String::as_str), Some("extract.0.w"));
        assert_eq!(names.last().map(String::as_str), Some("head.b"));
        assert_eq!(names.len(), p.num_arrays());
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let mut cfg = tiny_config(HeadKind::Parity);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes() {
        let mut rng = derive_rng(2, "init", 0);
        let pc = tiny_config(HeadKind::Parity);
        let p: NetworkParams<f64> = NetworkParams::init(pc, &mut rng).unwrap();
        let mut g = Graph::new();
        let net = register(&mut g, &p, false);
        let x = g.constant(random_input(6, 3, 0));
        let y = forward(&mut g, &net, x);
        assert_eq!(g.value(y).dim(), (6, 1));

        let cc = tiny_config(HeadKind::ClassProbs { users: 2, classes: 4 });
        let p: NetworkParams<f64> = NetworkParams::init(cc, &mut rng).unwrap();
        let mut g = Graph::new();
        let net = register(&mut g, &p, false);
        let x = g.constant(random_input(6, 3, 1));
        let y = forward(&mut g, &net, x);
        assert_eq!(g.value(y).dim(), (6, 8));
        for r in 0..6 {
            for u in 0..2 {
                let s: f64 = (0..4).map(|c| g.value(y)[(r, u * 4 + c)]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_respect_clamp() {
        let mut cfg = tiny_config(HeadKind::Parity);
        cfg.clamp_bound = 1;
        let mut rng = derive_rng(3, "init", 0);
        let p: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let net = register(&mut g, &p, false);
        let x = g.constant(random_input(9, 3, 2).mapv(|v| v * 50.0));
        let h = forward_features(&mut g, &net, x);
        for &v in g.value(h) {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn examples_do_not_interact() {
        let cfg = tiny_config(HeadKind::Parity);
        let mut rng = derive_rng(4, "init", 0);
        let p: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        let run = |input: &Array2<f64>| {
            let mut g = Graph::new();
            let net = register(&mut g, &p, false);
            let x = g.constant(input.clone());
            let y = forward(&mut g, &net, x);
            g.value(y).clone()
        };
        let base = random_input(6, 3, 3);
        let out0 = run(&base);
        let mut altered = base.clone();
        for r in 3..6 {
            for c in 0..3 {
                altered[(r, c)] += 2.0;
            }
        }
        let out1 = run(&altered);
        for r in 0..3 {
            assert_eq!(out0[(r, 0)], out1[(r, 0)], "example 0 changed with example 1");
        }
        assert_ne!(out0, out1);
    }

    #[test]
    fn positions_are_distinguished() {
        // Identical block inputs at different positions must produce
        // different outputs through the positional embeddings.
        let cfg = tiny_config(HeadKind::Parity);
        let mut rng = derive_rng(5, "init", 0);
        let p: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let net = register(&mut g, &p, false);
        let row = random_input(1, 3, 4);
        let mut x = Array2::zeros((3, 3));
        for r in 0..3 {
            x.row_mut(r).assign(&row.row(0));
        }
        let xid = g.constant(x);
        let y = forward(&mut g, &net, xid);
        assert_ne!(g.value(y)[(0, 0)], g.value(y)[(1, 0)]);
    }

    #[test]
    fn full_network_gradient_check() {
        let cfg = tiny_config(HeadKind::ClassProbs { users: 2, classes: 4 });
        let mut rng = derive_rng(6, "init", 0);
        let params: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        let input = random_input(6, 3, 5);
        let labels = vec![1usize, 0, 3, 2, 2, 1];

        let loss_of = |p: &NetworkParams<f64>| {
            let mut g = Graph::new();
            let net = register(&mut g, p, true);
            let x = g.constant(input.clone());
            let y = forward(&mut g, &net, x);
            let probs1 = g.slice_cols(y, 0, 4);
            let probs2 = g.slice_cols(y, 4, 4);
            let l1 = g.nll_sum(probs1, &labels, 1e-12);
            let l2 = g.nll_sum(probs2, &labels, 1e-12);
            let tot = g.add(l1, l2);
            (g, net, tot)
        };

        let (mut g, net, loss) = loss_of(&params);
        g.backward(loss).unwrap();
        let grads: Vec<Array2<f64>> = net
            .flat
            .iter()
            .map(|&id| g.grad(id).unwrap().clone())
            .collect();

        let h = 1e-5;
        let mut checked = 0usize;
        let mut arrays = Vec::new();
        params.visit(&mut |name, a| arrays.push((name.to_string(), a.dim(), a.len())));
        for (ai, (name, _dim, len)) in arrays.iter().enumerate() {
            // Every 3rd coordinate keeps the test fast while covering all
            // parameter arrays.
            for flat_idx in (0..*len).step_by(3) {
                let perturb = |delta: f64| {
                    let mut q = params.clone();
                    let mut seen = 0usize;
                    q.visit_mut(&mut |n, arr| {
                        if n == name && seen == 0 {
                            seen = 1;
                            let cols = arr.ncols();
                            let idx = (flat_idx / cols, flat_idx % cols);
                            arr[idx] += delta;
                        }
                    });
                    let (g, _, loss) = loss_of(&q);
                    g.value(loss)[(0, 0)]
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let cols = grads[ai].ncols();
                let analytic = grads[ai][(flat_idx / cols, flat_idx % cols)];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4
                        || (numeric - analytic).abs() < 1e-8,
                    "{name}[{flat_idx}]: numeric {numeric} vs analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn cast_round_trip_f32() {
        let cfg = tiny_config(HeadKind::Parity);
        let mut rng = derive_rng(7, "init", 0);
        let p64: NetworkParams<f64> = NetworkParams::init(cfg, &mut rng).unwrap();
        let p32: NetworkParams<f32> = p64.cast();
        let back: NetworkParams<f64> = p32.cast();
        let mut max_err = 0.0f64;
        p64.visit(&mut |name, a| {
            let mut b = None;
            back.visit(&mut |n2, a2| {
                if n2 == name {
                    b = Some(a2.clone());
                }
            });
            let b = b.unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                max_err = max_err.max((x - y).abs());
            }
        });
        assert!(max_err < 1e-7);
    }

    #[test]
    fn power_state_lifecycle() {
        let mut st = PowerNormState::new(3);
        assert!(matches!(st.frozen(0), Err(Error::State(_))));
        st.update(&[(0.5, 2.0), (0.0, 1.0), (-0.5, 0.5)]).unwrap();
        // EMA from the (0, 1) initialization with momentum 0.1.
        let (m, v) = st.frozen(0).unwrap();
        assert!((m - 0.05).abs() < 1e-12);
        assert!((v - 1.1).abs() < 1e-12);
        st.assign(&[(1.0, 4.0), (0.0, 1.0), (0.0, 1.0)]).unwrap();
        assert_eq!(st.frozen(0).unwrap(), (1.0, 4.0));
        assert!(matches!(st.frozen(3), Err(Error::Contract(_))));
        assert!(matches!(st.update(&[(0.0, 1.0)]), Err(Error::Contract(_))));
    }
}
