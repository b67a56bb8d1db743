//! The complete trainable system: one parity network per user (optionally
//! shared), the joint decoder network, and per-user power-normalization
//! statistics, tied to the experiment configuration that shaped them.

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::nn::{NetworkParams, PowerNormState};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct MbafModel<T> {
    pub config: ExperimentConfig,
    /// Parity networks; one entry serves all users when weights are shared.
    pub encoders: Vec<NetworkParams<T>>,
    pub decoder: NetworkParams<T>,
    /// Per-user symbol statistics, indexed by round.
    pub power: Vec<PowerNormState>,
}

impl<T: Scalar> MbafModel<T> {
    /// Fresh model for `config`, with weights derived from the master seed.
    pub fn init(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let enc_cfg = config.encoder_network_config();
        let num_encoders = if config.model.shared_parity {
            1
        } else {
            config.num_users()
        };
        let encoders = (0..num_encoders)
            .map(|j| {
                let mut rng = derive_rng(config.seed, "init-encoder", j as u64);
                NetworkParams::init(enc_cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dec_rng = derive_rng(config.seed, "init-decoder", 0);
        let decoder = NetworkParams::init(config.decoder_network_config(), &mut dec_rng)?;
        let power = (0..config.num_users())
            .map(|_| PowerNormState::new(config.code.t))
            .collect();
        Ok(MbafModel {
            config,
            encoders,
            decoder,
            power,
        })
    }

    pub fn num_users(&self) -> usize {
        self.config.num_users()
    }

    /// Which parameter set user `j` transmits with.
    pub fn encoder_index(&self, user: usize) -> usize {
        if self.encoders.len() == 1 {
            0
        } else {
            user
        }
    }

    pub fn encoder(&self, user: usize) -> &NetworkParams<T> {
        &self.encoders[self.encoder_index(user)]
    }

    /// Visits every parameter array of every network, in a fixed order:
    /// encoders first, then the decoder.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Array2<T>)) {
        for (i, enc) in self.encoders.iter().enumerate() {
            enc.visit(&mut |name, a| f(&format!("encoder{i}.{name}"), a));
        }
        self.decoder.visit(&mut |name, a| f(&format!("decoder.{name}"), a));
    }

    /// Mutable counterpart of [`visit_params`](Self::visit_params).
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<T>)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_mut(&mut |name, a| f(&format!("encoder{i}.{name}"), a));
        }
        self.decoder
            .visit_mut(&mut |name, a| f(&format!("decoder.{name}"), a));
    }

    pub fn num_param_arrays(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _| n += 1);
        n
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }

    /// Converts all weights to another scalar type; statistics stay f64.
    pub fn cast<U: Scalar>(&self) -> MbafModel<U> {
        MbafModel {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(|e| e.cast()).collect(),
            decoder: self.decoder.cast(),
            power: self.power.clone(),
        }
    }
}
