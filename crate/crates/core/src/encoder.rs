//! Long-short range encoder: shared shallow features, a low-frequency base
//! branch and an invertible high-frequency detail branch.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ConvSpec, Tape, Var};
use crate::config::{ConfigError, EncoderConfig};
use crate::nn::{Conv2d, CouplingBlock, LiteTransformerBlock, RestormerBlock};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Shared, base and detail maps of one image, each `[D, H, W]` on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureBundle {
    pub shared: Var,
    pub base: Var,
    pub detail: Var,
}

#[derive(Clone, Debug)]
pub struct LsrEncoder {
    config: EncoderConfig,
    embed: Conv2d,
    shallow: Vec<RestormerBlock>,
    base: Vec<LiteTransformerBlock>,
    detail: Vec<CouplingBlock>,
}

impl LsrEncoder {
    /// Registers the encoder weights under `{prefix}.`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        config: &EncoderConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.embed_dim;
        let heads = config.attention_heads;
        let hidden = config.ffn_hidden();
        let embed = Conv2d::new(store, rng, &format!("{prefix}.embed"), 1, d, 3, ConvSpec::reflect(), false);
        let shallow = (0..config.restormer_blocks)
            .map(|i| RestormerBlock::new(store, rng, &format!("{prefix}.shallow.{i}"), d, heads, hidden))
            .collect();
        let base = (0..config.lt_blocks)
            .map(|i| LiteTransformerBlock::new(store, rng, &format!("{prefix}.base.{i}"), d, heads, hidden))
            .collect();
        let detail = (0..config.inn_blocks)
            .map(|i| CouplingBlock::new(store, rng, &format!("{prefix}.detail.{i}"), d))
            .collect();
        Ok(Self { config: config.clone(), embed, shallow, base, detail })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `[1, H, W]` image to shared features `[D, H, W]`.
    pub fn sfe<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Var {
        let mut x = self.embed.forward(tape, store, image);
        for b in &self.shallow {
            x = b.forward(tape, store, x);
        }
        x
    }

    pub fn bte<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, shared: Var) -> Var {
        let mut x = shared;
        for b in &self.base {
            x = b.forward(tape, store, x);
        }
        x
    }

    pub fn dce<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, shared: Var) -> Var {
        let mut x = shared;
        for b in &self.detail {
            x = b.forward(tape, store, x);
        }
        x
    }

    /// Exact inverse of [`LsrEncoder::dce`].
    pub fn dce_inverse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, detail: Var) -> Var {
        let mut x = detail;
        for b in self.detail.iter().rev() {
            x = b.inverse(tape, store, x);
        }
        x
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> FeatureBundle {
        let shared = self.sfe(tape, store, image);
        let base = self.bte(tape, store, shared);
        let detail = self.dce(tape, store, shared);
        FeatureBundle { shared, base, detail }
    }
}
