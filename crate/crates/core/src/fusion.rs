//! Feature fusion layers and the shared image decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ConvSpec, Tape, Var};
use crate::config::{ConfigError, DecoderConfig};
use crate::encoder::FeatureBundle;
use crate::nn::{Conv2d, RestormerBlock};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Prefix of the fusion-layer parameters (re-initialised for stage two).
pub const FUSION_PREFIX: &str = "fusion.";

/// Which feature groups reach the decoder; masked groups are replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderInputs {
    pub base_detail: bool,
    pub graph: bool,
}

impl Default for DecoderInputs {
    fn default() -> Self {
        Self { base_detail: true, graph: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedFeatureSet {
    pub base: Var,
    pub detail: Var,
    pub graph: Var,
}

#[derive(Clone, Debug)]
pub struct FusionDecoder {
    dim: usize,
    fuse_base: Conv2d,
    fuse_detail: Conv2d,
    fuse_graph: Conv2d,
    reduce: Conv2d,
    blocks: Vec<RestormerBlock>,
    head: Conv2d,
}

impl FusionDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
        ffn_hidden: usize,
        config: &DecoderConfig,
    ) -> Result<Self, ConfigError> {
        if config.attention_heads == 0 || dim % config.attention_heads != 0 {
            return Err(ConfigError::Heads { dim, heads: config.attention_heads });
        }
        let fuse = |store: &mut ParamStore<T>, rng: &mut R, name: &str| {
            Conv2d::new(store, rng, &format!("{FUSION_PREFIX}{name}"), 2 * dim, dim, 3, ConvSpec::reflect(), true)
        };
        let fuse_base = fuse(store, rng, "base");
        let fuse_detail = fuse(store, rng, "detail");
        let fuse_graph = fuse(store, rng, "graph");
        let reduce = Conv2d::pointwise(store, rng, "decoder.reduce", 3 * dim, dim, true);
        let blocks = (0..config.restormer_blocks)
            .map(|i| RestormerBlock::new(store, rng, &format!("decoder.block.{i}"), dim, config.attention_heads, ffn_hidden))
            .collect();
        let head = Conv2d::new(store, rng, "decoder.head", dim, 1, 3, ConvSpec::reflect(), true);
        Ok(Self { dim, fuse_base, fuse_detail, fuse_graph, reduce, blocks, head })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Each fused map is a 3×3 convolution of the two modalities' maps
    /// concatenated along channels (modality one first).
    pub fn fuse_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        first: &FeatureBundle,
        second: &FeatureBundle,
        graph1: Var,
        graph2: Var,
    ) -> FusedFeatureSet {
        let mut pair = |conv: &Conv2d, a: Var, b: Var| {
            assert_eq!(tape.shape(a), tape.shape(b), "modality feature shapes differ");
            let x = tape.concat(&[a, b]);
            conv.forward(tape, store, x)
        };
        FusedFeatureSet {
            base: pair(&self.fuse_base, first.base, second.base),
            detail: pair(&self.fuse_detail, first.detail, second.detail),
            graph: pair(&self.fuse_graph, graph1, graph2),
        }
    }

    /// `[D, H, W]` base, detail and graph maps to a `[1, H, W]` image in (0, 1).
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        base: Var,
        detail: Var,
        graph: Var,
        inputs: DecoderInputs,
    ) -> Var {
        let shape = tape.shape(base).to_vec();
        assert_eq!(shape[0], self.dim, "decoder expects {} channels", self.dim);
        assert!(tape.shape(detail) == shape.as_slice() && tape.shape(graph) == shape.as_slice());
        let zero = |tape: &mut Tape<T>| tape.constant(Tensor::zeros(&shape));
        let (base, detail) = if inputs.base_detail { (base, detail) } else { (zero(tape), zero(tape)) };
        let graph = if inputs.graph { graph } else { zero(tape) };
        let x = tape.concat(&[base, detail, graph]);
        let mut x = self.reduce.forward(tape, store, x);
        for b in &self.blocks {
            x = b.forward(tape, store, x);
        }
        let y = self.head.forward(tape, store, x);
        tape.sigmoid(y)
    }

    /// Stage-one reconstruction of one modality from its own features.
    pub fn reconstruct_stage1<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bundle: &FeatureBundle,
        graph: Var,
        inputs: DecoderInputs,
    ) -> Var {
        self.decode(tape, store, bundle.base, bundle.detail, graph, inputs)
    }

    pub fn fuse_stage2<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        first: &FeatureBundle,
        second: &FeatureBundle,
        graph1: Var,
        graph2: Var,
        inputs: DecoderInputs,
    ) -> Var {
        let f = self.fuse_features(tape, store, first, second, graph1, graph2);
        self.decode(tape, store, f.base, f.detail, f.graph, inputs)
    }
}
