//! The full network: shared encoder, topology-aware encoder, fusion layers
//! and decoder, plus the per-stage forward passes and loss assembly.

use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{ConfigError, ModelConfig};
use crate::encoder::{FeatureBundle, LsrEncoder};
use crate::fusion::{DecoderInputs, FusionDecoder};
use crate::losses::{
    decomp_loss, grad_loss, graph_loss, recon_loss, stage2_intensity_loss, LossWeights, Stage1Parts, Stage2Parts,
};
use crate::params::ParamStore;
use crate::tae::{Aggregation, Tae, TaeOptions};
use crate::tensor::{Scalar, Tensor};
use crate::vessel::VesselGraph;

/// Full model or one of the five ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Full,
    /// No graph alignment loss.
    I,
    /// No diffusion convolutions after scattering nodes back to the grid.
    II,
    /// Decoder sees no base/detail features.
    III,
    /// No graph features at all.
    IV,
    /// Attention replaced by uniform neighbourhood averaging.
    V,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [Variant::I, Variant::II, Variant::III, Variant::IV, Variant::V];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
            Variant::IV => "IV",
            Variant::V => "V",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::I => "w/o graph loss",
            Variant::II => "w/o G2S diffusion",
            Variant::III => "w/o base/detail features for decoder",
            Variant::IV => "w/o graph features",
            Variant::V => "GAT -> uniform graph convolution",
        }
    }

    pub fn uses_graph_features(self) -> bool {
        self != Variant::IV
    }

    pub fn uses_graph_loss(self) -> bool {
        !matches!(self, Variant::I | Variant::IV)
    }

    pub fn tae_options(self) -> TaeOptions {
        TaeOptions {
            aggregation: if self == Variant::V { Aggregation::Uniform } else { Aggregation::Attention },
            diffuse: self != Variant::II,
        }
    }

    pub fn decoder_inputs(self) -> DecoderInputs {
        DecoderInputs { base_detail: self != Variant::III, graph: self != Variant::IV }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant `{0}` (expected full, I, II, III, IV or V)")]
pub struct UnknownVariant(pub alloc::string::String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "full" | "ours" | "Full" | "Ours" => Variant::Full,
            "I" => Variant::I,
            "II" => Variant::II,
            "III" => Variant::III,
            "IV" => Variant::IV,
            "V" => Variant::V,
            other => return Err(UnknownVariant(other.into())),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TaGat {
    config: ModelConfig,
    pub encoder: LsrEncoder,
    pub tae: Tae,
    pub decoder: FusionDecoder,
}

/// Everything one modality contributes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures {
    pub bundle: FeatureBundle,
    pub graph: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Outputs {
    pub first: ModalityFeatures,
    pub second: ModalityFeatures,
    pub recon1: Var,
    pub recon2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Outputs {
    pub first: ModalityFeatures,
    pub second: ModalityFeatures,
    pub fused: Var,
}

impl TaGat {
    /// Registers all parameters in a fixed order: encoder, TAE, fusion, decoder.
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &ModelConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.encoder.embed_dim;
        let encoder = LsrEncoder::new(store, rng, "encoder", &config.encoder)?;
        let tae = Tae::new(store, rng, "tae", &config.tae, d)?;
        let decoder = FusionDecoder::new(store, rng, d, config.encoder.ffn_hidden(), &config.decoder)?;
        Ok(Self { config: config.clone(), encoder, tae, decoder })
    }

    /// Fresh model and weights drawn from `seed`.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>), ConfigError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut store, &mut rng, config)?;
        Ok((model, store))
    }

    /// Rebuilds the layer structure for an existing store; the store must
    /// have been produced by the same config.
    pub fn structure<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>), ConfigError> {
        Self::init(config, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modality<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
        graph: &VesselGraph,
        variant: Variant,
    ) -> ModalityFeatures {
        let bundle = self.encoder.encode(tape, store, image);
        let graph = if variant.uses_graph_features() {
            self.tae.forward(tape, store, bundle.base, bundle.detail, graph, variant.tae_options())
        } else {
            let s = tape.shape(bundle.base).to_vec();
            tape.constant(Tensor::zeros(&s))
        };
        ModalityFeatures { bundle, graph }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stage1_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image1: Var,
        image2: Var,
        graph1: &VesselGraph,
        graph2: &VesselGraph,
        variant: Variant,
    ) -> Stage1Outputs {
        let first = self.modality(tape, store, image1, graph1, variant);
        let second = self.modality(tape, store, image2, graph2, variant);
        let inputs = variant.decoder_inputs();
        let recon1 = self.decoder.reconstruct_stage1(tape, store, &first.bundle, first.graph, inputs);
        let recon2 = self.decoder.reconstruct_stage1(tape, store, &second.bundle, second.graph, inputs);
        Stage1Outputs { first, second, recon1, recon2 }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stage2_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image1: Var,
        image2: Var,
        graph1: &VesselGraph,
        graph2: &VesselGraph,
        variant: Variant,
    ) -> Stage2Outputs {
        let first = self.modality(tape, store, image1, graph1, variant);
        let second = self.modality(tape, store, image2, graph2, variant);
        let fused = self.decoder.fuse_stage2(
            tape,
            store,
            &first.bundle,
            &second.bundle,
            first.graph,
            second.graph,
            variant.decoder_inputs(),
        );
        Stage2Outputs { first, second, fused }
    }
}

fn decomp<T: Scalar>(tape: &mut Tape<T>, a: &ModalityFeatures, b: &ModalityFeatures, w: &LossWeights) -> Var {
    decomp_loss(tape, a.bundle.base, b.bundle.base, a.bundle.detail, b.bundle.detail, w.epsilon)
}

fn graph_term<T: Scalar>(tape: &mut Tape<T>, a: &ModalityFeatures, b: &ModalityFeatures, variant: Variant) -> Option<Var> {
    if variant.uses_graph_loss() {
        graph_loss(tape, a.graph, b.graph)
    } else {
        None
    }
}

pub fn stage1_parts<T: Scalar>(
    tape: &mut Tape<T>,
    out: &Stage1Outputs,
    image1: Var,
    image2: Var,
    w: &LossWeights,
    variant: Variant,
) -> Stage1Parts<Var> {
    Stage1Parts {
        recon1: recon_loss(tape, image1, out.recon1, w.mu),
        recon2: recon_loss(tape, image2, out.recon2, w.mu),
        decomp: decomp(tape, &out.first, &out.second, w),
        graph: graph_term(tape, &out.first, &out.second, variant),
    }
}

pub fn stage2_parts<T: Scalar>(
    tape: &mut Tape<T>,
    out: &Stage2Outputs,
    image1: Var,
    image2: Var,
    w: &LossWeights,
    variant: Variant,
) -> Stage2Parts<Var> {
    Stage2Parts {
        intensity: stage2_intensity_loss(tape, out.fused, image1, image2),
        graph: graph_term(tape, &out.first, &out.second, variant),
        gradient: grad_loss(tape, out.fused, image1, image2),
        decomp: decomp(tape, &out.first, &out.second, w),
    }
}
