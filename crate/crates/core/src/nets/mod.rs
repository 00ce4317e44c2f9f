//! Network definitions: segmentation and inverse generators, patch and
//! multi-scale discriminators, the SPADE synthesis generator and the frozen
//! perceptual feature network.

mod layers;
mod patch;
mod resnet;
mod spade;
mod vgg;

use anonet_tensor::{Bound, Gradients, ParamSet, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{Builder, Conv, Scope};
pub use patch::{MultiScaleDiscriminator, PatchArch, PatchDiscriminator, ScaleCritic};
pub use resnet::{GeneratorHead, ResnetGenerator};
pub use spade::SpadeGenerator;
pub use vgg::{Vgg, VGG19_BLOCKS};

/// Architecture sizes. `image_size` is the square network input side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub ngf: usize,
    pub n_blocks: usize,
    pub ndf: usize,
    pub d_layers: usize,
    pub spade_nf: usize,
    pub spade_hidden: usize,
    pub spade_upsamples: usize,
    /// Conv widths of the five perceptual blocks.
    pub vgg_widths: Vec<usize>,
    /// Optional safetensors file with perceptual-net weights.
    pub vgg_weights: Option<std::path::PathBuf>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            ngf: 64,
            n_blocks: 9,
            ndf: 64,
            d_layers: 3,
            spade_nf: 64,
            spade_hidden: 128,
            spade_upsamples: 5,
            vgg_widths: vec![64, 128, 256, 512, 512],
            vgg_weights: None,
        }
    }
}

impl NetConfig {
    /// Reduced widths for 64x64 desk-scale runs.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            ngf: 8,
            n_blocks: 3,
            ndf: 8,
            d_layers: 2,
            spade_nf: 8,
            spade_hidden: 16,
            spade_upsamples: 3,
            vgg_widths: vec![8, 16, 24, 32, 32],
            vgg_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 32 || s % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {s} must be a multiple of 4 and at least 32"
            )));
        }
        if s % (1 << self.spade_upsamples) != 0 || s >> self.spade_upsamples < 2 {
            return Err(Error::Config(format!(
                "image_size {s} is not divisible into {} synthesis upsamplings",
                self.spade_upsamples
            )));
        }
        if [
            self.ngf,
            self.ndf,
            self.spade_nf,
            self.spade_hidden,
            self.d_layers,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "network widths and depths must be positive".into(),
            ));
        }
        if self.vgg_widths.len() != 5 || self.vgg_widths.contains(&0) {
            return Err(Error::Config(
                "vgg_widths needs five positive widths".into(),
            ));
        }
        Ok(())
    }
}

/// Anything owning a parameter set.
pub trait Module {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

/// A network whose parameters are recorded on a tape.
pub struct Live<'a, N> {
    pub net: &'a N,
    pub tape: &'a Tape,
    bound: Bound,
}

impl<'a, N: Module> Live<'a, N> {
    /// Binds `net` on `tape`; gradients reach its parameters only when
    /// `trainable`.
    pub fn new(net: &'a N, tape: &'a Tape, trainable: bool) -> Self {
        Self {
            net,
            tape,
            bound: net.params().bind(tape, trainable),
        }
    }

    pub fn scope(&self) -> Scope<'_> {
        Scope {
            tape: self.tape,
            params: self.net.params(),
            bound: &self.bound,
        }
    }

    /// Parameter gradients in parameter-set order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.bound
            .vars()
            .iter()
            .zip(self.net.params().params())
            .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
            .collect()
    }
}

/// Intermediate activations plus the per-patch real probability grid.
pub struct CriticOutput {
    pub features: Vec<Var>,
    pub score: Var,
}

/// A discriminator at one scale.
pub trait Critic {
    fn critique(&self, tape: &Tape, x: Var) -> CriticOutput;
}

/// A network exposing a list of activation maps (the perceptual net).
pub trait FeatureExtractor {
    fn features(&self, tape: &Tape, x: Var) -> Vec<Var>;
}

/// Refreshes every spectral-norm power-iteration vector of `params` once.
pub fn power_iteration(params: &mut ParamSet, convs: &[Conv]) {
    for c in convs {
        c.power_iteration(params);
    }
}

pub(crate) fn check_input(tape: &Tape, x: Var, channels: usize, size: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels || s[2] != size || s[3] != size {
        return Err(Error::ShapeMismatch {
            what: "network input",
            expected: (size as u32, size as u32),
            found: (
                s.get(3).copied().unwrap_or(0) as u32,
                s.get(2).copied().unwrap_or(0) as u32,
            ),
        });
    }
    Ok(())
}
