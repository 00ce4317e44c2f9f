//! The full set of networks trained and used together.

use anonet_tensor::{par, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::{SemanticMask, NUM_CLASSES};
use crate::nets::{
    GeneratorHead, Live, Module, MultiScaleDiscriminator, NetConfig, PatchDiscriminator,
    ResnetGenerator, SpadeGenerator, Vgg,
};
use crate::photo::{self, Photo};

/// Seed of the randomly initialised perceptual network. Fixed so that every
/// run and every calibration sees the same feature space.
pub const VGG_SEED: u64 = 0x5eed_0019;

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub net: NetConfig,
    /// Segmentation generator, photo to semantics.
    pub g: ResnetGenerator,
    /// Inverse generator, semantics to photo.
    pub f: ResnetGenerator,
    /// Discriminator on photos.
    pub dx: PatchDiscriminator,
    /// Discriminator on semantics.
    pub dy: PatchDiscriminator,
    /// Synthesis generator.
    pub gs: SpadeGenerator,
    /// Multi-scale synthesis discriminators.
    pub ds: MultiScaleDiscriminator,
    /// Frozen perceptual network.
    pub vgg: Vgg,
}

/// Names used for checkpoint files, in a fixed order.
pub const NETWORK_NAMES: [&str; 7] = ["g", "f", "dx", "dy", "gs", "ds", "vgg"];

impl ModelBundle {
    pub fn new(net: &NetConfig, scales: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.random::<u64>();
        Self {
            net: net.clone(),
            g: ResnetGenerator::new(net, GeneratorHead::Segmentation, next()),
            f: ResnetGenerator::new(net, GeneratorHead::Photo, next()),
            dx: PatchDiscriminator::new(net, 3, next()),
            dy: PatchDiscriminator::new(net, NUM_CLASSES, next()),
            gs: SpadeGenerator::new(net, next()),
            ds: MultiScaleDiscriminator::new(net, scales, next()),
            vgg: Vgg::vgg19(&net.vgg_widths, VGG_SEED),
        }
    }

    pub fn image_size(&self) -> usize {
        self.net.image_size
    }

    pub fn module(&self, name: &str) -> Option<&dyn Module> {
        Some(match name {
            "g" => &self.g,
            "f" => &self.f,
            "dx" => &self.dx,
            "dy" => &self.dy,
            "gs" => &self.gs,
            "ds" => &self.ds,
            "vgg" => &self.vgg,
            _ => return None,
        })
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut dyn Module> {
        Some(match name {
            "g" => &mut self.g,
            "f" => &mut self.f,
            "dx" => &mut self.dx,
            "dy" => &mut self.dy,
            "gs" => &mut self.gs,
            "ds" => &mut self.ds,
            "vgg" => &mut self.vgg,
            _ => return None,
        })
    }

    /// Class probabilities `[1, 11, S, S]` for one network-sized photo.
    pub fn segment_scores(&self, photo: &Photo) -> Result<Tensor> {
        let tape = Tape::new();
        let g = Live::new(&self.g, &tape, false);
        let x = tape.constant(photo::to_tensor(&[photo]));
        let y = self.g.forward(g.scope(), x)?;
        Ok(Tensor::clone(&tape.value(y)))
    }

    /// Per-photo argmax masks, in input order. Photos are processed
    /// independently and in parallel.
    pub fn segment(&self, photos: &[&Photo]) -> Result<Vec<SemanticMask>> {
        par::map_slice(photos, |p| {
            Ok(SemanticMask::from_scores(&self.segment_scores(p)?, 0))
        })
        .into_iter()
        .collect()
    }

    /// Renders one photo per mask.
    pub fn synthesize(&self, masks: &[&SemanticMask]) -> Result<Vec<Photo>> {
        par::map_slice(masks, |m| {
            let tape = Tape::new();
            let gs = Live::new(&self.gs, &tape, false);
            let seg = tape.constant(SemanticMask::one_hot(&[m]));
            let out = self.gs.forward(gs.scope(), seg)?;
            Ok(photo::from_tensor(&tape.value(out), 0))
        })
        .into_iter()
        .collect()
    }
}
