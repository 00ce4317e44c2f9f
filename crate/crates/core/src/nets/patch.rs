use anonet_tensor::{ParamSet, Tape, Var};

use super::layers::{to_signed, Builder, Conv, Scope, NORM_EPS};
use super::{Critic, CriticOutput, Live, Module, NetConfig};

const SLOPE: f64 = 0.2;

/// PatchGAN layer stack: stride-2 4x4 convolutions, one stride-1 layer, then
/// a one-channel score map. With `d_layers = 3` each score sees a 70x70 patch.
#[derive(Clone, Debug)]
pub struct PatchArch {
    convs: Vec<Conv>,
    photo_input: bool,
}

impl PatchArch {
    pub fn new(b: &mut Builder<'_>, prefix: &str, cin: usize, ndf: usize, d_layers: usize) -> Self {
        let mut convs = vec![b.conv(&format!("{prefix}conv0"), cin, ndf, 4, 2, 1, true)];
        let mut prev = ndf;
        for l in 1..d_layers {
            let nf = ndf * (1 << l.min(3));
            convs.push(b.conv(&format!("{prefix}conv{l}"), prev, nf, 4, 2, 1, false));
            prev = nf;
        }
        let nf = ndf * (1 << d_layers.min(3));
        convs.push(b.conv(&format!("{prefix}conv{d_layers}"), prev, nf, 4, 1, 1, false));
        convs.push(b.conv(&format!("{prefix}score"), nf, 1, 4, 1, 1, true));
        Self {
            convs,
            photo_input: cin == 3,
        }
    }

    /// Number of intermediate feature maps.
    pub fn depth(&self) -> usize {
        self.convs.len() - 1
    }

    pub fn forward(&self, s: Scope<'_>, x: Var) -> CriticOutput {
        let t = s.tape;
        let mut h = if self.photo_input { to_signed(t, x) } else { x };
        let mut features = Vec::with_capacity(self.depth());
        let last = self.convs.len() - 1;
        for (i, c) in self.convs[..last].iter().enumerate() {
            h = c.forward(s, h);
            if i > 0 {
                h = t.instance_norm(h, NORM_EPS);
            }
            h = t.leaky_relu(h, SLOPE);
            features.push(h);
        }
        let score = t.sigmoid(self.convs[last].forward(s, h));
        CriticOutput { features, score }
    }
}

/// A bound patch discriminator applied after `downsample` 2x average pools.
pub struct ScaleCritic<'a> {
    arch: &'a PatchArch,
    scope: Scope<'a>,
    downsample: usize,
}

impl Critic for ScaleCritic<'_> {
    fn critique(&self, tape: &Tape, x: Var) -> CriticOutput {
        let mut x = x;
        for _ in 0..self.downsample {
            x = tape.avg_pool2(x);
        }
        self.arch.forward(self.scope, x)
    }
}

/// Single-scale discriminator (D_X on photos, D_Y on semantics).
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub params: ParamSet,
    arch: PatchArch,
}

impl PatchDiscriminator {
    pub fn new(cfg: &NetConfig, in_channels: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, false);
        let arch = PatchArch::new(&mut b, "", in_channels, cfg.ndf, cfg.d_layers);
        Self { params, arch }
    }

    pub fn arch(&self) -> &PatchArch {
        &self.arch
    }
}

impl Module for PatchDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl<'a> Live<'a, PatchDiscriminator> {
    pub fn critic(&self) -> ScaleCritic<'_> {
        ScaleCritic {
            arch: &self.net.arch,
            scope: self.scope(),
            downsample: 0,
        }
    }
}

/// `M` spectrally normalized patch discriminators with separate weights;
/// scale `k` (0-based) sees the input average-pooled `k` times.
#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator {
    pub params: ParamSet,
    scales: Vec<PatchArch>,
    convs: Vec<Conv>,
}

impl MultiScaleDiscriminator {
    pub fn new(cfg: &NetConfig, scales: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, true);
        let scales = (0..scales)
            .map(|k| PatchArch::new(&mut b, &format!("scale{k}."), 3, cfg.ndf, cfg.d_layers))
            .collect();
        let convs = b.finish();
        Self {
            params,
            scales,
            convs,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn convs(&self) -> &[Conv] {
        &self.convs
    }

    pub fn power_iteration(&mut self) {
        super::power_iteration(&mut self.params, &self.convs);
    }
}

impl Module for MultiScaleDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl<'a> Live<'a, MultiScaleDiscriminator> {
    pub fn critics(&self) -> Vec<ScaleCritic<'_>> {
        self.net
            .scales
            .iter()
            .enumerate()
            .map(|(k, arch)| ScaleCritic {
                arch,
                scope: self.scope(),
                downsample: k,
            })
            .collect()
    }
}
