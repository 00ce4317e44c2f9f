use anonet_tensor::{ParamSet, Tape, Tensor, Var};

use super::layers::{Builder, Conv, Scope};
use super::{FeatureExtractor, Live, Module};

/// Convolutions per block of the 19-layer VGG (16 convolutions plus three
/// classifier layers, which are not needed here).
pub const VGG19_BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Frozen perceptual feature network. Exposes the first ReLU of every block;
/// blocks are separated by 2x2 pooling.
#[derive(Clone, Debug)]
pub struct Vgg {
    pub params: ParamSet,
    blocks: Vec<Vec<Conv>>,
}

impl Vgg {
    /// `blocks[b]` lists the output width of each conv in block `b`.
    pub fn new(blocks: &[Vec<usize>], seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, false);
        let mut cin = 3;
        let blocks = blocks
            .iter()
            .enumerate()
            .map(|(bi, widths)| {
                widths
                    .iter()
                    .enumerate()
                    .map(|(ci, &w)| {
                        let c = b.conv(&format!("features.{bi}.{ci}"), cin, w, 3, 1, 1, true);
                        cin = w;
                        c
                    })
                    .collect()
            })
            .collect();
        Self { params, blocks }
    }

    /// 19-layer layout with one width per block.
    pub fn vgg19(widths: &[usize], seed: u64) -> Self {
        let blocks: Vec<Vec<usize>> = VGG19_BLOCKS
            .iter()
            .zip(widths)
            .map(|(&n, &w)| vec![w; n])
            .collect();
        Self::new(&blocks, seed)
    }

    /// Number of exposed layers (`|S_I|`).
    pub fn num_taps(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, s: Scope<'_>, x: Var) -> Vec<Var> {
        let t = s.tape;
        let (n, _, h, w) = t.with_value(x, |v| v.dims4());
        let hw = h * w;
        let scale = Tensor::from_fn(&[n, 3, h, w], |i| 1.0 / STD[(i / hw) % 3]);
        let shift = Tensor::from_fn(&[n, 3, h, w], |i| -MEAN[(i / hw) % 3] / STD[(i / hw) % 3]);
        let shifted = t.mul_const(x, scale);
        let mut h = t.add(shifted, t.constant(shift));
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                h = t.avg_pool2(h);
            }
            for (ci, conv) in block.iter().enumerate() {
                h = t.relu(conv.forward(s, h));
                if ci == 0 {
                    taps.push(h);
                }
            }
        }
        taps
    }
}

impl Module for Vgg {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl FeatureExtractor for Live<'_, Vgg> {
    fn features(&self, _tape: &Tape, x: Var) -> Vec<Var> {
        self.net.forward(self.scope(), x)
    }
}
