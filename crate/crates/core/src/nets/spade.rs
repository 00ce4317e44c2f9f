use anonet_tensor::{ParamSet, Var};

use super::layers::{tanh_unit, Builder, Conv, Scope, NORM_EPS};
use super::{check_input, Module, NetConfig};
use crate::error::Result;
use crate::mask::NUM_CLASSES;

const SLOPE: f64 = 0.2;

/// Spatially-adaptive normalization: instance-normalized activations are
/// modulated by a per-pixel scale and shift predicted from the semantics.
#[derive(Clone, Debug)]
struct Spade {
    shared: Conv,
    gamma: Conv,
    beta: Conv,
}

impl Spade {
    fn new(b: &mut Builder<'_>, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            shared: b.conv(
                &format!("{name}.shared"),
                NUM_CLASSES,
                hidden,
                3,
                1,
                1,
                true,
            ),
            gamma: b.conv(&format!("{name}.gamma"), hidden, channels, 3, 1, 1, true),
            beta: b.conv(&format!("{name}.beta"), hidden, channels, 3, 1, 1, true),
        }
    }

    fn forward(&self, s: Scope<'_>, x: Var, seg: Var) -> Var {
        let t = s.tape;
        let normed = t.instance_norm(x, NORM_EPS);
        let actv = t.relu(self.shared.forward(s, seg));
        let gamma = self.gamma.forward(s, actv);
        let beta = self.beta.forward(s, actv);
        let scaled = t.add(normed, t.mul(normed, gamma));
        t.add(scaled, beta)
    }
}

#[derive(Clone, Debug)]
struct SpadeBlock {
    norm0: Spade,
    conv0: Conv,
    norm1: Spade,
    conv1: Conv,
    shortcut: Option<(Spade, Conv)>,
}

impl SpadeBlock {
    fn new(b: &mut Builder<'_>, name: &str, fin: usize, fout: usize, hidden: usize) -> Self {
        let mid = fin.min(fout);
        Self {
            norm0: Spade::new(b, &format!("{name}.norm0"), fin, hidden),
            conv0: b.conv(&format!("{name}.conv0"), fin, mid, 3, 1, 1, true),
            norm1: Spade::new(b, &format!("{name}.norm1"), mid, hidden),
            conv1: b.conv(&format!("{name}.conv1"), mid, fout, 3, 1, 1, true),
            shortcut: (fin != fout).then(|| {
                (
                    Spade::new(b, &format!("{name}.norm_s"), fin, hidden),
                    b.conv(&format!("{name}.conv_s"), fin, fout, 1, 1, 0, false),
                )
            }),
        }
    }

    fn forward(&self, s: Scope<'_>, x: Var, seg: Var) -> Var {
        let t = s.tape;
        let skip = match &self.shortcut {
            Some((n, c)) => c.forward(s, n.forward(s, x, seg)),
            None => x,
        };
        let dx = self
            .conv0
            .forward(s, t.leaky_relu(self.norm0.forward(s, x, seg), SLOPE));
        let dx = self
            .conv1
            .forward(s, t.leaky_relu(self.norm1.forward(s, dx, seg), SLOPE));
        t.add(skip, dx)
    }
}

/// Semantic-to-photo generator. Starts from the semantics pooled down to
/// `image_size / 2^spade_upsamples`, then alternates SPADE residual blocks
/// with nearest-neighbour upsampling. Every convolution is spectrally
/// normalized.
#[derive(Clone, Debug)]
pub struct SpadeGenerator {
    pub params: ParamSet,
    size: usize,
    upsamples: usize,
    stem: Conv,
    blocks: Vec<SpadeBlock>,
    out: Conv,
    convs: Vec<Conv>,
}

impl SpadeGenerator {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        let n = cfg.spade_upsamples;
        let width = |level: usize| cfg.spade_nf << (n - level).min(2);
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, true);
        let stem = b.conv("stem", NUM_CLASSES, width(0), 3, 1, 1, true);
        let blocks = (0..=n)
            .map(|l| {
                let fin = if l == 0 { width(0) } else { width(l - 1) };
                SpadeBlock::new(
                    &mut b,
                    &format!("block{l}"),
                    fin,
                    width(l),
                    cfg.spade_hidden,
                )
            })
            .collect();
        let out = b.conv("out", width(n), 3, 3, 1, 1, true);
        let convs = b.finish();
        Self {
            params,
            size: cfg.image_size,
            upsamples: n,
            stem,
            blocks,
            out,
            convs,
        }
    }

    pub fn convs(&self) -> &[Conv] {
        &self.convs
    }

    pub fn power_iteration(&mut self) {
        super::power_iteration(&mut self.params, &self.convs);
    }

    /// `seg` is `[N, 11, S, S]` (one-hot or soft); output is a photo in `[0, 1]`.
    pub fn forward(&self, s: Scope<'_>, seg: Var) -> Result<Var> {
        check_input(s.tape, seg, NUM_CLASSES, self.size)?;
        let t = s.tape;
        let mut pyramid = vec![seg];
        for _ in 0..self.upsamples {
            let next = t.avg_pool2(*pyramid.last().expect("non-empty"));
            pyramid.push(next);
        }
        let mut h = self.stem.forward(s, pyramid[self.upsamples]);
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = t.upsample2(h);
            }
            h = block.forward(s, h, pyramid[self.upsamples - l]);
        }
        let out = self.out.forward(s, t.leaky_relu(h, SLOPE));
        Ok(tanh_unit(t, out))
    }
}

impl Module for SpadeGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
