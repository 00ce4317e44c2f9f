use anonet_tensor::{ParamSet, Var};

use super::layers::{tanh_unit, to_signed, Builder, Conv, Scope, NORM_EPS};
use super::{check_input, Module, NetConfig};
use crate::error::Result;
use crate::mask::NUM_CLASSES;

/// What the generator emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorHead {
    /// Photo in, per-pixel class probabilities out (G).
    Segmentation,
    /// Soft semantics in, photo in `[0, 1]` out (F).
    Photo,
}

/// Encoder, residual blocks, decoder. Upsampling is nearest-neighbour
/// followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    pub params: ParamSet,
    head_kind: GeneratorHead,
    size: usize,
    stem: Conv,
    downs: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    ups: Vec<Conv>,
    head: Conv,
}

impl ResnetGenerator {
    pub fn new(cfg: &NetConfig, head_kind: GeneratorHead, seed: u64) -> Self {
        let (cin, cout) = match head_kind {
            GeneratorHead::Segmentation => (3, NUM_CLASSES),
            GeneratorHead::Photo => (NUM_CLASSES, 3),
        };
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, false);
        let f = cfg.ngf;
        let stem = b.conv("stem", cin, f, 7, 1, 0, false);
        let downs = vec![
            b.conv("down0", f, 2 * f, 3, 2, 1, false),
            b.conv("down1", 2 * f, 4 * f, 3, 2, 1, false),
        ];
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                (
                    b.conv(&format!("block{i}.a"), 4 * f, 4 * f, 3, 1, 0, false),
                    b.conv(&format!("block{i}.b"), 4 * f, 4 * f, 3, 1, 0, false),
                )
            })
            .collect();
        let ups = vec![
            b.conv("up0", 4 * f, 2 * f, 3, 1, 1, false),
            b.conv("up1", 2 * f, f, 3, 1, 1, false),
        ];
        let head = b.conv("head", f, cout, 7, 1, 0, true);
        Self {
            params,
            head_kind,
            size: cfg.image_size,
            stem,
            downs,
            blocks,
            ups,
            head,
        }
    }

    pub fn head_kind(&self) -> GeneratorHead {
        self.head_kind
    }

    pub fn input_channels(&self) -> usize {
        match self.head_kind {
            GeneratorHead::Segmentation => 3,
            GeneratorHead::Photo => NUM_CLASSES,
        }
    }

    pub fn forward(&self, s: Scope<'_>, x: Var) -> Result<Var> {
        check_input(s.tape, x, self.input_channels(), self.size)?;
        let t = s.tape;
        let norm_relu = |v: Var| t.relu(t.instance_norm(v, NORM_EPS));
        let mut h = match self.head_kind {
            GeneratorHead::Segmentation => to_signed(t, x),
            GeneratorHead::Photo => x,
        };
        h = norm_relu(self.stem.forward(s, t.reflect_pad(h, 3)));
        for d in &self.downs {
            h = norm_relu(d.forward(s, h));
        }
        for (a, b) in &self.blocks {
            let r = norm_relu(a.forward(s, t.reflect_pad(h, 1)));
            let r = t.instance_norm(b.forward(s, t.reflect_pad(r, 1)), NORM_EPS);
            h = t.add(h, r);
        }
        for u in &self.ups {
            h = norm_relu(u.forward(s, t.upsample2(h)));
        }
        let out = self.head.forward(s, t.reflect_pad(h, 3));
        Ok(match self.head_kind {
            GeneratorHead::Segmentation => t.softmax_channels(out),
            GeneratorHead::Photo => tanh_unit(t, out),
        })
    }
}

impl Module for ResnetGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
