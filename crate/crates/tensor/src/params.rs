use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Index of a non-trainable state tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

/// Named trainable tensors of one network plus its non-trainable buffers
/// (power-iteration vectors and the like).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push((name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn push_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces a parameter or buffer by name. Returns false when the name is
    /// unknown or the shape differs.
    pub fn assign(&mut self, name: &str, value: Tensor) -> bool {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name);
        match slot {
            Some((_, t)) if t.shape() == value.shape() => {
                *t = value;
                true
            }
            _ => false,
        }
    }

    /// Records every parameter on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Digest over names, parameter values and buffer values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().chain(&self.buffers) {
            h.update(name.as_bytes());
            h.update(t.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of a [`ParamSet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Samples from `N(0, std^2)`.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// He initialisation for a conv weight `[out, in, kh, kw]`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
