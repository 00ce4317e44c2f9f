use anonet_tensor::params::he_normal;
use anonet_tensor::{Bound, BufferId, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameters of one network as seen from a tape.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamSet,
    pub bound: &'a Bound,
}

/// 2-D convolution, optionally spectrally normalized.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    u: Option<BufferId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn forward(&self, s: Scope<'_>, x: Var) -> Var {
        let mut w = s.bound.var(self.w);
        if let Some(u) = self.u {
            w = s.tape.spectral_normalize(w, s.params.buffer(u).data());
        }
        s.tape
            .conv2d(x, w, self.b.map(|b| s.bound.var(b)), self.stride, self.pad)
    }

    pub fn is_spectral(&self) -> bool {
        self.u.is_some()
    }

    /// `sigma = |W^T u|` for the current `u`, the divisor used in `forward`.
    pub fn sigma(&self, params: &ParamSet) -> Option<f64> {
        let u = params.buffer(self.u?);
        let w = params.get(self.w);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let v = wt_times(w.data(), u.data(), rows, cols);
        Some(norm(&v))
    }

    pub fn weight<'p>(&self, params: &'p ParamSet) -> &'p Tensor {
        params.get(self.w)
    }

    /// One power-iteration refresh of `u`; no-op without spectral norm.
    pub fn power_iteration(&self, params: &mut ParamSet) {
        let Some(uid) = self.u else { return };
        let w = params.get(self.w);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let mut v = wt_times(w.data(), params.buffer(uid).data(), rows, cols);
        normalize(&mut v);
        let mut u: Vec<f64> = w
            .data()
            .chunks(cols)
            .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        normalize(&mut u);
        params.buffer_mut(uid).data_mut().copy_from_slice(&u);
    }
}

fn wt_times(w: &[f64], u: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (vc, &wc) in v.iter_mut().zip(row) {
            *vc += wc * u[r];
        }
    }
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v).max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Allocates layers into a parameter set with deterministic initialisation.
pub struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
    spectral: bool,
    convs: Vec<Conv>,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamSet, seed: u64, spectral: bool) -> Self {
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spectral,
            convs: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv {
        let w = self.params.push(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], &mut self.rng),
        );
        let b = bias.then(|| {
            self.params
                .push(format!("{name}.bias"), Tensor::zeros(&[cout]))
        });
        let u = self.spectral.then(|| {
            let mut u = anonet_tensor::params::normal(&[cout], 1.0, &mut self.rng).into_data();
            normalize(&mut u);
            self.params
                .push_buffer(format!("{name}.sn_u"), Tensor::new(&[cout], u))
        });
        let conv = Conv {
            w,
            b,
            u,
            stride,
            pad,
        };
        for _ in 0..3 {
            conv.power_iteration(self.params);
        }
        self.convs.push(conv.clone());
        conv
    }

    /// Every conv created so far.
    pub fn finish(self) -> Vec<Conv> {
        self.convs
    }
}

/// Maps an image in `[0, 1]` to `[-1, 1]`.
pub(crate) fn to_signed(t: &Tape, x: Var) -> Var {
    let s = t.scale(x, 2.0);
    t.add_scalar(s, -1.0)
}

/// `tanh` output rescaled from `[-1, 1]` to `[0, 1]`.
pub(crate) fn tanh_unit(t: &Tape, x: Var) -> Var {
    let y = t.tanh(x);
    let y = t.add_scalar(y, 1.0);
    t.scale(y, 0.5)
}

pub(crate) const NORM_EPS: f64 = 1e-5;
