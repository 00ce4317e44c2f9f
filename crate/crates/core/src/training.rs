//! One-epoch training procedure: per sample, a joint step on the
//! segmentation generators and their discriminators with the synthesis
//! generator held fixed, then a step on the synthesis generator and its
//! discriminators with the segmentation part held fixed.

use anonet_tensor::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::mask::SemanticMask;
use crate::models::ModelBundle;
use crate::nets::{Critic, Live, Vgg};
use crate::objectives::{segmentation_terms, synthesis_terms, SynthesisContext, TermInputs};
use crate::photo::{self, Photo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Train until this many epochs are complete.
    pub epochs: usize,
    /// Epoch count the learning-rate schedule is laid out over; defaults to
    /// `epochs`. Set it when a run is split across resumes.
    pub schedule_epochs: Option<usize>,
    /// Stop after this many steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1_segmentation: f64,
    pub beta1_synthesis: f64,
    pub beta2: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            schedule_epochs: None,
            max_steps: None,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1_segmentation: 0.5,
            beta1_synthesis: 0.0,
            beta2: 0.999,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for b in [self.beta1_segmentation, self.beta1_synthesis, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`: constant for the first half, then
    /// linear decay towards zero.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let total = total.max(1) as f64;
        let p = step as f64 / total;
        if p < 0.5 {
            self.learning_rate
        } else {
            self.learning_rate * ((1.0 - p) / 0.5).max(0.0)
        }
    }
}

/// One Adam state per trainable network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub g: Adam,
    pub f: Adam,
    pub dx: Adam,
    pub dy: Adam,
    pub gs: Adam,
    pub ds: Adam,
}

impl Optimizers {
    pub fn new(m: &ModelBundle, cfg: &TrainConfig) -> Self {
        let seg = AdamConfig {
            beta1: cfg.beta1_segmentation,
            beta2: cfg.beta2,
            ..Default::default()
        };
        let syn = AdamConfig {
            beta1: cfg.beta1_synthesis,
            beta2: cfg.beta2,
            ..Default::default()
        };
        Self {
            g: Adam::new(&m.g.params, seg),
            f: Adam::new(&m.f.params, seg),
            dx: Adam::new(&m.dx.params, seg),
            dy: Adam::new(&m.dy.params, seg),
            gs: Adam::new(&m.gs.params, syn),
            ds: Adam::new(&m.ds.params, syn),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Adam> {
        Some(match name {
            "g" => &self.g,
            "f" => &self.f,
            "dx" => &self.dx,
            "dy" => &self.dy,
            "gs" => &self.gs,
            "ds" => &self.ds,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Adam> {
        Some(match name {
            "g" => &mut self.g,
            "f" => &mut self.f,
            "dx" => &mut self.dx,
            "dy" => &mut self.dy,
            "gs" => &mut self.gs,
            "ds" => &mut self.ds,
            _ => return None,
        })
    }
}

/// One logged scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

/// A step part that was skipped because of a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub step: u64,
    pub phase: String,
    pub detail: String,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub models: ModelBundle,
    pub optim: Optimizers,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    /// Perceptual margins, one per tapped layer.
    pub margins: Vec<f64>,
}

/// A training batch with its references.
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub y_masks: Vec<SemanticMask>,
    pub x_tilde: Tensor,
    pub tilde_masks: Vec<SemanticMask>,
}

impl Batch {
    pub fn gather(data: &Dataset, items: &[usize], refs: &[usize]) -> Self {
        let xs: Vec<&Photo> = items.iter().map(|&i| &data.get(i).photo).collect();
        let ys: Vec<&SemanticMask> = items.iter().map(|&i| &data.get(i).mask).collect();
        let ts: Vec<&Photo> = refs.iter().map(|&i| &data.get(i).photo).collect();
        Self {
            x: photo::to_tensor(&xs),
            y: SemanticMask::one_hot(&ys),
            y_masks: ys.into_iter().cloned().collect(),
            x_tilde: photo::to_tensor(&ts),
            tilde_masks: refs.iter().map(|&i| data.get(i).mask.clone()).collect(),
        }
    }
}

fn finite_all(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::is_finite)
}

/// Applies an update unless the loss or a gradient is non-finite; restores
/// the previous state if the update itself produced non-finite values.
fn guarded_step(
    params: &mut ParamSet,
    opt: &mut Adam,
    grads: &[Tensor],
    loss: f64,
    lr: f64,
) -> std::result::Result<(), String> {
    if !loss.is_finite() {
        return Err(format!("loss is {loss}"));
    }
    if !finite_all(grads) {
        return Err("non-finite gradient".into());
    }
    let (p_before, o_before) = (params.clone(), opt.clone());
    opt.step(params, grads, lr);
    if !params.params().all(|(_, t)| t.is_finite()) {
        *params = p_before;
        *opt = o_before;
        return Err("update produced non-finite parameters".into());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub state: TrainState,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub records: Vec<LossRecord>,
    pub incidents: Vec<Incident>,
}

impl Trainer {
    pub fn new(state: TrainState, train: TrainConfig, loss: LossConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        if state.margins.len() != state.models.vgg.num_taps() {
            return Err(Error::Config(format!(
                "{} margins for {} perceptual layers",
                state.margins.len(),
                state.models.vgg.num_taps()
            )));
        }
        Ok(Self {
            state,
            train,
            loss,
            seed,
            records: Vec::new(),
            incidents: Vec::new(),
        })
    }

    fn record(&mut self, term: &str, value: f64) {
        self.records.push(LossRecord {
            step: self.state.step,
            term: term.to_string(),
            value,
        });
    }

    fn incident(&mut self, phase: &str, detail: String) {
        log::warn!("step {}: {phase} skipped: {detail}", self.state.step);
        self.incidents.push(Incident {
            step: self.state.step,
            phase: phase.to_string(),
            detail,
        });
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        data.len().div_ceil(self.train.batch_size) as u64
    }

    fn total_steps(&self, data: &Dataset) -> u64 {
        let sched = self.train.schedule_epochs.unwrap_or(self.train.epochs) as u64
            * self.steps_per_epoch(data);
        self.train.max_steps.map_or(sched, |m| m.min(sched.max(1)))
    }

    fn done(&self) -> bool {
        self.train.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Runs epochs until `train.epochs` are complete or `max_steps` is hit.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&mut Self) -> Result<()>,
    ) -> Result<()> {
        while self.state.epoch < self.train.epochs && !self.done() {
            let epoch = self.state.epoch;
            self.train_epoch(data)?;
            // A step limit can end the epoch early; that is not a completed epoch.
            if self.state.epoch > epoch {
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    /// One pass over the dataset in an order and with references drawn from
    /// a generator seeded by `(seed, epoch)`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<()> {
        if data.len() < 2 {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                found: data.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.state.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let total = self.total_steps(data);
        for items in order.chunks(self.train.batch_size) {
            if self.done() {
                return Ok(());
            }
            let refs = items
                .iter()
                .map(|&i| data.sample_reference(&mut rng, i))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::gather(data, items, &refs);
            let lr = self.train.lr_at(self.state.step, total);
            self.train_step(&batch, lr)?;
        }
        self.state.epoch += 1;
        Ok(())
    }

    /// Segmentation part, then synthesis part.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<()> {
        let fakes = self.segmentation_generator_step(batch, lr)?;
        self.segmentation_discriminator_step(batch, &fakes, lr)?;
        self.state.models.gs.power_iteration();
        self.state.models.ds.power_iteration();
        let fake = self.synthesis_generator_step(batch, lr)?;
        self.synthesis_discriminator_step(batch, &fake, lr)?;
        self.state.step += 1;
        Ok(())
    }

    /// Updates `G` and `F` on the modified segmentation objective. Returns
    /// `(G(x), F(y))` for the discriminator step.
    pub fn segmentation_generator_step(
        &mut self,
        batch: &Batch,
        lr: f64,
    ) -> Result<(Tensor, Tensor)> {
        let set = self.loss.component_set()?;
        let (named, total, gg, fg, fakes, clamps) = {
            let m = &self.state.models;
            let tape = Tape::new();
            let g = Live::new(&m.g, &tape, true);
            let f = Live::new(&m.f, &tape, true);
            let dx = Live::new(&m.dx, &tape, false);
            let dy = Live::new(&m.dy, &tape, false);
            let gs = Live::new(&m.gs, &tape, false);
            let ds = Live::new(&m.ds, &tape, false);
            let vgg = Live::new(&m.vgg, &tape, false);
            let critics = ds.critics();
            let critic_refs: Vec<&dyn Critic> = critics.iter().map(|c| c as &dyn Critic).collect();
            let y_refs: Vec<&SemanticMask> = batch.y_masks.iter().collect();
            let t_refs: Vec<&SemanticMask> = batch.tilde_masks.iter().collect();
            let inp = TermInputs {
                x: tape.constant(batch.x.clone()),
                y: tape.constant(batch.y.clone()),
                y_masks: &y_refs,
                x_tilde: tape.constant(batch.x_tilde.clone()),
                tilde_masks: &t_refs,
            };
            let syn = SynthesisContext {
                gs: &gs,
                g: &g,
                critics: &critic_refs,
                psi: &vgg,
                set: &set,
                margins: &self.state.margins,
            };
            let terms = segmentation_terms(
                &tape,
                &self.loss,
                &f,
                &dx.critic(),
                &dy.critic(),
                &syn,
                &inp,
            )?;
            let named: Vec<(&str, f64)> = terms
                .named()
                .into_iter()
                .map(|(n, v)| (n, tape.value(v).item()))
                .collect();
            let total = tape.value(terms.total).item();
            let grads = tape.backward(terms.total);
            let (gg, fg) = (g.grads(&grads), f.grads(&grads));
            let fakes = (
                Tensor::clone(&tape.value(terms.y_hat)),
                Tensor::clone(&tape.value(terms.x_rec)),
            );
            let clamps = tape.clamp_events();
            (named, total, gg, fg, fakes, clamps)
        };

        for (n, v) in named {
            self.record(n, v);
        }
        self.record("seg.log_clamps", clamps as f64);
        let st = &mut self.state;
        let r = guarded_step(&mut st.models.g.params, &mut st.optim.g, &gg, total, lr)
            .and_then(|_| guarded_step(&mut st.models.f.params, &mut st.optim.f, &fg, total, lr));
        if let Err(e) = r {
            self.incident("segmentation generators", e);
        }
        Ok(fakes)
    }

    /// Updates `D_X` and `D_Y` on detached fakes.
    pub fn segmentation_discriminator_step(
        &mut self,
        batch: &Batch,
        fakes: &(Tensor, Tensor),
        lr: f64,
    ) -> Result<()> {
        let (vx, vy, total, gx, gy) = {
            let m = &self.state.models;
            let tape = Tape::new();
            let dx = Live::new(&m.dx, &tape, true);
            let dy = Live::new(&m.dy, &tape, true);
            let (cx, cy) = (dx.critic(), dy.critic());
            let y = tape.constant(batch.y.clone());
            let y_fake = tape.constant(fakes.0.clone());
            let x = tape.constant(batch.x.clone());
            let x_fake = tape.constant(fakes.1.clone());
            let obj_y = losses::adv_loss_discriminator(
                &tape,
                cy.critique(&tape, y).score,
                cy.critique(&tape, y_fake).score,
            );
            let obj_x = losses::adv_loss_discriminator(
                &tape,
                cx.critique(&tape, x).score,
                cx.critique(&tape, x_fake).score,
            );
            let loss = tape.scale(tape.add(obj_x, obj_y), -1.0);
            let (vx, vy, total) = (
                tape.value(obj_x).item(),
                tape.value(obj_y).item(),
                tape.value(loss).item(),
            );
            let grads = tape.backward(loss);
            let (gx, gy) = (dx.grads(&grads), dy.grads(&grads));
            (vx, vy, total, gx, gy)
        };

        self.record("seg.disc_x", vx);
        self.record("seg.disc_y", vy);
        let st = &mut self.state;
        let r = guarded_step(&mut st.models.dx.params, &mut st.optim.dx, &gx, total, lr)
            .and_then(|_| guarded_step(&mut st.models.dy.params, &mut st.optim.dy, &gy, total, lr));
        if let Err(e) = r {
            self.incident("segmentation discriminators", e);
        }
        Ok(())
    }

    /// Updates `G^s` on the synthesis objective with `G` fixed. Returns the
    /// synthesized batch and the masks of `G(x)`.
    pub fn synthesis_generator_step(
        &mut self,
        batch: &Batch,
        lr: f64,
    ) -> Result<(Tensor, Vec<SemanticMask>)> {
        let set = self.loss.component_set()?;
        let (named, total, absent, ggs, fake, fake_masks) = {
            let m = &self.state.models;
            let tape = Tape::new();
            let g = Live::new(&m.g, &tape, false);
            let gs = Live::new(&m.gs, &tape, true);
            let ds = Live::new(&m.ds, &tape, false);
            let vgg = Live::new(&m.vgg, &tape, false);
            let critics = ds.critics();
            let critic_refs: Vec<&dyn Critic> = critics.iter().map(|c| c as &dyn Critic).collect();
            let y_refs: Vec<&SemanticMask> = batch.y_masks.iter().collect();
            let t_refs: Vec<&SemanticMask> = batch.tilde_masks.iter().collect();
            let inp = TermInputs {
                x: tape.constant(batch.x.clone()),
                y: tape.constant(batch.y.clone()),
                y_masks: &y_refs,
                x_tilde: tape.constant(batch.x_tilde.clone()),
                tilde_masks: &t_refs,
            };
            let y_hat = m.g.forward(g.scope(), inp.x)?;
            let n = batch.y_masks.len();
            let fake_masks: Vec<SemanticMask> = tape.with_value(y_hat, |v| {
                (0..n).map(|i| SemanticMask::from_scores(v, i)).collect()
            });
            let syn = SynthesisContext {
                gs: &gs,
                g: &g,
                critics: &critic_refs,
                psi: &vgg,
                set: &set,
                margins: &self.state.margins,
            };
            let terms = synthesis_terms(&tape, &syn, &inp, y_hat)?;
            let named: Vec<(&str, f64)> = terms
                .named()
                .into_iter()
                .map(|(n, v)| (n, tape.value(v).item()))
                .collect();
            let total = tape.value(terms.total).item();
            let absent = terms.absent;
            let grads = tape.backward(terms.total);
            let ggs = gs.grads(&grads);
            let fake = Tensor::clone(&tape.value(terms.fake));
            (named, total, absent, ggs, fake, fake_masks)
        };

        for (n, v) in named {
            self.record(n, v);
        }
        self.record("syn.absent_labels", absent as f64);
        let seg_total = self
            .records
            .iter()
            .rev()
            .find(|r| r.step == self.state.step && r.term == "seg.total_g")
            .map(|r| r.value);
        if let Some(s) = seg_total {
            self.record("gen.total", s + total);
        }
        let st = &mut self.state;
        if let Err(e) = guarded_step(&mut st.models.gs.params, &mut st.optim.gs, &ggs, total, lr) {
            self.incident("synthesis generator", e);
        }
        Ok((fake, fake_masks))
    }

    /// Updates every synthesis discriminator scale on the per-component
    /// adversarial objective.
    pub fn synthesis_discriminator_step(
        &mut self,
        batch: &Batch,
        fake: &(Tensor, Vec<SemanticMask>),
        lr: f64,
    ) -> Result<()> {
        let set = self.loss.component_set()?;
        let (value, total, gds) = {
            let m = &self.state.models;
            let tape = Tape::new();
            let ds = Live::new(&m.ds, &tape, true);
            let critics = ds.critics();
            let critic_refs: Vec<&dyn Critic> = critics.iter().map(|c| c as &dyn Critic).collect();
            let f_refs: Vec<&SemanticMask> = fake.1.iter().collect();
            let y_refs: Vec<&SemanticMask> = batch.y_masks.iter().collect();
            let fake_v = tape.constant(fake.0.clone());
            let real_v = tape.constant(batch.x.clone());
            let adv = losses::component_adv_loss(
                &tape,
                &critic_refs,
                fake_v,
                &f_refs,
                real_v,
                &y_refs,
                &set,
            );
            let obj = tape.add(adv.generator, adv.real);
            let loss = tape.scale(obj, -1.0);
            let (value, total) = (tape.value(obj).item(), tape.value(loss).item());
            let grads = tape.backward(loss);
            let gds = ds.grads(&grads);
            (value, total, gds)
        };

        self.record("syn.disc", value);
        let st = &mut self.state;
        if let Err(e) = guarded_step(&mut st.models.ds.params, &mut st.optim.ds, &gds, total, lr) {
            self.incident("synthesis discriminators", e);
        }
        Ok(())
    }
}

/// Per-layer perceptual distance between two photos, element-mean L1.
pub fn perceptual_distances(vgg: &Vgg, a: &Photo, b: &Photo) -> Vec<f64> {
    let tape = Tape::new();
    let live = Live::new(vgg, &tape, false);
    let x = tape.constant(photo::to_tensor(&[a, b]));
    let feats = vgg.forward(live.scope(), x);
    feats
        .iter()
        .map(|&f| {
            tape.with_value(f, |t| {
                let half = t.len() / 2;
                t.data()[..half]
                    .iter()
                    .zip(&t.data()[half..])
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>()
                    / half as f64
            })
        })
        .collect()
}

/// Margins set to the given percentile of per-layer distances over up to
/// `pairs` random different-identity pairs.
pub fn calibrate_margins(
    vgg: &Vgg,
    data: &Dataset,
    pairs: usize,
    percentile: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            found: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let i = k % data.len();
        idx.push((i, data.sample_reference(&mut rng, i)?));
    }
    let dists = anonet_tensor::par::map_slice(&idx, |&(i, j)| {
        perceptual_distances(vgg, &data.get(i).photo, &data.get(j).photo)
    });
    let layers = vgg.num_taps();
    Ok((0..layers)
        .map(|l| losses::percentile(&dists.iter().map(|d| d[l]).collect::<Vec<_>>(), percentile))
        .collect())
}

impl TrainState {
    pub fn new(models: ModelBundle, train: &TrainConfig, margins: Vec<f64>) -> Self {
        let optim = Optimizers::new(&models, train);
        Self {
            models,
            optim,
            epoch: 0,
            step: 0,
            margins,
        }
    }

    /// Digest per network, for checking which parts a phase touched.
    pub fn digests(&self) -> Vec<(&'static str, String)> {
        crate::models::NETWORK_NAMES
            .iter()
            .map(|&n| {
                (
                    n,
                    self.models.module(n).expect("known name").params().digest(),
                )
            })
            .collect()
    }
}
