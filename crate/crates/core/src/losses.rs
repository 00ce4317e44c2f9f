//! Adversarial, cycle, margin-perceptual, per-component adversarial and
//! cross-identity feature-matching losses. All L1 terms are element means.

use anonet_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SemanticMask;
use crate::mask_algebra::{component_indicator, ComponentSet};
use crate::nets::{Critic, CriticOutput, FeatureExtractor};

/// Lower bound applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-7;

/// Loss weights and the sets the modified losses range over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cyc: f64,
    pub lambda_s: f64,
    pub lambda_dist: f64,
    /// One margin per perceptual layer. Empty means calibrate before training.
    pub margins: Vec<f64>,
    /// Percentile of different-identity distances used for calibration.
    pub margin_percentile: f64,
    /// Labels the synthesis discriminators look at.
    pub components: Vec<u8>,
    /// Number of synthesis discriminator scales.
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_s: 10.0,
            lambda_dist: 10.0,
            margins: Vec::new(),
            margin_percentile: 25.0,
            components: vec![1, 2, 3, 6],
            scales: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_s", self.lambda_s),
            ("lambda_dist", self.lambda_dist),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if self.margins.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(
                "margins must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.margin_percentile) {
            return Err(Error::Config(
                "margin_percentile must lie in [0, 100]".into(),
            ));
        }
        if self.scales == 0 {
            return Err(Error::Config("scales must be at least 1".into()));
        }
        self.component_set().map(|_| ())
    }

    pub fn component_set(&self) -> Result<ComponentSet> {
        ComponentSet::new(self.components.clone())
    }
}

fn check_same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        let dims = |s: &[usize]| {
            (
                s.last().copied().unwrap_or(0) as u32,
                s.iter().rev().nth(1).copied().unwrap_or(0) as u32,
            )
        };
        return Err(Error::ShapeMismatch {
            what: "loss operands",
            expected: dims(&sa),
            found: dims(&sb),
        });
    }
    Ok(())
}

/// Generator side of the adversarial loss: `mean log(1 - D(fake))`.
pub fn adv_loss_generator(tape: &Tape, fake_score: Var) -> Var {
    tape.mean(tape.log(tape.one_minus(fake_score), LOG_FLOOR))
}

/// `mean log D(real) + mean log(1 - D(fake))`; discriminators maximize it.
pub fn adv_loss_discriminator(tape: &Tape, real_score: Var, fake_score: Var) -> Var {
    let real = tape.mean(tape.log(real_score, LOG_FLOOR));
    tape.add(real, adv_loss_generator(tape, fake_score))
}

/// Mean absolute difference.
pub fn cycle_loss(tape: &Tape, recon: Var, original: Var) -> Result<Var> {
    check_same_shape(tape, recon, original)?;
    Ok(tape.mean(tape.abs(tape.sub(recon, original))))
}

/// Sum over layers of `max(0, mean|psi_i(x_syn) - psi_i(x)| - eps_i)`,
/// averaged over the batch.
pub fn vgg_margin_terms(
    tape: &Tape,
    syn_features: &[Var],
    real_features: &[Var],
    margins: &[f64],
) -> Result<Var> {
    if syn_features.len() != real_features.len() || syn_features.len() != margins.len() {
        return Err(Error::Config(format!(
            "{} perceptual layers but {} margins",
            syn_features.len(),
            margins.len()
        )));
    }
    let per_layer: Vec<Var> = syn_features
        .iter()
        .zip(real_features)
        .zip(margins)
        .map(|((&s, &r), &eps)| {
            let d = tape.sample_mean(tape.abs(tape.sub(s, r)));
            tape.relu(tape.add_scalar(d, -eps))
        })
        .collect();
    Ok(tape.mean(tape.add_all(&per_layer)))
}

pub fn vgg_margin_loss(
    psi: &dyn FeatureExtractor,
    tape: &Tape,
    x: Var,
    x_syn: Var,
    margins: &[f64],
) -> Result<Var> {
    check_same_shape(tape, x, x_syn)?;
    let real = psi.features(tape, x);
    let syn = psi.features(tape, x_syn);
    vgg_margin_terms(tape, &syn, &real, margins)
}

/// `xi_i` for each label of the set, applied to a batch with its masks.
/// Returns the extractions and how many (sample, label) pairs were empty.
pub fn extract_components(
    tape: &Tape,
    images: Var,
    masks: &[&SemanticMask],
    set: &ComponentSet,
) -> (Vec<Var>, usize) {
    let absent = set
        .labels()
        .iter()
        .map(|&l| masks.iter().filter(|m| !m.contains(l)).count())
        .sum();
    let parts = set
        .labels()
        .iter()
        .map(|&l| tape.mul_const(images, component_indicator(masks, l)))
        .collect();
    (parts, absent)
}

/// Critic outputs indexed `[scale][component]`.
pub type CriticGrid = Vec<Vec<CriticOutput>>;

pub fn critique_components(tape: &Tape, critics: &[&dyn Critic], parts: &[Var]) -> CriticGrid {
    critics
        .iter()
        .map(|c| parts.iter().map(|&p| c.critique(tape, p)).collect())
        .collect()
}

fn grid_average(tape: &Tape, grid: &CriticGrid, f: impl Fn(&CriticOutput) -> Var) -> Var {
    let m = grid.len() as f64;
    let per_scale: Vec<Var> = grid
        .iter()
        .map(|row| {
            let terms: Vec<Var> = row.iter().map(&f).collect();
            tape.scale(tape.add_all(&terms), 1.0 / terms.len() as f64)
        })
        .collect();
    tape.scale(tape.add_all(&per_scale), 1.0 / m)
}

/// Per-component adversarial loss from precomputed critic outputs.
/// Returns `(generator term, real term)`; the discriminators maximize their
/// sum.
pub fn component_adv_terms(tape: &Tape, fake: &CriticGrid, real: &CriticGrid) -> (Var, Var) {
    let gen = grid_average(tape, fake, |o| adv_loss_generator(tape, o.score));
    let real = grid_average(tape, real, |o| tape.mean(tape.log(o.score, LOG_FLOOR)));
    (gen, real)
}

/// Result of [`component_adv_loss`].
pub struct ComponentAdv {
    pub generator: Var,
    pub real: Var,
    /// (sample, label) pairs whose extraction was all zero.
    pub absent: usize,
}

pub fn component_adv_loss(
    tape: &Tape,
    critics: &[&dyn Critic],
    fake: Var,
    fake_masks: &[&SemanticMask],
    real: Var,
    real_masks: &[&SemanticMask],
    set: &ComponentSet,
) -> ComponentAdv {
    let (fake_parts, a) = extract_components(tape, fake, fake_masks, set);
    let (real_parts, b) = extract_components(tape, real, real_masks, set);
    let fg = critique_components(tape, critics, &fake_parts);
    let rg = critique_components(tape, critics, &real_parts);
    let (generator, real) = component_adv_terms(tape, &fg, &rg);
    ComponentAdv {
        generator,
        real,
        absent: a + b,
    }
}

/// Feature matching between component extractions of the reference face
/// and of the synthesized face, from precomputed critic outputs.
pub fn fm_terms(tape: &Tape, reference: &CriticGrid, fake: &CriticGrid) -> Var {
    let m = reference.len() as f64;
    let per_scale: Vec<Var> = reference
        .iter()
        .zip(fake)
        .map(|(rrow, frow)| {
            let s = rrow.len() as f64;
            let layers = rrow[0].features.len();
            let per_layer: Vec<Var> = (0..layers)
                .map(|t| {
                    let per_comp: Vec<Var> = rrow
                        .iter()
                        .zip(frow)
                        .map(|(r, f)| tape.mean(tape.abs(tape.sub(r.features[t], f.features[t]))))
                        .collect();
                    tape.scale(tape.add_all(&per_comp), 1.0 / s)
                })
                .collect();
            tape.add_all(&per_layer)
        })
        .collect();
    tape.scale(tape.add_all(&per_scale), 1.0 / m)
}

pub fn fm_loss_cross_identity(
    tape: &Tape,
    critics: &[&dyn Critic],
    fake: Var,
    fake_masks: &[&SemanticMask],
    reference: Var,
    reference_masks: &[&SemanticMask],
    set: &ComponentSet,
) -> Var {
    let (fake_parts, _) = extract_components(tape, fake, fake_masks, set);
    let (ref_parts, _) = extract_components(tape, reference, reference_masks, set);
    let fg = critique_components(tape, critics, &fake_parts);
    let rg = critique_components(tape, critics, &ref_parts);
    fm_terms(tape, &rg, &fg)
}

/// Linear-interpolated percentile of `values` (0..=100).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use anonet_tensor::Tensor;

    fn grid(tape: &Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::new(&[1, 1, 1, v.len()], v.to_vec()))
    }

    #[test]
    fn adversarial_closed_forms() {
        let t = Tape::new();
        let half = grid(&t, &[0.5; 4]);
        assert!((t.value(adv_loss_generator(&t, half)).item() - 0.5f64.ln()).abs() < 1e-12);
        let zero = grid(&t, &[0.0; 4]);
        assert_eq!(t.value(adv_loss_generator(&t, zero)).item(), 0.0);
        let mixed = grid(&t, &[0.25, 0.75]);
        let v = t.value(adv_loss_generator(&t, mixed)).item();
        assert!((v - (0.75f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!((v + 0.8370).abs() < 1e-4);
        let d = adv_loss_discriminator(&t, grid(&t, &[0.9]), grid(&t, &[0.2]));
        assert!((t.value(d).item() + 0.3285).abs() < 1e-4);
        let perfect = adv_loss_discriminator(&t, grid(&t, &[1.0]), grid(&t, &[0.0]));
        assert_eq!(t.value(perfect).item(), 0.0);
        let both_half = adv_loss_discriminator(&t, half, half);
        assert!((t.value(both_half).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_probability_is_clamped_and_counted() {
        let t = Tape::new();
        let one = grid(&t, &[1.0, 0.5]);
        let v = t.value(adv_loss_generator(&t, one)).item();
        assert!(v.is_finite());
        assert_eq!(t.clamp_events(), 1);
    }

    #[test]
    fn cycle_values() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let b = t.leaf(Tensor::ones(&[1, 1, 2, 2]));
        assert_eq!(t.value(cycle_loss(&t, a, b).unwrap()).item(), 1.0);
        assert_eq!(t.value(cycle_loss(&t, a, a).unwrap()).item(), 0.0);
        let c = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.4, 0.0, 0.0]));
        assert!((t.value(cycle_loss(&t, a, c).unwrap()).item() - 0.1).abs() < 1e-15);
        let wrong = t.leaf(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(
            cycle_loss(&t, a, wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn margin_hinge_arithmetic() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let b = t.leaf(Tensor::full(&[1, 2, 1, 1], 0.5));
        let v = vgg_margin_terms(&t, &[b], &[a], &[0.2]).unwrap();
        assert!((t.value(v).item() - 0.3).abs() < 1e-12);
        let v = vgg_margin_terms(&t, &[b], &[a], &[0.7]).unwrap();
        assert_eq!(t.value(v).item(), 0.0);
        assert!(vgg_margin_terms(&t, &[b], &[a], &[]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0, 5.0], 25.0), 2.0);
        assert_eq!(percentile(&[0.0, 1.0], 25.0), 0.25);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.lambda_s = -1.0;
        assert!(c.validate().is_err());
        let c = LossConfig {
            components: (1..=10).collect(),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
