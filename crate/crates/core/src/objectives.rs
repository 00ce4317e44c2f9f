//! Composite objectives of the segmentation part and the synthesis part,
//! assembled from the individual losses with every sub-term kept separately.

use anonet_tensor::{Tape, Var};

use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::mask::SemanticMask;
use crate::mask_algebra::ComponentSet;
use crate::nets::{Critic, FeatureExtractor, Live, ResnetGenerator, SpadeGenerator};

/// Inputs shared by both objectives. Tensors are already on the tape.
pub struct TermInputs<'a> {
    /// Real photos `x`.
    pub x: Var,
    /// Paired masks `y` as one-hot `[N, 11, S, S]`.
    pub y: Var,
    pub y_masks: &'a [&'a SemanticMask],
    /// Reference photos from other identities.
    pub x_tilde: Var,
    pub tilde_masks: &'a [&'a SemanticMask],
}

/// Synthesis-part terms for `G^s(y_hat)`.
pub struct SynthesisTerms {
    pub fake: Var,
    /// Generator side of the per-component adversarial loss.
    pub adv: Var,
    /// Real-image side of the per-component adversarial loss. Constant for
    /// every generator; logged, and used by the discriminator step.
    pub adv_real: Var,
    pub fm: Var,
    pub vgg: Var,
    pub cyc: Var,
    /// `adv + fm + vgg + cyc`.
    pub total: Var,
    pub absent: usize,
}

impl SynthesisTerms {
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("syn.adv", self.adv),
            ("syn.adv_real", self.adv_real),
            ("syn.fm", self.fm),
            ("syn.vgg", self.vgg),
            ("syn.cyc", self.cyc),
            ("syn.total", self.total),
        ]
    }
}

/// Everything `G^s` needs from its surroundings.
pub struct SynthesisContext<'a> {
    pub gs: &'a Live<'a, SpadeGenerator>,
    pub g: &'a Live<'a, ResnetGenerator>,
    pub critics: &'a [&'a dyn Critic],
    pub psi: &'a dyn FeatureExtractor,
    pub set: &'a ComponentSet,
    pub margins: &'a [f64],
}

/// Synthesis objective evaluated on soft semantics `y_hat = G(x)`.
pub fn synthesis_terms(
    tape: &Tape,
    cx: &SynthesisContext<'_>,
    inp: &TermInputs<'_>,
    y_hat: Var,
) -> Result<SynthesisTerms> {
    let fake = cx.gs.net.forward(cx.gs.scope(), y_hat)?;
    let n = tape.shape(y_hat)[0];
    let fake_masks: Vec<SemanticMask> = tape.with_value(y_hat, |v| {
        (0..n).map(|i| SemanticMask::from_scores(v, i)).collect()
    });
    let fake_refs: Vec<&SemanticMask> = fake_masks.iter().collect();

    let (fake_parts, a) = losses::extract_components(tape, fake, &fake_refs, cx.set);
    let (real_parts, b) = losses::extract_components(tape, inp.x, inp.y_masks, cx.set);
    let (ref_parts, _) = losses::extract_components(tape, inp.x_tilde, inp.tilde_masks, cx.set);
    let fake_grid = losses::critique_components(tape, cx.critics, &fake_parts);
    let real_grid = losses::critique_components(tape, cx.critics, &real_parts);
    let ref_grid = losses::critique_components(tape, cx.critics, &ref_parts);
    let (adv, adv_real) = losses::component_adv_terms(tape, &fake_grid, &real_grid);
    let fm = losses::fm_terms(tape, &ref_grid, &fake_grid);
    let vgg = losses::vgg_margin_loss(cx.psi, tape, inp.x, fake, cx.margins)?;
    let recon = cx.g.net.forward(cx.g.scope(), fake)?;
    let cyc = losses::cycle_loss(tape, recon, y_hat)?;
    let total = tape.add_all(&[adv, fm, vgg, cyc]);
    Ok(SynthesisTerms {
        fake,
        adv,
        adv_real,
        fm,
        vgg,
        cyc,
        total,
        absent: a + b,
    })
}

/// Segmentation-part terms: the modified loss of `G` and the loss of `F`.
pub struct SegmentationTerms {
    pub y_hat: Var,
    pub x_rec: Var,
    pub adv_g: Var,
    pub cyc_g: Var,
    pub dist: Var,
    pub syn: SynthesisTerms,
    pub adv_f: Var,
    pub cyc_f: Var,
    /// `adv_g + l_cyc cyc_g + l_s syn.total + l_dist dist`.
    pub total_g: Var,
    /// `adv_f + l_cyc cyc_f`.
    pub total_f: Var,
    /// `total_g + total_f`, minimized jointly by `G` and `F`.
    pub total: Var,
}

impl SegmentationTerms {
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("seg.adv_g", self.adv_g),
            ("seg.cyc_g", self.cyc_g),
            ("seg.dist", self.dist),
            ("seg.syn", self.syn.total),
            ("seg.syn_adv", self.syn.adv),
            ("seg.syn_fm", self.syn.fm),
            ("seg.syn_vgg", self.syn.vgg),
            ("seg.syn_cyc", self.syn.cyc),
            ("seg.adv_f", self.adv_f),
            ("seg.cyc_f", self.cyc_f),
            ("seg.total_g", self.total_g),
            ("seg.total_f", self.total_f),
        ]
    }
}

/// Generator side of the segmentation objective. `dy` judges semantics and
/// `dx` judges photos.
pub fn segmentation_terms(
    tape: &Tape,
    cfg: &LossConfig,
    f: &Live<'_, ResnetGenerator>,
    dx: &dyn Critic,
    dy: &dyn Critic,
    syn: &SynthesisContext<'_>,
    inp: &TermInputs<'_>,
) -> Result<SegmentationTerms> {
    let g = syn.g;
    let y_hat = g.net.forward(g.scope(), inp.x)?;
    let adv_g = losses::adv_loss_generator(tape, dy.critique(tape, y_hat).score);
    let x_rec = f.net.forward(f.scope(), y_hat)?;
    let cyc_g = losses::cycle_loss(tape, x_rec, inp.x)?;
    let dist = losses::cycle_loss(tape, y_hat, inp.y)?;
    let syn_terms = synthesis_terms(tape, syn, inp, y_hat)?;

    let x_from_y = f.net.forward(f.scope(), inp.y)?;
    let adv_f = losses::adv_loss_generator(tape, dx.critique(tape, x_from_y).score);
    let y_rec = g.net.forward(g.scope(), x_from_y)?;
    let cyc_f = losses::cycle_loss(tape, y_rec, inp.y)?;

    let total_g = tape.add_all(&[
        adv_g,
        tape.scale(cyc_g, cfg.lambda_cyc),
        tape.scale(syn_terms.total, cfg.lambda_s),
        tape.scale(dist, cfg.lambda_dist),
    ]);
    let total_f = tape.add(adv_f, tape.scale(cyc_f, cfg.lambda_cyc));
    let total = tape.add(total_g, total_f);
    Ok(SegmentationTerms {
        y_hat,
        x_rec: x_from_y,
        adv_g,
        cyc_g,
        dist,
        syn: syn_terms,
        adv_f,
        cyc_f,
        total_g,
        total_f,
        total,
    })
}
