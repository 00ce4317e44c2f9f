//! Procedural face corpus: 19-label annotation masks and matching photos
//! drawn from per-identity shape and colour parameters. Used for desk-scale
//! training, tests and benchmarks.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, FaceSample};
use crate::error::{Error, Result};
use crate::mask::reduce_classes;
use crate::photo;

/// Source annotation ids (19-label space).
pub mod src {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const NOSE: u8 = 2;
    pub const EYE_G: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const L_BROW: u8 = 6;
    pub const R_BROW: u8 = 7;
    pub const L_EAR: u8 = 8;
    pub const R_EAR: u8 = 9;
    pub const MOUTH: u8 = 10;
    pub const U_LIP: u8 = 11;
    pub const L_LIP: u8 = 12;
    pub const HAIR: u8 = 13;
    pub const HAT: u8 = 14;
    pub const EAR_R: u8 = 15;
    pub const NECK_L: u8 = 16;
    pub const NECK: u8 = 17;
    pub const CLOTH: u8 = 18;
}

const SKIN_TONES: [[f64; 3]; 4] = [
    [224.0, 172.0, 140.0],
    [200.0, 150.0, 120.0],
    [236.0, 188.0, 160.0],
    [160.0, 110.0, 80.0],
];
const HAIR_COLOURS: [[f64; 3]; 3] = [[40.0, 30.0, 25.0], [55.0, 38.0, 28.0], [25.0, 25.0, 30.0]];
const BACKGROUNDS: [[f64; 3]; 4] = [
    [70.0, 110.0, 170.0],
    [80.0, 140.0, 90.0],
    // Cool grey: per-channel noise on neutral grey can reach the skin Cr band.
    [120.0, 128.0, 136.0],
    [60.0, 80.0, 120.0],
];
const CLOTHES: [[f64; 3]; 3] = [[30.0, 40.0, 90.0], [90.0, 90.0, 100.0], [30.0, 70.0, 40.0]];

/// Shape and colour parameters shared by all images of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eye: [f64; 3],
    pub lip: [f64; 3],
    pub face_w: f64,
    pub face_h: f64,
    pub eye_gap: f64,
    pub eye_size: f64,
    pub nose_len: f64,
    pub mouth_w: f64,
    pub hair_volume: f64,
    pub glasses: bool,
    pub hat: bool,
}

impl Identity {
    pub fn random(rng: &mut impl Rng) -> Self {
        let jitter = |rng: &mut dyn rand::RngCore, c: [f64; 3], a: f64| {
            c.map(|v| (v + rng.random_range(-a..=a)).clamp(0.0, 255.0))
        };
        let skin = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
        let hair = HAIR_COLOURS[rng.random_range(0..HAIR_COLOURS.len())];
        Self {
            skin: jitter(rng, skin, 4.0),
            hair: jitter(rng, hair, 8.0),
            eye: jitter(rng, [50.0, 40.0, 35.0], 15.0),
            lip: jitter(rng, [170.0, 80.0, 85.0], 10.0),
            face_w: rng.random_range(0.26..0.34),
            face_h: rng.random_range(0.34..0.42),
            eye_gap: rng.random_range(0.09..0.14),
            eye_size: rng.random_range(0.035..0.055),
            nose_len: rng.random_range(0.07..0.12),
            mouth_w: rng.random_range(0.07..0.12),
            hair_volume: rng.random_range(0.02..0.08),
            glasses: rng.random_bool(0.2),
            hat: rng.random_bool(0.1),
        }
    }
}

/// Per-image pose, background and lighting.
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub background: [f64; 3],
    pub cloth: [f64; 3],
    pub light: f64,
    pub noise_seed: u64,
}

impl Shot {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            cx: rng.random_range(0.45..0.55),
            cy: rng.random_range(0.45..0.52),
            scale: rng.random_range(0.9..1.1),
            background: BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())],
            cloth: CLOTHES[rng.random_range(0..CLOTHES.len())],
            light: rng.random_range(-0.15..0.15),
            noise_seed: rng.random(),
        }
    }
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Source label at normalised coordinates `(u, v)` in `[0, 1]^2`.
pub fn label_at(id: &Identity, shot: &Shot, u: f64, v: f64) -> u8 {
    let s = shot.scale;
    let (cx, cy) = (shot.cx, shot.cy);
    let (fw, fh) = (id.face_w * s / 2.0, id.face_h * s / 2.0);
    let rel = |a: f64| a * s;
    let eye_y = cy - rel(0.04);
    let eye_dx = rel(id.eye_gap) / 2.0 + rel(id.eye_size) * 0.6;
    let in_face = inside_ellipse(u, v, cx, cy, fw, fh);

    if id.hat && v < cy - fh * 0.55 && inside_ellipse(u, v, cx, cy - fh * 0.7, fw * 1.15, fh * 0.6)
    {
        return src::HAT;
    }
    if id.glasses && !in_face_feature(id, shot, u, v) {
        for side in [-1.0, 1.0] {
            let ex = cx + side * eye_dx;
            let d = ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt();
            let r = rel(id.eye_size) * 1.5;
            if (d - r).abs() < rel(0.008)
                || (v - eye_y).abs() < rel(0.006) && (u - cx).abs() < eye_dx - r
            {
                return src::EYE_G;
            }
        }
    }
    if in_face {
        if let Some(l) = feature_label(id, shot, u, v) {
            return l;
        }
        if v < cy - fh * 0.55 && !inside_ellipse(u, v, cx, cy + fh * 0.08, fw * 0.95, fh * 0.92) {
            return src::HAIR;
        }
        return src::SKIN;
    }
    for (side, label) in [(-1.0, src::L_EAR), (1.0, src::R_EAR)] {
        if inside_ellipse(u, v, cx + side * fw * 1.02, cy, rel(0.03), rel(0.06)) {
            if inside_ellipse(
                u,
                v,
                cx + side * fw * 1.02,
                cy + rel(0.065),
                rel(0.008),
                rel(0.008),
            ) {
                return src::EAR_R;
            }
            return label;
        }
    }
    if inside_ellipse(
        u,
        v,
        cx,
        cy - fh * 0.15,
        fw + rel(id.hair_volume),
        fh * 0.95 + rel(id.hair_volume),
    ) && v < cy
    {
        return src::HAIR;
    }
    let neck_top = cy + fh * 0.7;
    if v >= neck_top && (u - cx).abs() < fw * 0.5 {
        if v > cy + fh * 1.25 {
            return src::CLOTH;
        }
        if (v - (cy + fh * 1.15)).abs() < rel(0.008) {
            return src::NECK_L;
        }
        return src::NECK;
    }
    if v > cy + fh * 1.25 && (u - cx).abs() < fw * 1.6 {
        return src::CLOTH;
    }
    src::BACKGROUND
}

fn in_face_feature(id: &Identity, shot: &Shot, u: f64, v: f64) -> bool {
    feature_label(id, shot, u, v).is_some()
}

fn feature_label(id: &Identity, shot: &Shot, u: f64, v: f64) -> Option<u8> {
    let s = shot.scale;
    let (cx, cy) = (shot.cx, shot.cy);
    let rel = |a: f64| a * s;
    let eye_y = cy - rel(0.04);
    let eye_dx = rel(id.eye_gap) / 2.0 + rel(id.eye_size) * 0.6;
    for (side, eye, brow) in [
        (-1.0, src::L_EYE, src::L_BROW),
        (1.0, src::R_EYE, src::R_BROW),
    ] {
        let ex = cx + side * eye_dx;
        if inside_ellipse(u, v, ex, eye_y, rel(id.eye_size), rel(id.eye_size) * 0.55) {
            return Some(eye);
        }
        if inside_ellipse(
            u,
            v,
            ex,
            eye_y - rel(0.045),
            rel(id.eye_size) * 1.2,
            rel(0.012),
        ) {
            return Some(brow);
        }
    }
    let nose_top = eye_y + rel(0.01);
    let nose_bot = nose_top + rel(id.nose_len);
    if v >= nose_top && v <= nose_bot {
        let half = rel(0.012) + (v - nose_top) / (nose_bot - nose_top) * rel(0.02);
        if (u - cx).abs() <= half {
            return Some(src::NOSE);
        }
    }
    let my = nose_bot + rel(0.045);
    let mw = rel(id.mouth_w) / 2.0;
    if inside_ellipse(u, v, cx, my, mw, rel(0.028)) {
        if inside_ellipse(u, v, cx, my, mw * 0.8, rel(0.008)) {
            return Some(src::MOUTH);
        }
        return Some(if v < my { src::U_LIP } else { src::L_LIP });
    }
    None
}

fn label_colour(id: &Identity, shot: &Shot, label: u8) -> [f64; 3] {
    let shade = |c: [f64; 3], f: f64| c.map(|v| v * f);
    match label {
        src::SKIN | src::L_EAR | src::R_EAR => id.skin,
        src::NOSE => shade(id.skin, 0.93),
        src::NECK => shade(id.skin, 0.88),
        src::L_EYE | src::R_EYE => id.eye,
        src::L_BROW | src::R_BROW | src::HAIR => id.hair,
        src::MOUTH => [90.0, 30.0, 35.0],
        src::U_LIP | src::L_LIP => id.lip,
        src::EYE_G => [20.0, 20.0, 20.0],
        src::HAT => [120.0, 30.0, 30.0],
        src::EAR_R | src::NECK_L => [230.0, 210.0, 90.0],
        src::CLOTH => shot.cloth,
        _ => shot.background,
    }
}

/// Renders a `size x size` photo and its 19-label mask.
pub fn render(id: &Identity, shot: &Shot, size: u32) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(shot.noise_seed);
    let n = size as f64;
    let mut mask = GrayImage::new(size, size);
    let mut photo = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let label = label_at(id, shot, u, v);
            mask.put_pixel(x, y, Luma([label]));
            let light = 1.0 + shot.light * (u - 0.5) * 2.0;
            let base = label_colour(id, shot, label);
            let face_like = matches!(
                label,
                src::SKIN | src::NOSE | src::NECK | src::L_EAR | src::R_EAR
            );
            // Keep skin inside the skin-tone rule: mild lighting, small noise.
            let (gain, amp) = if face_like {
                (1.0 + (light - 1.0) * 0.3, 2.0)
            } else {
                (light, 6.0)
            };
            let px = base.map(|c| {
                (c * gain + rng.random_range(-amp..=amp))
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            photo.put_pixel(x, y, Rgb(px));
        }
    }
    (photo, mask)
}

/// Writes `identities x per_identity` photo/mask pairs in the raw layout
/// expected by dataset preparation, plus `identities.csv`.
pub fn write_corpus(
    root: &Path,
    identities: usize,
    per_identity: usize,
    size: u32,
    seed: u64,
) -> Result<usize> {
    let photos = root.join("photos");
    let masks = root.join("masks");
    for d in [&photos, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("stem,identity\n");
    let mut count = 0;
    for i in 0..identities {
        let id = Identity::random(&mut rng);
        for k in 0..per_identity {
            let shot = Shot::random(&mut rng);
            let (photo, mask) = render(&id, &shot, size);
            let stem = format!("id{i:03}_{k:02}");
            photo.save(photos.join(format!("{stem}.png")))?;
            mask.save(masks.join(format!("{stem}.png")))?;
            csv.push_str(&format!("{stem},person{i:03}\n"));
            count += 1;
        }
    }
    let path = root.join("identities.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(count)
}

/// `identities x per_identity` rendered samples at `size`, reduced to the
/// 11-class space, without touching the disk.
pub fn toy_dataset(
    identities: usize,
    per_identity: usize,
    size: u32,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(identities * per_identity);
    for i in 0..identities {
        let id = Identity::random(&mut rng);
        for k in 0..per_identity {
            let (photo, mask) = render(&id, &Shot::random(&mut rng), size);
            let mask = reduce_classes(&mask)?;
            samples.push(FaceSample::new(
                photo::from_rgb8(&photo),
                mask,
                format!("person{i:03}"),
                size,
                format!("id{i:03}_{k:02}"),
            )?);
        }
    }
    Ok(Dataset::from_samples(samples))
}

/// A face of the given skin tone centred at `(cx, cy)` with radius `r` on a
/// flat background; used to build detector fixtures with known geometry.
pub fn disc_fixture(width: u32, height: u32, cx: f64, cy: f64, r: f64) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
        if d <= r {
            Rgb([224, 172, 140])
        } else {
            Rgb([70, 110, 170])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{is_skin, FaceDetector, SkinToneDetector};

    #[test]
    fn render_is_deterministic_and_uses_all_facial_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = Identity::random(&mut rng);
        let shot = Shot::random(&mut rng);
        let (p1, m1) = render(&id, &shot, 96);
        let (p2, m2) = render(&id, &shot, 96);
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
        for l in [
            src::SKIN,
            src::NOSE,
            src::L_EYE,
            src::R_EYE,
            src::L_BROW,
            src::MOUTH,
            src::U_LIP,
            src::L_LIP,
            src::HAIR,
            src::NECK,
        ] {
            assert!(m1.pixels().any(|p| p.0[0] == l), "label {l} missing");
        }
    }

    #[test]
    fn skin_pixels_pass_the_skin_rule_and_background_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let id = Identity::random(&mut rng);
            let shot = Shot::random(&mut rng);
            let (p, m) = render(&id, &shot, 64);
            let (mut skin, mut skin_ok, mut bg_skin) = (0, 0, 0);
            for (pp, mp) in p.pixels().zip(m.pixels()) {
                match mp.0[0] {
                    src::SKIN => {
                        skin += 1;
                        skin_ok += is_skin(pp.0) as usize;
                    }
                    src::BACKGROUND | src::HAIR => bg_skin += is_skin(pp.0) as usize,
                    _ => {}
                }
            }
            assert!(skin_ok as f64 >= 0.95 * skin as f64, "{skin_ok}/{skin}");
            assert_eq!(bg_skin, 0);
        }
    }

    #[test]
    fn detector_finds_rendered_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, _) = render(&Identity::random(&mut rng), &Shot::random(&mut rng), 96);
        let boxes = SkinToneDetector::default().detect(&p);
        assert!(!boxes.is_empty());
        let b = boxes[0];
        assert!(b.contains(48, 48));
    }
}
