//! Component extraction, foreground/background binarisation and the
//! background-preserving composite used when pasting synthesized faces.

use anonet_tensor::Tensor;
use image::{GrayImage, Luma, Rgb};

use crate::error::{Error, Result};
use crate::mask::{SemanticMask, BACKGROUND, NUM_CLASSES};
use crate::photo::Photo;

/// Number of facial (non-background) labels.
pub const FACIAL_LABELS: usize = NUM_CLASSES - 1;

/// Labels a component discriminator is allowed to look at. Must be a
/// non-empty strict subset of the facial labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentSet {
    labels: Vec<u8>,
}

impl ComponentSet {
    pub fn new(mut labels: Vec<u8>) -> Result<Self> {
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() {
            return Err(Error::Config("component set is empty".into()));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l == BACKGROUND || l as usize >= NUM_CLASSES)
        {
            return Err(Error::Config(format!(
                "component label {bad} is not a facial label"
            )));
        }
        if labels.len() >= FACIAL_LABELS {
            return Err(Error::Config(format!(
                "component set must be a strict subset of the {FACIAL_LABELS} facial labels"
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_dims(what: &'static str, expected: (u32, u32), found: (u32, u32)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        })
    }
}

/// Keeps the pixels labelled `label` and zeroes the rest.
pub fn extract_component(label: u8, image: &Photo, mask: &SemanticMask) -> Result<Photo> {
    if label as usize >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange { label });
    }
    check_dims(
        "component extraction",
        mask.dimensions(),
        image.dimensions(),
    )?;
    Ok(Photo::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x, y) == label {
            *image.get_pixel(x, y)
        } else {
            Rgb([0.0; 3])
        }
    }))
}

/// 1 on facial pixels, 0 on background.
pub fn foreground_mask(mask: &SemanticMask) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([(mask.get(x, y) != BACKGROUND) as u8])
    })
}

/// Complement of [`foreground_mask`].
pub fn background_mask(mask: &SemanticMask) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([(mask.get(x, y) == BACKGROUND) as u8])
    })
}

/// Anonymized pixels on the face foreground, original pixels on background.
pub fn composite(anonymized: &Photo, original: &Photo, mask: &SemanticMask) -> Result<Photo> {
    check_dims("composite", anonymized.dimensions(), original.dimensions())?;
    check_dims("composite mask", anonymized.dimensions(), mask.dimensions())?;
    Ok(Photo::from_fn(
        original.width(),
        original.height(),
        |x, y| {
            if mask.get(x, y) != BACKGROUND {
                *anonymized.get_pixel(x, y)
            } else {
                *original.get_pixel(x, y)
            }
        },
    ))
}

/// `[N, 1, H, W]` indicator of `label` for a batch of masks.
pub fn component_indicator(masks: &[&SemanticMask], label: u8) -> Tensor {
    let (w, h) = masks[0].dimensions();
    let data = masks
        .iter()
        .flat_map(|m| {
            assert_eq!(m.dimensions(), (w, h), "indicator batch of mixed sizes");
            m.labels().iter().map(move |&l| (l == label) as u8 as f64)
        })
        .collect();
    Tensor::new(&[masks.len(), 1, h as usize, w as usize], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{NOSE, SKIN};

    fn photo_2x2() -> Photo {
        Photo::from_fn(2, 2, |x, y| {
            Rgb([0.1 + x as f32 * 0.2, 0.3 + y as f32 * 0.4, 0.9])
        })
    }

    #[test]
    fn extract_keeps_only_requested_label() {
        let img = photo_2x2();
        let mask = SemanticMask::new(2, 2, vec![1, 1, 0, 2]).unwrap();
        let out = extract_component(SKIN, &img, &mask).unwrap();
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(0, 0));
        assert_eq!(out.get_pixel(1, 0), img.get_pixel(1, 0));
        assert_eq!(out.get_pixel(0, 1).0, [0.0; 3]);
        assert_eq!(out.get_pixel(1, 1).0, [0.0; 3]);
    }

    #[test]
    fn nose_extraction_and_absent_label() {
        let img = photo_2x2();
        let mask = SemanticMask::new(2, 2, vec![1, 2, 1, 1]).unwrap();
        let nose = extract_component(NOSE, &img, &mask).unwrap();
        let kept: Vec<_> = nose.pixels().filter(|p| p.0 != [0.0; 3]).collect();
        assert_eq!(kept.len(), 1);
        let none = extract_component(7, &img, &mask).unwrap();
        assert!(none.pixels().all(|p| p.0 == [0.0; 3]));
    }

    #[test]
    fn extract_rejects_misaligned_inputs() {
        let mask = SemanticMask::filled(3, 2, 1).unwrap();
        assert!(matches!(
            extract_component(1, &photo_2x2(), &mask),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn binarisers_on_mixed_mask() {
        let mask = SemanticMask::new(2, 2, vec![0, 3, 5, 0]).unwrap();
        assert_eq!(foreground_mask(&mask).into_raw(), vec![0, 1, 1, 0]);
        assert_eq!(background_mask(&mask).into_raw(), vec![1, 0, 0, 1]);
        let zero = SemanticMask::filled(2, 2, 0).unwrap();
        assert!(foreground_mask(&zero).pixels().all(|p| p.0[0] == 0));
        assert!(background_mask(&zero).pixels().all(|p| p.0[0] == 1));
        let skin = SemanticMask::filled(2, 2, 1).unwrap();
        assert!(foreground_mask(&skin).pixels().all(|p| p.0[0] == 1));
    }

    #[test]
    fn composite_halves() {
        let a = Photo::from_pixel(4, 2, Rgb([1.0, 0.0, 0.0]));
        let d = Photo::from_pixel(4, 2, Rgb([0.0, 0.0, 1.0]));
        let mask = SemanticMask::new(4, 2, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let out = composite(&a, &d, &mask).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                let want = if x < 2 {
                    a.get_pixel(x, y)
                } else {
                    d.get_pixel(x, y)
                };
                assert_eq!(out.get_pixel(x, y), want);
            }
        }
        let all_bg = SemanticMask::filled(4, 2, 0).unwrap();
        assert_eq!(composite(&a, &d, &all_bg).unwrap(), d);
        let all_fg = SemanticMask::filled(4, 2, 9).unwrap();
        assert_eq!(composite(&a, &d, &all_fg).unwrap(), a);
    }

    #[test]
    fn component_set_bounds() {
        assert!(ComponentSet::new(vec![]).is_err());
        assert!(ComponentSet::new(vec![0, 1]).is_err());
        assert!(ComponentSet::new((1..=10).collect()).is_err());
        assert_eq!(ComponentSet::new(vec![3, 1, 3]).unwrap().labels(), &[1, 3]);
        assert_eq!(ComponentSet::new((1..=9).collect()).unwrap().len(), 9);
    }
}
