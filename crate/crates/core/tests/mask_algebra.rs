use anonet::mask::{reduce_classes, NUM_CLASSES, SOURCE_TO_REDUCED};
use anonet::mask_algebra::{self, ComponentSet};
use anonet::{Photo, SemanticMask};
use image::{GrayImage, Luma, Rgb};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = SemanticMask> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(0u8..NUM_CLASSES as u8, (w * h) as usize)
            .prop_map(move |l| SemanticMask::new(w, h, l).unwrap())
    })
}

fn photo_for(mask: &SemanticMask, seed: u32) -> Photo {
    Photo::from_fn(mask.width(), mask.height(), |x, y| {
        let v = ((x * 31 + y * 17 + seed) % 97) as f32 / 96.0;
        Rgb([v, 1.0 - v, v * 0.5])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn one_hot_and_argmax_round_trip(mask in mask_strategy()) {
        let t = SemanticMask::one_hot(&[&mask]);
        prop_assert_eq!(SemanticMask::from_scores(&t, 0), mask.clone());
        let total: f64 = t.data().iter().sum();
        prop_assert_eq!(total as u32, mask.width() * mask.height());
    }

    #[test]
    fn indicators_partition_every_pixel(mask in mask_strategy()) {
        let n = (mask.width() * mask.height()) as usize;
        let mut sum = vec![0.0; n];
        for l in 0..NUM_CLASSES as u8 {
            let ind = mask_algebra::component_indicator(&[&mask], l);
            sum.iter_mut().zip(ind.data()).for_each(|(s, v)| *s += v);
        }
        prop_assert!(sum.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn extraction_is_idempotent_and_disjoint(mask in mask_strategy(), seed in 0u32..1000, a in 1u8..11, b in 1u8..11) {
        let img = photo_for(&mask, seed);
        let ea = mask_algebra::extract_component(a, &img, &mask).unwrap();
        prop_assert_eq!(&mask_algebra::extract_component(a, &ea, &mask).unwrap(), &ea);
        if a != b {
            let eb = mask_algebra::extract_component(b, &ea, &mask).unwrap();
            prop_assert!(eb.pixels().all(|p| p.0 == [0.0; 3]));
        }
    }

    #[test]
    fn composite_of_identical_images_is_identity(mask in mask_strategy(), seed in 0u32..1000) {
        let img = photo_for(&mask, seed);
        prop_assert_eq!(mask_algebra::composite(&img, &img, &mask).unwrap(), img);
    }

    #[test]
    fn nearest_resize_introduces_no_new_labels(mask in mask_strategy(), w in 1u32..30, h in 1u32..30) {
        let r = mask.resize(w, h);
        prop_assert_eq!(r.dimensions(), (w, h));
        prop_assert!(r.labels().iter().all(|&l| mask.contains(l)));
    }

    #[test]
    fn every_source_label_maps_into_the_reduced_space(labels in prop::collection::vec(0u8..19, 16)) {
        let src = GrayImage::from_fn(4, 4, |x, y| Luma([labels[(y * 4 + x) as usize]]));
        let m = reduce_classes(&src).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            prop_assert_eq!(m.labels()[i], SOURCE_TO_REDUCED[l as usize]);
        }
    }
}

#[test]
fn component_sets_must_be_strict_subsets_of_the_facial_labels() {
    assert!(ComponentSet::new(vec![]).is_err());
    assert!(ComponentSet::new(vec![0]).is_err());
    assert!(ComponentSet::new((1..=10).collect()).is_err());
    assert!(ComponentSet::new(vec![11]).is_err());
    assert_eq!(
        ComponentSet::new(vec![6, 1, 1, 3]).unwrap().labels(),
        &[1, 3, 6]
    );
}

#[test]
fn mismatched_sizes_are_rejected() {
    let mask = SemanticMask::filled(4, 4, 1).unwrap();
    let img = Photo::new(5, 4);
    assert!(mask_algebra::composite(&img, &img, &mask).is_err());
    assert!(mask_algebra::extract_component(1, &img, &mask).is_err());
    assert!(reduce_classes(&GrayImage::from_pixel(2, 2, Luma([19]))).is_err());
}
