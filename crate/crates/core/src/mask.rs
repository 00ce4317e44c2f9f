//! Semantic label maps: the 11-label facial space used by the networks and
//! the 19-label annotation space of the source face-parsing corpus.

use anonet_tensor::Tensor;
use image::{imageops, GrayImage, Luma};

use crate::error::{Error, Result};

/// Number of labels in the reduced space, background included.
pub const NUM_CLASSES: usize = 11;

/// Label names of the reduced space, indexed by label id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "skin",
    "nose",
    "eyes",
    "eyebrows",
    "ears",
    "mouth",
    "lip",
    "hair",
    "neck",
    "eyeglass",
];

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const NOSE: u8 = 2;
pub const EYES: u8 = 3;
pub const EYEBROWS: u8 = 4;
pub const EARS: u8 = 5;
pub const MOUTH: u8 = 6;
pub const LIP: u8 = 7;
pub const HAIR: u8 = 8;
pub const NECK: u8 = 9;
pub const EYEGLASS: u8 = 10;

/// Label names of the 19-label source annotation, indexed by source id.
pub const SOURCE_CLASS_NAMES: [&str; 19] = [
    "background",
    "skin",
    "nose",
    "eye_g",
    "l_eye",
    "r_eye",
    "l_brow",
    "r_brow",
    "l_ear",
    "r_ear",
    "mouth",
    "u_lip",
    "l_lip",
    "hair",
    "hat",
    "ear_r",
    "neck_l",
    "neck",
    "cloth",
];

/// Source id -> reduced id. Left/right pairs merge, both lips merge into
/// "lip", and hat, earring, necklace and clothing fall to background.
pub const SOURCE_TO_REDUCED: [u8; 19] = [
    BACKGROUND, // background
    SKIN,       // skin
    NOSE,       // nose
    EYEGLASS,   // eye_g
    EYES,       // l_eye
    EYES,       // r_eye
    EYEBROWS,   // l_brow
    EYEBROWS,   // r_brow
    EARS,       // l_ear
    EARS,       // r_ear
    MOUTH,      // mouth
    LIP,        // u_lip
    LIP,        // l_lip
    HAIR,       // hair
    BACKGROUND, // hat
    BACKGROUND, // ear_r
    BACKGROUND, // neck_l
    NECK,       // neck
    BACKGROUND, // cloth
];

/// Maps a 19-label source mask into the reduced 11-label space.
pub fn reduce_classes(source: &GrayImage) -> Result<SemanticMask> {
    let labels = source
        .pixels()
        .map(|p| {
            SOURCE_TO_REDUCED
                .get(p.0[0] as usize)
                .copied()
                .ok_or(Error::UnknownSourceLabel { id: p.0[0] })
        })
        .collect::<Result<Vec<u8>>>()?;
    SemanticMask::new(source.width(), source.height(), labels)
}

/// Per-pixel facial label map with ids in `0..=10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl SemanticMask {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != (width * height) as usize {
            return Err(Error::Dataset(format!(
                "mask of {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange { label: bad });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: u32, height: u32, label: u8) -> Result<Self> {
        Self::new(width, height, vec![label; (width * height) as usize])
    }

    /// Reads an indexed 8-bit image whose pixel values are label ids.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        Self::new(img.width(), img.height(), img.as_raw().clone())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.labels.clone()).expect("consistent size")
    }

    pub fn palette() -> &'static [&'static str; NUM_CLASSES] {
        &CLASS_NAMES
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }

    /// Fraction of non-background pixels.
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.labels.iter().filter(|&&l| l != BACKGROUND).count();
        fg as f64 / self.labels.len().max(1) as f64
    }

    /// Nearest-neighbour resize; label maps are never interpolated.
    pub fn resize(&self, width: u32, height: u32) -> SemanticMask {
        if (width, height) == self.dimensions() {
            return self.clone();
        }
        let out = imageops::resize(
            &self.to_gray(),
            width,
            height,
            imageops::FilterType::Nearest,
        );
        SemanticMask {
            width,
            height,
            labels: out.into_raw(),
        }
    }

    pub fn crop(&self, x: u32, y: u32, width: u32, height: u32) -> SemanticMask {
        let view = imageops::crop_imm(&self.to_gray(), x, y, width, height).to_image();
        SemanticMask {
            width: view.width(),
            height: view.height(),
            labels: view.into_raw(),
        }
    }

    /// One-hot encoding `[N, 11, H, W]` of a batch of equally sized masks.
    pub fn one_hot(masks: &[&SemanticMask]) -> Tensor {
        let (w, h) = masks[0].dimensions();
        let hw = (w * h) as usize;
        let mut data = vec![0.0; masks.len() * NUM_CLASSES * hw];
        for (s, m) in masks.iter().enumerate() {
            assert_eq!(m.dimensions(), (w, h), "one_hot batch of mixed sizes");
            for (p, &l) in m.labels.iter().enumerate() {
                data[(s * NUM_CLASSES + l as usize) * hw + p] = 1.0;
            }
        }
        Tensor::new(&[masks.len(), NUM_CLASSES, h as usize, w as usize], data)
    }

    /// Per-pixel argmax of sample `index` of a `[N, 11, H, W]` score tensor.
    /// Ties resolve to the lowest label id.
    pub fn from_scores(scores: &Tensor, index: usize) -> SemanticMask {
        let (_, c, h, w) = scores.dims4();
        assert_eq!(
            c, NUM_CLASSES,
            "score tensor must have {NUM_CLASSES} channels"
        );
        let hw = h * w;
        let base = index * c * hw;
        let d = scores.data();
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[base + k * hw + p] > d[base + best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        SemanticMask {
            width: w as u32,
            height: h as u32,
            labels,
        }
    }

    /// Colourised rendering for inspection.
    pub fn to_color(&self) -> image::RgbImage {
        const COLORS: [[u8; 3]; NUM_CLASSES] = [
            [0, 0, 0],
            [204, 0, 0],
            [76, 153, 0],
            [51, 51, 255],
            [204, 0, 204],
            [102, 51, 0],
            [255, 255, 0],
            [255, 0, 0],
            [0, 0, 204],
            [255, 153, 51],
            [0, 204, 204],
        ];
        image::RgbImage::from_fn(self.width, self.height, |x, y| {
            image::Rgb(COLORS[self.get(x, y) as usize])
        })
    }
}

impl From<&SemanticMask> for GrayImage {
    fn from(m: &SemanticMask) -> Self {
        m.to_gray()
    }
}

/// Builds a gray image of label ids from a closure; handy for fixtures.
pub fn gray_from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| Luma([f(x, y)]))
}
