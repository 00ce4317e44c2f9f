//! Photo buffers and conversions between 8-bit frames, float photos and
//! network tensors.

use anonet_tensor::Tensor;
use image::{imageops, Rgb, Rgb32FImage, RgbImage};

/// RGB photo with channel values in `[0, 1]`.
pub type Photo = Rgb32FImage;

pub fn from_rgb8(img: &RgbImage) -> Photo {
    Photo::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgb([
            p[0] as f32 / 255.0,
            p[1] as f32 / 255.0,
            p[2] as f32 / 255.0,
        ])
    })
}

pub fn to_rgb8(photo: &Photo) -> RgbImage {
    RgbImage::from_fn(photo.width(), photo.height(), |x, y| {
        let p = photo.get_pixel(x, y).0;
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Bilinear resize.
pub fn resize(photo: &Photo, width: u32, height: u32) -> Photo {
    if photo.dimensions() == (width, height) {
        return photo.clone();
    }
    imageops::resize(photo, width, height, imageops::FilterType::Triangle)
}

/// Low-resolution replica: bilinear down to `side` then back up to `out`.
pub fn degrade(photo: &Photo, side: u32, out: u32) -> Photo {
    let small = resize(photo, side, side);
    resize(&small, out, out)
}

/// Stacks photos of equal size into `[N, 3, H, W]`.
pub fn to_tensor(photos: &[&Photo]) -> Tensor {
    let (w, h) = photos[0].dimensions();
    let hw = (w * h) as usize;
    let mut data = vec![0.0; photos.len() * 3 * hw];
    for (s, p) in photos.iter().enumerate() {
        assert_eq!(p.dimensions(), (w, h), "to_tensor batch of mixed sizes");
        for (i, px) in p.pixels().enumerate() {
            for c in 0..3 {
                data[(s * 3 + c) * hw + i] = px.0[c] as f64;
            }
        }
    }
    Tensor::new(&[photos.len(), 3, h as usize, w as usize], data)
}

/// Sample `index` of a `[N, 3, H, W]` tensor as a photo, clamped to `[0, 1]`.
pub fn from_tensor(t: &Tensor, index: usize) -> Photo {
    let (_, c, h, w) = t.dims4();
    assert_eq!(c, 3, "photo tensors have 3 channels");
    let hw = h * w;
    let base = index * 3 * hw;
    let d = t.data();
    Photo::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| d[base + c * hw + i].clamp(0.0, 1.0) as f32))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([(x * 50) as u8, (y * 60) as u8, 255]));
        assert_eq!(to_rgb8(&from_rgb8(&img)), img);
    }

    #[test]
    fn tensor_layout_is_planar() {
        let p = Photo::from_fn(2, 1, |x, _| Rgb([x as f32, 0.5, 0.25]));
        let t = to_tensor(&[&p]);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
        assert_eq!(from_tensor(&t, 0), p);
    }
}
