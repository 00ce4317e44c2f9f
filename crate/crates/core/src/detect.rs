//! Face detection interface and a skin-tone reference detector.

use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Axis-aligned face box in pixel coordinates, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub confidence: f64,
    /// Box area over the area of the image the detector ran on.
    pub area_ratio: f64,
}

impl DetectionBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// The same box expressed in the coordinates of an enclosing image whose
    /// origin is at `(dx, dy)` relative to this box's frame.
    pub fn offset(self, dx: u32, dy: u32) -> Self {
        Self {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            ..self
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Returns face boxes sorted by descending confidence. Must be deterministic.
pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &RgbImage) -> Vec<DetectionBox>;
}

/// Skin test in YCbCr (full-range BT.601).
pub fn is_skin(p: [u8; 3]) -> bool {
    let [r, g, b] = p.map(f64::from);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    y > 80.0 && (77.0..=127.0).contains(&cb) && (133.0..=173.0).contains(&cr)
}

/// Grid detector: the image is split into `grid x grid` cells, cells that
/// are mostly skin are grouped into 4-connected components, and each large
/// enough component becomes a box padded by one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkinToneDetector {
    pub grid: u32,
    pub min_skin_fraction: f64,
    pub min_cells: usize,
    pub pad_cells: u32,
}

impl Default for SkinToneDetector {
    fn default() -> Self {
        Self {
            grid: 16,
            min_skin_fraction: 0.5,
            min_cells: 3,
            pad_cells: 1,
        }
    }
}

impl FaceDetector for SkinToneDetector {
    fn detect(&self, image: &RgbImage) -> Vec<DetectionBox> {
        let (w, h) = image.dimensions();
        let gx = self.grid.min(w).max(1);
        let gy = self.grid.min(h).max(1);
        let xb = |i: u32| (i as u64 * w as u64 / gx as u64) as u32;
        let yb = |j: u32| (j as u64 * h as u64 / gy as u64) as u32;
        let mut frac = vec![0.0; (gx * gy) as usize];
        for j in 0..gy {
            for i in 0..gx {
                let (x0, x1, y0, y1) = (xb(i), xb(i + 1), yb(j), yb(j + 1));
                let mut skin = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        skin += is_skin(image.get_pixel(x, y).0) as usize;
                    }
                }
                let n = ((x1 - x0) * (y1 - y0)).max(1) as f64;
                frac[(j * gx + i) as usize] = skin as f64 / n;
            }
        }
        let on = |c: usize| frac[c] >= self.min_skin_fraction;
        let mut seen = vec![false; frac.len()];
        let mut boxes = Vec::new();
        for start in 0..frac.len() {
            if seen[start] || !on(start) {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut cells = Vec::new();
            while let Some(c) = stack.pop() {
                cells.push(c);
                let (i, j) = ((c as u32) % gx, (c as u32) / gx);
                let mut visit = |ni: u32, nj: u32| {
                    let n = (nj * gx + ni) as usize;
                    if !seen[n] && on(n) {
                        seen[n] = true;
                        stack.push(n);
                    }
                };
                if i > 0 {
                    visit(i - 1, j);
                }
                if i + 1 < gx {
                    visit(i + 1, j);
                }
                if j > 0 {
                    visit(i, j - 1);
                }
                if j + 1 < gy {
                    visit(i, j + 1);
                }
            }
            if cells.len() < self.min_cells {
                continue;
            }
            let ci = cells.iter().map(|&c| c as u32 % gx);
            let cj = cells.iter().map(|&c| c as u32 / gx);
            let (i0, i1) = (ci.clone().min().unwrap(), ci.max().unwrap());
            let (j0, j1) = (cj.clone().min().unwrap(), cj.max().unwrap());
            let i0 = i0.saturating_sub(self.pad_cells);
            let j0 = j0.saturating_sub(self.pad_cells);
            let i1 = (i1 + 1 + self.pad_cells).min(gx);
            let j1 = (j1 + 1 + self.pad_cells).min(gy);
            let (x0, x1, y0, y1) = (xb(i0), xb(i1), yb(j0), yb(j1));
            let confidence = cells.iter().map(|&c| frac[c]).sum::<f64>() / cells.len() as f64;
            let area_ratio = ((x1 - x0) as f64 * (y1 - y0) as f64) / (w as f64 * h as f64);
            boxes.push(DetectionBox {
                x0,
                y0,
                x1,
                y1,
                confidence,
                area_ratio,
            });
        }
        boxes.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then((a.y0, a.x0).cmp(&(b.y0, b.x0)))
        });
        boxes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    const SKIN: [u8; 3] = [224, 172, 140];
    const WALL: [u8; 3] = [70, 110, 170];

    #[test]
    fn skin_rule_on_reference_colours() {
        assert!(is_skin(SKIN));
        assert!(is_skin([160, 110, 80]));
        assert!(!is_skin(WALL));
        assert!(!is_skin([40, 30, 25]));
        assert!(!is_skin([128, 128, 128]));
    }

    #[test]
    fn empty_image_has_no_faces() {
        let img = RgbImage::from_pixel(64, 48, Rgb(WALL));
        assert!(SkinToneDetector::default().detect(&img).is_empty());
    }

    #[test]
    fn square_patch_is_found_with_padding() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            if (16..32).contains(&x) && (20..40).contains(&y) {
                Rgb(SKIN)
            } else {
                Rgb(WALL)
            }
        });
        let boxes = SkinToneDetector::default().detect(&img);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!((b.x0, b.x1), (12, 36));
        assert_eq!((b.y0, b.y1), (16, 44));
        assert_eq!(b.confidence, 1.0);
        assert!((b.area_ratio - (24.0 * 28.0) / 4096.0).abs() < 1e-12);
    }

    #[test]
    fn two_faces_sorted_by_confidence() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            let a = (4..20).contains(&x) && (4..20).contains(&y);
            let b = (40..60).contains(&x) && (40..60).contains(&y) && (x + y) % 5 != 0;
            if a || b {
                Rgb(SKIN)
            } else {
                Rgb(WALL)
            }
        });
        let boxes = SkinToneDetector::default().detect(&img);
        assert_eq!(boxes.len(), 2);
        assert!(boxes[0].confidence >= boxes[1].confidence);
        assert_eq!(boxes[0].x0, 0);
    }
}
