//! Detection, repetitive re-cropping, segmentation, synthesis and
//! background-preserving paste-back for single frames, frame sequences and
//! video files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anonet_tensor::par;
use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::AnonymizerConfig;
use crate::detect::{DetectionBox, FaceDetector};
use crate::error::{Error, Result};
use crate::mask::SemanticMask;
use crate::mask_algebra::composite;
use crate::models::ModelBundle;
use crate::photo;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub const VIDEO_EXTENSIONS: [&str; 5] = ["mp4", "avi", "mov", "mkv", "webm"];

/// Pixel rectangle `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn full(img: &RgbImage) -> Self {
        Self {
            x: 0,
            y: 0,
            w: img.width(),
            h: img.height(),
        }
    }

    pub fn of(b: &DetectionBox) -> Self {
        Self {
            x: b.x0,
            y: b.y0,
            w: b.width(),
            h: b.height(),
        }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RefineOutcome {
    /// The face covers at least `r_thr` of the crop.
    Reached,
    /// `max_refine_iters` re-detections did not reach the threshold.
    CapReached,
    /// Re-detection inside the crop found no face.
    LostFace,
    /// Re-detection would have lowered the ratio; the previous crop is kept.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    /// Crop handed to the generators, in frame coordinates.
    pub crop: Rect,
    /// Face box inside `crop`, in frame coordinates.
    pub face: DetectionBox,
    /// Face-to-crop ratio after each accepted crop, starting with the
    /// initial detection.
    pub ratios: Vec<f64>,
    /// Re-detections run.
    pub iterations: usize,
    pub outcome: RefineOutcome,
}

fn centre(b: &DetectionBox) -> (u32, u32) {
    ((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2)
}

/// Re-detects inside successively tighter crops until the face covers
/// `r_thr` of the crop. `initial` is a detection on the whole frame.
pub fn refine_detection(
    frame: &RgbImage,
    initial: &DetectionBox,
    detector: &dyn FaceDetector,
    r_thr: f64,
    max_iters: usize,
) -> Refinement {
    let mut crop = Rect::full(frame);
    let mut face = *initial;
    let mut ratio = face.area() as f64 / crop.area() as f64;
    let mut ratios = vec![ratio];
    let mut iterations = 0;
    let outcome = loop {
        if ratio >= r_thr {
            break RefineOutcome::Reached;
        }
        if iterations == max_iters {
            break RefineOutcome::CapReached;
        }
        iterations += 1;
        let next = Rect::of(&face);
        let sub = imageops::crop_imm(frame, next.x, next.y, next.w, next.h).to_image();
        let boxes = detector.detect(&sub);
        let (cx, cy) = centre(&face);
        let pick = boxes
            .iter()
            .find(|b| b.contains(cx - next.x, cy - next.y))
            .or(boxes.first());
        let Some(b) = pick else {
            break RefineOutcome::LostFace;
        };
        let r = b.area() as f64 / next.area() as f64;
        if r < ratio {
            break RefineOutcome::Stalled;
        }
        crop = next;
        face = b.offset(next.x, next.y);
        ratio = r;
        ratios.push(r);
    };
    face.area_ratio = ratio;
    Refinement {
        crop,
        face,
        ratios,
        iterations,
        outcome,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaceStatus {
    Anonymized,
    /// The segmentation had no foreground; the face was left as is.
    EmptyForeground,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    pub detection: DetectionBox,
    pub refinement: Refinement,
    pub status: FaceStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub faces: Vec<FaceReport>,
}

/// Replacement pixels for one crop: anonymized values where the predicted
/// mask is foreground.
struct Patch {
    crop: Rect,
    pixels: RgbImage,
    keep: SemanticMask,
}

pub struct Anonymizer {
    pub models: ModelBundle,
    pub detector: Box<dyn FaceDetector>,
    pub cfg: AnonymizerConfig,
}

impl Anonymizer {
    pub fn new(
        models: ModelBundle,
        detector: Box<dyn FaceDetector>,
        cfg: AnonymizerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            models,
            detector,
            cfg,
        })
    }

    /// Segments and re-synthesizes one crop at network size; `None` when the
    /// segmentation is all background.
    fn anonymize_crop(&self, frame: &RgbImage, crop: Rect) -> Result<Option<Patch>> {
        let s = self.models.image_size() as u32;
        let sub =
            photo::from_rgb8(&imageops::crop_imm(frame, crop.x, crop.y, crop.w, crop.h).to_image());
        let face = photo::resize(&sub, s, s);
        let mask = SemanticMask::from_scores(&self.models.segment_scores(&face)?, 0);
        if mask.foreground_fraction() == 0.0 {
            return Ok(None);
        }
        let synth = self.models.synthesize(&[&mask])?.remove(0);
        let mixed = composite(&synth, &face, &mask)?;
        let back = photo::to_rgb8(&photo::resize(&mixed, crop.w, crop.h));
        Ok(Some(Patch {
            crop,
            pixels: back,
            keep: mask.resize(crop.w, crop.h),
        }))
    }

    /// Anonymizes every detected face. Pixels outside the predicted face
    /// foreground of each crop are copied from `frame` unchanged.
    pub fn anonymize_frame(&self, frame: &RgbImage) -> Result<(RgbImage, FrameReport)> {
        if self.cfg.passthrough {
            return Ok((frame.clone(), FrameReport::default()));
        }
        let detections = self.detector.detect(frame);
        if detections.is_empty() {
            return Ok((frame.clone(), FrameReport::default()));
        }
        let results = par::map_slice(&detections, |d| {
            let refinement = refine_detection(
                frame,
                d,
                self.detector.as_ref(),
                self.cfg.r_thr,
                self.cfg.max_refine_iters,
            );
            let patch = self.anonymize_crop(frame, refinement.crop)?;
            Ok::<_, Error>((refinement, patch))
        });
        let mut out = frame.clone();
        let mut report = FrameReport::default();
        for (d, r) in detections.iter().zip(results) {
            let (refinement, patch) = r?;
            let status = match patch {
                Some(p) => {
                    paste(&mut out, &p);
                    FaceStatus::Anonymized
                }
                None => FaceStatus::EmptyForeground,
            };
            report.faces.push(FaceReport {
                detection: *d,
                refinement,
                status,
            });
        }
        Ok((out, report))
    }
}

fn paste(out: &mut RgbImage, p: &Patch) {
    for (x, y, px) in p.pixels.enumerate_pixels() {
        if p.keep.get(x, y) != 0 {
            out.put_pixel(p.crop.x + x, p.crop.y + y, *px);
        }
    }
}

/// Millisecond timing percentiles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let q = |p: f64| crate::losses::percentile(ms, p);
        Self {
            p50_ms: q(50.0),
            p90_ms: q(90.0),
            p99_ms: q(99.0),
            max_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Outcome of a multi-frame run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub frames: usize,
    pub resolution: Option<(u32, u32)>,
    /// Number of faces to number of frames with that many.
    pub faces_per_frame: BTreeMap<usize, usize>,
    pub undecodable_frames: usize,
    pub empty_foreground_faces: usize,
    pub refine_outcomes: BTreeMap<String, usize>,
    pub frame_rate: Option<String>,
    pub timing: Timing,
}

impl SequenceSummary {
    fn add(&mut self, frame: Option<&RgbImage>, report: Option<&FrameReport>) {
        self.frames += 1;
        match (frame, report) {
            (Some(f), Some(r)) => {
                self.resolution.get_or_insert(f.dimensions());
                *self.faces_per_frame.entry(r.faces.len()).or_default() += 1;
                for face in &r.faces {
                    if face.status == FaceStatus::EmptyForeground {
                        self.empty_foreground_faces += 1;
                    }
                    *self
                        .refine_outcomes
                        .entry(format!("{:?}", face.refinement.outcome))
                        .or_default() += 1;
                }
            }
            _ => self.undecodable_frames += 1,
        }
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frames: {}\n", self.frames));
        match self.resolution {
            Some((w, h)) => s.push_str(&format!("resolution: {w}x{h}\n")),
            None => s.push_str("resolution: unknown\n"),
        }
        if let Some(r) = &self.frame_rate {
            s.push_str(&format!("frame_rate: {r}\n"));
        }
        s.push_str(&format!(
            "undecodable_frames: {}\n",
            self.undecodable_frames
        ));
        s.push_str(&format!(
            "empty_foreground_faces: {}\n",
            self.empty_foreground_faces
        ));
        for (k, v) in &self.faces_per_frame {
            s.push_str(&format!("faces_per_frame.{k}: {v}\n"));
        }
        for (k, v) in &self.refine_outcomes {
            s.push_str(&format!("refine.{k}: {v}\n"));
        }
        let t = &self.timing;
        s.push_str(&format!(
            "timing_ms.p50: {:.3}\ntiming_ms.p90: {:.3}\ntiming_ms.p99: {:.3}\ntiming_ms.max: {:.3}\n",
            t.p50_ms, t.p90_ms, t.p99_ms, t.max_ms
        ));
        s
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

pub fn is_image(path: &Path) -> bool {
    IMAGE_EXTENSIONS.contains(&extension(path).as_str())
}

pub fn is_video(path: &Path) -> bool {
    VIDEO_EXTENSIONS.contains(&extension(path).as_str())
}

fn supported() -> &'static str {
    "images (png, jpg, jpeg, bmp), directories of images, videos (mp4, avi, mov, mkv, webm; needs ffmpeg)"
}

/// Anonymizes the image files of `input` into `output` under the same
/// names, in name order. Files that cannot be decoded are copied through.
pub fn anonymize_dir(anon: &Anonymizer, input: &Path, output: &Path) -> Result<SequenceSummary> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut summary = SequenceSummary::default();
    let mut times = Vec::new();
    for file in &files {
        let dest = output.join(file.file_name().expect("file has a name"));
        let start = Instant::now();
        match image::open(file) {
            Ok(img) => {
                let (out, report) = anon.anonymize_frame(&img.to_rgb8())?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                out.save(&dest)?;
                summary.add(Some(&out), Some(&report));
            }
            Err(e) => {
                log::warn!("{}: {e}; copied through", file.display());
                std::fs::copy(file, &dest).map_err(|e| Error::io(&dest, e))?;
                summary.add(None, None);
            }
        }
    }
    summary.timing = Timing::from_samples(&times);
    Ok(summary)
}

/// Anonymizes one image file.
pub fn anonymize_image(anon: &Anonymizer, input: &Path, output: &Path) -> Result<FrameReport> {
    let img = image::open(input)?.to_rgb8();
    let (out, report) = anon.anonymize_frame(&img)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save(output)?;
    Ok(report)
}

fn run(cmd: &mut Command) -> Result<String> {
    let out = cmd
        .output()
        .map_err(|e| Error::Media(format!("cannot run {:?}: {e}", cmd.get_program())))?;
    if !out.status.success() {
        return Err(Error::Media(format!(
            "{:?} failed: {}",
            cmd.get_program(),
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub fn ffmpeg_available() -> bool {
    Command::new("ffmpeg")
        .arg("-version")
        .output()
        .is_ok_and(|o| o.status.success())
}

/// Splits a video into PNG frames with the system ffmpeg, anonymizes them
/// and re-encodes at the input frame rate.
pub fn anonymize_video(anon: &Anonymizer, input: &Path, output: &Path) -> Result<SequenceSummary> {
    if !ffmpeg_available() {
        return Err(Error::UnsupportedMedia {
            path: input.to_path_buf(),
            supported: supported(),
        });
    }
    let rate = run(Command::new("ffprobe")
        .args([
            "-v",
            "error",
            "-select_streams",
            "v:0",
            "-show_entries",
            "stream=r_frame_rate",
            "-of",
            "csv=p=0",
        ])
        .arg(input))?
    .trim()
    .to_string();
    let work = tempfile_dir(output)?;
    let (raw, done) = (work.join("in"), work.join("out"));
    std::fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    run(Command::new("ffmpeg")
        .args(["-v", "error", "-i"])
        .arg(input)
        .args(["-vsync", "0"])
        .arg(raw.join("%06d.png")))?;
    let mut summary = anonymize_dir(anon, &raw, &done)?;
    run(Command::new("ffmpeg")
        .args(["-v", "error", "-y", "-framerate", &rate, "-i"])
        .arg(done.join("%06d.png"))
        .args(["-c:v", "libx264", "-pix_fmt", "yuv420p"])
        .arg(output))?;
    let _ = std::fs::remove_dir_all(&work);
    summary.frame_rate = Some(rate);
    Ok(summary)
}

fn tempfile_dir(output: &Path) -> Result<PathBuf> {
    let parent = output
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = format!(
        ".{}.frames",
        output
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("video")
    );
    let dir = parent.join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(dir)
}

/// What a path is, judged by type and extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Media {
    Image,
    Directory,
    Video,
}

pub fn classify(path: &Path) -> Result<Media> {
    if path.is_dir() {
        Ok(Media::Directory)
    } else if is_image(path) {
        Ok(Media::Image)
    } else if is_video(path) {
        Ok(Media::Video)
    } else {
        Err(Error::UnsupportedMedia {
            path: path.to_path_buf(),
            supported: supported(),
        })
    }
}
