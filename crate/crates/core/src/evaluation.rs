//! Identity-distance evaluation: a twin-branch embedding network trained
//! with a contrastive objective, same/different-identity criteria, and
//! original-vs-anonymized distances per test set.

use std::path::Path;

use anonet_tensor::{par, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anonymizer::Anonymizer;
use crate::checkpoint;
use crate::config::EvalConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Builder, Conv, Live, Module, Scope};
use crate::photo::{self, Photo};

/// Residual block whose inner path concatenates a 1x1 and a 3x3 branch and
/// projects back with a 1x1 convolution.
#[derive(Clone, Debug)]
struct InceptionResidual {
    branch1: Conv,
    branch3: Conv,
    project: Conv,
}

impl InceptionResidual {
    fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        let half = (c / 2).max(1);
        Self {
            branch1: b.conv(&format!("{name}.b1"), c, half, 1, 1, 0, true),
            branch3: b.conv(&format!("{name}.b3"), c, half, 3, 1, 1, true),
            project: b.conv(&format!("{name}.proj"), 2 * half, c, 1, 1, 0, true),
        }
    }

    fn forward(&self, s: Scope<'_>, x: Var) -> Var {
        let t = s.tape;
        let a = t.relu(self.branch1.forward(s, x));
        let b = t.relu(self.branch3.forward(s, x));
        let inner = self.project.forward(s, t.concat_channels(&[a, b]));
        t.relu(t.add(x, t.scale(inner, 0.2)))
    }
}

/// Maps a face photo to a `dim`-vector.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    pub params: ParamSet,
    pub dim: usize,
    pub image_size: usize,
    stem: Conv,
    block1: InceptionResidual,
    down1: Conv,
    block2: InceptionResidual,
    down2: Conv,
    head: Conv,
}

impl Module for EmbeddingNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl EmbeddingNet {
    pub fn new(dim: usize, width: usize, image_size: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed, false);
        let stem = b.conv("stem", 3, width, 3, 2, 1, true);
        let block1 = InceptionResidual::new(&mut b, "block1", width);
        let down1 = b.conv("down1", width, 2 * width, 3, 2, 1, true);
        let block2 = InceptionResidual::new(&mut b, "block2", 2 * width);
        let down2 = b.conv("down2", 2 * width, 4 * width, 3, 2, 1, true);
        let head = b.conv("head", 4 * width, dim, 1, 1, 0, true);
        b.finish();
        Self {
            params,
            dim,
            image_size,
            stem,
            block1,
            down1,
            block2,
            down2,
            head,
        }
    }

    pub fn from_config(cfg: &EvalConfig, image_size: usize, seed: u64) -> Self {
        Self::new(cfg.embedding_dim, cfg.width, image_size, seed)
    }

    /// `[N, 3, S, S]` photos to `[N, dim, 1, 1]` embeddings.
    pub fn forward(&self, s: Scope<'_>, x: Var) -> Var {
        let t = s.tape;
        let x = t.add_scalar(t.scale(x, 2.0), -1.0);
        let h = t.relu(self.stem.forward(s, x));
        let h = self.block1.forward(s, h);
        let h = t.relu(self.down1.forward(s, h));
        let h = self.block2.forward(s, h);
        let h = t.relu(self.down2.forward(s, h));
        self.head.forward(s, t.global_avg_pool(h))
    }

    fn check(&self, p: &Photo) -> Result<()> {
        let s = self.image_size as u32;
        if p.dimensions() != (s, s) {
            return Err(Error::ShapeMismatch {
                what: "embedding input",
                expected: (s, s),
                found: p.dimensions(),
            });
        }
        Ok(())
    }

    pub fn embed(&self, face: &Photo) -> Result<Vec<f64>> {
        self.check(face)?;
        let tape = Tape::new();
        let live = Live::new(self, &tape, false);
        let e = self.forward(live.scope(), tape.constant(photo::to_tensor(&[face])));
        Ok(tape.value(e).data().to_vec())
    }

    pub fn embed_all(&self, faces: &[&Photo]) -> Result<Vec<Vec<f64>>> {
        par::map_slice(faces, |f| self.embed(f))
            .into_iter()
            .collect()
    }

    pub fn distance(&self, a: &Photo, b: &Photo) -> Result<f64> {
        Ok(pair_distance(&self.embed(a)?, &self.embed(b)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode_params(&self.params)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads weights for an architecture built from `cfg`.
    pub fn load(path: &Path, cfg: &EvalConfig, image_size: usize) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpointFiles {
                missing: vec![path.display().to_string()],
            });
        }
        let mut net = Self::from_config(cfg, image_size, 0);
        checkpoint::load_params_file(&mut net.params, path)?;
        Ok(net)
    }
}

/// Euclidean distance.
pub fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embeddings differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over pairs of `y d^2 / 2 + (1 - y) max(0, margin - d)^2 / 2`, with
/// `same[i] = 1` for same-identity pairs. `a` and `b` are `[N, dim, 1, 1]`.
pub fn contrastive_loss(tape: &Tape, a: Var, b: Var, same: &[f64], margin: f64) -> Var {
    let n = same.len();
    let d2 = tape.sample_sum(tape.square(tape.sub(a, b)));
    let d = tape.sqrt(d2, 1e-12);
    let gap = tape.relu(tape.add_scalar(tape.scale(d, -1.0), margin));
    let pos = tape.mul_const(d2, Tensor::new(&[n], same.to_vec()));
    let neg = tape.mul_const(
        tape.square(gap),
        Tensor::new(&[n], same.iter().map(|s| 1.0 - s).collect()),
    );
    tape.scale(tape.mean(tape.add(pos, neg)), 0.5)
}

/// Draws a pair of distinct samples, of the same identity when `same`.
/// Returns `None` when no such pair exists.
fn draw_pair(
    data: &Dataset,
    by_identity: &[Vec<usize>],
    rng: &mut impl Rng,
    same: bool,
) -> Option<(usize, usize)> {
    if same {
        let groups: Vec<&Vec<usize>> = by_identity.iter().filter(|g| g.len() >= 2).collect();
        if groups.is_empty() {
            return None;
        }
        let g = groups[rng.random_range(0..groups.len())];
        let i = rng.random_range(0..g.len());
        let mut j = rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        Some((g[i], g[j]))
    } else {
        if by_identity.len() < 2 {
            return None;
        }
        let a = rng.random_range(0..data.len());
        let ida = &data.get(a).identity;
        let others: usize = data.len()
            - by_identity
                .iter()
                .find(|g| data.get(g[0]).identity == *ida)
                .map_or(0, Vec::len);
        let mut k = rng.random_range(0..others);
        for i in 0..data.len() {
            if data.get(i).identity != *ida {
                if k == 0 {
                    return Some((a, i));
                }
                k -= 1;
            }
        }
        None
    }
}

fn group_by_identity(data: &Dataset) -> Vec<Vec<usize>> {
    let mut map: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, s) in data.samples().iter().enumerate() {
        map.entry(s.identity.as_str()).or_default().push(i);
    }
    map.into_values().collect()
}

/// True when `data` yields both same-identity and different-identity pairs.
pub fn has_criterion_pairs(data: &Dataset) -> bool {
    let groups = group_by_identity(data);
    groups.len() >= 2 && groups.iter().any(|g| g.len() >= 2)
}

/// Trains `net` on alternating same/different pairs; returns the mean loss
/// of every epoch.
pub fn train_embedding(
    net: &mut EmbeddingNet,
    data: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let groups = group_by_identity(data);
    if groups.len() < 2 || groups.iter().all(|g| g.len() < 2) {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            found: data.len(),
        });
    }
    const BATCH: usize = 8;
    let mut adam = Adam::new(&net.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = cfg.pairs_per_epoch.div_ceil(BATCH);
        for _ in 0..batches {
            let mut pairs = Vec::with_capacity(BATCH);
            let mut same = Vec::with_capacity(BATCH);
            for k in 0..BATCH {
                let s = k % 2 == 0;
                let p = draw_pair(data, &groups, &mut rng, s).expect("pairs exist");
                pairs.push(p);
                same.push(if s { 1.0 } else { 0.0 });
            }
            let left: Vec<&Photo> = pairs.iter().map(|&(i, _)| &data.get(i).photo).collect();
            let right: Vec<&Photo> = pairs.iter().map(|&(_, j)| &data.get(j).photo).collect();
            let (loss, grads) = {
                let tape = Tape::new();
                let live = Live::new(&*net, &tape, true);
                let a = net.forward(live.scope(), tape.constant(photo::to_tensor(&left)));
                let b = net.forward(live.scope(), tape.constant(photo::to_tensor(&right)));
                let loss = contrastive_loss(&tape, a, b, &same, cfg.contrastive_margin);
                let value = tape.value(loss).item();
                let g = tape.backward(loss);
                (value, live.grads(&g))
            };
            if loss.is_finite() && grads.iter().all(Tensor::is_finite) {
                adam.step(&mut net.params, &grads, cfg.learning_rate);
            }
            total += loss;
        }
        trace.push(total / batches as f64);
    }
    Ok(trace)
}

/// Anything that maps a face photo to an anonymized one of the same size.
pub trait FaceAnonymizer: Sync {
    fn anonymize(&self, face: &RgbImage) -> Result<RgbImage>;
}

/// Returns its input.
pub struct Passthrough;

impl FaceAnonymizer for Passthrough {
    fn anonymize(&self, face: &RgbImage) -> Result<RgbImage> {
        Ok(face.clone())
    }
}

impl FaceAnonymizer for Anonymizer {
    fn anonymize(&self, face: &RgbImage) -> Result<RgbImage> {
        Ok(self.anonymize_frame(face)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub dataset: String,
    pub n: usize,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean distance over same-identity pairs.
    pub criterion_same: f64,
    /// Mean distance over different-identity pairs.
    pub criterion_diff: f64,
    pub criterion_gap: f64,
    pub datasets: Vec<SetResult>,
}

pub const CSV_HEADER: &str = "dataset,n,mean_distance";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.datasets {
            s.push_str(&format!("{},{},{:.6}\n", r.dataset, r.n, r.mean_distance));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("criterion_same: {:.6}\n", self.criterion_same));
        s.push_str(&format!("criterion_diff: {:.6}\n", self.criterion_diff));
        s.push_str(&format!("criterion_gap: {:.6}\n", self.criterion_gap));
        for r in &self.datasets {
            s.push_str(&format!("dataset.{}.n: {}\n", r.dataset, r.n));
            s.push_str(&format!(
                "dataset.{}.mean_distance: {:.6}\n",
                r.dataset, r.mean_distance
            ));
        }
        s
    }
}

/// Mean that does not depend on input order.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean same-identity and different-identity distances over `pairs` seeded
/// draws of each kind.
pub fn criteria(net: &EmbeddingNet, data: &Dataset, pairs: usize, seed: u64) -> Result<(f64, f64)> {
    if !has_criterion_pairs(data) {
        return Err(Error::Dataset(
            "criteria need two identities and one identity with two images".into(),
        ));
    }
    let groups = group_by_identity(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [0.0; 2];
    for (k, same) in [true, false].into_iter().enumerate() {
        let drawn: Vec<(usize, usize)> = (0..pairs)
            .filter_map(|_| draw_pair(data, &groups, &mut rng, same))
            .collect();
        if drawn.is_empty() {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                found: data.len(),
            });
        }
        let d = par::map_slice(&drawn, |&(i, j)| {
            net.distance(&data.get(i).photo, &data.get(j).photo)
        });
        out[k] = ordered_mean(d.into_iter().collect::<Result<_>>()?);
    }
    Ok((out[0], out[1]))
}

/// Mean original-vs-anonymized distance over every sample of `data`.
pub fn mean_anonymized_distance(
    net: &EmbeddingNet,
    anon: &dyn FaceAnonymizer,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            found: 0,
        });
    }
    let d = par::map_slice(data.samples(), |s| {
        let original = photo::to_rgb8(&s.photo);
        let anonymized = photo::from_rgb8(&anon.anonymize(&original)?);
        net.distance(&photo::from_rgb8(&original), &anonymized)
    });
    Ok(ordered_mean(d.into_iter().collect::<Result<_>>()?))
}

/// Criteria on `criterion_set` plus one anonymized-distance mean per named set.
pub fn evaluate_anonymizer(
    net: &EmbeddingNet,
    anon: &dyn FaceAnonymizer,
    criterion_set: &Dataset,
    sets: &[(String, &Dataset)],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::Config("no evaluation sets given".into()));
    }
    let (same, diff) = criteria(net, criterion_set, cfg.criterion_pairs, seed)?;
    let datasets = sets
        .iter()
        .map(|(name, d)| {
            Ok(SetResult {
                dataset: name.clone(),
                n: d.len(),
                mean_distance: mean_anonymized_distance(net, anon, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        criterion_same: same,
        criterion_diff: diff,
        criterion_gap: diff - same,
        datasets,
    })
}
