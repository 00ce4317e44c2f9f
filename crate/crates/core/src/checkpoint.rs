//! Checkpoint directories: one safetensors file per network, one per
//! optimizer, and a JSON manifest with file digests and the config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anonet_tensor::{Adam, AdamConfig, ParamSet, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelBundle, NETWORK_NAMES};
use crate::nets::NetConfig;
use crate::training::{Optimizers, TrainConfig, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
/// Networks needed to anonymize.
pub const INFERENCE_NETWORKS: [&str; 2] = ["g", "gs"];
const TRAINABLE: [&str; 6] = ["g", "f", "dx", "dy", "gs", "ds"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub margins: Vec<f64>,
    pub net: NetConfig,
    pub scales: usize,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Optimizer name to completed update count.
    pub optimizer_steps: BTreeMap<String, u64>,
}

fn network_file(name: &str) -> String {
    format!("{name}.safetensors")
}

fn optimizer_file(name: &str) -> String {
    format!("adam_{name}.safetensors")
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn serialize(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), to_bytes(t), t.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| {
            Ok((
                n.as_str(),
                TensorView::new(Dtype::F64, s.clone(), b).map_err(st_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(st_err)
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(format!("safetensors: {e}"))
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, file: &str) -> Result<Tensor> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Checkpoint(format!("{file}: tensor {name} missing")))?;
    if view.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!(
            "{file}: tensor {name} is {:?}, expected F64",
            view.dtype()
        )));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(view.shape(), data))
}

/// Bytes of a parameter set: parameters under `param.`, buffers under `buffer.`.
pub fn encode_params(ps: &ParamSet) -> Result<Vec<u8>> {
    let mut list: Vec<(String, &Tensor)> = ps
        .params()
        .map(|(n, t)| (format!("param.{n}"), t))
        .collect();
    list.extend(ps.buffers().map(|(n, t)| (format!("buffer.{n}"), t)));
    serialize(&list)
}

/// Overwrites every parameter and buffer of `ps` from `bytes`; all names and
/// shapes must match.
pub fn decode_params(ps: &mut ParamSet, bytes: &[u8], file: &str) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
    let wanted: Vec<(String, String, Vec<usize>)> = ps
        .params()
        .map(|(n, t)| (format!("param.{n}"), n.to_string(), t.shape().to_vec()))
        .chain(
            ps.buffers()
                .map(|(n, t)| (format!("buffer.{n}"), n.to_string(), t.shape().to_vec())),
        )
        .collect();
    if st.len() != wanted.len() {
        return Err(Error::Checkpoint(format!(
            "{file}: {} tensors stored, network has {}",
            st.len(),
            wanted.len()
        )));
    }
    for (key, name, shape) in wanted {
        let t = read_tensor(&st, &key, file)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{file}: {key} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        ps.assign(&name, t);
    }
    Ok(())
}

/// Loads a standalone network file such as perceptual-net weights.
pub fn load_params_file(ps: &mut ParamSet, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(ps, &bytes, &path.display().to_string())
}

fn encode_adam(adam: &Adam) -> Result<Vec<u8>> {
    let (m, v) = adam.moments();
    let mut list: Vec<(String, &Tensor)> = m
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("m.{i:04}"), t))
        .collect();
    list.extend(v.iter().enumerate().map(|(i, t)| (format!("v.{i:04}"), t)));
    serialize(&list)
}

fn decode_adam(
    bytes: &[u8],
    file: &str,
    config: AdamConfig,
    step: u64,
    params: &ParamSet,
) -> Result<Adam> {
    let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
    let n = params.len();
    if st.len() != 2 * n {
        return Err(Error::Checkpoint(format!(
            "{file}: {} moment tensors for {n} parameters",
            st.len()
        )));
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, (name, p)) in params.params().enumerate() {
        for (key, out) in [(format!("m.{i:04}"), &mut m), (format!("v.{i:04}"), &mut v)] {
            let t = read_tensor(&st, &key, file)?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "{file}: {key} does not match parameter {name}"
                )));
            }
            out.push(t);
        }
    }
    Ok(Adam::from_state(config, step, m, v))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `state` into `dir`. The manifest is written last, so a directory
/// without one is incomplete.
pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    config_hash: &str,
    seed: u64,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut optimizer_steps = BTreeMap::new();
    for name in NETWORK_NAMES {
        let bytes = encode_params(state.models.module(name).expect("known network").params())?;
        let file = network_file(name);
        files.insert(file.clone(), digest(&bytes));
        write_atomic(&dir.join(file), &bytes)?;
    }
    for name in TRAINABLE {
        let adam = state.optim.get(name).expect("known optimizer");
        let bytes = encode_adam(adam)?;
        let file = optimizer_file(name);
        files.insert(file.clone(), digest(&bytes));
        write_atomic(&dir.join(file), &bytes)?;
        optimizer_steps.insert(name.to_string(), adam.steps_taken());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        epoch: state.epoch,
        step: state.step,
        margins: state.margins.clone(),
        net: state.models.net.clone(),
        scales: state.models.ds.num_scales(),
        files,
        optimizer_steps,
    };
    write_atomic(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingCheckpointFiles {
        missing: vec![path.display().to_string()],
    })?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported",
            m.format_version
        )));
    }
    Ok(m)
}

/// How strictly a checkpoint is matched against the current configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Accept a config hash different from the expected one (with a warning).
    pub allow_config_mismatch: bool,
    /// Accept a checkpoint holding only the generators needed to anonymize;
    /// missing networks keep their fresh initialization.
    pub inference_only: bool,
}

/// Per-file outcome of comparing a directory with its manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ManifestDiff {
    pub missing: Vec<String>,
    pub corrupt: Vec<String>,
}

impl ManifestDiff {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.corrupt.is_empty()
    }
}

pub fn diff_manifest(dir: &Path, m: &CheckpointManifest) -> ManifestDiff {
    let mut diff = ManifestDiff::default();
    for (file, sha) in &m.files {
        match std::fs::read(dir.join(file)) {
            Err(_) => diff.missing.push(file.clone()),
            Ok(bytes) if digest(&bytes) != *sha => diff.corrupt.push(file.clone()),
            Ok(_) => {}
        }
    }
    diff
}

fn check_hash(m: &CheckpointManifest, expected: Option<&str>, opts: LoadOptions) -> Result<()> {
    match expected {
        Some(e) if e != m.config_hash => {
            if opts.allow_config_mismatch {
                log::warn!(
                    "checkpoint config hash {} differs from {}; proceeding as requested",
                    m.config_hash,
                    e
                );
                Ok(())
            } else {
                Err(Error::ConfigHashMismatch {
                    expected: e.to_string(),
                    found: m.config_hash.clone(),
                })
            }
        }
        _ => Ok(()),
    }
}

fn read_verified(dir: &Path, m: &CheckpointManifest, file: &str) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sha = m
        .files
        .get(file)
        .ok_or_else(|| Error::Checkpoint(format!("{file} is not listed in the manifest")))?;
    let got = digest(&bytes);
    if got != *sha {
        return Err(Error::Checkpoint(format!(
            "{file}: digest {got} does not match manifest {sha}"
        )));
    }
    Ok(bytes)
}

/// Restores a full training state.
pub fn load_checkpoint(
    dir: &Path,
    train: &TrainConfig,
    expected_hash: Option<&str>,
    opts: LoadOptions,
) -> Result<TrainState> {
    let m = read_manifest(dir)?;
    check_hash(&m, expected_hash, opts)?;
    let diff = diff_manifest(dir, &m);
    if !diff.missing.is_empty() {
        return Err(Error::MissingCheckpointFiles {
            missing: diff.missing,
        });
    }
    if !diff.corrupt.is_empty() {
        return Err(Error::Checkpoint(format!(
            "corrupt files: {}",
            diff.corrupt.join(", ")
        )));
    }
    let mut models = ModelBundle::new(&m.net, m.scales, 0);
    load_networks(dir, &m, &mut models, &NETWORK_NAMES)?;
    let mut optim = Optimizers::new(&models, train);
    for name in TRAINABLE {
        let file = optimizer_file(name);
        let bytes = read_verified(dir, &m, &file)?;
        let slot = optim.get_mut(name).expect("known optimizer");
        let step = m.optimizer_steps.get(name).copied().unwrap_or(0);
        let params = models.module(name).expect("known network").params();
        *slot = decode_adam(&bytes, &file, slot.config, step, params)?;
    }
    Ok(TrainState {
        models,
        optim,
        epoch: m.epoch,
        step: m.step,
        margins: m.margins,
    })
}

fn load_networks(
    dir: &Path,
    m: &CheckpointManifest,
    models: &mut ModelBundle,
    names: &[&str],
) -> Result<()> {
    for &name in names {
        let file = network_file(name);
        let bytes = read_verified(dir, m, &file)?;
        decode_params(
            models.module_mut(name).expect("known network").params_mut(),
            &bytes,
            &file,
        )?;
    }
    Ok(())
}

/// Restores the networks for anonymization. Without `inference_only` every
/// network file must be present.
pub fn load_models(
    dir: &Path,
    expected_hash: Option<&str>,
    opts: LoadOptions,
) -> Result<(ModelBundle, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    check_hash(&m, expected_hash, opts)?;
    let diff = diff_manifest(dir, &m);
    if !diff.corrupt.is_empty() {
        return Err(Error::Checkpoint(format!(
            "corrupt files: {}",
            diff.corrupt.join(", ")
        )));
    }
    let names: Vec<&str> = if opts.inference_only {
        let needed: Vec<String> = INFERENCE_NETWORKS
            .iter()
            .map(|n| network_file(n))
            .filter(|f| diff.missing.contains(f))
            .collect();
        if !needed.is_empty() {
            return Err(Error::MissingCheckpointFiles { missing: needed });
        }
        NETWORK_NAMES
            .iter()
            .copied()
            .filter(|n| !diff.missing.contains(&network_file(n)))
            .collect()
    } else {
        let missing: Vec<String> = diff
            .missing
            .iter()
            .filter(|f| !f.starts_with("adam_"))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCheckpointFiles { missing });
        }
        NETWORK_NAMES.to_vec()
    };
    let mut models = ModelBundle::new(&m.net, m.scales, 0);
    load_networks(dir, &m, &mut models, &names)?;
    Ok((models, m))
}

/// Name of the per-epoch checkpoint directory.
pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}

/// Records `dir` as the most recent checkpoint under `root`.
pub fn mark_latest(root: &Path, dir: &Path) -> Result<()> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    write_atomic(&root.join("LATEST"), name.as_bytes())
}

pub fn latest(root: &Path) -> Result<PathBuf> {
    let path = root.join("LATEST");
    let name = std::fs::read_to_string(&path).map_err(|_| Error::MissingCheckpointFiles {
        missing: vec![path.display().to_string()],
    })?;
    Ok(root.join(name.trim()))
}
