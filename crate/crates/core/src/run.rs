//! Command-level orchestration shared by the command-line tool and tests.
//! Every function takes the resolved run configuration.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::anonymizer::{self, Anonymizer, Media, SequenceSummary};
use crate::checkpoint::{self, LoadOptions};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, EmbeddingNet, EvalReport, FaceAnonymizer, Passthrough};
use crate::models::ModelBundle;
use crate::nets::Module;
use crate::training::{self, TrainState, Trainer};

/// Flags that change how a command treats existing state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    pub resume: bool,
    pub allow_config_mismatch: bool,
}

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const INCIDENT_LOG: &str = "incidents.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved configuration into the output directory.
pub fn snapshot_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.output_dir.join(CONFIG_SNAPSHOT);
    write_file(&path, &cfg.to_toml())?;
    Ok(path)
}

/// Reads the raw corpus and writes the prepared dataset.
pub fn prepare(cfg: &RunConfig, opts: RunOptions) -> Result<DatasetManifest> {
    let detector = cfg.anonymizer.detector.clone();
    let size = cfg.net.image_size as u32;
    let prepared = dataset::prepare_pairs(&cfg.dataset, &detector, size)?;
    let manifest = dataset::write_prepared(
        &cfg.prepared_dir(),
        &prepared,
        &cfg.dataset,
        size,
        opts.force,
    )?;
    snapshot_config(cfg)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub incidents: usize,
    pub checkpoint: PathBuf,
    pub margins: Vec<f64>,
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for it in items {
        buf.push_str(&serde_json::to_string(it)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Fresh networks with the perceptual weights file applied when configured.
pub fn fresh_models(cfg: &RunConfig) -> Result<ModelBundle> {
    let mut m = ModelBundle::new(&cfg.net, cfg.loss.scales, cfg.seed);
    if let Some(path) = &cfg.net.vgg_weights {
        checkpoint::load_params_file(m.vgg.params_mut(), path)?;
    }
    Ok(m)
}

/// Margins from the config, or calibrated on the training set.
pub fn margins(cfg: &RunConfig, models: &ModelBundle, data: &Dataset) -> Result<Vec<f64>> {
    if !cfg.loss.margins.is_empty() {
        return Ok(cfg.loss.margins.clone());
    }
    training::calibrate_margins(&models.vgg, data, 64, cfg.loss.margin_percentile, cfg.seed)
}

/// Trains until `train.epochs` are complete, writing the loss log and
/// checkpoints under the output directory.
pub fn train(cfg: &RunConfig, opts: RunOptions) -> Result<TrainSummary> {
    let data = Dataset::load(&cfg.prepared_dir(), Split::Train)?;
    let root = cfg.checkpoint_root();
    let hash = cfg.model_hash();
    let state = if opts.resume {
        let dir = checkpoint::latest(&root)?;
        log::info!("resuming from {}", dir.display());
        let load = LoadOptions {
            allow_config_mismatch: opts.allow_config_mismatch,
            inference_only: false,
        };
        checkpoint::load_checkpoint(&dir, &cfg.train, Some(&hash), load)?
    } else {
        if root.join("LATEST").exists() && !opts.force {
            return Err(Error::Config(format!(
                "{} already holds checkpoints; pass --resume to continue or --force to start over",
                root.display()
            )));
        }
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        }
        for log in [LOSS_LOG, INCIDENT_LOG] {
            let p = cfg.output_dir.join(log);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let models = fresh_models(cfg)?;
        let margins = margins(cfg, &models, &data)?;
        TrainState::new(models, &cfg.train, margins)
    };
    create_dir(&root)?;
    snapshot_config(cfg)?;
    let mut trainer = Trainer::new(state, cfg.train.clone(), cfg.loss.clone(), cfg.seed)?;
    let (loss_log, incident_log) = (
        cfg.output_dir.join(LOSS_LOG),
        cfg.output_dir.join(INCIDENT_LOG),
    );
    let save = |t: &Trainer| -> Result<PathBuf> {
        let dir = checkpoint::epoch_dir(&root, t.state.epoch);
        checkpoint::save_checkpoint(&dir, &t.state, &hash, cfg.seed)?;
        checkpoint::mark_latest(&root, &dir)?;
        Ok(dir)
    };
    if !opts.resume {
        save(&trainer)?;
    }
    let every = cfg.train.checkpoint_every;
    let mut incidents = 0;
    let mut flush = |t: &mut Trainer| -> Result<()> {
        append_lines(&loss_log, &t.records)?;
        append_lines(&incident_log, &t.incidents)?;
        incidents += t.incidents.len();
        t.records.clear();
        t.incidents.clear();
        Ok(())
    };
    trainer.fit(&data, |t| {
        log::info!("epoch {} done after {} steps", t.state.epoch, t.state.step);
        flush(t)?;
        if every > 0 && t.state.epoch % every == 0 {
            save(t)?;
        }
        Ok(())
    })?;
    flush(&mut trainer)?;
    let last = save(&trainer)?;
    Ok(TrainSummary {
        epochs: trainer.state.epoch,
        steps: trainer.state.step,
        incidents,
        checkpoint: last,
        margins: trainer.state.margins.clone(),
    })
}

/// Loads the generators named by the config, or the latest checkpoint.
pub fn load_anonymizer(cfg: &RunConfig, opts: RunOptions) -> Result<Anonymizer> {
    let dir = match &cfg.anonymizer.checkpoint {
        Some(d) => d.clone(),
        None => checkpoint::latest(&cfg.checkpoint_root())?,
    };
    let hash = cfg.model_hash();
    let load = LoadOptions {
        allow_config_mismatch: opts.allow_config_mismatch,
        inference_only: true,
    };
    let (models, _) = checkpoint::load_models(&dir, Some(&hash), load)?;
    Anonymizer::new(
        models,
        Box::new(cfg.anonymizer.detector.clone()),
        cfg.anonymizer.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnonymizeOutcome {
    pub media: String,
    pub summary: SequenceSummary,
    pub summary_path: Option<PathBuf>,
}

/// Anonymizes an image, a directory of images or a video.
pub fn anonymize(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    opts: RunOptions,
) -> Result<AnonymizeOutcome> {
    let media = anonymizer::classify(input)?;
    if output.exists()
        && !opts.force
        && (media != Media::Directory
            || std::fs::read_dir(output)
                .map(|mut d| d.next().is_some())
                .unwrap_or(true))
    {
        return Err(Error::Media(format!(
            "{} already exists; pass --force to overwrite",
            output.display()
        )));
    }
    let anon = if cfg.anonymizer.passthrough {
        let models = ModelBundle::new(&cfg.net, cfg.loss.scales, cfg.seed);
        Anonymizer::new(
            models,
            Box::new(cfg.anonymizer.detector.clone()),
            cfg.anonymizer.clone(),
        )?
    } else {
        load_anonymizer(cfg, opts)?
    };
    let (summary, summary_path) = match media {
        Media::Image => {
            let report = anonymizer::anonymize_image(&anon, input, output)?;
            let mut s = SequenceSummary {
                frames: 1,
                ..Default::default()
            };
            s.resolution = Some(image::image_dimensions(output)?);
            s.faces_per_frame.insert(report.faces.len(), 1);
            (s, None)
        }
        Media::Directory => {
            let s = anonymizer::anonymize_dir(&anon, input, output)?;
            let p = output.join("summary.txt");
            write_file(&p, &s.to_text())?;
            (s, Some(p))
        }
        Media::Video => {
            let s = anonymizer::anonymize_video(&anon, input, output)?;
            let p = output.with_extension("summary.txt");
            write_file(&p, &s.to_text())?;
            (s, Some(p))
        }
    };
    Ok(AnonymizeOutcome {
        media: format!("{media:?}").to_lowercase(),
        summary,
        summary_path,
    })
}

pub fn embedding_path(cfg: &RunConfig) -> PathBuf {
    cfg.eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("embedding.safetensors"))
}

/// Trains the embedding network on the training split and saves it.
pub fn train_embedding(cfg: &RunConfig) -> Result<(PathBuf, Vec<f64>)> {
    let data = Dataset::load(&cfg.prepared_dir(), Split::Train)?;
    let mut net = EmbeddingNet::from_config(&cfg.eval, cfg.net.image_size, cfg.seed);
    let trace = evaluation::train_embedding(&mut net, &data, &cfg.eval, cfg.seed)?;
    let path = embedding_path(cfg);
    net.save(&path)?;
    Ok((path, trace))
}

/// Writes `report.txt` and `report.csv` under `<out>/eval`.
pub fn eval(cfg: &RunConfig, opts: RunOptions) -> Result<(EvalReport, PathBuf)> {
    let net = EmbeddingNet::load(&embedding_path(cfg), &cfg.eval, cfg.net.image_size)?;
    let heldout = Dataset::load(&cfg.prepared_dir(), Split::Test)?;
    let criterion_set = if evaluation::has_criterion_pairs(&heldout) {
        heldout
    } else {
        Dataset::load(&cfg.prepared_dir(), Split::Train)?
    };
    let mut named = Vec::new();
    if cfg.eval.datasets.is_empty() {
        named.push((
            "heldout".to_string(),
            Dataset::load(&cfg.prepared_dir(), Split::Test)?,
        ));
    } else {
        for set in &cfg.eval.datasets {
            named.push((set.name.clone(), Dataset::load(&set.path, Split::Test)?));
        }
    }
    let anon: Box<dyn FaceAnonymizer> = if cfg.anonymizer.passthrough {
        Box::new(Passthrough)
    } else {
        Box::new(load_anonymizer(cfg, opts)?)
    };
    let sets: Vec<(String, &Dataset)> = named.iter().map(|(n, d)| (n.clone(), d)).collect();
    let report = evaluation::evaluate_anonymizer(
        &net,
        anon.as_ref(),
        &criterion_set,
        &sets,
        &cfg.eval,
        cfg.seed,
    )?;
    let dir = cfg.output_dir.join("eval");
    write_file(&dir.join("report.txt"), &report.to_text())?;
    write_file(&dir.join("report.csv"), &report.to_csv())?;
    Ok((report, dir))
}
