use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

/// A raw synthetic corpus plus a toy-sized config pointing at it.
fn workspace(identities: usize, per_identity: usize) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    anonet::synth::write_corpus(&root.join("raw"), identities, per_identity, 80, 3).unwrap();
    let config = root.join("run.toml");
    let text = format!(
        r#"seed = 5
output_dir = "{out}"

[dataset]
root = "{raw}"
resolution_set = [64]
holdout_fraction = 0.25

[net]
image_size = 64
ngf = 4
n_blocks = 1
ndf = 4
d_layers = 2
spade_nf = 4
spade_hidden = 8
spade_upsamples = 3
vgg_widths = [4, 4, 8, 8, 8]

[train]
epochs = 0

[eval]
embedding_dim = 8
width = 4
epochs = 1
pairs_per_epoch = 16
criterion_pairs = 8
"#,
        out = root.join("out").display(),
        raw = root.join("raw").display()
    );
    std::fs::write(&config, text).unwrap();
    Workspace {
        _tmp: tmp,
        root,
        config,
    }
}

fn anonet(ws: &Workspace, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anonet"))
        .arg("--config")
        .arg(&ws.config)
        .args(args)
        .env_remove("ANONET_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn faceless(path: &Path) {
    RgbImage::from_fn(90, 70, |x, y| Rgb([(x * 2) as u8, 40 + y as u8, 200]))
        .save(path)
        .unwrap();
}

#[test]
fn prepare_reports_counts_and_refuses_to_overwrite() {
    let ws = workspace(4, 2);
    let o = anonet(&ws, &["prepare-data"]);
    assert_ok(&o);
    assert!(
        stdout(&o).contains("prepared 6 train and 2 test pairs"),
        "{}",
        stdout(&o)
    );
    assert!(ws.root.join("out/prepared/manifest.json").exists());
    assert!(ws.root.join("out/config.toml").exists());

    let again = anonet(&ws, &["prepare-data"]);
    assert_eq!(again.status.code(), Some(4));
    assert_ok(&anonet(&ws, &["prepare-data", "--force"]));
}

#[test]
fn corrupted_mask_is_skipped_and_reported() {
    let ws = workspace(2, 2);
    std::fs::write(ws.root.join("raw/masks/id001_00.png"), b"broken").unwrap();
    let o = anonet(&ws, &["prepare-data"]);
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.contains("1 corrupt"), "{out}");
    assert!(out.contains("corrupt id001_00"), "{out}");
}

#[test]
fn missing_dataset_exits_with_the_dataset_code() {
    let ws = workspace(1, 1);
    std::fs::remove_dir_all(ws.root.join("raw")).unwrap();
    assert_eq!(anonet(&ws, &["prepare-data"]).status.code(), Some(4));
    assert_eq!(anonet(&ws, &["train"]).status.code(), Some(4));
}

#[test]
fn bad_config_exits_with_the_config_code() {
    let ws = workspace(1, 1);
    std::fs::write(&ws.config, "[train]\nbogus = 1\n").unwrap();
    assert_eq!(anonet(&ws, &["train"]).status.code(), Some(3));
}

#[test]
fn zero_epoch_run_then_anonymize_and_eval() {
    let ws = workspace(4, 2);
    assert_ok(&anonet(&ws, &["prepare-data"]));
    let t = anonet(&ws, &["train"]);
    assert_ok(&t);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&t)).unwrap();
    assert_eq!(summary["steps"], 0);
    assert!(ws.root.join("out/checkpoints/LATEST").exists());
    assert_eq!(
        anonet(&ws, &["train"]).status.code(),
        Some(3),
        "existing checkpoints need --resume or --force"
    );

    let input = ws.root.join("plain.png");
    faceless(&input);
    let output = ws.root.join("plain_out.png");
    assert_ok(&anonet(
        &ws,
        &[
            "anonymize",
            input.to_str().unwrap(),
            output.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        image::open(&output).unwrap().to_rgb8(),
        image::open(&input).unwrap().to_rgb8()
    );
    assert_eq!(
        std::fs::read(&output).unwrap(),
        std::fs::read(&input).unwrap()
    );
    let again = anonet(
        &ws,
        &[
            "anonymize",
            input.to_str().unwrap(),
            output.to_str().unwrap(),
        ],
    );
    assert_eq!(again.status.code(), Some(6));

    let dir_in = ws.root.join("frames");
    std::fs::create_dir(&dir_in).unwrap();
    faceless(&dir_in.join("0001.png"));
    std::fs::copy(
        ws.root.join("raw/photos/id000_00.png"),
        dir_in.join("0002.png"),
    )
    .unwrap();
    let dir_out = ws.root.join("frames_out");
    let o = anonet(
        &ws,
        &[
            "anonymize",
            dir_in.to_str().unwrap(),
            dir_out.to_str().unwrap(),
        ],
    );
    assert_ok(&o);
    assert!(stdout(&o).contains("frames: 2"), "{}", stdout(&o));
    assert!(dir_out.join("0001.png").exists() && dir_out.join("0002.png").exists());
    assert!(dir_out.join("summary.txt").exists());

    let e = anonet(&ws, &["eval", "--train-embedding", "--passthrough"]);
    assert_ok(&e);
    let csv = std::fs::read_to_string(ws.root.join("out/eval/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dataset,n,mean_distance"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "heldout");
    assert_eq!(row[1], "2");
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert!(std::fs::read_to_string(ws.root.join("out/eval/report.txt"))
        .unwrap()
        .contains("criterion_same"));
}

#[test]
fn anonymize_without_checkpoint_is_a_model_error() {
    let ws = workspace(1, 1);
    let input = ws.root.join("plain.png");
    faceless(&input);
    let o = anonet(
        &ws,
        &[
            "anonymize",
            input.to_str().unwrap(),
            ws.root.join("o.png").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(5));
    let o = anonet(
        &ws,
        &[
            "anonymize",
            "--passthrough",
            input.to_str().unwrap(),
            ws.root.join("o.png").to_str().unwrap(),
        ],
    );
    assert_ok(&o);
}

#[test]
fn unsupported_media_exits_with_the_media_code() {
    let ws = workspace(1, 1);
    let input = ws.root.join("clip.gif");
    std::fs::write(&input, b"GIF89a").unwrap();
    let o = anonet(
        &ws,
        &[
            "anonymize",
            "--passthrough",
            input.to_str().unwrap(),
            ws.root.join("x.gif").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn out_flag_beats_the_environment() {
    let ws = workspace(2, 2);
    let flag_dir = ws.root.join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_anonet"))
        .args([
            "--config",
            ws.config.to_str().unwrap(),
            "--out",
            flag_dir.to_str().unwrap(),
            "prepare-data",
        ])
        .env("ANONET_OUT", ws.root.join("env"))
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(flag_dir.join("prepared/manifest.json").exists());
    assert!(!ws.root.join("env").exists());
}
