// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use endp::data::{write_idx, Dataset};
use endp::train::{Checkpoint, ExperimentRecord};
use endp_cli::commands::{self, Overrides};
use endp_cli::config::Config;
use endp_cli::records::records_header;

/// Three classes of bars on 6×6: horizontal, vertical, diagonal.
fn bars(count: usize, seed: u64) -> Dataset {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count {
        let c = i % 3;
        let at = 1 + (next() * 4.0) as usize;
        for y in 0..6 {
            for x in 0..6 {
                let on = match c {
                    0 => y == at,
                    1 => x == at,
                    _ => x == y,
                };
                pixels.push(((if on { 0.8 } else { 0.1 }) + 0.2 * next()).min(1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new("bars", "train", [1, 6, 6], 3, pixels, labels).unwrap()
}

const NETWORK: &str = r#"
[network]
input = [1, 6, 6]
classes = 3

[[network.layers]]
kind = "conv"
kernels = 4
size = 3
covariance = "full"

[[network.layers]]
kind = "activation"
function = "relu"
ensemble = 8

[[network.layers]]
kind = "maxpool"
patch = 2
stride = 2

[[network.layers]]
kind = "dense"
outputs = 3
covariance = "full"
"#;

/// Writes toy IDX data and a config into `dir`; returns the config path.
fn toy(dir: &Path, evaluation: &str) -> PathBuf {
    write_idx(&bars(60, 1), &dir.join("train-images"), &dir.join("train-labels")).unwrap();
    write_idx(&bars(30, 2), &dir.join("test-images"), &dir.join("test-labels")).unwrap();
    let text = format!(
        r#"
[experiment]
name = "toy"

[data]
format = "idx"
train_images = "train-images"
train_labels = "train-labels"
test_images = "test-images"
test_labels = "test-labels"
{NETWORK}
[training]
epochs = 2
batch_size = 16
learning_rate = 0.01
var_floor = 0.1
seed = 3

[evaluation]
{evaluation}
"#
    );
    let path = dir.join("toy.toml");
    fs::write(&path, text).unwrap();
    path
}

fn endp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endp")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn toy_train_writes_epoch_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), "");
    let out = dir.path().join("run");
    let o = endp(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("records.csv"));
    assert_eq!(header, records_header(&[]));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][2], "2");
    for f in [
        "records.json",
        "checkpoints/last.ckpt",
        "checkpoints/epoch-0001.ckpt",
        "checkpoints/epoch-0002.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_dataset_fails_without_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), "");
    fs::remove_file(dir.path().join("train-images")).unwrap();
    let out = dir.path().join("run");
    let o = endp(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-images"));
    assert!(!out.join("records.csv").exists());
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_rejected_in_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(toy(dir.path(), "")).unwrap();
    let good = Config::from_toml(&base).unwrap();
    assert_eq!(good.training.seed, 3);
    for (section, key) in [
        ("[experiment]", "nmae = 1"),
        ("[data]", "train_subet = 5"),
        ("[training]", "epoch = 3"),
        ("[evaluation]", "fgsn = [0.1]"),
        ("[network]", "ensemble_size = 4"),
    ] {
        let text = base.replacen(section, &format!("{section}\n{key}"), 1);
        let err = Config::from_toml(&text).unwrap_err();
        assert!(format!("{err:#}").contains("unknown field"), "{section}: {err:#}");
    }
    let typo_layer = base.replacen("patch = 2", "patch = 2\npad = 1", 1);
    assert!(Config::from_toml(&typo_layer).is_err());
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(toy(dir.path(), "")).unwrap();
    let bad = [
        base.replace("[evaluation]", "[evaluation]\nfgsm = [0.1]"),
        base.replace("[evaluation]", "[evaluation]\ngaussian = [0.1, 0.1]"),
        base.replace("[evaluation]", "[evaluation]\ngaussian = [-0.1]"),
        base.replace("batch_size = 16", "batch_size = 0"),
        base.replace("[network]", "[network]\npreset = \"mnist\""),
        base.replace("test_labels = \"test-labels\"", ""),
    ];
    for text in bad {
        assert!(Config::from_toml(&text).is_err());
    }
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = Config::load(&path).unwrap();
            assert!(cfg.data.train_images.as_ref().unwrap().starts_with(&dir));
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn reruns_reproduce_records_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), "gaussian = [0.05]\nfgsm = [0.1]\ntarget_class = 1");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(endp(&["train", "--config", s(&cfg), "--out", s(out)]).status.success());
    }
    let strip = |p: &Path| {
        let (h, rows) = csv_rows(&p.join("records.csv"));
        let t = h.iter().position(|c| c == "epoch_seconds").unwrap();
        rows.into_iter()
            .map(|mut r| {
                r.remove(t);
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    for f in ["checkpoints/last.ckpt", "checkpoints/epoch-0001.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    assert!(endp(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "4"])
        .status
        .success());
    assert_ne!(
        fs::read(a.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(c.join("checkpoints/last.ckpt")).unwrap()
    );
}

#[test]
fn json_mirrors_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(
        dir.path(),
        "gaussian = [0.05]\nfgsm = [0.1]\ntarget_class = 1\nevery_epoch = true",
    );
    let out = dir.path().join("run");
    assert!(endp(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let json: Vec<ExperimentRecord> = serde_json::from_slice(&fs::read(out.join("records.json")).unwrap()).unwrap();
    let (header, rows) = csv_rows(&out.join("records.csv"));
    assert_eq!(json.len(), rows.len());
    let col = |name: &str| header.iter().position(|c| c == name).unwrap();
    let num = |cell: &str| cell.parse::<f64>().unwrap();
    for (r, row) in json.iter().zip(&rows) {
        assert_eq!(r.run_id, row[col("run_id")]);
        assert_eq!(r.nll, num(&row[col("nll")]));
        assert_eq!(r.total, num(&row[col("total")]));
        assert_eq!(r.clean_accuracy, Some(num(&row[col("clean_accuracy")])));
        assert_eq!(r.conditions[1].1, num(&row[col("acc_fgsm_0.1")]));
        assert_eq!(r.epoch_seconds, num(&row[col("epoch_seconds")]));
        for acc in std::iter::once(r.clean_accuracy.unwrap()).chain(r.conditions.iter().map(|c| c.1)) {
            assert!((0.0..=1.0).contains(&acc));
        }
        assert!(r.epoch_seconds > 0.0);
    }
}

#[test]
fn eval_rows_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let clean_only = toy(dir.path(), "");
    let run = dir.path().join("run");
    let cfg = Config::load(&clean_only).unwrap();
    commands::train(
        &cfg,
        &Overrides {
            out: Some(run.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let ckpt = run.join("checkpoints/last.ckpt");
    let ov = |out: &str| Overrides {
        out: Some(dir.path().join(out)),
        checkpoint: Some(ckpt.clone()),
        ..Default::default()
    };

    let clean = commands::eval(&cfg, &ov("e1")).unwrap();
    let (header, rows) = csv_rows(&dir.path().join("e1/records.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(header, records_header(&[]));
    assert_eq!(clean.epoch, 2);

    let mut grid = cfg.clone();
    grid.evaluation.gaussian = vec![0.0, 0.1];
    grid.evaluation.fgsm = vec![0.1, 0.2];
    grid.evaluation.target_class = Some(1);
    let r = commands::eval(&grid, &ov("e2")).unwrap();
    let (header, _) = csv_rows(&dir.path().join("e2/records.csv"));
    let acc_cols: Vec<_> = header
        .iter()
        .filter(|c| c.starts_with("acc") || c.as_str() == "clean_accuracy")
        .collect();
    assert_eq!(acc_cols.len(), 5);
    assert_eq!(
        r.conditions[0],
        ("gaussian_0".to_string(), clean.clean_accuracy.unwrap())
    );
    assert_eq!(r.clean_accuracy, clean.clean_accuracy);
}

#[test]
fn attack_rows_and_image_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "fgsm = [0.0, 0.3]\ntarget_class = 2\ndump_images = true");
    let run = dir.path().join("run");
    assert!(endp(&["train", "--config", s(&path), "--out", s(&run)])
        .status
        .success());
    let out = dir.path().join("atk");
    let o = endp(&[
        "attack",
        "--config",
        s(&path),
        "--out",
        s(&out),
        "--checkpoint",
        s(&run.join("checkpoints/last.ckpt")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("attack.csv"));
    assert_eq!(rows.len(), 3);
    let acc = header.iter().position(|c| c == "accuracy").unwrap();
    let hit = header.iter().position(|c| c == "target_hit_rate").unwrap();
    assert_eq!(rows[0][acc], rows[1][acc]);
    for r in &rows[1..] {
        assert!((0.0..=1.0).contains(&r[hit].parse::<f64>().unwrap()));
    }
    let bytes = fs::read(out.join("images.bin")).unwrap();
    assert_eq!(bytes.len(), 2 * 30 * 36 * 8);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"][1]["offset"], 30 * 36 * 8);
    // the ε = 0 block is the unmodified test set
    let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
    let test = endp::data::load_idx(&dir.path().join("test-images"), &dir.path().join("test-labels")).unwrap();
    assert_eq!(first, test.image(0)[0]);
}

#[test]
fn eval_and_attack_need_a_valid_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "gaussian = [0.1]");
    assert!(
        !endp(&["eval", "--config", s(&path), "--out", s(&dir.path().join("x"))])
            .status
            .success()
    );
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = endp(&[
        "attack",
        "--config",
        s(&path),
        "--checkpoint",
        s(&junk),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn sweep_rows_and_duplicate_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "");
    let out = dir.path().join("sw");
    let o = endp(&["sweep-n", "--config", s(&path), "--out", s(&out), "--n", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][header.iter().position(|c| c == "n").unwrap()], "4");
    let dup = endp(&[
        "sweep-n",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("d")),
        "--n",
        "4,8,4",
    ]);
    assert!(!dup.status.success());
    assert!(commands::validate_sweep(&[1]).is_err());
    assert!(commands::validate_sweep(&[]).is_err());
}

#[test]
fn check_grad_passes_on_the_toy() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "");
    let text = fs::read_to_string(&path).unwrap().replace("\"relu\"", "\"elu\"");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("g");
    let o = endp(&["check-grad", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(out.join("gradcheck.json").exists());
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(endp(&["train", "--config", s(&path), "--out", s(&a)]).status.success());
    let first = a.join("checkpoints/epoch-0001.ckpt");
    assert_eq!(Checkpoint::load(&first).unwrap().epoch, 1);
    assert!(
        endp(&["train", "--config", s(&path), "--out", s(&b), "--checkpoint", s(&first)])
            .status
            .success()
    );
    assert_eq!(
        fs::read(a.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(b.join("checkpoints/last.ckpt")).unwrap()
    );
    let (_, rows) = csv_rows(&b.join("records.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy(dir.path(), "");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_endp"))
            .args(["train", "--config", s(&path), "--out", s(&dir.path().join(threads))])
            .env("ENDP_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert!(!run("zero").status.success());
}
