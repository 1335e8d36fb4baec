use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--d-model", "16", "--heads", "2", "--d-ff", "32", "--n-val", "16"];

fn dsct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsct"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dsct(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command expected to fail and returns its one-line error.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = dsct(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_v(dir: &Path, args: &[String]) -> String {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn step_lines(log: &str) -> Vec<&str> {
    log.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect()
}

fn gen(dir: &Path, n_train: &str) {
    ok(dir, &["gen-data", "--n-train", n_train, "--n-val", "16"]);
}

#[test]
fn gen_data_writes_counts_refuses_overwrite_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(dir, &["gen-data", "--n-train", "256", "--n-val", "64", "--data-dir", "nested/a"]);
    assert!(out.contains("256 train and 64 val"), "{out}");
    let a = dir.join("nested/a");
    let train = dsct::data::read_dataset(&a.join("train.bin")).unwrap();
    let val = dsct::data::read_dataset(&a.join("val.bin")).unwrap();
    assert_eq!((train.len(), val.len()), (256, 64));

    let err = fails(dir, &["gen-data", "--n-train", "256", "--n-val", "64", "--data-dir", "nested/a"]);
    assert!(err.contains("--force"), "{err}");
    ok(dir, &["gen-data", "--force", "--n-train", "256", "--n-val", "64", "--data-dir", "nested/a"]);

    ok(dir, &["gen-data", "--n-train", "256", "--n-val", "64", "--data-dir", "b"]);
    ok(dir, &["gen-data", "--n-train", "256", "--n-val", "64", "--data-dir", "c", "--seed", "1"]);
    for f in ["train.bin", "val.bin", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("train.bin")).unwrap(), fs::read(dir.join("c/train.bin")).unwrap());
}

#[test]
fn train_smoke_logs_every_step_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "64");
    let args = with(SMALL, &["--steps", "50", "--checkpoint-every", "25"]);
    let out = ok_v(dir, &[&["train".to_string()][..], &args].concat());
    let steps = step_lines(&out);
    assert_eq!(steps.len(), 50);
    for (i, line) in steps.iter().enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
        assert!(fields[2].parse::<f64>().unwrap() > 0.0);
    }
    for key in ["val bleu1=", "val bleu4=", "val rougeL=", "val ciderD="] {
        assert!(out.contains(key), "{out}");
    }
    let runs = dir.join("runs");
    for f in ["xe-000025.ckpt", "xe-000050.ckpt", "xe.ckpt", "train.log"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(runs.join("train.log")).unwrap(), out);

    let again = ok_v(dir, &[&["train".to_string(), "--run-dir".into(), "runs2".into()][..], &args].concat());
    assert_eq!(step_lines(&again), steps);
    assert_eq!(fs::read(runs.join("xe.ckpt")).unwrap(), fs::read(dir.join("runs2/xe.ckpt")).unwrap());
}

#[test]
fn interrupted_training_resumes_on_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "64");
    let full = with(SMALL, &["--steps", "30", "--run-dir", "full"]);
    ok_v(dir, &[&["train".to_string()][..], &full].concat());
    let half = with(SMALL, &["--steps", "15", "--run-dir", "half"]);
    ok_v(dir, &[&["train".to_string()][..], &half].concat());
    let rest = with(SMALL, &["--steps", "30", "--run-dir", "half", "--resume", "half/xe.ckpt"]);
    ok_v(dir, &[&["train".to_string()][..], &rest].concat());

    assert_eq!(fs::read(dir.join("full/xe.ckpt")).unwrap(), fs::read(dir.join("half/xe.ckpt")).unwrap());
    let a = fs::read_to_string(dir.join("full/train.log")).unwrap();
    let b = fs::read_to_string(dir.join("half/train.log")).unwrap();
    assert_eq!(step_lines(&a), step_lines(&b));
    assert_eq!(step_lines(&b).len(), 30);
}

#[test]
fn finetune_eval_caption_and_nomination_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "64");
    let model = with(SMALL, &["--dec-layers", "3"]);
    ok_v(dir, &[&["train".to_string(), "--steps".into(), "20".into()][..], &model].concat());

    let err = fails(dir, &["finetune-scst"]);
    assert!(err.contains("--init-from"), "{err}");
    let scst = ok_v(
        dir,
        &[
            &["finetune-scst", "--init-from", "runs/xe.ckpt", "--scst-steps", "3", "--scst-batch", "2", "--scst-beam", "3"]
                .map(String::from)[..],
            &model,
        ]
        .concat(),
    );
    let steps = step_lines(&scst);
    assert_eq!(steps.len(), 3);
    assert!(steps.iter().all(|l| l.split(' ').count() == 4), "{scst}");
    assert!(dir.join("runs/scst.ckpt").exists());

    let report = ok(dir, &["eval", "--checkpoint", "runs/xe.ckpt", "--out", "report"]);
    let keys: Vec<&str> = report.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["bleu1", "bleu4", "rougeL", "ciderD", "exact"]);
    assert_eq!(fs::read_to_string(dir.join("report/report.txt")).unwrap(), report);
    let tsv = fs::read_to_string(dir.join("report/report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 17);

    let captions = ok(dir, &["caption", "--checkpoint", "runs/xe.ckpt", "--dump-nominations", "nom.tsv"]);
    let captions: Vec<&str> = captions.lines().collect();
    assert_eq!(captions.len(), 16);
    let dump = fs::read_to_string(dir.join("nom.tsv")).unwrap();
    let blocks: Vec<&str> = dump.split("\n\n").filter(|b| !b.is_empty()).collect();
    let nonempty = captions.iter().filter(|c| !c.is_empty()).count();
    assert_eq!(blocks.len(), nonempty);
    for (block, caption) in blocks.iter().zip(captions.iter().filter(|c| !c.is_empty())) {
        let words: Vec<&str> = block.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(words.join(" "), *caption);
        for line in block.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 4, "{line}");
            for (l, f) in fields[1..].iter().enumerate() {
                assert!(*f == format!("layer{l}:R") || *f == format!("layer{l}:S"), "{line}");
            }
        }
    }
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "32");
    ok_v(dir, &[&["train".to_string(), "--steps".into(), "2".into()][..], &with(SMALL, &[])].concat());
    let mut bytes = fs::read(dir.join("runs/xe.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(dir.join("bad.ckpt"), &bytes).unwrap();
    let err = fails(dir, &["eval", "--checkpoint", "bad.ckpt"]);
    assert!(err.contains("checksum"), "{err}");
    let err = fails(dir, &["eval", "--checkpoint", "missing.ckpt"]);
    assert!(err.contains("missing.ckpt"), "{err}");

    ok(dir, &["gen-data", "--n-train", "8", "--n-val", "4", "--data-dir", "wide", "--feature-dim", "40"]);
    let err = fails(dir, &["eval", "--checkpoint", "runs/xe.ckpt", "--data-dir", "wide"]);
    assert!(err.contains("feature width"), "{err}");
}

#[test]
fn ablate_emits_four_labeled_rows_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "32");
    let args = with(&["ablate", "--steps", "5", "--out", "abl"], SMALL);
    let out = ok_v(dir, &args);
    let table = fs::read_to_string(dir.join("abl/ablation.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["variant", "bleu1", "bleu4", "rougeL", "ciderD"]);
    for (line, label) in lines[1..].iter().zip(["baseline", "psmae_add", "psmae_concat", "dsct"]) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[0], label);
        assert_eq!(cells.len(), 5);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok()));
    }
    assert!(out.contains("137.6"), "{out}");
    assert_eq!(ok_v(dir, &args), out);
}

#[test]
fn configuration_precedence_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.cfg"), "# settings\nsteps = 7\nfusion = add\n").unwrap();
    let get = |text: &str, key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
            .unwrap()
    };
    let defaults = ok(dir, &["config"]);
    assert_eq!(get(&defaults, "steps"), "3000");
    let file = ok(dir, &["config", "--config", "run.cfg"]);
    assert_eq!((get(&file, "steps"), get(&file, "fusion")), ("7".into(), "add".into()));
    let flag = ok(dir, &["config", "--config", "run.cfg", "--steps", "9"]);
    assert_eq!((get(&flag, "steps"), get(&flag, "fusion")), ("9".into(), "add".into()));

    fs::write(dir.join("typo.cfg"), "stpes = 7\n").unwrap();
    let err = fails(dir, &["config", "--config", "typo.cfg"]);
    assert!(err.contains("stpes"), "{err}");
    let err = fails(dir, &["config", "--heads", "3"]);
    assert!(err.contains("heads"), "{err}");
    let err = fails(dir, &["config", "--steps", "many"]);
    assert!(err.contains("steps"), "{err}");
    fails(dir, &["train", "--data-dir", "nowhere"]);
}
