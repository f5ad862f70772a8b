use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cldl_cli::compare::{merge, merge_files};
use cldl_core::attacks::{write_results_csv, TransferRow};
use cldl_core::data::{write_idx_images, write_idx_labels};
use cldl_core::{Array, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cldl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cldl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cldl")
}

fn write_split(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let y = rng.random_range(0..10usize);
        labels.push(y);
        for k in 0..36 {
            let v: f64 = if (k + y) % 10 < 3 { 0.8 } else { 0.1 };
            pixels.push(((v + rng.random_range(-0.1..0.1)) * 255.0).round() / 255.0);
        }
    }
    let images = Array::new(vec![n, 1, 6, 6], pixels).unwrap();
    write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), &images).unwrap();
    write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
}

/// Temp workspace with a small IDX dataset under `data/` and a config.
fn workspace(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_split(&data, "train", 150, 1);
    write_split(&data, "t10k", 60, 2);
    let config = dir.path().join("run.ini");
    fs::write(
        &config,
        format!(
            "data_dir = data\ntrain_size = 120\neval_size = 40\nmembers = 2\nrepr_dim = 4\n\
             epochs = 2\nbatch_size = 32\nlr_drop_epochs = 2\nseed = 3\n{extra}"
        ),
    )
    .unwrap();
    (dir, config)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let (dir, _) = workspace("");
    let root = dir.path();
    for run in ["a", "b"] {
        ok(&cldl(&["train", "--config", "run.ini", "--out", run], root));
    }
    let a = fs::read(root.join("a/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(root.join("b/model.ckpt")).unwrap());
    assert_eq!(
        fs::read(root.join("a/train_log.csv")).unwrap(),
        fs::read(root.join("b/train_log.csv")).unwrap()
    );
    let ck = Checkpoint::load(&root.join("a/model.ckpt")).unwrap();
    assert_eq!(ck.ensemble.len(), 2);
    assert!(ck.lcm.is_some());
    let log = fs::read_to_string(root.join("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 4);

    ok(&cldl(
        &["train", "--config", "run.ini", "--out", "c", "--seed", "4"],
        root,
    ));
    assert_ne!(a, fs::read(root.join("c/model.ckpt")).unwrap());
}

#[test]
fn attack_and_eval_produce_stable_tables() {
    let (dir, _) = workspace("");
    let root = dir.path();
    ok(&cldl(&["train", "--config", "run.ini", "--out", "t"], root));
    fs::write(
        root.join("sur.ini"),
        "data_dir = data\ntrain_size = 120\neval_size = 40\nmembers = 2\nrepr_dim = 4\nepochs = 2\n\
         objective = cross-entropy\nalpha = 0\nbeta = 0\nseed = 9\n",
    )
    .unwrap();
    ok(&cldl(&["train", "--config", "sur.ini", "--out", "s"], root));
    let attack = |out: &str| {
        cldl(
            &[
                "attack",
                "--config",
                "run.ini",
                "--target",
                "t/model.ckpt",
                "--surrogate",
                "s/model.ckpt",
                "--out",
                out,
                "--families",
                "fgsm,pgd",
                "--epsilons",
                "0.1,0.2",
            ],
            root,
        )
    };
    ok(&attack("r1.csv"));
    ok(&attack("r2.csv"));
    let r1 = fs::read_to_string(root.join("r1.csv")).unwrap();
    assert_eq!(r1, fs::read_to_string(root.join("r2.csv")).unwrap());
    let lines: Vec<&str> = r1.lines().collect();
    assert_eq!(
        lines[0],
        "dataset,family,epsilon,n_examples,clean_accuracy,adversarial_accuracy"
    );
    assert_eq!(lines.len(), 1 + 1 + 4);
    assert!(lines[1].starts_with("mnist,clean,0,40,"));

    let eval = cldl(
        &[
            "eval",
            "--config",
            "run.ini",
            "--target",
            "t/model.ckpt",
            "--out",
            "e.csv",
        ],
        root,
    );
    ok(&eval);
    let printed = String::from_utf8(eval.stdout).unwrap();
    assert!(
        printed.starts_with("dataset,n_examples,clean_accuracy,mean_jsd,mean_abs_cos\nmnist,40,")
    );
    assert_eq!(printed, fs::read_to_string(root.join("e.csv")).unwrap());

    let cmp = cldl(&["compare", "r1.csv", "r1.csv", "--out", "m.csv"], root);
    ok(&cmp);
    let merged = fs::read_to_string(root.join("m.csv")).unwrap();
    let mut rows = merged.lines();
    assert_eq!(rows.next().unwrap(), "dataset,family,epsilon,r1,r1#2");
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[3], cells[4], "{row}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let (dir, _) = workspace("");
    let root = dir.path();
    fs::write(root.join("bad.ini"), "colour = red\n").unwrap();
    let out = cldl(&["train", "--config", "bad.ini", "--out", "x"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    fs::write(root.join("nodata.ini"), "data_dir = missing\n").unwrap();
    let out = cldl(&["train", "--config", "nodata.ini", "--out", "y"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.join("y").exists(), "no partial outputs");

    let out = cldl(&["train", "--config", "absent.ini", "--out", "z"], root);
    assert_eq!(out.status.code(), Some(2));

    let out = cldl(
        &[
            "attack",
            "--config",
            "run.ini",
            "--target",
            "a",
            "--surrogate",
            "b",
            "--out",
            "o.csv",
            "--epsilons",
            "",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty attack sweep"));

    let out = cldl(&["train", "--out", "x"], root);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let (dir, _) = workspace("lr_members = 1e200\n");
    let out = cldl(
        &["train", "--config", "run.ini", "--out", "nan"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical abort"));
    assert!(!dir.path().join("nan").exists());
}

#[test]
fn old_checkpoint_versions_are_refused() {
    let (dir, _) = workspace("");
    let root = dir.path();
    ok(&cldl(&["train", "--config", "run.ini", "--out", "t"], root));
    let mut bytes = fs::read(root.join("t/model.ckpt")).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(root.join("t/old.ckpt"), bytes).unwrap();
    let out = cldl(
        &[
            "attack",
            "--config",
            "run.ini",
            "--target",
            "t/old.ckpt",
            "--surrogate",
            "t/model.ckpt",
            "--out",
            "o.csv",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

fn row(family: &str, eps: f64, acc: f64) -> TransferRow {
    TransferRow {
        dataset: "mnist".into(),
        family: family.into(),
        epsilon: eps,
        n_examples: 100,
        clean_accuracy: 98.0,
        adversarial_accuracy: acc,
    }
}

#[test]
fn compare_groups_by_family_then_epsilon() {
    let eps = [0.25, 0.1, 0.2, 0.15];
    let run = |shift: f64| {
        let mut rows = vec![row("clean", 0.0, 98.0)];
        rows.extend(eps.iter().map(|&e| row("bim", e, 90.0 - 100.0 * e + shift)));
        rows
    };
    let table = merge(vec![("cldl".into(), run(5.0)), ("base".into(), run(0.0))]);
    assert_eq!(table.runs, vec!["cldl", "base"]);
    assert_eq!(table.rows.len(), 4);
    let order: Vec<f64> = table.rows.iter().map(|(k, _)| k.2).collect();
    assert_eq!(order, vec![0.1, 0.15, 0.2, 0.25]);
    for (_, cells) in &table.rows {
        assert_eq!(cells.len(), 2);
        assert!((cells[0].unwrap() - cells[1].unwrap() - 5.0).abs() < 1e-9);
    }
    assert_eq!(
        table.clean,
        vec![("mnist".to_string(), vec![Some(98.0), Some(98.0)])]
    );

    let mixed = merge(vec![(
        "x".into(),
        vec![
            row("mim", 0.1, 1.0),
            row("fgsm", 0.2, 2.0),
            row("fgsm", 0.1, 3.0),
            row("pgd", 0.1, 4.0),
        ],
    )]);
    let keys: Vec<(String, f64)> = mixed.rows.iter().map(|(k, _)| (k.1.clone(), k.2)).collect();
    assert_eq!(
        keys,
        vec![
            ("fgsm".into(), 0.1),
            ("fgsm".into(), 0.2),
            ("pgd".into(), 0.1),
            ("mim".into(), 0.1)
        ]
    );

    let text = table.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 1 + 4);
    assert!(lines[0].starts_with("dataset"));
    assert!(lines[1].contains("clean"));
    let width = lines[0].len();
    assert!(lines.iter().all(|l| l.len() == width), "{text}");
}

#[test]
fn compare_rejects_foreign_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    write_results_csv(&good, &[row("clean", 0.0, 98.0)]).unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "epoch,step,mean_kl,l_ld,l_gd,total\n1,1,0,0,0,0\n").unwrap();
    assert!(merge_files(&[good.clone(), bad]).is_err());
    let out = cldl(&["compare", "missing.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        merge_files(&[good.clone(), good]).unwrap().runs,
        vec!["good", "good#2"]
    );
}
