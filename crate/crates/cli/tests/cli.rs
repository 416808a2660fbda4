use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use filmseg::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use filmseg::config::RunConfig;
use filmseg::data::{read_dataset, read_manifest, write_dataset};
use filmseg::experiment::{gridsearch, quiet_train, Grid, ROW_LABELS};
use filmseg::metrics::EvalReport;
use filmseg::train::{load_for, FINAL_CHECKPOINT};
use filmseg::{Error, Tensor};

fn film_seg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_film-seg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", s(out)];
    args.extend_from_slice(extra);
    film_seg(&args)
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Eight samples (eight phantoms, one slice) and a depth-2 config.
fn smoke_setup(root: &Path, mode: &str, conditioning: bool) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let o = gen(&data, &["--phantoms", "8", "--slices", "1", "--mode", mode, "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig {
        out: root.join("run"),
        mode: mode.parse().unwrap(),
        depth: 2,
        base_channels: 4,
        film_hidden: 8,
        epochs: 2,
        conditioning,
        ..RunConfig::new(&data, 3)
    };
    let path = root.join("config.json");
    cfg.save(&path).unwrap();
    (data, path)
}

#[test]
fn gen_data_defaults_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = gen(&out, &["--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = read_dataset(&out).unwrap();
    assert_eq!(ds.samples.len(), 400);
    assert_eq!(ds.contrast_counts(), vec![("T2w".to_string(), 200), ("T2star".to_string(), 200)]);
    assert!(stdout(&o).contains("400 samples"));
}

#[test]
fn gen_data_is_byte_reproducible_and_records_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gen(out, &["--phantoms", "6", "--mode", "contrast_flip", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree(&a), tree(&b));
    let manifest = read_manifest(&a).unwrap();
    assert_eq!(manifest.mode.to_string(), "contrast_flip");
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(raw["mode"], "contrast_flip");
}

#[test]
fn gen_data_refuses_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let o = gen(dir.path(), &["--phantoms", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = gen(dir.path(), &["--phantoms", "5", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn single_contrast_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t2");
    assert!(gen(&out, &["--phantoms", "5", "--contrast", "T2star"]).status.success());
    let ds = read_dataset(&out).unwrap();
    assert!(ds.samples.iter().all(|s| s.contrast == "T2star"));
    let bad = gen(&dir.path().join("x"), &["--phantoms", "5", "--contrast", "FLAIR"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn help_config_prints_schema() {
    let o = film_seg(&["--help-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["\"data\"", "\"seed\"", "\"lr0\"", "\"conditioning\"", "\"standardize\""] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn smoke_training_is_fast_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = smoke_setup(dir.path(), "natural", true);
    let mut finals = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let start = Instant::now();
        let o = film_seg(&["train", "--config", s(&cfg), "--out", s(&out), "--threads", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(start.elapsed() < Duration::from_secs(60));
        for f in ["best.ckpt", "final.ckpt", "log.csv", "config.json"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let log = fs::read_to_string(out.join("log.csv")).unwrap();
        assert_eq!(log.lines().next(), Some("epoch,train_loss,val_dice,lr"));
        assert_eq!(log.lines().count(), 3);
        finals.push(fs::read(out.join(FINAL_CHECKPOINT)).unwrap());
    }
    assert_eq!(finals[0], finals[1]);
}

#[test]
fn film_tensors_present_only_with_conditioning() {
    for conditioning in [true, false] {
        let dir = tempfile::tempdir().unwrap();
        let (_, cfg) = smoke_setup(dir.path(), "natural", conditioning);
        let out = dir.path().join("run");
        assert!(film_seg(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
        let ck = read_checkpoint(&out.join(FINAL_CHECKPOINT)).unwrap();
        let film = ck.tensors.keys().filter(|k| k.starts_with("film.")).count();
        assert_eq!(film > 0, conditioning);
        assert_eq!(ck.tensors.keys().any(|k| k.contains(".affine")), !conditioning);
    }
}

#[test]
fn train_rejects_bad_configs_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = smoke_setup(dir.path(), "natural", true);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, format!("{{\"data\": {:?}, \"seed\": 1, \"depth\": 9}}", s(&data))).unwrap();
    assert_eq!(film_seg(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, format!("{{\"data\": {:?}, \"seed\": 1, \"learning_rate\": 1}}", s(&data))).unwrap();
    assert_eq!(film_seg(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    let out = dir.path().join("never");
    fs::write(
        &cfg,
        format!("{{\"data\": {:?}, \"seed\": 1, \"vocabulary\": [\"T2w\", \"FLAIR\"], \"out\": {:?}}}", s(&data), s(&out)),
    )
    .unwrap();
    let o = film_seg(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.exists());
    fs::write(&cfg, format!("{{\"data\": {:?}, \"seed\": 1, \"mode\": \"contrast_flip\"}}", s(&data))).unwrap();
    assert_eq!(film_seg(&["train", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn eval_with_oracle_checkpoint_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg_path) = smoke_setup(dir.path(), "natural", false);
    // Blank every mask, then force the head to predict background everywhere.
    let mut ds = read_dataset(&data).unwrap();
    for s in &mut ds.samples {
        s.mask = Tensor::zeros(s.mask.shape());
    }
    let empty = dir.path().join("empty");
    write_dataset(&empty, &ds).unwrap();
    let run = dir.path().join("run");
    assert!(film_seg(&["train", "--config", s(&cfg_path), "--out", s(&run)]).status.success());
    let ck_path = run.join(FINAL_CHECKPOINT);
    let mut ck = read_checkpoint(&ck_path).unwrap();
    let kernel = ck.tensors.get_mut("head.kernel").unwrap();
    *kernel = Tensor::zeros(kernel.shape());
    ck.tensors.insert("head.bias".into(), Tensor::new(&[1], vec![-20.0]).unwrap());
    let oracle = run.join("oracle.ckpt");
    write_checkpoint(&oracle, &Checkpoint { tensors: ck.tensors, fingerprint: ck.fingerprint }).unwrap();

    let o = film_seg(&["eval", "--checkpoint", s(&oracle), "--data", s(&empty)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = EvalReport::read(&run.join("eval_test.json")).unwrap();
    assert_eq!(report.overall, 1.0);
    assert!(report.samples.iter().all(|s| s.dice == 1.0));
    assert!(run.join("eval_test.csv").exists());
}

#[test]
fn eval_counts_match_the_manifest_and_guard_train_partition() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg_path) = smoke_setup(dir.path(), "natural", true);
    let run = dir.path().join("run");
    assert!(film_seg(&["train", "--config", s(&cfg_path), "--out", s(&run)]).status.success());
    let ck = run.join("best.ckpt");
    let o = film_seg(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = EvalReport::read(&run.join("eval_test.json")).unwrap();

    let manifest = read_manifest(&data).unwrap();
    let cfg = RunConfig::load(&run.join("config.json")).unwrap();
    let split = load_for(&cfg).unwrap().split(cfg.seed).unwrap();
    for c in &report.per_contrast {
        let expected = manifest
            .samples
            .iter()
            .filter(|e| e.contrast == c.contrast && split.test.contains(&e.phantom_id))
            .count();
        assert_eq!(c.count, expected, "{}", c.contrast);
    }
    assert_eq!(report.samples.len(), report.per_contrast.iter().map(|c| c.count).sum::<usize>());

    let o = film_seg(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--partition", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--allow-train-eval"));
    let o = film_seg(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--partition", "train", "--allow-train-eval"]);
    assert!(o.status.success());
    assert!(run.join("eval_train.json").exists());
}

#[test]
fn eval_refuses_fingerprint_mismatch_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg_path) = smoke_setup(dir.path(), "natural", true);
    let run = dir.path().join("run");
    assert!(film_seg(&["train", "--config", s(&cfg_path), "--out", s(&run)]).status.success());
    let ck = run.join(FINAL_CHECKPOINT);
    let stored = read_checkpoint(&ck).unwrap().fingerprint_hex();

    let bytes = fs::read(&ck).unwrap();
    fs::write(run.join("cut.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = film_seg(&["eval", "--checkpoint", s(&run.join("cut.ckpt")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cut.ckpt") && stderr(&o).contains("offset"), "{}", stderr(&o));

    let mut cfg = RunConfig::load(&run.join("config.json")).unwrap();
    cfg.lr0 *= 2.0;
    cfg.save(&run.join("config.json")).unwrap();
    let o = film_seg(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains(&stored) && err.contains(&cfg.fingerprint_hex()), "{err}");
}

#[test]
fn gridsearch_two_by_two_reports_four_cells_and_a_winner() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = smoke_setup(dir.path(), "natural", true);
    let out = dir.path().join("grid");
    let o = film_seg(&["gridsearch", "--config", s(&cfg), "--out", s(&out), "--grid", "lr0=1e-3,5e-4;depth=2,3;batch=4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).take_while(|l| !l.starts_with("winner")).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(text.lines().filter(|l| l.starts_with("winner")).count(), 1);
    assert_eq!(fs::read_to_string(out.join("grid.csv")).unwrap().lines().count(), 5);
    assert!(out.join("winner_test.json").exists());
}

#[test]
fn gridsearch_records_failing_cell_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = smoke_setup(dir.path(), "natural", true);
    let out = dir.path().join("grid");
    // A negative learning rate fails validation inside its cell only.
    let o = film_seg(&["gridsearch", "--config", s(&cfg), "--out", s(&out), "--grid", "lr0=1e-3,5e-4,2e-4,-1;depth=2;batch=4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("FAILED")).count(), 1);
    assert_eq!(fs::read_to_string(out.join("grid.csv")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(out.join("grid_failures.csv")).unwrap().lines().count(), 2);

    let all_bad = film_seg(&["gridsearch", "--config", s(&cfg), "--out", s(&dir.path().join("g2")), "--grid", "lr0=-1;depth=2"]);
    assert_eq!(all_bad.status.code(), Some(1));
}

#[test]
fn gridsearch_with_injected_trainer_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg_path) = smoke_setup(dir.path(), "natural", true);
    let cfg = RunConfig { out: dir.path().join("grid"), ..RunConfig::load(&cfg_path).unwrap() };
    let dataset = load_for(&cfg).unwrap();
    let grid: Grid = "lr0=1e-3,5e-4;depth=2,3;batch=4".parse().unwrap();
    let flaky = |c: &RunConfig, d: &filmseg::data::Dataset| {
        if c.lr0 == 5e-4 && c.depth == 3 {
            Err(Error::Validation("injected failure".into()))
        } else {
            quiet_train(c, d)
        }
    };
    let report = gridsearch(&cfg, &dataset, &grid, &flaky).unwrap();
    assert_eq!(report.cells.len(), 3);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].error.contains("injected"));

    let single: Grid = "lr0=1e-3;depth=2;batch=4".parse().unwrap();
    let cfg = RunConfig { out: dir.path().join("single"), ..cfg };
    let report = gridsearch(&cfg, &dataset, &single, &quiet_train).unwrap();
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.winner, report.cells[0]);
}

#[test]
fn compare_prints_four_named_rows_and_blind_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (both, cfg) = smoke_setup(dir.path(), "natural", true);
    let (t2, t2star) = (dir.path().join("t2"), dir.path().join("t2star"));
    assert!(gen(&t2, &["--phantoms", "8", "--slices", "1", "--contrast", "T2w", "--seed", "1"]).status.success());
    assert!(gen(&t2star, &["--phantoms", "8", "--slices", "1", "--contrast", "T2star", "--seed", "1"]).status.success());
    let out = dir.path().join("cmp");
    let o = film_seg(&[
        "compare", "--config", s(&cfg), "--out", s(&out), "--data-t2", s(&t2), "--data-t2star", s(&t2star),
        "--data-both", s(&both), "--seeds", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "{text}");
    assert!(lines[0].starts_with("Model"));
    for (line, label) in lines[1..5].iter().zip(ROW_LABELS) {
        assert!(line.starts_with(label), "{line}");
        let value = line.rsplit(' ').next().unwrap();
        assert_eq!(value.split('.').nth(1).map(str::len), Some(2), "{line}");
        let v: f64 = value.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(lines[5].contains("contrast-blind"));
    let table: serde_json::Value = serde_json::from_slice(&fs::read(out.join("compare.json")).unwrap()).unwrap();
    for row in table["rows"].as_array().unwrap() {
        let dice: Vec<f64> = row["dice"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(dice.len(), 3);
        let mut sorted = dice.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(row["median"].as_f64().unwrap(), sorted[1]);
    }

    let other_vocab = dir.path().join("flair");
    assert!(gen(&other_vocab, &["--phantoms", "5", "--slices", "1", "--vocabulary", "T2w,FLAIR"]).status.success());
    let o = film_seg(&[
        "compare", "--config", s(&cfg), "--out", s(&out), "--data-t2", s(&other_vocab), "--data-t2star", s(&t2star),
        "--data-both", s(&both),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_corrupted_rule() {
    let o = film_seg(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(text.contains("unet_film_end_to_end") && text.contains("max_rel_error="));

    let o = film_seg(&["gradcheck", "--inject-corrupted-rule"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL") && l.contains("corrupted_square")));
}

#[test]
fn calibrate_raters_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(gen(&data, &["--phantoms", "10"]).status.success());
    let out = dir.path().join("cal");
    let o = film_seg(&["calibrate-raters", "--data", s(&data), "--target", "1.0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cal: serde_json::Value = serde_json::from_slice(&fs::read(out.join("rater_strength.json")).unwrap()).unwrap();
    assert_eq!(cal["strength"], 0.0);

    let o = film_seg(&[
        "calibrate-raters", "--data", s(&data), "--target", "0.99", "--max-radius", "0", "--max-translation", "0",
        "--max-rotation", "0", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("calibration"), "{}", stderr(&o));
}

#[test]
fn training_consumes_calibrated_strength() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg_path) = smoke_setup(dir.path(), "natural", true);
    let cal_dir = dir.path().join("cal");
    let o = film_seg(&["calibrate-raters", "--data", s(&data), "--target", "0.8", "--tol", "0.05", "--out", s(&cal_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.perturb_ground_truth = true;
    cfg.rater_calibration = Some(cal_dir.join("rater_strength.json"));
    cfg.save(&cfg_path).unwrap();
    let run = dir.path().join("run");
    assert!(film_seg(&["train", "--config", s(&cfg_path), "--out", s(&run)]).status.success());
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert!(saved.rater.strength > 0.0);
    assert!(saved.rater_calibration.is_none());
    let o = film_seg(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
}
