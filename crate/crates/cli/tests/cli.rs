use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mkgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate", "--out", path(dir)];
    args.extend_from_slice(extra);
    mkgp(&args)
}

fn small_data(dir: &Path) {
    let out = generate(
        dir,
        &["--subjects", "24", "--classes", "2", "--sources", "2", "--features", "3", "--seed", "5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_deterministic_and_cohort_shaped() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(generate(d, &["--seed", "1"]).status.success());
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5 + 3, "five modalities, labels, manifest, truth");
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 63);
    let m0 = fs::read_to_string(a.join("m0.csv")).unwrap();
    assert_eq!(m0.lines().next().unwrap().split(',').count(), 21);
}

#[test]
fn single_class_spec_is_rejected_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = generate(&dir, &["--classes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.exists());
}

#[test]
fn missing_manifest_exits_two_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("fit");
    let missing = tmp.path().join("nope.toml");
    let out = mkgp(&["fit", "--data", path(&missing), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "iteratons = 10\n").unwrap();
    let out = mkgp(&["fit", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_exit_codes_follow_convergence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data);
    let manifest = data.join("manifest.toml");

    let good = tmp.path().join("good");
    let out = mkgp(&[
        "fit", "--data", path(&manifest), "--out", path(&good), "--scheme", "e",
        "--iterations", "6000", "--burn-in", "1000", "--chains", "4", "--thin", "5", "--seed", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(good.join("traces/chain_0.csv").exists());
    assert!(good.join("diagnostics.csv").exists());

    // identity-mass HMC at the default step diverges, so the chains stay put
    let bad = tmp.path().join("bad");
    let args = [
        "fit", "--data", path(&manifest), "--out", path(&bad), "--scheme", "a",
        "--iterations", "20", "--burn-in", "10", "--chains", "2", "--seed", "3",
    ];
    assert_eq!(mkgp(&args).status.code(), Some(3));
    assert!(bad.join("traces/chain_1.csv").exists(), "partial outputs kept");
    let mut allowed = args.to_vec();
    allowed.push("--allow-nonconverged");
    assert_eq!(mkgp(&allowed).status.code(), Some(0));

    let diag = tmp.path().join("diag");
    let out = mkgp(&[
        "diagnose", "--traces", path(&good.join("traces")), "--out", path(&diag),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read(diag.join("diagnostics.csv")).unwrap(),
        fs::read(good.join("diagnostics.csv")).unwrap()
    );

    let pred = tmp.path().join("pred");
    let out = mkgp(&[
        "predict", "--data", path(&manifest), "--test", path(&manifest),
        "--traces", path(&good.join("traces")), "--out", path(&pred), "--n2", "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    assert_eq!(rows.lines().count(), 25);
    assert!(pred.join("scores.json").exists());
}

#[test]
fn evaluate_writes_reports_with_full_threshold_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "scheme = \"e\"\niterations = 200\nburn-in = 100\nchains = 2\nk-folds = 3\nn2 = 4\n\
         allow-nonconverged = true\nbaselines = [\"single\"]\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("eval");
    let out = mkgp(&[
        "evaluate", "--config", path(&cfg), "--data", path(&data.join("manifest.toml")),
        "--out", path(&out_dir), "--seed", "2", "--jobs", "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["evaluation.json", "evaluation.txt", "curve.csv", "weights.csv", "predictions.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    let weighted = curve.lines().filter(|l| l.starts_with("weighted sum,")).count();
    assert_eq!(weighted, 101);

    // one source only
    let single = tmp.path().join("single");
    let out = mkgp(&[
        "evaluate", "--config", path(&cfg), "--data", path(&data.join("manifest.toml")),
        "--out", path(&single), "--use-sources", "m1", "--baselines", "",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(single.join("evaluation.json")).unwrap();
    assert!(report.contains("\"m1\"") && !report.contains("\"m0\""));
}
