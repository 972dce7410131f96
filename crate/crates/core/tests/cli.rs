use std::path::{Path, PathBuf};
use std::process::Command;

use siamnet::cli::split_file_name;
use siamnet::dataio::synthetic::{write_dataset, SyntheticConfig};

fn siamnet(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_siamnet"))
        .args(args)
        .env_remove("SIAMNET_THREADS")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    split: PathBuf,
}

fn fixture(subjects: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let manifest = write_dataset(
        &root.join("data"),
        &SyntheticConfig {
            subjects,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let (code, _, err) = siamnet(&[
        "split",
        "--manifest",
        &s(&manifest),
        "--repeats",
        "1",
        "--out-dir",
        &s(&root.join("splits")),
    ]);
    assert_eq!(code, 0, "{err}");
    Fixture {
        split: root.join("splits").join(split_file_name(0)),
        _dir: dir,
        root,
        manifest,
    }
}

const TOY: &[&str] = &[
    "--height", "48", "--width", "16", "--c1-channels", "4", "--c3-channels", "4", "--feature-dim", "16", "--batch-size", "8",
];

fn train(f: &Fixture, out: &str, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec![
        "train".to_string(),
        "--manifest".into(),
        s(&f.manifest),
        "--split".into(),
        s(&f.split),
        "--out-dir".into(),
        s(&f.root.join(out)),
    ];
    args.extend(TOY.iter().map(|a| a.to_string()));
    args.extend(extra.iter().map(|a| a.to_string()));
    siamnet(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn split_repeats_and_reruns_are_identical() {
    let f = fixture(10);
    let run = |out: &str| {
        let dir = f.root.join(out);
        let (code, _, _) = siamnet(&["split", "--manifest", &s(&f.manifest), "--repeats", "3", "--seed", "5", "--out-dir", &s(&dir)]);
        assert_eq!(code, 0);
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with("split_") && n.ends_with(".csv"))
            .collect();
        files.sort();
        files.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect::<Vec<_>>()
    };
    let a = run("a");
    assert_eq!(a.len(), 3);
    assert_eq!(a, run("b"));
}

#[test]
fn one_epoch_train_writes_model_log_and_defaults() {
    let f = fixture(8);
    let (code, _, err) = train(&f, "t", &["--epochs", "1"]);
    assert_eq!(code, 0, "{err}");
    let out = f.root.join("t");
    assert!(out.join("model.snet").exists());
    let log = std::fs::read_to_string(out.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,train_cost,dev_cost,seconds"));
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("train_config.json")).unwrap()).unwrap();
    let t = &echo["command"]["train"];
    assert_eq!(t["alpha"], 2.0);
    assert_eq!(t["beta"], 0.5);
    assert_eq!(t["neg_cost"], 2.0);
    assert_eq!(t["epochs"], 1);
    assert_eq!(t["cost"], "deviance");
    assert_eq!(echo["global"]["seed"], 0);
}

#[test]
fn omitted_flags_echo_defaults() {
    let args = ["siamnet", "train", "--manifest", "m.csv", "--split", "s.csv"];
    let cli = <siamnet::cli::Cli as clap::Parser>::try_parse_from(args).unwrap();
    let siamnet::cli::Command::Train(t) = &cli.command else { panic!() };
    assert_eq!((t.alpha, t.beta, t.neg_cost, t.epochs), (2.0, 0.5, 2.0, 180));
    let json = serde_json::to_value(&cli).unwrap();
    assert_eq!(json["command"]["train"]["epochs"], 180);
}

#[test]
fn replay_reproduces_the_model() {
    let f = fixture(8);
    let (code, _, err) = train(&f, "r", &["--epochs", "2", "--cost", "fisher", "--mode", "specific", "--dev"]);
    assert_eq!(code, 0, "{err}");
    let dir = f.root.join("r");
    let first = std::fs::read(dir.join("model.snet")).unwrap();
    let log = std::fs::read_to_string(dir.join("epochs.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().split(',').nth(2).is_some_and(|d| !d.is_empty()));
    std::fs::remove_file(dir.join("model.snet")).unwrap();
    let (code, _, err) = siamnet(&["replay", &s(&dir.join("train_config.json"))]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(dir.join("model.snet")).unwrap(), first);
}

#[test]
fn eval_fuses_models_and_duplicate_models_do_not_change_ranks() {
    let f = fixture(8);
    assert_eq!(train(&f, "e", &["--epochs", "2"]).0, 0);
    let model = s(&f.root.join("e").join("model.snet"));
    let eval = |models: &str, out: &str| {
        let (code, stdout, err) = siamnet(&[
            "eval", "--models", models, "--manifest", &s(&f.manifest), "--split", &s(&f.split), "--height", "48", "--width", "16",
            "--out-dir", &s(&f.root.join(out)),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.contains("rank-1"));
        std::fs::read_to_string(f.root.join(out).join("cmc.csv")).unwrap()
    };
    let single = eval(&model, "one");
    assert_eq!(single.lines().next().unwrap(), "rank,rate_mean,rate_split_1");
    assert_eq!(single.lines().count(), 1 + 4);
    assert_eq!(single, eval(&format!("{model},{model}"), "two"));
}

#[test]
fn missing_model_is_a_clean_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = siamnet(&[
        "eval", "--models", "/nonexistent/model.snet", "--manifest", "m.csv", "--split", "s.csv", "--out-dir", &s(dir.path()),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/model.snet"), "{err}");
    let (code, _, _) = siamnet(&["filters", "--model", "/nonexistent/model.snet", "--out-dir", &s(dir.path())]);
    assert_eq!(code, 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(siamnet(&["train", "--bogus"]).0, 1);
    assert_eq!(siamnet(&["gradcheck", "--module", "nothing"]).0, 1);
    assert_eq!(siamnet(&["--help"]).0, 0);
}

#[test]
fn gradcheck_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let (code, out, err) = siamnet(&["gradcheck", "--module", "pairwise", "--trials", "20", "--seed", "4", "--out-dir", &s(dir.path())]);
        assert_eq!(code, 0, "{err}");
        out
    };
    let a = run();
    assert!(a.contains("deviance_grad_general") && !a.contains("FAIL"));
    assert_eq!(a, run());
}

#[test]
fn single_subject_training_is_a_protocol_error() {
    let f = fixture(8);
    let split = f.root.join("one.csv");
    std::fs::write(&split, "subject_id,role\n0000,train\n0001,probe\n0001,gallery\n").unwrap();
    let mut args = vec![
        "train".to_string(),
        "--manifest".into(),
        s(&f.manifest),
        "--split".into(),
        s(&split),
        "--epochs".into(),
        "1".into(),
        "--out-dir".into(),
        s(&f.root.join("x")),
    ];
    args.extend(TOY.iter().map(|a| a.to_string()));
    let (code, _, err) = siamnet(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("protocol error"), "{err}");
}

#[test]
fn filters_render_an_eight_by_eight_grid() {
    let dir = tempfile::tempdir().unwrap();
    let params = siamnet::NetworkParams::init(siamnet::NetworkConfig::default(), siamnet::SharingMode::General, 1).unwrap();
    let model = dir.path().join("m.snet");
    params.save(&model).unwrap();
    let (code, out, err) = siamnet(&["filters", "--model", &s(&model), "--out-dir", &s(dir.path())]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("8x8 grid of 64 filters"), "{out}");
    let (w, h) = image_dims(&dir.path().join("filters.png"));
    assert_eq!((w, h), (63, 63));
}

fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    (
        u32::from_be_bytes(bytes[16..20].try_into().unwrap()),
        u32::from_be_bytes(bytes[20..24].try_into().unwrap()),
    )
}
