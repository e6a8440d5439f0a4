use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_speech-engine");

const TINY: &str = r#"
seed = 9
output_dir = "never-used"
[task]
name = "toy"
metrics = ["eer", "weighted_accuracy"]
[synth]
num_classes = 2
num_speakers = 4
utterances_per_speaker_per_class = 2
duration_s = 0.4
[features]
kmeans_max_iters = 5
[model]
d_model = 8
n_blocks = 1
n_heads = 2
ffn_dim = 16
codebook_size = 4
[pretrain]
steps = 2
batch_size = 2
[train]
max_steps = 10
eval_every_steps = 5
batch_size = 4
[protocol]
folds = 2
dev_fraction = 0.25
durations = [0.2]
[protocol.averaging]
kind = "top_k"
k = 2
"#;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[protocol]\ndev_fraction = 1.5\n");
    let out = run(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dev_fraction"));

    let cfg = write_config(dir.path(), "seed = 1\n[train]\nlearning_rate = 0.1\n");
    let out = run(&["kmeans", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 3"), "{err}");
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "--config", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(&["run", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));
}

#[test]
fn staged_commands_reproduce_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let full = run(&["run", "--config", &cfg, "--out", "full"], dir.path());
    assert!(full.status.success(), "{}", String::from_utf8_lossy(&full.stderr));

    for stage in ["synth", "kmeans", "pretrain", "train", "average", "eval", "report"] {
        let out = run(&[stage, "--config", &cfg, "--out", "staged"], dir.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("full/curves.csv")).unwrap();
    let b = std::fs::read(dir.path().join("staged/curves.csv")).unwrap();
    assert_eq!(a, b);
    // 2 folds x 1 size x 1 duration x 2 metrics
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4);

    // Nothing outside the requested output directories.
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, vec!["cfg.toml", "full", "staged"]);

    // A different seed is a different config; its checkpoints are refused.
    let out = run(&["average", "--config", &cfg, "--out", "staged", "--seed", "10", "--fold", "0"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selectors_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = run(&["train", "--config", &cfg, "--out", "o", "--n-per-class", "many"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn goldens_command_checks_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures");
    let dst = dir.path().join("fx");
    std::fs::create_dir_all(dst.join("wav")).unwrap();
    std::fs::copy(src.join("goldens.json"), dst.join("goldens.json")).unwrap();
    for e in std::fs::read_dir(src.join("wav")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), dst.join("wav").join(e.file_name())).unwrap();
    }
    let out = run(&["goldens", "--dir", dst.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dst.join("goldens.json")).unwrap();
    std::fs::write(dst.join("goldens.json"), text.replacen("0.3333333333333333", "0.33", 1)).unwrap();
    let out = run(&["goldens", "--dir", dst.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eer/third"));
}
