use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fvnet");

fn fvnet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(svm_epochs: usize) -> String {
    format!(
        r#"
[data]
train_manifest = "data/train.csv"
test_manifest = "data/test.csv"

[synthetic]
out_dir = "data"
train_seed = 1
test_seed = 2
classes = 4
train_per_class = 3
test_per_class = 5
frames = 15
height = 32
width = 32
speed = 1.0
blob_sigma = 2.5
blob_amplitude = 1.0
noise_std = 0.3

[extractor]
kind = "conv"
channels = 2
kernel = 5
pool_window = 2
pool_stride = 2
init_std = 1.0

[pool]
n_sigma = 2
n_tau = 3
s_h = 2
s_w = 2
t = 15
delta_s = 2

[init]
subvolumes_per_video = 20
pca_samples_per_video = 10
components = 2
projection_dim = 4
c = 100.0
power_norm = true
em_iters = 50
em_tol = 1e-6
svm_epochs = {svm_epochs}
svm_learning_rate = 0.5
delta_t = 15
seed = 7

[finetune]
optimizer = "sgd_momentum"
learning_rate = 0.001
momentum = 0.9
lr_decay = 0.95
dropout_p = 0.1
epochs = 1
delta_t = 15
seed = 11

[eval]
delta_t = 15
crops = [[0, 0, 3, 3]]

[run]
dir = "run"
"#
    )
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn params_reports_reference_total() {
    let o = fvnet(&["params", "--nc", "100", "--k", "256", "--d", "6144", "--m", "101"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "total 5869157"), "{}", stdout(&o));
}

#[test]
fn params_needs_a_source() {
    let o = fvnet(&["params", "--nc", "100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]"));
}

#[test]
fn gradcheck_passes() {
    let o = fvnet(&["gradcheck", "--layer", "all"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), stdout(&o).lines().count());
}

#[test]
fn gradcheck_rejects_unknown_layer() {
    let o = fvnet(&["gradcheck", "--layer", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = small_config(0).replace("[pool]\n", "[pool]\nwindow_depth = 3\n");
    let cfg = write_config(dir.path(), &bad_key);
    let o = fvnet(&["init", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("window_depth"));

    let missing = dir.path().join("absent.toml");
    let o = fvnet(&["init", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[missing_file]"));

    // Valid config whose data has not been generated.
    let cfg = write_config(dir.path(), &small_config(0));
    let o = fvnet(&["init", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn untrained_classifier_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(0));
    for cmd in ["gen-data", "init"] {
        let o = fvnet(&[cmd, "--config", &cfg]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let bundle = dir.path().join("run/init");
    let o = fvnet(&["eval", "--config", &cfg, "--bundle", bundle.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // All scores tie at zero, so every video goes to class 0.
    assert!(stdout(&o).starts_with("accuracy 0.250000 (5/20)"), "{}", stdout(&o));
}

#[test]
fn full_workflow_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(50));
    for cmd in ["gen-data", "init", "finetune"] {
        let o = fvnet(&[cmd, "--config", &cfg]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,split,loss,accuracy"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    assert!(run.join("checkpoints/epoch_001/bundle.txt").exists());
    assert!(run.join("config.toml").exists());

    let final_bundle = run.join("final");
    let o = fvnet(&["eval", "--config", &cfg, "--bundle", final_bundle.to_str().unwrap(), "--split", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = fs::read_to_string(run.join("predictions_train.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("video,predicted,label,score_0,score_1,score_2,score_3"));
    assert_eq!(preds.lines().count(), 13);

    let o = fvnet(&["params", "--bundle", final_bundle.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("total "));

    // Tampered header: stored tensors no longer match the declared sizes.
    let header = final_bundle.join("bundle.txt");
    let text = fs::read_to_string(&header).unwrap().replace("gmm.components=2", "gmm.components=3");
    fs::write(&header, text).unwrap();
    let o = fvnet(&["eval", "--config", &cfg, "--bundle", final_bundle.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}
