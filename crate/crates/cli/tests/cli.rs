use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use w2rf::experiments::relative_errors;
use w2rf::snn::SnnParams;
use w2rf::trainer;
use w2rf_cli::{commands, io, Config, Invocation, RunManifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_w2rf"));
    c.env_remove("W2RF_OUT").env_remove("W2RF_THREADS");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_EXAMPLE1: &str = "preset = \"example1\"\nseed = 5\n[example1]\nn_train = 150\nn_test = 4\n[train]\nepoch_max = 3\nn_batch = 16\ndelta = 0.6\n";

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join("manifest.json")).unwrap()
}

#[test]
fn default_example1_writes_4000_training_rows() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "preset = \"example1\"\n");
    let o = run(&["gen-data", "--config", c.to_str().unwrap(), "--out", "d"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(t.path().join("d/train.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x_0,x_1,y_0,y_1,y_2,y_3,y_4,y_5,y_6,y_7,y_8,y_9");
    assert_eq!(lines.count(), 4000);
    let test = std::fs::read_to_string(t.path().join("d/test.csv")).unwrap();
    assert_eq!(test.lines().count(), 1 + 100 * 20);
}

#[test]
fn same_seed_gives_identical_hashes() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    for out in ["a", "b"] {
        let o = run(&["gen-data", "--config", c.to_str().unwrap(), "--out", out], t.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(manifest(&t.path().join("a")).artifacts, manifest(&t.path().join("b")).artifacts);
    let o = run(&["gen-data", "--config", c.to_str().unwrap(), "--out", "c", "--seed", "6"], t.path());
    assert!(o.status.success());
    assert_ne!(manifest(&t.path().join("a")).artifacts, manifest(&t.path().join("c")).artifacts);
}

#[test]
fn more_noise_variables_than_outputs_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "preset = \"example1\"\n[example1]\nd = 2\nd0 = 3\n");
    let o = run(&["gen-data", "--config", c.to_str().unwrap(), "--out", "d"], t.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d0"), "{}", stderr(&o));
}

#[test]
fn missing_key_exits_2_naming_key_and_schema_line() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "seed = 1\n[rate]\nd = 2\nn_grid = [8, 16, 32]\nreplicates = 5\n");
    let o = run(&["rate-lab", "--config", c.to_str().unwrap(), "--out", "r"], t.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("rate.c0") && e.contains("rate.c0 = <float>"), "{e}");
}

#[test]
fn unknown_key_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "preset = \"theory\"\n[rate]\nslope = 1\n");
    let o = run(&["rate-lab", "--config", c.to_str().unwrap()], t.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rate.slope"));
}

#[test]
fn unwritable_output_is_reported() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    write(t.path(), "blocker", "not a directory");
    let o = run(&["gen-data", "--config", c.to_str().unwrap(), "--out", "blocker/sub"], t.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("blocker"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", &format!("{SMALL_EXAMPLE1}epoch_max = 0\n").replace("epoch_max = 3\n", ""));
    let cs = c.to_str().unwrap();
    assert!(run(&["gen-data", "--config", cs, "--out", "d"], t.path()).status.success());
    let o = run(&["train", "--config", cs, "--data", "d", "--out", "r"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(t.path().join("r/checkpoint.txt")).unwrap();
    let saved = SnnParams::from_checkpoint_str(&text).unwrap();
    let config = Config::parse(&std::fs::read_to_string(&c).unwrap()).unwrap();
    let expected = trainer::init_params(&config.train(2, 10).unwrap()).unwrap();
    assert_eq!(saved, expected);
}

#[test]
fn eval_writes_metrics_and_well_formed_svgs() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    let cs = c.to_str().unwrap();
    assert!(run(&["gen-data", "--config", cs, "--out", "d"], t.path()).status.success());
    assert!(run(&["train", "--config", cs, "--data", "d", "--out", "r"], t.path()).status.success());
    let o = run(&["eval", "--checkpoint", "r/checkpoint.txt", "--data", "d", "--out", "e"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&t.path().join("e"));
    assert!(m.config.contains("\"eval.k\" = 20"), "default K is the 20-draw protocol");
    let metrics = std::fs::read_to_string(t.path().join("e/metrics.csv")).unwrap();
    assert!(metrics.starts_with("mean_err,sd_err,excluded_mean,excluded_sd\n"));
    for svg in ["e/errors.svg", "e/scatter.svg", "r/loss.svg"] {
        let text = std::fs::read_to_string(t.path().join(svg)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{svg}: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn eval_dimension_mismatch_names_both_dims() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    let cs = c.to_str().unwrap();
    assert!(run(&["gen-data", "--config", cs, "--out", "d"], t.path()).status.success());
    assert!(run(&["train", "--config", cs, "--data", "d", "--out", "r"], t.path()).status.success());
    let c3 = write(t.path(), "c3.toml", "preset = \"example1\"\n[example1]\nd = 3\nn_train = 50\nn_test = 2\n");
    let o = run(&["gen-data", "--config", c3.to_str().unwrap(), "--out", "d3"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", "r/checkpoint.txt", "--data", "d3", "--out", "e"], t.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("dim 10") && e.contains("dim 3"), "{e}");
}

#[test]
fn truth_echoing_predictions_score_zero() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    assert!(run(&["gen-data", "--config", c.to_str().unwrap(), "--out", "d"], t.path()).status.success());
    let (xs, ys) = io::read_dataset(&t.path().join("d/test.csv")).unwrap();
    let (_, truth) = io::group_test_set(&xs, &ys).unwrap();
    let e = relative_errors(&truth, &truth.clone()).unwrap();
    assert_eq!((e.mean_err, e.sd_err), (0.0, 0.0));
}

#[test]
fn zero_heterogeneity_marks_slopes_indistinguishable() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "preset = \"theory\"\n[rate]\nd = 3\nc0 = 0.0\nn_grid = [16, 32, 64]\nreplicates = 5\n");
    let o = run(&["rate-lab", "--config", c.to_str().unwrap(), "--out", "r"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(s["indistinguishable"], true);
    let text = std::fs::read_to_string(t.path().join("r/rate_hom.csv")).unwrap();
    assert!(text.starts_with("N,mean_cost,stderr\n"));
}

#[test]
fn default_rate_lab_reports_both_slopes_and_difference() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", "preset = \"theory\"\n");
    let o = run(&["rate-lab", "--config", c.to_str().unwrap(), "--out", "r"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("r/summary.json")).unwrap()).unwrap();
    let (hom, het, diff) = (
        s["slope_hom"].as_f64().unwrap(),
        s["slope_het"].as_f64().unwrap(),
        s["slope_difference"].as_f64().unwrap(),
    );
    assert_eq!(s["d"], 8);
    assert!((diff - (het - hom)).abs() < 1e-15);
    roxmltree::Document::parse(&std::fs::read_to_string(t.path().join("r/rate.svg")).unwrap()).unwrap();
}

#[test]
fn inconclusive_robustness_exits_4_with_outputs() {
    let t = tempfile::tempdir().unwrap();
    let c = write(
        t.path(),
        "c.toml",
        "preset = \"theory\"\n[robust]\nk = 32\nrepeats = 2\neps_grid = [1e-7, 2e-7, 4e-7]\n",
    );
    let o = run(&["robustness", "--config", c.to_str().unwrap(), "--out", "r"], t.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("raise K or use larger eps"));
    let m = manifest(&t.path().join("r"));
    assert_eq!(m.status, "inconclusive");
    assert!(m.artifact("robustness.csv").is_some());
}

#[test]
fn output_dir_env_override() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    let o = bin()
        .args(["gen-data", "--config", c.to_str().unwrap()])
        .env("W2RF_OUT", "from_env")
        .current_dir(t.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t.path().join("from_env/manifest.json").exists());
}

fn small_ode() -> Config {
    Config::parse(
        "preset = \"example2\"\nseed = 2\n[ode]\nn_traj = 12\nn_t = 4\nsubsteps = 1\nk_f = 8\nstates_per_slice = 3\n[train]\nepoch_max = 3\nn_batch = 6\ndelta = inf\nchunk_size = 4\n",
    )
    .unwrap()
}

#[test]
fn one_and_four_threads_give_identical_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let ex1 = Config::parse(SMALL_EXAMPLE1).unwrap();
    commands::execute(&Invocation::GenData, &ex1, &t.path().join("d"), 1).unwrap();
    let data = t.path().join("d");
    let cases = [
        (Invocation::Train { data: data.clone() }, ex1.clone()),
        (Invocation::OdeRecon, small_ode()),
    ];
    for (inv, config) in cases {
        let a = commands::execute(&inv, &config, &t.path().join(format!("{}-1", inv.name())), 1).unwrap();
        let b = commands::execute(&inv, &config, &t.path().join(format!("{}-4", inv.name())), 4).unwrap();
        assert_eq!(a.artifacts, b.artifacts, "{}", inv.name());
    }
}

#[test]
fn replay_detects_a_tampered_artifact() {
    let t = tempfile::tempdir().unwrap();
    let ex1 = Config::parse(SMALL_EXAMPLE1).unwrap();
    commands::execute(&Invocation::GenData, &ex1, &t.path().join("d"), 1).unwrap();
    let mut m = manifest(&t.path().join("d"));
    m.artifacts[0].sha256 = "0".repeat(64);
    std::fs::write(t.path().join("d/manifest.json"), m.to_bytes()).unwrap();
    let o = run(&["replay", "d/manifest.json", "--out", "again"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MISMATCH"));
}

#[test]
fn replay_refuses_changed_inputs() {
    let t = tempfile::tempdir().unwrap();
    let c = write(t.path(), "c.toml", SMALL_EXAMPLE1);
    let cs = c.to_str().unwrap();
    assert!(run(&["gen-data", "--config", cs, "--out", "d"], t.path()).status.success());
    assert!(run(&["train", "--config", cs, "--data", "d", "--out", "r"], t.path()).status.success());
    let p = t.path().join("d/train.csv");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push_str("0.0,0.0,0,0,0,0,0,0,0,0,0,0\n");
    std::fs::write(&p, text).unwrap();
    let o = run(&["replay", "r/manifest.json"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("changed"), "{}", stderr(&o));
}
