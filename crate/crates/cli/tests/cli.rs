use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stream4d::dataset::{load_dataset, load_sequence};
use stream4d::model::{load_checkpoint, save_checkpoint, AttnMode, Model, ModelConfig};

const SMALL: &str = r#"
[model]
image_height = 16
image_width = 16
patch_size = 4
dim = 16
layers = 2
heads = 2
max_frames = 8
mlp_ratio = 2
head_channels = 8
track_dim = 4
camera_hidden = 16

[train]
epochs = 1
frames_per_sample = 3

[data]
frames = 4
height = 16
width = 16
tracks = 6
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stream4d"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning stream4d")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A work directory with the small config file and its paths filled in.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        let paths = format!(
            "\n[paths]\ndataset = {:?}\nruns = {:?}\n",
            root.join("train").display().to_string(),
            root.join("runs").display().to_string()
        );
        fs::write(&config, format!("{SMALL}{paths}")).unwrap();
        Self { _dir: dir, root, config }
    }

    fn cmd(&self, sub: &str) -> Command {
        let mut c = bin();
        c.arg(sub).arg("--config").arg(&self.config);
        c
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn mean_row(csv: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(csv).unwrap();
    let header: Vec<String> = text.lines().next().unwrap().split(',').map(String::from).collect();
    let row = text.lines().find(|l| l.starts_with("mean,")).unwrap();
    header
        .into_iter()
        .zip(row.split(','))
        .skip(1)
        .map(|(h, v)| (h, v.parse().unwrap()))
        .collect()
}

fn col(row: &[(String, f64)], name: &str) -> f64 {
    row.iter().find(|(h, _)| h == name).unwrap().1
}

#[test]
fn default_config_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(bin().arg("config"));
    assert!(text.contains("[model]") && text.contains("[train]"));
    let path = dir.path().join("default.toml");
    fs::write(&path, &text).unwrap();
    // Loading the printed file succeeds; `gen` is the cheapest command that
    // reads a config.
    ok(bin().args(["gen", "--count", "1", "--set", "data.frames=2", "--config"]).arg(&path).arg("--out").arg(dir.path().join("d")));
    assert_eq!(load_dataset(&dir.path().join("d")).unwrap().len(), 1);
}

#[test]
fn full_pipeline_on_a_small_model() {
    let ws = Workspace::new();
    ok(ws.cmd("gen").args(["--count", "2", "--seed", "3"]));
    ok(ws.cmd("gen").args(["--count", "2", "--seed", "9", "--out"]).arg(ws.path("test")));
    assert_eq!(load_dataset(&ws.path("train")).unwrap().len(), 2);

    ok(ws.cmd("train").arg("--teacher"));
    ok(ws.cmd("train").args(["--student", "--distill"]));
    ok(ws.cmd("train").arg("--student"));
    for role in ["teacher", "student", "student_nokd"] {
        let dir = ws.path(&format!("runs/{role}"));
        assert!(dir.join("final.ckpt").exists(), "{role}");
        let log = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(log.lines().count(), 3, "{role}: header plus one row per step");
    }

    let ckpt = ws.path("runs/student/final.ckpt");
    let timings = ws.path("timings.csv");
    ok(bin()
        .arg("stream")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(ws.path("test"))
        .arg("--out")
        .arg(ws.path("pred"))
        .arg("--emit-ply")
        .arg("--timings-csv")
        .arg(&timings));
    let rows: Vec<String> = fs::read_to_string(&timings).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap() > 0.0));
    let plys = fs::read_dir(ws.path("pred")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ply")).count();
    assert_eq!(plys, 2 * 4);

    // Streamed predictions match an offline causal pass.
    let model: Model = load_checkpoint(&ckpt).unwrap();
    let gts = load_dataset(&ws.path("test")).unwrap();
    let names = stream4d::dataset::dataset_files(&ws.path("test")).unwrap();
    for (gt, file) in gts.iter().zip(&names) {
        let streamed = load_sequence(&ws.path("pred").join(file.file_name().unwrap())).unwrap();
        let offline = model.predict_sequence(&gt.images(), &gt.queries(), AttnMode::Causal).unwrap();
        for (s, o) in streamed.frames.iter().zip(&offline) {
            assert!(s.points.max_abs_diff(&o.point_map) < 1e-4);
            assert!(s.depth.max_abs_diff(&o.depth) < 1e-4);
            assert!(s.tracks.max_abs_diff(&o.tracks) < 1e-4);
        }
    }

    let report = ws.path("eval.csv");
    let stdout = ok(bin().arg("eval").arg("--predictions").arg(ws.path("pred")).arg("--data").arg(ws.path("test")).arg("--out").arg(&report));
    assert!(stdout.contains("auc30"));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 1);
    assert!(mean_row(&report).iter().all(|(_, v)| v.is_finite()));
}

#[test]
fn ground_truth_scores_perfectly() {
    let ws = Workspace::new();
    ok(ws.cmd("gen").args(["--count", "2"]));
    let report = ws.path("eval.csv");
    ok(bin().arg("eval").arg("--predictions").arg(ws.path("train")).arg("--data").arg(ws.path("train")).arg("--out").arg(&report));
    let m = mean_row(&report);
    for name in ["acc_mean", "acc_median", "comp_mean", "comp_median", "overall", "abs_rel"] {
        assert_eq!(col(&m, name), 0.0, "{name}");
    }
    assert_eq!(col(&m, "delta_125"), 1.0);
    assert_eq!(col(&m, "auc30"), 1.0);
    assert!(col(&m, "nc_mean") > 0.999);
}

#[test]
fn bench_reports_every_length_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&Model::<f32>::new(ModelConfig::default(), 0).unwrap(), &ckpt).unwrap();
    let csv = dir.path().join("bench.csv");
    let table = ok(bin().args(["bench", "--frames", "1,3", "--reps", "15", "--checkpoint"]).arg(&ckpt).arg("--out").arg(&csv));
    assert!(table.contains("ratio"));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let get = |f: &str, m: &str| -> f64 { rows.iter().find(|r| r[0] == f && r[1] == m).unwrap()[2].parse().unwrap() };
    // One frame costs the same either way.
    let ratio = get("1", "streaming") / get("1", "full_reprocess");
    assert!((0.5..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failures() {
    let ws = Workspace::new();
    let code = |cmd: &mut Command| run(cmd).status.code();
    assert_eq!(code(bin().arg("--help")), Some(0));
    assert_eq!(code(bin().arg("frobnicate")), Some(1));
    assert_eq!(code(bin().arg("train")), Some(1), "a role is required");
    assert_eq!(code(bin().args(["train", "--teacher", "--distill"])), Some(1));
    assert_eq!(code(ws.cmd("gen").args(["--set", "train.nonsense=1"])), Some(1));
    assert_eq!(code(bin().args(["gen", "--config", "/nonexistent/run.toml"])), Some(1));
    assert_eq!(code(bin().args(["stream", "--checkpoint", "/nonexistent.ckpt", "--data", ".", "--out", "."])), Some(1));
    assert_eq!(code(ws.cmd("train").arg("--teacher")), Some(1), "no dataset yet");
    assert_eq!(code(ws.cmd("train").arg("--student")), Some(1), "no teacher yet");

    ok(ws.cmd("gen").args(["--count", "1"]));
    let ckpt = ws.path("m.ckpt");
    save_checkpoint(&Model::<f32>::new(ModelConfig::default(), 0).unwrap(), &ckpt).unwrap();
    assert_eq!(
        code(bin().arg("stream").arg("--checkpoint").arg(&ckpt).arg("--data").arg(ws.path("train")).arg("--out").arg(ws.path("p"))),
        Some(1),
        "32x32 model on 16x16 data"
    );

    // The output directory cannot be created because a file is in the way.
    ok(ws.cmd("train").arg("--teacher"));
    let blocker = ws.path("blocker");
    fs::write(&blocker, "").unwrap();
    let out = run(bin()
        .arg("stream")
        .arg("--checkpoint")
        .arg(ws.path("runs/teacher/final.ckpt"))
        .arg("--data")
        .arg(ws.path("train"))
        .arg("--out")
        .arg(blocker.join("sub")));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
