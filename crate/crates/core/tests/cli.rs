//! The command-line pipeline end to end on a tiny configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ccreid_core::ablate::AblationReport;
use ccreid_core::checkpoint::Checkpoint;
use ccreid_core::cli::{run, USAGE_EXIT_CODE};
use ccreid_core::eval::EvalReport;

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"data_dir = "{}"

[data]
num_identities = 6
outfits_per_identity = 2
samples_per_outfit = 3
image_dims = [32, 16]
face_dims = [8, 8]

[train]
steps = 4
teacher_steps = 4
batch_p = 2
batch_k = 2
probe_size = 4

[train.model]
channels = [4, 4, 8]
face_channels = [4, 4, 4]
embed_dim = 4

[ablate]
seeds = 2
"#,
        dir.join("data").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("ccreid").chain(args.iter().copied()))
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(cli(&["generate-data", "--config", s(&cfg), "--out", s(&a)]), 0);
    assert_eq!(cli(&["generate-data", "--config", s(&cfg), "--out", s(&b)]), 0);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 36);
    assert_eq!(fa, fb);
    // rerunning into the same directory leaves the same bytes
    assert_eq!(cli(&["generate-data", "--config", s(&cfg), "--out", s(&a)]), 0);
    assert_eq!(files(&a), fb);
    let c = dir.path().join("c");
    assert_eq!(cli(&["generate-data", "--config", s(&cfg), "--out", s(&c), "--seed", "5"]), 0);
    assert_ne!(files(&c), fb);
}

#[test]
fn pipeline_runs_and_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = |name: &str| dir.path().join(name);
    assert_eq!(cli(&["generate-data", "--config", s(&cfg)]), 0);
    assert_eq!(cli(&["train-teacher", "--config", s(&cfg), "--out", s(&p("teacher"))]), 0);
    let teacher = format!("train.teacher_checkpoint=\"{}\"", p("teacher").join("teacher.ckpt").display());
    for run_dir in ["r1", "r2"] {
        assert_eq!(cli(&["train", "--config", s(&cfg), "--set", &teacher, "--out", s(&p(run_dir))]), 0);
    }
    for f in ["model.ckpt", "metrics.csv"] {
        assert_eq!(std::fs::read(p("r1").join(f)).unwrap(), std::fs::read(p("r2").join(f)).unwrap(), "{f}");
    }
    assert_eq!(cli(&["train", "--config", s(&cfg), "--set", &teacher, "--seed", "3", "--out", s(&p("r3"))]), 0);
    assert_ne!(std::fs::read(p("r1").join("model.ckpt")).unwrap(), std::fs::read(p("r3").join("model.ckpt")).unwrap());

    assert_eq!(cli(&["evaluate", "--config", s(&cfg), "--out", s(&p("r1"))]), 0);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(p("r1").join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.cmc.len(), report.num_gallery);
    assert!((0.0..=1.0).contains(&report.rank1));
    assert!(p("r1").join("attention.json").exists());

    assert_eq!(cli(&["plot", "--config", s(&cfg), "--out", s(&p("r1"))]), 0);
    let csv = std::fs::read_to_string(p("r1").join("cmc.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, report.num_gallery);
    let png = std::fs::read(p("r1").join("cmc.png")).unwrap();
    assert_eq!(cli(&["plot", "--config", s(&cfg), "--out", s(&p("r1"))]), 0);
    assert_eq!(std::fs::read(p("r1").join("cmc.png")).unwrap(), png);
    let heat: Vec<_> = std::fs::read_dir(p("r1"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("attention_"))
        .collect();
    assert_eq!(heat.len(), 4);

    // grid over temperature and alpha
    let grid = p("grid");
    assert_eq!(
        cli(&["train", "--config", s(&cfg), "--set", &teacher, "--out", s(&grid), "--grid-tau", "1,5", "--grid-alpha", "0.5"]),
        0
    );
    let points: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(grid.join("grid.json")).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 2);
}

#[test]
fn ablation_rows_match_independent_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = |name: &str| dir.path().join(name);
    assert_eq!(cli(&["generate-data", "--config", s(&cfg)]), 0);
    let presets = "ablate.presets=[\"1\", \"3\", \"5\", \"deskpro\"]";
    assert_eq!(cli(&["ablate", "--config", s(&cfg), "--set", presets, "--seeds", "1", "--out", s(&p("abl"))]), 0);
    let report: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(p("abl").join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.rank1_std == 0.0 && r.failed.is_none()));
    assert!(std::fs::read_to_string(p("abl").join("ablation.txt")).unwrap().contains("deskpro"));

    // the same seed through train + evaluate gives the deskpro row
    let teacher = format!("train.teacher_checkpoint=\"{}\"", p("abl").join("teacher/seed0/teacher.ckpt").display());
    assert_eq!(cli(&["train", "--config", s(&cfg), "--set", &teacher, "--seed", "0", "--out", s(&p("dp"))]), 0);
    let standalone = Checkpoint::load(&p("dp").join("model.ckpt")).unwrap();
    let swept = Checkpoint::load(&p("abl").join("deskpro/seed0/model.ckpt")).unwrap();
    assert_eq!(standalone.params, swept.params);
    assert_eq!(cli(&["evaluate", "--config", s(&cfg), "--out", s(&p("dp"))]), 0);
    let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(p("dp").join("eval.json")).unwrap()).unwrap();
    let row = report.row("deskpro").unwrap();
    assert_eq!(eval.rank1, row.rank1_mean);
    assert_eq!(eval.map, row.map_mean);
}

#[test]
fn error_paths_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nope.toml");
    assert_eq!(cli(&["train", "--config", s(&missing)]), 3);
    assert_eq!(cli(&["train", "--config", s(&cfg), "--set", "train.stepz=1"]), 2);
    assert_eq!(cli(&["generate-data", "--config", s(&cfg), "--set", "data.outfits_per_identity=1"]), 2);
    assert_eq!(cli(&["evaluate", "--config", s(&cfg), "--out", s(&dir.path().join("empty"))]), 3);
    assert_eq!(cli(&["bogus"]), USAGE_EXIT_CODE);
    assert_eq!(cli(&["--help"]), 0);

    // a preset that cannot run marks its row and the command exits with the preset code
    assert_eq!(cli(&["generate-data", "--config", s(&cfg)]), 0);
    let out = dir.path().join("abl");
    let too_big = "train.batch_p=9";
    assert_eq!(cli(&["ablate", "--config", s(&cfg), "--set", "ablate.presets=[\"1\"]", "--set", too_big, "--seeds", "1", "--out", s(&out)]), 10);
    let report: AblationReport = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert!(report.rows[0].failed.is_some());

    // the installed binary reports the same codes
    let bin = env!("CARGO_BIN_EXE_ccreid");
    let status = Command::new(bin).args(["train", "--config", s(&missing)]).status().unwrap();
    assert_eq!(status.code(), Some(3));
    let status = Command::new(bin).arg("bogus").stderr(std::process::Stdio::null()).status().unwrap();
    assert_eq!(status.code(), Some(USAGE_EXIT_CODE));
}
