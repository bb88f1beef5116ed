//! End-to-end runs of the `sed-pcl` binary on a tiny corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sed-pcl");

fn sed_pcl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SED_PCL_OUTPUT_ROOT").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small corpus, tiny model over ten classes, a couple of epochs.
fn write_config(dir: &Path, trainer: &str) -> PathBuf {
    let text = format!(
        r#"seed = 1
output_dir = "runs"

[corpus]
output_dir = "corpus"
clip_duration = 4.0
counts = {{ strong = 3, weak = 3, unlabeled = 4, validation = 2, test = 2 }}

[features]
preset = "advanced"
hop_size = 512
n_mels = 16

[model]
preset = "tiny"
n_classes = 10
n_branches = 5

[trainer]
epochs = 2
batch_quota = [2, 2, 2]
{trainer}
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_data(config: &Path) -> Output {
    let out = sed_pcl(&["gen-data", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    out
}

#[test]
fn gen_data_reports_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let first = gen_data(&config);
    assert!(stdout(&first).contains("counts (3, 3, 4, 2, 2)"), "{}", stdout(&first));
    assert!(!stdout(&first).contains("unchanged"));
    assert!(dir.path().join("corpus/metadata/test.tsv").is_file());
    let second = gen_data(&config);
    assert!(stdout(&second).contains("unchanged"), "{}", stdout(&second));
}

#[test]
fn invalid_configs_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[trainer]\nmood = \"pcl\"\n").unwrap();
    for args in [
        vec!["gen-data", bad.to_str().unwrap()],
        vec!["train", bad.to_str().unwrap()],
        vec!["gen-data", "/nonexistent/run.toml"],
    ] {
        let out = sed_pcl(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"));
    }
    // a corpus that was never generated
    let config = write_config(dir.path(), "");
    let out = sed_pcl(&["train", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unreadable_checkpoint_exits_with_status_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("broken.ckpt.json");
    std::fs::write(&ckpt, "{ not json").unwrap();
    let out = sed_pcl(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", "test.tsv"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn malformed_or_duplicate_reports_exit_with_status_5() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.report.tsv");
    std::fs::write(&bad, "run=Baseline\tsplit=test\n").unwrap();
    let out = sed_pcl(&["compare", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));

    let good = dir.path().join("good.report.tsv");
    std::fs::write(&good, "run=Baseline\tsplit=test\tmacro_f1=0.311000\n").unwrap();
    let out = sed_pcl(&["compare", good.to_str().unwrap(), good.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));

    let missing = dir.path().join("missing.report.tsv");
    assert_eq!(sed_pcl(&["compare", missing.to_str().unwrap()]).status.code(), Some(5));
}

#[test]
fn compare_lists_every_run_in_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [("Baseline", 0.311), ("Online KD", 0.365), ("PCL w/o DA", 0.398), ("PCL w/o ensemble", 0.412), ("PCL w/ DA", 0.442)];
    let paths: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(i, (run, f1))| {
            let p = dir.path().join(format!("{i}.report.tsv"));
            std::fs::write(&p, format!("run={run}\tsplit=test\tmacro_f1={f1:.6}\n")).unwrap();
            p.to_string_lossy().into_owned()
        })
        .collect();
    let table_path = dir.path().join("table.txt");
    let mut args = vec!["compare", "--out", table_path.to_str().unwrap()];
    args.extend(paths.iter().map(String::as_str));
    let out = sed_pcl(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 5, "{table}");
    for (row, (run, f1)) in rows.iter().zip(runs) {
        assert!(row.starts_with(run), "{row}");
        assert!(row.contains(&format!("{:.1}", 100.0 * f1)), "{row}");
    }
    assert_eq!(std::fs::read_to_string(table_path).unwrap(), table);
}

#[test]
fn train_then_evaluate_with_flags_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    gen_data(&config);
    let cfg = config.to_str().unwrap();
    let out = sed_pcl(&["train", cfg, "--no-branch-augment", "--seed", "4", "--epochs", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("best validation macro F1"));
    let run_dir = dir.path().join("runs/pcl_wo_da-seed4");
    for file in ["best.ckpt.json", "last.ckpt.json", "train_log.jsonl", "resolved_config.toml"] {
        assert!(run_dir.join(file).is_file(), "{file} missing");
    }
    let resolved = std::fs::read_to_string(run_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("branch_augment = false") && resolved.contains("epochs = 1"), "{resolved}");
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let ckpt = run_dir.join("best.ckpt.json");
    let test = dir.path().join("corpus/metadata/test.tsv");
    let validation = dir.path().join("corpus/metadata/validation.tsv");
    let eval_dir = dir.path().join("eval");
    let out = sed_pcl(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        validation.to_str().unwrap(),
        "--manifest",
        test.to_str().unwrap(),
        "--config",
        cfg,
        "--score-model",
        "student",
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for split in ["validation", "test"] {
        let report = std::fs::read_to_string(eval_dir.join(format!("{split}.report.tsv"))).unwrap();
        assert!(report.starts_with(&format!("run=PCL w/o DA\tsplit={split}\tmacro_f1=")), "{report}");
    }

    let gt_dir = dir.path().join("gt");
    let out = sed_pcl(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        test.to_str().unwrap(),
        "--ground-truth",
        "--out-dir",
        gt_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(gt_dir.join("test.report.tsv")).unwrap();
    assert!(report.lines().next().unwrap().ends_with("macro_f1=1.000000"), "{report}");

    // evaluation needs timed labels
    let weak = dir.path().join("corpus/metadata/weak.tsv");
    let out = sed_pcl(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", weak.to_str().unwrap(), "--out-dir", gt_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_with_status_3_and_leaves_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "mode = \"baseline\"\nlr_max = 1e30\nramp_epochs = 0");
    gen_data(&config);
    let out = sed_pcl(&["train", config.to_str().unwrap(), "--epochs", "20"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let dump = std::fs::read_to_string(dir.path().join("runs/baseline-seed1/non_finite_loss.json")).unwrap();
    assert!(dump.contains("non-finite loss"), "{dump}");
}
