use std::process::{Command, Output};

use augshuffle::analytics::{read_sweep_csv, CountReport};
use augshuffle::cli::ModelSummary;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augshuffle"))
        .args(args)
        .env_remove("AUGSHUFFLE_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn summarize_lists_stage_shapes() {
    let o = run(&["summarize", "--width", "1.0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let stage3: Vec<&str> = text.lines().filter(|l| l.starts_with("Stage3")).collect();
    assert_eq!(stage3.len(), 2);
    for l in stage3 {
        assert!(l.contains("8x8") && l.contains("240"), "{l}");
    }
}

#[test]
fn summarize_json_parses() {
    let o = run(&["summarize", "--width", "0.5", "--format", "json"]);
    assert!(o.status.success());
    let s: ModelSummary = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s.rows.last().unwrap().channels, 10);
    let again = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<ModelSummary>(&again).unwrap(), s);
}

#[test]
fn invalid_ratio_exits_nonzero() {
    for args in [
        &["summarize", "--ratio", "0.7"][..],
        &["summarize", "--ratio", "0.33"],
        &["count", "--family", "v2", "--ratio", "0.375"],
    ] {
        let o = run(args);
        assert!(!o.status.success(), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn count_json_totals_match_layers() {
    let o = run(&[
        "count",
        "--family",
        "v2",
        "--width",
        "0.5",
        "--classes",
        "100",
        "--format",
        "json",
    ]);
    assert!(o.status.success());
    let r: CountReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.layers.iter().map(|l| l.madds).sum::<u64>(), r.total_madds);
    assert_eq!(
        r.layers.iter().map(|l| l.params()).sum::<u64>(),
        r.total_params
    );
    assert!(
        (r.madds_millions() / 11.00 - 1.0).abs() <= 0.01,
        "{}",
        r.madds_millions()
    );
    assert!(
        (r.params_millions() / 0.44 - 1.0).abs() <= 0.01,
        "{}",
        r.params_millions()
    );
}

#[test]
fn count_both_families_side_by_side() {
    let o = run(&["count", "--family", "both", "--width", "1.5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("aug-1.5x") && text.contains("v2-1.5x"),
        "{text}"
    );
}

#[test]
fn sweep_csv_has_one_row_per_ratio() {
    let o = run(&["sweep", "--width", "1.5", "--ratios", "0.125,0.25,0.375"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("family,width,num_classes,r,madds,params\n"));
    let rows = read_sweep_csv(text.as_bytes()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.r).collect::<Vec<_>>(),
        [0.125, 0.25, 0.375]
    );
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let ok = run(&["gradcheck", "--no-network"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    let text = stdout(&ok);
    let ops: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1))
        .collect();
    let mut unique = ops.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), ops.len(), "an op is listed twice");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    for op in [
        "conv2d",
        "batch_norm_train",
        "channel_crossover",
        "aug_block",
        "softmax_cross_entropy",
    ] {
        assert!(ops.contains(&op), "{op} missing");
    }

    let bad = run(&["gradcheck", "--no-network", "--corrupt-backward"]);
    assert!(!bad.status.success());
}

#[test]
fn train_without_data_is_a_usage_error() {
    let o = run(&["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--synthetic"));
}

#[test]
fn toy_training_is_reproducible_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let o = run(&[
            "train",
            "--synthetic",
            "--subset",
            "32",
            "--test-subset",
            "16",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("model.bin").exists());
        csvs.push(std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert!(csvs[0].starts_with("epoch,lr,train_loss,train_acc,test_acc\n"));
    assert_eq!(csvs[0].lines().count(), 3);
}
