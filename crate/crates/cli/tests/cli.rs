mod common;

use std::path::Path;
use std::time::Instant;

use common::{estimate_args, synthetic_stacked_csv};
use xtrial_cli::estimate::{EstimateDocument, CONTRASTS_CSV, ESTIMATES_CSV, ESTIMATES_JSON, REPORT_MD};
use xtrial_cli::report::cmd_report;
use xtrial_cli::simulate::{MANIFEST_JSON, METRICS_CSV, METRICS_JSON};
use xtrial_cli::{run, RunConfig, EXIT_INPUT, EXIT_OK, EXIT_VALIDATION};

fn write_fixture(dir: &Path) -> String {
    let path = dir.join("stacked.csv");
    std::fs::write(&path, synthetic_stacked_csv(7)).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn estimate_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_fixture(tmp.path());
    let out = tmp.path().join("res");
    assert_eq!(run(estimate_args(&input, &s(&out))), EXIT_OK);
    for f in [ESTIMATES_JSON, ESTIMATES_CSV, CONTRASTS_CSV, REPORT_MD] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let doc: EstimateDocument =
        serde_json::from_str(&std::fs::read_to_string(out.join(ESTIMATES_JSON)).unwrap()).unwrap();
    assert_eq!(doc.blocks.len(), 6);
    for b in &doc.blocks {
        // unadjusted and TMLE for two vaccines; two contrasts
        assert_eq!(b.estimates.len(), 4);
        assert_eq!(b.contrasts.len(), 2);
        for r in &b.estimates {
            assert!(r.display_ci.0 <= r.display && r.display <= r.display_ci.1);
        }
    }
    let csv = std::fs::read_to_string(out.join(ESTIMATES_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 4);
    assert!(csv.lines().skip(1).all(|l| l.contains(&doc.config_hash)));
    let report = std::fs::read_to_string(out.join(REPORT_MD)).unwrap();
    assert!(report.contains(&doc.config_hash));
}

#[test]
fn single_response_with_scale_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_fixture(tmp.path());
    let out = tmp.path().join("res");
    let args = [
        "xtrial", "estimate", "--input", &input, "--vaccine", "1", "--vaccine", "2",
        "--ref-trials", "702", "--ws", "age,sex", "--scale", "binary", "--out", &s(&out),
    ];
    // the default response column `s` is absent
    assert_eq!(run(args), EXIT_INPUT);
}

#[test]
fn unknown_vaccine_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_fixture(tmp.path());
    let mut args = estimate_args(&input, &s(&tmp.path().join("res")));
    let i = args.iter().position(|a| a == "1,2").unwrap();
    args[i] = "1,9".into();
    assert_eq!(run(&args), EXIT_VALIDATION);
    assert!(!tmp.path().join("res").exists());
}

#[test]
fn missing_input_exits_with_input_code() {
    let tmp = tempfile::tempdir().unwrap();
    let args = estimate_args(&s(&tmp.path().join("absent.csv")), &s(&tmp.path().join("res")));
    assert_eq!(run(args), EXIT_INPUT);
}

#[test]
fn uncollected_covariate_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = synthetic_stacked_csv(3);
    // blank the education column in trial 97
    let mut lines: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cells: Vec<&str> = line.split(',').collect();
        if i > 0 && cells[0] == "97" {
            cells[9] = "";
        }
        lines.push(cells.join(","));
    }
    let input = tmp.path().join("stacked.csv");
    std::fs::write(&input, lines.join("\n") + "\n").unwrap();
    let args = estimate_args(&s(&input), &s(&tmp.path().join("res")));
    assert_eq!(run(args), EXIT_VALIDATION);
}

#[test]
fn simulate_smoke_run_is_fast_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let start = Instant::now();
    for out in [&a, &b] {
        let args = ["xtrial", "simulate", "--preset", "scenario1", "--reps", "10", "--seed", "1", "--out", &s(out)];
        assert_eq!(run(args), EXIT_OK);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let ca = std::fs::read(a.join(METRICS_CSV)).unwrap();
    assert_eq!(ca, std::fs::read(b.join(METRICS_CSV)).unwrap());
    assert_eq!(
        std::fs::read(a.join(METRICS_JSON)).unwrap(),
        std::fs::read(b.join(METRICS_JSON)).unwrap()
    );
    let text = String::from_utf8(ca).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,t_ref,vaccine,truth,bias,variance,mse,ci_coverage,ci_width,replicates,failed,config_hash,seed"
    );
    assert_eq!(lines.count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join(MANIFEST_JSON)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["versions"]["xtrial"].is_string());
}

#[test]
fn simulate_seed_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for seed in ["1", "2"] {
        let out = tmp.path().join(seed);
        let args = ["xtrial", "simulate", "--preset", "scenario1", "--reps", "3", "--seed", seed, "--out", &s(&out)];
        assert_eq!(run(args), EXIT_OK);
        csvs.push(std::fs::read(out.join(METRICS_CSV)).unwrap());
    }
    assert_ne!(csvs[0], csvs[1]);
}

#[test]
fn simulate_requires_seed_and_known_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("o"));
    assert_eq!(run(["xtrial", "simulate", "--preset", "scenario1", "--out", &out]), EXIT_INPUT);
    assert_eq!(
        run(["xtrial", "simulate", "--preset", "scenario9", "--seed", "1", "--out", &out]),
        EXIT_INPUT
    );
}

#[test]
fn report_reproduces_stored_table_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_fixture(tmp.path());
    let out = tmp.path().join("res");
    assert_eq!(run(estimate_args(&input, &s(&out))), EXIT_OK);
    let listing = |d: &Path| {
        let mut v: Vec<(String, std::time::SystemTime, u64)> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                let m = e.metadata().unwrap();
                (e.file_name().to_string_lossy().into_owned(), m.modified().unwrap(), m.len())
            })
            .collect();
        v.sort();
        v
    };
    let before = listing(&out);
    let cfg = RunConfig::report(&out);
    let first = cmd_report(&cfg).unwrap();
    let second = cmd_report(&cfg).unwrap();
    assert_eq!(first, second);
    assert_eq!(first, std::fs::read_to_string(out.join(REPORT_MD)).unwrap());
    assert_eq!(listing(&out), before);
}

#[test]
fn report_renders_metrics_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let args = ["xtrial", "simulate", "--preset", "scenario1", "--reps", "2", "--seed", "5", "--out", &s(&out)];
    assert_eq!(run(args), EXIT_OK);
    let text = cmd_report(&RunConfig::report(&out)).unwrap();
    assert!(text.contains("| Case | T_ref | Vaccine | Truth | Bias | Variance | MSE | CI coverage | CI width | Failed |"));
}

#[test]
fn report_rejects_empty_or_corrupt_directories() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(["xtrial", "report", "--input", &s(tmp.path())]), EXIT_INPUT);
    std::fs::write(tmp.path().join(METRICS_JSON), "{ not json").unwrap();
    assert_eq!(run(["xtrial", "report", "--input", &s(tmp.path())]), EXIT_INPUT);
    assert_eq!(run(["xtrial", "report", "--input", &s(&tmp.path().join("nope"))]), EXIT_INPUT);
}
