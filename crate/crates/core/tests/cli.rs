use std::process::Command;

use simplex_attn::cli::run_args;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simplex-attn"))
}

fn body(md: &str) -> &str {
    // Everything after the metadata list is deterministic.
    md.split_once("\n\n").map_or(md, |(_, rest)| rest).split_once("\n\n").map_or("", |(_, rest)| rest)
}

#[test]
fn equivalence_default_passes() {
    let out = bin().arg("equivalence").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("| 0 |") && text.contains("pass"));
}

#[test]
fn equivalence_double_and_det() {
    let (code, md) = run_args(["simplex-attn", "equivalence", "--n", "40", "--dim", "9", "--w1", "12", "--w2", "5", "--block-q", "8", "--block-kv", "4", "--precision", "double", "--logit-form", "det", "--heads", "4", "--reps", "2"]);
    assert_eq!(code, 0, "{md}");
    assert!(md.contains("tolerance 1e-11"));
}

#[test]
fn injected_fault_fails() {
    let out = bin().args(["equivalence", "--n", "32", "--w1", "8", "--w2", "4", "--reps", "1", "--inject-fault"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn check_grad_forms_and_precision_guard() {
    for form in ["trilinear", "det"] {
        let (code, md) = run_args(["simplex-attn", "check-grad", "--logit-form", form]);
        assert_eq!(code, 0, "{md}");
    }
    let (code, _) = run_args(["simplex-attn", "check-grad", "--n", "1", "--w1", "1", "--w2", "1"]);
    assert_eq!(code, 0);
    let (code, _) = run_args(["simplex-attn", "check-grad", "--precision", "single"]);
    assert_eq!(code, 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin().args(["equivalence", "--n", "abc"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("nonsense").output().unwrap().status.code(), Some(2));
    assert_eq!(run_args(["simplex-attn", "equivalence", "--w1", "0"]).0, 2);
    assert_eq!(run_args(["simplex-attn", "bench", "--sweep", "12-3"]).0, 2);
}

#[test]
fn match3_modes() {
    let (code, md) = run_args(["simplex-attn", "match3"]);
    assert_eq!(code, 0);
    assert!(md.contains("| 4 | 5 | exhaustive | 625 | 0 |"), "{md}");
    let (code, md) = run_args(["simplex-attn", "match3", "--n", "8", "--modulus", "12", "--mode", "random"]);
    assert_eq!(code, 0);
    assert!(md.contains("| 8 | 12 | random | 1000 | 0 |"), "{md}");
    let (code, md) = run_args(["simplex-attn", "match3", "--n", "1", "--modulus", "7"]);
    assert_eq!(code, 0);
    assert!(md.contains("| 7 | 0 |"), "{md}");
}

#[test]
fn fit_scaling_bundled_and_files() {
    let dir = std::env::temp_dir().join(format!("simplex-attn-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("fits.md");
    let (code, md) = run_args(["simplex-attn", "fit-scaling", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), md);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    // 8 fits + 4 deltas, two headers and a separating blank line.
    assert_eq!(csv.lines().count(), 15);
    assert!(md.contains("| GSM8k | 18.83 | 18.5 |"), "{md}");

    let single = dir.join("single.csv");
    std::fs::write(&single, "model,benchmark,active_params,nll\nA,X,1e9,0.5\nA,Y,1e9,0.5\nA,Y,2e9,0.45\nB,Y,1e9,0.52\nB,Y,2e9,0.46\n").unwrap();
    let (code, md) = run_args(["simplex-attn", "fit-scaling", "--csv", single.to_str().unwrap(), "--baseline", "A", "--compare", "B"]);
    assert_eq!(code, 0);
    assert!(md.contains("degenerate"), "{md}");
    assert!(md.contains("| Y |"), "{md}");

    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "model,benchmark,active_params,nll\nA,X,1e9,0.5\nA,X,oops,0.4\n").unwrap();
    let out = bin().args(["fit-scaling", "--csv", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn reports_are_deterministic() {
    for args in [
        vec!["simplex-attn", "fit-scaling"],
        vec!["simplex-attn", "match3", "--mode", "random", "--reps", "50", "--n", "6", "--modulus", "9"],
        vec!["simplex-attn", "equivalence", "--n", "48", "--w1", "16", "--w2", "8", "--reps", "1"],
    ] {
        let (_, a) = run_args(&args);
        let (_, b) = run_args(&args);
        assert!(!body(&a).is_empty());
        assert_eq!(body(&a), body(&b));
    }
}

#[test]
fn bench_small_sweep() {
    let dir = std::env::temp_dir().join(format!("simplex-attn-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("bench.csv");
    let (code, md) = run_args(["simplex-attn", "bench", "--n", "256", "--sweep", "32x8,64x8", "--reps", "2", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(md.contains("not a reproduction target"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    // Model FLOPs double with w1.
    let flops: Vec<u64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert_eq!(flops, vec![6 * 256 * 32 * 8, 6 * 256 * 64 * 8]);
    std::fs::remove_dir_all(&dir).unwrap();
}
