use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_distree");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("spawn distree")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "distree {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        !out.status.success(),
        "distree {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A temp dir holding random two-student weights and a 100-image test batch.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let mut bytes = Vec::with_capacity(100 * 3073);
        let mut state = 0x2545_f491_4f6c_dd1du64;
        for i in 0..100 {
            bytes.push((i % 10) as u8);
            for _ in 0..3072 {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                bytes.push((state >> 56) as u8);
            }
        }
        std::fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
        let fx = Fixture { dir };
        ok(&[
            "init-weights",
            "--students",
            "2",
            "--seed",
            "5",
            "--weights",
            fx.weights().to_str().unwrap(),
        ]);
        fx
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn weights(&self) -> PathBuf {
        self.path().join("w.deew")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    fn run_args<'a>(&'a self, sub: &'a str, w: &'a str, d: &'a str) -> Vec<&'a str> {
        vec![sub, "--weights", w, "--data", d, "--per-class", "2"]
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn flops_table_headers_and_rows() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("f");
    let text = ok(&[
        "flops",
        "--arch",
        "wrn16-1",
        "--exits",
        "1,4,6,9,11,14,16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(text.contains("network 34.0"));
    let csv = read(&out.join("flops.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "exit,position,backbone_mflops,exit_mflops,cumulative_mflops,stage_params,exit_params,\
         ref_backbone_mflops,backbone_dev_pct,ref_exit_mflops,exit_dev_pct"
    );
    assert_eq!(csv.lines().count(), 1 + 7 + 1);
    assert!(csv.lines().last().unwrap().starts_with("total,"));
    let json: serde_json::Value = serde_json::from_str(&read(&out.join("flops.json"))).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 7);
}

#[test]
fn flops_single_exit_covers_whole_network() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("f");
    ok(&["flops", "--exits", "16", "--out", out.to_str().unwrap()]);
    let csv = read(&out.join("flops.csv"));
    assert_eq!(csv.lines().count(), 3);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[1], "16");
    let backbone: f64 = row[2].parse().unwrap();
    let exit: f64 = row[3].parse().unwrap();
    let cumulative: f64 = row[4].parse().unwrap();
    assert_eq!(backbone, cumulative);
    // The only exit is the final head, which belongs to the network total.
    let total: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    let network: f64 = total[4].parse().unwrap();
    assert!((backbone + exit - network).abs() < 1e-5);
    assert!((network - 34.07).abs() < 0.01, "{network}");
}

#[test]
fn bench_writes_reports_with_stable_bytes() {
    let fx = Fixture::new();
    let (w, d) = (fx.weights(), fx.path().to_path_buf());
    let (w, d) = (w.to_str().unwrap(), d.to_str().unwrap());
    let mut first_bytes = None;
    for name in ["a", "b"] {
        let out = fx.out(name);
        let mut args = fx.run_args("bench", w, d);
        args.extend([
            "--seed",
            "9",
            "--repeats",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        ok(&args);
        let csv = std::fs::read(out.join("bench.csv")).unwrap();
        let json = std::fs::read(out.join("bench.json")).unwrap();
        match &first_bytes {
            None => first_bytes = Some((csv, json)),
            Some((c, j)) => {
                assert_eq!(c, &csv, "bench.csv differs between runs");
                assert_eq!(j, &json, "bench.json differs between runs");
            }
        }
    }
    let csv = read(&fx.out("a").join("bench.csv"));
    let header = csv.lines().next().unwrap();
    let mut expected = String::from(
        "policy,accuracy_pct,mean_mflops,mean_latency_ms,p50_latency_ms,p95_latency_ms,mean_transfer_ms,images,degenerate_events",
    );
    for s in 0..2 {
        for j in 1..=7 {
            expected.push_str(&format!(",s{s}_exit{j}"));
        }
    }
    assert_eq!(header, expected);
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        ["last_exit", "feature_diff", "random", "neighbor_similarity"]
    );
    // 20 sampled images, 2 repeats: every student histogram sums to 40.
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[7], "40");
        for s in 0..2 {
            let sum: u64 = cells[9 + 7 * s..16 + 7 * s]
                .iter()
                .map(|c| c.parse::<u64>().unwrap())
                .sum();
            assert_eq!(sum, 40, "{line}");
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&read(&fx.out("a").join("bench.json"))).unwrap();
    assert_eq!(json["metadata"]["latency"], "simulated");
}

#[test]
fn bench_rejects_bad_input() {
    let fx = Fixture::new();
    let (w, d) = (fx.weights(), fx.path().to_path_buf());
    let (w, d) = (w.to_str().unwrap(), d.to_str().unwrap());

    let mut args = fx.run_args("bench", w, d);
    args.extend(["--policies", "last_exit,bogus"]);
    assert!(fails(&args).contains("bogus"));

    let mut args = fx.run_args("bench", w, d);
    args.extend(["--policies", ""]);
    assert!(fails(&args).contains("no policies"));

    // Weights were built for seven exits; a three-exit layout must not load them.
    let mut args = fx.run_args("bench", w, d);
    args.extend(["--exits", "1,9,16"]);
    fails(&args);

    let missing = fx.out("missing.deew");
    fails(&fx.run_args("bench", missing.to_str().unwrap(), d));
    let empty = fx.out("empty");
    std::fs::create_dir(&empty).unwrap();
    fails(&fx.run_args("bench", w, empty.to_str().unwrap()));

    let out = fx.out("never");
    let mut args = fx.run_args("bench", w, d);
    args.extend(["--policies", "bogus", "--out", out.to_str().unwrap()]);
    fails(&args);
    assert!(!out.join("bench.csv").exists());
}

#[test]
fn flops_rejects_bad_exits() {
    fails(&["flops", "--exits", "2,16"]);
    fails(&["flops", "--exits", "4,1,16"]);
    fails(&["flops", "--exits", "1,4,17"]);
    fails(&["flops", "--arch", "resnet50"]);
    let out = run(&["flops", "--unknown-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rows_follow_offset_grid() {
    let fx = Fixture::new();
    let (w, d) = (fx.weights(), fx.path().to_path_buf());
    let (w, d) = (w.to_str().unwrap(), d.to_str().unwrap());

    let out = fx.out("s");
    let mut args = fx.run_args("sweep", w, d);
    args.extend([
        "--offsets",
        "-inf,-0.1,0,0.1,inf",
        "--non-strict",
        "--out",
        out.to_str().unwrap(),
    ]);
    ok(&args);
    let csv = read(&out.join("sweep.csv"));
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(
        csv.lines().next().unwrap(),
        "offset,thresholds,accuracy_pct,mean_mflops,mean_latency_ms,mean_exit"
    );
    assert_eq!(rows.len(), 5);
    // Non-strict with every threshold at -inf exits at the first branch.
    assert_eq!(rows[0][5], "1.0000");
    assert_eq!(rows[4][5], "7.0000");

    let bench_out = fx.out("b");
    let mut args = fx.run_args("bench", w, d);
    args.extend([
        "--policies",
        "last_exit",
        "--out",
        bench_out.to_str().unwrap(),
    ]);
    ok(&args);
    let bench = read(&bench_out.join("bench.csv"));
    let last: Vec<&str> = bench.lines().nth(1).unwrap().split(',').collect();
    // +inf offset reproduces the last-exit policy.
    assert_eq!(rows[4][2], last[1]);
    assert_eq!(rows[4][3], last[2]);
    assert_eq!(rows[4][4], last[3]);
}

#[test]
fn curves_report_one_row_per_exit() {
    let fx = Fixture::new();
    let (w, d) = (fx.weights(), fx.path().to_path_buf());
    let out = fx.out("c");
    let mut args = fx.run_args("curves", w.to_str().unwrap(), d.to_str().unwrap());
    args.extend(["--out", out.to_str().unwrap()]);
    ok(&args);
    let csv = read(&out.join("curves.csv"));
    assert_eq!(
        csv.lines().next().unwrap(),
        "exit,position,samples,similarity_mean,similarity_std,diff_mean,diff_std,degenerate"
    );
    assert_eq!(csv.lines().count(), 8);
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[3], "");
    assert_eq!(first[5], "1.000000");
}

#[test]
fn inspect_weights_validates_layout() {
    let fx = Fixture::new();
    let w = fx.weights();
    let text = ok(&["inspect-weights", "--weights", w.to_str().unwrap()]);
    assert!(text.contains("tensors: 148"));
    assert!(text.contains("valid: yes"));
    fails(&[
        "inspect-weights",
        "--weights",
        w.to_str().unwrap(),
        "--exits",
        "1,16",
    ]);
    let junk = fx.out("junk.deew");
    std::fs::write(&junk, b"not a weight file").unwrap();
    fails(&["inspect-weights", "--weights", junk.to_str().unwrap()]);
}
