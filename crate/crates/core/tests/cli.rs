use std::fs;
use std::path::Path;
use std::process::Command;

use dse_sim::cli::{self, SuiteSpec, CSV_HEADER};

const WORKLOADS: &str = r#"[
  {"id": "g8", "kind": "gemm", "m": 8, "n": 8, "k": 8},
  {"id": "t16", "kind": "transposed_gemm", "m": 16, "n": 16, "k": 16},
  {"id": "c1", "kind": "conv", "h": 10, "w": 10, "c_in": 8, "c_out": 8,
   "kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1, "bias": true}
]"#;

const GOLDEN: &str = "\
workload_id,kind,dims,flags,utilization,ideal_cycles,active_cycles,accesses,conflicts,status
g8,gemm,8x8x8,1,0.333333,1,3,48,0,ok
g8,gemm,8x8x8,6,0.250000,1,4,48,8,ok
t16,transposed_gemm,16x16x16,1,0.062016,8,129,704,1824,ok
t16,transposed_gemm,16x16x16,6,0.666667,8,12,256,88,ok
c1,conv,10x10x8->8 k3x3 s1x1,1,0.231511,72,311,2816,272,ok
c1,conv,10x10x8->8 k3x3 s1x1,6,0.900000,72,80,1664,768,ok
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dse-sim"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn run_writes_the_pinned_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let wl = write(tmp.path(), "w.json", WORKLOADS);
    let out = tmp.path().join("out");
    let status = code(
        bin()
            .args(["run", "--workloads", &wl, "--flags", "1,6", "--out"])
            .arg(&out),
    );
    assert_eq!(status, 0);
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap(), GOLDEN);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics/c1_f6.json")).unwrap()).unwrap();
    assert_eq!(json["status"], "ok");
    assert_eq!(json["metrics"]["ideal_cycles"], 72);
    assert_eq!(json["workload"]["kind"], "conv");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let wl = write(tmp.path(), "w.json", WORKLOADS);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(
            cli::run_cli([
                "dse-sim",
                "ablate",
                "--workloads",
                &wl,
                "--jobs",
                "2",
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    for f in [
        "ablation.csv",
        "ablation_summary.csv",
        "metrics/t16_f3.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(a.join("ablation_summary.csv")).unwrap();
    assert!(summary.starts_with("group,flags,runs,mean_utilization,mean_normalized_accesses\n"));
    // three groups, six ladder levels each
    assert_eq!(summary.lines().count(), 1 + 3 * 6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = dir.join("out").display().to_string();
    let wl = write(dir, "w.json", WORKLOADS);

    let bad_json = write(dir, "bad.json", "{ not json");
    assert_eq!(
        code(bin().args(["run", "--workloads", &bad_json, "--out", &out])),
        2
    );
    assert_eq!(
        code(bin().args([
            "run",
            "--workloads",
            &wl,
            "--config",
            &bad_json,
            "--out",
            &out
        ])),
        2
    );
    let bad_mem = write(dir, "sys.json", r#"{"memory": {"num_banks": 3}}"#);
    assert_eq!(
        code(bin().args([
            "run",
            "--workloads",
            &wl,
            "--config",
            &bad_mem,
            "--out",
            &out
        ])),
        2
    );
    assert_eq!(
        code(bin().args(["run", "--workloads", &wl, "--flags", "9", "--out", &out])),
        2
    );
    assert_eq!(code(bin().args(["frobnicate"])), 2);

    let missing = dir.join("nope.json").display().to_string();
    assert_eq!(
        code(bin().args(["run", "--workloads", &missing, "--out", &out])),
        4
    );
    let file_as_dir = write(dir, "plain", "x");
    assert_eq!(
        code(bin().args(["run", "--workloads", &wl, "--out", &file_as_dir])),
        4
    );

    let indivisible = write(
        dir,
        "i.json",
        r#"[{"id": "odd", "kind": "gemm", "m": 12, "n": 8, "k": 8}]"#,
    );
    assert_eq!(
        code(bin().args(["run", "--workloads", &indivisible, "--out", &out])),
        1
    );
    let csv = fs::read_to_string(dir.join("out/summary.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",,,,,error"));

    let corrupt = write(
        dir,
        "c.json",
        r#"{"workloads": [{"id": "bad", "kind": "gemm", "m": 8, "n": 8, "k": 8, "corrupt_golden": true}]}"#,
    );
    assert_eq!(
        code(bin().args(["run", "--workloads", &corrupt, "--out", &out])),
        3
    );
    let csv = fs::read_to_string(dir.join("out/summary.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",mismatch"));
}

#[test]
fn empty_suite_gives_a_header_only_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "s.json", "{}");
    let out = tmp.path().join("out");
    let status = code(
        bin()
            .args(["suite", "--suite-spec", &spec, "--out"])
            .arg(&out),
    );
    assert_eq!(status, 0);
    let csv = fs::read_to_string(out.join("suite.csv")).unwrap();
    assert_eq!(csv, CSV_HEADER.join(",") + "\n");
}

#[test]
fn small_suite_is_reproducible() {
    let spec = SuiteSpec {
        gemm: 3,
        transposed_gemm: 2,
        quantized_gemm: 1,
        conv_pairs: 1,
        conv: 1,
        quantized_conv: 1,
        matrix_sizes: vec![16, 32],
        quantized_max_k: 32,
    };
    let tmp = tempfile::tempdir().unwrap();
    let path = write(tmp.path(), "s.json", &serde_json::to_string(&spec).unwrap());
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let out = tmp.path().join(out);
        let status = code(
            bin()
                .args(["suite", "--suite-spec", &path, "--seed", "11", "--out"])
                .arg(&out),
        );
        assert_eq!(status, 0);
        csvs.push(fs::read(out.join("suite.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.pop().unwrap()).unwrap();
    assert_eq!(text.lines().count(), 1 + spec.len());
    assert!(text.lines().skip(1).all(|l| l.ends_with(",ok")));
}
