//! Command line front end: `run`, `ablate` and `suite`.
//!
//! Every run writes one metrics JSON file and one summary CSV row. CSV
//! columns: `workload_id, kind, dims, flags, utilization, ideal_cycles,
//! active_cycles, accesses, conflicts, status`, where status is `ok`,
//! `mismatch` or `error`.
//!
//! Exit codes: 0 success, 1 simulation error, 2 configuration error,
//! 3 output mismatch against the golden kernels, 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accel::ConvParams;
use crate::compiler::{FeatureFlags, WorkloadSpec};
use crate::sim::{ablate, summarize, AblationRow, Metrics, SystemConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SIM_ERROR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CSV_HEADER: [&str; 10] = [
    "workload_id",
    "kind",
    "dims",
    "flags",
    "utilization",
    "ideal_cycles",
    "active_cycles",
    "accesses",
    "conflicts",
    "status",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse { .. } | CliError::BadArgument(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dse-sim",
    version,
    about = "Streaming-engine accelerator simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run workloads under one or more flag sets.
    Run(CommonArgs),
    /// Run workloads across a flag ladder and summarize per group.
    Ablate(CommonArgs),
    /// Generate the synthetic suite from a seed and run it.
    Suite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// System configuration JSON (defaults to the evaluation system).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Workload list JSON: an array of workloads or {"workloads": [...]}.
    #[arg(long)]
    pub workloads: PathBuf,
    /// Ladder levels: "6", "1-6" or "1,2,5". Default 6 for run, 1-6 for ablate.
    #[arg(long)]
    pub flags: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed of the random input tensors.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Cycles without progress before a run is declared deadlocked.
    #[arg(long)]
    pub deadlock_budget: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Suite generator JSON; omitted fields count zero. Default: the
    /// standard suite.
    #[arg(long)]
    pub suite_spec: Option<PathBuf>,
    #[arg(long)]
    pub flags: Option<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub deadlock_budget: Option<u64>,
}

/// Resolved inputs of one command.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub system: SystemConfig,
    pub workloads: Vec<WorkloadSpec>,
    pub ladder: Vec<FeatureFlags>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

/// Parses "6", "1-6", "1,3,6" or mixes such as "1-2,6".
pub fn parse_ladder(spec: &str) -> Result<Vec<FeatureFlags>, CliError> {
    let bad = || CliError::BadArgument(format!("flag ladder {spec:?}"));
    let level = |s: &str| -> Result<u8, CliError> {
        let l: u8 = s.trim().parse().map_err(|_| bad())?;
        FeatureFlags::ladder(l).map(|_| l).ok_or_else(bad)
    };
    let mut out = Vec::new();
    for part in spec.split(',') {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (level(a)?, level(b)?),
            None => {
                let l = level(part)?;
                (l, l)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        for l in lo..=hi {
            out.push(FeatureFlags::ladder(l).expect("checked"));
        }
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WorkloadFile {
    List(Vec<WorkloadSpec>),
    Wrapped { workloads: Vec<WorkloadSpec> },
}

pub fn load_workloads(path: &Path) -> Result<Vec<WorkloadSpec>, CliError> {
    let mut list = match read_json::<WorkloadFile>(path)? {
        WorkloadFile::List(l) | WorkloadFile::Wrapped { workloads: l } => l,
    };
    for (i, w) in list.iter_mut().enumerate() {
        if w.id.is_empty() {
            w.id = format!("w{i}");
        }
    }
    Ok(list)
}

fn load_system(path: Option<&Path>, budget: Option<u64>) -> Result<SystemConfig, CliError> {
    let mut sys = match path {
        Some(p) => read_json::<SystemConfig>(p)?,
        None => SystemConfig::default(),
    };
    if budget.is_some() {
        sys.deadlock_budget = budget;
    }
    sys.validate().map_err(|e| CliError::ConfigParse {
        path: path.map_or("<default>".into(), |p| p.display().to_string()),
        message: e.to_string(),
    })?;
    Ok(sys)
}

/// Synthetic suite generator. Every count defaults to zero, so `{}` is
/// the empty suite.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub gemm: usize,
    pub transposed_gemm: usize,
    pub quantized_gemm: usize,
    /// Each pair is a stride-1 and a stride-2 conv with the same output.
    pub conv_pairs: usize,
    pub conv: usize,
    pub quantized_conv: usize,
    /// Matrix dimensions are drawn from here.
    pub matrix_sizes: Vec<usize>,
    /// Largest K of quantized GeMMs.
    pub quantized_max_k: usize,
}

impl SuiteSpec {
    /// 100 workloads: 30 GeMM, 20 transposed GeMM, 10 quantized GeMM,
    /// 14 stride pairs, 8 further convs and 4 quantized convs.
    pub fn standard() -> Self {
        Self {
            gemm: 30,
            transposed_gemm: 20,
            quantized_gemm: 10,
            conv_pairs: 14,
            conv: 8,
            quantized_conv: 4,
            matrix_sizes: vec![64, 128, 192, 256],
            quantized_max_k: 128,
        }
    }

    pub fn len(&self) -> usize {
        self.gemm
            + self.transposed_gemm
            + self.quantized_gemm
            + 2 * self.conv_pairs
            + self.conv
            + self.quantized_conv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic workload list for `seed`.
    pub fn generate(&self, seed: u64) -> Vec<WorkloadSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = if self.matrix_sizes.is_empty() {
            vec![64]
        } else {
            self.matrix_sizes.clone()
        };
        let mut out = Vec::with_capacity(self.len());
        let pick = |rng: &mut ChaCha8Rng| *sizes.choose(rng).expect("non-empty");
        for i in 0..self.gemm {
            let (m, n, k) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
            let mut w = WorkloadSpec::gemm(m, n, k);
            w.bias = rng.random_bool(0.5);
            w.id = format!("gemm-{i:02}-{m}x{n}x{k}");
            out.push(w);
        }
        for i in 0..self.transposed_gemm {
            let (m, n, k) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
            let mut w = WorkloadSpec::transposed_gemm(m, n, k);
            w.id = format!("tgemm-{i:02}-{m}x{n}x{k}");
            out.push(w);
        }
        let small_k: Vec<usize> = sizes
            .iter()
            .copied()
            .filter(|&k| k <= self.quantized_max_k.max(8))
            .collect();
        let small_k = if small_k.is_empty() {
            vec![64]
        } else {
            small_k
        };
        for i in 0..self.quantized_gemm {
            let (m, n) = (pick(&mut rng), pick(&mut rng));
            let k = *small_k.choose(&mut rng).expect("non-empty");
            let mut w = WorkloadSpec::gemm(m, n, k).with_quantization();
            w.id = format!("qgemm-{i:02}-{m}x{n}x{k}");
            out.push(w);
        }
        for i in 0..self.conv_pairs {
            let out_hw = *[8, 16].choose(&mut rng).expect("non-empty");
            let kernel = *[3, 5].choose(&mut rng).expect("non-empty");
            let c_in = *[8, 16, 32].choose(&mut rng).expect("non-empty");
            let c_out = *[16, 32, 64].choose(&mut rng).expect("non-empty");
            for stride in [1, 2] {
                let h = (out_hw - 1) * stride + kernel;
                let mut w = WorkloadSpec::conv(square_conv(h, c_in, c_out, kernel, stride));
                w.id = format!("conv-p{i:02}-s{stride}-{h}x{h}x{c_in}-{c_out}-k{kernel}");
                out.push(w);
            }
        }
        for i in 0..self.conv {
            let out_hw = *[8, 16, 24].choose(&mut rng).expect("non-empty");
            let kernel = *[1, 3, 3, 5].choose(&mut rng).expect("non-empty");
            let c_in = if kernel == 1 {
                *[32, 64].choose(&mut rng).expect("non-empty")
            } else {
                *[8, 16, 32].choose(&mut rng).expect("non-empty")
            };
            let c_out = *[16, 32, 64].choose(&mut rng).expect("non-empty");
            let h = out_hw - 1 + kernel;
            let mut w = WorkloadSpec::conv(square_conv(h, c_in, c_out, kernel, 1));
            w.bias = rng.random_bool(0.5);
            w.id = format!("conv-{i:02}-{h}x{h}x{c_in}-{c_out}-k{kernel}");
            out.push(w);
        }
        for i in 0..self.quantized_conv {
            let out_hw = *[8, 16].choose(&mut rng).expect("non-empty");
            let c_out = *[16, 32].choose(&mut rng).expect("non-empty");
            let h = out_hw + 2;
            let mut w = WorkloadSpec::conv(square_conv(h, 8, c_out, 3, 1)).with_quantization();
            w.id = format!("qconv-{i:02}-{h}x{h}x8-{c_out}-k3");
            out.push(w);
        }
        out
    }
}

fn square_conv(h: usize, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> ConvParams {
    ConvParams {
        h,
        w: h,
        c_in,
        c_out,
        kernel_h: kernel,
        kernel_w: kernel,
        stride_h: stride,
        stride_w: stride,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Mismatch,
    Error,
}

impl RunStatus {
    pub fn of(row: &AblationRow) -> Self {
        match &row.result {
            Ok(r) if r.correct => RunStatus::Ok,
            Ok(_) => RunStatus::Mismatch,
            Err(_) => RunStatus::Error,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Mismatch => "mismatch",
            RunStatus::Error => "error",
        }
    }
}

/// Per-run JSON record.
#[derive(Debug, Clone, Serialize)]
struct RunRecord<'a> {
    workload: &'a WorkloadSpec,
    flags: &'a FeatureFlags,
    status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<&'a Metrics>,
}

/// CSV record of one run, in [`CSV_HEADER`] order.
pub fn csv_record(row: &AblationRow) -> Vec<String> {
    let w = &row.workload;
    let status = RunStatus::of(row);
    let mut rec = vec![
        w.id.clone(),
        w.shape.kind_name().to_string(),
        w.shape.dims_label(),
        row.flags.label(),
    ];
    match row.metrics() {
        Some(m) => rec.extend([
            format!("{:.6}", m.utilization),
            m.ideal_cycles.to_string(),
            m.active_cycles.to_string(),
            m.total_memory_accesses.to_string(),
            m.conflict_stall_cycles.to_string(),
        ]),
        None => rec.extend(std::iter::repeat_n(String::new(), 5)),
    }
    rec.push(status.as_str().to_string());
    rec
}

pub fn write_runs_csv(path: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    wtr.write_record(CSV_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        wtr.write_record(csv_record(r))
            .map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_summary_csv(path: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    wtr.write_record([
        "group",
        "flags",
        "runs",
        "mean_utilization",
        "mean_normalized_accesses",
    ])
    .map_err(|e| csv_io(path, e))?;
    for s in summarize(rows) {
        wtr.write_record([
            s.group,
            s.flags,
            s.runs.to_string(),
            format!("{:.6}", s.mean_utilization),
            format!("{:.6}", s.mean_normalized_accesses),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(io_err(path))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_run_json(dir: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in rows {
        let rec = RunRecord {
            workload: &r.workload,
            flags: &r.flags,
            status: RunStatus::of(r),
            error: r.result.as_ref().err().map(|s| s.as_str()),
            metrics: r.metrics(),
        };
        let path = dir.join(format!(
            "{}_f{}.json",
            file_safe(&r.workload.id),
            r.flags.label()
        ));
        let text = serde_json::to_string_pretty(&rec).expect("plain data serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

fn execute(m: &RunManifest) -> Vec<AblationRow> {
    let go = || ablate(&m.system, &m.workloads, &m.ladder, m.seed);
    if m.jobs == 0 {
        go()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(m.jobs).build() {
            Ok(pool) => pool.install(go),
            Err(_) => go(),
        }
    }
}

/// Mismatch beats simulation errors.
fn exit_status(rows: &[AblationRow]) -> i32 {
    let statuses: Vec<RunStatus> = rows.iter().map(RunStatus::of).collect();
    if statuses.contains(&RunStatus::Mismatch) {
        EXIT_MISMATCH
    } else if statuses.contains(&RunStatus::Error) {
        EXIT_SIM_ERROR
    } else {
        EXIT_OK
    }
}

fn manifest(args: &CommonArgs, default_ladder: &str) -> Result<RunManifest, CliError> {
    Ok(RunManifest {
        system: load_system(args.config.as_deref(), args.deadlock_budget)?,
        workloads: load_workloads(&args.workloads)?,
        ladder: parse_ladder(args.flags.as_deref().unwrap_or(default_ladder))?,
        out: args.out.clone(),
        seed: args.seed,
        jobs: args.jobs,
    })
}

pub fn cmd_run(m: &RunManifest) -> Result<i32, CliError> {
    fs::create_dir_all(&m.out).map_err(io_err(&m.out))?;
    let rows = execute(m);
    write_run_json(&m.out.join("metrics"), &rows)?;
    write_runs_csv(&m.out.join("summary.csv"), &rows)?;
    Ok(exit_status(&rows))
}

pub fn cmd_ablate(m: &RunManifest) -> Result<i32, CliError> {
    fs::create_dir_all(&m.out).map_err(io_err(&m.out))?;
    let rows = execute(m);
    write_run_json(&m.out.join("metrics"), &rows)?;
    write_runs_csv(&m.out.join("ablation.csv"), &rows)?;
    write_summary_csv(&m.out.join("ablation_summary.csv"), &rows)?;
    Ok(exit_status(&rows))
}

pub fn cmd_suite(args: &SuiteArgs) -> Result<i32, CliError> {
    let spec = match &args.suite_spec {
        Some(p) => read_json::<SuiteSpec>(p)?,
        None => SuiteSpec::standard(),
    };
    let m = RunManifest {
        system: load_system(args.config.as_deref(), args.deadlock_budget)?,
        workloads: spec.generate(args.seed),
        ladder: parse_ladder(args.flags.as_deref().unwrap_or("6"))?,
        out: args.out.clone(),
        seed: args.seed,
        jobs: args.jobs,
    };
    fs::create_dir_all(&m.out).map_err(io_err(&m.out))?;
    let wl = m.out.join("suite_workloads.json");
    let text = serde_json::to_string_pretty(&m.workloads).expect("plain data serializes");
    fs::write(&wl, text + "\n").map_err(io_err(&wl))?;
    let rows = execute(&m);
    write_runs_csv(&m.out.join("suite.csv"), &rows)?;
    Ok(exit_status(&rows))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => manifest(a, "6").and_then(|m| cmd_run(&m)),
        Command::Ablate(a) => manifest(a, "1-6").and_then(|m| cmd_ablate(&m)),
        Command::Suite(a) => cmd_suite(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dse-sim: {e}");
            e.exit_code()
        }
    }
}
