//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on a FAIL only when `ACCEPTANCE_STRICT` is set, so the
//! report stays part of a green `cargo test`.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dse_sim::accel::ConvParams;
use dse_sim::agu::spatial_offsets;
use dse_sim::cli::{cmd_suite, SuiteArgs, SuiteSpec};
use dse_sim::compiler::{compile, ModePolicy, PhaseKind, StreamId};
use dse_sim::dse::StreamMode;
use dse_sim::remap::AddressingMode;
use dse_sim::sim::{ablate, workload_seed, AblationRow, WorkloadData};
use dse_sim::{
    address_at, run_with_policy, AccessPattern, Agu, BankMap, DseDesign, FeatureFlags, Metrics,
    SystemConfig, WorkloadSpec,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

struct Report {
    lines: Vec<(u8, bool)>,
}

impl Report {
    fn line(&mut self, n: u8, pass: bool, what: &str, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {verdict}  {what}: {detail}");
        self.lines.push((n, pass));
    }
}

fn ladder(level: u8) -> FeatureFlags {
    FeatureFlags::ladder(level).unwrap()
}

fn square(h: usize, w: usize, c_in: usize, c_out: usize, k: usize, s: usize) -> ConvParams {
    ConvParams {
        h,
        w,
        c_in,
        c_out,
        kernel_h: k,
        kernel_w: k,
        stride_h: s,
        stride_w: s,
    }
}

/// 50 GeMMs with dimensions in 8..=64 and 20 convs, a third of them
/// strided.
fn correctness_set() -> Vec<WorkloadSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dims: Vec<usize> = (1..=8).map(|i| 8 * i).collect();
    let mut out = Vec::new();
    for i in 0..50 {
        let (m, n, k) = (
            *dims.choose(&mut rng).unwrap(),
            *dims.choose(&mut rng).unwrap(),
            *dims.choose(&mut rng).unwrap(),
        );
        let mut w = match i % 5 {
            0 | 1 => WorkloadSpec::gemm(m, n, k),
            2 => WorkloadSpec::gemm(m, n, k).with_bias(),
            3 => WorkloadSpec::gemm(m, n, k).with_quantization(),
            _ => WorkloadSpec::transposed_gemm(m, n, k),
        };
        w.id = format!("{}-{i}", w.id);
        out.push(w);
    }
    for i in 0..20 {
        let stride = if i % 3 == 0 { 2 } else { 1 };
        let kernel = *[1, 2, 3, 5].choose(&mut rng).unwrap();
        let wo = *[8, 16].choose(&mut rng).unwrap();
        let ho = rng.random_range(1..=9);
        let c_in = *[8, 16, 24, 32].choose(&mut rng).unwrap();
        let c_out = *[8, 16, 24, 32].choose(&mut rng).unwrap();
        let h = (ho - 1) * stride + kernel;
        let w_in = (wo - 1) * stride + kernel;
        let mut w = WorkloadSpec::conv(square(h, w_in, c_in, c_out, kernel, stride));
        match i % 4 {
            1 => w = w.with_bias(),
            2 => w = w.with_quantization(),
            _ => {}
        }
        w.id = format!("{}-{i}", w.id);
        out.push(w);
    }
    out
}

fn criterion_1(rep: &mut Report, sys: &SystemConfig) {
    let start = Instant::now();
    let map = sys.bank_map().unwrap();
    let mut policies: Vec<ModePolicy> = (0..map.group_options().len())
        .map(ModePolicy::Fixed)
        .collect();
    policies.push(ModePolicy::Heuristic);
    let set = correctness_set();
    let strided = set
        .iter()
        .filter(|w| w.shape.conv_params().is_some_and(|p| p.stride_h > 1))
        .count();
    let mut runs = 0;
    let mut failures = Vec::new();
    for w in &set {
        let data = WorkloadData::random(w, workload_seed(SEED, &w.id));
        for level in 1..=6 {
            let s = sys.clone().with_flags(ladder(level));
            for &p in &policies {
                runs += 1;
                match run_with_policy(&s, w, &data, p) {
                    Ok(r) if r.correct => {}
                    Ok(_) => failures.push(format!("{} L{level} {p:?}: mismatch", w.id)),
                    Err(e) => failures.push(format!("{} L{level} {p:?}: {e}", w.id)),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60) && strided > 0;
    rep.line(
        1,
        pass,
        "end-to-end correctness",
        format!(
            "{runs} runs ({} workloads, {strided} strided convs, levels 1-6, {} mode policies), {} mismatches/errors, {:.1} s (< 60 s){}",
            set.len(),
            policies.len(),
            failures.len(),
            elapsed.as_secs_f64(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

/// Metrics of each workload per ladder level.
type Table = BTreeMap<String, BTreeMap<u8, Metrics>>;

fn table(rows: &[AblationRow]) -> (Table, BTreeMap<String, WorkloadSpec>, usize) {
    let mut t: Table = BTreeMap::new();
    let mut specs = BTreeMap::new();
    let mut bad = 0;
    for r in rows {
        specs.insert(r.workload.id.clone(), r.workload.clone());
        match &r.result {
            Ok(res) if res.correct => {
                t.entry(r.workload.id.clone())
                    .or_default()
                    .insert(r.flags.level().unwrap(), res.metrics.clone());
            }
            _ => bad += 1,
        }
    }
    (t, specs, bad)
}

fn util(t: &Table, id: &str, level: u8) -> f64 {
    t[id][&level].utilization
}

fn accesses(t: &Table, id: &str, level: u8) -> f64 {
    t[id][&level].total_memory_accesses as f64
}

fn min_by<'a>(items: impl Iterator<Item = (&'a str, f64)>) -> (f64, String) {
    items
        .map(|(id, v)| (v, id.to_string()))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap_or((f64::NAN, String::new()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn suite_criteria(rep: &mut Report, sys: &SystemConfig) {
    let workloads = SuiteSpec::standard().generate(SEED);
    let levels: Vec<FeatureFlags> = (1..=6).map(ladder).collect();
    let start = Instant::now();
    let rows = ablate(sys, &workloads, &levels, SEED);
    let (t, specs, bad) = table(&rows);
    println!(
        "suite: {} workloads x 6 levels in {:.1} s, {bad} failed runs",
        workloads.len(),
        start.elapsed().as_secs_f64()
    );
    let ids = |pred: &dyn Fn(&WorkloadSpec) -> bool| -> Vec<&str> {
        specs
            .iter()
            .filter(|(id, w)| pred(w) && t.get(*id).is_some_and(|m| m.len() == 6))
            .map(|(id, _)| id.as_str())
            .collect()
    };
    let kind = |w: &WorkloadSpec| w.shape.kind_name();
    let gemm = ids(&|w| kind(w) == "gemm");
    let tgemm = ids(&|w| kind(w) == "transposed_gemm");
    let matrix: Vec<&str> = gemm.iter().chain(&tgemm).copied().collect();
    let quant = ids(&|w| w.quantize_output);
    let convs = ids(&|w| kind(w) == "conv");

    // 2
    let u6: Vec<f64> = matrix.iter().map(|id| util(&t, id, 6)).collect();
    let (lo, lo_id) = min_by(matrix.iter().map(|id| (*id, util(&t, id, 6))));
    rep.line(
        2,
        bad == 0 && mean(&u6) >= 0.99 && lo >= 0.95,
        "GeMM utilization at level 6",
        format!(
            "mean {:.4} over {} GeMM/transposed GeMM (>= 0.99), min {lo:.4} at {lo_id} (>= 0.95)",
            mean(&u6),
            matrix.len()
        ),
    );

    // 3
    let (lo, lo_id) = min_by(
        gemm.iter()
            .map(|id| (*id, util(&t, id, 2) / util(&t, id, 1))),
    );
    let (tlo, _) = min_by(
        tgemm
            .iter()
            .map(|id| (*id, util(&t, id, 2) / util(&t, id, 1))),
    );
    rep.line(
        3,
        lo >= 1.5,
        "prefetch speedup, level 2 vs 1",
        format!(
            "min {lo:.3}x over {} GeMMs at {lo_id} (>= 1.5); transposed GeMM min {tlo:.3}x",
            gemm.len()
        ),
    );

    // 4
    let (red, red_id) = min_by(
        tgemm
            .iter()
            .map(|id| (*id, 1.0 - accesses(&t, id, 3) / accesses(&t, id, 2))),
    );
    let (ratio, ratio_id) = min_by(
        tgemm
            .iter()
            .map(|id| (*id, util(&t, id, 3) / util(&t, id, 2))),
    );
    rep.line(
        4,
        red >= 0.10 && ratio >= 1.10,
        "transposer, level 3 vs 2 on transposed GeMM",
        format!(
            "min access reduction {:.1}% at {red_id} (>= 10%), min utilization ratio {ratio:.3}x at {ratio_id} (>= 1.10)",
            100.0 * red
        ),
    );

    // 5
    let lanes = sys.streams.c.num_channels as u64;
    let exact: Vec<&str> = quant
        .iter()
        .copied()
        .filter(|id| {
            let c = |l: u8| {
                t[*id][&l]
                    .stream_requests
                    .get(&StreamId::C)
                    .copied()
                    .unwrap_or(0)
            };
            c(4) == 0 || c(3) != lanes * c(4)
        })
        .collect();
    let reductions: Vec<f64> = quant
        .iter()
        .map(|id| 1.0 - accesses(&t, id, 4) / accesses(&t, id, 3))
        .collect();
    let (red, red_id) = min_by(
        quant
            .iter()
            .map(|id| (*id, 1.0 - accesses(&t, id, 4) / accesses(&t, id, 3))),
    );
    let top = reductions.iter().cloned().fold(f64::MIN, f64::max);
    rep.line(
        5,
        !quant.is_empty() && exact.is_empty() && red >= 0.10,
        "broadcaster, level 4 vs 3 on quantized workloads",
        format!(
            "scale requests divided by exactly {lanes} on {}/{} workloads; total access reduction min {:.1}% at {red_id} (>= 10%), mean {:.1}%, max {:.1}%",
            quant.len() - exact.len(),
            quant.len(),
            100.0 * red,
            100.0 * mean(&reductions),
            100.0 * top
        ),
    );

    // 6
    let ratios: Vec<f64> = convs
        .iter()
        .map(|id| util(&t, id, 5) / util(&t, id, 4))
        .collect();
    let (lo, lo_id) = min_by(
        convs
            .iter()
            .map(|id| (*id, util(&t, id, 5) / util(&t, id, 4))),
    );
    let mut shapes: Vec<ConvParams> = specs
        .values()
        .filter_map(|w| w.shape.conv_params())
        .collect();
    shapes.extend(
        correctness_set()
            .iter()
            .filter_map(|w| w.shape.conv_params()),
    );
    let multiset_bad = im2col_mismatches(sys, &shapes);
    rep.line(
        6,
        mean(&ratios) >= 1.10 && multiset_bad.is_empty(),
        "implicit im2col, level 5 vs 4 on convs",
        format!(
            "mean utilization ratio {:.3}x over {} convs (>= 1.10), per-workload min {lo:.3}x at {lo_id}; address multisets equal the patch oracle on {}/{} shapes",
            mean(&ratios),
            convs.len(),
            shapes.len() - multiset_bad.len(),
            shapes.len()
        ),
    );

    // 7
    let all: Vec<&str> = t
        .keys()
        .map(|s| s.as_str())
        .filter(|id| t[*id].len() == 6)
        .collect();
    let speed = all
        .iter()
        .map(|id| util(&t, id, 6) / util(&t, id, 1))
        .fold(0.0, f64::max);
    let red = all
        .iter()
        .map(|id| 1.0 - accesses(&t, id, 6) / accesses(&t, id, 1))
        .fold(f64::MIN, f64::max);
    rep.line(
        7,
        speed >= 2.0 && red >= 0.15,
        "full ladder, level 6 vs 1",
        format!(
            "max speedup {speed:.2}x (>= 2.0), max access reduction {:.1}% (>= 15%)",
            100.0 * red
        ),
    );

    // 8
    let u6: Vec<f64> = convs.iter().map(|id| util(&t, id, 6)).collect();
    let mut pairs = 0;
    let mut not_lower = Vec::new();
    for id in &convs {
        let Some((prefix, _)) = id.split_once("-s2-") else {
            continue;
        };
        let Some(partner) = convs
            .iter()
            .find(|o| o.starts_with(&format!("{prefix}-s1-")))
        else {
            continue;
        };
        pairs += 1;
        let (s2, s1) = (util(&t, id, 6), util(&t, partner, 6));
        if s2 >= s1 {
            not_lower.push(format!("{id} {s2:.4} vs {s1:.4}"));
        }
    }
    rep.line(
        8,
        mean(&u6) >= 0.85 && pairs > 0 && not_lower.is_empty(),
        "conv utilization at level 6",
        format!(
            "mean {:.4} over {} convs (>= 0.85); stride-2 below its stride-1 pair in {}/{pairs}{}",
            mean(&u6),
            convs.len(),
            pairs - not_lower.len(),
            if not_lower.is_empty() {
                String::new()
            } else {
                format!("; not lower: {}", not_lower.join(", "))
            }
        ),
    );
}

fn im2col_mismatches(sys: &SystemConfig, shapes: &[ConvParams]) -> Vec<String> {
    let map = sys.bank_map().unwrap();
    let mut bad = Vec::new();
    for p in shapes {
        let w = WorkloadSpec::conv(*p);
        for level in [4, 5] {
            let flags = ladder(level);
            let Ok((layout, schedule)) = compile(&w, &sys.core, &sys.streams, &map, &flags) else {
                bad.push(format!("{} does not compile", w.id));
                continue;
            };
            let oracle = common::patch_oracle(p, layout.a.base, &sys.core);
            let (phase, reuse) = if flags.implicit_im2col {
                (&schedule.phases[0], (p.c_out / sys.core.ns) as u64)
            } else {
                assert!(matches!(schedule.phases[0].kind, PhaseKind::Copy));
                (&schedule.phases[0], 1)
            };
            let got = common::stream_multiset(phase.stream(StreamId::A).unwrap(), &sys.streams.a);
            let want: BTreeMap<u64, u64> =
                oracle.into_iter().map(|(a, n)| (a, n * reuse)).collect();
            if got != want {
                bad.push(format!("{} level {level}", w.id));
            }
        }
    }
    bad
}

fn criterion_9(rep: &mut Report) {
    let r = common::check_remap(1 << 20);
    let map = BankMap::new(8, 4, 4, vec![4, 2, 1]).unwrap();
    let at = |r_s| {
        let l = map.map_with(r_s, 2).unwrap();
        (l.bank, l.wordline)
    };
    let pinned = map.mode_of(0) == AddressingMode::Fima
        && map.mode_of(2) == AddressingMode::Nima
        && at(0) == (2, 0)
        && at(2) == (0, 2)
        && at(1) == (0, 1);
    rep.line(
        9,
        r.violations.is_empty() && pinned,
        "remapper properties",
        format!(
            "{} geometries up to 2^20 bytes, {} (word, mode) pairs, {} violations; worked example {}",
            r.geometries,
            r.words_checked,
            r.violations.len(),
            if pinned { "matches" } else { "differs" }
        ),
    );
}

fn criterion_10(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cases = 10_000;
    let mut mismatches = 0u64;
    let mut steps = 0u64;
    for _ in 0..cases {
        let dims = rng.random_range(1..=6);
        let sdims = rng.random_range(0..=3);
        let spatial: Vec<usize> = (0..sdims).map(|_| rng.random_range(1..=4)).collect();
        let design = DseDesign {
            mode: StreamMode::Read,
            num_channels: spatial.iter().product(),
            spatial_bounds: spatial.clone(),
            max_temporal_dims: 6,
            address_buffer_depth: 4,
            data_buffer_depth: 4,
            bank_width_bits: 64,
            extensions: vec![],
        };
        let p = AccessPattern::new(
            (1 << 24) + rng.random_range(0..1 << 20),
            (0..dims).map(|_| rng.random_range(1..=5)).collect(),
            (0..dims).map(|_| rng.random_range(-96..=96)).collect(),
            (0..sdims).map(|_| rng.random_range(-64..=64)).collect(),
        );
        let offsets = spatial_offsets(&design.spatial_bounds, &p.spatial_strides);
        for (t, step) in Agu::configure(&p, &design, 1 << 40).unwrap().enumerate() {
            steps += 1;
            let closed = address_at(&p, &design, t as u64).unwrap();
            if step != closed || step.spatial_offsets != offsets {
                mismatches += 1;
            }
        }
    }
    rep.line(
        10,
        mismatches == 0,
        "AGU incremental vs closed form",
        format!("{cases} random patterns, {steps} steps, {mismatches} mismatches"),
    );
}

fn criterion_11(rep: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["first", "second"] {
        let args = SuiteArgs {
            config: None,
            suite_spec: None,
            flags: None,
            out: tmp.path().join(name),
            seed: SEED,
            jobs: 0,
            deadlock_budget: None,
        };
        let code = cmd_suite(&args).unwrap();
        csvs.push((
            code,
            std::fs::read(tmp.path().join(name).join("suite.csv")).unwrap(),
        ));
    }
    let same = csvs[0].1 == csvs[1].1;
    rep.line(
        11,
        same && csvs[0].0 == 0,
        "suite determinism",
        format!(
            "two suite runs with seed {SEED}: {} bytes each, {}, exit codes {} and {}",
            csvs[0].1.len(),
            if same { "byte-identical" } else { "different" },
            csvs[0].0,
            csvs[1].0
        ),
    );
}

fn main() {
    let sys = SystemConfig::default();
    let mut rep = Report { lines: Vec::new() };
    criterion_1(&mut rep, &sys);
    suite_criteria(&mut rep, &sys);
    criterion_9(&mut rep);
    criterion_10(&mut rep);
    criterion_11(&mut rep);
    rep.lines.sort_by_key(|l| l.0);
    let passed = rep.lines.iter().filter(|l| l.1).count();
    let failed: Vec<String> = rep
        .lines
        .iter()
        .filter(|l| !l.1)
        .map(|l| l.0.to_string())
        .collect();
    println!(
        "acceptance: {passed}/{} criteria pass{}",
        rep.lines.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failing: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
