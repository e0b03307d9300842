//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nttpim::harness::{
    campaign_cases, polymul_on_pim, random_poly, run, run_point, sweep, verify_campaign, RunConfig, SweepDimension,
    CAMPAIGN_MODULI, CAMPAIGN_SIZES, SWEEP_BUFFERS,
};
use nttpim::mapper::{map_ntt_sections, NttJob, SectionKind};
use nttpim::reference::{polymul_schoolbook, NttPlan};
use nttpim::timing::{check_legality, schedule, TimedTrace};
use nttpim::{BankGeometry, CommandKind, Modulus};
use rayon::prelude::*;

/// Schedules checked for legality across all criteria.
static TRACES: AtomicUsize = AtomicUsize::new(0);
static ILLEGAL: AtomicUsize = AtomicUsize::new(0);

fn note_trace(violations: usize) {
    TRACES.fetch_add(1, Ordering::Relaxed);
    if violations > 0 {
        ILLEGAL.fetch_add(1, Ordering::Relaxed);
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cfg(n: usize, nb: usize) -> RunConfig {
    RunConfig {
        n,
        num_buffers: nb,
        ..RunConfig::default()
    }
}

/// Verified cycle counts for each `(n, nb)` at 1200 MHz.
fn cycle_table(sizes: &[usize], buffers: &[usize]) -> Result<BTreeMap<(usize, usize), u64>, String> {
    let points: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&n| buffers.iter().map(move |&nb| (n, nb)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(n, nb)| {
            run_point(&cfg(n, nb))
                .map(|(row, sim)| {
                    note_trace(sim.violations.len());
                    ((n, nb), row.stats.cycles)
                })
                .map_err(|e| format!("n={n} nb={nb}: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rows.into_iter().collect())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases = campaign_cases(&CAMPAIGN_SIZES, &CAMPAIGN_MODULI);
    let seeds: Vec<u64> = (0..10).collect();
    let v = match verify_campaign(&RunConfig::default(), &cases, &seeds, &SWEEP_BUFFERS, None) {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    for _ in 0..v.traces_checked {
        note_trace(0);
    }
    let illegal = v.failures.iter().filter(|f| f.detail.contains("illegal")).count();
    ILLEGAL.fetch_add(illegal, Ordering::Relaxed);
    let ok = v.passed() && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{} (n,q) pairs x 10 seeds x N_b {:?} = {} runs, {} failures, {:.1}s",
        cases.len(),
        SWEEP_BUFFERS,
        v.cases,
        v.failures.len(),
        elapsed.as_secs_f64()
    );
    if let Some(f) = v.failures.first() {
        detail.push_str(&format!("; first: {} ({})", f.detail, f.reproduce));
    }
    outcome(ok, detail)
}

fn criterion_2() -> Outcome {
    let q = 12289;
    let m = Modulus::new(q as u64).unwrap();
    let sizes = [8usize, 16, 32, 64, 128, 256, 512];
    let pairs = 100u64;
    let work: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| (0..pairs).map(move |i| (n, i))).collect();
    let bad: Vec<String> = work
        .par_iter()
        .filter_map(|&(n, i)| {
            let nb = SWEEP_BUFFERS[i as usize % SWEEP_BUFFERS.len()];
            let c = RunConfig {
                q: Some(q),
                ..cfg(n, nb)
            };
            let a = random_poly(n, q, 2 * i);
            let b = random_poly(n, q, 2 * i + 1);
            match polymul_on_pim(&c, &a, &b) {
                Ok((prod, sims)) => {
                    for s in &sims {
                        note_trace(s.violations.len());
                    }
                    let want = polymul_schoolbook(&a, &b, &m).unwrap();
                    (prod != want).then(|| format!("n={n} pair={i} nb={nb}: product differs"))
                }
                Err(e) => Some(format!("n={n} pair={i} nb={nb}: {e}")),
            }
        })
        .collect();
    outcome(
        bad.is_empty(),
        format!(
            "{} pairs per size for n in {:?}, q={q}; {} mismatches{}",
            pairs,
            sizes,
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

fn criterion_3() -> Outcome {
    let n = 1024;
    let g = BankGeometry::default();
    let m = Modulus::new(12289).unwrap();
    let plan = NttPlan::forward(n, m).unwrap();
    let count_acts = |cmds: &[nttpim::PimCommand]| cmds.iter().filter(|c| c.kind() == CommandKind::Act).count();

    let base = match map_ntt_sections(&NttJob::new(n, m, 2), &g, &plan) {
        Ok(x) => x,
        Err(e) => return outcome(false, e.to_string()),
    };
    let blocks = n / g.row_words();
    let first_acts: usize = (0..blocks)
        .map(|b| count_acts(base.section(SectionKind::RowBlock(b)).unwrap()))
        .sum();
    let mut ok = first_acts == n / g.row_words();

    // the full bound needs k = R/N_a pair slots
    let k_full = g.columns_per_row;
    let buffers = [2usize, 4, 6, 8, 16, 32, 2 * k_full];
    let bound = 3 * n / (2 * g.row_words());
    let mut per_stage: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &nb in &buffers {
        let mapped = map_ntt_sections(&NttJob::new(n, m, nb), &g, &plan).unwrap();
        for s in 9..=10 {
            per_stage
                .entry(s)
                .or_default()
                .push(count_acts(mapped.section(SectionKind::InterRow(s)).unwrap()));
        }
        match run_point(&cfg(n, nb)) {
            Ok((_, sim)) => note_trace(sim.violations.len()),
            Err(e) => return outcome(false, format!("nb={nb}: {e}")),
        }
    }
    for acts in per_stage.values() {
        ok &= acts.windows(2).all(|w| w[1] <= w[0]);
        ok &= *acts.last().unwrap() == bound;
    }
    outcome(
        ok,
        format!(
            "first 8 stages: {first_acts} ACTs (want {}); inter-row ACTs per stage for N_b {:?}: {:?}; at k={} want {bound}",
            n / g.row_words(),
            buffers,
            per_stage.values().next().unwrap(),
            k_full
        ),
    )
}

/// Counts command names in a trace dump without using the command types.
fn count_in_dump(dump: &str, name: &str) -> usize {
    let tag = format!("cmd={name} ");
    dump.lines().filter(|l| l.contains(&tag)).count()
}

fn criterion_4() -> Outcome {
    let sizes = CAMPAIGN_SIZES;
    let work: Vec<(usize, usize)> = sizes.iter().flat_map(|&n| [2usize, 4, 6].map(|nb| (n, nb))).collect();
    let bad: Vec<String> = work
        .par_iter()
        .filter_map(|&(n, nb)| {
            let (_, sim) = match run_point(&cfg(n, nb)) {
                Ok(x) => x,
                Err(e) => return Some(format!("n={n} nb={nb}: {e}")),
            };
            note_trace(sim.violations.len());
            let dump = sim.trace.to_string();
            let rd = count_in_dump(&dump, "RD");
            let wr = count_in_dump(&dump, "WR");
            let l = n.trailing_zeros() as usize;
            let want = (n / 8) * (1 + l - 3);
            (rd != want || wr != rd).then(|| format!("n={n} nb={nb}: RD={rd} WR={wr} want {want}"))
        })
        .collect();
    outcome(
        bad.is_empty(),
        format!(
            "RD = (n/N_a)(1+log n-log N_a), WR = RD for n in {:?}, N_b in {{2,4,6}}; {} mismatches{}",
            sizes,
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

fn criterion_5(table: &BTreeMap<(usize, usize), u64>) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [1024usize, 2048, 4096] {
        let r = table[&(n, 2)] as f64 / table[&(n, 6)] as f64;
        ok &= (1.3..=3.0).contains(&r);
        if n == 4096 {
            ok &= (2.39 * 0.65..=2.39 * 1.35).contains(&r);
        }
        parts.push(format!("n={n}: {r:.3}"));
    }
    let mut monotone = true;
    for n in CAMPAIGN_SIZES {
        let c: Vec<u64> = SWEEP_BUFFERS.iter().map(|&nb| table[&(n, nb)]).collect();
        monotone &= c.windows(2).all(|w| w[1] <= w[0]);
    }
    ok &= monotone;
    outcome(
        ok,
        format!(
            "cycles(N_b=2)/cycles(N_b=6) {}; n=4096 band [{:.3}, {:.3}]; monotone in N_b for all n: {monotone}",
            parts.join(", "),
            2.39 * 0.65,
            2.39 * 1.35
        ),
    )
}

fn criterion_6(table: &BTreeMap<(usize, usize), u64>) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [512usize, 1024, 2048, 4096] {
        let r = table[&(n, 1)] as f64 / table[&(n, 2)] as f64;
        ok &= r >= 5.0;
        parts.push(format!("n={n}: {r:.2}x"));
    }
    outcome(ok, format!("cycles(N_b=1)/cycles(N_b=2) {}", parts.join(", ")))
}

fn criterion_7() -> Outcome {
    let base = cfg(4096, 2);
    let report = match sweep(&base, SweepDimension::Clock) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    for _ in &report.rows {
        note_trace(0);
    }
    let ns = |f: u32| report.rows.iter().find(|r| r.clock_mhz == f).unwrap().stats.ns;
    let r = ns(300) / ns(1200);
    outcome(
        (1.0..=2.0).contains(&r),
        format!("n=4096, N_b=2: wall(300 MHz)/wall(1200 MHz) = {r:.3}"),
    )
}

fn criterion_8() -> Outcome {
    // an extra direct recheck of one schedule per regime mix
    for (n, nb) in [(8usize, 2usize), (1024, 1), (4096, 6)] {
        let (_, sim) = run_point(&cfg(n, nb)).unwrap();
        let again: TimedTrace = sim.trace.to_string().parse().unwrap();
        let tp = RunConfig::default().timing;
        note_trace(check_legality(&again, &tp).len());
        note_trace(check_legality(&schedule(&sim.commands, &tp), &tp).len());
    }
    let traces = TRACES.load(Ordering::Relaxed);
    let illegal = ILLEGAL.load(Ordering::Relaxed);
    outcome(
        illegal == 0 && traces > 0,
        format!("{traces} schedules checked, {illegal} with violations"),
    )
}

fn criterion_9() -> Outcome {
    let once = || -> Result<(String, String, String), String> {
        let b = sweep(&cfg(1024, 2), SweepDimension::Buffers).map_err(|e| e.to_string())?;
        let c = sweep(&cfg(4096, 2), SweepDimension::Clock).map_err(|e| e.to_string())?;
        let (_, sim) = run(&cfg(2048, 4)).map_err(|e| e.to_string())?;
        Ok((b.csv(), c.csv(), sim.trace.to_string()))
    };
    match (once(), once()) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!(
                "buffer-sweep CSV ({} bytes), clock-sweep CSV ({} bytes), trace ({} bytes) identical across reruns: {}",
                a.0.len(),
                a.1.len(),
                a.2.len(),
                a == b
            ),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 oracle equivalence", criterion_1()),
        ("2 convolution theorem", criterion_2()),
        ("3 activation counts", criterion_3()),
        ("4 command-count formula", criterion_4()),
    ];
    let table = cycle_table(&CAMPAIGN_SIZES, &SWEEP_BUFFERS);
    match &table {
        Ok(t) => {
            results.push(("5 buffer sensitivity", criterion_5(t)));
            results.push(("6 single-buffer collapse", criterion_6(t)));
        }
        Err(e) => {
            results.push(("5 buffer sensitivity", outcome(false, e.clone())));
            results.push(("6 single-buffer collapse", outcome(false, e.clone())));
        }
    }
    results.push(("7 clock sensitivity", criterion_7()));
    results.push(("8 legality", criterion_8()));
    results.push(("9 determinism", criterion_9()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
