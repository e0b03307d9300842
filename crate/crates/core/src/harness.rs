//! End-to-end driver: configuration, runs on the simulated bank against the
//! reference oracles, verification campaigns and parameter sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::device::{BankGeometry, BankState, DeviceError, PimCommand};
use crate::mapper::{map_ntt, MapError, NttJob, TwiddleMode};
use crate::modmath::{is_ntt_friendly, is_prime, Modulus};
use crate::reference::{ntt_direct, ntt_iterative, Direction, NegacyclicTwist, NttPlan, PermutationSide, Poly};
use crate::timing::{account, check_legality, schedule, EnergyTable, SimStats, TimedTrace, TimingParams, Violation};

/// Identifier of the input generator, printed in every report header.
pub const PRNG_ID: &str = "ChaCha8 (rand_chacha 0.3, seed_from_u64), coefficients uniform in [0, q)";

pub const CSV_HEADER: &str = "n,q,nb,clock_mhz,cycles,ns,act,rd,wr,c1,c2,energy_nj";

pub const CAMPAIGN_SIZES: [usize; 10] = [8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096];
pub const CAMPAIGN_MODULI: [u32; 2] = [12289, 786433];
pub const SWEEP_BUFFERS: [usize; 4] = [1, 2, 4, 6];
pub const SWEEP_CLOCKS: [u32; 4] = [300, 600, 900, 1200];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot access {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Oracle mismatch, with the first divergent atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationFailed {
    pub oracle: &'static str,
    pub n: usize,
    pub q: u32,
    pub nb: usize,
    pub seed: u64,
    pub atom: usize,
    pub expected: Vec<u32>,
    pub got: Vec<u32>,
    pub reproduce: String,
}

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} mismatch (n={} q={} nb={} seed={}) at atom {}: expected {:?}, got {:?}",
            self.oracle, self.n, self.q, self.nb, self.seed, self.atom, self.expected, self.got
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("verification failed: {0}; reproduce: {}", .0.reproduce)]
    Verification(Box<VerificationFailed>),
    #[error("illegal schedule: {} violation(s), first: {}", .0.len(), .0[0])]
    Illegal(Vec<Violation>),
    #[error("device error at command {index}: {error}")]
    Device { index: usize, error: DeviceError },
    #[error("mapping error: {0}")]
    Map(MapError),
}

impl HarnessError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Run,
    Verify,
    SweepBuffers,
    SweepClock,
    DumpTrace,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Run => "run",
            Mode::Verify => "verify",
            Mode::SweepBuffers => "sweep-buffers",
            Mode::SweepClock => "sweep-clock",
            Mode::DumpTrace => "dump-trace",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "run" => Mode::Run,
            "verify" => Mode::Verify,
            "sweep-buffers" => Mode::SweepBuffers,
            "sweep-clock" => Mode::SweepClock,
            "dump-trace" => Mode::DumpTrace,
            _ => return Err(format!("unknown mode `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: BankGeometry,
    pub timing: TimingParams,
    pub energy: EnergyTable,
    pub n: usize,
    /// `None` picks the default modulus for `n`.
    pub q: Option<u32>,
    pub num_buffers: usize,
    pub pipelining: bool,
    pub twiddle_mode: TwiddleMode,
    pub base_row: u32,
    pub seed: u64,
    /// Seeds per size in verification campaigns, starting at `seed`.
    pub seeds: usize,
    pub direction: Direction,
    pub mode: Mode,
    pub csv: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: BankGeometry::default(),
            timing: TimingParams::default(),
            energy: EnergyTable::default(),
            n: 1024,
            q: None,
            num_buffers: 2,
            pipelining: true,
            twiddle_mode: TwiddleMode::TableFallbackAllowed,
            base_row: 0,
            seed: 0,
            seeds: 10,
            direction: Direction::Forward,
            mode: Mode::Run,
            csv: None,
            trace: None,
            image: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let g = &mut self.geometry;
        let t = &mut self.timing;
        let e = &mut self.energy;
        match key {
            "geometry.atom_words" => g.atom_words = parse_value(key, v)?,
            "geometry.columns_per_row" => g.columns_per_row = parse_value(key, v)?,
            "geometry.rows_per_bank" => g.rows_per_bank = parse_value(key, v)?,
            "timing.cl" => t.cl = parse_value(key, v)?,
            "timing.t_ccd" => t.t_ccd = parse_value(key, v)?,
            "timing.t_rp" => t.t_rp = parse_value(key, v)?,
            "timing.t_ras" => t.t_ras = parse_value(key, v)?,
            "timing.t_rcd" => t.t_rcd = parse_value(key, v)?,
            "timing.t_wr" => t.t_wr = parse_value(key, v)?,
            "timing.t_c1" => t.t_c1 = parse_value(key, v)?,
            "timing.t_c2" => t.t_c2 = parse_value(key, v)?,
            "timing.t_bu" => t.t_bu = parse_value(key, v)?,
            "timing.param_cycles" => t.param_cycles = parse_value(key, v)?,
            "timing.reg_move" => t.reg_move = parse_value(key, v)?,
            "timing.reference_mhz" => t.reference_mhz = parse_value(key, v)?,
            "timing.clock_mhz" => t.clock_mhz = parse_value(key, v)?,
            "energy.act" => e.act = parse_value(key, v)?,
            "energy.rd" => e.rd = parse_value(key, v)?,
            "energy.wr" => e.wr = parse_value(key, v)?,
            "energy.c1" => e.c1 = parse_value(key, v)?,
            "energy.c2" => e.c2 = parse_value(key, v)?,
            "energy.bu" => e.bu = parse_value(key, v)?,
            "energy.param" => e.param = parse_value(key, v)?,
            "energy.static_per_cycle" => e.static_per_cycle = parse_value(key, v)?,
            "job.n" => self.n = parse_value(key, v)?,
            "job.q" => {
                self.q = if v == "auto" { None } else { Some(parse_value(key, v)?) };
            }
            "job.nb" => self.num_buffers = parse_value(key, v)?,
            "job.pipelining" => self.pipelining = parse_bool(key, v)?,
            "job.twiddle_mode" => {
                self.twiddle_mode = match v {
                    "on-the-fly" => TwiddleMode::OnTheFly,
                    "table-fallback" => TwiddleMode::TableFallbackAllowed,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                        })
                    }
                }
            }
            "job.direction" => {
                self.direction = match v {
                    "forward" => Direction::Forward,
                    "inverse" => Direction::Inverse,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                        })
                    }
                }
            }
            "job.base_row" => self.base_row = parse_value(key, v)?,
            "job.seed" => self.seed = parse_value(key, v)?,
            "job.seeds" => self.seeds = parse_value(key, v)?,
            "job.mode" => self.mode = parse_value(key, v)?,
            "output.csv" => self.csv = Some(PathBuf::from(v)),
            "output.trace" => self.trace = Some(PathBuf::from(v)),
            "output.image" => self.image = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The modulus for this run: the configured one, or the default for `n`.
    pub fn modulus(&self) -> Result<Modulus, ConfigError> {
        let q = match self.q {
            Some(q) => q,
            None => default_modulus(self.n)?,
        };
        if !is_prime(q) {
            return Err(ConfigError::Invalid(format!("q = {q} is not an odd prime")));
        }
        let m = Modulus::new(q as u64).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(q as u64 - 1).is_multiple_of(self.n as u64) {
            return Err(ConfigError::Invalid(format!("q = {q} has no {}-th root of unity", self.n)));
        }
        Ok(m)
    }

    pub fn job(&self, m: Modulus) -> NttJob {
        NttJob {
            n: self.n,
            modulus: m,
            base_row: self.base_row,
            num_buffers: self.num_buffers,
            pipelining: self.pipelining,
            twiddle_mode: self.twiddle_mode,
            direction: self.direction,
        }
    }

    /// Checks every value before any simulation starts.
    pub fn validate(&self) -> Result<Modulus, ConfigError> {
        self.geometry.validate().map_err(ConfigError::Invalid)?;
        self.timing.validate().map_err(ConfigError::Invalid)?;
        if self.seeds == 0 {
            return Err(ConfigError::Invalid("seed count must be positive".into()));
        }
        let m = self.modulus()?;
        self.job(m)
            .validate(&self.geometry)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(m)
    }

    pub fn plan(&self, m: Modulus, direction: Direction) -> Result<NttPlan, ConfigError> {
        let plan = match direction {
            Direction::Forward => NttPlan::forward(self.n, m),
            Direction::Inverse => NttPlan::inverse(self.n, m),
        };
        plan.map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Command line that reruns this configuration's single case.
    pub fn reproduce(&self, q: u32) -> String {
        let mut s = format!(
            "nttpim verify --n {} --q {} --nb {} --clock-mhz {} --seed {} --seeds 1",
            self.n, q, self.num_buffers, self.timing.clock_mhz, self.seed
        );
        if self.direction == Direction::Inverse {
            s.push_str(" --inverse");
        }
        s
    }
}

/// 12289 where it supports the negacyclic transform of size `n`, else
/// 786433, else the smallest such prime above 2^13.
pub fn default_modulus(n: usize) -> Result<u32, ConfigError> {
    if !n.is_power_of_two() {
        return Err(ConfigError::Invalid(format!("n = {n} is not a power of two")));
    }
    for q in [12289u32, 786433] {
        if is_ntt_friendly(q as u64, n as u64) {
            return Ok(q);
        }
    }
    let step = 2 * n as u64;
    let mut q = (1u64 << 13).div_ceil(step) * step + 1;
    while q < 1 << 31 {
        if is_ntt_friendly(q, n as u64) {
            return Ok(q as u32);
        }
        q += step;
    }
    Err(ConfigError::Invalid(format!("no NTT-friendly prime below 2^31 for n = {n}")))
}

pub fn random_poly(n: usize, q: u32, seed: u64) -> Poly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Poly((0..n).map(|_| rng.gen_range(0..q)).collect())
}

/// Bit flip applied to the open row right after the `after_write`-th
/// (0-based) column write or scalar store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub after_write: usize,
    pub lane: usize,
    pub bit: u32,
}

/// Everything one mapped job produced.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub commands: Vec<PimCommand>,
    pub trace: TimedTrace,
    pub stats: SimStats,
    pub violations: Vec<Violation>,
    /// Raw words of the job region after execution (Montgomery form).
    pub image: Vec<u32>,
    /// The job region converted back to ordinary residues.
    pub memory: Poly,
}

/// Maps, schedules, checks and executes one job on a fresh bank holding
/// `memory_in` at the job address.
pub fn simulate(cfg: &RunConfig, plan: &NttPlan, memory_in: &Poly, fault: Option<Fault>) -> Result<Simulation, HarnessError> {
    let m = *plan.modulus();
    let job = NttJob {
        direction: plan.direction(),
        ..cfg.job(m)
    };
    let commands = map_ntt(&job, &cfg.geometry, plan).map_err(HarnessError::Map)?;
    let trace = schedule(&commands, &cfg.timing);
    let violations = check_legality(&trace, &cfg.timing);
    let stats = account(&trace, &cfg.timing, &cfg.energy);

    let mut bank = BankState::new(cfg.geometry, cfg.num_buffers);
    let words: Vec<u32> = memory_in.0.iter().map(|&x| m.to_mont(x)).collect();
    bank.host_store(cfg.base_row, &words);
    let mut writes = 0;
    for (index, cmd) in commands.iter().enumerate() {
        bank.exec(cmd).map_err(|error| HarnessError::Device { index, error })?;
        if let PimCommand::Wr { col, .. } | PimCommand::St { col, .. } = *cmd {
            if let Some(f) = fault.filter(|f| f.after_write == writes) {
                bank.flip_open_row_bit(col, f.lane, f.bit);
            }
            writes += 1;
        }
    }
    let image = bank.host_load(cfg.base_row, cfg.n);
    let memory = Poly(image.iter().map(|&x| m.from_mont(x)).collect());
    Ok(Simulation {
        commands,
        trace,
        stats,
        violations,
        image,
        memory,
    })
}

/// Transform of `a` on the simulated bank, host permutation and inverse
/// scaling included. Returns the natural-order result.
pub fn pim_transform(cfg: &RunConfig, plan: &NttPlan, a: &Poly, fault: Option<Fault>) -> Result<(Poly, Simulation), HarnessError> {
    let m = plan.modulus();
    let memory_in = match plan.permutation_side() {
        PermutationSide::Input => plan.permute(a),
        PermutationSide::Output => a.clone(),
    };
    let sim = simulate(cfg, plan, &memory_in, fault)?;
    let mut out = match plan.permutation_side() {
        PermutationSide::Input => sim.memory.clone(),
        PermutationSide::Output => plan.permute(&sim.memory),
    };
    if plan.direction() == Direction::Inverse {
        for x in &mut out.0 {
            *x = m.mul(*x, plan.n_inv());
        }
    }
    Ok((out, sim))
}

fn first_divergence(expected: &Poly, got: &Poly, na: usize) -> Option<(usize, Vec<u32>, Vec<u32>)> {
    let i = expected.0.iter().zip(&got.0).position(|(a, b)| a != b)?;
    let atom = i / na;
    let r = atom * na..((atom + 1) * na).min(expected.len());
    Some((atom, expected.0[r.clone()].to_vec(), got.0[r].to_vec()))
}

/// Host-side DFT oracle for `plan`: the direct sum with the plan's root,
/// scaled by `n⁻¹` for inverse plans.
pub fn dft_oracle(plan: &NttPlan, a: &Poly) -> Poly {
    let m = plan.modulus();
    let mut out = ntt_direct(a, m, plan.root()).expect("plan root is valid");
    if plan.direction() == Direction::Inverse {
        for x in &mut out.0 {
            *x = m.mul(*x, plan.n_inv());
        }
    }
    out
}

/// Checks one simulated transform against both oracles and the legality
/// checker.
fn check_case(
    cfg: &RunConfig,
    plan: &NttPlan,
    a: &Poly,
    iterative: &Poly,
    dft: &Poly,
    fault: Option<Fault>,
) -> Result<Simulation, HarnessError> {
    let (out, sim) = pim_transform(cfg, plan, a, fault)?;
    let q = plan.modulus().value();
    let fail = |oracle, (atom, expected, got)| {
        HarnessError::Verification(Box::new(VerificationFailed {
            oracle,
            n: cfg.n,
            q,
            nb: cfg.num_buffers,
            seed: cfg.seed,
            atom,
            expected,
            got,
            reproduce: cfg.reproduce(q),
        }))
    };
    let na = cfg.geometry.atom_words;
    if let Some(d) = first_divergence(iterative, &sim.memory, na) {
        return Err(fail("iterative network", d));
    }
    if let Some(d) = first_divergence(dft, &out, na) {
        return Err(fail("DFT sum", d));
    }
    if !sim.violations.is_empty() {
        return Err(HarnessError::Illegal(sim.violations.clone()));
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub n: usize,
    pub q: u32,
    pub nb: usize,
    pub clock_mhz: u32,
    pub seed: u64,
    pub stats: SimStats,
}

impl StatsRow {
    pub fn csv_line(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n, self.q, self.nb, self.clock_mhz, s.cycles, s.ns, s.act, s.rd, s.wr, s.c1, s.c2, s.energy_nj
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<StatsRow>,
    pub verdicts: Vec<String>,
    pub ratios: Vec<(String, f64)>,
}

impl Report {
    fn new(cfg: &RunConfig, q: u32) -> Self {
        Report {
            header: vec![
                format!("mode={} n={} q={} seed={}", cfg.mode, cfg.n, q, cfg.seed),
                format!("prng={PRNG_ID}"),
            ],
            ..Report::default()
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            s.push_str(&format!("# {h}\n"));
        }
        s.push_str(&self.csv());
        for v in &self.verdicts {
            s.push_str(&format!("{v}\n"));
        }
        for (name, x) in &self.ratios {
            s.push_str(&format!("{name} = {x:.4}\n"));
        }
        s
    }
}

/// One verified simulation of `cfg` on its seeded random input.
pub fn run_point(cfg: &RunConfig) -> Result<(StatsRow, Simulation), HarnessError> {
    let m = cfg.validate()?;
    let plan = cfg.plan(m, cfg.direction)?;
    let a = random_poly(cfg.n, m.value(), cfg.seed);
    let memory_in = match plan.permutation_side() {
        PermutationSide::Input => plan.permute(&a),
        PermutationSide::Output => a.clone(),
    };
    let iterative = ntt_iterative(&memory_in, &plan).expect("sizes match");
    let dft = dft_oracle(&plan, &a);
    let sim = check_case(cfg, &plan, &a, &iterative, &dft, None)?;
    let row = StatsRow {
        n: cfg.n,
        q: m.value(),
        nb: cfg.num_buffers,
        clock_mhz: cfg.timing.clock_mhz,
        seed: cfg.seed,
        stats: sim.stats,
    };
    Ok((row, sim))
}

/// Maps, schedules, executes and verifies one configuration.
pub fn run(cfg: &RunConfig) -> Result<(Report, Simulation), HarnessError> {
    let m = cfg.validate()?;
    let (row, sim) = run_point(cfg)?;
    let mut report = Report::new(cfg, m.value());
    report.verdicts.push(format!(
        "verified: bank image = iterative network, result = DFT sum, {} commands legal",
        sim.trace.len()
    ));
    report.rows.push(row);
    Ok((report, sim))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub n: usize,
    pub q: u32,
    pub nb: usize,
    pub seed: u64,
    pub detail: String,
    pub reproduce: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignVerdict {
    pub cases: usize,
    pub traces_checked: usize,
    pub failures: Vec<CaseFailure>,
}

impl CampaignVerdict {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `(n, q)` pairs of the campaign: every size with every modulus in
/// `moduli` that supports it.
pub fn campaign_cases(sizes: &[usize], moduli: &[u32]) -> Vec<(usize, u32)> {
    sizes
        .iter()
        .flat_map(|&n| {
            moduli
                .iter()
                .filter(move |&&q| is_ntt_friendly(q as u64, n as u64))
                .map(move |&q| (n, q))
        })
        .collect()
}

/// Runs every `(n, q) × seed × N_b` combination against the oracles. The
/// DFT oracle is computed once per `(n, q, seed)`. With an inverse base
/// configuration each case is a forward then inverse round trip that must
/// return the input. `fault` is applied to every forward run.
pub fn verify_campaign(
    base: &RunConfig,
    cases: &[(usize, u32)],
    seeds: &[u64],
    buffers: &[usize],
    fault: Option<Fault>,
) -> Result<CampaignVerdict, ConfigError> {
    let mut work = Vec::new();
    for &(n, q) in cases {
        for &seed in seeds {
            let cfg = RunConfig {
                n,
                q: Some(q),
                seed,
                ..base.clone()
            };
            for &nb in buffers {
                RunConfig { num_buffers: nb, ..cfg.clone() }.validate()?;
            }
            work.push(cfg);
        }
    }
    let results: Vec<(usize, Vec<CaseFailure>)> = work
        .par_iter()
        .map(|cfg| campaign_case(cfg, buffers, fault))
        .collect();
    let mut verdict = CampaignVerdict::default();
    for (checked, failures) in results {
        verdict.cases += buffers.len();
        verdict.traces_checked += checked;
        verdict.failures.extend(failures);
    }
    Ok(verdict)
}

fn campaign_case(cfg: &RunConfig, buffers: &[usize], fault: Option<Fault>) -> (usize, Vec<CaseFailure>) {
    let m = cfg.modulus().expect("validated");
    let q = m.value();
    let fwd = cfg.plan(m, Direction::Forward).expect("validated");
    let inverse = cfg.direction == Direction::Inverse;
    let inv = inverse.then(|| cfg.plan(m, Direction::Inverse).expect("validated"));
    let a = random_poly(cfg.n, q, cfg.seed);
    let memory_in = match fwd.permutation_side() {
        PermutationSide::Input => fwd.permute(&a),
        PermutationSide::Output => a.clone(),
    };
    let iterative = ntt_iterative(&memory_in, &fwd).expect("sizes match");
    let dft = dft_oracle(&fwd, &a);
    let mut checked = 0;
    let mut failures = Vec::new();
    for &nb in buffers {
        let c = RunConfig {
            num_buffers: nb,
            direction: Direction::Forward,
            ..cfg.clone()
        };
        let mut reproduce = RunConfig { direction: cfg.direction, ..c.clone() }.reproduce(q);
        if let Some(f) = fault {
            reproduce.push_str(&format!(" --fault-after-write {} --fault-lane {} --fault-bit {}", f.after_write, f.lane, f.bit));
        }
        let mut fail = |detail: String| {
            failures.push(CaseFailure {
                n: cfg.n,
                q,
                nb,
                seed: cfg.seed,
                detail,
                reproduce: reproduce.clone(),
            })
        };
        let out = match check_case(&c, &fwd, &a, &iterative, &dft, fault) {
            Ok(sim) => {
                checked += 1;
                pim_result(&fwd, sim)
            }
            Err(HarnessError::Verification(v)) => {
                fail(v.to_string());
                continue;
            }
            Err(e) => {
                fail(e.to_string());
                continue;
            }
        };
        if let Some(inv) = &inv {
            let c = RunConfig {
                direction: Direction::Inverse,
                ..c
            };
            match pim_transform(&c, inv, &out, None) {
                Ok((back, sim)) => {
                    checked += 1;
                    if !sim.violations.is_empty() {
                        fail(HarnessError::Illegal(sim.violations).to_string());
                    } else if let Some((atom, expected, got)) = first_divergence(&a, &back, c.geometry.atom_words) {
                        fail(format!(
                            "inverse round trip differs at atom {atom}: expected {expected:?}, got {got:?}"
                        ));
                    }
                }
                Err(e) => fail(e.to_string()),
            }
        }
    }
    (checked, failures)
}

fn pim_result(plan: &NttPlan, sim: Simulation) -> Poly {
    match plan.permutation_side() {
        PermutationSide::Input => sim.memory,
        PermutationSide::Output => plan.permute(&sim.memory),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepDimension {
    Buffers,
    Clock,
}

/// Verified runs over `N_b ∈ {1,2,4,6}` at the configured clock, or over
/// `{300,600,900,1200}` MHz at `N_b = 2`. Points run in parallel; rows keep
/// sweep order.
pub fn sweep(base: &RunConfig, dim: SweepDimension) -> Result<Report, HarnessError> {
    let m = base.validate()?;
    let points: Vec<RunConfig> = match dim {
        SweepDimension::Buffers => SWEEP_BUFFERS
            .iter()
            .map(|&nb| RunConfig {
                num_buffers: nb,
                ..base.clone()
            })
            .collect(),
        SweepDimension::Clock => SWEEP_CLOCKS
            .iter()
            .map(|&f| RunConfig {
                num_buffers: 2,
                timing: base.timing.at_clock(f),
                ..base.clone()
            })
            .collect(),
    };
    let rows = points
        .par_iter()
        .map(|c| run_point(c).map(|(row, _)| row))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = Report::new(base, m.value());
    match dim {
        SweepDimension::Buffers => {
            let at = |nb| rows.iter().find(|r| r.nb == nb).map(|r| r.stats.cycles as f64);
            for r in &rows {
                if let Some(c2) = at(2) {
                    report
                        .ratios
                        .push((format!("cycles(nb=2)/cycles(nb={})", r.nb), c2 / r.stats.cycles as f64));
                }
            }
        }
        SweepDimension::Clock => {
            let fast = rows.iter().find(|r| r.clock_mhz == 1200).map(|r| r.stats.ns);
            for r in &rows {
                if let Some(f) = fast {
                    report
                        .ratios
                        .push((format!("ns({} MHz)/ns(1200 MHz)", r.clock_mhz), r.stats.ns / f));
                }
            }
        }
    }
    report.verdicts.push(format!("verified {} sweep points", rows.len()));
    report.rows = rows;
    Ok(report)
}

/// `a·b mod (xⁿ+1)` with all three transforms run on the simulated bank.
/// Returns the product and every simulation for inspection.
pub fn polymul_on_pim(cfg: &RunConfig, a: &Poly, b: &Poly) -> Result<(Poly, Vec<Simulation>), HarnessError> {
    let m = cfg.validate()?;
    if !is_ntt_friendly(m.value() as u64, cfg.n as u64) {
        return Err(ConfigError::Invalid(format!("q = {} does not support negacyclic size {}", m.value(), cfg.n)).into());
    }
    let fwd = cfg.plan(m, Direction::Forward)?;
    let inv = cfg.plan(m, Direction::Inverse)?;
    let tw = NegacyclicTwist::for_plan(&fwd).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let inv_cfg = RunConfig {
        direction: Direction::Inverse,
        ..cfg.clone()
    };
    let (fa, sa) = pim_transform(cfg, &fwd, &tw.twist(a), None)?;
    let (fb, sb) = pim_transform(cfg, &fwd, &tw.twist(b), None)?;
    let prod = Poly(fa.0.iter().zip(&fb.0).map(|(&x, &y)| m.mul(x, y)).collect());
    let (c, sc) = pim_transform(&inv_cfg, &inv, &prod, None)?;
    Ok((tw.untwist(&c), vec![sa, sb, sc]))
}

/// One word per line, row-major, decimal.
pub fn format_image(words: &[u32]) -> String {
    let mut s = String::with_capacity(words.len() * 8);
    for w in words {
        s.push_str(&w.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_moduli() {
        assert_eq!(default_modulus(8).unwrap(), 12289);
        assert_eq!(default_modulus(2048).unwrap(), 12289);
        assert_eq!(default_modulus(4096).unwrap(), 786433);
        let q = default_modulus(1 << 20).unwrap();
        assert!(is_ntt_friendly(q as u64, 1 << 20));
        assert!(default_modulus(12).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = "# sample\njob.n = 256\njob.q = 7681 # inline\n\ngeometry.rows_per_bank=64\ntiming.clock_mhz = 600\njob.pipelining = off\njob.direction = inverse\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.n, 256);
        assert_eq!(c.q, Some(7681));
        assert_eq!(c.geometry.rows_per_bank, 64);
        assert_eq!(c.timing.clock_mhz, 600);
        assert!(!c.pipelining);
        assert_eq!(c.direction, Direction::Inverse);
        assert!(matches!(RunConfig::parse("job.x = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("job.n 5"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("job.nb = two"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("job.twiddle_mode = x"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn invalid_configs() {
        let even = RunConfig {
            q: Some(12288),
            ..RunConfig::default()
        };
        assert!(matches!(run(&even), Err(HarnessError::Config(_))));
        assert_eq!(run(&even).unwrap_err().exit_code(), 2);
        let bad_n = RunConfig {
            n: 100,
            ..RunConfig::default()
        };
        assert!(run(&bad_n).is_err());
        let big = RunConfig {
            n: 4096,
            geometry: BankGeometry {
                rows_per_bank: 8,
                ..BankGeometry::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(run(&big), Err(HarnessError::Config(_))));
    }

    #[test]
    fn run_counts_match_formulas() {
        let cfg = RunConfig {
            n: 1024,
            q: Some(12289),
            ..RunConfig::default()
        };
        let (report, _) = run(&cfg).unwrap();
        let s = report.rows[0].stats;
        assert_eq!(s.rd, 128 * 8);
        assert_eq!(s.wr, s.rd);
        assert_eq!(s.c1, 128);
        assert_eq!(s.c2, 64 * 7);
        assert_eq!(s.act, 4 + 2 * 130);
        assert_eq!(s.ns, s.cycles as f64 * 1000.0 / 1200.0);
    }

    #[test]
    fn smallest_run() {
        let cfg = RunConfig {
            n: 8,
            ..RunConfig::default()
        };
        let (report, sim) = run(&cfg).unwrap();
        assert_eq!(report.rows[0].stats.act, 1);
        assert!(sim.violations.is_empty());
        assert!(report.render().contains(PRNG_ID));
    }

    #[test]
    fn fault_is_detected_with_location() {
        let cfg = RunConfig {
            n: 64,
            ..RunConfig::default()
        };
        let fault = Fault {
            after_write: 3,
            lane: 2,
            bit: 0,
        };
        let v = verify_campaign(&cfg, &[(64, 12289)], &[1], &[2], Some(fault)).unwrap();
        assert!(!v.passed());
        assert!(v.failures[0].detail.contains("atom"));
        assert!(v.failures[0].reproduce.contains("--fault-after-write 3"));
    }

    #[test]
    fn small_campaign_with_round_trip() {
        let cfg = RunConfig {
            direction: Direction::Inverse,
            ..RunConfig::default()
        };
        let cases = campaign_cases(&[8, 64, 512], &CAMPAIGN_MODULI);
        assert_eq!(cases.len(), 6);
        let v = verify_campaign(&cfg, &cases, &[0, 1], &SWEEP_BUFFERS, None).unwrap();
        assert!(v.passed(), "{:?}", v.failures);
        assert_eq!(v.cases, 6 * 2 * 4);
        assert_eq!(v.traces_checked, 2 * v.cases);
    }

    #[test]
    fn polymul_small() {
        let cfg = RunConfig {
            n: 16,
            q: Some(12289),
            ..RunConfig::default()
        };
        let m = Modulus::new(12289).unwrap();
        let a = random_poly(16, 12289, 1);
        let b = random_poly(16, 12289, 2);
        let (c, sims) = polymul_on_pim(&cfg, &a, &b).unwrap();
        assert_eq!(c, crate::reference::polymul_schoolbook(&a, &b, &m).unwrap());
        assert_eq!(sims.len(), 3);
    }

    #[test]
    fn sweep_rows_in_order_and_deterministic() {
        let cfg = RunConfig {
            n: 256,
            ..RunConfig::default()
        };
        let r = sweep(&cfg, SweepDimension::Buffers).unwrap();
        let nbs: Vec<_> = r.rows.iter().map(|x| x.nb).collect();
        assert_eq!(nbs, SWEEP_BUFFERS);
        assert_eq!(r.render(), sweep(&cfg, SweepDimension::Buffers).unwrap().render());
        let c = sweep(&cfg, SweepDimension::Clock).unwrap();
        let clocks: Vec<_> = c.rows.iter().map(|x| x.clock_mhz).collect();
        assert_eq!(clocks, SWEEP_CLOCKS);
        assert!(c.rows.iter().all(|x| x.nb == 2));
    }

    #[test]
    fn image_format() {
        assert_eq!(format_image(&[1, 20, 300]), "1\n20\n300\n");
    }
}
