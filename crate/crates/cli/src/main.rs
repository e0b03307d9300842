use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nttpim::device::format_listing;
use nttpim::harness::{
    campaign_cases, default_modulus, format_image, run, sweep, verify_campaign, ConfigError, Fault, HarnessError,
    Mode, RunConfig, SweepDimension, CAMPAIGN_MODULI, CAMPAIGN_SIZES, PRNG_ID, SWEEP_BUFFERS,
};
use nttpim::Direction;

/// Simulate NTT jobs on a DRAM bank with in-memory butterfly units.
#[derive(Parser, Debug)]
#[command(name = "nttpim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Map, schedule, execute and verify one job; print its stats row.
    Run(Common),
    /// Verification campaign over sizes, seeds and buffer counts.
    Verify(Common),
    /// Sweep N_b over {1,2,4,6}.
    SweepBuffers(Common),
    /// Sweep the clock over {300,600,900,1200} MHz at N_b = 2.
    SweepClock(Common),
    /// Write the timed command trace of one job.
    DumpTrace(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<u32>,
    /// Number of atom buffers.
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    clock_mhz: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per size in `verify`, counting up from `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Trace output path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Bank-image output path (one word per line).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Inverse transform (`verify`: forward then inverse round trip).
    #[arg(long)]
    inverse: bool,
    /// Disable software pipelining.
    #[arg(long)]
    no_pipelining: bool,
    /// Print the untimed command listing instead of the timed trace.
    #[arg(long)]
    untimed: bool,
    /// Flip a bit in the open row after this column write (0-based).
    #[arg(long)]
    fault_after_write: Option<usize>,
    #[arg(long, default_value_t = 0)]
    fault_lane: usize,
    #[arg(long, default_value_t = 0)]
    fault_bit: u32,
}

impl Common {
    fn config(&self, mode: Mode) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.mode = mode;
        if let Some(n) = self.n {
            c.n = n;
        }
        if self.q.is_some() {
            c.q = self.q;
        }
        if let Some(nb) = self.nb {
            c.num_buffers = nb;
        }
        if let Some(f) = self.clock_mhz {
            c.timing.clock_mhz = f;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.seeds {
            c.seeds = s;
        }
        if self.csv.is_some() {
            c.csv = self.csv.clone();
        }
        if self.trace.is_some() {
            c.trace = self.trace.clone();
        }
        if self.image.is_some() {
            c.image = self.image.clone();
        }
        if self.inverse {
            c.direction = Direction::Inverse;
        }
        if self.no_pipelining {
            c.pipelining = false;
        }
        Ok(c)
    }

    fn fault(&self) -> Option<Fault> {
        self.fault_after_write.map(|after_write| Fault {
            after_write,
            lane: self.fault_lane,
            bit: self.fault_bit,
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| {
        ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
        .into()
    })
}

fn cmd_run(c: &RunConfig) -> Result<(), HarnessError> {
    let (report, sim) = run(c)?;
    print!("{}", report.render());
    if let Some(p) = &c.csv {
        write_file(p, &report.csv())?;
    }
    if let Some(p) = &c.trace {
        write_file(p, &sim.trace.to_string())?;
    }
    if let Some(p) = &c.image {
        write_file(p, &format_image(&sim.image))?;
    }
    Ok(())
}

fn cmd_verify(c: &RunConfig, explicit_n: bool, explicit_nb: bool, fault: Option<Fault>) -> Result<bool, HarnessError> {
    let sizes: Vec<usize> = if explicit_n { vec![c.n] } else { CAMPAIGN_SIZES.to_vec() };
    let cases = match c.q {
        Some(q) => sizes.iter().map(|&n| (n, q)).collect(),
        None => {
            let mut cases = campaign_cases(&sizes, &CAMPAIGN_MODULI);
            if cases.is_empty() {
                for &n in &sizes {
                    cases.push((n, default_modulus(n)?));
                }
            }
            cases
        }
    };
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|i| c.seed + i).collect();
    let buffers: Vec<usize> = if explicit_nb { vec![c.num_buffers] } else { SWEEP_BUFFERS.to_vec() };
    let v = verify_campaign(c, &cases, &seeds, &buffers, fault)?;
    println!("# prng={PRNG_ID}");
    println!(
        "# direction={:?} sizes={:?} seeds={}..{} buffers={:?}",
        c.direction,
        sizes,
        c.seed,
        c.seed + c.seeds as u64,
        buffers
    );
    for f in &v.failures {
        println!(
            "FAIL n={} q={} nb={} seed={}: {}\n  reproduce: {}",
            f.n, f.q, f.nb, f.seed, f.detail, f.reproduce
        );
    }
    println!(
        "{}: {} cases, {} schedules checked, {} failures",
        if v.passed() { "PASS" } else { "FAIL" },
        v.cases,
        v.traces_checked,
        v.failures.len()
    );
    Ok(v.passed())
}

fn cmd_sweep(c: &RunConfig, dim: SweepDimension) -> Result<(), HarnessError> {
    let report = sweep(c, dim)?;
    print!("{}", report.render());
    if let Some(p) = &c.csv {
        write_file(p, &report.csv())?;
    }
    Ok(())
}

fn cmd_dump(c: &RunConfig, untimed: bool) -> Result<(), HarnessError> {
    let (_, sim) = run(c)?;
    let text = if untimed {
        format_listing(&sim.commands)
    } else {
        sim.trace.to_string()
    };
    match &c.trace {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, mode) = match &cli.command {
        Command::Run(a) => (a, Mode::Run),
        Command::Verify(a) => (a, Mode::Verify),
        Command::SweepBuffers(a) => (a, Mode::SweepBuffers),
        Command::SweepClock(a) => (a, Mode::SweepClock),
        Command::DumpTrace(a) => (a, Mode::DumpTrace),
    };
    let result = common.config(mode).map_err(HarnessError::from).and_then(|c| match mode {
        Mode::Run => cmd_run(&c).map(|_| true),
        Mode::Verify => cmd_verify(&c, common.n.is_some(), common.nb.is_some(), common.fault()),
        Mode::SweepBuffers => cmd_sweep(&c, SweepDimension::Buffers).map(|_| true),
        Mode::SweepClock => cmd_sweep(&c, SweepDimension::Clock).map(|_| true),
        Mode::DumpTrace => cmd_dump(&c, common.untimed).map(|_| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
