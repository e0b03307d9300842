//! Temporal model: issue/completion cycles under DRAM and compute-unit
//! constraints, an independent legality checker, and counters/energy.
//!
//! DRAM constraints are given in cycles of the reference clock and scale
//! with the operating clock so that their absolute time stays fixed;
//! compute-unit latencies and PARAM bus occupancy stay in cycles.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::device::{CommandKind, PimCommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingParams {
    pub cl: u32,
    pub t_ccd: u32,
    pub t_rp: u32,
    pub t_ras: u32,
    pub t_rcd: u32,
    pub t_wr: u32,
    pub t_c1: u32,
    pub t_c2: u32,
    /// Scalar butterfly latency (single-buffer baseline only).
    pub t_bu: u32,
    /// Bus cycles per 16-bit PARAM chunk.
    pub param_cycles: u32,
    /// Buffer-to-register move used by scalar loads/stores.
    pub reg_move: u32,
    pub reference_mhz: u32,
    pub clock_mhz: u32,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            cl: 14,
            t_ccd: 2,
            t_rp: 14,
            t_ras: 34,
            t_rcd: 14,
            t_wr: 16,
            t_c1: 15,
            t_c2: 10,
            t_bu: 3,
            param_cycles: 2,
            reg_move: 2,
            reference_mhz: 1200,
            clock_mhz: 1200,
        }
    }
}

/// Constraint values in cycles of the operating clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cycles {
    pub cl: u64,
    pub t_ccd: u64,
    pub t_rp: u64,
    pub t_ras: u64,
    pub t_rcd: u64,
    pub t_wr: u64,
    pub t_c1: u64,
    pub t_c2: u64,
    pub t_bu: u64,
    pub param: u64,
    pub reg_move: u64,
}

impl TimingParams {
    pub fn at_clock(self, clock_mhz: u32) -> Self {
        TimingParams { clock_mhz, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("cl", self.cl),
            ("t_ccd", self.t_ccd),
            ("t_rp", self.t_rp),
            ("t_ras", self.t_ras),
            ("t_rcd", self.t_rcd),
            ("t_wr", self.t_wr),
            ("t_c1", self.t_c1),
            ("t_c2", self.t_c2),
            ("t_bu", self.t_bu),
            ("param_cycles", self.param_cycles),
            ("reg_move", self.reg_move),
            ("reference_mhz", self.reference_mhz),
            ("clock_mhz", self.clock_mhz),
        ];
        match all.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("timing parameter {name} must be positive")),
            None => Ok(()),
        }
    }

    /// `ceil(reference_cycles · f / f_ref)`, i.e. the same nanoseconds at
    /// the operating clock.
    pub fn scale(&self, reference_cycles: u32) -> u64 {
        let num = reference_cycles as u64 * self.clock_mhz as u64;
        num.div_ceil(self.reference_mhz as u64)
    }

    pub fn cycles(&self) -> Cycles {
        Cycles {
            cl: self.scale(self.cl),
            t_ccd: self.scale(self.t_ccd),
            t_rp: self.scale(self.t_rp),
            t_ras: self.scale(self.t_ras),
            t_rcd: self.scale(self.t_rcd),
            t_wr: self.scale(self.t_wr),
            t_c1: self.t_c1 as u64,
            t_c2: self.t_c2 as u64,
            t_bu: self.t_bu as u64,
            param: self.param_cycles as u64,
            reg_move: self.reg_move as u64,
        }
    }

    /// Wall time of `cycles` at the operating clock.
    pub fn ns(&self, cycles: u64) -> f64 {
        cycles as f64 * 1000.0 / self.clock_mhz as f64
    }
}

/// Per-command energies in picojoules. The defaults are order-of-magnitude
/// placeholders, not measured values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTable {
    pub act: f64,
    pub rd: f64,
    pub wr: f64,
    pub c1: f64,
    pub c2: f64,
    pub bu: f64,
    pub param: f64,
    pub static_per_cycle: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            act: 1000.0,
            rd: 200.0,
            wr: 200.0,
            c1: 150.0,
            c2: 100.0,
            bu: 15.0,
            param: 5.0,
            static_per_cycle: 5.0,
        }
    }
}

impl EnergyTable {
    pub fn scaled(&self, k: f64) -> Self {
        EnergyTable {
            act: self.act * k,
            rd: self.rd * k,
            wr: self.wr * k,
            c1: self.c1 * k,
            c2: self.c2 * k,
            bu: self.bu * k,
            param: self.param * k,
            static_per_cycle: self.static_per_cycle * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimedCommand {
    pub issue: u64,
    pub cmd: PimCommand,
    pub done: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimedTrace {
    pub entries: Vec<TimedCommand>,
}

impl TimedTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Completion of the last-finishing command.
    pub fn total_cycles(&self) -> u64 {
        self.entries.iter().map(|e| e.done).max().unwrap_or(0)
    }

    pub fn commands(&self) -> impl Iterator<Item = &PimCommand> {
        self.entries.iter().map(|e| &e.cmd)
    }
}

/// `cycle=<u64> cmd=<NAME> args… done=<u64>`, one line per command.
impl fmt::Display for TimedTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "cycle={} cmd={} done={}", e.issue, e.cmd, e.done)?;
        }
        Ok(())
    }
}

impl FromStr for TimedTrace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let rest = line
                .strip_prefix("cycle=")
                .ok_or_else(|| format!("missing cycle in `{line}`"))?;
            let (issue, rest) = rest
                .split_once(' ')
                .ok_or_else(|| format!("truncated line `{line}`"))?;
            let (cmd, done) = rest
                .rsplit_once(" done=")
                .ok_or_else(|| format!("missing done in `{line}`"))?;
            entries.push(TimedCommand {
                issue: issue.parse().map_err(|_| format!("bad cycle in `{line}`"))?,
                cmd: cmd.parse().map_err(|e| format!("{e}"))?,
                done: done.parse().map_err(|_| format!("bad done in `{line}`"))?,
            });
        }
        Ok(TimedTrace { entries })
    }
}

/// Incremental in-order scheduler: each pushed command is issued at the
/// earliest cycle that satisfies every constraint against the commands
/// already issued.
#[derive(Debug, Clone)]
pub struct Scheduler {
    c: Cycles,
    bus_free: u64,
    last_act: Option<u64>,
    last_pre: Option<u64>,
    last_col: Option<u64>,
    last_write_data: Option<u64>,
    cu_free: u64,
    params_done: u64,
    /// When each buffer's latest data becomes valid.
    buf_ready: Vec<u64>,
    /// When the compute unit stops reading/writing each buffer.
    buf_busy: Vec<u64>,
    reg_ready: [u64; 2],
    reg_busy: [u64; 2],
    trace: TimedTrace,
}

fn after(t: Option<u64>, gap: u64) -> u64 {
    t.map_or(0, |x| x + gap)
}

impl Scheduler {
    pub fn new(tp: &TimingParams) -> Self {
        Scheduler {
            c: tp.cycles(),
            bus_free: 0,
            last_act: None,
            last_pre: None,
            last_col: None,
            last_write_data: None,
            cu_free: 0,
            params_done: 0,
            buf_ready: Vec::new(),
            buf_busy: Vec::new(),
            reg_ready: [0; 2],
            reg_busy: [0; 2],
            trace: TimedTrace::default(),
        }
    }

    fn buf_slot(&mut self, b: u8) -> usize {
        let b = b as usize;
        if b >= self.buf_ready.len() {
            self.buf_ready.resize(b + 1, 0);
            self.buf_busy.resize(b + 1, 0);
        }
        b
    }

    fn col_ready(&self) -> u64 {
        after(self.last_act, self.c.t_rcd).max(after(self.last_col, self.c.t_ccd))
    }

    /// Issues `cmd` and returns its timing.
    pub fn push(&mut self, cmd: PimCommand) -> TimedCommand {
        let c = self.c;
        let mut t = self.bus_free;
        let done;
        match cmd {
            PimCommand::Act { .. } => {
                t = t.max(after(self.last_pre, c.t_rp));
                done = t + c.t_rcd;
                self.last_act = Some(t);
            }
            PimCommand::Pre => {
                t = t
                    .max(after(self.last_act, c.t_ras))
                    .max(after(self.last_write_data, c.t_wr));
                done = t + c.t_rp;
                self.last_pre = Some(t);
            }
            PimCommand::Rd { buf, .. } => {
                let b = self.buf_slot(buf);
                t = t.max(self.col_ready()).max(self.buf_busy[b].saturating_sub(c.cl));
                done = t + c.cl;
                self.buf_ready[b] = done;
                self.last_col = Some(t);
            }
            PimCommand::Wr { buf, .. } => {
                let b = self.buf_slot(buf);
                t = t.max(self.col_ready()).max(self.buf_ready[b]);
                done = t + c.cl;
                self.last_col = Some(t);
                self.last_write_data = Some(self.last_write_data.unwrap_or(0).max(done));
            }
            PimCommand::C1 { buf, .. } => {
                let b = self.buf_slot(buf);
                t = t.max(self.cu_free).max(self.params_done).max(self.buf_ready[b]);
                done = t + c.t_c1;
                self.cu_free = done;
                self.buf_ready[b] = done;
                self.buf_busy[b] = done;
            }
            PimCommand::C2 { p, s, .. } => {
                let (pb, sb) = (self.buf_slot(p), self.buf_slot(s));
                t = t
                    .max(self.cu_free)
                    .max(self.params_done)
                    .max(self.buf_ready[pb])
                    .max(self.buf_ready[sb]);
                done = t + c.t_c2;
                self.cu_free = done;
                for b in [pb, sb] {
                    self.buf_ready[b] = done;
                    self.buf_busy[b] = done;
                }
            }
            PimCommand::Param { .. } => {
                done = t + c.param;
                self.params_done = done;
            }
            PimCommand::Ld { reg, .. } => {
                let b = self.buf_slot(0);
                let r = (reg as usize).min(1);
                t = t
                    .max(self.col_ready())
                    .max(self.buf_busy[b].saturating_sub(c.cl))
                    .max(self.reg_busy[r].saturating_sub(c.cl + c.reg_move));
                self.buf_ready[b] = t + c.cl;
                done = t + c.cl + c.reg_move;
                self.reg_ready[r] = done;
                self.last_col = Some(t);
            }
            PimCommand::St { reg, .. } => {
                let b = self.buf_slot(0);
                let r = (reg as usize).min(1);
                t = t
                    .max(self.col_ready())
                    .max(self.reg_ready[r])
                    .max(self.buf_ready[b].saturating_sub(c.reg_move));
                done = t + c.reg_move + c.cl;
                self.buf_ready[b] = t + c.reg_move;
                self.last_col = Some(t);
                self.last_write_data = Some(self.last_write_data.unwrap_or(0).max(done));
            }
            PimCommand::Bu { .. } => {
                t = t
                    .max(self.cu_free)
                    .max(self.reg_ready[0])
                    .max(self.reg_ready[1]);
                done = t + c.t_bu;
                self.cu_free = done;
                self.reg_ready = [done; 2];
                self.reg_busy = [done; 2];
            }
        }
        self.bus_free = t + if cmd.kind() == CommandKind::Param { c.param } else { 1 };
        let tc = TimedCommand { issue: t, cmd, done };
        self.trace.entries.push(tc);
        tc
    }

    pub fn trace(&self) -> &TimedTrace {
        &self.trace
    }

    pub fn into_trace(self) -> TimedTrace {
        self.trace
    }
}

/// Assigns the earliest legal issue cycle to every command, in order.
pub fn schedule(cmds: &[PimCommand], tp: &TimingParams) -> TimedTrace {
    let mut s = Scheduler::new(tp);
    for &c in cmds {
        s.push(c);
    }
    s.into_trace()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constraint {
    /// Two commands on the bus in overlapping slots.
    Bus,
    TRcd,
    TRp,
    TRas,
    TCcd,
    TWr,
    /// Operand data not yet valid in a buffer or register.
    DataNotReady,
    /// A read landed in a buffer/register the compute unit still uses.
    Overwrite,
    /// Compute issued while the CU is busy.
    CuBusy,
    /// Compute issued before preceding PARAM loads finished.
    ParamNotReady,
    /// Recorded completion disagrees with the command's latency.
    Completion,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::Bus => "bus conflict",
            Constraint::TRcd => "tRCD",
            Constraint::TRp => "tRP",
            Constraint::TRas => "tRAS",
            Constraint::TCcd => "tCCD",
            Constraint::TWr => "tWR",
            Constraint::DataNotReady => "data not ready",
            Constraint::Overwrite => "buffer overwrite",
            Constraint::CuBusy => "CU busy",
            Constraint::ParamNotReady => "PARAM not ready",
            Constraint::Completion => "completion",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub constraint: Constraint,
    /// Index of the offending command.
    pub at: usize,
    /// Index of the earlier command it conflicts with, if any.
    pub against: Option<usize>,
    /// Earliest cycle the constraint allows.
    pub required: u64,
    pub actual: u64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at #{}", self.constraint, self.at)?;
        if let Some(o) = self.against {
            write!(f, " against #{o}")?;
        }
        write!(f, ": needs {} got {}", self.required, self.actual)
    }
}

/// Buffers a command reads as operands.
fn reads_buffers(cmd: &PimCommand) -> Vec<u8> {
    match *cmd {
        PimCommand::Wr { buf, .. } | PimCommand::C1 { buf, .. } => vec![buf],
        PimCommand::C2 { p, s, .. } => vec![p, s],
        _ => vec![],
    }
}

/// Buffers whose contents a command replaces, and the cycle that happens.
fn buffer_writes(e: &TimedCommand, c: &Cycles) -> Vec<(u8, u64)> {
    match e.cmd {
        PimCommand::Rd { buf, .. } => vec![(buf, e.issue + c.cl)],
        PimCommand::Ld { .. } => vec![(0, e.issue + c.cl)],
        PimCommand::St { .. } => vec![(0, e.issue + c.reg_move)],
        PimCommand::C1 { buf, .. } => vec![(buf, e.done)],
        PimCommand::C2 { p, s, .. } => vec![(p, e.done), (s, e.done)],
        _ => vec![],
    }
}

fn latency(cmd: &PimCommand, c: &Cycles) -> u64 {
    match cmd {
        PimCommand::Act { .. } => c.t_rcd,
        PimCommand::Pre => c.t_rp,
        PimCommand::Rd { .. } | PimCommand::Wr { .. } => c.cl,
        PimCommand::C1 { .. } => c.t_c1,
        PimCommand::C2 { .. } => c.t_c2,
        PimCommand::Param { .. } => c.param,
        PimCommand::Ld { .. } | PimCommand::St { .. } => c.cl + c.reg_move,
        PimCommand::Bu { .. } => c.t_bu,
    }
}

/// Re-verifies a timed trace against the constraint set. Walks the trace
/// once, remembering which earlier command last touched each resource, and
/// recomputes every bound from the recorded issue cycles. Returns every
/// violation found; an empty list means the trace is legal.
pub fn check_legality(trace: &TimedTrace, tp: &TimingParams) -> Vec<Violation> {
    let c = tp.cycles();
    let es = &trace.entries;
    let mut out = Vec::new();
    let mut flag = |constraint, at, against: Option<usize>, required: u64, actual: u64| {
        let bad = if constraint == Constraint::Completion {
            actual != required
        } else {
            actual < required
        };
        if bad {
            out.push(Violation {
                constraint,
                at,
                against,
                required,
                actual,
            });
        }
    };

    let mut last_act: Option<usize> = None;
    let mut last_pre: Option<usize> = None;
    let mut last_col: Option<usize> = None;
    let mut last_param: Option<usize> = None;
    let mut last_compute: Option<usize> = None;
    let mut last_bu: Option<usize> = None;
    let mut prim_fill: Option<usize> = None;
    let mut writes_since_pre: Vec<usize> = Vec::new();
    // buffer -> (index, cycle) of the latest change of its contents
    let mut buf_writer: HashMap<u8, (usize, u64)> = HashMap::new();
    // buffer -> latest C1/C2 that used it
    let mut buf_user: HashMap<u8, usize> = HashMap::new();
    let mut reg_writer: [Option<usize>; 2] = [None; 2];

    for (i, e) in es.iter().enumerate() {
        let t = e.issue;
        flag(Constraint::Completion, i, None, t + latency(&e.cmd, &c), e.done);
        if i > 0 {
            let prev = &es[i - 1];
            let slot = if prev.cmd.kind() == CommandKind::Param { c.param } else { 1 };
            flag(Constraint::Bus, i, Some(i - 1), prev.issue + slot, t);
        }
        match e.cmd {
            PimCommand::Act { .. } => {
                if let Some(j) = last_pre {
                    flag(Constraint::TRp, i, Some(j), es[j].issue + c.t_rp, t);
                }
            }
            PimCommand::Pre => {
                if let Some(j) = last_act {
                    flag(Constraint::TRas, i, Some(j), es[j].issue + c.t_ras, t);
                }
                for &j in &writes_since_pre {
                    flag(Constraint::TWr, i, Some(j), es[j].issue + latency(&es[j].cmd, &c) + c.t_wr, t);
                }
            }
            _ => {}
        }
        if e.cmd.is_column() {
            if let Some(j) = last_act {
                flag(Constraint::TRcd, i, Some(j), es[j].issue + c.t_rcd, t);
            }
            if let Some(j) = last_col {
                flag(Constraint::TCcd, i, Some(j), es[j].issue + c.t_ccd, t);
            }
        }
        if e.cmd.is_compute() {
            if let Some(j) = last_compute {
                flag(Constraint::CuBusy, i, Some(j), es[j].issue + latency(&es[j].cmd, &c), t);
            }
            if matches!(e.cmd, PimCommand::C1 { .. } | PimCommand::C2 { .. }) {
                if let Some(j) = last_param {
                    flag(Constraint::ParamNotReady, i, Some(j), es[j].issue + c.param, t);
                }
            }
        }
        // operand buffers must hold their latest data
        for b in reads_buffers(&e.cmd) {
            if let Some(&(j, when)) = buf_writer.get(&b) {
                flag(Constraint::DataNotReady, i, Some(j), when, t);
            }
        }
        // a new fill must not land before earlier compute on that buffer ends
        let fill = match e.cmd {
            PimCommand::Rd { buf, .. } => Some((buf, t + c.cl)),
            PimCommand::Ld { .. } => Some((0, t + c.cl)),
            PimCommand::St { .. } => Some((0, t + c.reg_move)),
            _ => None,
        };
        if let Some((b, lands)) = fill {
            if let Some(&j) = buf_user.get(&b) {
                flag(Constraint::Overwrite, i, Some(j), es[j].issue + latency(&es[j].cmd, &c), lands);
            }
            if let (PimCommand::St { .. }, Some(j)) = (e.cmd, prim_fill) {
                // the lane write must follow the latest fill of the primary buffer
                flag(Constraint::Overwrite, i, Some(j), es[j].issue + c.cl, lands);
            }
        }
        // scalar operand registers
        let reg_reads: &[usize] = match e.cmd {
            PimCommand::Bu { .. } => &[0, 1],
            PimCommand::St { reg: 0, .. } => &[0],
            PimCommand::St { .. } => &[1],
            _ => &[],
        };
        for &r in reg_reads {
            if let Some(j) = reg_writer[r] {
                flag(Constraint::DataNotReady, i, Some(j), es[j].issue + latency(&es[j].cmd, &c), t);
            }
        }
        if let (PimCommand::Ld { .. }, Some(j)) = (e.cmd, last_bu) {
            flag(Constraint::Overwrite, i, Some(j), es[j].issue + c.t_bu, t + c.cl + c.reg_move);
        }

        match e.cmd {
            PimCommand::Act { .. } => last_act = Some(i),
            PimCommand::Pre => {
                last_pre = Some(i);
                writes_since_pre.clear();
            }
            PimCommand::Wr { .. } | PimCommand::St { .. } => writes_since_pre.push(i),
            PimCommand::Param { .. } => last_param = Some(i),
            _ => {}
        }
        if e.cmd.is_column() {
            last_col = Some(i);
        }
        if e.cmd.is_compute() {
            last_compute = Some(i);
        }
        for (b, when) in buffer_writes(e, &c) {
            buf_writer.insert(b, (i, when));
        }
        if matches!(e.cmd, PimCommand::C1 { .. } | PimCommand::C2 { .. }) {
            for b in reads_buffers(&e.cmd) {
                buf_user.insert(b, i);
            }
        }
        match e.cmd {
            PimCommand::Rd { buf: 0, .. } => prim_fill = Some(i),
            PimCommand::Ld { reg, .. } => {
                prim_fill = Some(i);
                reg_writer[(reg as usize).min(1)] = Some(i);
            }
            PimCommand::Bu { .. } => {
                reg_writer = [Some(i); 2];
                last_bu = Some(i);
            }
            _ => {}
        }
    }
    out
}

/// Counters and derived latency/energy for one timed trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimStats {
    pub cycles: u64,
    pub ns: f64,
    pub act: u64,
    pub pre: u64,
    /// Column reads, including scalar loads.
    pub rd: u64,
    /// Column writes, including scalar stores.
    pub wr: u64,
    pub c1: u64,
    pub c2: u64,
    pub bu: u64,
    pub param: u64,
    pub energy_nj: f64,
}

pub fn account(trace: &TimedTrace, tp: &TimingParams, e: &EnergyTable) -> SimStats {
    let mut s = SimStats {
        cycles: trace.total_cycles(),
        ..SimStats::default()
    };
    for cmd in trace.commands() {
        match cmd.kind() {
            CommandKind::Act => s.act += 1,
            CommandKind::Pre => s.pre += 1,
            CommandKind::Rd | CommandKind::Ld => s.rd += 1,
            CommandKind::Wr | CommandKind::St => s.wr += 1,
            CommandKind::C1 => s.c1 += 1,
            CommandKind::C2 => s.c2 += 1,
            CommandKind::Bu => s.bu += 1,
            CommandKind::Param => s.param += 1,
        }
    }
    s.ns = tp.ns(s.cycles);
    let pj = s.act as f64 * e.act
        + s.rd as f64 * e.rd
        + s.wr as f64 * e.wr
        + s.c1 as f64 * e.c1
        + s.c2 as f64 * e.c2
        + s.bu as f64 * e.bu
        + s.param as f64 * e.param
        + s.cycles as f64 * e.static_per_cycle;
    s.energy_nj = pj / 1000.0;
    s
}
