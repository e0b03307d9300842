//! Compiles an NTT job into a bank command sequence.
//!
//! The network's stages fall into three regimes by butterfly distance `d`:
//! intra-atom (`d < N_a`, one C1 per atom), intra-row (`N_a ≤ d < R`, C2 on
//! atom pairs of the open row) and inter-row (`d ≥ R`, C2 on atom pairs
//! from two rows). The first two regimes run per row block under a single
//! activation; inter-row stages follow stage by stage.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

use crate::device::{modulus_params, param_load, BankGeometry, ParamReg, PimCommand, TwiddleSource};
use crate::modmath::Modulus;
use crate::reference::{Direction, NttPlan};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MapError {
    #[error("job needs rows {first}..{end} but the bank has {rows}")]
    JobTooLarge { first: u32, end: u64, rows: usize },
    #[error("plan does not match job: {0}")]
    PlanMismatch(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("twiddles at {0:?} are not expressible by the compute unit")]
    TwiddleNotExpressible(TwiddleSite),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TwiddleMode {
    /// Only on-the-fly (geometric) twiddle generation.
    OnTheFly,
    /// Fall back to the twiddle register file where the recurrence cannot
    /// reproduce the plan.
    TableFallbackAllowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NttJob {
    pub n: usize,
    pub modulus: Modulus,
    /// First row of the polynomial; data starts at column 0.
    pub base_row: u32,
    pub num_buffers: usize,
    pub pipelining: bool,
    pub twiddle_mode: TwiddleMode,
    pub direction: Direction,
}

impl NttJob {
    pub fn new(n: usize, modulus: Modulus, num_buffers: usize) -> Self {
        NttJob {
            n,
            modulus,
            base_row: 0,
            num_buffers,
            pipelining: true,
            twiddle_mode: TwiddleMode::TableFallbackAllowed,
            direction: Direction::Forward,
        }
    }

    pub fn validate(&self, g: &BankGeometry) -> Result<(), MapError> {
        g.validate().map_err(MapError::InvalidJob)?;
        if !self.n.is_power_of_two() || self.n < g.atom_words {
            return Err(MapError::InvalidJob(format!(
                "n = {} must be a power of two ≥ {}",
                self.n, g.atom_words
            )));
        }
        if self.num_buffers == 0 || self.num_buffers > 256 {
            return Err(MapError::InvalidJob(format!(
                "buffer count {} outside 1..=256",
                self.num_buffers
            )));
        }
        let rows = self.rows(g) as u64;
        let end = self.base_row as u64 + rows;
        if end > g.rows_per_bank as u64 {
            return Err(MapError::JobTooLarge {
                first: self.base_row,
                end,
                rows: g.rows_per_bank,
            });
        }
        Ok(())
    }

    /// Rows occupied by the polynomial.
    pub fn rows(&self, g: &BankGeometry) -> usize {
        self.n.div_ceil(g.row_words())
    }

    /// Row and column of word `i` of the polynomial.
    pub fn locate(&self, g: &BankGeometry, i: usize) -> (u32, u32) {
        let r = g.row_words();
        (
            self.base_row + (i / r) as u32,
            ((i % r) / g.atom_words) as u32,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    IntraAtom,
    IntraRow,
    InterRow,
}

/// Stage classification for one `(n, geometry)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimePlan {
    pub log_n: u32,
    pub log_atom: u32,
    pub log_row: u32,
}

impl RegimePlan {
    pub fn new(n: usize, g: &BankGeometry) -> Self {
        RegimePlan {
            log_n: n.trailing_zeros(),
            log_atom: g.atom_words.trailing_zeros(),
            log_row: g.row_words().trailing_zeros(),
        }
    }

    /// Butterfly distance in words of 1-based stage `s`.
    pub fn distance(&self, s: u32) -> usize {
        1 << (s - 1)
    }

    pub fn regime(&self, s: u32) -> Regime {
        if s <= self.log_atom {
            Regime::IntraAtom
        } else if s <= self.log_row {
            Regime::IntraRow
        } else {
            Regime::InterRow
        }
    }

    pub fn intra_atom_stages(&self) -> std::ops::RangeInclusive<u32> {
        1..=self.log_atom.min(self.log_n)
    }

    pub fn intra_row_stages(&self) -> std::ops::RangeInclusive<u32> {
        self.log_atom + 1..=self.log_row.min(self.log_n)
    }

    pub fn inter_row_stages(&self) -> std::ops::RangeInclusive<u32> {
        self.log_row + 1..=self.log_n
    }
}

/// How the atom buffers are shared among in-flight work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferAllocation {
    pub num_buffers: usize,
    pub pipelining: bool,
}

impl BufferAllocation {
    /// Atoms in flight during the intra-atom regime.
    pub fn atom_slots(&self) -> usize {
        if self.pipelining {
            self.num_buffers
        } else {
            1
        }
    }

    /// Atom pairs in flight in the inter-atom regimes.
    pub fn pair_slots(&self) -> usize {
        if self.pipelining {
            (self.num_buffers / 2).max(1)
        } else {
            1
        }
    }

    pub fn atom_buffer(&self, slot: usize) -> u8 {
        slot as u8
    }

    /// Primary and secondary buffer of pair slot `slot`.
    pub fn pair_buffers(&self, slot: usize) -> (u8, u8) {
        (2 * slot as u8, 2 * slot as u8 + 1)
    }
}

/// Command whose twiddles are being assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TwiddleSite {
    /// C1 on the atom with this index (in atoms from the polynomial start).
    Atom { atom: usize },
    /// C2 of `stage` whose first primary lane is word `lower`.
    Pair { stage: u32, lower: usize },
}

/// Twiddle delivery for one command. Values are in Montgomery form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TwiddleAssignment {
    Geometric { omega0: u32, r_omega: u32 },
    TableFallback(Vec<u32>),
}

/// Fits `seq[i] = ω0·r^i`. Returns `(ω0, r)` in the plain domain.
pub fn fit_geometric(seq: &[u32], m: &Modulus) -> Option<(u32, u32)> {
    let (&w0, rest) = seq.split_first()?;
    if rest.is_empty() {
        return Some((w0, 1));
    }
    if w0 == 0 {
        return seq.iter().all(|&x| x == 0).then_some((0, 1));
    }
    let r = m.mul(rest[0], m.inv(w0).ok()?);
    let mut w = w0;
    for &x in seq {
        if x != w {
            return None;
        }
        w = m.mul(w, r);
    }
    Some((w0, r))
}

/// Per-butterfly twiddles a C1 on `atom` must apply: `out[s-1][i]` for the
/// `i`-th butterfly of in-atom stage `s`.
fn c1_requirements(plan: &NttPlan, na: usize, atom: usize) -> Vec<Vec<u32>> {
    let base = atom * na;
    let mut out = Vec::new();
    let mut dist = 1;
    let mut s = 1;
    while dist < na {
        let mut v = Vec::with_capacity(na / 2);
        for blk in (0..na).step_by(2 * dist) {
            for j in 0..dist {
                v.push(plan.twiddle_at(s, base + blk + j));
            }
        }
        out.push(v);
        dist *= 2;
        s += 1;
    }
    out
}

/// Decides how the twiddles of one command are delivered, checking the
/// result against the plan's table.
pub fn assign_twiddles(
    plan: &NttPlan,
    site: TwiddleSite,
    atom_words: usize,
) -> Result<TwiddleAssignment, MapError> {
    let m = plan.modulus();
    let na = atom_words;
    match site {
        TwiddleSite::Pair { stage, lower } => {
            let lanes: Vec<u32> = (0..na).map(|j| plan.twiddle_at(stage, lower + j)).collect();
            Ok(match fit_geometric(&lanes, m) {
                Some((w0, r)) => TwiddleAssignment::Geometric {
                    omega0: m.to_mont(w0),
                    r_omega: m.to_mont(r),
                },
                None => TwiddleAssignment::TableFallback(lanes.iter().map(|&w| m.to_mont(w)).collect()),
            })
        }
        TwiddleSite::Atom { atom } => {
            let req = c1_requirements(plan, na, atom);
            // device recurrence: butterfly i of stage s uses ω0 · r^((s−1)·i)
            let w0 = req[0][0];
            let r = match req.get(1) {
                Some(st2) if w0 != 0 => m.mul(st2[1], m.inv(w0).unwrap_or(0)),
                _ => 1,
            };
            let geometric = req.iter().enumerate().all(|(si, st)| {
                let step = m.pow(r, si as u64);
                let mut w = w0;
                st.iter().all(|&x| {
                    let ok = x == w;
                    w = m.mul(w, step);
                    ok
                })
            });
            if geometric {
                return Ok(TwiddleAssignment::Geometric {
                    omega0: m.to_mont(w0),
                    r_omega: m.to_mont(r),
                });
            }
            // table mode holds one twiddle per block
            let mut table = Vec::with_capacity(na - 1);
            let mut dist = 1;
            for st in &req {
                for blk in st.chunks(dist) {
                    if blk.iter().any(|&x| x != blk[0]) {
                        return Err(MapError::TwiddleNotExpressible(site));
                    }
                    table.push(m.to_mont(blk[0]));
                }
                dist *= 2;
            }
            Ok(TwiddleAssignment::TableFallback(table))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionKind {
    /// Job-level PARAM loads.
    Setup,
    /// Intra-atom and intra-row stages of one row block.
    RowBlock(usize),
    /// One inter-row stage.
    InterRow(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    pub range: Range<usize>,
}

/// A mapped job: the command sequence and the regions it is made of.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedNtt {
    pub commands: Vec<PimCommand>,
    pub sections: Vec<Section>,
}

impl MappedNtt {
    pub fn section(&self, kind: SectionKind) -> Option<&[PimCommand]> {
        self.sections
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| &self.commands[s.range.clone()])
    }
}

struct Emitter<'a> {
    job: &'a NttJob,
    g: BankGeometry,
    plan: &'a NttPlan,
    alloc: BufferAllocation,
    cmds: Vec<PimCommand>,
    regs: HashMap<ParamReg, u32>,
}

impl<'a> Emitter<'a> {
    fn new(job: &'a NttJob, g: &BankGeometry, plan: &'a NttPlan) -> Self {
        Emitter {
            job,
            g: *g,
            plan,
            alloc: BufferAllocation {
                num_buffers: job.num_buffers,
                pipelining: job.pipelining,
            },
            cmds: Vec::new(),
            regs: HashMap::new(),
        }
    }

    fn push(&mut self, c: PimCommand) {
        self.cmds.push(c);
    }

    fn load_reg(&mut self, reg: ParamReg, v: u32) {
        self.cmds.extend(param_load(reg, v));
        self.regs.insert(reg, v);
    }

    fn source(&mut self, site: TwiddleSite) -> Result<TwiddleSource, MapError> {
        match assign_twiddles(self.plan, site, self.g.atom_words)? {
            TwiddleAssignment::Geometric { omega0, r_omega } => {
                if self.regs.get(&ParamReg::Omega0) != Some(&omega0)
                    || self.regs.get(&ParamReg::ROmega) != Some(&r_omega)
                {
                    self.load_reg(ParamReg::Omega0, omega0);
                    self.load_reg(ParamReg::ROmega, r_omega);
                }
                Ok(TwiddleSource::Geometric { omega0, r_omega })
            }
            TwiddleAssignment::TableFallback(table) => {
                if self.job.twiddle_mode == TwiddleMode::OnTheFly {
                    return Err(MapError::TwiddleNotExpressible(site));
                }
                for (i, v) in table.into_iter().enumerate() {
                    let reg = ParamReg::Twiddle(i as u8);
                    if self.regs.get(&reg) != Some(&v) {
                        self.load_reg(reg, v);
                    }
                }
                Ok(TwiddleSource::Table)
            }
        }
    }

    fn mont_twiddle(&self, stage: u32, p: usize) -> u32 {
        self.job.modulus.to_mont(self.plan.twiddle_at(stage, p))
    }

    fn block_words(&self) -> usize {
        self.job.n.min(self.g.row_words())
    }

    fn blocks(&self) -> usize {
        self.job.n / self.block_words()
    }

    fn row_of_block(&self, b: usize) -> u32 {
        self.job.base_row + b as u32
    }

    /// Emits `n` tasks through `k` slots: iteration `t` stores task `t−k`,
    /// loads task `t` and computes task `t−k+1`.
    fn pipeline<L, C, S>(&mut self, n: usize, k: usize, mut load: L, mut compute: C, mut store: S) -> Result<(), MapError>
    where
        L: FnMut(&mut Self, usize, usize),
        C: FnMut(&mut Self, usize, usize) -> Result<(), MapError>,
        S: FnMut(&mut Self, usize, usize),
    {
        for t in 0..n + k {
            if t >= k && t - k < n {
                store(self, t - k, (t - k) % k);
            }
            if t < n {
                load(self, t, t % k);
            }
            if t + 1 >= k && t + 1 - k < n {
                compute(self, t + 1 - k, (t + 1 - k) % k)?;
            }
        }
        Ok(())
    }

    /// C1 on every atom of block `b`; twiddles for atom `t+1` are loaded
    /// right after C1 of atom `t` issues.
    fn intra_atom(&mut self, b: usize, first: TwiddleSource) -> Result<(), MapError> {
        let na = self.g.atom_words;
        let atoms = self.block_words() / na;
        let atom0 = b * atoms;
        let k = self.alloc.atom_slots();
        let mut src = vec![first; atoms];
        self.pipeline(
            atoms,
            k,
            |e, t, slot| {
                let buf = e.alloc.atom_buffer(slot);
                e.push(PimCommand::Rd { col: t as u32, buf })
            },
            |e, t, slot| {
                let buf = e.alloc.atom_buffer(slot);
                e.push(PimCommand::C1 { buf, tw: src[t] });
                if t + 1 < atoms {
                    src[t + 1] = e.source(TwiddleSite::Atom { atom: atom0 + t + 1 })?;
                }
                Ok(())
            },
            |e, t, slot| {
                let buf = e.alloc.atom_buffer(slot);
                e.push(PimCommand::Wr { col: t as u32, buf })
            },
        )
    }

    /// One intra-row stage of block `b`, pipelined over atom pairs.
    fn intra_row(&mut self, b: usize, stage: u32) -> Result<(), MapError> {
        let na = self.g.atom_words;
        let bw = self.block_words();
        let dc = (1usize << (stage - 1)) / na;
        let pairs: Vec<usize> = (0..bw / na).filter(|a| (a / dc).is_multiple_of(2)).collect();
        let base = b * bw;
        let k = self.alloc.pair_slots();
        self.pipeline(
            pairs.len(),
            k,
            |e, t, slot| {
                let (p, s) = e.alloc.pair_buffers(slot);
                let a = pairs[t] as u32;
                e.push(PimCommand::Rd { col: a, buf: p });
                e.push(PimCommand::Rd { col: a + dc as u32, buf: s });
            },
            |e, t, slot| {
                let (p, s) = e.alloc.pair_buffers(slot);
                let tw = e.source(TwiddleSite::Pair {
                    stage,
                    lower: base + pairs[t] * na,
                })?;
                e.push(PimCommand::C2 { p, s, tw });
                Ok(())
            },
            |e, t, slot| {
                let (p, s) = e.alloc.pair_buffers(slot);
                let a = pairs[t] as u32;
                e.push(PimCommand::Wr { col: a, buf: p });
                e.push(PimCommand::Wr { col: a + dc as u32, buf: s });
            },
        )
    }

    /// Scalar butterflies of one intra-row stage through the operand
    /// registers (single-buffer baseline).
    fn intra_row_scalar(&mut self, b: usize, stage: u32) {
        let na = self.g.atom_words;
        let bw = self.block_words();
        let d = 1usize << (stage - 1);
        for x in (0..bw).filter(|x| (x / d).is_multiple_of(2)) {
            let w = self.mont_twiddle(stage, b * bw + x);
            let (ca, la) = ((x / na) as u32, (x % na) as u8);
            let (cb, lb) = (((x + d) / na) as u32, ((x + d) % na) as u8);
            self.push(PimCommand::Ld { col: ca, lane: la, reg: 0 });
            self.push(PimCommand::Ld { col: cb, lane: lb, reg: 1 });
            self.push(PimCommand::Bu { w });
            self.push(PimCommand::St { col: ca, lane: la, reg: 0 });
            self.push(PimCommand::St { col: cb, lane: lb, reg: 1 });
        }
    }

    fn row_block(&mut self, b: usize) -> Result<(), MapError> {
        let na = self.g.atom_words;
        let atoms = self.block_words() / na;
        let first = self.source(TwiddleSite::Atom { atom: b * atoms })?;
        self.push(PimCommand::Act { row: self.row_of_block(b) });
        self.intra_atom(b, first)?;
        let rp = RegimePlan::new(self.job.n, &self.g);
        for s in rp.intra_row_stages() {
            if self.job.num_buffers == 1 {
                self.intra_row_scalar(b, s);
            } else {
                self.intra_row(b, s)?;
            }
        }
        self.push(PimCommand::Pre);
        Ok(())
    }

    /// Row pairs `(r, r + d/R)` of inter-row stage `stage`, in row order.
    fn row_pairs(&self, stage: u32) -> Vec<(usize, usize)> {
        let dr = (1usize << (stage - 1)) / self.g.row_words();
        (0..self.job.n / self.g.row_words())
            .filter(|r| (r / dr).is_multiple_of(2))
            .map(|r| (r, r + dr))
            .collect()
    }

    /// Inter-row stage with groups of `k` columns: near-row reads, far-row
    /// reads with C2 and far-row writes, near-row writes deferred to the
    /// next visit of the near row.
    fn inter_row(&mut self, stage: u32) -> Result<(), MapError> {
        let na = self.g.atom_words;
        let rw = self.g.row_words();
        let cols = self.g.columns_per_row;
        let k = self.alloc.pair_slots();
        for (ra, rb) in self.row_pairs(stage) {
            let (row_a, row_b) = (self.job.base_row + ra as u32, self.job.base_row + rb as u32);
            let groups: Vec<Vec<u32>> = (0..cols as u32)
                .collect::<Vec<_>>()
                .chunks(k)
                .map(<[u32]>::to_vec)
                .collect();
            let mut pending: Vec<u32> = Vec::new();
            for group in &groups {
                self.push(PimCommand::Act { row: row_a });
                for (i, &c) in pending.iter().enumerate() {
                    let (p, _) = self.alloc.pair_buffers(i);
                    self.push(PimCommand::Wr { col: c, buf: p });
                }
                for (i, &c) in group.iter().enumerate() {
                    let (p, _) = self.alloc.pair_buffers(i);
                    self.push(PimCommand::Rd { col: c, buf: p });
                }
                self.push(PimCommand::Pre);
                self.push(PimCommand::Act { row: row_b });
                for i in 0..=group.len() {
                    if i < group.len() {
                        let (_, s) = self.alloc.pair_buffers(i);
                        self.push(PimCommand::Rd { col: group[i], buf: s });
                    }
                    if i > 0 {
                        let j = i - 1;
                        let (p, s) = self.alloc.pair_buffers(j);
                        let lower = ra * rw + group[j] as usize * na;
                        let tw = self.source(TwiddleSite::Pair { stage, lower })?;
                        self.push(PimCommand::C2 { p, s, tw });
                    }
                }
                for (i, &c) in group.iter().enumerate() {
                    let (_, s) = self.alloc.pair_buffers(i);
                    self.push(PimCommand::Wr { col: c, buf: s });
                }
                self.push(PimCommand::Pre);
                pending = group.clone();
            }
            self.push(PimCommand::Act { row: row_a });
            for (i, &c) in pending.iter().enumerate() {
                let (p, _) = self.alloc.pair_buffers(i);
                self.push(PimCommand::Wr { col: c, buf: p });
            }
            self.push(PimCommand::Pre);
        }
        Ok(())
    }

    /// Inter-row stage with scalar butterflies: two activations per
    /// butterfly, the near-row store deferred to the next near-row visit.
    fn inter_row_scalar(&mut self, stage: u32) {
        let na = self.g.atom_words;
        let rw = self.g.row_words();
        for (ra, rb) in self.row_pairs(stage) {
            let (row_a, row_b) = (self.job.base_row + ra as u32, self.job.base_row + rb as u32);
            let mut pending: Option<(u32, u8)> = None;
            for x in 0..rw {
                let (col, lane) = ((x / na) as u32, (x % na) as u8);
                let w = self.mont_twiddle(stage, ra * rw + x);
                self.push(PimCommand::Act { row: row_a });
                if let Some((c, l)) = pending {
                    self.push(PimCommand::St { col: c, lane: l, reg: 0 });
                }
                self.push(PimCommand::Ld { col, lane, reg: 0 });
                self.push(PimCommand::Pre);
                self.push(PimCommand::Act { row: row_b });
                self.push(PimCommand::Ld { col, lane, reg: 1 });
                self.push(PimCommand::Bu { w });
                self.push(PimCommand::St { col, lane, reg: 1 });
                self.push(PimCommand::Pre);
                pending = Some((col, lane));
            }
            self.push(PimCommand::Act { row: row_a });
            if let Some((c, l)) = pending {
                self.push(PimCommand::St { col: c, lane: l, reg: 0 });
            }
            self.push(PimCommand::Pre);
        }
    }
}

fn check_plan(job: &NttJob, plan: &NttPlan) -> Result<(), MapError> {
    if plan.n() != job.n {
        return Err(MapError::PlanMismatch(format!("plan size {} vs job size {}", plan.n(), job.n)));
    }
    if plan.modulus().value() != job.modulus.value() {
        return Err(MapError::PlanMismatch(format!(
            "plan modulus {} vs job modulus {}",
            plan.modulus().value(),
            job.modulus.value()
        )));
    }
    if plan.direction() != job.direction {
        return Err(MapError::PlanMismatch(format!(
            "plan direction {:?} vs job direction {:?}",
            plan.direction(),
            job.direction
        )));
    }
    Ok(())
}

/// Maps a full job and records which commands belong to which section.
pub fn map_ntt_sections(job: &NttJob, g: &BankGeometry, plan: &NttPlan) -> Result<MappedNtt, MapError> {
    job.validate(g)?;
    check_plan(job, plan)?;
    let mut e = Emitter::new(job, g, plan);
    let mut sections = Vec::new();
    let mut mark = |kind, start: usize, e: &Emitter| {
        sections.push(Section {
            kind,
            range: start..e.cmds.len(),
        })
    };

    e.cmds.extend(modulus_params(&job.modulus));
    mark(SectionKind::Setup, 0, &e);
    for b in 0..e.blocks() {
        let start = e.cmds.len();
        e.row_block(b)?;
        mark(SectionKind::RowBlock(b), start, &e);
    }
    for s in RegimePlan::new(job.n, g).inter_row_stages() {
        let start = e.cmds.len();
        if job.num_buffers == 1 {
            e.inter_row_scalar(s);
        } else {
            e.inter_row(s)?;
        }
        mark(SectionKind::InterRow(s), start, &e);
    }
    Ok(MappedNtt {
        commands: e.cmds,
        sections,
    })
}

/// Command sequence that transforms the polynomial at the job's address in
/// place into the plan's iterative network output. With one buffer this is
/// the scalar baseline.
pub fn map_ntt(job: &NttJob, g: &BankGeometry, plan: &NttPlan) -> Result<Vec<PimCommand>, MapError> {
    map_ntt_sections(job, g, plan).map(|m| m.commands)
}

/// Intra-atom commands for row block `block`, assuming the row is open and
/// the modulus loaded.
pub fn map_intra_atom(job: &NttJob, g: &BankGeometry, plan: &NttPlan, block: usize) -> Result<Vec<PimCommand>, MapError> {
    job.validate(g)?;
    check_plan(job, plan)?;
    let mut e = Emitter::new(job, g, plan);
    let atoms = e.block_words() / g.atom_words;
    let first = e.source(TwiddleSite::Atom { atom: block * atoms })?;
    e.intra_atom(block, first)?;
    Ok(e.cmds)
}

/// Intra-row stages of row block `block`, assuming the row is open.
pub fn map_intra_row(job: &NttJob, g: &BankGeometry, plan: &NttPlan, block: usize) -> Result<Vec<PimCommand>, MapError> {
    job.validate(g)?;
    check_plan(job, plan)?;
    let mut e = Emitter::new(job, g, plan);
    for s in RegimePlan::new(job.n, g).intra_row_stages() {
        if job.num_buffers == 1 {
            e.intra_row_scalar(block, s);
        } else {
            e.intra_row(block, s)?;
        }
    }
    Ok(e.cmds)
}

/// One inter-row stage, starting and ending with every row closed.
pub fn map_inter_row(job: &NttJob, g: &BankGeometry, plan: &NttPlan, stage: u32) -> Result<Vec<PimCommand>, MapError> {
    job.validate(g)?;
    check_plan(job, plan)?;
    if RegimePlan::new(job.n, g).regime(stage) != Regime::InterRow || stage > plan.log_n() {
        return Err(MapError::InvalidJob(format!("stage {stage} is not an inter-row stage")));
    }
    let mut e = Emitter::new(job, g, plan);
    if job.num_buffers == 1 {
        e.inter_row_scalar(stage);
    } else {
        e.inter_row(stage)?;
    }
    Ok(e.cmds)
}

/// Scalar single-buffer schedule (comparison baseline); requires one buffer.
pub fn baseline_single_buffer(job: &NttJob, g: &BankGeometry, plan: &NttPlan) -> Result<Vec<PimCommand>, MapError> {
    if job.num_buffers != 1 {
        return Err(MapError::InvalidJob(format!(
            "baseline needs exactly one buffer, job has {}",
            job.num_buffers
        )));
    }
    map_ntt(job, g, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{BankState, CommandKind};
    use crate::reference::{ntt_iterative, Poly};
    use rand::{Rng, SeedableRng};

    fn setup(n: usize, q: u64, nb: usize) -> (NttJob, BankGeometry, NttPlan) {
        let m = Modulus::new(q).unwrap();
        let plan = NttPlan::forward(n, m).unwrap();
        (NttJob::new(n, m, nb), BankGeometry::default(), plan)
    }

    fn count(cmds: &[PimCommand], k: CommandKind) -> usize {
        cmds.iter().filter(|c| c.kind() == k).count()
    }

    fn run_on_bank(job: &NttJob, g: &BankGeometry, plan: &NttPlan, a: &Poly) -> Vec<u32> {
        let m = job.modulus;
        let mut bank = BankState::new(*g, job.num_buffers);
        let words: Vec<u32> = a.0.iter().map(|&x| m.to_mont(x)).collect();
        bank.host_store(job.base_row, &words);
        let cmds = map_ntt(job, g, plan).unwrap();
        bank.run(&cmds).unwrap();
        bank.host_load(job.base_row, job.n).into_iter().map(|x| m.from_mont(x)).collect()
    }

    #[test]
    fn matches_iterative_network() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in [8, 16, 64, 256, 512, 1024] {
            for nb in [1, 2, 3, 4, 6] {
                let (mut job, g, plan) = setup(n, 12289, nb);
                job.base_row = 5;
                let a = Poly((0..n).map(|_| rng.gen_range(0..12289)).collect());
                let want = ntt_iterative(&a, &plan).unwrap();
                assert_eq!(run_on_bank(&job, &g, &plan, &a), want.0, "n={n} nb={nb}");
            }
        }
    }

    #[test]
    fn unpipelined_matches_too() {
        let (mut job, g, plan) = setup(1024, 12289, 4);
        job.pipelining = false;
        let a = Poly((0..1024).map(|i| (i * 7 + 3) % 12289).collect());
        assert_eq!(run_on_bank(&job, &g, &plan, &a), ntt_iterative(&a, &plan).unwrap().0);
    }

    #[test]
    fn smallest_job_trace() {
        let (job, g, plan) = setup(8, 12289, 2);
        let cmds = map_ntt(&job, &g, &plan).unwrap();
        let kinds: Vec<_> = cmds
            .iter()
            .map(|c| c.kind())
            .filter(|&k| k != CommandKind::Param)
            .collect();
        use CommandKind::*;
        assert_eq!(kinds, [Act, Rd, C1, Wr, Pre]);
        let act = cmds.iter().position(|c| c.kind() == Act).unwrap();
        assert!(cmds[..act].iter().all(|c| c.kind() == Param));
    }

    #[test]
    fn row_block_counts() {
        let (job, g, plan) = setup(1024, 12289, 2);
        let m = map_ntt_sections(&job, &g, &plan).unwrap();
        let acts: usize = (0..4)
            .map(|b| count(m.section(SectionKind::RowBlock(b)).unwrap(), CommandKind::Act))
            .sum();
        assert_eq!(acts, 4);
        let blk = map_intra_atom(&job, &g, &plan, 0).unwrap();
        assert_eq!(count(&blk, CommandKind::Rd), 32);
        assert_eq!(count(&blk, CommandKind::C1), 32);
        assert_eq!(count(&blk, CommandKind::Wr), 32);
        assert_eq!(count(&blk, CommandKind::Act), 0);
        let ir = map_intra_row(&job, &g, &plan, 0).unwrap();
        assert_eq!(count(&ir, CommandKind::Act), 0);
        assert_eq!(count(&ir, CommandKind::Rd), 5 * 32);
        assert_eq!(count(&ir, CommandKind::C2), 5 * 16);
    }

    #[test]
    fn read_write_formula() {
        for n in [8usize, 32, 256, 2048] {
            for nb in [2, 4, 6] {
                let (job, g, plan) = setup(n, 12289, nb);
                let cmds = map_ntt(&job, &g, &plan).unwrap();
                let l = n.trailing_zeros() as usize;
                let rd = (n / 8) * (1 + l - 3);
                assert_eq!(count(&cmds, CommandKind::Rd), rd, "n={n} nb={nb}");
                assert_eq!(count(&cmds, CommandKind::Wr), rd);
            }
        }
    }

    #[test]
    fn inter_row_activations() {
        let n = 1024;
        let mut last = usize::MAX;
        for nb in [2, 4, 6, 8, 16, 64] {
            let (job, g, plan) = setup(n, 12289, nb);
            let st = map_inter_row(&job, &g, &plan, 9).unwrap();
            let acts = count(&st, CommandKind::Act);
            let k = nb / 2;
            let pairs = n / 256 / 2;
            assert_eq!(acts, pairs * (2 * 32usize.div_ceil(k) + 1), "nb={nb}");
            assert!(acts <= last);
            last = acts;
        }
        assert_eq!(last, 3 * n / (2 * 256));
    }

    #[test]
    fn pipelining_only_changes_activations() {
        let (job, g, plan) = setup(2048, 12289, 6);
        let off = NttJob { pipelining: false, ..job };
        let a = map_ntt(&job, &g, &plan).unwrap();
        let b = map_ntt(&off, &g, &plan).unwrap();
        let strip = |v: &[PimCommand]| {
            let mut k: Vec<CommandKind> = v
                .iter()
                .map(|c| c.kind())
                .filter(|k| !matches!(k, CommandKind::Act | CommandKind::Pre))
                .collect();
            k.sort();
            k
        };
        assert_eq!(strip(&a), strip(&b));
        assert!(count(&a, CommandKind::Act) < count(&b, CommandKind::Act));
    }

    #[test]
    fn intra_row_overlap_with_more_buffers() {
        let (job, g, plan) = setup(256, 12289, 4);
        let ir = map_intra_row(&job, &g, &plan, 0).unwrap();
        let first_wr = ir.iter().position(|c| c.kind() == CommandKind::Wr).unwrap();
        let rds_before = count(&ir[..first_wr], CommandKind::Rd);
        assert_eq!(rds_before, 4);
    }

    #[test]
    fn baseline_shape() {
        let (job, g, plan) = setup(512, 12289, 1);
        let cmds = baseline_single_buffer(&job, &g, &plan).unwrap();
        let bu = count(&cmds, CommandKind::Bu);
        assert_eq!(count(&cmds, CommandKind::Ld), 2 * bu);
        assert_eq!(count(&cmds, CommandKind::St), 2 * bu);
        let st = map_inter_row(&job, &g, &plan, 9).unwrap();
        assert_eq!(count(&st, CommandKind::Act), 2 * 256 + 1);
        assert!(baseline_single_buffer(&NttJob { num_buffers: 2, ..job }, &g, &plan).is_err());
    }

    #[test]
    fn twiddle_assignment() {
        let (_, _, plan) = setup(1024, 12289, 2);
        let m = plan.modulus();
        // inter-atom stages share one twiddle across the 8 lanes
        for (stage, lower) in [(4, 0), (6, 64), (9, 8), (10, 512 - 8)] {
            let w = plan.twiddle_at(stage, lower);
            assert_eq!(
                assign_twiddles(&plan, TwiddleSite::Pair { stage, lower }, 8).unwrap(),
                TwiddleAssignment::Geometric {
                    omega0: m.to_mont(w),
                    r_omega: m.to_mont(1)
                }
            );
        }
        // in-atom stage 1 needs four different per-block twiddles
        match assign_twiddles(&plan, TwiddleSite::Atom { atom: 3 }, 8).unwrap() {
            TwiddleAssignment::TableFallback(t) => {
                assert_eq!(t.len(), 7);
                for (i, (s, p)) in [(1, 0), (1, 2), (1, 4), (1, 6), (2, 0), (2, 4), (3, 0)].into_iter().enumerate() {
                    assert_eq!(m.from_mont(t[i]), plan.twiddle_at(s, 24 + p));
                }
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(fit_geometric(&[3, 6, 12, 24], m), Some((3, 2)));
        assert_eq!(fit_geometric(&[3, 6, 12, 25], m), None);
        assert_eq!(fit_geometric(&[0, 0], m), Some((0, 1)));
        assert_eq!(fit_geometric(&[0, 1], m), None);
    }

    #[test]
    fn strict_on_the_fly_rejects_in_atom_stages() {
        let (mut job, g, plan) = setup(64, 12289, 2);
        job.twiddle_mode = TwiddleMode::OnTheFly;
        assert!(matches!(
            map_ntt(&job, &g, &plan),
            Err(MapError::TwiddleNotExpressible(TwiddleSite::Atom { .. }))
        ));
    }

    #[test]
    fn job_errors() {
        let (job, g, plan) = setup(1024, 12289, 2);
        let far = NttJob { base_row: 32766, ..job };
        assert!(matches!(map_ntt(&far, &g, &plan), Err(MapError::JobTooLarge { .. })));
        let other = NttJob { n: 512, ..job };
        assert!(matches!(map_ntt(&other, &g, &plan), Err(MapError::PlanMismatch(_))));
        let inv = NttJob { direction: Direction::Inverse, ..job };
        assert!(matches!(map_ntt(&inv, &g, &plan), Err(MapError::PlanMismatch(_))));
        assert!(map_ntt(&NttJob { num_buffers: 0, ..job }, &g, &plan).is_err());
        assert!(map_inter_row(&job, &g, &plan, 8).is_err());
    }
}
