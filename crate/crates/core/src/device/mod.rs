//! Functional, timing-free model of one DRAM bank extended with atom
//! buffers and a butterfly compute unit (CU).
//!
//! Buffer 0 is the primary buffer (the global sense amplifiers); buffers
//! `1..N_b` are secondary atom buffers. All data and twiddles inside the
//! bank are Montgomery-form residues.

mod command;

use std::collections::HashMap;

use thiserror::Error;

pub use command::{
    format_listing, parse_listing, CommandKind, Half, ParamReg, ParseCommandError, PimCommand,
    TwiddleSource,
};

use crate::modmath::Modulus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BankGeometry {
    /// Words per atom (`N_a`).
    pub atom_words: usize,
    pub columns_per_row: usize,
    pub rows_per_bank: usize,
}

impl Default for BankGeometry {
    fn default() -> Self {
        BankGeometry {
            atom_words: 8,
            columns_per_row: 32,
            rows_per_bank: 32768,
        }
    }
}

impl BankGeometry {
    /// Words per row (`R`).
    pub fn row_words(&self) -> usize {
        self.atom_words * self.columns_per_row
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("atom_words", self.atom_words),
            ("columns_per_row", self.columns_per_row),
            ("rows_per_bank", self.rows_per_bank),
        ] {
            if v == 0 || !v.is_power_of_two() {
                return Err(format!("{name} must be a power of two, got {v}"));
            }
        }
        if self.atom_words < 2 || self.atom_words > 256 {
            return Err(format!("atom_words {} out of range 2..=256", self.atom_words));
        }
        if self.columns_per_row > u32::MAX as usize || self.rows_per_bank > u32::MAX as usize {
            return Err("geometry exceeds 32-bit addressing".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("{0} issued with no open row")]
    RowNotOpen(CommandKind),
    #[error("ACT while row {0} is open")]
    RowAlreadyOpen(u32),
    #[error("row {0} out of range")]
    RowOutOfRange(u32),
    #[error("column {0} out of range")]
    ColumnOutOfRange(u32),
    #[error("buffer {0} out of range")]
    BufferOutOfRange(u8),
    #[error("buffer {0} read before being loaded")]
    BufferInvalid(u8),
    #[error("C2 operands name the same buffer {0}")]
    SameBuffer(u8),
    #[error("lane {0} out of range")]
    LaneOutOfRange(u8),
    #[error("operand register {0} out of range")]
    RegisterOutOfRange(u8),
    #[error("operand register {0} read before being loaded")]
    RegisterInvalid(u8),
    #[error("register {0} not loaded")]
    ParamsNotLoaded(ParamReg),
    #[error("modulus registers are inconsistent: {0}")]
    InconsistentParams(String),
    #[error("encoded twiddle operands disagree with the loaded w0/rw registers")]
    ParamMismatch,
}

/// Number of scalar operand registers in the CU.
pub const OPERAND_REGS: usize = 2;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ScalarReg {
    lo: Option<u16>,
    hi: Option<u16>,
}

impl ScalarReg {
    fn get(&self) -> Option<u32> {
        Some(((self.hi? as u32) << 16) | self.lo? as u32)
    }
}

/// Complete functional state of the bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankState {
    geometry: BankGeometry,
    /// Sparse cell array: untouched rows read as zero.
    cells: HashMap<u32, Vec<u32>>,
    open_row: Option<u32>,
    row_buffer: Vec<u32>,
    buffers: Vec<Vec<u32>>,
    valid: Vec<bool>,
    operands: [Option<u32>; OPERAND_REGS],
    params: HashMap<ParamReg, ScalarReg>,
    modulus: Option<Modulus>,
}

impl BankState {
    pub fn new(geometry: BankGeometry, num_buffers: usize) -> Self {
        assert!(num_buffers >= 1 && num_buffers <= u8::MAX as usize);
        BankState {
            geometry,
            cells: HashMap::new(),
            open_row: None,
            row_buffer: Vec::new(),
            buffers: vec![vec![0; geometry.atom_words]; num_buffers],
            valid: vec![false; num_buffers],
            operands: [None; OPERAND_REGS],
            params: HashMap::new(),
            modulus: None,
        }
    }

    pub fn geometry(&self) -> &BankGeometry {
        &self.geometry
    }

    pub fn num_buffers(&self) -> usize {
        self.buffers.len()
    }

    pub fn open_row(&self) -> Option<u32> {
        self.open_row
    }

    pub fn buffer(&self, idx: usize) -> &[u32] {
        &self.buffers[idx]
    }

    pub fn buffer_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn operand(&self, reg: usize) -> Option<u32> {
        self.operands[reg]
    }

    pub fn param(&self, reg: ParamReg) -> Option<u32> {
        self.params.get(&reg).and_then(ScalarReg::get)
    }

    fn row_words(&self) -> usize {
        self.geometry.row_words()
    }

    /// Host-side access to the cell array (bypasses the command bus).
    pub fn read_cells(&self, row: u32) -> Vec<u32> {
        self.cells
            .get(&row)
            .cloned()
            .unwrap_or_else(|| vec![0; self.row_words()])
    }

    /// Host-side write of consecutive words starting at column 0 of
    /// `base_row`, spilling row-major into following rows.
    pub fn host_store(&mut self, base_row: u32, words: &[u32]) {
        let rw = self.row_words();
        for (i, chunk) in words.chunks(rw).enumerate() {
            let row = base_row + i as u32;
            assert!((row as usize) < self.geometry.rows_per_bank, "row out of range");
            let cells = self.cells.entry(row).or_insert_with(|| vec![0; rw]);
            cells[..chunk.len()].copy_from_slice(chunk);
        }
    }

    /// Host-side read of `len` consecutive words starting at `base_row`.
    pub fn host_load(&self, base_row: u32, len: usize) -> Vec<u32> {
        let rw = self.row_words();
        let mut out = Vec::with_capacity(len);
        let mut row = base_row;
        while out.len() < len {
            let take = (len - out.len()).min(rw);
            match self.cells.get(&row) {
                Some(c) => out.extend_from_slice(&c[..take]),
                None => out.extend(std::iter::repeat_n(0, take)),
            }
            row += 1;
        }
        out
    }

    /// Flips one bit of a word in the open row buffer. Used for fault
    /// injection in verification campaigns.
    pub fn flip_open_row_bit(&mut self, col: u32, lane: usize, bit: u32) -> bool {
        if self.open_row.is_none() {
            return false;
        }
        let idx = col as usize * self.geometry.atom_words + lane;
        self.row_buffer[idx] ^= 1 << bit;
        true
    }

    fn check_buf(&self, buf: u8) -> Result<usize, DeviceError> {
        if (buf as usize) < self.buffers.len() {
            Ok(buf as usize)
        } else {
            Err(DeviceError::BufferOutOfRange(buf))
        }
    }

    fn check_valid(&self, buf: u8) -> Result<usize, DeviceError> {
        let b = self.check_buf(buf)?;
        if self.valid[b] {
            Ok(b)
        } else {
            Err(DeviceError::BufferInvalid(buf))
        }
    }

    fn check_col(&self, col: u32) -> Result<usize, DeviceError> {
        if (col as usize) < self.geometry.columns_per_row {
            Ok(col as usize)
        } else {
            Err(DeviceError::ColumnOutOfRange(col))
        }
    }

    fn check_lane(&self, lane: u8) -> Result<usize, DeviceError> {
        if (lane as usize) < self.geometry.atom_words {
            Ok(lane as usize)
        } else {
            Err(DeviceError::LaneOutOfRange(lane))
        }
    }

    fn check_reg(&self, reg: u8) -> Result<usize, DeviceError> {
        if (reg as usize) < OPERAND_REGS {
            Ok(reg as usize)
        } else {
            Err(DeviceError::RegisterOutOfRange(reg))
        }
    }

    fn require_open(&self, kind: CommandKind) -> Result<(), DeviceError> {
        if self.open_row.is_some() {
            Ok(())
        } else {
            Err(DeviceError::RowNotOpen(kind))
        }
    }

    fn load_param(&self, reg: ParamReg) -> Result<u32, DeviceError> {
        self.param(reg).ok_or(DeviceError::ParamsNotLoaded(reg))
    }

    /// Modulus described by the `q`, `qinv` and `r2` registers.
    fn modulus(&self) -> Result<Modulus, DeviceError> {
        match self.modulus {
            Some(m) => Ok(m),
            None => self.derive_modulus(),
        }
    }

    fn derive_modulus(&self) -> Result<Modulus, DeviceError> {
        let q = self.load_param(ParamReg::Q)?;
        let qinv = self.load_param(ParamReg::QNegInv)?;
        let r2 = self.load_param(ParamReg::R2)?;
        let m = Modulus::new(q as u64)
            .map_err(|e| DeviceError::InconsistentParams(e.to_string()))?;
        if m.neg_inv() != qinv || m.r2_mod_q() != r2 {
            return Err(DeviceError::InconsistentParams(format!(
                "qinv/r2 do not belong to q={q}"
            )));
        }
        Ok(m)
    }

    fn check_geometric(&self, omega0: u32, r_omega: u32) -> Result<(), DeviceError> {
        let w0 = self.load_param(ParamReg::Omega0)?;
        let rw = self.load_param(ParamReg::ROmega)?;
        if (w0, rw) == (omega0, r_omega) {
            Ok(())
        } else {
            Err(DeviceError::ParamMismatch)
        }
    }

    fn twiddle_reg(&self, idx: usize) -> Result<u32, DeviceError> {
        self.load_param(ParamReg::Twiddle(idx as u8))
    }

    /// Executes one command, mutating the state. On error the state is
    /// left unchanged.
    pub fn exec(&mut self, cmd: &PimCommand) -> Result<(), DeviceError> {
        let na = self.geometry.atom_words;
        match *cmd {
            PimCommand::Act { row } => {
                if let Some(open) = self.open_row {
                    return Err(DeviceError::RowAlreadyOpen(open));
                }
                if row as usize >= self.geometry.rows_per_bank {
                    return Err(DeviceError::RowOutOfRange(row));
                }
                self.row_buffer = self.read_cells(row);
                self.open_row = Some(row);
            }
            PimCommand::Pre => {
                let row = self.open_row.ok_or(DeviceError::RowNotOpen(CommandKind::Pre))?;
                let data = std::mem::take(&mut self.row_buffer);
                if data.iter().any(|&x| x != 0) || self.cells.contains_key(&row) {
                    self.cells.insert(row, data);
                }
                self.open_row = None;
            }
            PimCommand::Rd { col, buf } => {
                self.require_open(CommandKind::Rd)?;
                let c = self.check_col(col)?;
                let b = self.check_buf(buf)?;
                self.buffers[b].copy_from_slice(&self.row_buffer[c * na..(c + 1) * na]);
                self.valid[b] = true;
            }
            PimCommand::Wr { col, buf } => {
                self.require_open(CommandKind::Wr)?;
                let c = self.check_col(col)?;
                let b = self.check_valid(buf)?;
                self.row_buffer[c * na..(c + 1) * na].copy_from_slice(&self.buffers[b]);
            }
            PimCommand::C1 { buf, tw } => self.op_c1(buf, tw)?,
            PimCommand::C2 { p, s, tw } => self.op_c2(p, s, tw)?,
            PimCommand::Param { reg, half, value } => {
                if let ParamReg::Twiddle(i) = reg {
                    if i as usize >= na {
                        return Err(DeviceError::RegisterOutOfRange(i));
                    }
                }
                let slot = self.params.entry(reg).or_default();
                match half {
                    Half::Lo => slot.lo = Some(value),
                    Half::Hi => slot.hi = Some(value),
                }
                if matches!(reg, ParamReg::Q | ParamReg::QNegInv | ParamReg::R2) {
                    self.modulus = self.derive_modulus().ok();
                }
            }
            PimCommand::Ld { col, lane, reg } => {
                self.require_open(CommandKind::Ld)?;
                let c = self.check_col(col)?;
                let l = self.check_lane(lane)?;
                let r = self.check_reg(reg)?;
                self.buffers[0].copy_from_slice(&self.row_buffer[c * na..(c + 1) * na]);
                self.valid[0] = true;
                self.operands[r] = Some(self.buffers[0][l]);
            }
            PimCommand::St { col, lane, reg } => {
                self.require_open(CommandKind::St)?;
                let c = self.check_col(col)?;
                let l = self.check_lane(lane)?;
                let r = self.check_reg(reg)?;
                let v = self.operands[r].ok_or(DeviceError::RegisterInvalid(reg))?;
                self.buffers[0][l] = v;
                self.row_buffer[c * na + l] = v;
            }
            PimCommand::Bu { w } => {
                let a = self.operands[0].ok_or(DeviceError::RegisterInvalid(0))?;
                let b = self.operands[1].ok_or(DeviceError::RegisterInvalid(1))?;
                let m = self.modulus()?;
                let (x, y) = m.butterfly_mont(a, b, w);
                self.operands = [Some(x), Some(y)];
            }
        }
        Ok(())
    }

    /// Runs every command in order, stopping at the first error and
    /// reporting its index.
    pub fn run(&mut self, cmds: &[PimCommand]) -> Result<(), (usize, DeviceError)> {
        for (i, c) in cmds.iter().enumerate() {
            self.exec(c).map_err(|e| (i, e))?;
        }
        Ok(())
    }

    /// In-buffer transform of one atom over `log2 N_a` stages.
    ///
    /// Geometric mode follows the on-the-fly recurrence: `ω` restarts at
    /// `ω0` every stage and advances by `ω_s` after each butterfly; `ω_s`
    /// starts at 1 and is multiplied by `r_ω` after each stage. Table mode
    /// uses one twiddle per butterfly block, stage after stage, from the
    /// twiddle register file.
    pub fn op_c1(&mut self, buf: u8, tw: TwiddleSource) -> Result<(), DeviceError> {
        let b = self.check_valid(buf)?;
        let m = self.modulus()?;
        let na = self.geometry.atom_words;
        let table = match tw {
            TwiddleSource::Geometric { omega0, r_omega } => {
                self.check_geometric(omega0, r_omega)?;
                None
            }
            TwiddleSource::Table => Some(
                (0..na - 1)
                    .map(|i| self.twiddle_reg(i))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let s = &mut self.buffers[b];
        let one = m.to_mont(1);
        let mut omega_s = one;
        let mut table_off = 0;
        let mut dist = 1;
        while dist < na {
            let mut w = match tw {
                TwiddleSource::Geometric { omega0, .. } => omega0,
                TwiddleSource::Table => 0,
            };
            for (blk, k) in (0..na).step_by(2 * dist).enumerate() {
                if let Some(t) = &table {
                    w = t[table_off + blk];
                }
                for j in 0..dist {
                    let (x, y) = m.butterfly_mont(s[k + j], s[k + j + dist], w);
                    s[k + j] = x;
                    s[k + j + dist] = y;
                    if table.is_none() {
                        w = m.mont_mul(w, omega_s);
                    }
                }
            }
            if let TwiddleSource::Geometric { r_omega, .. } = tw {
                omega_s = m.mont_mul(omega_s, r_omega);
            }
            table_off += na / (2 * dist);
            dist *= 2;
        }
        Ok(())
    }

    /// Lane-wise butterfly: `(P[j], S[j]) ← (P[j]+S[j], (P[j]−S[j])·ω_j)`,
    /// with `ω_j = ω0·r_ω^j` (geometric) or the `j`-th twiddle register.
    pub fn op_c2(&mut self, p: u8, s: u8, tw: TwiddleSource) -> Result<(), DeviceError> {
        if p == s {
            self.check_buf(p)?;
            return Err(DeviceError::SameBuffer(p));
        }
        let pb = self.check_valid(p)?;
        let sb = self.check_valid(s)?;
        let m = self.modulus()?;
        let na = self.geometry.atom_words;
        let lanes: Vec<u32> = match tw {
            TwiddleSource::Geometric { omega0, r_omega } => {
                self.check_geometric(omega0, r_omega)?;
                let mut w = omega0;
                (0..na)
                    .map(|_| {
                        let cur = w;
                        w = m.mont_mul(w, r_omega);
                        cur
                    })
                    .collect()
            }
            TwiddleSource::Table => (0..na)
                .map(|i| self.twiddle_reg(i))
                .collect::<Result<_, _>>()?,
        };
        for (j, w) in lanes.into_iter().enumerate() {
            let (x, y) = m.butterfly_mont(self.buffers[pb][j], self.buffers[sb][j], w);
            self.buffers[pb][j] = x;
            self.buffers[sb][j] = y;
        }
        Ok(())
    }
}

/// PARAM commands that load a 32-bit value into `reg`, low half first.
pub fn param_load(reg: ParamReg, value: u32) -> [PimCommand; 2] {
    [
        PimCommand::Param {
            reg,
            half: Half::Lo,
            value: value as u16,
        },
        PimCommand::Param {
            reg,
            half: Half::Hi,
            value: (value >> 16) as u16,
        },
    ]
}

/// PARAM commands that load the modulus and its Montgomery constants.
pub fn modulus_params(m: &Modulus) -> Vec<PimCommand> {
    let mut v = Vec::with_capacity(6);
    v.extend(param_load(ParamReg::Q, m.value()));
    v.extend(param_load(ParamReg::QNegInv, m.neg_inv()));
    v.extend(param_load(ParamReg::R2, m.r2_mod_q()));
    v
}
