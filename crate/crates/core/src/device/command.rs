use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Scalar registers in the compute unit that PARAM can load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamReg {
    Q,
    QNegInv,
    R2,
    Omega0,
    ROmega,
    /// Entry of the twiddle register file used by table-mode compute.
    Twiddle(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Half {
    Lo,
    Hi,
}

/// Where a compute command takes its twiddle factors from. Values are in
/// Montgomery form, like everything else held in the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TwiddleSource {
    /// On-the-fly recurrence from `(omega0, r_omega)`; must match the
    /// `Omega0` / `ROmega` registers.
    Geometric { omega0: u32, r_omega: u32 },
    /// Per-block values read from the twiddle register file.
    Table,
}

/// One command on the bank's command bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PimCommand {
    Act { row: u32 },
    Pre,
    /// Column read of atom `col` of the open row into buffer `buf`.
    Rd { col: u32, buf: u8 },
    /// Column write of buffer `buf` into atom `col` of the open row.
    Wr { col: u32, buf: u8 },
    /// Intra-atom transform of one buffer, in place.
    C1 { buf: u8, tw: TwiddleSource },
    /// Lane-wise butterfly across two buffers, in place.
    C2 { p: u8, s: u8, tw: TwiddleSource },
    /// Loads 16 bits of a scalar register.
    Param { reg: ParamReg, half: Half, value: u16 },
    /// Scalar load: column read into the primary buffer, then one lane moved
    /// into operand register `reg`.
    Ld { col: u32, lane: u8, reg: u8 },
    /// Scalar store: operand register `reg` written to a single lane of atom
    /// `col` through the primary buffer.
    St { col: u32, lane: u8, reg: u8 },
    /// Butterfly on the two operand registers with twiddle `w`.
    Bu { w: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    Act,
    Pre,
    Rd,
    Wr,
    C1,
    C2,
    Param,
    Ld,
    St,
    Bu,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Act => "ACT",
            CommandKind::Pre => "PRE",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::C1 => "C1",
            CommandKind::C2 => "C2",
            CommandKind::Param => "PARAM",
            CommandKind::Ld => "LD",
            CommandKind::St => "ST",
            CommandKind::Bu => "BU",
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PimCommand {
    pub fn kind(&self) -> CommandKind {
        match self {
            PimCommand::Act { .. } => CommandKind::Act,
            PimCommand::Pre => CommandKind::Pre,
            PimCommand::Rd { .. } => CommandKind::Rd,
            PimCommand::Wr { .. } => CommandKind::Wr,
            PimCommand::C1 { .. } => CommandKind::C1,
            PimCommand::C2 { .. } => CommandKind::C2,
            PimCommand::Param { .. } => CommandKind::Param,
            PimCommand::Ld { .. } => CommandKind::Ld,
            PimCommand::St { .. } => CommandKind::St,
            PimCommand::Bu { .. } => CommandKind::Bu,
        }
    }

    pub fn is_column(&self) -> bool {
        matches!(
            self.kind(),
            CommandKind::Rd | CommandKind::Wr | CommandKind::Ld | CommandKind::St
        )
    }

    pub fn is_compute(&self) -> bool {
        matches!(self.kind(), CommandKind::C1 | CommandKind::C2 | CommandKind::Bu)
    }
}

impl fmt::Display for ParamReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamReg::Q => f.write_str("q"),
            ParamReg::QNegInv => f.write_str("qinv"),
            ParamReg::R2 => f.write_str("r2"),
            ParamReg::Omega0 => f.write_str("w0"),
            ParamReg::ROmega => f.write_str("rw"),
            ParamReg::Twiddle(i) => write!(f, "tw{i}"),
        }
    }
}

fn fmt_tw(f: &mut fmt::Formatter<'_>, tw: &TwiddleSource) -> fmt::Result {
    match tw {
        TwiddleSource::Geometric { omega0, r_omega } => write!(f, " w0={omega0} rw={r_omega}"),
        TwiddleSource::Table => f.write_str(" table"),
    }
}

/// Text form used in command listings and timed traces, e.g.
/// `RD col=3 buf=1`.
impl fmt::Display for PimCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().name())?;
        match self {
            PimCommand::Act { row } => write!(f, " row={row}"),
            PimCommand::Pre => Ok(()),
            PimCommand::Rd { col, buf } | PimCommand::Wr { col, buf } => {
                write!(f, " col={col} buf={buf}")
            }
            PimCommand::C1 { buf, tw } => {
                write!(f, " buf={buf}")?;
                fmt_tw(f, tw)
            }
            PimCommand::C2 { p, s, tw } => {
                write!(f, " p={p} s={s}")?;
                fmt_tw(f, tw)
            }
            PimCommand::Param { reg, half, value } => {
                let h = match half {
                    Half::Lo => "lo",
                    Half::Hi => "hi",
                };
                write!(f, " reg={reg} half={h} value={value}")
            }
            PimCommand::Ld { col, lane, reg } | PimCommand::St { col, lane, reg } => {
                write!(f, " col={col} lane={lane} reg={reg}")
            }
            PimCommand::Bu { w } => write!(f, " w={w}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse command `{line}`: {reason}")]
pub struct ParseCommandError {
    pub line: String,
    pub reason: String,
}

struct Fields<'a> {
    line: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
    flags: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, reason: impl Into<String>) -> ParseCommandError {
        ParseCommandError {
            line: self.line.to_string(),
            reason: reason.into(),
        }
    }

    fn raw(&self, key: &str) -> Result<&'a str, ParseCommandError> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T, ParseCommandError> {
        self.raw(key)?
            .parse()
            .map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    fn twiddle(&self) -> Result<TwiddleSource, ParseCommandError> {
        if self.flags.contains(&"table") {
            Ok(TwiddleSource::Table)
        } else {
            Ok(TwiddleSource::Geometric {
                omega0: self.num("w0")?,
                r_omega: self.num("rw")?,
            })
        }
    }
}

impl FromStr for ParamReg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "q" => ParamReg::Q,
            "qinv" => ParamReg::QNegInv,
            "r2" => ParamReg::R2,
            "w0" => ParamReg::Omega0,
            "rw" => ParamReg::ROmega,
            _ => match s.strip_prefix("tw").and_then(|i| i.parse().ok()) {
                Some(i) => ParamReg::Twiddle(i),
                None => return Err(format!("unknown register `{s}`")),
            },
        })
    }
}

/// Parses the [`fmt::Display`] form. A leading `cmd=` is accepted so that
/// lines of a command listing parse directly.
impl FromStr for PimCommand {
    type Err = ParseCommandError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut toks = line.split_whitespace();
        let head = toks.next().unwrap_or("");
        let name = head.strip_prefix("cmd=").unwrap_or(head);
        let mut fields = Fields {
            line,
            pairs: Vec::new(),
            flags: Vec::new(),
        };
        for t in toks {
            match t.split_once('=') {
                Some((k, v)) => fields.pairs.push((k, v)),
                None => fields.flags.push(t),
            }
        }
        let f = &fields;
        Ok(match name {
            "ACT" => PimCommand::Act { row: f.num("row")? },
            "PRE" => PimCommand::Pre,
            "RD" => PimCommand::Rd {
                col: f.num("col")?,
                buf: f.num("buf")?,
            },
            "WR" => PimCommand::Wr {
                col: f.num("col")?,
                buf: f.num("buf")?,
            },
            "C1" => PimCommand::C1 {
                buf: f.num("buf")?,
                tw: f.twiddle()?,
            },
            "C2" => PimCommand::C2 {
                p: f.num("p")?,
                s: f.num("s")?,
                tw: f.twiddle()?,
            },
            "PARAM" => PimCommand::Param {
                reg: f.raw("reg")?.parse().map_err(|e: String| f.err(e))?,
                half: match f.raw("half")? {
                    "lo" => Half::Lo,
                    "hi" => Half::Hi,
                    _ => return Err(f.err("half must be lo or hi")),
                },
                value: f.num("value")?,
            },
            "LD" => PimCommand::Ld {
                col: f.num("col")?,
                lane: f.num("lane")?,
                reg: f.num("reg")?,
            },
            "ST" => PimCommand::St {
                col: f.num("col")?,
                lane: f.num("lane")?,
                reg: f.num("reg")?,
            },
            "BU" => PimCommand::Bu { w: f.num("w")? },
            other => return Err(f.err(format!("unknown command `{other}`"))),
        })
    }
}

/// One `cmd=<NAME> args…` line per command.
pub fn format_listing(cmds: &[PimCommand]) -> String {
    let mut out = String::new();
    for c in cmds {
        out.push_str("cmd=");
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_listing(text: &str) -> Result<Vec<PimCommand>, ParseCommandError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}
