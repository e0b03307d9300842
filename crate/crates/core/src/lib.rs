//! Simulator and command mapper for number-theoretic transforms executed
//! inside a single DRAM bank extended with atom buffers and a small
//! butterfly compute unit.

pub mod device;
pub mod harness;
pub mod mapper;
pub mod modmath;
pub mod reference;
pub mod timing;

pub use device::{BankGeometry, BankState, CommandKind, DeviceError, PimCommand, TwiddleSource};
pub use harness::{ConfigError, HarnessError, Report, RunConfig, SweepDimension};
pub use mapper::{map_ntt, MapError, NttJob, TwiddleMode};
pub use modmath::Modulus;
pub use reference::{Direction, NttPlan, Poly};
pub use timing::{EnergyTable, SimStats, TimedTrace, TimingParams};
