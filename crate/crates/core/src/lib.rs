//! Hardware-free production testing for VMM3 front-end boards.
//!
//! * [`config`]: the 1728-bit VMM configuration codec.
//! * [`device`] and [`emulator`]: a seeded behavioural model of the chips
//!   and the board that hosts them.
//! * [`wire`] and [`link`]: the UDP framing and a client link with
//!   transcript capture.
//! * [`scan`]: the five production tests and the board verdict.
//! * [`store`] and [`archive`]: the run log and per-run report files.

pub mod archive;
pub mod config;
pub mod crc;
pub mod device;
pub mod emulator;
pub mod exec;
pub mod fit;
pub mod link;
pub mod scan;
pub mod scenario;
pub mod store;
pub mod wire;
