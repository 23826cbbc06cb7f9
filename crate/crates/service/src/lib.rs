//! Operator entry points for the FEB test framework: the `feb-scan` command
//! line ([`cli`]) and the HTTP/live-stream API ([`api`]) with its live hit
//! aggregation ([`live`]).

pub mod api;
pub mod cli;
pub mod live;
pub mod runner;
