//! `feb-scan` command line.
//!
//! Exit codes: 0 pass or success, 1 board fail, 2 usage error, 3 I/O or
//! protocol error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use feb_core::config::{self, DecodeMode, VmmConfig, CONFIG_BYTES};
use feb_core::emulator::{BoardType, Emulator, EmulatorHandle};
use feb_core::link::{Link, LinkOptions};
use feb_core::scan::{default_operating_config, ScanParams, Scanner, TestKind, Verdict};
use feb_core::scenario::Scenario;
use feb_core::store::{default_data_dir, Store};
use feb_core::wire::{hex_dump, parse_hex};
use uuid::Uuid;

use crate::api::{self, AppState, ServiceConfig};
use crate::runner;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "feb-scan", version, about = "Production tests for VMM3 front-end boards", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a board emulator on a UDP port until interrupted.
    Emulate {
        #[arg(long, default_value = "127.0.0.1:6000")]
        listen: String,
        /// pfeb or sfeb; overrides the scenario file.
        #[arg(long)]
        board: Option<BoardType>,
        /// Overrides the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run one test (or `all`), store the report and print a summary.
    Scan {
        /// baseline, threshold, pulser, gain, dead or all
        test: TestKind,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        board_id: String,
        /// Defaults to $FEB_SCAN_DATA, then ./feb-data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// JSON object of scan parameter overrides.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Field file with the operating configuration written to every VMM.
        #[arg(long)]
        operating: Option<PathBuf>,
    },
    /// List the stored runs of a board.
    Report {
        board_id: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Print the run-log records as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP and live-stream API for one board.
    Serve {
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        http: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Board id recorded for runs that do not name one.
        #[arg(long, default_value = "bench")]
        board_id: String,
    },
    /// Configuration bitstream tools.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Debug, Subcommand)]
enum ConfigCommand {
    /// Field file to 216-byte bitstream, printed as hex.
    Encode { fields: PathBuf },
    /// Bitstream (hex text, raw file, or inline hex) to field listing.
    Decode {
        input: String,
        /// Accept nonzero reserved bits and report them.
        #[arg(long)]
        lenient: bool,
    },
    /// Field-by-field differences between two configurations.
    Diff { a: String, b: String },
}

/// Error carrying its exit code.
struct Exit(i32, String);

impl Exit {
    fn usage(msg: impl Into<String>) -> Self {
        Exit(EXIT_USAGE, msg.into())
    }

    fn io(msg: impl Into<String>) -> Self {
        Exit(EXIT_IO, msg.into())
    }
}

/// Parses `argv` (program name first) and runs the verb.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_PASS,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_PASS {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Emulate {
            listen,
            board,
            seed,
            scenario,
        } => emulate(&listen, board, seed, scenario.as_deref(), out),
        Command::Scan {
            test,
            endpoint,
            board_id,
            data_dir,
            params,
            operating,
        } => scan(
            test,
            &endpoint,
            &board_id,
            &data_dir.unwrap_or_else(default_data_dir),
            params.as_deref(),
            operating.as_deref(),
            out,
        ),
        Command::Report { board_id, data_dir, json } => {
            report(&board_id, &data_dir.unwrap_or_else(default_data_dir), json, out)
        }
        Command::Serve {
            endpoint,
            http,
            data_dir,
            board_id,
        } => serve(&endpoint, &http, data_dir.unwrap_or_else(default_data_dir), board_id, out),
        Command::Config(cmd) => config_verb(cmd, out),
    };
    match result {
        Ok(code) => code,
        Err(Exit(code, msg)) => {
            let _ = writeln!(err, "feb-scan: {msg}");
            code
        }
    }
}

fn read_text(path: &Path) -> Result<String, Exit> {
    fs::read_to_string(path).map_err(|e| Exit::io(format!("{}: {e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime, Exit> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Exit::io(format!("starting runtime: {e}")))
}

fn emulate(
    listen: &str,
    board: Option<BoardType>,
    seed: Option<u64>,
    scenario: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Exit> {
    let mut sc = match scenario {
        Some(p) => Scenario::parse(&read_text(p)?).map_err(|e| Exit::usage(format!("{}: {e}", p.display())))?,
        None => Scenario::default(),
    };
    sc.board = board.or(sc.board);
    sc.seed = seed.or(sc.seed);
    let emulator = Emulator::from_scenario(&sc).map_err(|e| Exit::usage(e.to_string()))?;
    let desc = emulator.descriptor();
    let handle = EmulatorHandle::spawn_udp(emulator, listen).map_err(|e| Exit::io(format!("binding {listen}: {e}")))?;
    let _ = writeln!(
        out,
        "emulating {} ({} vmm, seed {}) on udp {}",
        desc.board_type.name(),
        desc.n_vmm,
        sc.seed.unwrap_or(0),
        handle.addr()
    );
    let _ = out.flush();
    runtime()?.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let emulator = handle.stop();
    let _ = writeln!(out, "stopped after {} hits", emulator.hits_emitted());
    Ok(EXIT_PASS)
}

fn scan(
    test: TestKind,
    endpoint: &str,
    board_id: &str,
    data_dir: &Path,
    params: Option<&Path>,
    operating: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Exit> {
    let params: ScanParams = match params {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Exit::usage(format!("{}: {e}", p.display())))?,
        None => ScanParams::default(),
    };
    let operating: VmmConfig = match operating {
        Some(p) => config::parse_field_file(&read_text(p)?).map_err(|e| Exit::usage(format!("{}: {e}", p.display())))?,
        None => default_operating_config(),
    };
    params.validate().map_err(|e| Exit::usage(e.to_string()))?;
    let mut store = Store::open(data_dir).map_err(|e| Exit::io(format!("run log in {}: {e}", data_dir.display())))?;

    let options = LinkOptions {
        record_transcript: false,
        ..LinkOptions::default()
    };
    let link = Link::udp(endpoint, options).map_err(|e| Exit::io(format!("cannot reach board at {endpoint}: {e}")))?;
    let mut scanner =
        Scanner::connect(link, params, operating).map_err(|e| Exit::io(format!("cannot reach board at {endpoint}: {e}")))?;
    let done = runner::execute(&mut scanner, test, board_id, Uuid::new_v4(), data_dir)
        .map_err(|e| Exit::io(format!("{} scan failed: {e}", test.name())))?;
    store
        .append(done.record.clone())
        .map_err(|e| Exit::io(format!("run log: {e}")))?;

    let report = &done.report;
    let b = report.board;
    let _ = writeln!(
        out,
        "board    {board_id} ({}, {} vmm, {} channels)",
        b.board_type.name(),
        b.n_vmm,
        b.n_channels
    );
    let _ = writeln!(out, "test     {}", test.name());
    let _ = writeln!(out, "run      {}", report.run_id);
    let _ = writeln!(
        out,
        "files    {}",
        done.record
            .files
            .iter()
            .map(|f| data_dir.join(f).display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let verdict = report.classification.verdict;
    let _ = writeln!(out, "verdict  {}", verdict.name().to_uppercase());
    for r in &report.classification.reasons {
        let _ = writeln!(out, "  {r}");
    }
    let channels = report.classification.channels();
    if !channels.is_empty() {
        let list: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "channels {}", list.join(", "));
    }
    Ok(if verdict == Verdict::Pass { EXIT_PASS } else { EXIT_FAIL })
}

fn report(board_id: &str, data_dir: &Path, json: bool, out: &mut dyn Write) -> Result<i32, Exit> {
    let store = Store::open(data_dir).map_err(|e| Exit::io(format!("run log in {}: {e}", data_dir.display())))?;
    let runs = store.query(board_id);
    if json {
        let text = serde_json::to_string_pretty(&runs).map_err(|e| Exit::io(e.to_string()))?;
        let _ = writeln!(out, "{text}");
        return Ok(EXIT_PASS);
    }
    if runs.is_empty() {
        let _ = writeln!(out, "no runs recorded for board {board_id}");
        return Ok(EXIT_PASS);
    }
    let _ = writeln!(out, "{:<24}  {:<9}  {:<10}  {:<36}  report", "started", "test", "verdict", "run");
    for r in &runs {
        let _ = writeln!(
            out,
            "{:<24}  {:<9}  {:<10}  {:<36}  {}",
            r.started.format("%Y-%m-%d %H:%M:%S%.3f"),
            r.test.name(),
            r.summary.verdict.name().to_uppercase(),
            r.run_id,
            r.files.first().map(String::as_str).unwrap_or("-"),
        );
        for reason in &r.summary.reasons {
            let _ = writeln!(out, "    {reason}");
        }
    }
    Ok(EXIT_PASS)
}

fn serve(endpoint: &str, http: &str, data_dir: PathBuf, board_id: String, out: &mut dyn Write) -> Result<i32, Exit> {
    let mut config = ServiceConfig::new(endpoint, data_dir);
    config.board_id = board_id;
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(http)
            .await
            .map_err(|e| Exit::io(format!("binding {http}: {e}")))?;
        let app = {
            let config = config.clone();
            tokio::task::spawn_blocking(move || AppState::new(config))
                .await
                .map_err(|e| Exit::io(e.to_string()))?
                .map_err(|e| Exit::io(format!("run log: {e}")))?
        };
        let addr = listener.local_addr().map_err(|e| Exit::io(e.to_string()))?;
        let _ = writeln!(out, "serving board {} on http://{addr}", config.endpoint);
        let _ = out.flush();
        tokio::select! {
            served = api::serve(listener, app) => served.map_err(|e| Exit::io(e.to_string()))?,
            _ = tokio::signal::ctrl_c() => {}
        }
        Ok(EXIT_PASS)
    })
}

/// Reads a bitstream given as a file (raw or hex text) or inline hex.
fn load_bitstream(input: &str) -> Result<Vec<u8>, Exit> {
    let path = Path::new(input);
    let bytes = if path.is_file() {
        let raw = fs::read(path).map_err(|e| Exit::io(format!("{input}: {e}")))?;
        if raw.len() == CONFIG_BYTES {
            return Ok(raw);
        }
        let text = String::from_utf8(raw).map_err(|_| Exit::usage(format!("{input}: neither hex text nor a raw bitstream")))?;
        parse_hex(&text).map_err(|e| Exit::usage(format!("{input}: {e}")))?
    } else {
        parse_hex(input).map_err(|e| Exit::usage(format!("`{input}` is not a file or hex: {e}")))?
    };
    Ok(bytes)
}

/// A configuration from a field file or any bitstream form.
fn load_config(input: &str) -> Result<VmmConfig, Exit> {
    let path = Path::new(input);
    if path.is_file() {
        let raw = fs::read(path).map_err(|e| Exit::io(format!("{input}: {e}")))?;
        if raw.len() != CONFIG_BYTES {
            if let Ok(text) = String::from_utf8(raw) {
                if parse_hex(&text).is_err() {
                    return config::parse_field_file(&text).map_err(|e| Exit::usage(format!("{input}: {e}")));
                }
            }
        }
    }
    let bits = load_bitstream(input)?;
    config::decode(&bits).map_err(|e| Exit::usage(format!("{input}: {e}")))
}

fn config_verb(cmd: ConfigCommand, out: &mut dyn Write) -> Result<i32, Exit> {
    match cmd {
        ConfigCommand::Encode { fields } => {
            let cfg = config::parse_field_file(&read_text(&fields)?)
                .map_err(|e| Exit::usage(format!("{}: {e}", fields.display())))?;
            let bits = config::encode(&cfg).map_err(|e| Exit::usage(e.to_string()))?;
            let _ = writeln!(out, "{}", hex_dump(&bits));
        }
        ConfigCommand::Decode { input, lenient } => {
            let bits = load_bitstream(&input)?;
            let mode = if lenient { DecodeMode::Lenient } else { DecodeMode::Strict };
            let decoded = config::decode_with(&bits, mode).map_err(|e| Exit::usage(format!("{input}: {e}")))?;
            let _ = write!(out, "{}", config::describe(&decoded.config));
            if !decoded.reserved_bits_set.is_empty() {
                let list: Vec<String> = decoded.reserved_bits_set.iter().map(|b| b.to_string()).collect();
                let _ = writeln!(out, "# reserved bits set: {}", list.join(", "));
            }
        }
        ConfigCommand::Diff { a, b } => {
            let (ca, cb) = (load_config(&a)?, load_config(&b)?);
            let lines = config::diff(&ca, &cb);
            if lines.is_empty() {
                let _ = writeln!(out, "identical");
            }
            for l in lines {
                let _ = writeln!(out, "{l}");
            }
        }
    }
    Ok(EXIT_PASS)
}
