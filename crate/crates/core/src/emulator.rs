//! Emulated pFEB/sFEB: 3 or 8 VMM models, the XADC monitor and the external
//! simulation signal board, all behind the wire protocol.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, VmmConfig, CHANNELS_PER_VMM, MUX_REFERENCE};
use crate::crc::crc32;
use crate::device::{DeviceError, Fault, HitRecord, Stimulus, VmmModel, VmmTruth, FLAG_INTERNAL_PULSE};
use crate::scenario::{Scenario, ScenarioError};
use crate::wire::{
    decode_frame, decode_header, encode_frame, error_code, Frame, Message, MAX_HITS_PER_FRAME,
    MAX_XADC_SAMPLES,
};

pub const FIRMWARE_VERSION: u16 = 0x0100;
/// Signal-board charge scale, same as the internal pulser.
pub const SIGBOARD_FC_PER_COUNT: f64 = 0.3;
pub const SIGBOARD_OUTPUTS: usize = 256;
pub const BCID_MODULUS: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoardType {
    Pfeb,
    Sfeb,
}

impl BoardType {
    pub fn n_vmm(self) -> usize {
        match self {
            BoardType::Pfeb => 3,
            BoardType::Sfeb => 8,
        }
    }

    pub fn n_channels(self) -> usize {
        self.n_vmm() * CHANNELS_PER_VMM
    }

    pub fn wire_code(self) -> u8 {
        match self {
            BoardType::Pfeb => 0,
            BoardType::Sfeb => 1,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BoardType::Pfeb),
            1 => Some(BoardType::Sfeb),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoardType::Pfeb => "pfeb",
            BoardType::Sfeb => "sfeb",
        }
    }
}

impl FromStr for BoardType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pfeb" => Ok(BoardType::Pfeb),
            "sfeb" => Ok(BoardType::Sfeb),
            other => Err(format!("unknown board type `{other}` (pfeb|sfeb)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardDescriptor {
    pub board_type: BoardType,
    pub n_vmm: usize,
    pub n_channels: usize,
}

impl From<BoardType> for BoardDescriptor {
    fn from(board_type: BoardType) -> Self {
        Self {
            board_type,
            n_vmm: board_type.n_vmm(),
            n_channels: board_type.n_channels(),
        }
    }
}

/// Output patterns of the simulation signal board.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalMode {
    /// 1: channel 0 only.
    SingleChannel,
    /// 2: every channel on every pulse.
    AllChannels,
    /// 3: channel `i mod n` on pulse `i`.
    WalkingOne,
    /// 4: even channels on even pulses, odd channels on odd pulses.
    EvenOdd,
    /// 5: fixed seeded subset at 50% density.
    RandomSubset,
    /// 6: every channel, amplitude ramped over the pulse train.
    AmplitudeRamp,
}

impl SignalMode {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SignalMode::SingleChannel,
            2 => SignalMode::AllChannels,
            3 => SignalMode::WalkingOne,
            4 => SignalMode::EvenOdd,
            5 => SignalMode::RandomSubset,
            6 => SignalMode::AmplitudeRamp,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            SignalMode::SingleChannel => 1,
            SignalMode::AllChannels => 2,
            SignalMode::WalkingOne => 3,
            SignalMode::EvenOdd => 4,
            SignalMode::RandomSubset => 5,
            SignalMode::AmplitudeRamp => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalBoardState {
    pub mode: SignalMode,
    pub amplitude_counts: u16,
    pub pattern_seed: u64,
}

impl Default for SignalBoardState {
    fn default() -> Self {
        Self {
            mode: SignalMode::AllChannels,
            amplitude_counts: 0,
            pattern_seed: 0,
        }
    }
}

impl SignalBoardState {
    /// Mode-5 channel subset; depends only on the pattern seed.
    pub fn random_subset(&self, n_channels: usize) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pattern_seed);
        (0..n_channels).map(|_| rng.random_bool(0.5)).collect()
    }

    /// External charge delivered to board channel `ch` on pulse `i` of `count`.
    fn charge_fc(&self, ch: usize, i: u32, count: u32, n: usize, subset: &[bool]) -> Option<f64> {
        if self.amplitude_counts == 0 {
            return None;
        }
        let full = self.amplitude_counts as f64 * SIGBOARD_FC_PER_COUNT;
        let fires = match self.mode {
            SignalMode::SingleChannel => ch == 0,
            SignalMode::AllChannels | SignalMode::AmplitudeRamp => true,
            SignalMode::WalkingOne => ch == i as usize % n,
            SignalMode::EvenOdd => ch % 2 == i as usize % 2,
            SignalMode::RandomSubset => subset[ch],
        };
        if !fires {
            return None;
        }
        Some(match self.mode {
            SignalMode::AmplitudeRamp => full * (i as f64 + 1.0) / count as f64,
            _ => full,
        })
    }
}

/// Sink for outgoing frames. Blocking here stalls pulse generation.
pub type Emit<'a> = dyn FnMut(Frame) + 'a;

pub struct Emulator {
    descriptor: BoardDescriptor,
    vmms: Vec<VmmModel>,
    rng: ChaCha8Rng,
    running: bool,
    signal_board: SignalBoardState,
    subset: Vec<bool>,
    tick: u64,
    next_seq: u32,
    pending_hits: Vec<HitRecord>,
    hits_emitted: u64,
}

impl Emulator {
    /// Draws nominal truths from `seed`, then applies the scenario overrides.
    pub fn new(board: BoardType, seed: u64, scenario: &Scenario) -> Result<Self, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truths: Vec<VmmTruth> = (0..board.n_vmm()).map(|_| VmmTruth::nominal(&mut rng)).collect();
        scenario.apply(&mut truths)?;
        Ok(Self::with_truths(board, truths, rng))
    }

    pub fn from_scenario(scenario: &Scenario) -> Result<Self, ScenarioError> {
        Self::new(
            scenario.board.unwrap_or(BoardType::Pfeb),
            scenario.seed.unwrap_or(0),
            scenario,
        )
    }

    fn with_truths(board: BoardType, truths: Vec<VmmTruth>, rng: ChaCha8Rng) -> Self {
        let descriptor = BoardDescriptor::from(board);
        let vmms = truths
            .into_iter()
            .enumerate()
            .map(|(i, t)| VmmModel::new(i as u8, t))
            .collect();
        let signal_board = SignalBoardState::default();
        let subset = signal_board.random_subset(descriptor.n_channels);
        Self {
            descriptor,
            vmms,
            rng,
            running: false,
            signal_board,
            subset,
            tick: 0,
            next_seq: 1,
            pending_hits: Vec::with_capacity(MAX_HITS_PER_FRAME),
            hits_emitted: 0,
        }
    }

    pub fn descriptor(&self) -> BoardDescriptor {
        self.descriptor
    }

    pub fn vmm(&self, i: usize) -> &VmmModel {
        &self.vmms[i]
    }

    pub fn configs(&self) -> Vec<VmmConfig> {
        self.vmms.iter().map(|v| v.config().clone()).collect()
    }

    pub fn truths(&self) -> Vec<VmmTruth> {
        self.vmms.iter().map(|v| v.truth().clone()).collect()
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn signal_board(&self) -> &SignalBoardState {
        &self.signal_board
    }

    pub fn hits_emitted(&self) -> u64 {
        self.hits_emitted
    }

    pub fn set_fault(&mut self, vmm: usize, channel: usize, fault: Fault) -> Result<(), DeviceError> {
        self.vmms
            .get_mut(vmm)
            .ok_or(DeviceError::ChannelOutOfRange(vmm * CHANNELS_PER_VMM + channel))?
            .set_fault(channel, fault)
    }

    fn fresh_seq(&mut self) -> u32 {
        let s = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        s
    }

    fn reply(&mut self, message: Message, emit: &mut Emit<'_>) {
        let seq = self.fresh_seq();
        emit(Frame::new(seq, message));
    }

    fn error(&mut self, code: u16, seq_ref: u32, emit: &mut Emit<'_>) {
        self.reply(Message::Error { code, seq_ref }, emit);
    }

    fn status(&self) -> Message {
        Message::StatusResp {
            board_type: self.descriptor.board_type.wire_code(),
            n_vmm: self.descriptor.n_vmm as u8,
            run_state: self.running as u8,
            fw: FIRMWARE_VERSION,
        }
    }

    fn push_hit(&mut self, hit: HitRecord, emit: &mut Emit<'_>) {
        self.pending_hits.push(hit);
        if self.pending_hits.len() == MAX_HITS_PER_FRAME {
            self.flush_hits(emit);
        }
    }

    fn flush_hits(&mut self, emit: &mut Emit<'_>) {
        if self.pending_hits.is_empty() {
            return;
        }
        let hits = std::mem::replace(&mut self.pending_hits, Vec::with_capacity(MAX_HITS_PER_FRAME));
        self.hits_emitted += hits.len() as u64;
        self.reply(Message::HitData(hits), emit);
    }

    /// Handles raw bytes; undecodable frames with a readable header get an
    /// ERROR(malformed) reply, anything else is dropped.
    pub fn handle_bytes(&mut self, bytes: &[u8], emit: &mut Emit<'_>) {
        match decode_frame(bytes) {
            Ok(frame) => self.handle_frame(&frame, emit),
            Err(e) => {
                debug!("undecodable frame: {e}");
                if let Ok(h) = decode_header(bytes) {
                    self.error(error_code::MALFORMED, h.seq, emit);
                }
            }
        }
    }

    /// Convenience wrapper collecting every response frame.
    pub fn respond(&mut self, frame: &Frame) -> Vec<Frame> {
        let mut out = Vec::new();
        self.handle_frame(frame, &mut |f| out.push(f));
        out
    }

    pub fn handle_frame(&mut self, frame: &Frame, emit: &mut Emit<'_>) {
        let seq = frame.seq;
        let n_vmm = self.descriptor.n_vmm;
        match &frame.message {
            Message::ConfigWrite { vmm, bitstream } => {
                if *vmm as usize >= n_vmm {
                    return self.error(error_code::BAD_VMM, seq, emit);
                }
                match config::decode(&bitstream[..]) {
                    Ok(cfg) => {
                        self.vmms[*vmm as usize].apply_config(cfg);
                        let crc = crc32(&bitstream[..]);
                        self.reply(Message::ConfigAck { vmm: *vmm, crc }, emit);
                    }
                    Err(_) => self.error(error_code::MALFORMED, seq, emit),
                }
            }
            Message::RunStart => {
                self.running = true;
                let status = self.status();
                self.reply(status, emit);
            }
            Message::RunStop => {
                self.flush_hits(emit);
                self.running = false;
                let status = self.status();
                self.reply(status, emit);
            }
            Message::XadcReq { vmm, n_samples } => {
                if *vmm as usize >= n_vmm {
                    return self.error(error_code::BAD_VMM, seq, emit);
                }
                if *n_samples as usize > MAX_XADC_SAMPLES {
                    return self.error(error_code::MALFORMED, seq, emit);
                }
                let result = {
                    let model = &self.vmms[*vmm as usize];
                    let g = &model.config().global;
                    if !g.monitor_enable {
                        Err(error_code::MONITOR_DISABLED)
                    } else if g.monitor_mux > MUX_REFERENCE {
                        Err(error_code::RESERVED_MUX)
                    } else {
                        let rng = &mut self.rng;
                        Ok((0..*n_samples)
                            .map(|_| model.sample_monitor(rng).expect("monitor checked above"))
                            .collect::<Vec<u16>>())
                    }
                };
                let codes = match result {
                    Ok(codes) => codes,
                    Err(code) => return self.error(code, seq, emit),
                };
                self.reply(Message::XadcResp { vmm: *vmm, codes }, emit);
            }
            Message::PulseTrigger { count, period_us } => {
                if !self.running {
                    return self.error(error_code::NOT_RUNNING, seq, emit);
                }
                self.fire(*count, *period_us, emit);
            }
            Message::SigboardSet {
                mode,
                amplitude_counts,
                seed,
            } => {
                let Some(mode) = SignalMode::from_code(*mode) else {
                    return self.error(error_code::MALFORMED, seq, emit);
                };
                if *amplitude_counts > 1023 {
                    return self.error(error_code::MALFORMED, seq, emit);
                }
                self.signal_board = SignalBoardState {
                    mode,
                    amplitude_counts: *amplitude_counts,
                    pattern_seed: *seed as u64,
                };
                self.subset = self.signal_board.random_subset(self.descriptor.n_channels);
                let status = self.status();
                self.reply(status, emit);
            }
            Message::StatusReq => {
                let status = self.status();
                self.reply(status, emit);
            }
            Message::ConfigAck { .. }
            | Message::HitData(_)
            | Message::XadcResp { .. }
            | Message::StatusResp { .. }
            | Message::Error { .. } => self.error(error_code::MALFORMED, seq, emit),
        }
    }

    /// Fires `count` pulse cycles: internal pulser on test-pulse-enabled
    /// channels plus the signal board pattern. Each cycle spans `period_us`
    /// sampling ticks (at least one); stuck channels fire once per tick.
    pub fn fire(&mut self, count: u32, period_us: u32, emit: &mut Emit<'_>) {
        let ticks_per_pulse = period_us.max(1) as u64;
        let n = self.descriptor.n_channels;
        let stuck: Vec<(usize, usize)> = self
            .vmms
            .iter()
            .enumerate()
            .flat_map(|(v, m)| m.stuck_channels().map(move |c| (v, c)))
            .collect();
        for i in 0..count {
            let bcid = (self.tick % BCID_MODULUS) as u16;
            for v in 0..self.vmms.len() {
                for c in 0..CHANNELS_PER_VMM {
                    let board_ch = v * CHANNELS_PER_VMM + c;
                    let external = self.signal_board.charge_fc(board_ch, i, count, n, &self.subset);
                    let model = &self.vmms[v];
                    let internal = model.config().channels[c].test_pulse_enable;
                    let (stimulus, flags) = match (internal, external) {
                        (false, None) => continue,
                        (true, None) => (Stimulus::Internal, 0),
                        (false, Some(q)) => (Stimulus::External { charge_fc: q }, 0),
                        (true, Some(q)) => (
                            Stimulus::External {
                                charge_fc: q + model.pulser_charge_fc(),
                            },
                            FLAG_INTERNAL_PULSE,
                        ),
                    };
                    let hit = model
                        .inject_pulse(c, stimulus, bcid, &mut self.rng)
                        .expect("channel index in range");
                    if let Some(mut hit) = hit {
                        hit.flags |= flags;
                        self.push_hit(hit, emit);
                    }
                }
            }
            for t in 0..ticks_per_pulse {
                let bcid = ((self.tick + t) % BCID_MODULUS) as u16;
                for &(v, c) in &stuck {
                    if let Some(hit) = self.vmms[v].stuck_hit(c, bcid, &mut self.rng) {
                        self.push_hit(hit, emit);
                    }
                }
            }
            self.tick += ticks_per_pulse;
        }
        self.flush_hits(emit);
    }
}

/// Datagram-style server endpoint for [`run_loop`].
pub trait ServerTransport {
    type Peer: Copy + Send + 'static;

    /// Waits up to `timeout` for one request.
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<(Vec<u8>, Self::Peer)>>;

    /// Queues one response; may block for backpressure.
    fn send(&mut self, peer: Self::Peer, bytes: Vec<u8>) -> io::Result<()>;
}

/// Serves frames until `shutdown` is set or the transport reports
/// `BrokenPipe`. Transport errors on individual peers are logged and the
/// loop keeps serving.
pub fn run_loop<T: ServerTransport>(emulator: &mut Emulator, transport: &mut T, shutdown: &AtomicBool) {
    while !shutdown.load(Ordering::Relaxed) {
        let (bytes, peer) = match transport.recv(Duration::from_millis(50)) {
            Ok(Some(req)) => req,
            Ok(None) => continue,
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
            Err(e) => {
                warn!("receive failed: {e}");
                continue;
            }
        };
        let mut send_failed = false;
        emulator.handle_bytes(&bytes, &mut |frame| {
            if send_failed {
                return;
            }
            let encoded = encode_frame(&frame).expect("emulator frames are valid");
            if let Err(e) = transport.send(peer, encoded) {
                warn!("send failed: {e}");
                send_failed = true;
            }
        });
    }
}

/// UDP binding: receive inline, transmit from a dedicated thread behind a
/// bounded queue.
pub struct UdpServer {
    socket: UdpSocket,
    tx: Sender<(SocketAddr, Vec<u8>)>,
    sender: Option<thread::JoinHandle<()>>,
}

const TX_QUEUE_FRAMES: usize = 8;

impl UdpServer {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        let out = socket.try_clone()?;
        let (tx, rx) = bounded::<(SocketAddr, Vec<u8>)>(TX_QUEUE_FRAMES);
        let sender = thread::Builder::new()
            .name("feb-emu-tx".into())
            .spawn(move || {
                for (peer, bytes) in rx {
                    if let Err(e) = out.send_to(&bytes, peer) {
                        warn!("send to {peer} failed: {e}");
                    }
                }
            })?;
        Ok(Self {
            socket,
            tx,
            sender: Some(sender),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }
}

impl ServerTransport for UdpServer {
    type Peer = SocketAddr;

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<(Vec<u8>, SocketAddr)>> {
        self.socket.set_read_timeout(Some(timeout))?;
        let mut buf = vec![0u8; 65_536];
        match self.socket.recv_from(&mut buf) {
            Ok((n, peer)) => {
                buf.truncate(n);
                Ok(Some((buf, peer)))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, peer: SocketAddr, bytes: Vec<u8>) -> io::Result<()> {
        self.tx
            .send((peer, bytes))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "transmit thread gone"))
    }
}

impl Drop for UdpServer {
    fn drop(&mut self) {
        let (dead_tx, _) = bounded(1);
        drop(std::mem::replace(&mut self.tx, dead_tx));
        if let Some(h) = self.sender.take() {
            let _ = h.join();
        }
    }
}

/// In-memory binding: requests in, responses out over bounded channels.
pub struct ChannelServer {
    pub requests: Receiver<Vec<u8>>,
    pub responses: Sender<Vec<u8>>,
}

impl ServerTransport for ChannelServer {
    type Peer = ();

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<(Vec<u8>, ())>> {
        match self.requests.recv_timeout(timeout) {
            Ok(b) => Ok(Some((b, ()))),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Ok(None),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => {
                Err(io::Error::new(io::ErrorKind::BrokenPipe, "client gone"))
            }
        }
    }

    fn send(&mut self, _: (), bytes: Vec<u8>) -> io::Result<()> {
        self.responses
            .send(bytes)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "client gone"))
    }
}

/// A UDP emulator running on its own thread.
pub struct EmulatorHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<Emulator>>,
}

impl EmulatorHandle {
    pub fn spawn_udp(mut emulator: Emulator, listen: &str) -> io::Result<Self> {
        let mut server = UdpServer::bind(listen)?;
        let addr = server.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let thread = thread::Builder::new()
            .name("feb-emu".into())
            .spawn(move || {
                run_loop(&mut emulator, &mut server, &flag);
                emulator
            })?;
        Ok(Self {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the loop and hands back the emulator state.
    pub fn stop(mut self) -> Emulator {
        self.shutdown.store(true, Ordering::Relaxed);
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("emulator thread panicked")
    }
}

impl Drop for EmulatorHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
