//! Client side of the wire protocol: a frame link to one board.
//!
//! Frame receipt runs on a dedicated acquisition thread which appends to the
//! transcript, feeds the optional hit tap and forwards decoded frames through
//! a bounded queue to whoever drives the link.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};
use thiserror::Error;

use crate::device::HitRecord;
use crate::emulator::{run_loop, ChannelServer, Emulator};
use crate::wire::{decode_frame, encode_frame, hex_dump, EncodeError, Frame, Message};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("encode: {0}")]
    Encode(#[from] EncodeError),
    #[error("link closed")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tx,
    Rx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Raw frames exchanged over a link, in order of send/receipt.
#[derive(Debug, Default, Clone)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// One frame per line: `tx|rx <hex bytes>`.
    pub fn to_hex_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(match e.direction {
                Direction::Tx => "tx ",
                Direction::Rx => "rx ",
            });
            out.push_str(&hex_dump(&e.bytes).replace('\n', " "));
            out.push('\n');
        }
        out
    }

    pub fn parse_hex_text(text: &str) -> Result<Self, String> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (dir, hex) = l.split_once(' ').ok_or("missing direction")?;
                let direction = match dir {
                    "tx" => Direction::Tx,
                    "rx" => Direction::Rx,
                    other => return Err(format!("bad direction `{other}`")),
                };
                Ok(TranscriptEntry {
                    direction,
                    bytes: crate::wire::parse_hex(hex)?,
                })
            })
            .collect::<Result<_, String>>()?;
        Ok(Self { entries })
    }

    /// Decoded received frames, skipping anything undecodable.
    pub fn received(&self) -> impl Iterator<Item = Frame> + '_ {
        self.entries
            .iter()
            .filter(|e| e.direction == Direction::Rx)
            .filter_map(|e| decode_frame(&e.bytes).ok())
    }
}

pub type HitTap = Arc<dyn Fn(&[HitRecord]) + Send + Sync>;

#[derive(Clone)]
pub struct LinkOptions {
    /// Keep every raw frame for later inspection.
    pub record_transcript: bool,
    /// Called on the acquisition thread for each HIT_DATA batch.
    pub hit_tap: Option<HitTap>,
    /// Bound of the acquisition-to-consumer frame queue.
    pub queue_frames: usize,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self {
            record_transcript: true,
            hit_tap: None,
            queue_frames: 256,
        }
    }
}

trait Outbound: Send {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()>;
}

struct UdpOut(UdpSocket);

impl Outbound for UdpOut {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.send(bytes).map(|_| ())
    }
}

struct ChannelOut(Option<Sender<Vec<u8>>>);

impl Outbound for ChannelOut {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0
            .as_ref()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "closed"))?
            .send(bytes.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "emulator gone"))
    }
}

pub struct Link {
    name: String,
    out: Box<dyn Outbound>,
    inbound: Receiver<Frame>,
    transcript: Arc<Mutex<Transcript>>,
    record: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    reader: Option<thread::JoinHandle<()>>,
    emulator: Option<thread::JoinHandle<Emulator>>,
}

struct Acquisition {
    transcript: Arc<Mutex<Transcript>>,
    record: Arc<AtomicBool>,
    tap: Option<HitTap>,
    forward: Sender<Frame>,
}

impl Acquisition {
    /// Returns false once the consumer side is gone.
    fn accept(&self, bytes: Vec<u8>) -> bool {
        let frame = decode_frame(&bytes);
        if self.record.load(Ordering::Relaxed) {
            self.transcript.lock().expect("transcript lock").entries.push(TranscriptEntry {
                direction: Direction::Rx,
                bytes,
            });
        }
        match frame {
            Ok(frame) => {
                if let (Some(tap), Message::HitData(hits)) = (&self.tap, &frame.message) {
                    tap(hits);
                }
                self.forward.send(frame).is_ok()
            }
            Err(e) => {
                debug!("dropping undecodable frame: {e}");
                true
            }
        }
    }
}

impl Link {
    /// Connects to a board over UDP.
    pub fn udp(endpoint: &str, options: LinkOptions) -> Result<Self, LinkError> {
        let remote: SocketAddr = endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let local = if remote.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
        let socket = UdpSocket::bind(local)?;
        socket.connect(remote)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let rx_socket = socket.try_clone()?;

        let (forward, inbound) = bounded(options.queue_frames);
        let transcript = Arc::new(Mutex::new(Transcript::default()));
        let record = Arc::new(AtomicBool::new(options.record_transcript));
        let stop = Arc::new(AtomicBool::new(false));
        let acq = Acquisition {
            transcript: transcript.clone(),
            record: record.clone(),
            tap: options.hit_tap.clone(),
            forward,
        };
        let stop_flag = stop.clone();
        let reader = thread::Builder::new()
            .name("feb-link-rx".into())
            .spawn(move || {
                let mut buf = vec![0u8; 65_536];
                while !stop_flag.load(Ordering::Relaxed) {
                    match rx_socket.recv(&mut buf) {
                        Ok(n) => {
                            if !acq.accept(buf[..n].to_vec()) {
                                break;
                            }
                        }
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                        Err(e) => {
                            // ICMP unreachable surfaces here while the board is down
                            debug!("udp receive: {e}");
                            thread::sleep(Duration::from_millis(5));
                        }
                    }
                }
            })?;
        Ok(Self {
            name: format!("udp://{remote}"),
            out: Box::new(UdpOut(socket)),
            inbound,
            transcript,
            record,
            stop,
            reader: Some(reader),
            emulator: None,
        })
    }

    /// Runs `emulator` on its own thread connected through in-memory queues.
    pub fn in_process(mut emulator: Emulator, options: LinkOptions) -> Self {
        let (req_tx, req_rx) = bounded::<Vec<u8>>(64);
        let (resp_tx, resp_rx) = bounded::<Vec<u8>>(16);
        let emu_thread = thread::Builder::new()
            .name("feb-emu-mem".into())
            .spawn(move || {
                let mut server = ChannelServer {
                    requests: req_rx,
                    responses: resp_tx,
                };
                run_loop(&mut emulator, &mut server, &AtomicBool::new(false));
                emulator
            })
            .expect("spawn emulator thread");

        let (forward, inbound) = bounded(options.queue_frames);
        let transcript = Arc::new(Mutex::new(Transcript::default()));
        let record = Arc::new(AtomicBool::new(options.record_transcript));
        let acq = Acquisition {
            transcript: transcript.clone(),
            record: record.clone(),
            tap: options.hit_tap.clone(),
            forward,
        };
        let reader = thread::Builder::new()
            .name("feb-link-rx".into())
            .spawn(move || {
                for bytes in resp_rx {
                    if !acq.accept(bytes) {
                        break;
                    }
                }
            })
            .expect("spawn reader thread");
        static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        Self {
            name: format!("mem://{}", NEXT.fetch_add(1, Ordering::Relaxed)),
            out: Box::new(ChannelOut(Some(req_tx))),
            inbound,
            transcript,
            record,
            stop: Arc::new(AtomicBool::new(false)),
            reader: Some(reader),
            emulator: Some(emu_thread),
        }
    }

    /// Endpoint identity, used for per-endpoint scan locking.
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), LinkError> {
        let bytes = encode_frame(frame)?;
        if self.record.load(Ordering::Relaxed) {
            self.transcript.lock().expect("transcript lock").entries.push(TranscriptEntry {
                direction: Direction::Tx,
                bytes: bytes.clone(),
            });
        }
        self.out.send(&bytes)?;
        Ok(())
    }

    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Frame>, LinkError> {
        match self.inbound.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Closed),
        }
    }

    /// Starts or stops transcript capture; frames already captured are kept.
    pub fn set_recording(&self, on: bool) {
        self.record.store(on, Ordering::Relaxed);
    }

    pub fn is_recording(&self) -> bool {
        self.record.load(Ordering::Relaxed)
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Returns and clears the transcript collected so far.
    pub fn take_transcript(&self) -> Transcript {
        std::mem::take(&mut *self.transcript.lock().expect("transcript lock"))
    }

    /// Shuts the link down. For in-process links the emulator is returned.
    pub fn close(mut self) -> Option<Emulator> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Option<Emulator> {
        self.stop.store(true, Ordering::Relaxed);
        // dropping the request sender ends the in-process emulator loop
        self.out = Box::new(ChannelOut(None));
        // dropping the queue receiver unblocks a reader parked on a full queue
        let (_, empty) = bounded(0);
        drop(std::mem::replace(&mut self.inbound, empty));
        if let Some(r) = self.reader.take() {
            if r.join().is_err() {
                warn!("link reader panicked");
            }
        }
        self.emulator.take().map(|h| h.join().expect("emulator thread"))
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        self.shutdown();
    }
}
