//! Measurement responder: admits tests up to a configured limit, sources or
//! sinks data on each test's connections, answers latency echoes and reports
//! its own load.
//!
//! Every connection opens with a frame. A `start_data` first frame makes it a
//! data connection for an existing session; anything else makes it a control
//! connection. See [`wire`] for the byte layout.

pub mod wire;

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use self::wire::{
    ControlMessage, Direction, FrameKind, FrameReader, HelloDecodeError, HelloParams, LoadReport,
    Nonce, RefuseReason, TransferSummary, WireError, PROTOCOL_VERSION,
};

/// Peak rate one test is expected to draw when sizing admission from a
/// capacity hint.
pub const DEFAULT_PER_TEST_PEAK_BPS: f64 = 1e9;
const DATA_CHUNK: usize = 64 * 1024;
/// How long a download keeps streaming past the test duration, to cover
/// the client's connection setup.
const DATA_SLACK: Duration = Duration::from_secs(1);
const POLL: Duration = Duration::from_millis(100);
/// Longest a download waits for its sibling connections before streaming.
const ATTACH_WAIT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ResponderConfig {
    pub listen: SocketAddr,
    pub max_tests: u32,
    pub capacity_hint_bps: Option<f64>,
    pub max_connections_per_test: u16,
    pub max_duration: Duration,
    /// Added to a test's duration to form its session deadline.
    pub session_grace: Duration,
    /// Upper bound on waiting for data connections to drain at `done`.
    pub done_wait: Duration,
}

impl ResponderConfig {
    pub fn new(listen: SocketAddr, max_tests: u32) -> Self {
        Self {
            listen,
            max_tests,
            capacity_hint_bps: None,
            max_connections_per_test: 64,
            max_duration: Duration::from_secs(300),
            session_grace: Duration::from_secs(5),
            done_wait: Duration::from_secs(5),
        }
    }

    /// Admission limit derived from the server's capacity: how many tests
    /// at `per_test_peak_bps` fit, never fewer than one.
    pub fn admission_limit(capacity_hint_bps: f64, per_test_peak_bps: f64) -> u32 {
        ((capacity_hint_bps / per_test_peak_bps).floor() as u32).max(1)
    }

    pub fn from_capacity_hint(listen: SocketAddr, capacity_hint_bps: f64) -> Self {
        let mut config = Self::new(
            listen,
            Self::admission_limit(capacity_hint_bps, DEFAULT_PER_TEST_PEAK_BPS),
        );
        config.capacity_hint_bps = Some(capacity_hint_bps);
        config
    }
}

/// One admitted test.
#[derive(Debug)]
pub struct SessionState {
    pub nonce: Nonce,
    pub direction: Direction,
    pub duration: Duration,
    pub expected_connections: u16,
    attached_connections: AtomicU16,
    created: Instant,
    pub deadline: Instant,
    first_attach: OnceLock<Instant>,
    bytes: AtomicU64,
    live: AtomicUsize,
    last_end_us: AtomicU64,
    stop: AtomicBool,
}

impl SessionState {
    pub fn attached_connections(&self) -> u16 {
        self.attached_connections.load(Ordering::SeqCst)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::SeqCst)
    }

    fn stop_streaming_at(&self) -> Instant {
        let start = *self.first_attach.get().unwrap_or(&self.created);
        (start + self.duration + DATA_SLACK).min(self.deadline)
    }

    fn summary(&self) -> TransferSummary {
        let duration_ms = match self.first_attach.get() {
            Some(start) => {
                let end = self.created + Duration::from_micros(self.last_end_us.load(Ordering::SeqCst));
                end.saturating_duration_since(*start).as_millis() as u32
            }
            None => 0,
        };
        TransferSummary {
            bytes: self.bytes(),
            duration_ms,
            connections: self.attached_connections(),
        }
    }

    fn mark_handler_end(&self) {
        let us = self.created.elapsed().as_micros() as u64;
        self.last_end_us.fetch_max(us, Ordering::SeqCst);
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Admission control and session bookkeeping, independent of sockets.
#[derive(Debug)]
pub struct SessionTable {
    max_tests: u32,
    max_connections: u16,
    max_duration: Duration,
    grace: Duration,
    sessions: Mutex<HashMap<Nonce, Arc<SessionState>>>,
}

impl SessionTable {
    pub fn new(config: &ResponderConfig) -> Self {
        Self {
            max_tests: config.max_tests,
            max_connections: config.max_connections_per_test,
            max_duration: config.max_duration,
            grace: config.session_grace,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(&self) -> LoadReport {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        reap(&mut sessions, Instant::now());
        LoadReport {
            active_tests: sessions.len() as u32,
            max_tests: self.max_tests,
        }
    }

    /// Admits or refuses a test. Admission check and insertion happen under
    /// one lock, so concurrent hellos can never overshoot `max_tests`.
    pub fn handle_hello(&self, nonce: Nonce, payload: &[u8]) -> ControlMessage {
        match self.admit(nonce, payload) {
            Ok((_, load)) => ControlMessage::HelloAck { nonce, load },
            Err(reason) => ControlMessage::Refuse { nonce, reason },
        }
    }

    fn admit(&self, nonce: Nonce, payload: &[u8]) -> Result<(Arc<SessionState>, LoadReport), RefuseReason> {
        let params = match ControlMessage::decode_hello(payload) {
            Ok(p) => p,
            Err(HelloDecodeError::Version(v)) => {
                debug!("refusing hello with protocol version {v}");
                return Err(RefuseReason::VersionMismatch);
            }
            Err(HelloDecodeError::Malformed) => return Err(RefuseReason::BadParams),
        };
        self.check_params(&params)?;
        let now = Instant::now();
        let duration = Duration::from_millis(u64::from(params.duration_ms));
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        reap(&mut sessions, now);
        if sessions.contains_key(&nonce) {
            return Err(RefuseReason::BadParams);
        }
        if sessions.len() as u32 >= self.max_tests {
            return Err(RefuseReason::AtCapacity);
        }
        let session = Arc::new(SessionState {
            nonce,
            direction: params.direction,
            duration,
            expected_connections: params.n_connections,
            attached_connections: AtomicU16::new(0),
            created: now,
            deadline: now + duration + self.grace,
            first_attach: OnceLock::new(),
            bytes: AtomicU64::new(0),
            live: AtomicUsize::new(0),
            last_end_us: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        });
        sessions.insert(nonce, Arc::clone(&session));
        let load = LoadReport {
            active_tests: sessions.len() as u32,
            max_tests: self.max_tests,
        };
        Ok((session, load))
    }

    fn check_params(&self, p: &HelloParams) -> Result<(), RefuseReason> {
        debug_assert_eq!(p.version, PROTOCOL_VERSION);
        let duration = Duration::from_millis(u64::from(p.duration_ms));
        if p.n_connections == 0
            || p.n_connections > self.max_connections
            || p.duration_ms == 0
            || duration > self.max_duration
        {
            return Err(RefuseReason::BadParams);
        }
        Ok(())
    }

    /// Binds a data connection to its session. Unknown nonces, expired
    /// sessions and surplus connections leave the table untouched.
    fn attach(&self, nonce: Nonce) -> Result<(Arc<SessionState>, u16), RefuseReason> {
        let now = Instant::now();
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        reap(&mut sessions, now);
        let session = sessions.get(&nonce).ok_or(RefuseReason::BadParams)?;
        let index = session.attached_connections.load(Ordering::SeqCst);
        if index >= session.expected_connections {
            return Err(RefuseReason::BadParams);
        }
        session.attached_connections.store(index + 1, Ordering::SeqCst);
        session.live.fetch_add(1, Ordering::SeqCst);
        session.first_attach.get_or_init(|| now);
        Ok((Arc::clone(session), index))
    }

    fn remove(&self, nonce: &Nonce) {
        let removed = self.sessions.lock().expect("session table poisoned").remove(nonce);
        if let Some(s) = removed {
            s.stop.store(true, Ordering::SeqCst);
        }
    }

    pub fn get(&self, nonce: &Nonce) -> Option<Arc<SessionState>> {
        self.sessions.lock().expect("session table poisoned").get(nonce).cloned()
    }
}

fn reap(sessions: &mut HashMap<Nonce, Arc<SessionState>>, now: Instant) {
    sessions.retain(|nonce, s| {
        let keep = now < s.deadline;
        if !keep {
            debug!("reaping session {nonce} past its deadline");
            s.stop.store(true, Ordering::SeqCst);
        }
        keep
    });
}

/// Deterministic, uncompressible payload for one connection of a session.
pub struct PayloadSource {
    rng: ChaCha8Rng,
}

impl PayloadSource {
    pub fn new(nonce: Nonce, connection_index: u16) -> Self {
        let mut seed = [0u8; 32];
        seed[..16].copy_from_slice(&nonce.0);
        seed[16..].copy_from_slice(&nonce.0);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(u64::from(connection_index));
        Self { rng }
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }

    pub fn take(&mut self, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.fill(&mut v);
        v
    }
}

pub struct Responder {
    listener: TcpListener,
    config: ResponderConfig,
    table: Arc<SessionTable>,
    shutdown: Arc<AtomicBool>,
}

impl Responder {
    pub fn bind(config: ResponderConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(config.listen)?;
        Ok(Self {
            listener,
            table: Arc::new(SessionTable::new(&config)),
            config,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn table(&self) -> Arc<SessionTable> {
        Arc::clone(&self.table)
    }

    /// Accepts connections until shut down, one thread per connection.
    pub fn run(self) -> io::Result<()> {
        info!(
            "responder listening on {} (max {} tests)",
            self.local_addr()?,
            self.config.max_tests
        );
        for stream in self.listener.incoming() {
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let table = Arc::clone(&self.table);
            let done_wait = self.config.done_wait;
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &table, done_wait) {
                    debug!("connection from {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> io::Result<ResponderHandle> {
        let addr = self.local_addr()?;
        let table = self.table();
        let shutdown = Arc::clone(&self.shutdown);
        let thread = thread::spawn(move || {
            if let Err(e) = self.run() {
                warn!("responder stopped: {e}");
            }
        });
        Ok(ResponderHandle {
            addr,
            table,
            shutdown,
            thread: Some(thread),
        })
    }
}

/// A responder running on a background thread.
pub struct ResponderHandle {
    addr: SocketAddr,
    table: Arc<SessionTable>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ResponderHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn table(&self) -> &SessionTable {
        &self.table
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ResponderHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop();
        }
    }
}

fn handle_connection(stream: TcpStream, table: &SessionTable, done_wait: Duration) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = FrameReader::new(stream);
    let first = reader.read_frame()?;
    if first.kind == FrameKind::StartData {
        return serve_data(reader, writer, table, first.nonce);
    }
    let mut owned: Option<Arc<SessionState>> = None;
    let mut next = Some(first);
    let result = loop {
        let frame = match next.take() {
            Some(f) => f,
            None => match reader.read_frame() {
                Ok(f) => f,
                Err(WireError::Closed) => break Ok(()),
                Err(e) => break Err(e),
            },
        };
        let nonce = frame.nonce;
        let msg = match ControlMessage::from_frame(frame) {
            Ok(m) => m,
            Err(e) => {
                ControlMessage::Refuse { nonce, reason: RefuseReason::BadParams }.write_to(&mut writer)?;
                break Err(e);
            }
        };
        let reply = match msg {
            ControlMessage::Echo { nonce, payload } => handle_echo(nonce, payload),
            ControlMessage::Hello { nonce, payload } if owned.is_none() => match table.admit(nonce, &payload) {
                Ok((session, load)) => {
                    owned = Some(session);
                    ControlMessage::HelloAck { nonce, load }
                }
                Err(reason) => ControlMessage::Refuse { nonce, reason },
            },
            ControlMessage::Done { nonce, .. } if owned.as_ref().is_some_and(|s| s.nonce == nonce) => {
                let session = owned.take().expect("checked above");
                let summary = finish_session(table, &session, done_wait);
                ControlMessage::Done { nonce, summary: Some(summary) }
            }
            ControlMessage::LoadReport { nonce, load: None } => {
                ControlMessage::LoadReport { nonce, load: Some(table.load()) }
            }
            other => ControlMessage::Refuse { nonce: other.nonce(), reason: RefuseReason::BadParams },
        };
        reply.write_to(&mut writer)?;
    };
    if let Some(session) = owned {
        table.remove(&session.nonce);
    }
    result
}

/// Echo replies carry the request's nonce and payload unchanged.
pub fn handle_echo(nonce: Nonce, payload: Vec<u8>) -> ControlMessage {
    ControlMessage::EchoReply { nonce, payload }
}

fn finish_session(table: &SessionTable, session: &SessionState, wait: Duration) -> TransferSummary {
    let until = Instant::now() + wait;
    while session.live.load(Ordering::SeqCst) > 0 && Instant::now() < until {
        thread::sleep(Duration::from_millis(5));
    }
    table.remove(&session.nonce);
    session.summary()
}

fn serve_data(
    reader: FrameReader<TcpStream>,
    mut writer: TcpStream,
    table: &SessionTable,
    nonce: Nonce,
) -> Result<(), WireError> {
    let (session, index) = match table.attach(nonce) {
        Ok(v) => v,
        Err(reason) => {
            ControlMessage::Refuse { nonce, reason }.write_to(&mut writer)?;
            let _ = writer.shutdown(Shutdown::Both);
            return Ok(());
        }
    };
    let result = (|| {
        ControlMessage::StartData { nonce }.write_to(&mut writer)?;
        let (stream, leftover) = reader.into_parts();
        match session.direction {
            Direction::Download => stream_payload(&mut writer, &session, index),
            Direction::Upload => {
                session.bytes.fetch_add(leftover.len() as u64, Ordering::SeqCst);
                drain(stream, &session)
            }
        }
    })();
    session.mark_handler_end();
    result
}

fn stream_payload(stream: &mut TcpStream, session: &SessionState, index: u16) -> Result<(), WireError> {
    stream.set_write_timeout(Some(POLL))?;
    let mut source = PayloadSource::new(session.nonce, index);
    let mut buf = vec![0u8; DATA_CHUNK];
    // All connections of a download start together.
    let attach_deadline = Instant::now() + ATTACH_WAIT;
    while session.attached_connections() < session.expected_connections
        && Instant::now() < attach_deadline
        && !session.stop.load(Ordering::SeqCst)
    {
        thread::sleep(Duration::from_millis(1));
    }
    let stop_at = session.stop_streaming_at();
    'outer: while Instant::now() < stop_at && !session.stop.load(Ordering::SeqCst) {
        source.fill(&mut buf);
        let mut off = 0;
        while off < buf.len() {
            if Instant::now() >= stop_at || session.stop.load(Ordering::SeqCst) {
                break 'outer;
            }
            match stream.write(&buf[off..]) {
                Ok(0) => break 'outer,
                Ok(n) => {
                    off += n;
                    session.bytes.fetch_add(n as u64, Ordering::SeqCst);
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
                // Client closed its end: the normal end of a download.
                Err(_) => break 'outer,
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    Ok(())
}

fn drain(mut stream: TcpStream, session: &SessionState) -> Result<(), WireError> {
    stream.set_read_timeout(Some(POLL))?;
    let mut buf = vec![0u8; DATA_CHUNK];
    while !session.stop.load(Ordering::SeqCst) && Instant::now() < session.deadline {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                session.bytes.fetch_add(n as u64, Ordering::SeqCst);
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
            Err(_) => break,
        }
    }
    Ok(())
}
