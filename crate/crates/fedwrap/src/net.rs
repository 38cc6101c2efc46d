//! TCP transport: a [`Link`] for the coordinator and the client agent loop.
//!
//! Each accepted connection gets a reader thread that decodes frames and
//! forwards them over a channel; the coordinator thread is the only one
//! touching the protocol state.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use fedwrap_core::federation::{Clock, Evaluator, FederationError, FederationOutcome, FederationPlan};
use fedwrap_core::model::ParamBlock;
use fedwrap_core::runtime::client::{ClientError, ClientSession, SessionOutput};
use fedwrap_core::runtime::protocol::{encode, FrameDecoder, DEFAULT_MAX_FRAME};
use fedwrap_core::runtime::server::{coordinate, ConnId, CoordinatorSetup, Link, LinkEvent};
use fedwrap_core::wrapper::WrapperMode;

use crate::{Error, Result};

/// Milliseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { start: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

const POLL_SLICE: Duration = Duration::from_millis(50);

type Writers = Arc<Mutex<BTreeMap<ConnId, TcpStream>>>;

/// Server side of the TCP transport.
pub struct TcpLink {
    addr: SocketAddr,
    events: Receiver<LinkEvent>,
    writers: Writers,
    clock: WallClock,
    interrupt: Arc<AtomicBool>,
}

impl TcpLink {
    pub fn bind(addr: SocketAddr, clock: WallClock, interrupt: Arc<AtomicBool>) -> Result<TcpLink> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Bind { addr: addr.to_string(), source: e })?;
        let local = listener.local_addr().map_err(|e| Error::Bind { addr: addr.to_string(), source: e })?;
        let (tx, rx) = mpsc::channel();
        let writers: Writers = Arc::default();
        let acceptor_writers = Arc::clone(&writers);
        thread::spawn(move || accept_loop(listener, tx, acceptor_writers));
        Ok(TcpLink { addr: local, events: rx, writers, clock, interrupt })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<LinkEvent>, writers: Writers) {
    let next = AtomicU64::new(1);
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let conn = next.fetch_add(1, Ordering::Relaxed);
        let Ok(writer) = stream.try_clone() else { continue };
        let _ = stream.set_nodelay(true);
        writers.lock().expect("writer map").insert(conn, writer);
        if tx.send(LinkEvent::Connected(conn)).is_err() {
            return;
        }
        let tx = tx.clone();
        thread::spawn(move || read_loop(conn, stream, tx));
    }
}

fn read_loop(conn: ConnId, mut stream: TcpStream, tx: Sender<LinkEvent>) {
    let mut decoder = FrameDecoder::new(DEFAULT_MAX_FRAME);
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                decoder.push(&buf[..n]);
                while let Some(r) = decoder.next_message() {
                    if tx.send(LinkEvent::Frame(conn, r)).is_err() {
                        return;
                    }
                }
                if decoder.is_poisoned() {
                    break;
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    let _ = tx.send(LinkEvent::Disconnected(conn));
}

impl Link for TcpLink {
    fn poll(&mut self, deadline_ms: u64) -> Result<Option<LinkEvent>, FederationError> {
        loop {
            if self.interrupt.load(Ordering::SeqCst) {
                return Err(FederationError::Interrupted);
            }
            let now = self.clock.now_ms();
            if now >= deadline_ms {
                return Ok(self.events.try_recv().ok());
            }
            let wait = Duration::from_millis(deadline_ms - now).min(POLL_SLICE);
            match self.events.recv_timeout(wait) {
                Ok(ev) => return Ok(Some(ev)),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FederationError::Transport("listener stopped".into()))
                }
            }
        }
    }

    fn send(&mut self, conn: ConnId, frame: Vec<u8>) {
        let mut writers = self.writers.lock().expect("writer map");
        if let Some(w) = writers.get_mut(&conn) {
            if w.write_all(&frame).is_err() {
                writers.remove(&conn);
            }
        }
    }

    fn close(&mut self, conn: ConnId) {
        if let Some(w) = self.writers.lock().expect("writer map").remove(&conn) {
            let _ = w.shutdown(Shutdown::Both);
        }
    }
}

/// A bound coordinator waiting to run.
pub struct Server {
    link: TcpLink,
    clock: WallClock,
}

impl Server {
    pub fn bind(addr: SocketAddr, interrupt: Arc<AtomicBool>) -> Result<Server> {
        let clock = WallClock::new();
        Ok(Server { link: TcpLink::bind(addr, clock, interrupt)?, clock })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.link.local_addr()
    }

    pub fn run(
        mut self,
        plan: &FederationPlan,
        mode: WrapperMode,
        token: &str,
        initial: Vec<ParamBlock>,
        evaluator: &mut Evaluator<'_>,
    ) -> Result<FederationOutcome> {
        let setup = CoordinatorSetup { plan, mode, token, initial };
        let out = coordinate(&mut self.link, setup, &self.clock, evaluator);
        // Let queued Done / Error frames drain before the sockets drop.
        let writers: Vec<TcpStream> = std::mem::take(&mut *self.link.writers.lock().expect("writer map")).into_values().collect();
        for w in writers {
            let _ = w.shutdown(Shutdown::Write);
        }
        Ok(out?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClientTimeouts {
    pub connect: Duration,
    /// Longest silence tolerated from the server.
    pub idle: Duration,
}

/// Drives `session` over a fresh connection to `addr` until it finishes.
/// Connection failures surface as [`Error::Connect`]; everything after the
/// handshake is reported through the session.
pub fn run_session(mut session: ClientSession, addr: SocketAddr, timeouts: ClientTimeouts) -> Result<SessionOutput> {
    let mut stream = TcpStream::connect_timeout(&addr, timeouts.connect)
        .map_err(|e| Error::Connect { addr: addr.to_string(), source: e })?;
    let _ = stream.set_nodelay(true);
    stream.set_read_timeout(Some(timeouts.idle)).map_err(|e| Error::Connect { addr: addr.to_string(), source: e })?;
    if let Err(e) = stream.write_all(&encode(&session.register())) {
        session.connection_lost(&e.to_string());
        return Ok(session.outcome()?);
    }
    let mut decoder = FrameDecoder::new(DEFAULT_MAX_FRAME);
    let mut buf = vec![0u8; 64 * 1024];
    'outer: while !session.is_done() {
        let n = match stream.read(&mut buf) {
            Ok(0) => {
                session.connection_lost("server closed the connection");
                break;
            }
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => {
                session.connection_lost(&e.to_string());
                break;
            }
        };
        decoder.push(&buf[..n]);
        while let Some(r) = decoder.next_message() {
            let msg = match r {
                Ok(m) => m,
                Err(e) => {
                    session.connection_lost(&format!("undecodable frame: {e}"));
                    break 'outer;
                }
            };
            for reply in session.handle(msg) {
                if let Err(e) = stream.write_all(&encode(&reply)) {
                    session.connection_lost(&e.to_string());
                    break 'outer;
                }
            }
            if session.is_done() {
                break 'outer;
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    session.outcome().map_err(|e: ClientError| e.into())
}
