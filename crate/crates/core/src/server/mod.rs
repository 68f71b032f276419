//! Paced WebSocket delivery of ARKit frames.
//!
//! One pacing thread pulls frames from the source and broadcasts one per tick on
//! absolute deadlines; ticks missed by more than a period drop their frames instead of
//! bursting. Each client gets its own thread and a bounded drop-oldest queue, so a
//! stalled client only ever loses its own frames. A session exists from TCP accept;
//! frames are written once the client has sent its hello, and anything queued before
//! that is discarded as dropped.

mod json;

pub use json::{
    config_summary, decode_frame, encode_frame, hello_message, parse_hello, PROTOCOL,
    PROTOCOL_VERSION,
};

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, TryRecvError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{HandshakeError, Message, WebSocket};

use crate::clock::{now_us, sleep_until_us};
use crate::error::{Error, Result};
use crate::frames::ArkitFrame;

pub const DEFAULT_QUEUE_CAPACITY: usize = 128;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    pub fps: f64,
    pub queue_capacity: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            fps: 30.0,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ServerStats {
    /// Frames taken from the source.
    pub frames_in: u64,
    /// Frames broadcast on their tick.
    pub frames_paced: u64,
    /// Frames whose tick was missed.
    pub frames_late: u64,
    pub sessions_opened: u64,
    pub sessions_closed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionStats {
    pub id: u64,
    pub enqueued: u64,
    pub sent: u64,
    pub dropped: u64,
    pub pending: usize,
    pub streaming: bool,
    pub closed: bool,
}

#[derive(Default)]
struct Outbound {
    frames: VecDeque<(u64, Arc<str>)>,
    enqueued: u64,
    sent: u64,
    dropped: u64,
}

struct Session {
    id: u64,
    capacity: usize,
    out: Mutex<Outbound>,
    ready: Condvar,
    streaming: AtomicBool,
    closed: AtomicBool,
}

impl Session {
    fn offer(&self, seq: u64, text: &Arc<str>) {
        let mut q = self.out.lock().unwrap();
        q.enqueued += 1;
        q.frames.push_back((seq, Arc::clone(text)));
        if q.frames.len() > self.capacity {
            q.frames.pop_front();
            q.dropped += 1;
        }
        drop(q);
        self.ready.notify_one();
    }

    fn next(&self, wait: Duration) -> Option<(u64, Arc<str>)> {
        let mut q = self.out.lock().unwrap();
        if q.frames.is_empty() {
            q = self.ready.wait_timeout(q, wait).unwrap().0;
        }
        q.frames.pop_front()
    }

    fn stats(&self) -> SessionStats {
        let q = self.out.lock().unwrap();
        SessionStats {
            id: self.id,
            enqueued: q.enqueued,
            sent: q.sent,
            dropped: q.dropped,
            pending: q.frames.len(),
            streaming: self.streaming.load(Ordering::SeqCst),
            closed: self.closed.load(Ordering::SeqCst),
        }
    }
}

struct Shared {
    options: ServerOptions,
    sessions: Mutex<Vec<Arc<Session>>>,
    stats: Mutex<ServerStats>,
    shutdown: AtomicBool,
    source_done: AtomicBool,
    next_id: AtomicU64,
}

impl Shared {
    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    fn broadcast(&self, frame: &ArkitFrame) {
        let text: Arc<str> = encode_frame(frame).into();
        let mut sessions = self.sessions.lock().unwrap();
        sessions.retain(|s| !s.closed.load(Ordering::SeqCst));
        for s in sessions.iter() {
            s.offer(frame.seq, &text);
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    pacer: Option<JoinHandle<()>>,
    acceptor: Option<JoinHandle<()>>,
    all_sessions: Arc<Mutex<Vec<Arc<Session>>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        *self.shared.stats.lock().unwrap()
    }

    /// Every session ever opened, in connection order.
    pub fn sessions(&self) -> Vec<SessionStats> {
        self.all_sessions
            .lock()
            .unwrap()
            .iter()
            .map(|s| s.stats())
            .collect()
    }

    /// True once the source has disconnected and every buffered frame was paced out.
    pub fn source_done(&self) -> bool {
        self.shared.source_done.load(Ordering::SeqCst)
    }

    /// Waits until the source is exhausted and every streaming session has flushed its queue.
    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let until = Instant::now() + timeout;
        while Instant::now() < until {
            let flushed = self
                .sessions()
                .iter()
                .all(|s| !s.streaming || s.closed || s.pending == 0);
            if self.source_done() && flushed {
                return true;
            }
            std::thread::sleep(POLL);
        }
        false
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.pacer.take() {
            let _ = t.join();
        }
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` and starts pacing frames from `source` to every connected client.
pub fn serve(
    addr: impl ToSocketAddrs,
    source: Receiver<ArkitFrame>,
    options: ServerOptions,
) -> Result<ServerHandle> {
    if !(options.fps > 0.0 && options.fps.is_finite()) || options.queue_capacity == 0 {
        return Err(Error::Parameter(format!(
            "invalid server options {options:?}"
        )));
    }
    let listener =
        TcpListener::bind(addr).map_err(|e| Error::Startup(format!("server bind failed: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Startup(format!("server socket setup failed: {e}")))?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        options,
        sessions: Mutex::new(Vec::new()),
        stats: Mutex::new(ServerStats::default()),
        shutdown: AtomicBool::new(false),
        source_done: AtomicBool::new(false),
        next_id: AtomicU64::new(0),
    });
    let all_sessions = Arc::new(Mutex::new(Vec::new()));
    let pacer = {
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("relisten-pacer".into())
            .spawn(move || pace(&shared, source))?
    };
    let acceptor = {
        let shared = Arc::clone(&shared);
        let all = Arc::clone(&all_sessions);
        std::thread::Builder::new()
            .name("relisten-accept".into())
            .spawn(move || accept_loop(listener, &shared, &all))?
    };
    log::info!("serving frames on ws://{addr} at {} fps", options.fps);
    Ok(ServerHandle {
        addr,
        shared,
        pacer: Some(pacer),
        acceptor: Some(acceptor),
        all_sessions,
    })
}

fn pace(shared: &Shared, source: Receiver<ArkitFrame>) {
    let period = 1e6 / shared.options.fps;
    let mut pending: VecDeque<ArkitFrame> = VecDeque::new();
    let mut disconnected = false;
    let mut start: Option<u64> = None;
    let mut tick = 0u64;
    let deadline = |start: u64, tick: u64| start + (tick as f64 * period).round() as u64;
    while !shared.stopping() {
        loop {
            match source.try_recv() {
                Ok(f) => {
                    shared.stats.lock().unwrap().frames_in += 1;
                    pending.push_back(f);
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    disconnected = true;
                    break;
                }
            }
        }
        if pending.is_empty() {
            if disconnected {
                break;
            }
            match source.recv_timeout(Duration::from_millis(20)) {
                Ok(f) => {
                    shared.stats.lock().unwrap().frames_in += 1;
                    pending.push_back(f);
                    // An idle source is not lateness: resume from now.
                    if let Some(s) = start {
                        let now = now_us();
                        if now > deadline(s, tick) {
                            start = Some(now - (tick as f64 * period).round() as u64);
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => disconnected = true,
            }
            continue;
        }
        let s = *start.get_or_insert_with(now_us);
        let due = deadline(s, tick);
        sleep_until_us(due);
        let missed = ((now_us().saturating_sub(due)) as f64 / period) as u64;
        if missed > 0 {
            let mut late = 0;
            for _ in 0..missed {
                if pending.len() > 1 && pending.pop_front().is_some() {
                    late += 1;
                }
            }
            shared.stats.lock().unwrap().frames_late += late;
            tick += missed;
        }
        if let Some(frame) = pending.pop_front() {
            shared.broadcast(&frame);
            shared.stats.lock().unwrap().frames_paced += 1;
        }
        tick += 1;
    }
    shared.source_done.store(true, Ordering::SeqCst);
}

fn accept_loop(listener: TcpListener, shared: &Arc<Shared>, all: &Mutex<Vec<Arc<Session>>>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let session = Arc::new(Session {
                    id: shared.next_id.fetch_add(1, Ordering::SeqCst),
                    capacity: shared.options.queue_capacity,
                    out: Mutex::new(Outbound::default()),
                    ready: Condvar::new(),
                    streaming: AtomicBool::new(false),
                    closed: AtomicBool::new(false),
                });
                shared.sessions.lock().unwrap().push(Arc::clone(&session));
                all.lock().unwrap().push(Arc::clone(&session));
                shared.stats.lock().unwrap().sessions_opened += 1;
                log::debug!("session {} from {peer}", session.id);
                let shared = Arc::clone(shared);
                let spawned = std::thread::Builder::new()
                    .name(format!("relisten-session-{}", session.id))
                    .spawn(move || {
                        if let Err(e) = run_session(stream, &session, &shared) {
                            log::debug!("session {} ended: {e}", session.id);
                        }
                        session.closed.store(true, Ordering::SeqCst);
                        shared.stats.lock().unwrap().sessions_closed += 1;
                    });
                match spawned {
                    Ok(h) => workers.push(h),
                    Err(e) => log::warn!("could not start session thread: {e}"),
                }
                workers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
    for h in workers {
        let _ = h.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn transport(e: tungstenite::Error) -> Error {
    Error::Transport(e.to_string())
}

fn run_session(stream: TcpStream, session: &Session, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let started = Instant::now();
    let mut attempt = tungstenite::accept(stream);
    let mut ws: WebSocket<TcpStream> = loop {
        match attempt {
            Ok(ws) => break ws,
            Err(HandshakeError::Interrupted(mid)) => {
                if shared.stopping() || started.elapsed() > HANDSHAKE_TIMEOUT {
                    return Err(Error::Transport("handshake abandoned".into()));
                }
                attempt = mid.handshake();
            }
            Err(HandshakeError::Failure(e)) => return Err(transport(e)),
        }
    };

    loop {
        if shared.stopping() {
            let _ = ws.close(None);
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => match parse_hello(&text) {
                Ok(()) => break,
                Err(e) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return Err(e);
                }
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(transport(e)),
        }
    }
    ws.send(Message::Text(config_summary(
        shared.options.fps,
        shared.options.queue_capacity,
    )))
    .map_err(transport)?;
    {
        let mut q = session.out.lock().unwrap();
        q.dropped += q.frames.len() as u64;
        q.frames.clear();
        session.streaming.store(true, Ordering::SeqCst);
    }
    ws.get_mut().set_nonblocking(true)?;

    let mut backlog = false;
    loop {
        if shared.stopping() {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(transport(e)),
        }
        if backlog {
            match ws.flush() {
                Ok(()) => backlog = false,
                Err(e) if is_timeout(&e) => {
                    std::thread::sleep(Duration::from_millis(2));
                    continue;
                }
                Err(e) => return Err(transport(e)),
            }
        }
        let Some((_, text)) = session.next(Duration::from_millis(20)) else {
            continue;
        };
        let result = ws.send(Message::Text(text.to_string()));
        session.out.lock().unwrap().sent += 1;
        match result {
            Ok(()) => {}
            Err(e) if is_timeout(&e) => backlog = true,
            Err(e) => return Err(transport(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc::channel;

    #[test]
    fn zero_clients_consume_and_count() {
        let (tx, rx) = channel();
        let server = serve(
            "127.0.0.1:0",
            rx,
            ServerOptions {
                fps: 500.0,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..50 {
            tx.send(ArkitFrame::zero(i, i * 2)).unwrap();
        }
        drop(tx);
        assert!(server.wait_drained(Duration::from_secs(5)));
        let s = server.stats();
        assert_eq!(s.frames_in, 50);
        assert_eq!(s.frames_paced + s.frames_late, 50);
        server.shutdown();
    }

    #[test]
    fn bind_failure_is_startup_error() {
        let taken = TcpListener::bind("127.0.0.1:0").unwrap();
        let (_tx, rx) = channel();
        let r = serve(taken.local_addr().unwrap(), rx, ServerOptions::default());
        assert!(matches!(r, Err(Error::Startup(_))));
    }

    #[test]
    fn invalid_options() {
        let (_tx, rx) = channel();
        let r = serve(
            "127.0.0.1:0",
            rx,
            ServerOptions {
                fps: 0.0,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn session_queue_drops_oldest() {
        let s = Session {
            id: 0,
            capacity: 4,
            out: Mutex::new(Outbound::default()),
            ready: Condvar::new(),
            streaming: AtomicBool::new(false),
            closed: AtomicBool::new(false),
        };
        let text: Arc<str> = "x".into();
        for seq in 0..10 {
            s.offer(seq, &text);
        }
        let st = s.stats();
        assert_eq!((st.enqueued, st.dropped, st.pending), (10, 6, 4));
        assert_eq!(s.next(Duration::ZERO).unwrap().0, 6);
    }
}
