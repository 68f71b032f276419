//! Publisher/subscriber bus over local TCP.
//!
//! A [`Publisher`] owns one topic and a listening socket. A [`Subscriber`] connects to
//! one publisher per subscribed topic, announces the topic it wants, and waits for an
//! acknowledgement, so a publish issued after `Subscriber::connect` returns always
//! reaches it. Envelopes then flow as back-to-back [`TimedEnvelope`] encodings. Each
//! subscriber buffers into one bounded inbox that drops its oldest entry on overflow.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::clock::now_us;
use crate::envelope::{PayloadKind, TimedEnvelope, MAX_PAYLOAD};
use crate::error::{Error, Result};

pub const DEFAULT_INBOX_CAPACITY: usize = 256;

const ACK: u8 = 1;
const NACK: u8 = 0;

fn transport_err(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Transport(format!("{context}: {e}"))
}

pub struct Publisher {
    topic: String,
    local_addr: SocketAddr,
    next_seq: u64,
    last_capture_ts_us: u64,
    subscribers: Arc<Mutex<Vec<TcpStream>>>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl Publisher {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts accepting subscribers.
    pub fn bind(topic: &str, addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| transport_err("bind", e))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| transport_err("bind", e))?;
        let local_addr = listener.local_addr()?;
        let subscribers = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let subscribers = Arc::clone(&subscribers);
            let shutdown = Arc::clone(&shutdown);
            let topic = topic.to_string();
            std::thread::Builder::new()
                .name(format!("pub-{topic}"))
                .spawn(move || accept_loop(listener, topic, subscribers, shutdown))?
        };
        Ok(Self {
            topic: topic.to_string(),
            local_addr,
            next_seq: 0,
            last_capture_ts_us: 0,
            subscribers,
            shutdown,
            acceptor: Some(acceptor),
        })
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers
            .lock()
            .expect("subscriber list poisoned")
            .len()
    }

    /// Publishes `payload` to every current subscriber and returns the assigned sequence number.
    ///
    /// Subscribers whose connection has failed are pruned; the publish still succeeds.
    pub fn publish(
        &mut self,
        kind: PayloadKind,
        payload: Vec<u8>,
        capture_ts_us: u64,
    ) -> Result<u64> {
        if payload.len() > MAX_PAYLOAD {
            return Err(Error::PayloadTooLarge(payload.len()));
        }
        if capture_ts_us < self.last_capture_ts_us {
            return Err(Error::Contract(format!(
                "capture timestamp {capture_ts_us} precedes previous {} on topic {}",
                self.last_capture_ts_us, self.topic
            )));
        }
        let publish_ts_us = now_us();
        if capture_ts_us > publish_ts_us {
            return Err(Error::Contract(format!(
                "capture timestamp {capture_ts_us} lies in the future (now {publish_ts_us})"
            )));
        }
        let seq = self.next_seq;
        let env = TimedEnvelope {
            topic: self.topic.clone(),
            seq,
            capture_ts_us,
            publish_ts_us,
            payload_kind: kind,
            payload,
        };
        let bytes = env.encode()?;
        let mut subs = self.subscribers.lock().expect("subscriber list poisoned");
        subs.retain_mut(|s| match s.write_all(&bytes) {
            Ok(()) => true,
            Err(e) => {
                log::debug!("{}: dropping subscriber: {e}", self.topic);
                false
            }
        });
        self.next_seq += 1;
        self.last_capture_ts_us = capture_ts_us;
        Ok(seq)
    }

    /// Publishes the end-of-stream marker (empty payload).
    pub fn publish_end(&mut self, kind: PayloadKind) -> Result<u64> {
        let ts = now_us().max(self.last_capture_ts_us);
        self.publish(kind, Vec::new(), ts)
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
        for s in self
            .subscribers
            .lock()
            .expect("subscriber list poisoned")
            .iter()
        {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    topic: String,
    subscribers: Arc<Mutex<Vec<TcpStream>>>,
    shutdown: Arc<AtomicBool>,
) {
    while !shutdown.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if let Err(e) = admit(stream, &topic, &subscribers) {
                    log::warn!("{topic}: rejected subscriber {peer}: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(1));
            }
            Err(e) => {
                log::warn!("{topic}: accept failed: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn admit(mut stream: TcpStream, topic: &str, subscribers: &Mutex<Vec<TcpStream>>) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut len = [0u8; 2];
    stream.read_exact(&mut len)?;
    let mut wanted = vec![0u8; u16::from_le_bytes(len) as usize];
    stream.read_exact(&mut wanted)?;
    if wanted != topic.as_bytes() {
        let _ = stream.write_all(&[NACK]);
        return Err(Error::Transport(format!(
            "subscriber asked for topic {:?}",
            String::from_utf8_lossy(&wanted)
        )));
    }
    stream.set_read_timeout(None)?;
    let mut subs = subscribers.lock().expect("subscriber list poisoned");
    stream.write_all(&[ACK])?;
    subs.push(stream);
    Ok(())
}

/// An envelope together with the time the subscriber's receive loop took it off the socket.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub envelope: TimedEnvelope,
    pub recv_ts_us: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct InboxStats {
    pub received: u64,
    pub dropped: u64,
    /// Envelopes whose topic was not subscribed; they are discarded.
    pub foreign: u64,
    pub buffered: usize,
}

struct InboxState {
    queue: VecDeque<Delivery>,
    stats: InboxStats,
    open_connections: usize,
}

struct Inbox {
    capacity: usize,
    state: Mutex<InboxState>,
    cond: Condvar,
}

impl Inbox {
    fn push(&self, delivery: Delivery) {
        let mut st = self.state.lock().expect("inbox poisoned");
        st.stats.received += 1;
        if st.queue.len() == self.capacity {
            st.queue.pop_front();
            st.stats.dropped += 1;
        }
        st.queue.push_back(delivery);
        drop(st);
        self.cond.notify_all();
    }
}

pub struct Subscriber {
    topics: Vec<String>,
    inbox: Arc<Inbox>,
    streams: Vec<TcpStream>,
    receivers: Vec<JoinHandle<()>>,
}

impl Subscriber {
    /// Connects to one publisher per `(topic, address)` pair.
    pub fn connect<A: ToSocketAddrs>(routes: &[(&str, A)], capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Contract("inbox capacity must be positive".into()));
        }
        let inbox = Arc::new(Inbox {
            capacity,
            state: Mutex::new(InboxState {
                queue: VecDeque::with_capacity(capacity.min(4096)),
                stats: InboxStats::default(),
                open_connections: 0,
            }),
            cond: Condvar::new(),
        });
        let mut sub = Self {
            topics: Vec::new(),
            inbox,
            streams: Vec::new(),
            receivers: Vec::new(),
        };
        for (topic, addr) in routes {
            sub.attach(topic, addr)?;
        }
        Ok(sub)
    }

    fn attach(&mut self, topic: &str, addr: impl ToSocketAddrs) -> Result<()> {
        let mut stream = TcpStream::connect(addr).map_err(|e| transport_err("connect", e))?;
        stream.set_nodelay(true)?;
        let mut hello = Vec::with_capacity(2 + topic.len());
        hello.extend_from_slice(&(topic.len() as u16).to_le_bytes());
        hello.extend_from_slice(topic.as_bytes());
        stream.write_all(&hello)?;
        let mut ack = [0u8; 1];
        stream
            .read_exact(&mut ack)
            .map_err(|e| transport_err("handshake", e))?;
        if ack[0] != ACK {
            return Err(Error::Transport(format!("publisher refused topic {topic}")));
        }
        let reader = stream.try_clone()?;
        self.inbox
            .state
            .lock()
            .expect("inbox poisoned")
            .open_connections += 1;
        let inbox = Arc::clone(&self.inbox);
        let topic_owned = topic.to_string();
        let handle = std::thread::Builder::new()
            .name(format!("sub-{topic}"))
            .spawn(move || receive_loop(reader, topic_owned, inbox))?;
        self.topics.push(topic.to_string());
        self.streams.push(stream);
        self.receivers.push(handle);
        Ok(())
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    /// Oldest buffered envelope, waiting up to `timeout_ms`. `None` signals a timeout.
    pub fn next(&self, timeout_ms: u64) -> Option<TimedEnvelope> {
        self.next_delivery(timeout_ms).map(|d| d.envelope)
    }

    pub fn next_delivery(&self, timeout_ms: u64) -> Option<Delivery> {
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        let mut st = self.inbox.state.lock().expect("inbox poisoned");
        loop {
            if let Some(d) = st.queue.pop_front() {
                return Some(d);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            st = self
                .inbox
                .cond
                .wait_timeout(st, deadline - now)
                .expect("inbox poisoned")
                .0;
        }
    }

    pub fn stats(&self) -> InboxStats {
        let st = self.inbox.state.lock().expect("inbox poisoned");
        InboxStats {
            buffered: st.queue.len(),
            ..st.stats
        }
    }

    pub fn len(&self) -> usize {
        self.inbox.state.lock().expect("inbox poisoned").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True once every publisher connection has closed.
    pub fn all_disconnected(&self) -> bool {
        self.inbox
            .state
            .lock()
            .expect("inbox poisoned")
            .open_connections
            == 0
    }

    /// Blocks until at least `count` envelopes have been received in total (dropped ones included).
    pub fn wait_received(&self, count: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inbox.state.lock().expect("inbox poisoned");
        while st.stats.received < count {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self
                .inbox
                .cond
                .wait_timeout(st, deadline - now)
                .expect("inbox poisoned")
                .0;
        }
        true
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        for s in &self.streams {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for h in self.receivers.drain(..) {
            let _ = h.join();
        }
    }
}

fn receive_loop(mut stream: TcpStream, topic: String, inbox: Arc<Inbox>) {
    loop {
        match TimedEnvelope::read_from(&mut stream) {
            Ok(Some(envelope)) => {
                let recv_ts_us = now_us();
                if envelope.topic != topic {
                    inbox.state.lock().expect("inbox poisoned").stats.foreign += 1;
                    continue;
                }
                inbox.push(Delivery {
                    envelope,
                    recv_ts_us,
                });
            }
            Ok(None) => break,
            Err(e) => {
                log::debug!("{topic}: receive loop ended: {e}");
                break;
            }
        }
    }
    inbox.state.lock().expect("inbox poisoned").open_connections -= 1;
    inbox.cond.notify_all();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_zero_rejected() {
        let p = Publisher::bind("t", "127.0.0.1:0").unwrap();
        assert!(Subscriber::connect(&[("t", p.local_addr())], 0).is_err());
    }

    #[test]
    fn wrong_topic_refused() {
        let p = Publisher::bind("flame", "127.0.0.1:0").unwrap();
        let err = Subscriber::connect(&[("mel", p.local_addr())], 4)
            .err()
            .expect("refused");
        assert!(matches!(err, Error::Transport(_)));
    }

    #[test]
    fn future_capture_rejected() {
        let mut p = Publisher::bind("t", "127.0.0.1:0").unwrap();
        let err = p
            .publish(PayloadKind::Flame, vec![1], now_us() + 10_000_000)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
