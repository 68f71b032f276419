use std::net::TcpStream;
use std::sync::mpsc::{channel, Sender};
use std::thread;
use std::time::{Duration, Instant};

use relisten::server::{decode_frame, hello_message, serve, ServerHandle, ServerOptions};
use relisten::ArkitFrame;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn start(fps: f64) -> (ServerHandle, Sender<ArkitFrame>) {
    let (tx, rx) = channel();
    let server = serve(
        "127.0.0.1:0",
        rx,
        ServerOptions {
            fps,
            ..Default::default()
        },
    )
    .unwrap();
    (server, tx)
}

fn connect(server: &ServerHandle) -> Client {
    let (ws, _) = tungstenite::connect(format!("ws://{}", server.local_addr())).unwrap();
    ws
}

fn handshake(ws: &mut Client) -> serde_json::Value {
    ws.send(Message::Text(hello_message())).unwrap();
    match ws.read().unwrap() {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("unexpected {other:?}"),
    }
}

fn wait_streaming(server: &ServerHandle, n: usize) {
    let until = Instant::now() + Duration::from_secs(5);
    while server
        .sessions()
        .iter()
        .filter(|s| s.streaming && !s.closed)
        .count()
        < n
    {
        assert!(Instant::now() < until, "sessions never started streaming");
        thread::sleep(Duration::from_millis(5));
    }
}

/// Reads frames until `n` arrive or `timeout` passes; returns (frame, arrival) pairs.
fn read_frames(ws: &mut Client, n: usize, timeout: Duration) -> Vec<(ArkitFrame, Instant)> {
    if let MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_millis(100)))
            .unwrap();
    }
    let until = Instant::now() + timeout;
    let mut out = Vec::new();
    while out.len() < n && Instant::now() < until {
        match ws.read() {
            Ok(Message::Text(t)) => out.push((decode_frame(&t).unwrap(), Instant::now())),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) => {}
            Err(e) => panic!("read failed: {e}"),
        }
    }
    out
}

fn frames(n: u64) -> impl Iterator<Item = ArkitFrame> {
    (0..n).map(|i| ArkitFrame::zero(i, i * 33))
}

#[test]
fn handshake_reply_summarises_config() {
    let (server, _tx) = start(30.0);
    let mut ws = connect(&server);
    let summary = handshake(&mut ws);
    assert_eq!(summary["server"], "relisten");
    assert_eq!(summary["fps"], 30.0);
    assert_eq!(summary["queue_capacity"], 128);
}

#[test]
fn paced_at_thirty_fps() {
    let (server, tx) = start(30.0);
    let mut ws = connect(&server);
    handshake(&mut ws);
    wait_streaming(&server, 1);
    frames(60).for_each(|f| tx.send(f).unwrap());
    drop(tx);
    let got = read_frames(&mut ws, 60, Duration::from_secs(5));
    assert!((58..=62).contains(&got.len()), "received {}", got.len());
    let mut gaps: Vec<f64> = got
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).as_secs_f64() * 1e3)
        .collect();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let p95 = gaps[(gaps.len() * 95).div_ceil(100) - 1];
    assert!((median - 33.3).abs() <= 5.0, "median {median} ms");
    assert!((16.7..=66.7).contains(&p95), "p95 {p95} ms");
    assert!(got.windows(2).all(|w| w[1].0.seq > w[0].0.seq));
}

#[test]
fn stalled_client_loses_oldest_frames() {
    let (server, tx) = start(1000.0);
    let _silent = connect(&server);
    let mut live = connect(&server);
    handshake(&mut live);
    wait_streaming(&server, 1);
    frames(300).for_each(|f| tx.send(f).unwrap());
    drop(tx);
    let got = read_frames(&mut live, 300, Duration::from_secs(10));
    assert!(server.wait_drained(Duration::from_secs(5)));
    let sessions = server.sessions();
    let silent = sessions.iter().find(|s| !s.streaming).unwrap();
    // Ticks missed under load are dropped before broadcast and counted as late.
    let stats = server.stats();
    assert_eq!(stats.frames_paced + stats.frames_late, 300);
    assert_eq!(silent.enqueued, stats.frames_paced);
    assert!(
        silent.dropped >= silent.enqueued - 128,
        "dropped {}",
        silent.dropped
    );
    assert_eq!(
        silent.enqueued,
        silent.sent + silent.dropped + silent.pending as u64
    );
    // The healthy client is unaffected; any seq gaps are recorded drops.
    let live_stats = sessions.iter().find(|s| s.streaming).unwrap();
    assert_eq!(got.len() as u64, live_stats.sent);
    assert_eq!(got.first().unwrap().0.seq, 0);
    assert_eq!(got.last().unwrap().0.seq, 299);
    let gaps: u64 = got.windows(2).map(|w| w[1].0.seq - w[0].0.seq - 1).sum();
    assert!(got.windows(2).all(|w| w[1].0.seq > w[0].0.seq));
    assert_eq!(gaps, live_stats.dropped + stats.frames_late);
}

#[test]
fn disconnect_leaves_others_running() {
    let (server, tx) = start(200.0);
    let mut a = connect(&server);
    let mut b = connect(&server);
    handshake(&mut a);
    handshake(&mut b);
    wait_streaming(&server, 2);
    frames(20).for_each(|f| tx.send(f).unwrap());
    let first = read_frames(&mut a, 20, Duration::from_secs(5));
    assert!(first.len() >= 15, "received {}", first.len());
    a.close(None).unwrap();
    drop(a);
    (20..60).for_each(|i| tx.send(ArkitFrame::zero(i, i * 5)).unwrap());
    drop(tx);
    let got = read_frames(&mut b, 60, Duration::from_secs(5));
    assert!(server.wait_drained(Duration::from_secs(5)));
    let stats = server.stats();
    assert_eq!(stats.frames_paced + stats.frames_late, 60);
    assert_eq!(got.len() as u64, stats.frames_paced);
    assert!(got.len() >= 50, "received {}", got.len());
}

#[test]
fn bad_hello_closes_session() {
    let (server, _tx) = start(30.0);
    let mut ws = connect(&server);
    ws.send(Message::Text(
        r#"{"hello":"someone-else","version":1}"#.into(),
    ))
    .unwrap();
    let until = Instant::now() + Duration::from_secs(5);
    loop {
        match ws.read() {
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => assert!(Instant::now() < until),
        }
    }
    let until = Instant::now() + Duration::from_secs(5);
    while server.stats().sessions_closed < 1 {
        assert!(Instant::now() < until);
        thread::sleep(Duration::from_millis(5));
    }
    assert!(!server.sessions()[0].streaming);
}
