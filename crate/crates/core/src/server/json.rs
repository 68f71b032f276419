//! JSON frame schema shared by the socket server and the frame dump.

use std::fmt::Write;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::frames::{ArkitFrame, ARKIT_COUNT, ARKIT_NAMES};

pub const PROTOCOL: &str = "relisten";
pub const PROTOCOL_VERSION: u64 = 1;

/// At most six fractional digits, trailing zeros trimmed, at least one kept.
fn push_number(out: &mut String, v: f64) {
    // Frames are finite by construction; guard the text format anyway.
    let v = if v.is_finite() { v } else { 0.0 };
    let mut s = format!("{v:.6}");
    let keep = s.trim_end_matches('0').len();
    s.truncate(keep);
    if s.ends_with('.') {
        s.push('0');
    }
    if s == "-0.0" {
        s.remove(0);
    }
    out.push_str(&s);
}

fn push_xyz(out: &mut String, key: &str, v: &[f64; 3]) {
    let _ = write!(out, ",\"{key}\":{{\"x\":");
    push_number(out, v[0]);
    out.push_str(",\"y\":");
    push_number(out, v[1]);
    out.push_str(",\"z\":");
    push_number(out, v[2]);
    out.push('}');
}

/// Keys in schema order: `seq`, `t_ms`, `blendshapes` (ARKit order), `jaw`, `head`.
pub fn encode_frame(f: &ArkitFrame) -> String {
    let mut out = String::with_capacity(1600);
    let _ = write!(
        out,
        "{{\"seq\":{},\"t_ms\":{},\"blendshapes\":{{",
        f.seq, f.t_ms
    );
    for (i, (name, &w)) in ARKIT_NAMES.iter().zip(&f.weights).enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "\"{name}\":");
        push_number(&mut out, w as f64);
    }
    out.push('}');
    push_xyz(&mut out, "jaw", &f.jaw_euler);
    push_xyz(&mut out, "head", &f.head_euler);
    out.push('}');
    out
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::Format(format!("frame: missing \"{key}\"")))
}

fn number(v: &Value, what: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Format(format!("frame: \"{what}\" is not a number")))
}

fn xyz(v: &Value, key: &str) -> Result<[f64; 3]> {
    let o = field(v, key)?;
    let obj = o
        .as_object()
        .ok_or_else(|| Error::Format(format!("frame: \"{key}\" is not an object")))?;
    if obj.len() != 3 {
        return Err(Error::Format(format!(
            "frame: \"{key}\" needs exactly x, y, z"
        )));
    }
    Ok([
        number(field(o, "x")?, key)?,
        number(field(o, "y")?, key)?,
        number(field(o, "z")?, key)?,
    ])
}

pub fn decode_frame(text: &str) -> Result<ArkitFrame> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("frame: {e}")))?;
    if v.as_object().map_or(0, |o| o.len()) != 5 {
        return Err(Error::Format(
            "frame: expected seq, t_ms, blendshapes, jaw, head".into(),
        ));
    }
    let int = |key| {
        field(&v, key)?
            .as_u64()
            .ok_or_else(|| Error::Format(format!("frame: \"{key}\" is not an unsigned integer")))
    };
    let shapes = field(&v, "blendshapes")?;
    if shapes.as_object().map_or(0, |o| o.len()) != ARKIT_COUNT {
        return Err(Error::Format(format!(
            "frame: blendshapes needs {ARKIT_COUNT} entries"
        )));
    }
    let mut weights = [0.0f32; ARKIT_COUNT];
    for (w, name) in weights.iter_mut().zip(ARKIT_NAMES) {
        *w = number(field(shapes, name)?, name)? as f32;
    }
    Ok(ArkitFrame {
        weights,
        jaw_euler: xyz(&v, "jaw")?,
        head_euler: xyz(&v, "head")?,
        seq: int("seq")?,
        t_ms: int("t_ms")?,
    })
}

/// Accepts `{"hello":"relisten","version":1}`.
pub fn parse_hello(text: &str) -> Result<()> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("hello: {e}")))?;
    if v.get("hello").and_then(Value::as_str) != Some(PROTOCOL) {
        return Err(Error::Validation(format!(
            "hello: expected protocol \"{PROTOCOL}\""
        )));
    }
    match v.get("version").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => Ok(()),
        other => Err(Error::Validation(format!(
            "hello: unsupported version {other:?}"
        ))),
    }
}

pub fn hello_message() -> String {
    serde_json::json!({ "hello": PROTOCOL, "version": PROTOCOL_VERSION }).to_string()
}

/// Server reply to a valid hello.
pub fn config_summary(fps: f64, queue_capacity: usize) -> String {
    serde_json::json!({
        "server": PROTOCOL,
        "version": PROTOCOL_VERSION,
        "fps": fps,
        "queue_capacity": queue_capacity,
        "blendshapes": ARKIT_NAMES.as_slice(),
    })
    .to_string()
}
