//! Domain frames exchanged between stages and their batch payload codecs.
//!
//! Batch payload layouts (little-endian):
//!
//! * FLAME: `u32 count, u32 expr_dim`, then per frame `u64 capture_ts_us,
//!   f32 expr[expr_dim], f32 jaw_aa[3], f32 head_aa[3]`. Shape is not carried on the bus.
//! * Mel: `u32 count`, then per frame `f32 coeffs[l], u64 capture_ts_us`; `l` is
//!   recovered from the payload length.
//! * ARKit: `u32 count`, then per frame `u64 seq, u64 t_ms, f32 weights[52],
//!   f64 jaw_euler[3], f64 head_euler[3]`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::wire::{PutLe, Reader};

/// Canonical ARKit blendshape ordering. Every module indexes weights by position in this table.
pub const ARKIT_NAMES: [&str; 52] = [
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "eyeBlinkRight",
    "eyeLookDownRight",
    "eyeLookInRight",
    "eyeLookOutRight",
    "eyeLookUpRight",
    "eyeSquintRight",
    "eyeWideRight",
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthLeft",
    "mouthRight",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
    "tongueOut",
];

pub const ARKIT_COUNT: usize = ARKIT_NAMES.len();

/// Position of `name` in [`ARKIT_NAMES`].
pub fn arkit_index(name: &str) -> Option<usize> {
    ARKIT_NAMES.iter().position(|n| *n == name)
}

/// FLAME parameters of one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlameFrame {
    /// Expression PCA coefficients.
    pub expr: Vec<f32>,
    /// Jaw rotation, axis-angle radians.
    pub jaw_aa: [f32; 3],
    /// Head rotation, axis-angle radians.
    pub head_aa: [f32; 3],
    /// Identity coefficients; carried through files, never used for prediction.
    pub shape: Option<Vec<f32>>,
    pub capture_ts_us: u64,
}

impl FlameFrame {
    pub fn zeros(expr_dim: usize, capture_ts_us: u64) -> Self {
        Self {
            expr: vec![0.0; expr_dim],
            jaw_aa: [0.0; 3],
            head_aa: [0.0; 3],
            shape: None,
            capture_ts_us,
        }
    }

    /// `expr ++ jaw_aa ++ head_aa`.
    pub fn motion_vector(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.expr.len() + 6);
        v.extend_from_slice(&self.expr);
        v.extend_from_slice(&self.jaw_aa);
        v.extend_from_slice(&self.head_aa);
        v
    }

    /// Inverse of [`FlameFrame::motion_vector`].
    pub fn from_motion(motion: &[f32], capture_ts_us: u64) -> Result<Self> {
        if motion.len() < 6 {
            return Err(Error::Contract(format!(
                "motion vector needs at least 6 components, got {}",
                motion.len()
            )));
        }
        let e = motion.len() - 6;
        Ok(Self {
            expr: motion[..e].to_vec(),
            jaw_aa: motion[e..e + 3].try_into().expect("3"),
            head_aa: motion[e + 3..].try_into().expect("3"),
            shape: None,
            capture_ts_us,
        })
    }

    pub fn validate(&self, expr_dim: usize) -> Result<()> {
        if self.expr.len() != expr_dim {
            return Err(Error::Format(format!(
                "expression has {} values, expected {expr_dim}",
                self.expr.len()
            )));
        }
        for (label, aa) in [("jaw", &self.jaw_aa), ("head", &self.head_aa)] {
            let norm = aa.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm.is_nan() || norm >= PI {
                return Err(Error::Format(format!(
                    "{label} rotation angle {norm} is not below pi"
                )));
            }
        }
        if self.expr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite expression value".into()));
        }
        Ok(())
    }
}

/// Mel-cepstral coefficients of one audio frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrame {
    pub coeffs: Vec<f32>,
    pub capture_ts_us: u64,
}

/// ARKit output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ArkitFrame {
    /// Weights in [`ARKIT_NAMES`] order, each in `[0, 1]`.
    pub weights: [f32; ARKIT_COUNT],
    /// Intrinsic x-y-z Euler angles, radians.
    pub jaw_euler: [f64; 3],
    pub head_euler: [f64; 3],
    pub seq: u64,
    pub t_ms: u64,
}

impl ArkitFrame {
    pub fn zero(seq: u64, t_ms: u64) -> Self {
        Self {
            weights: [0.0; ARKIT_COUNT],
            jaw_euler: [0.0; 3],
            head_euler: [0.0; 3],
            seq,
            t_ms,
        }
    }

    pub fn weight(&self, name: &str) -> Option<f32> {
        arkit_index(name).map(|i| self.weights[i])
    }
}

pub fn encode_flame_batch(frames: &[FlameFrame]) -> Vec<u8> {
    let expr_dim = frames.first().map_or(0, |f| f.expr.len());
    let mut out = Vec::with_capacity(8 + frames.len() * (8 + 4 * (expr_dim + 6)));
    out.put_u32(frames.len() as u32);
    out.put_u32(expr_dim as u32);
    for f in frames {
        debug_assert_eq!(f.expr.len(), expr_dim);
        out.put_u64(f.capture_ts_us);
        for &v in f.expr.iter().chain(&f.jaw_aa).chain(&f.head_aa) {
            out.put_f32(v);
        }
    }
    out
}

pub fn decode_flame_batch(bytes: &[u8]) -> Result<Vec<FlameFrame>> {
    let mut r = Reader::new(bytes, "flame batch");
    let count = r.u32()? as usize;
    let expr_dim = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let ts = r.u64()?;
        let expr = r.f32_vec(expr_dim)?;
        let mut jaw_aa = [0.0; 3];
        let mut head_aa = [0.0; 3];
        r.f32_into(&mut jaw_aa)?;
        r.f32_into(&mut head_aa)?;
        frames.push(FlameFrame {
            expr,
            jaw_aa,
            head_aa,
            shape: None,
            capture_ts_us: ts,
        });
    }
    r.expect_end()?;
    Ok(frames)
}

pub fn encode_mel_batch(frames: &[MelFrame]) -> Vec<u8> {
    let l = frames.first().map_or(0, |f| f.coeffs.len());
    let mut out = Vec::with_capacity(4 + frames.len() * (8 + 4 * l));
    out.put_u32(frames.len() as u32);
    for f in frames {
        debug_assert_eq!(f.coeffs.len(), l);
        for &c in &f.coeffs {
            out.put_f32(c);
        }
        out.put_u64(f.capture_ts_us);
    }
    out
}

pub fn decode_mel_batch(bytes: &[u8]) -> Result<Vec<MelFrame>> {
    let mut r = Reader::new(bytes, "mel batch");
    let count = r.u32()? as usize;
    if count == 0 {
        r.expect_end()?;
        return Ok(Vec::new());
    }
    let body = r.remaining();
    if !body.is_multiple_of(count) || (body / count) < 8 || !(body / count - 8).is_multiple_of(4) {
        return Err(Error::Format(format!(
            "mel batch: {body} body bytes do not split into {count} frames"
        )));
    }
    let l = (body / count - 8) / 4;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let coeffs = r.f32_vec(l)?;
        let ts = r.u64()?;
        frames.push(MelFrame {
            coeffs,
            capture_ts_us: ts,
        });
    }
    Ok(frames)
}

pub fn encode_arkit_batch(frames: &[ArkitFrame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + frames.len() * (16 + 4 * ARKIT_COUNT + 48));
    out.put_u32(frames.len() as u32);
    for f in frames {
        out.put_u64(f.seq);
        out.put_u64(f.t_ms);
        for &w in &f.weights {
            out.put_f32(w);
        }
        for &e in f.jaw_euler.iter().chain(&f.head_euler) {
            out.put_f64(e);
        }
    }
    out
}

pub fn decode_arkit_batch(bytes: &[u8]) -> Result<Vec<ArkitFrame>> {
    let mut r = Reader::new(bytes, "arkit batch");
    let count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let seq = r.u64()?;
        let t_ms = r.u64()?;
        let mut weights = [0.0; ARKIT_COUNT];
        r.f32_into(&mut weights)?;
        let mut jaw_euler = [0.0; 3];
        let mut head_euler = [0.0; 3];
        for v in jaw_euler.iter_mut().chain(head_euler.iter_mut()) {
            *v = r.f64()?;
        }
        frames.push(ArkitFrame {
            weights,
            jaw_euler,
            head_euler,
            seq,
            t_ms,
        });
    }
    r.expect_end()?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arkit_table_is_unique_and_complete() {
        assert_eq!(ARKIT_COUNT, 52);
        let mut names: Vec<_> = ARKIT_NAMES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 52);
        assert_eq!(arkit_index("jawOpen"), Some(17));
        assert_eq!(arkit_index("nope"), None);
    }

    #[test]
    fn motion_vector_layout() {
        let mut f = FlameFrame::zeros(3, 5);
        f.expr = vec![1.0, 2.0, 3.0];
        f.jaw_aa = [4.0, 5.0, 6.0];
        f.head_aa = [7.0, 8.0, 9.0];
        let v = f.motion_vector();
        assert_eq!(v, (1..=9).map(|x| x as f32).collect::<Vec<_>>());
        assert_eq!(FlameFrame::from_motion(&v, 5).unwrap(), f);
    }

    #[test]
    fn validate_rejects_large_rotation() {
        let mut f = FlameFrame::zeros(2, 0);
        f.head_aa = [3.2, 0.0, 0.0];
        assert!(f.validate(2).is_err());
        f.head_aa = [0.1, 0.0, 0.0];
        assert!(f.validate(2).is_ok());
        assert!(f.validate(3).is_err());
    }

    #[test]
    fn mel_decode_rejects_ragged_body() {
        let mut bytes = encode_mel_batch(&[MelFrame {
            coeffs: vec![1.0; 4],
            capture_ts_us: 9,
        }]);
        bytes.push(0);
        assert!(decode_mel_batch(&bytes).is_err());
    }

    fn flame_strategy(expr_dim: usize) -> impl Strategy<Value = FlameFrame> {
        (
            proptest::collection::vec(-3.0f32..3.0, expr_dim),
            proptest::array::uniform3(-1.0f32..1.0),
            proptest::array::uniform3(-1.0f32..1.0),
            any::<u64>(),
        )
            .prop_map(|(expr, jaw_aa, head_aa, ts)| FlameFrame {
                expr,
                jaw_aa,
                head_aa,
                shape: None,
                capture_ts_us: ts,
            })
    }

    proptest! {
        #[test]
        fn flame_batch_roundtrip(frames in proptest::collection::vec(flame_strategy(7), 0..20)) {
            let back = decode_flame_batch(&encode_flame_batch(&frames)).unwrap();
            prop_assert_eq!(back, frames);
        }

        #[test]
        fn mel_batch_roundtrip(
            rows in proptest::collection::vec((proptest::collection::vec(-50.0f32..50.0, 16), any::<u64>()), 1..20)
        ) {
            let frames: Vec<_> = rows.into_iter().map(|(coeffs, capture_ts_us)| MelFrame { coeffs, capture_ts_us }).collect();
            let back = decode_mel_batch(&encode_mel_batch(&frames)).unwrap();
            prop_assert_eq!(back, frames);
        }

        #[test]
        fn arkit_batch_roundtrip(
            rows in proptest::collection::vec((proptest::array::uniform32(0.0f32..=1.0), any::<u64>(), any::<u64>(), proptest::array::uniform3(-3.0f64..3.0)), 0..10)
        ) {
            let frames: Vec<_> = rows.into_iter().map(|(w, seq, t_ms, e)| {
                let mut weights = [0.0; ARKIT_COUNT];
                weights[..32].copy_from_slice(&w);
                weights[32..35].copy_from_slice(&[w[0], w[1], w[2]]);
                ArkitFrame { weights, jaw_euler: e, head_euler: [e[2], e[1], e[0]], seq, t_ms }
            }).collect();
            let back = decode_arkit_batch(&encode_arkit_batch(&frames)).unwrap();
            prop_assert_eq!(back, frames);
        }
    }
}
