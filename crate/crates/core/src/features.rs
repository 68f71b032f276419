//! FLAME feature streams: the offline file format, a synthetic generator, and batched
//! publication at the video batch cadence.
//!
//! File layout (little-endian): magic `FLM1`, `u32 fps`, `u32 frame_count`,
//! `u32 expr_dim`, `u8 has_shape`, then per frame `f32 expr[expr_dim]`,
//! `f32 jaw_aa[3]`, `f32 head_aa[3]` and, when `has_shape`, `f32 shape[300]`.
//! Frame `i` is stamped `round(i * 1e6 / fps)` microseconds.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::{now_us, Pacing};
use crate::envelope::PayloadKind;
use crate::error::{Error, Result};
use crate::frames::{encode_flame_batch, FlameFrame};
use crate::metrics::{Metrics, StageSample};
use crate::transport::Publisher;
use crate::wire::{PutLe, Reader};

pub const FLAME_MAGIC: &[u8; 4] = b"FLM1";
pub const SHAPE_DIM: usize = 300;

pub fn frame_ts_us(index: usize, fps: u32) -> u64 {
    (index as f64 * 1e6 / fps as f64).round() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlameSequence {
    pub frames: Vec<FlameFrame>,
    pub fps: u32,
}

impl FlameSequence {
    pub fn expr_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.expr.len())
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::Format("fps must be positive".into()));
        }
        let expr_dim = self.expr_dim();
        for (i, f) in self.frames.iter().enumerate() {
            f.validate(expr_dim)?;
            let expected = frame_ts_us(i, self.fps);
            if f.capture_ts_us.abs_diff(expected) > 1 {
                return Err(Error::Format(format!(
                    "frame {i} stamped {} us, expected {expected}",
                    f.capture_ts_us
                )));
            }
            if let Some(shape) = &f.shape {
                if shape.len() != SHAPE_DIM {
                    return Err(Error::Format(format!(
                        "frame {i}: shape has {} values",
                        shape.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Consecutive batches of `ceil(fps * t_video_s)` frames; the last may be shorter.
    pub fn batches(&self, t_video_s: f64) -> std::slice::Chunks<'_, FlameFrame> {
        let per_batch = ((self.fps as f64 * t_video_s).ceil() as usize).max(1);
        self.frames.chunks(per_batch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let expr_dim = self.expr_dim();
        let has_shape = self.frames.first().is_some_and(|f| f.shape.is_some());
        let stride = 4 * (expr_dim + 6 + if has_shape { SHAPE_DIM } else { 0 });
        let mut out = Vec::with_capacity(17 + self.frames.len() * stride);
        out.extend_from_slice(FLAME_MAGIC);
        out.put_u32(self.fps);
        out.put_u32(self.frames.len() as u32);
        out.put_u32(expr_dim as u32);
        out.put_u8(has_shape as u8);
        for f in &self.frames {
            for &v in f.expr.iter().chain(&f.jaw_aa).chain(&f.head_aa) {
                out.put_f32(v);
            }
            if has_shape {
                let zeros = [0.0f32; SHAPE_DIM];
                let shape = f.shape.as_deref().unwrap_or(&zeros);
                for &v in shape {
                    out.put_f32(v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "flame file");
        if r.take(4)? != FLAME_MAGIC {
            return Err(Error::Format("flame file: bad magic".into()));
        }
        let fps = r.u32()?;
        let count = r.u32()? as usize;
        let expr_dim = r.u32()? as usize;
        let has_shape = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("flame file: has_shape byte {v}"))),
        };
        let stride = 4 * (expr_dim + 6 + if has_shape { SHAPE_DIM } else { 0 });
        if r.remaining() != count * stride {
            return Err(Error::Format(format!(
                "flame file: header declares {count} frames of expr_dim {expr_dim} ({} bytes), body has {} bytes",
                count * stride,
                r.remaining()
            )));
        }
        let mut frames = Vec::with_capacity(count);
        for i in 0..count {
            let expr = r.f32_vec(expr_dim)?;
            let mut jaw_aa = [0.0; 3];
            let mut head_aa = [0.0; 3];
            r.f32_into(&mut jaw_aa)?;
            r.f32_into(&mut head_aa)?;
            let shape = if has_shape {
                Some(r.f32_vec(SHAPE_DIM)?)
            } else {
                None
            };
            frames.push(FlameFrame {
                expr,
                jaw_aa,
                head_aa,
                shape,
                capture_ts_us: frame_ts_us(i, fps),
            });
        }
        let seq = Self { frames, fps };
        seq.validate()?;
        Ok(seq)
    }
}

pub fn read_flame(path: impl AsRef<Path>) -> Result<FlameSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    FlameSequence::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_flame(seq: &FlameSequence, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, seq.to_bytes())?;
    Ok(())
}

/// Per-channel sum of three low-frequency sinusoids.
struct Oscillator {
    terms: [(f64, f64, f64); 3], // amplitude, frequency (Hz), phase
}

impl Oscillator {
    fn random(rng: &mut ChaCha8Rng, total_amplitude: f64) -> Self {
        let raw: [f64; 3] = [
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
        ];
        let sum: f64 = raw.iter().sum();
        let mut terms = [(0.0, 0.0, 0.0); 3];
        for (t, w) in terms.iter_mut().zip(raw) {
            *t = (
                total_amplitude * w / sum,
                rng.gen_range(0.05..0.8),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
        }
        Self { terms }
    }

    fn at(&self, t: f64) -> f32 {
        self.terms
            .iter()
            .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum::<f64>() as f32
    }
}

/// Smooth pseudo-random FLAME motion: expression values bounded by 2, rotation angles by 0.5 rad.
pub fn synth_flame(duration_s: f64, fps: u32, expr_dim: usize, seed: u64) -> Result<FlameSequence> {
    if duration_s.is_nan() || duration_s <= 0.0 || fps == 0 {
        return Err(Error::Parameter("duration and fps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expr_osc: Vec<Oscillator> = (0..expr_dim)
        .map(|_| {
            let amp = rng.gen_range(0.3..2.0);
            Oscillator::random(&mut rng, amp)
        })
        .collect();
    // Each component bounded by 0.5/sqrt(3) keeps the rotation angle within 0.5 rad.
    let pose_amp = 0.5 / 3f64.sqrt();
    let pose_osc: Vec<Oscillator> = (0..6)
        .map(|_| {
            let amp = rng.gen_range(0.2..1.0) * pose_amp;
            Oscillator::random(&mut rng, amp)
        })
        .collect();
    let n = (duration_s * fps as f64).round() as usize;
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / fps as f64;
            let pose: Vec<f32> = pose_osc.iter().map(|o| o.at(t)).collect();
            FlameFrame {
                expr: expr_osc.iter().map(|o| o.at(t).clamp(-2.0, 2.0)).collect(),
                jaw_aa: [pose[0], pose[1], pose[2]],
                head_aa: [pose[3], pose[4], pose[5]],
                shape: None,
                capture_ts_us: frame_ts_us(i, fps),
            }
        })
        .collect();
    Ok(FlameSequence { frames, fps })
}

/// Publishes the sequence in `t_video_s` batches on `publisher`, followed by an
/// end-of-stream marker. Returns the number of data batches sent.
///
/// Live pacing releases batch `k` once `(k + 1) * t_video_s` of capture time has
/// elapsed (short final batches at their own end time), so the first batch arrives
/// one batch length after start.
pub fn publish_batches(
    seq: &FlameSequence,
    t_video_s: f64,
    publisher: &mut Publisher,
    pacing: Pacing,
    metrics: Option<&Metrics>,
) -> Result<usize> {
    let mut count = 0;
    let mut frames_sent = 0usize;
    for batch in seq.batches(t_video_s) {
        frames_sent += batch.len();
        let end_offset_us = frame_ts_us(frames_sent, seq.fps);
        let captured = pacing.wait_for(end_offset_us);
        let recv = now_us();
        let payload = encode_flame_batch(batch);
        let processed = now_us();
        publisher.publish(PayloadKind::Flame, payload, captured)?;
        if let Some(m) = metrics {
            m.record(
                "flame_extractor",
                StageSample::new(captured, recv, processed, now_us()),
            );
        }
        count += 1;
    }
    publisher.publish_end(PayloadKind::Flame)?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_frames_at_thirty_fps_last_one_second() {
        let seq = synth_flame(1.0, 30, 5, 1).unwrap();
        let back = FlameSequence::from_bytes(&seq.to_bytes()).unwrap();
        assert_eq!(back.frames.len(), 30);
        assert_eq!(back.duration_s(), 1.0);
    }

    #[test]
    fn short_row_is_format_error() {
        let seq = synth_flame(0.1, 30, 100, 1).unwrap();
        let mut bytes = seq.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            FlameSequence::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = synth_flame(0.1, 30, 4, 1).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(FlameSequence::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = synth_flame(0.5, 24, 10, 4).unwrap();
        for (i, f) in seq.frames.iter_mut().enumerate() {
            f.shape = Some((0..SHAPE_DIM).map(|k| (i * k) as f32 * 1e-3).collect());
        }
        let path = dir.path().join("a.flm");
        write_flame(&seq, &path).unwrap();
        let original = std::fs::read(&path).unwrap();
        let back = read_flame(&path).unwrap();
        assert_eq!(back, seq);
        let path2 = dir.path().join("b.flm");
        write_flame(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path2).unwrap(), original);
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_flame(10.0, 30, 100, 42).unwrap();
        let b = synth_flame(10.0, 30, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 300);
        assert_ne!(a, synth_flame(10.0, 30, 100, 43).unwrap());
        let max_expr = a
            .frames
            .iter()
            .flat_map(|f| f.expr.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max_expr <= 2.0);
        for f in &a.frames {
            for aa in [f.jaw_aa, f.head_aa] {
                let n = aa.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(n <= 0.5 + 1e-6);
            }
        }
        a.validate().unwrap();
    }

    #[test]
    fn batch_partition() {
        let seq = synth_flame(10.0, 30, 3, 0).unwrap();
        let sizes: Vec<usize> = seq.batches(1.0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![30; 10]);
        let seq24 = synth_flame(2.0, 24, 3, 0).unwrap();
        assert_eq!(
            seq24.batches(1.0).map(|b| b.len()).collect::<Vec<_>>(),
            vec![24, 24]
        );
        let seq15 = synth_flame(1.5, 30, 3, 0).unwrap();
        let parts: Vec<_> = seq15.batches(1.0).collect();
        assert_eq!(
            parts.iter().map(|b| b.len()).collect::<Vec<_>>(),
            vec![30, 15]
        );
        assert_eq!(parts.concat(), seq15.frames);
    }
}
