//! Energy voice-activity detection with duration-based segment classes.
//!
//! Frame RMS over fixed frames; the noise floor is a low percentile of all frame RMS
//! values. Speech starts above `floor * enter_ratio`, is held while above
//! `floor * release_ratio`, and ends after a hangover of quiet frames.

use crate::error::{Error, Result};
use crate::wire::{PutLe, Reader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SegmentKind {
    NoSpeech = 0,
    /// Speech run of 0.5 s to 2 s inclusive.
    Backchanneling = 1,
    /// More than 2 s, up to 3 s.
    ShortSpeech = 2,
    /// More than 3 s.
    LongSpeech = 3,
}

impl SegmentKind {
    /// Class of a speech run lasting `duration_s`.
    pub fn of_speech(duration_s: f64) -> Self {
        if duration_s < 0.5 {
            SegmentKind::NoSpeech
        } else if duration_s <= 2.0 {
            SegmentKind::Backchanneling
        } else if duration_s <= 3.0 {
            SegmentKind::ShortSpeech
        } else {
            SegmentKind::LongSpeech
        }
    }

    pub fn is_speech(self) -> bool {
        self != SegmentKind::NoSpeech
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => SegmentKind::NoSpeech,
            1 => SegmentKind::Backchanneling,
            2 => SegmentKind::ShortSpeech,
            3 => SegmentKind::LongSpeech,
            _ => return Err(Error::Format(format!("unknown segment kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub kind: SegmentKind,
}

impl SpeechSegment {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadParams {
    pub frame_ms: u32,
    /// Noise floor percentile in `(0, 1]`, nearest rank.
    pub floor_percentile: f64,
    pub enter_ratio: f64,
    pub release_ratio: f64,
    pub hangover_ms: u32,
}

impl Default for VadParams {
    fn default() -> Self {
        Self {
            frame_ms: 20,
            floor_percentile: 0.10,
            enter_ratio: 4.0,
            release_ratio: 2.0,
            hangover_ms: 200,
        }
    }
}

/// Partitions `[0, duration]` into classified segments.
pub fn detect_voice(samples: &[i16], rate: u32, params: &VadParams) -> Result<Vec<SpeechSegment>> {
    if rate < 8_000 {
        return Err(Error::Parameter(format!(
            "sample rate {rate} Hz below 8 kHz"
        )));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let frame_len = (rate as usize * params.frame_ms as usize / 1000).max(1);
    let rms: Vec<f64> = samples
        .chunks(frame_len)
        .map(|c| (c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();

    let mut sorted = rms.clone();
    sorted.sort_by(f64::total_cmp);
    let rank =
        ((params.floor_percentile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let floor = sorted[rank - 1];
    let enter = floor * params.enter_ratio;
    let release = floor * params.release_ratio;
    let hangover = (params.hangover_ms / params.frame_ms.max(1)) as usize;

    // Speech runs as [start_frame, end_frame).
    let mut runs = Vec::new();
    let mut active: Option<(usize, usize)> = None; // (start, last loud frame)
    for (i, &r) in rms.iter().enumerate() {
        match active {
            None => {
                if r > enter {
                    active = Some((i, i));
                }
            }
            Some((start, last_loud)) => {
                if r > release {
                    active = Some((start, i));
                } else if i > last_loud + hangover {
                    runs.push((start, i));
                    active = None;
                }
            }
        }
    }
    if let Some((start, last_loud)) = active {
        runs.push((start, (last_loud + 1 + hangover).min(rms.len())));
    }

    let total = samples.len();
    let to_s = |sample: usize| sample as f64 / rate as f64;
    let mut segments: Vec<SpeechSegment> = Vec::new();
    let mut cursor = 0usize;
    for (start_f, end_f) in runs {
        let start = start_f * frame_len;
        let end = (end_f * frame_len).min(total);
        if start > cursor {
            push_merged(
                &mut segments,
                to_s(cursor),
                to_s(start),
                SegmentKind::NoSpeech,
            );
        }
        let kind = SegmentKind::of_speech(to_s(end) - to_s(start));
        push_merged(&mut segments, to_s(start), to_s(end), kind);
        cursor = end;
    }
    if cursor < total {
        push_merged(
            &mut segments,
            to_s(cursor),
            to_s(total),
            SegmentKind::NoSpeech,
        );
    }
    Ok(segments)
}

fn push_merged(segments: &mut Vec<SpeechSegment>, start_s: f64, end_s: f64, kind: SegmentKind) {
    if let Some(last) = segments.last_mut() {
        if last.kind == kind {
            last.end_s = end_s;
            if kind.is_speech() {
                last.kind = SegmentKind::of_speech(last.duration());
            }
            return;
        }
    }
    segments.push(SpeechSegment {
        start_s,
        end_s,
        kind,
    });
}

/// `u32 count`, then per segment `f64 start_s, f64 end_s, u8 kind`.
pub fn encode_segments(segments: &[SpeechSegment]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + segments.len() * 17);
    out.put_u32(segments.len() as u32);
    for s in segments {
        out.put_f64(s.start_s);
        out.put_f64(s.end_s);
        out.put_u8(s.kind as u8);
    }
    out
}

pub fn decode_segments(bytes: &[u8]) -> Result<Vec<SpeechSegment>> {
    let mut r = Reader::new(bytes, "vad segments");
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let start_s = r.f64()?;
        let end_s = r.f64()?;
        let kind = SegmentKind::from_u8(r.u8()?)?;
        out.push(SpeechSegment {
            start_s,
            end_s,
            kind,
        });
    }
    r.expect_end()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Uniform noise with the given RMS; uniform on [-a, a] has RMS a/sqrt(3).
    fn noise(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Vec<i16> {
        let a = rms * 3f64.sqrt();
        (0..n)
            .map(|_| rng.gen_range(-a..=a).round() as i16)
            .collect()
    }

    fn burst_signal(burst_s: f64, seed: u64) -> Vec<i16> {
        let rate = 16_000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = noise(&mut rng, (1.5 * rate) as usize, 30.0);
        s.extend(noise(&mut rng, (burst_s * rate) as usize, 300.0));
        s.extend(noise(&mut rng, (1.5 * rate) as usize, 30.0));
        s
    }

    fn assert_partition(segs: &[SpeechSegment], duration: f64) {
        assert_eq!(segs.first().unwrap().start_s, 0.0);
        assert!((segs.last().unwrap().end_s - duration).abs() < 1e-12);
        for w in segs.windows(2) {
            assert_eq!(w[0].end_s, w[1].start_s);
            assert_ne!(w[0].kind, w[1].kind);
        }
        for s in segs {
            assert!(s.duration() > 0.0);
        }
    }

    #[test]
    fn silence_is_one_no_speech_segment() {
        let segs = detect_voice(&vec![0; 32_000], 16_000, &VadParams::default()).unwrap();
        assert_eq!(
            segs,
            vec![SpeechSegment {
                start_s: 0.0,
                end_s: 2.0,
                kind: SegmentKind::NoSpeech
            }]
        );
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(detect_voice(&[], 16_000, &VadParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn low_rate_rejected() {
        assert!(detect_voice(&[0; 10], 4_000, &VadParams::default()).is_err());
    }

    #[test]
    fn bursts_classified_by_duration() {
        for (burst, kind) in [
            (1.0, SegmentKind::Backchanneling),
            (2.5, SegmentKind::ShortSpeech),
            (4.0, SegmentKind::LongSpeech),
        ] {
            let s = burst_signal(burst, 3);
            let segs = detect_voice(&s, 16_000, &VadParams::default()).unwrap();
            assert_partition(&segs, s.len() as f64 / 16_000.0);
            let speech: Vec<_> = segs.iter().filter(|g| g.kind.is_speech()).collect();
            assert_eq!(speech.len(), 1, "{segs:?}");
            assert_eq!(speech[0].kind, kind);
            assert!((speech[0].start_s - 1.5).abs() < 0.021);
        }
    }

    #[test]
    fn short_blip_is_not_speech() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = noise(&mut rng, 16_000, 30.0);
        s.extend(noise(&mut rng, 1_600, 300.0));
        s.extend(noise(&mut rng, 16_000, 30.0));
        let segs = detect_voice(&s, 16_000, &VadParams::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::NoSpeech);
    }

    #[test]
    fn class_boundaries() {
        assert_eq!(SegmentKind::of_speech(0.49), SegmentKind::NoSpeech);
        assert_eq!(SegmentKind::of_speech(0.5), SegmentKind::Backchanneling);
        assert_eq!(SegmentKind::of_speech(2.0), SegmentKind::Backchanneling);
        assert_eq!(SegmentKind::of_speech(2.0001), SegmentKind::ShortSpeech);
        assert_eq!(SegmentKind::of_speech(3.0), SegmentKind::ShortSpeech);
        assert_eq!(SegmentKind::of_speech(3.0001), SegmentKind::LongSpeech);
    }

    #[test]
    fn segment_codec_roundtrip() {
        let s = burst_signal(2.5, 9);
        let segs = detect_voice(&s, 16_000, &VadParams::default()).unwrap();
        assert_eq!(decode_segments(&encode_segments(&segs)).unwrap(), segs);
    }
}
