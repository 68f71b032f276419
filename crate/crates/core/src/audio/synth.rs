//! Synthetic speaker audio: a low noise floor with voiced bursts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOISE_PEAK: f64 = 52.0;
const VOICE_PEAK: f64 = 6000.0;
const PITCH_HZ: f64 = 140.0;

/// Burst spans `(start_s, length_s)` cycling through 1.0 s, 2.5 s and 4.0 s with 1.5 s gaps.
pub fn default_bursts(duration_s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut t = 1.0;
    for len in [1.0, 2.5, 4.0].into_iter().cycle() {
        if t + len > duration_s {
            break;
        }
        out.push((t, len));
        t += len + 1.5;
    }
    out
}

/// Uniform noise (RMS about 30) with harmonic voiced segments at `bursts`.
pub fn synth_speech(duration_s: f64, rate: u32, bursts: &[(f64, f64)], seed: u64) -> Vec<i16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * rate as f64).round() as usize;
    let mut out: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-NOISE_PEAK..NOISE_PEAK))
        .collect();
    for &(start, len) in bursts {
        let a = (start * rate as f64).round() as usize;
        let b = (((start + len) * rate as f64).round() as usize).min(n);
        for (i, s) in out.iter_mut().enumerate().take(b).skip(a) {
            let t = i as f64 / rate as f64;
            // Syllable-rate envelope that never falls near the noise floor.
            let env = 0.7 + 0.3 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            let voice: f64 = (1..=5)
                .map(|h| (2.0 * std::f64::consts::PI * PITCH_HZ * h as f64 * t).sin() / h as f64)
                .sum();
            *s += VOICE_PEAK * 0.4 * env * voice;
        }
    }
    out.into_iter()
        .map(|v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{detect_voice, SegmentKind, VadParams};

    #[test]
    fn bursts_cycle_and_fit() {
        let b = default_bursts(10.0);
        assert_eq!(b, vec![(1.0, 1.0), (3.5, 2.5)]);
        assert!(default_bursts(0.5).is_empty());
    }

    #[test]
    fn vad_recovers_bursts() {
        let bursts = default_bursts(12.0);
        assert_eq!(bursts.len(), 3);
        let samples = synth_speech(12.0, 16_000, &bursts, 2);
        let segs = detect_voice(&samples, 16_000, &VadParams::default()).unwrap();
        let speech: Vec<SegmentKind> = segs
            .iter()
            .filter(|s| s.kind.is_speech())
            .map(|s| s.kind)
            .collect();
        assert_eq!(
            speech,
            [
                SegmentKind::Backchanneling,
                SegmentKind::ShortSpeech,
                SegmentKind::LongSpeech
            ]
        );
    }
}
