//! Mel-cepstral front end.
//!
//! Fixed recipe: pre-emphasis 0.97, 25 ms Hann window with 10 ms hop, 512-point FFT
//! magnitude, triangular mel filters spanning 0 Hz to Nyquist, natural log with a
//! floor, orthonormal DCT-II. Each audio batch is processed independently (frames
//! running past the batch end read zeros) and its 10 ms grid is linearly
//! re-sampled onto `M_fps * T_audio` frames.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{Error, Result};
use crate::frames::MelFrame;
use crate::scalar::Real;

pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const WINDOW_MS: f64 = 25.0;
pub const HOP_MS: f64 = 10.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
struct MelFilter<T> {
    first_bin: usize,
    weights: Vec<T>,
}

/// One re-sampled batch of mel frames covering `T_audio` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBatch {
    pub batch_index: usize,
    pub frames: Vec<MelFrame>,
}

pub struct MfccExtractor<T: Real + FftNum> {
    sample_rate: u32,
    coeffs: usize,
    apply_dct: bool,
    win_len: usize,
    hop: usize,
    window: Vec<T>,
    filters: Vec<MelFilter<T>>,
    /// `coeffs x N_MELS`, row-major.
    dct: Vec<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Real + FftNum> MfccExtractor<T> {
    /// `coeffs` cepstral coefficients (or log-mel bands when `apply_dct` is false).
    pub fn new(sample_rate: u32, coeffs: usize, apply_dct: bool) -> Result<Self> {
        if coeffs == 0 || coeffs > N_MELS {
            return Err(Error::Parameter(format!(
                "l = {coeffs} must be in 1..={N_MELS} (mel band count)"
            )));
        }
        let win_len = (sample_rate as f64 * WINDOW_MS / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * HOP_MS / 1000.0).round() as usize;
        if win_len > N_FFT || hop == 0 {
            return Err(Error::Parameter(format!(
                "sample rate {sample_rate} Hz gives a {win_len}-sample window, beyond the {N_FFT}-point FFT"
            )));
        }
        // Periodic Hann.
        let window = (0..win_len)
            .map(|n| {
                T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win_len as f64).cos())
            })
            .collect();
        let filters = mel_filters(sample_rate);
        let n = N_MELS as f64;
        let mut dct = Vec::with_capacity(coeffs * N_MELS);
        for k in 0..coeffs {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            for m in 0..N_MELS {
                let angle = std::f64::consts::PI * k as f64 * (2.0 * m as f64 + 1.0) / (2.0 * n);
                dct.push(T::lit(scale * angle.cos()));
            }
        }
        let fft = FftPlanner::<T>::new().plan_fft_forward(N_FFT);
        Ok(Self {
            sample_rate,
            coeffs,
            apply_dct,
            win_len,
            hop,
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    /// Log-mel energies (length `N_MELS`) of the frame starting at `start` within `signal`.
    /// Samples beyond `signal` are zero.
    fn log_mel(
        &self,
        signal: &[T],
        start: usize,
        buf: &mut [Complex<T>],
        scratch: &mut [Complex<T>],
    ) -> Vec<T> {
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < self.win_len {
                signal.get(start + i).copied().unwrap_or_else(T::zero) * self.window[i]
            } else {
                T::zero()
            };
            *slot = Complex::new(v, T::zero());
        }
        self.fft.process_with_scratch(buf, scratch);
        let floor = T::lit(LOG_FLOOR);
        self.filters
            .iter()
            .map(|f| {
                let energy: T = f
                    .weights
                    .iter()
                    .zip(&buf[f.first_bin..])
                    .map(|(&w, c)| w * c.norm())
                    .sum();
                energy.max(floor).ln()
            })
            .collect()
    }

    fn cepstrum(&self, log_mel: &[T]) -> Vec<T> {
        if !self.apply_dct {
            return log_mel[..self.coeffs].to_vec();
        }
        self.dct
            .chunks_exact(N_MELS)
            .map(|row| row.iter().zip(log_mel).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Frames on the 10 ms hop grid for one self-contained segment of normalized samples.
    /// Returns `n_frames` coefficient vectors.
    pub fn hop_frames(&self, segment: &[T], n_frames: usize) -> Vec<Vec<T>> {
        let mut emphasized = Vec::with_capacity(segment.len());
        let alpha = T::lit(PRE_EMPHASIS);
        let mut prev = T::zero();
        for &x in segment {
            emphasized.push(x - alpha * prev);
            prev = x;
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); N_FFT];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        (0..n_frames)
            .map(|j| {
                let lm = self.log_mel(&emphasized, j * self.hop, &mut buf, &mut scratch);
                self.cepstrum(&lm)
            })
            .collect()
    }

    /// Splits `samples` into `t_audio_s` batches, each re-sampled to `frames_per_batch` frames.
    /// The final partial batch is zero-padded to full length.
    /// Splits `samples` into `t_audio_s` batches and extracts each independently.
    pub fn extract(
        &self,
        samples: &[i16],
        frames_per_batch: usize,
        t_audio_s: f64,
    ) -> Result<Vec<MelBatch>> {
        let batch_len = self.batch_len(t_audio_s);
        samples
            .chunks(batch_len.max(1))
            .enumerate()
            .map(|(b, chunk)| self.extract_batch(chunk, b, frames_per_batch, t_audio_s))
            .collect()
    }

    /// Samples per batch of `t_audio_s` seconds.
    pub fn batch_len(&self, t_audio_s: f64) -> usize {
        (self.sample_rate as f64 * t_audio_s).round() as usize
    }

    /// Features for batch `batch_index`, whose samples are `chunk` (zero-padded if short).
    pub fn extract_batch(
        &self,
        chunk: &[i16],
        batch_index: usize,
        frames_per_batch: usize,
        t_audio_s: f64,
    ) -> Result<MelBatch> {
        if frames_per_batch == 0 || t_audio_s.is_nan() || t_audio_s <= 0.0 {
            return Err(Error::Parameter(
                "batch must contain at least one frame".into(),
            ));
        }
        let batch_len = self.batch_len(t_audio_s);
        let hop_count = ((batch_len as f64 / self.hop as f64).round() as usize).max(1);
        let scale = T::lit(1.0 / 32768.0);
        let segment: Vec<T> = chunk.iter().map(|&s| T::lit(s as f64) * scale).collect();
        let grid = self.hop_frames(&segment, hop_count);
        let b = batch_index as f64;
        let frames = resample_linear(&grid, frames_per_batch)
            .into_iter()
            .enumerate()
            .map(|(i, coeffs)| MelFrame {
                coeffs: coeffs
                    .into_iter()
                    .map(|c| c.to_f64_lossy() as f32)
                    .collect(),
                capture_ts_us: ((b * t_audio_s + i as f64 * t_audio_s / frames_per_batch as f64)
                    * 1e6)
                    .round() as u64,
            })
            .collect();
        Ok(MelBatch {
            batch_index,
            frames,
        })
    }
}

/// Linear interpolation along time from `grid.len()` rows onto `target` rows spanning the
/// same interval: output `i` sits at grid position `i * grid.len() / target`.
pub fn resample_linear<T: Real>(grid: &[Vec<T>], target: usize) -> Vec<Vec<T>> {
    let n = grid.len();
    if n == 0 {
        return Vec::new();
    }
    (0..target)
        .map(|i| {
            let pos = i as f64 * n as f64 / target as f64;
            let j0 = (pos.floor() as usize).min(n - 1);
            let j1 = (j0 + 1).min(n - 1);
            let frac = T::lit(pos - j0 as f64);
            grid[j0]
                .iter()
                .zip(&grid[j1])
                .map(|(&a, &b)| a + (b - a) * frac)
                .collect()
        })
        .collect()
}

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist, evaluated at FFT
/// bin centres. A filter too narrow to cover any bin takes unit weight on the bin nearest
/// its centre so that every band carries energy.
fn mel_filters<T: Real>(sample_rate: u32) -> Vec<MelFilter<T>> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = N_FFT / 2 + 1;
    let bin_hz = sample_rate as f64 / N_FFT as f64;
    let lo_mel = hz_to_mel(0.0);
    let hi_mel = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo_mel + (hi_mel - lo_mel) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= centre {
                        (f - lo) / (centre - lo)
                    } else if f > centre && f < hi {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            if weights.is_empty() {
                let k = ((centre / bin_hz).round() as usize).min(n_bins - 1);
                return MelFilter {
                    first_bin: k,
                    weights: vec![T::one()],
                };
            }
            let first_bin = weights[0].0;
            let last = weights[weights.len() - 1].0;
            let mut dense = vec![T::zero(); last - first_bin + 1];
            for (k, w) in weights {
                dense[k - first_bin] = T::lit(w);
            }
            MelFilter {
                first_bin,
                weights: dense,
            }
        })
        .collect()
}

/// Mel extraction with the fixed recipe in `f64`, for 16 kHz input.
pub fn extract_mel(
    samples: &[i16],
    rate: u32,
    l: usize,
    f_fps: u32,
    t_audio_s: f64,
    apply_dct: bool,
) -> Result<Vec<MelBatch>> {
    if rate != 16_000 {
        return Err(Error::Parameter(format!(
            "sample rate {rate} Hz unsupported; expected 16000"
        )));
    }
    let extractor = MfccExtractor::<f64>::new(rate, l, apply_dct)?;
    let frames_per_batch = (4.0 * f_fps as f64 * t_audio_s).round() as usize;
    extractor.extract(samples, frames_per_batch, t_audio_s)
}
