//! Audio front end: WAV ingestion, voice activity segmentation and mel-cepstral features.

mod mfcc;
mod synth;
mod vad;
mod wav;

pub use mfcc::{
    extract_mel, hz_to_mel, mel_to_hz, resample_linear, MelBatch, MfccExtractor, LOG_FLOOR, N_FFT,
    N_MELS,
};
pub use synth::{default_bursts, synth_speech};
pub use vad::{
    decode_segments, detect_voice, encode_segments, SegmentKind, SpeechSegment, VadParams,
};
pub use wav::{read_wav, write_wav};
