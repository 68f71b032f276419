//! Fixed-length modality queues and timestamp-aligned window assembly.
//!
//! Two producers (FLAME and mel) fill bounded drop-oldest queues; a single consumer
//! assembles windows whose FLAME block ends at the newest frame at or before a cutoff,
//! whose mel block is aligned to that frame by nearest timestamp, and whose listener
//! block holds the most recent predictions. Missing leading rows are zero-padded, so a
//! window is available as soon as one FLAME frame is. Older batches stay in the
//! queues and fill the left of the window when the current batch is shorter than it.

use std::collections::VecDeque;

use crate::config::PipelineConfig;
use crate::envelope::{PayloadKind, TimedEnvelope};
use crate::error::{Error, Result};
use crate::frames::{decode_flame_batch, decode_mel_batch, FlameFrame, MelFrame};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct QueueStats {
    pub ingested: u64,
    pub dropped: u64,
    /// Frames older than the tail by more than one period.
    pub rejected: u64,
}

#[derive(Debug, Clone)]
pub struct ModalityQueue {
    kind: PayloadKind,
    capacity: usize,
    dim: usize,
    period_us: f64,
    entries: VecDeque<(u64, Vec<f32>)>,
    stats: QueueStats,
}

impl ModalityQueue {
    pub fn new(kind: PayloadKind, capacity: usize, dim: usize, fps: f64) -> Self {
        Self {
            kind,
            capacity: capacity.max(1),
            dim,
            period_us: 1e6 / fps,
            entries: VecDeque::with_capacity(capacity),
            stats: QueueStats::default(),
        }
    }

    /// Speaker FLAME queue of motion vectors (`expr_dim + 6` wide).
    pub fn flame(cfg: &PipelineConfig, input_fps: f64) -> Self {
        Self::new(
            PayloadKind::Flame,
            cfg.window_frames,
            cfg.motion_dim(),
            input_fps,
        )
    }

    pub fn mel(cfg: &PipelineConfig) -> Self {
        Self::new(
            PayloadKind::Mel,
            cfg.mel_window_frames(),
            cfg.mel_dim,
            cfg.m_fps as f64,
        )
    }

    /// Listener history of predicted motion vectors.
    pub fn history(cfg: &PipelineConfig) -> Self {
        Self::new(
            PayloadKind::Flame,
            cfg.history_frames,
            cfg.motion_dim(),
            cfg.f_fps as f64,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    pub fn tail_ts(&self) -> Option<u64> {
        self.entries.back().map(|e| e.0)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Inserts one frame in timestamp order. Returns `false` if it was rejected as stale.
    pub fn push(&mut self, ts_us: u64, values: Vec<f32>) -> Result<bool> {
        if values.len() != self.dim {
            return Err(Error::Contract(format!(
                "frame has {} values, queue holds {}",
                values.len(),
                self.dim
            )));
        }
        self.stats.ingested += 1;
        match self.tail_ts() {
            Some(tail) if (ts_us as f64) + self.period_us < tail as f64 => {
                self.stats.rejected += 1;
                return Ok(false);
            }
            Some(tail) if ts_us < tail => {
                let at = self.entries.partition_point(|e| e.0 <= ts_us);
                self.entries.insert(at, (ts_us, values));
            }
            _ => self.entries.push_back((ts_us, values)),
        }
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
            self.stats.dropped += 1;
        }
        Ok(true)
    }

    pub fn ingest_flame(&mut self, frames: &[FlameFrame]) -> Result<usize> {
        let mut accepted = 0;
        for f in frames {
            accepted += self.push(f.capture_ts_us, f.motion_vector())? as usize;
        }
        Ok(accepted)
    }

    pub fn ingest_mel(&mut self, frames: &[MelFrame]) -> Result<usize> {
        let mut accepted = 0;
        for f in frames {
            accepted += self.push(f.capture_ts_us, f.coeffs.clone())? as usize;
        }
        Ok(accepted)
    }

    /// Decodes a batch envelope of this queue's modality and appends its frames.
    pub fn ingest(&mut self, envelope: &TimedEnvelope) -> Result<usize> {
        if envelope.payload_kind != self.kind {
            return Err(Error::Contract(format!(
                "{:?} envelope offered to a {:?} queue",
                envelope.payload_kind, self.kind
            )));
        }
        match self.kind {
            PayloadKind::Flame => self.ingest_flame(&decode_flame_batch(&envelope.payload)?),
            PayloadKind::Mel => self.ingest_mel(&decode_mel_batch(&envelope.payload)?),
            other => Err(Error::Contract(format!("no queue for {other:?} payloads"))),
        }
    }

    /// Block of `rows` rows ending at entry index `end` (inclusive), zero-padded on the left.
    fn block_ending_at(&self, end: Option<usize>, rows: usize) -> Block {
        let mut data = vec![0.0; rows * self.dim];
        let (taken, last_ts) = match end {
            Some(end) => {
                let taken = (end + 1).min(rows);
                let first = end + 1 - taken;
                for (slot, (_, v)) in self.entries.range(first..=end).enumerate() {
                    let row = rows - taken + slot;
                    data[row * self.dim..(row + 1) * self.dim].copy_from_slice(v);
                }
                (taken, Some(self.entries[end].0))
            }
            None => (0, None),
        };
        Block {
            rows,
            dim: self.dim,
            data,
            padded: rows - taken,
            last_ts_us: last_ts,
        }
    }
}

/// Row-major block of `rows x dim` values; the first `padded` rows are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub padded: usize,
    pub last_ts_us: Option<u64>,
}

impl Block {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// Mean over all rows, padding included.
    pub fn mean_row(&self) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.dim];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / self.rows.max(1) as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWindow {
    /// `T_window` speaker motion vectors.
    pub speaker_flame: Block,
    /// `4 * T_window` speaker mel frames.
    pub speaker_mel: Block,
    /// `t_history` previously predicted listener vectors.
    pub listener_past: Block,
    pub window_end_ts_us: u64,
}

/// Window over the newest available frames; `None` only when the FLAME queue is empty.
pub fn assemble_window(
    flame: &ModalityQueue,
    mel: &ModalityQueue,
    history: &ModalityQueue,
    cfg: &PipelineConfig,
) -> Option<FusionWindow> {
    assemble_window_at(flame, mel, history, cfg, u64::MAX)
}

/// Window whose FLAME block ends at the newest frame stamped at or before `cutoff_ts_us`.
pub fn assemble_window_at(
    flame: &ModalityQueue,
    mel: &ModalityQueue,
    history: &ModalityQueue,
    cfg: &PipelineConfig,
    cutoff_ts_us: u64,
) -> Option<FusionWindow> {
    let flame_end = flame
        .entries
        .partition_point(|e| e.0 <= cutoff_ts_us)
        .checked_sub(1)?;
    let speaker_flame = flame.block_ending_at(Some(flame_end), cfg.window_frames);
    let end_ts = flame.entries[flame_end].0;
    let mel_end = nearest_index(mel, end_ts);
    let speaker_mel = mel.block_ending_at(mel_end, cfg.mel_window_frames());
    let listener_past = history_block(history, cfg.history_frames);
    Some(FusionWindow {
        speaker_flame,
        speaker_mel,
        listener_past,
        window_end_ts_us: end_ts,
    })
}

/// Entry with timestamp nearest `ts`; ties resolve to the earlier entry.
fn nearest_index(q: &ModalityQueue, ts: u64) -> Option<usize> {
    if q.entries.is_empty() {
        return None;
    }
    let after = q.entries.partition_point(|e| e.0 < ts);
    if after == 0 {
        return Some(0);
    }
    if after == q.entries.len() {
        return Some(after - 1);
    }
    let before_gap = ts - q.entries[after - 1].0;
    let after_gap = q.entries[after].0 - ts;
    Some(if after_gap < before_gap {
        after
    } else {
        after - 1
    })
}

/// The newest `rows` history entries, zero-padded on the left.
pub fn history_block(history: &ModalityQueue, rows: usize) -> Block {
    history.block_ending_at(history.len().checked_sub(1), rows)
}

/// Appends predicted listener vectors to the history queue, which keeps the newest `t_history`.
pub fn push_history(history: &mut ModalityQueue, predicted: &[Vec<f32>]) -> Result<()> {
    if let Some(bad) = predicted.iter().find(|p| p.len() != history.dim) {
        return Err(Error::Contract(format!(
            "predicted vector has {} values, history holds {}",
            bad.len(),
            history.dim
        )));
    }
    for p in predicted {
        let ts = history.tail_ts().map_or(0, |t| t + 1);
        history.push(ts, p.clone())?;
    }
    Ok(())
}
