//! End-to-end run: FLAME and audio sources, fusion + generator, GL transform and a
//! frame sink, wired over the pub/sub transport.
//!
//! ```text
//! flame source --"flame"--+
//!                         +--> behavior --"listener"--> transform --"arkit"--> sink --> dump / server
//! audio source --"mel"----+                                                    ^
//!              --"vad"---------------------------------------------------------+
//! ```
//!
//! In fast mode sources publish as quickly as they can; in live mode each batch is
//! released at its real end time. The behavior stage processes a FLAME batch only once
//! every mel batch starting before that batch's end has arrived, so fast-mode output
//! depends only on the inputs, the configuration and the seed.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{
    decode_segments, detect_voice, encode_segments, read_wav, MfccExtractor, SpeechSegment,
    VadParams,
};
use crate::clock::{now_us, Pacing};
use crate::config::PipelineConfig;
use crate::envelope::{PayloadKind, TimedEnvelope};
use crate::error::{Error, Result};
use crate::features::{frame_ts_us, publish_batches, read_flame, FlameSequence};
use crate::frames::{
    decode_arkit_batch, decode_flame_batch, encode_arkit_batch, encode_flame_batch,
    encode_mel_batch, ArkitFrame, FlameFrame,
};
use crate::fusion::{assemble_window_at, push_history, ModalityQueue};
use crate::generator::{Predictor, PredictorModel};
use crate::mapper::{convert_frames, GlMatrix};
use crate::metrics::{LatencyReport, Metrics, StageSample};
use crate::server::encode_frame;
use crate::transport::{Publisher, Subscriber};

pub const STAGE_FLAME: &str = "flame_extractor";
pub const STAGE_MEL: &str = "mel_extractor";
pub const STAGE_BEHAVIOR: &str = "behavior_generator";
pub const STAGE_TRANSFORM: &str = "gl_transform";
pub const STAGE_SINK: &str = "frame_sink";

const RECV_POLL_MS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    /// Sources publish as fast as possible.
    #[default]
    Offline,
    /// Sources release each batch at its real end time.
    Live,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub mode: RunMode,
    pub wav: PathBuf,
    pub flame: PathBuf,
    pub gl: PathBuf,
    /// Seeded model from the configuration when absent.
    pub weights: Option<PathBuf>,
    pub config: PipelineConfig,
    /// One JSON frame per line.
    pub frames_out: Option<PathBuf>,
    pub latency_csv: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(wav: impl Into<PathBuf>, flame: impl Into<PathBuf>, gl: impl Into<PathBuf>) -> Self {
        Self {
            mode: RunMode::Offline,
            wav: wav.into(),
            flame: flame.into(),
            gl: gl.into(),
            weights: None,
            config: PipelineConfig::default(),
            frames_out: None,
            latency_csv: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub flame_frames_in: usize,
    pub mel_frames_in: usize,
    pub frames_out: usize,
    /// Envelopes lost to full inboxes plus frames dropped or rejected by fusion queues.
    pub drops: u64,
    /// Frames outside `[0, 1]`; zero unless the retargeting is broken.
    pub weights_out_of_range: usize,
    pub speech_segments: Vec<SpeechSegment>,
    /// Time from pipeline start to the first frame leaving the sink.
    pub first_frame_latency_us: Option<u64>,
    pub frames_path: Option<PathBuf>,
    pub latency_path: Option<PathBuf>,
    pub report: Option<LatencyReport>,
    pub wall_time_s: f64,
}

struct Inputs {
    samples: Vec<i16>,
    flame: FlameSequence,
    gl: GlMatrix<f32>,
    model: PredictorModel,
}

fn named<T>(path: &Path, what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Startup(format!("{what} {}: {e}", path.display())))
}

fn load_inputs(spec: &RunSpec) -> Result<Inputs> {
    let cfg = &spec.config;
    cfg.validate()?;
    for (path, what) in [
        (&spec.wav, "audio"),
        (&spec.flame, "FLAME file"),
        (&spec.gl, "GL matrix"),
    ]
    .into_iter()
    .chain(spec.weights.as_ref().map(|w| (w, "weights")))
    {
        if !path.is_file() {
            return Err(Error::Startup(format!(
                "{what} {} does not exist",
                path.display()
            )));
        }
    }
    if cfg.stride_frames > cfg.out_frames {
        return Err(Error::Constraint(format!(
            "fusion.stride_frames ({}) exceeds w_out ({})",
            cfg.stride_frames, cfg.out_frames
        )));
    }
    let (samples, rate) = named(&spec.wav, "audio", read_wav(&spec.wav))?;
    if rate != cfg.sample_rate_hz {
        return Err(Error::Startup(format!(
            "audio {} is {rate} Hz, configuration expects {} Hz",
            spec.wav.display(),
            cfg.sample_rate_hz
        )));
    }
    let flame = named(&spec.flame, "FLAME file", read_flame(&spec.flame))?;
    let gl = named(&spec.gl, "GL matrix", GlMatrix::<f32>::load(&spec.gl))?;
    if flame.expr_dim() != cfg.expr_dim || gl.expr_dim() != cfg.expr_dim {
        return Err(Error::Startup(format!(
            "expression widths disagree: FLAME file {}, GL matrix {}, configuration {}",
            flame.expr_dim(),
            gl.expr_dim(),
            cfg.expr_dim
        )));
    }
    let mut model = match &spec.weights {
        Some(path) => named(path, "weights", PredictorModel::load(path))?,
        None => PredictorModel::from_config(cfg)?,
    };
    model.check_config(cfg)?;
    model.temperature = cfg.temperature;
    model.greedy = cfg.greedy;
    Ok(Inputs {
        samples,
        flame,
        gl,
        model,
    })
}

/// Runs the pipeline to completion.
pub fn run_pipeline(spec: &RunSpec) -> Result<RunSummary> {
    run_pipeline_with_tap(spec, None)
}

/// As [`run_pipeline`], also forwarding every output frame to `tap` (e.g. a server source).
pub fn run_pipeline_with_tap(
    spec: &RunSpec,
    tap: Option<Sender<ArkitFrame>>,
) -> Result<RunSummary> {
    let inputs = load_inputs(spec)?;
    let dump = match &spec.frames_out {
        Some(p) => Some(BufWriter::new(named(
            p,
            "frame dump",
            File::create(p).map_err(Error::from),
        )?)),
        None => None,
    };
    let cfg = spec.config.clone();
    let metrics = Metrics::new();
    let abort = Arc::new(AtomicBool::new(false));
    let wall = Instant::now();

    let bind = |topic: &str| Publisher::bind(topic, cfg.topic_addr(topic));
    let mut flame_pub = bind("flame")?;
    let mut mel_pub = bind("mel")?;
    let mut vad_pub = bind("vad")?;
    let mut listener_pub = bind("listener")?;
    let mut arkit_pub = bind("arkit")?;
    let behavior_sub = Subscriber::connect(
        &[
            ("flame", flame_pub.local_addr()),
            ("mel", mel_pub.local_addr()),
        ],
        cfg.inbox_capacity,
    )?;
    let transform_sub = Subscriber::connect(
        &[("listener", listener_pub.local_addr())],
        cfg.inbox_capacity,
    )?;
    let sink_sub = Subscriber::connect(
        &[
            ("arkit", arkit_pub.local_addr()),
            ("vad", vad_pub.local_addr()),
        ],
        cfg.inbox_capacity,
    )?;

    let pacing = match spec.mode {
        RunMode::Offline => Pacing::Fast,
        RunMode::Live => Pacing::live_from_now(),
    };
    let start_us = match pacing {
        Pacing::Live { start_us } => start_us,
        Pacing::Fast => now_us(),
    };
    let flame_fps = inputs.flame.fps;
    let flame_frames_in = inputs.flame.frames.len();

    let spawn = |name: &str,
                 f: Box<dyn FnOnce() -> Result<StageOut> + Send>|
     -> Result<JoinHandle<Result<StageOut>>> {
        let abort = Arc::clone(&abort);
        Ok(std::thread::Builder::new()
            .name(name.to_string())
            .spawn(move || {
                let r = f();
                if let Err(e) = &r {
                    log::error!("stage failed: {e}");
                    abort.store(true, Ordering::SeqCst);
                }
                r
            })?)
    };

    let mut handles = Vec::new();
    {
        let m = metrics.clone();
        let seq = inputs.flame;
        let t_video = cfg.t_video_s;
        handles.push(spawn(
            "flame-source",
            Box::new(move || {
                publish_batches(&seq, t_video, &mut flame_pub, pacing, Some(&m))?;
                Ok(StageOut::default())
            }),
        )?);
    }
    {
        let m = metrics.clone();
        let c = cfg.clone();
        let samples = inputs.samples;
        let abort = Arc::clone(&abort);
        handles.push(spawn(
            "audio-source",
            Box::new(move || {
                audio_source(&samples, &c, pacing, &mut mel_pub, &mut vad_pub, &m, &abort)
            }),
        )?);
    }
    {
        let m = metrics.clone();
        let c = cfg.clone();
        let model = inputs.model;
        let abort = Arc::clone(&abort);
        handles.push(spawn(
            "behavior",
            Box::new(move || {
                behavior_stage(
                    &behavior_sub,
                    &mut listener_pub,
                    &model,
                    &c,
                    flame_fps,
                    &m,
                    &abort,
                )
            }),
        )?);
    }
    {
        let m = metrics.clone();
        let f_fps = cfg.f_fps;
        let gl = inputs.gl;
        let abort = Arc::clone(&abort);
        handles.push(spawn(
            "transform",
            Box::new(move || {
                transform_stage(&transform_sub, &mut arkit_pub, &gl, f_fps, &m, &abort)
            }),
        )?);
    }
    {
        let m = metrics.clone();
        let abort = Arc::clone(&abort);
        handles.push(spawn(
            "sink",
            Box::new(move || sink_stage(&sink_sub, dump, tap, &m, &abort)),
        )?);
    }

    let mut total = StageOut::default();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(out)) => total.merge(out),
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(Error::Startup("a pipeline stage panicked".into()));
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let report = metrics.report();
    if let (Some(path), Some(r)) = (&spec.latency_csv, &report) {
        named(
            path,
            "latency report",
            std::fs::write(path, r.to_csv()).map_err(Error::from),
        )?;
    }
    Ok(RunSummary {
        flame_frames_in,
        mel_frames_in: total.mel_frames,
        frames_out: total.frames_out,
        drops: total.drops,
        weights_out_of_range: total.out_of_range,
        speech_segments: total.segments,
        first_frame_latency_us: total.first_frame_us.map(|t| t.saturating_sub(start_us)),
        frames_path: spec.frames_out.clone(),
        latency_path: report.as_ref().and(spec.latency_csv.clone()),
        report,
        wall_time_s: wall.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Default)]
struct StageOut {
    mel_frames: usize,
    frames_out: usize,
    drops: u64,
    out_of_range: usize,
    segments: Vec<SpeechSegment>,
    first_frame_us: Option<u64>,
}

impl StageOut {
    fn merge(&mut self, o: StageOut) {
        self.mel_frames += o.mel_frames;
        self.frames_out += o.frames_out;
        self.drops += o.drops;
        self.out_of_range += o.out_of_range;
        self.segments.extend(o.segments);
        self.first_frame_us = self.first_frame_us.or(o.first_frame_us);
    }
}

fn aborted(abort: &AtomicBool) -> Result<()> {
    if abort.load(Ordering::SeqCst) {
        return Err(Error::Transport("pipeline aborted by another stage".into()));
    }
    Ok(())
}

/// Next delivery, failing if upstream vanished without an end-of-stream marker.
fn receive(sub: &Subscriber, abort: &AtomicBool) -> Result<(TimedEnvelope, u64)> {
    loop {
        aborted(abort)?;
        if let Some(d) = sub.next_delivery(RECV_POLL_MS) {
            return Ok((d.envelope, d.recv_ts_us));
        }
        if sub.all_disconnected() && sub.is_empty() {
            return Err(Error::Transport(
                "upstream closed before end of stream".into(),
            ));
        }
    }
}

fn audio_source(
    samples: &[i16],
    cfg: &PipelineConfig,
    pacing: Pacing,
    mel_pub: &mut Publisher,
    vad_pub: &mut Publisher,
    metrics: &Metrics,
    abort: &AtomicBool,
) -> Result<StageOut> {
    let extractor = MfccExtractor::<f64>::new(cfg.sample_rate_hz, cfg.mel_dim, true)?;
    let batch_len = extractor.batch_len(cfg.t_audio_s);
    let per_batch = cfg.mel_frames_per_batch();
    let mut out = StageOut::default();
    for (b, chunk) in samples.chunks(batch_len.max(1)).enumerate() {
        aborted(abort)?;
        let end = b * batch_len + chunk.len();
        let captured =
            pacing.wait_for((end as f64 * 1e6 / cfg.sample_rate_hz as f64).round() as u64);
        let recv = now_us();
        let batch = extractor.extract_batch(chunk, b, per_batch, cfg.t_audio_s)?;
        let payload = encode_mel_batch(&batch.frames);
        let processed = now_us();
        mel_pub.publish(PayloadKind::Mel, payload, captured)?;
        metrics.record(
            STAGE_MEL,
            StageSample::new(captured, recv, processed, now_us()),
        );
        out.mel_frames += batch.frames.len();
    }
    let segments = detect_voice(samples, cfg.sample_rate_hz, &VadParams::default())?;
    vad_pub.publish(PayloadKind::Vad, encode_segments(&segments), now_us())?;
    mel_pub.publish_end(PayloadKind::Mel)?;
    vad_pub.publish_end(PayloadKind::Vad)?;
    Ok(out)
}

struct PendingFlame {
    frames: Vec<FlameFrame>,
    end_media_us: u64,
    capture_ts_us: u64,
    recv_ts_us: u64,
}

struct PendingMel {
    env: TimedEnvelope,
    start_media_us: u64,
    recv_ts_us: u64,
}

#[allow(clippy::too_many_arguments)]
fn behavior_stage(
    sub: &Subscriber,
    publisher: &mut Publisher,
    model: &PredictorModel,
    cfg: &PipelineConfig,
    flame_fps: u32,
    metrics: &Metrics,
    abort: &AtomicBool,
) -> Result<StageOut> {
    let f_fps = cfg.f_fps as u64;
    let mel_batch_us = (cfg.t_audio_s * 1e6).round() as u64;
    let mut flame_q = ModalityQueue::flame(cfg, flame_fps as f64);
    let mut mel_q = ModalityQueue::mel(cfg);
    let mut history = ModalityQueue::history(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut flame_batches: VecDeque<PendingFlame> = VecDeque::new();
    let mut mel_batches: VecDeque<PendingMel> = VecDeque::new();
    let (mut flame_done, mut mel_done) = (false, false);
    let mut flame_seen = 0usize;
    let mut mel_covered_us = 0u64;
    let mut generated: VecDeque<Vec<f32>> = VecDeque::new();
    let mut emitted = 0u64;
    let mut step = 0usize;

    loop {
        while let Some(batch) = flame_batches.front() {
            if !(mel_done || mel_covered_us >= batch.end_media_us) {
                break;
            }
            let batch = flame_batches.pop_front().expect("front exists");
            let mut ready_ts = batch.recv_ts_us;
            while mel_batches
                .front()
                .is_some_and(|m| m.start_media_us < batch.end_media_us)
            {
                let m = mel_batches.pop_front().expect("front exists");
                ready_ts = ready_ts.max(m.recv_ts_us);
                mel_q.ingest(&m.env)?;
            }
            flame_q.ingest_flame(&batch.frames)?;

            // Output frames whose media time precedes the batch end.
            let target = (batch.end_media_us * f_fps).div_ceil(1_000_000);
            while emitted + (generated.len() as u64) < target {
                let last_out = (step + 1) * cfg.stride_frames - 1;
                let cutoff = frame_ts_us(last_out, cfg.f_fps);
                let window = assemble_window_at(&flame_q, &mel_q, &history, cfg, cutoff)
                    .ok_or_else(|| {
                        Error::Contract(format!("no speaker frames before {cutoff} us"))
                    })?;
                let p = model.predict(&window, &mut rng)?;
                let kept = &p.frames[..cfg.stride_frames];
                push_history(&mut history, kept)?;
                generated.extend(kept.iter().cloned());
                step += 1;
            }
            let n = (target - emitted) as usize;
            let out: Vec<FlameFrame> = generated
                .drain(..n)
                .enumerate()
                .map(|(i, v)| {
                    FlameFrame::from_motion(&v, frame_ts_us(emitted as usize + i, cfg.f_fps))
                })
                .collect::<Result<_>>()?;
            emitted = target;
            let payload = encode_flame_batch(&out);
            let processed = now_us();
            publisher.publish(PayloadKind::Flame, payload, batch.capture_ts_us)?;
            metrics.record(
                STAGE_BEHAVIOR,
                StageSample::new(
                    batch.capture_ts_us,
                    ready_ts.max(batch.capture_ts_us),
                    processed,
                    now_us(),
                ),
            );
        }
        if flame_done && flame_batches.is_empty() {
            break;
        }
        let (env, recv) = receive(sub, abort)?;
        match (env.topic.as_str(), env.is_end_of_stream()) {
            ("flame", true) => flame_done = true,
            ("mel", true) => mel_done = true,
            ("flame", false) => {
                let frames = decode_flame_batch(&env.payload)?;
                flame_seen += frames.len();
                flame_batches.push_back(PendingFlame {
                    frames,
                    end_media_us: frame_ts_us(flame_seen, flame_fps),
                    capture_ts_us: env.capture_ts_us,
                    recv_ts_us: recv,
                });
            }
            ("mel", false) => {
                let start = crate::frames::decode_mel_batch(&env.payload)?
                    .first()
                    .map_or(mel_covered_us, |f| f.capture_ts_us);
                mel_covered_us = mel_covered_us.max(start + mel_batch_us);
                mel_batches.push_back(PendingMel {
                    env,
                    start_media_us: start,
                    recv_ts_us: recv,
                });
            }
            (other, _) => log::warn!("behavior stage ignoring topic {other}"),
        }
    }
    publisher.publish_end(PayloadKind::Flame)?;
    let fs = flame_q.stats();
    let ms = mel_q.stats();
    Ok(StageOut {
        drops: sub.stats().dropped + fs.rejected + ms.rejected,
        ..Default::default()
    })
}

fn transform_stage(
    sub: &Subscriber,
    publisher: &mut Publisher,
    gl: &GlMatrix<f32>,
    f_fps: u32,
    metrics: &Metrics,
    abort: &AtomicBool,
) -> Result<StageOut> {
    let mut next_seq = 0u64;
    loop {
        let (env, recv) = receive(sub, abort)?;
        if env.is_end_of_stream() {
            break;
        }
        let motion: Vec<Vec<f32>> = decode_flame_batch(&env.payload)?
            .iter()
            .map(FlameFrame::motion_vector)
            .collect();
        if motion.is_empty() {
            continue;
        }
        let frames = convert_frames(&motion, gl, next_seq, f_fps)?;
        next_seq += frames.len() as u64;
        let payload = encode_arkit_batch(&frames);
        let processed = now_us();
        publisher.publish(PayloadKind::Arkit, payload, env.capture_ts_us)?;
        metrics.record(
            STAGE_TRANSFORM,
            StageSample::new(env.capture_ts_us, recv, processed, now_us()),
        );
    }
    publisher.publish_end(PayloadKind::Arkit)?;
    Ok(StageOut {
        drops: sub.stats().dropped,
        ..Default::default()
    })
}

fn sink_stage(
    sub: &Subscriber,
    mut dump: Option<BufWriter<File>>,
    tap: Option<Sender<ArkitFrame>>,
    metrics: &Metrics,
    abort: &AtomicBool,
) -> Result<StageOut> {
    let mut out = StageOut::default();
    let (mut arkit_done, mut vad_done) = (false, false);
    while !(arkit_done && vad_done) {
        let (env, recv) = receive(sub, abort)?;
        match (env.payload_kind, env.is_end_of_stream()) {
            (PayloadKind::Arkit, true) => arkit_done = true,
            (PayloadKind::Vad, true) => vad_done = true,
            (PayloadKind::Vad, false) => out.segments.extend(decode_segments(&env.payload)?),
            (PayloadKind::Arkit, false) => {
                let frames = decode_arkit_batch(&env.payload)?;
                for f in &frames {
                    out.out_of_range += f
                        .weights
                        .iter()
                        .filter(|w| !(0.0..=1.0).contains(*w))
                        .count();
                    if let Some(d) = dump.as_mut() {
                        writeln!(d, "{}", encode_frame(f))?;
                    }
                    if let Some(t) = &tap {
                        // A closed server only stops forwarding; the run continues.
                        let _ = t.send(f.clone());
                    }
                }
                if let Some(d) = dump.as_mut() {
                    d.flush()?;
                }
                let processed = now_us();
                out.first_frame_us.get_or_insert(processed);
                out.frames_out += frames.len();
                metrics.record(
                    STAGE_SINK,
                    StageSample::new(env.capture_ts_us, recv, processed, now_us()),
                );
            }
            (kind, _) => log::warn!("sink ignoring {kind:?} payload"),
        }
    }
    out.drops += sub.stats().dropped;
    Ok(out)
}
