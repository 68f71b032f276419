use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::channel;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relisten::audio::{default_bursts, extract_mel, read_wav, synth_speech, write_wav};
use relisten::features::{publish_batches, read_flame, synth_flame, write_flame};
use relisten::frames::encode_mel_batch;
use relisten::generator::{l2_loss, train_codebook, Codebook, PredictorModel};
use relisten::mapper::{build_gl, convert_frames, ExpressionMapping, GlMode, EXAMPLE_MAPPING};
use relisten::metrics::{Metric, Metrics, StageSample};
use relisten::pipeline::{run_pipeline, run_pipeline_with_tap, RunMode, RunSpec, RunSummary};
use relisten::server::{decode_frame, serve, ServerOptions};
use relisten::transport::Publisher;
use relisten::{GlMatrix32, Pacing, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "relisten",
    version,
    about = "Real-time listener behavior pipeline"
)]
struct Cli {
    /// Pipeline configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Publish inputs as fast as possible instead of in real time.
    #[arg(long, global = true)]
    fast: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic speaker audio and FLAME motion.
    GenSynthetic {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// FLAME frame rate.
        #[arg(long, default_value_t = 30)]
        fps: u32,
    },
    /// Extract mel-cepstral frames from a 16 kHz WAV file.
    ExtractMel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit log-mel bands instead of cepstral coefficients.
        #[arg(long)]
        no_dct: bool,
    },
    /// Build the FLAME-to-ARKit matrix from a mapping table.
    BuildGl {
        /// Mapping table; the shipped example table when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Difference)]
        mode: ModeArg,
        /// Expression width; the larger of the configured width and the table span by default.
        #[arg(long)]
        expr_dim: Option<usize>,
    },
    /// Fit the codebook to FLAME recordings and write predictor weights.
    TrainCodebook {
        #[arg(long = "flame", required = true)]
        flames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Starting weights; seeded from the configuration when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Mean squared per-frame distance between two FLAME files.
    EvalL2 { pred: PathBuf, gt: PathBuf },
    /// Publish a FLAME file on the "flame" topic.
    PlayFlame {
        #[arg(long)]
        flame: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7001")]
        addr: String,
        /// How long to wait for the first subscriber.
        #[arg(long, default_value_t = 10_000)]
        wait_ms: u64,
    },
    /// Stream frames to WebSocket clients.
    Serve {
        #[arg(long, default_value = "127.0.0.1:9001")]
        addr: String,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Replay a frame dump instead of running the pipeline.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[command(flatten)]
        inputs: OptionalInputs,
        /// Keep serving this long after the source is exhausted.
        #[arg(long, default_value_t = 1000)]
        linger_ms: u64,
    },
    /// Run the pipeline on synthetic input and write a latency report.
    Bench {
        #[arg(long, default_value = "latency.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Keep generated inputs and the frame dump here.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Run the full pipeline on recorded inputs.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        frames_out: Option<PathBuf>,
        #[arg(long)]
        latency_csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    flame: PathBuf,
    #[arg(long)]
    gl: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct OptionalInputs {
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    flame: Option<PathBuf>,
    #[arg(long)]
    gl: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Difference,
    Positive,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RELISTEN_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let mode = if cli.fast {
        RunMode::Offline
    } else {
        RunMode::Live
    };
    match cli.command {
        Command::GenSynthetic {
            out_dir,
            duration,
            fps,
        } => gen_synthetic(&cfg, &out_dir, duration, fps),
        Command::ExtractMel { input, out, no_dct } => {
            let (samples, rate) =
                read_wav(&input).with_context(|| format!("reading {}", input.display()))?;
            let batches = extract_mel(
                &samples,
                rate,
                cfg.mel_dim,
                cfg.f_fps,
                cfg.t_audio_s,
                !no_dct,
            )?;
            let frames: Vec<_> = batches.into_iter().flat_map(|b| b.frames).collect();
            std::fs::write(&out, encode_mel_batch(&frames))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{} mel frames -> {}", frames.len(), out.display());
            Ok(())
        }
        Command::BuildGl {
            map,
            out,
            mode,
            expr_dim,
        } => {
            let table = match &map {
                Some(p) => ExpressionMapping::load(p)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => ExpressionMapping::parse(EXAMPLE_MAPPING)?,
            };
            let dim = expr_dim.unwrap_or(cfg.expr_dim.max(table.span()));
            let mode = match mode {
                ModeArg::Difference => GlMode::Difference,
                ModeArg::Positive => GlMode::PositiveOnly,
            };
            let gl: GlMatrix32 = build_gl(&table, dim, mode)?;
            gl.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("GL matrix {dim}x52 -> {}", out.display());
            Ok(())
        }
        Command::TrainCodebook {
            flames,
            out,
            weights,
            iters,
        } => train(&cfg, &flames, &out, weights.as_deref(), iters),
        Command::EvalL2 { pred, gt } => {
            let motion = |p: &Path| -> Result<Vec<Vec<f32>>> {
                let seq = read_flame(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(seq.frames.iter().map(|f| f.motion_vector()).collect())
            };
            println!("{:?}", l2_loss(&motion(&pred)?, &motion(&gt)?)?);
            Ok(())
        }
        Command::PlayFlame {
            flame,
            addr,
            wait_ms,
        } => {
            let seq = read_flame(&flame).with_context(|| format!("reading {}", flame.display()))?;
            let mut publisher =
                Publisher::bind("flame", &addr).with_context(|| format!("binding {addr}"))?;
            println!(
                "publishing {} on {}",
                flame.display(),
                publisher.local_addr()
            );
            let until = Instant::now() + Duration::from_millis(wait_ms);
            while publisher.subscriber_count() == 0 {
                if Instant::now() > until {
                    bail!("no subscriber connected within {wait_ms} ms");
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let pacing = if cli.fast {
                Pacing::Fast
            } else {
                Pacing::live_from_now()
            };
            let n = publish_batches(&seq, cfg.t_video_s, &mut publisher, pacing, None)?;
            println!("{n} batches published");
            Ok(())
        }
        Command::Serve {
            addr,
            fps,
            frames,
            inputs,
            linger_ms,
        } => serve_cmd(&cfg, mode, &addr, fps, frames.as_deref(), inputs, linger_ms),
        Command::Bench {
            out,
            duration,
            work_dir,
        } => bench(&cfg, &out, duration, work_dir.as_deref()),
        Command::Run {
            inputs,
            frames_out,
            latency_csv,
        } => {
            let mut spec = RunSpec::new(inputs.wav, inputs.flame, inputs.gl);
            spec.weights = inputs.weights;
            spec.mode = mode;
            spec.config = cfg;
            spec.frames_out = frames_out;
            spec.latency_csv = latency_csv;
            print_summary(&run_pipeline(&spec)?);
            Ok(())
        }
    }
}

fn gen_synthetic(cfg: &PipelineConfig, dir: &Path, duration: f64, fps: u32) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let wav = dir.join("speaker.wav");
    let flm = dir.join("speaker.flm");
    let samples = synth_speech(
        duration,
        cfg.sample_rate_hz,
        &default_bursts(duration),
        cfg.seed,
    );
    write_wav(&wav, &samples, cfg.sample_rate_hz)?;
    write_flame(&synth_flame(duration, fps, cfg.expr_dim, cfg.seed)?, &flm)?;
    println!("{}\n{}", wav.display(), flm.display());
    Ok(())
}

fn train(
    cfg: &PipelineConfig,
    flames: &[PathBuf],
    out: &Path,
    weights: Option<&Path>,
    iters: usize,
) -> Result<()> {
    let mut model = match weights {
        Some(p) => PredictorModel::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PredictorModel::from_config(cfg)?,
    };
    let w = model.dims().out_frames;
    let mut codes = Vec::new();
    for p in flames {
        let seq = read_flame(p).with_context(|| format!("reading {}", p.display()))?;
        let motion: Vec<Vec<f32>> = seq.frames.iter().map(|f| f.motion_vector()).collect();
        for chunk in motion.windows(w) {
            codes.push(model.encode_motion(chunk)?);
        }
    }
    let k = model.dims().codebook_size;
    if codes.len() < k {
        bail!("{} training chunks of {w} frames cannot fill {k} codebook entries; supply more FLAME data", codes.len());
    }
    let t = train_codebook(&codes, k, iters, cfg.seed)?;
    model.set_codebook(Codebook::new(t.codebook.entries().clone())?)?;
    model
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} chunks, {} iterations{}, error {:.6} -> {:.6}; weights -> {}",
        codes.len(),
        t.iterations,
        if t.converged { " (converged)" } else { "" },
        t.errors[0],
        t.errors.last().copied().unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn serve_cmd(
    cfg: &PipelineConfig,
    mode: RunMode,
    addr: &str,
    fps: f64,
    frames: Option<&Path>,
    inputs: OptionalInputs,
    linger_ms: u64,
) -> Result<()> {
    let (tx, rx) = channel();
    let server = serve(
        addr,
        rx,
        ServerOptions {
            fps,
            ..Default::default()
        },
    )?;
    println!("serving on ws://{}", server.local_addr());
    match frames {
        Some(path) => {
            let file =
                std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let frame = decode_frame(&line?)
                    .with_context(|| format!("{} line {}", path.display(), i + 1))?;
                if tx.send(frame).is_err() {
                    break;
                }
            }
            drop(tx);
        }
        None => {
            let (Some(wav), Some(flame), Some(gl)) = (inputs.wav, inputs.flame, inputs.gl) else {
                bail!("serve needs --frames, or --wav, --flame and --gl to run the pipeline");
            };
            let mut spec = RunSpec::new(wav, flame, gl);
            spec.weights = inputs.weights;
            spec.mode = mode;
            spec.config = cfg.clone();
            print_summary(&run_pipeline_with_tap(&spec, Some(tx))?);
        }
    }
    while !server.wait_drained(Duration::from_millis(500)) {}
    std::thread::sleep(Duration::from_millis(linger_ms));
    let stats = server.stats();
    println!(
        "frames in {} paced {} late {}; sessions {}",
        stats.frames_in, stats.frames_paced, stats.frames_late, stats.sessions_opened
    );
    server.shutdown();
    Ok(())
}

fn bench(cfg: &PipelineConfig, out: &Path, duration: f64, work_dir: Option<&Path>) -> Result<()> {
    let tmp;
    let dir = match work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.to_path_buf()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    gen_synthetic(cfg, &dir, duration, cfg.f_fps)?;
    let gl: GlMatrix32 = build_gl(
        &ExpressionMapping::parse(EXAMPLE_MAPPING)?,
        cfg.expr_dim,
        GlMode::Difference,
    )
    .context("bench uses the example mapping table, which needs expr_dim >= 100")?;
    let gl_path = dir.join("gl.bin");
    gl.save(&gl_path)?;
    let mut spec = RunSpec::new(dir.join("speaker.wav"), dir.join("speaker.flm"), gl_path);
    spec.config = cfg.clone();
    spec.frames_out = Some(dir.join("frames.jsonl"));
    spec.latency_csv = Some(out.to_path_buf());
    let summary = run_pipeline(&spec)?;
    print_summary(&summary);

    // A second, single-threaded measurement of the GL transform alone.
    let motion = vec![vec![0.1f32; cfg.motion_dim()]; 32];
    let mut times: Vec<f64> = (0..200)
        .map(|_| {
            let t = Instant::now();
            let _ = convert_frames(&motion, &gl, 0, cfg.f_fps);
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    println!(
        "gl transform (32 frames): median {:.6} s",
        times[times.len() / 2]
    );

    let m = Metrics::new();
    let mut per_call: Vec<f64> = (0..10_000u64)
        .map(|i| {
            let t = Instant::now();
            m.record("bench", StageSample::new(i, i, i, i));
            t.elapsed().as_secs_f64()
        })
        .collect();
    per_call.sort_by(f64::total_cmp);
    println!(
        "metrics record: median {:.3} us",
        per_call[per_call.len() / 2] * 1e6
    );
    Ok(())
}

fn print_summary(s: &RunSummary) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "flame frames in {}, mel frames in {}, frames out {}, drops {}, speech segments {}",
        s.flame_frames_in,
        s.mel_frames_in,
        s.frames_out,
        s.drops,
        s.speech_segments
            .iter()
            .filter(|seg| seg.kind.is_speech())
            .count()
    );
    if let Some(us) = s.first_frame_latency_us {
        let _ = writeln!(
            out,
            "first frame after {:.3} s; wall time {:.3} s",
            us as f64 / 1e6,
            s.wall_time_s
        );
    }
    if let Some(r) = &s.report {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>10} {:>10} {:>10}",
            "stage", "count", "p50 ms", "p95 ms", "max ms"
        );
        for row in r.rows.iter().filter(|row| row.metric == Metric::Processing) {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>10.3} {:>10.3} {:>10.3}",
                row.stage,
                row.count,
                row.p50 * 1e3,
                row.p95 * 1e3,
                row.max * 1e3
            );
        }
    }
    if let Some(p) = &s.frames_path {
        let _ = writeln!(out, "frames -> {}", p.display());
    }
    if let Some(p) = &s.latency_path {
        let _ = writeln!(out, "latency -> {}", p.display());
    }
}
