//! Pipeline configuration: `key=value` lines with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Output (and nominal FLAME) frame rate, `F_fps`.
    pub f_fps: u32,
    /// Mel frame rate, `M_fps`; must equal `4 * f_fps` unless `m_fps_override`.
    pub m_fps: u32,
    pub m_fps_override: bool,
    /// Audio batch length in seconds.
    pub t_audio_s: f64,
    /// Video batch length in seconds.
    pub t_video_s: f64,
    pub expr_dim: usize,
    /// Mel coefficient count `l`.
    pub mel_dim: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Speaker FLAME window length `T`.
    pub window_frames: usize,
    /// Listener history length `t`.
    pub history_frames: usize,
    /// Frames predicted per step `w`.
    pub out_frames: usize,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub temperature: f64,
    pub greedy: bool,
    /// Output frames the window right edge advances per prediction step.
    pub stride_frames: usize,
    pub inbox_capacity: usize,
    /// `pub.<topic>.addr` entries.
    pub topic_addrs: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            f_fps: 30,
            m_fps: 120,
            m_fps_override: false,
            t_audio_s: 0.5,
            t_video_s: 1.0,
            expr_dim: 100,
            mel_dim: 128,
            codebook_size: 200,
            code_dim: 64,
            window_frames: 64,
            history_frames: 32,
            out_frames: 8,
            sample_rate_hz: 16_000,
            seed: 0,
            temperature: 1.0,
            greedy: false,
            stride_frames: 8,
            inbox_capacity: 256,
            topic_addrs: BTreeMap::new(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::Parse {
        key: key.to_string(),
        reason: format!("{raw:?}: {e}"),
    })
}

impl PipelineConfig {
    /// Parses config text, applying defaults for missing keys and validating invariants.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut m_fps_set = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                key: format!("line {}", lineno + 1),
                reason: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "F_fps" => cfg.f_fps = parse_value(key, value)?,
                "M_fps" => {
                    cfg.m_fps = parse_value(key, value)?;
                    m_fps_set = true;
                }
                "M_fps_override" => cfg.m_fps_override = parse_value(key, value)?,
                "T_audio_s" => cfg.t_audio_s = parse_value(key, value)?,
                "T_video_s" => cfg.t_video_s = parse_value(key, value)?,
                "expr_dim" => cfg.expr_dim = parse_value(key, value)?,
                "l" => cfg.mel_dim = parse_value(key, value)?,
                "K" => cfg.codebook_size = parse_value(key, value)?,
                "code_dim" => cfg.code_dim = parse_value(key, value)?,
                "T_window" => cfg.window_frames = parse_value(key, value)?,
                "t_history" => cfg.history_frames = parse_value(key, value)?,
                "w_out" => cfg.out_frames = parse_value(key, value)?,
                "sample_rate_hz" => cfg.sample_rate_hz = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "temperature" => cfg.temperature = parse_value(key, value)?,
                "greedy" => cfg.greedy = parse_value(key, value)?,
                "fusion.stride_frames" => cfg.stride_frames = parse_value(key, value)?,
                "transport.inbox_capacity" => cfg.inbox_capacity = parse_value(key, value)?,
                k if k.starts_with("pub.") && k.ends_with(".addr") && k.len() > 9 => {
                    let topic = &k[4..k.len() - 5];
                    cfg.topic_addrs.insert(topic.to_string(), value.to_string());
                }
                other => {
                    return Err(Error::Parse {
                        key: other.to_string(),
                        reason: "unknown key".into(),
                    })
                }
            }
        }
        if !m_fps_set {
            cfg.m_fps = cfg.f_fps.saturating_mul(4);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("F_fps", self.f_fps as usize),
            ("M_fps", self.m_fps as usize),
            ("expr_dim", self.expr_dim),
            ("l", self.mel_dim),
            ("K", self.codebook_size),
            ("code_dim", self.code_dim),
            ("T_window", self.window_frames),
            ("t_history", self.history_frames),
            ("w_out", self.out_frames),
            ("sample_rate_hz", self.sample_rate_hz as usize),
            ("fusion.stride_frames", self.stride_frames),
            ("transport.inbox_capacity", self.inbox_capacity),
        ];
        for (key, v) in positive_ints {
            if v == 0 {
                return Err(Error::Constraint(format!("{key} must be positive")));
            }
        }
        for (key, v) in [
            ("T_audio_s", self.t_audio_s),
            ("T_video_s", self.t_video_s),
            ("temperature", self.temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Constraint(format!(
                    "{key} must be positive, got {v}"
                )));
            }
        }
        if !self.m_fps_override && self.m_fps != 4 * self.f_fps {
            return Err(Error::Constraint(format!(
                "M_fps ({}) must equal 4 x F_fps ({}); set M_fps_override=true to bypass",
                self.m_fps,
                4 * self.f_fps
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serializes every field; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "F_fps={}", self.f_fps);
        let _ = writeln!(out, "M_fps={}", self.m_fps);
        let _ = writeln!(out, "M_fps_override={}", self.m_fps_override);
        let _ = writeln!(out, "T_audio_s={}", self.t_audio_s);
        let _ = writeln!(out, "T_video_s={}", self.t_video_s);
        let _ = writeln!(out, "expr_dim={}", self.expr_dim);
        let _ = writeln!(out, "l={}", self.mel_dim);
        let _ = writeln!(out, "K={}", self.codebook_size);
        let _ = writeln!(out, "code_dim={}", self.code_dim);
        let _ = writeln!(out, "T_window={}", self.window_frames);
        let _ = writeln!(out, "t_history={}", self.history_frames);
        let _ = writeln!(out, "w_out={}", self.out_frames);
        let _ = writeln!(out, "sample_rate_hz={}", self.sample_rate_hz);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "temperature={}", self.temperature);
        let _ = writeln!(out, "greedy={}", self.greedy);
        let _ = writeln!(out, "fusion.stride_frames={}", self.stride_frames);
        let _ = writeln!(out, "transport.inbox_capacity={}", self.inbox_capacity);
        for (topic, addr) in &self.topic_addrs {
            let _ = writeln!(out, "pub.{topic}.addr={addr}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Mel frames per audio batch: `4 * F_fps * T_audio` (i.e. `M_fps * T_audio`).
    pub fn mel_frames_per_batch(&self) -> usize {
        (self.m_fps as f64 * self.t_audio_s).round() as usize
    }

    /// Mel queue length paired with a FLAME window of `window_frames`.
    pub fn mel_window_frames(&self) -> usize {
        4 * self.window_frames
    }

    /// Width of one predicted listener vector: expression + jaw + head axis-angles.
    pub fn motion_dim(&self) -> usize {
        self.expr_dim + 6
    }

    pub fn topic_addr(&self, topic: &str) -> String {
        self.topic_addrs
            .get(topic)
            .cloned()
            .unwrap_or_else(|| "127.0.0.1:0".to_string())
    }
}
