//! Seeded linear predictor: pooled speaker/listener context to a distribution over
//! codebook indices, and a bounded decoder from a code to `w_out` motion frames.
//!
//! Weight file layout (little-endian): `"L2L1"`, u32 `expr_dim`, `l`, `K`, `code_dim`,
//! `w_out`, then f32 row-major blocks in this order:
//!
//! | block       | shape                            |
//! |-------------|----------------------------------|
//! | flame_proj  | code_dim x (expr_dim + 6)        |
//! | mel_proj    | code_dim x l                     |
//! | codebook    | K x code_dim                     |
//! | embedding   | K x code_dim                     |
//! | logit_w     | K x 3·code_dim                   |
//! | logit_b     | K                                |
//! | decoder_w   | w_out·(expr_dim + 6) x code_dim  |
//! | decoder_b   | w_out·(expr_dim + 6)             |

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codebook::Codebook;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{Block, FusionWindow};
use crate::linalg::Matrix;
use crate::wire::{PutLe, Reader};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"L2L1";

/// Expression channels decode into (-EXPR_BOUND, EXPR_BOUND).
pub const EXPR_BOUND: f32 = 3.0;
/// Per-component pose bound; keeps axis-angle norms below `0.5 * sqrt(3)`.
pub const POSE_BOUND: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub expr_dim: usize,
    pub mel_dim: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub out_frames: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            expr_dim: cfg.expr_dim,
            mel_dim: cfg.mel_dim,
            codebook_size: cfg.codebook_size,
            code_dim: cfg.code_dim,
            out_frames: cfg.out_frames,
        }
    }

    pub fn motion_dim(&self) -> usize {
        self.expr_dim + 6
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub index: usize,
    /// `w_out` motion vectors (`expr ++ jaw_aa ++ head_aa`).
    pub frames: Vec<Vec<f32>>,
    pub logits: Vec<f32>,
    /// `softmax(logits / temperature)`.
    pub probs: Vec<f64>,
}

/// Anything that maps a fusion window to the next listener chunk.
pub trait Predictor {
    fn predict(&self, window: &FusionWindow, rng: &mut ChaCha8Rng) -> Result<Prediction>;
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    dims: ModelDims,
    flame_proj: Matrix<f32>,
    mel_proj: Matrix<f32>,
    codebook: Codebook<f32>,
    embedding: Matrix<f32>,
    logit_w: Matrix<f32>,
    logit_b: Vec<f32>,
    decoder_w: Matrix<f32>,
    decoder_b: Vec<f32>,
    pub temperature: f64,
    pub greedy: bool,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix<f32> {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// Bound giving unit output variance for unit-variance inputs.
fn fan_in_bound(fan_in: usize) -> f32 {
    (3.0 / fan_in.max(1) as f32).sqrt()
}

impl PredictorModel {
    pub fn seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.codebook_size == 0
            || dims.code_dim == 0
            || dims.out_frames == 0
            || dims.mel_dim == 0
        {
            return Err(Error::Parameter(format!(
                "degenerate model dimensions {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, c, k) = (dims.motion_dim(), dims.code_dim, dims.codebook_size);
        let out = dims.out_frames * m;
        Ok(Self {
            dims,
            flame_proj: uniform(&mut rng, c, m, fan_in_bound(m)),
            mel_proj: uniform(&mut rng, c, dims.mel_dim, fan_in_bound(dims.mel_dim)),
            codebook: Codebook::new(uniform(&mut rng, k, c, 1.0))?,
            embedding: uniform(&mut rng, k, c, 1.0),
            logit_w: uniform(&mut rng, k, 3 * c, fan_in_bound(3 * c)),
            logit_b: (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            decoder_w: uniform(&mut rng, out, c, fan_in_bound(c)),
            decoder_b: (0..out).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            temperature: 1.0,
            greedy: false,
        })
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let mut m = Self::seeded(ModelDims::from_config(cfg), cfg.seed)?;
        m.temperature = cfg.temperature;
        m.greedy = cfg.greedy;
        Ok(m)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn codebook(&self) -> &Codebook<f32> {
        &self.codebook
    }

    pub fn set_codebook(&mut self, codebook: Codebook<f32>) -> Result<()> {
        if codebook.len() != self.dims.codebook_size || codebook.dim() != self.dims.code_dim {
            return Err(Error::Contract(format!(
                "codebook is {}x{}, model expects {}x{}",
                codebook.len(),
                codebook.dim(),
                self.dims.codebook_size,
                self.dims.code_dim
            )));
        }
        self.codebook = codebook;
        Ok(())
    }

    /// Checks that the model agrees with the pipeline configuration.
    pub fn check_config(&self, cfg: &PipelineConfig) -> Result<()> {
        let want = ModelDims::from_config(cfg);
        if want != self.dims {
            return Err(Error::Contract(format!(
                "model dims {:?} differ from config {want:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Mean-pools a run of motion vectors and projects it into code space.
    pub fn encode_motion(&self, frames: &[Vec<f32>]) -> Result<Vec<f32>> {
        let m = self.dims.motion_dim();
        let mut pooled = vec![0.0f32; m];
        for f in frames {
            if f.len() != m {
                return Err(Error::Contract(format!(
                    "motion vector has {} values, expected {m}",
                    f.len()
                )));
            }
            pooled.iter_mut().zip(f).for_each(|(p, &v)| *p += v);
        }
        let inv = 1.0 / frames.len().max(1) as f32;
        pooled.iter_mut().for_each(|p| *p *= inv);
        self.flame_proj.matvec(&pooled)
    }

    /// Codes for each `w_out`-frame chunk of a run of motion vectors.
    pub fn encode_chunks(&self, frames: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        frames
            .chunks_exact(self.dims.out_frames)
            .map(|c| self.encode_motion(c))
            .collect()
    }

    /// Mean embedding of the codes of the non-padded history chunks; zero without history.
    fn history_context(&self, past: &Block) -> Result<Vec<f32>> {
        let w = self.dims.out_frames;
        let mut acc = vec![0.0f32; self.dims.code_dim];
        let mut n = 0usize;
        let mut start = 0;
        while start + w <= past.rows {
            if start + w > past.padded {
                let rows: Vec<Vec<f32>> =
                    (start..start + w).map(|r| past.row(r).to_vec()).collect();
                let idx = self.codebook.quantize(&self.encode_motion(&rows)?)?;
                acc.iter_mut()
                    .zip(self.embedding.row(idx))
                    .for_each(|(a, &e)| *a += e);
                n += 1;
            }
            start += w;
        }
        if n > 0 {
            let inv = 1.0 / n as f32;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(acc)
    }

    fn check_window(&self, w: &FusionWindow) -> Result<()> {
        let m = self.dims.motion_dim();
        for (name, block, dim) in [
            ("speaker FLAME", &w.speaker_flame, m),
            ("speaker mel", &w.speaker_mel, self.dims.mel_dim),
            ("listener history", &w.listener_past, m),
        ] {
            if block.dim != dim {
                return Err(Error::Contract(format!(
                    "{name} block is {} wide, model expects {dim}",
                    block.dim
                )));
            }
        }
        Ok(())
    }

    pub fn logits(&self, window: &FusionWindow) -> Result<Vec<f32>> {
        self.check_window(window)?;
        let mut fused = self.flame_proj.matvec(&window.speaker_flame.mean_row())?;
        fused.extend(self.mel_proj.matvec(&window.speaker_mel.mean_row())?);
        fused.extend(self.history_context(&window.listener_past)?);
        let mut logits = self.logit_w.matvec(&fused)?;
        logits
            .iter_mut()
            .zip(&self.logit_b)
            .for_each(|(l, b)| *l += b);
        Ok(logits)
    }

    /// `w_out` motion vectors for codebook entry `index`.
    pub fn decode(&self, index: usize) -> Result<Vec<Vec<f32>>> {
        let m = self.dims.motion_dim();
        let e = self.dims.expr_dim;
        let mut raw = self.decoder_w.matvec(self.codebook.entry(index))?;
        raw.iter_mut()
            .zip(&self.decoder_b)
            .for_each(|(v, b)| *v += b);
        Ok(raw
            .chunks_exact(m)
            .map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if i < e {
                            EXPR_BOUND * v.tanh()
                        } else {
                            POSE_BOUND * v.tanh()
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        let d = &self.dims;
        for v in [
            d.expr_dim,
            d.mel_dim,
            d.codebook_size,
            d.code_dim,
            d.out_frames,
        ] {
            out.put_u32(v as u32);
        }
        let blocks: [&[f32]; 8] = [
            self.flame_proj.as_slice(),
            self.mel_proj.as_slice(),
            self.codebook.entries().as_slice(),
            self.embedding.as_slice(),
            self.logit_w.as_slice(),
            &self.logit_b,
            self.decoder_w.as_slice(),
            &self.decoder_b,
        ];
        for b in blocks {
            b.iter().for_each(|&v| out.put_f32(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weights");
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Format("weights: bad magic".into()));
        }
        let mut dim = || r.u32().map(|v| v as usize);
        let dims = ModelDims {
            expr_dim: dim()?,
            mel_dim: dim()?,
            codebook_size: dim()?,
            code_dim: dim()?,
            out_frames: dim()?,
        };
        let (m, c, k) = (dims.motion_dim(), dims.code_dim, dims.codebook_size);
        let out = dims.out_frames * m;
        let mut mat = |rows: usize, cols: usize| -> Result<Matrix<f32>> {
            Matrix::from_vec(rows, cols, r.f32_vec(rows * cols)?)
        };
        let flame_proj = mat(c, m)?;
        let mel_proj = mat(c, dims.mel_dim)?;
        let codebook = Codebook::new(mat(k, c)?)?;
        let embedding = mat(k, c)?;
        let logit_w = mat(k, 3 * c)?;
        let logit_b = mat(1, k)?.into_vec();
        let decoder_w = mat(out, c)?;
        let decoder_b = mat(1, out)?.into_vec();
        r.expect_end()?;
        let model = Self {
            dims,
            flame_proj,
            mel_proj,
            codebook,
            embedding,
            logit_w,
            logit_b,
            decoder_w,
            decoder_b,
            temperature: 1.0,
            greedy: false,
        };
        let finite = [
            &model.flame_proj,
            &model.mel_proj,
            &model.embedding,
            &model.logit_w,
            &model.decoder_w,
        ]
        .iter()
        .all(|m| m.is_finite())
            && model
                .logit_b
                .iter()
                .chain(&model.decoder_b)
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("weights contain non-finite values".into()));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// `softmax(logits / temperature)` accumulated in double precision.
pub fn softmax(logits: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `probs`.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Predictor for PredictorModel {
    fn predict(&self, window: &FusionWindow, rng: &mut ChaCha8Rng) -> Result<Prediction> {
        let logits = self.logits(window)?;
        let probs = softmax(&logits, self.temperature)?;
        let index = if self.greedy {
            argmax(&logits)
        } else {
            sample_index(&probs, rng)
        };
        Ok(Prediction {
            index,
            frames: self.decode(index)?,
            logits,
            probs,
        })
    }
}

/// One autoregressive step: logits from the window, a sampled (or argmax) code, and its decoding.
pub fn predict_step<P: Predictor + ?Sized>(
    model: &P,
    window: &FusionWindow,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction> {
    model.predict(window, rng)
}
