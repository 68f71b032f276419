//! Quantized autoregressive listener predictor.
//!
//! A window of speaker motion, speaker audio and past listener motion is pooled,
//! projected and fused into logits over `K` codebook entries; the sampled entry is
//! decoded into `w_out` listener frames, which are fed back as history.

mod codebook;
mod model;

pub use codebook::{train_codebook, Codebook, Training};
pub use model::{
    argmax, predict_step, sample_index, softmax, ModelDims, Prediction, Predictor, PredictorModel,
    EXPR_BOUND, POSE_BOUND, WEIGHTS_MAGIC,
};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{history_block, push_history, FusionWindow, ModalityQueue};
use crate::scalar::Real;

/// Runs `n_steps` predictions over `windows`, replacing each window's listener block
/// with the current history and pushing every prediction back into it.
pub fn generate<P: Predictor + ?Sized>(
    model: &P,
    windows: impl IntoIterator<Item = FusionWindow>,
    history: &mut ModalityQueue,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>> {
    let mut windows = windows.into_iter();
    let mut out = Vec::new();
    for step in 0..n_steps {
        let mut window = windows.next().ok_or_else(|| {
            Error::Contract(format!(
                "window stream ended after {step} of {n_steps} steps"
            ))
        })?;
        window.listener_past = history_block(history, window.listener_past.rows);
        let p = model.predict(&window, rng)?;
        push_history(history, &p.frames)?;
        out.extend(p.frames);
    }
    Ok(out)
}

/// Mean over frames of the squared Euclidean distance between `pred` and `gt`.
pub fn l2_loss<T: Real>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "cannot compare {} predicted frames with {} reference frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0f64;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "frame widths differ: {} vs {}",
                p.len(),
                g.len()
            )));
        }
        total += p
            .iter()
            .zip(g)
            .map(|(&a, &b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::features::{frame_ts_us, synth_flame};
    use crate::frames::MelFrame;
    use crate::fusion::assemble_window_at;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            expr_dim: 10,
            mel_dim: 8,
            codebook_size: 16,
            code_dim: 8,
            ..Default::default()
        }
    }

    /// Speaker windows for `steps` steps, each cut off at the last frame of its output chunk.
    fn speaker_windows(
        cfg: &PipelineConfig,
        steps: usize,
        perturb_after_us: Option<u64>,
    ) -> Vec<FusionWindow> {
        let seq = synth_flame(steps as f64 * 8.0 / 30.0 + 1.0, 30, cfg.expr_dim, 5).unwrap();
        let bump = |ts: u64| perturb_after_us.is_some_and(|p| ts > p);
        let mut flame = ModalityQueue::flame(cfg, 30.0);
        let mut mel = ModalityQueue::mel(cfg);
        let history = ModalityQueue::history(cfg);
        let mut windows = Vec::new();
        let (mut next_flame, mut next_mel) = (0usize, 0usize);
        for s in 0..steps {
            let cutoff = frame_ts_us((s + 1) * 8 - 1, 30);
            while next_flame < seq.frames.len()
                && seq.frames[next_flame].capture_ts_us <= cutoff + 500_000
            {
                let mut f = seq.frames[next_flame].clone();
                if bump(f.capture_ts_us) {
                    f.expr.iter_mut().for_each(|v| *v += 1.0);
                }
                flame.ingest_flame(&[f]).unwrap();
                next_flame += 1;
            }
            while frame_ts_us(next_mel, 120) <= cutoff + 500_000 {
                let ts = frame_ts_us(next_mel, 120);
                let v = (next_mel as f32 * 0.1).sin() + if bump(ts) { 1.0 } else { 0.0 };
                mel.ingest_mel(&[MelFrame {
                    coeffs: vec![v; cfg.mel_dim],
                    capture_ts_us: ts,
                }])
                .unwrap();
                next_mel += 1;
            }
            windows.push(assemble_window_at(&flame, &mel, &history, cfg, cutoff).unwrap());
        }
        windows
    }

    #[test]
    fn four_steps_of_eight() {
        let cfg = PipelineConfig::default();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let mut history = ModalityQueue::history(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = generate(
            &model,
            speaker_windows(&cfg, 4, None),
            &mut history,
            4,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 32);
        assert_eq!(history.len(), 32);
        assert!(out.iter().all(|f| f.len() == 106));
    }

    #[test]
    fn zero_steps() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let mut history = ModalityQueue::history(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate(&model, Vec::new(), &mut history, 0, &mut rng)
            .unwrap()
            .is_empty());
        assert!(generate(&model, Vec::new(), &mut history, 1, &mut rng).is_err());
    }

    #[test]
    fn later_inputs_do_not_change_earlier_steps() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let cutoff_2 = frame_ts_us(15, 30);
        let run = |perturb: Option<u64>| {
            let mut history = ModalityQueue::history(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            generate(
                &model,
                speaker_windows(&cfg, 6, perturb),
                &mut history,
                6,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(None);
        let b = run(Some(cutoff_2 + 20_000));
        assert_eq!(a[..16], b[..16]);
        assert_ne!(a[16..], b[16..]);
    }

    #[test]
    fn greedy_takes_argmax() {
        let cfg = small_cfg();
        let mut model = PredictorModel::from_config(&cfg).unwrap();
        model.greedy = true;
        let w = &speaker_windows(&cfg, 3, None)[2];
        let first = predict_step(&model, w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(first.index, argmax(&first.logits));
        for seed in 1..5 {
            let again = predict_step(&model, w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(again.index, first.index);
            assert_eq!(again.frames, first.frames);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = PipelineConfig::default();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let w = &speaker_windows(&cfg, 2, None)[1];
        let a = predict_step(&model, w, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = predict_step(&model, w, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(
            (a.index, &a.frames, &a.logits),
            (b.index, &b.frames, &b.logits)
        );
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert_eq!(a.frames, model.decode(a.index).unwrap());
    }

    #[test]
    fn decoded_frames_stay_in_bounds() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&cfg).unwrap();
        for i in 0..cfg.codebook_size {
            for f in model.decode(i).unwrap() {
                assert!(f[..10].iter().all(|v| v.abs() < EXPR_BOUND));
                assert!(f[10..].iter().all(|v| v.abs() < POSE_BOUND));
            }
        }
    }

    #[test]
    fn non_finite_window_is_numeric_error() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let mut w = speaker_windows(&cfg, 1, None).remove(0);
        let last = w.speaker_flame.data.len() - 1;
        w.speaker_flame.data[last] = f32::NAN;
        let r = predict_step(&model, &w, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
    }

    #[test]
    fn wrong_window_width_is_contract_error() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&PipelineConfig::default()).unwrap();
        let w = speaker_windows(&cfg, 1, None).remove(0);
        assert!(matches!(
            predict_step(&model, &w, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
        assert!(model.check_config(&cfg).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let cfg = small_cfg();
        let model = PredictorModel::from_config(&cfg).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], WEIGHTS_MAGIC);
        let back = PredictorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(PredictorModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(PredictorModel::from_bytes(&extra).is_err());
        let mut huge = bytes;
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(PredictorModel::from_bytes(&huge).is_err());
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let cfg = small_cfg();
        let a = PredictorModel::from_config(&cfg).unwrap().to_bytes();
        let b = PredictorModel::from_config(&cfg).unwrap().to_bytes();
        let c = PredictorModel::from_config(&PipelineConfig {
            seed: cfg.seed + 1,
            ..cfg
        })
        .unwrap()
        .to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn l2_examples() {
        let gt = vec![vec![0.0f64; 106]; 3];
        assert_eq!(l2_loss(&gt, &gt).unwrap(), 0.0);
        let mut p = vec![0.0f64; 106];
        p[0] = 3.0;
        p[1] = 4.0;
        assert_eq!(l2_loss(&[p], &[vec![0.0; 106]]).unwrap(), 25.0);
        assert!(matches!(l2_loss(&gt, &gt[..2]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            logits in proptest::collection::vec(-50.0f32..50.0, 1..300),
            tau in 0.05f64..5.0,
        ) {
            let p = softmax(&logits, tau).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn l2_homogeneous(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..10),
            shift in -2.0f64..2.0,
            c in -4.0f64..4.0,
        ) {
            let gt: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let scale = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect() };
            let base = l2_loss(&rows, &gt).unwrap();
            let scaled = l2_loss(&scale(&rows), &scale(&gt)).unwrap();
            prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }
}
