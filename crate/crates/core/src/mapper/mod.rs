//! FLAME -> ARKit retargeting: expressions through the GL matrix, jaw and head
//! axis-angles through quaternions to x-y-z Euler angles.

mod gl;
mod rotation;

pub use gl::{
    build_gl, flame_to_arkit, flame_to_arkit_unclamped, ExpressionMapping, GlMatrix, GlMode, Sign,
    EXTREME, GL_MAGIC,
};
pub use rotation::{
    axis_angle_to_quaternion, axis_angle_to_xyz_euler, quaternion_to_xyz_euler,
    xyz_euler_to_matrix, Quaternion,
};

use crate::error::{Error, Result};
use crate::frames::{ArkitFrame, ARKIT_COUNT};
use crate::linalg::Matrix;

/// Mapping table shipped with the crate; covers expression components 0..100.
pub const EXAMPLE_MAPPING: &str = include_str!("../../assets/example_mapping.txt");

/// Output timestamp of frame `seq` at `f_fps`.
pub fn frame_t_ms(seq: u64, f_fps: u32) -> u64 {
    (seq as f64 * 1000.0 / f_fps as f64).round() as u64
}

/// Converts predicted motion vectors (`expr ++ jaw_aa ++ head_aa`) into ARKit frames
/// numbered from `first_seq` and spaced at `f_fps`.
pub fn convert_frames(
    motion: &[Vec<f32>],
    gl: &GlMatrix<f32>,
    first_seq: u64,
    f_fps: u32,
) -> Result<Vec<ArkitFrame>> {
    if motion.is_empty() {
        return Err(Error::Contract("empty motion batch".into()));
    }
    let expr_dim = gl.expr_dim();
    if let Some(bad) = motion.iter().find(|m| m.len() != expr_dim + 6) {
        return Err(Error::Contract(format!(
            "motion vector has {} values, expected {}",
            bad.len(),
            expr_dim + 6
        )));
    }
    let mut expr = Matrix::zeros(motion.len(), expr_dim);
    for (r, m) in motion.iter().enumerate() {
        expr.row_mut(r).copy_from_slice(&m[..expr_dim]);
    }
    let weights = flame_to_arkit(&expr, gl)?;
    motion
        .iter()
        .enumerate()
        .map(|(r, m)| {
            let pose = |o: usize| [m[o] as f64, m[o + 1] as f64, m[o + 2] as f64];
            let seq = first_seq + r as u64;
            let mut w = [0.0f32; ARKIT_COUNT];
            w.copy_from_slice(weights.row(r));
            Ok(ArkitFrame {
                weights: w,
                jaw_euler: axis_angle_to_xyz_euler(pose(expr_dim))?,
                head_euler: axis_angle_to_xyz_euler(pose(expr_dim + 3))?,
                seq,
                t_ms: frame_t_ms(seq, f_fps),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gl(expr_dim: usize) -> GlMatrix<f32> {
        let map =
            ExpressionMapping::parse("0 + jawOpen=0.9\n0 - mouthClose=0.6\n1 + mouthSmileLeft=1.0")
                .unwrap();
        build_gl(&map, expr_dim, GlMode::Difference).unwrap()
    }

    #[test]
    fn example_table_parses() {
        let map = ExpressionMapping::parse(EXAMPLE_MAPPING).unwrap();
        assert_eq!(map.span(), 100);
        let gl = build_gl::<f32>(&map, map.span(), GlMode::Difference).unwrap();
        assert_eq!(gl.expr_dim(), 100);
    }

    #[test]
    fn zero_batch() {
        let frames = convert_frames(&vec![vec![0.0; 106]; 3], &gl(100), 0, 30).unwrap();
        for f in &frames {
            assert!(f.weights.iter().all(|&w| w == 0.0));
            assert_eq!(f.jaw_euler, [0.0; 3]);
            assert_eq!(f.head_euler, [0.0; 3]);
        }
    }

    #[test]
    fn thirty_two_frames_spaced_at_f_fps() {
        let motion: Vec<Vec<f32>> = (0..32)
            .map(|i| {
                (0..106)
                    .map(|k| ((i * 7 + k) % 11) as f32 * 0.3 - 1.5)
                    .collect()
            })
            .collect();
        let frames = convert_frames(&motion, &gl(100), 0, 30).unwrap();
        assert_eq!(frames.len(), 32);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.seq, i as u64);
            assert_eq!(f.t_ms, (i as f64 * 1000.0 / 30.0).round() as u64);
            assert!(f.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }
        assert!(frames
            .windows(2)
            .all(|w| (w[1].t_ms - w[0].t_ms).abs_diff(33) <= 1));
    }

    #[test]
    fn empty_and_misshaped_batches_rejected() {
        assert!(convert_frames(&[], &gl(4), 0, 30).is_err());
        assert!(convert_frames(&[vec![0.0; 9]], &gl(4), 0, 30).is_err());
    }
}
