//! Global-to-local (FLAME expression -> ARKit) retargeting matrix.
//!
//! Mapping table lines: `index sign name=weight ...` where `sign` is `+` or `-` and each
//! pair gives the ARKit activation annotated at FLAME value `sign * 3`. `#` starts a
//! comment. `gl.bin`: magic `GLM1`, `u32 rows`, `u32 52`, `u8 mode` (0 difference,
//! 1 positive-only), then `f32` values row-major.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frames::{arkit_index, ARKIT_COUNT};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::wire::{PutLe, Reader};

pub const GL_MAGIC: &[u8; 4] = b"GLM1";
/// FLAME value at which extremes are annotated.
pub const EXTREME: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpressionMapping {
    /// `(expression index, sign)` -> sparse `(arkit index, weight)` activations.
    pub rows: BTreeMap<(usize, Sign), Vec<(usize, f64)>>,
}

impl ExpressionMapping {
    /// Adds the annotation for one extreme. Names must be canonical ARKit names.
    pub fn insert(&mut self, index: usize, sign: Sign, activations: &[(&str, f64)]) -> Result<()> {
        if self.rows.contains_key(&(index, sign)) {
            return Err(Error::Validation(format!(
                "duplicate mapping for {index} {sign:?}"
            )));
        }
        let mut row = Vec::with_capacity(activations.len());
        for &(name, weight) in activations {
            let col = arkit_index(name)
                .ok_or_else(|| Error::Validation(format!("unknown blendshape name {name:?}")))?;
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::Validation(format!(
                    "weight {weight} for {name} outside [0,1]"
                )));
            }
            row.push((col, weight));
        }
        self.rows.insert((index, sign), row);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |why: String| Error::Validation(format!("mapping line {}: {why}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let index: usize = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("expected expression index".into()))?;
            let sign = match tokens.next() {
                Some("+") => Sign::Plus,
                Some("-") => Sign::Minus,
                other => return Err(bad(format!("expected + or -, got {other:?}"))),
            };
            let mut pairs = Vec::new();
            for tok in tokens {
                let (name, w) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected name=weight, got {tok:?}")))?;
                let w: f64 = w
                    .parse()
                    .map_err(|_| bad(format!("bad weight in {tok:?}")))?;
                pairs.push((name, w));
            }
            map.insert(index, sign, &pairs).map_err(|e| match e {
                Error::Validation(m) => bad(m),
                other => other,
            })?;
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One past the largest expression index mentioned.
    pub fn span(&self) -> usize {
        self.rows.keys().map(|(i, _)| i + 1).max().unwrap_or(0)
    }

    fn dense(&self, index: usize, sign: Sign) -> [f64; ARKIT_COUNT] {
        let mut out = [0.0; ARKIT_COUNT];
        if let Some(row) = self.rows.get(&(index, sign)) {
            for &(c, w) in row {
                out[c] = w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlMode {
    /// `(π(+) − π(−)) / 6`.
    #[default]
    Difference,
    /// `π(+) / 3`.
    PositiveOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlMatrix<T> {
    pub values: Matrix<T>,
    pub mode: GlMode,
}

impl<T: Real> GlMatrix<T> {
    pub fn expr_dim(&self) -> usize {
        self.values.rows()
    }

    pub fn cast<U: Real>(&self) -> GlMatrix<U> {
        let data = self
            .values
            .as_slice()
            .iter()
            .map(|v| U::lit(v.to_f64_lossy()))
            .collect();
        GlMatrix {
            values: Matrix::from_vec(self.values.rows(), self.values.cols(), data)
                .expect("same shape"),
            mode: self.mode,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.values.as_slice().len());
        out.extend_from_slice(GL_MAGIC);
        out.put_u32(self.values.rows() as u32);
        out.put_u32(ARKIT_COUNT as u32);
        out.put_u8(match self.mode {
            GlMode::Difference => 0,
            GlMode::PositiveOnly => 1,
        });
        for &v in self.values.as_slice() {
            out.put_f32(v.to_f64_lossy() as f32);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "gl matrix");
        if r.take(4)? != GL_MAGIC {
            return Err(Error::Format("gl matrix: bad magic".into()));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if cols != ARKIT_COUNT {
            return Err(Error::Format(format!(
                "gl matrix: {cols} columns, expected {ARKIT_COUNT}"
            )));
        }
        let mode = match r.u8()? {
            0 => GlMode::Difference,
            1 => GlMode::PositiveOnly,
            m => return Err(Error::Format(format!("gl matrix: mode byte {m}"))),
        };
        let raw = r.f32_vec(rows * cols)?;
        r.expect_end()?;
        let values = Matrix::from_vec(
            rows,
            cols,
            raw.into_iter().map(|v| T::lit(v as f64)).collect(),
        )?;
        if !values.is_finite() {
            return Err(Error::Format("gl matrix: non-finite value".into()));
        }
        Ok(Self { values, mode })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Builds the `expr_dim x 52` matrix; expressions absent from the mapping get zero rows.
pub fn build_gl<T: Real>(
    map: &ExpressionMapping,
    expr_dim: usize,
    mode: GlMode,
) -> Result<GlMatrix<T>> {
    if map.span() > expr_dim {
        return Err(Error::Validation(format!(
            "mapping mentions expression {} but expr_dim is {expr_dim}",
            map.span() - 1
        )));
    }
    let mut values = Matrix::zeros(expr_dim, ARKIT_COUNT);
    for i in 0..expr_dim {
        let plus = map.dense(i, Sign::Plus);
        let minus = map.dense(i, Sign::Minus);
        let row = values.row_mut(i);
        for c in 0..ARKIT_COUNT {
            let v = match mode {
                GlMode::Difference => (plus[c] - minus[c]) / (2.0 * EXTREME),
                GlMode::PositiveOnly => plus[c] / EXTREME,
            };
            row[c] = T::lit(v);
        }
    }
    Ok(GlMatrix { values, mode })
}

/// `F x GL` without the clamp.
pub fn flame_to_arkit_unclamped<T: Real>(flame: &Matrix<T>, gl: &GlMatrix<T>) -> Result<Matrix<T>> {
    if flame.cols() != gl.values.rows() {
        return Err(Error::Contract(format!(
            "FLAME batch has {} expression columns, GL expects {}",
            flame.cols(),
            gl.values.rows()
        )));
    }
    flame.matmul(&gl.values)
}

/// `clamp(F x GL, 0, 1)` element-wise.
pub fn flame_to_arkit<T: Real>(flame: &Matrix<T>, gl: &GlMatrix<T>) -> Result<Matrix<T>> {
    Ok(flame_to_arkit_unclamped(flame, gl)?.map(|v| v.max(T::zero()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jaw_open() -> usize {
        arkit_index("jawOpen").unwrap()
    }

    #[test]
    fn empty_mapping_gives_zero_matrix() {
        let gl: GlMatrix<f64> =
            build_gl(&ExpressionMapping::default(), 100, GlMode::Difference).unwrap();
        assert_eq!((gl.values.rows(), gl.values.cols()), (100, 52));
        assert!(gl.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_only_divides_by_three() {
        let map = ExpressionMapping::parse("0 + jawOpen=0.9").unwrap();
        let gl: GlMatrix<f64> = build_gl(&map, 4, GlMode::PositiveOnly).unwrap();
        let row = gl.values.row(0);
        for (c, &v) in row.iter().enumerate() {
            if c == jaw_open() {
                assert!((v - 0.3).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn difference_mode_central_rule() {
        let map = ExpressionMapping::parse("0 + jawOpen=0.9\n0 - mouthClose=0.6 # lips\n").unwrap();
        let gl: GlMatrix<f64> = build_gl(&map, 2, GlMode::Difference).unwrap();
        assert!((gl.values.get(0, jaw_open()) - 0.15).abs() < 1e-15);
        assert!((gl.values.get(0, arkit_index("mouthClose").unwrap()) + 0.10).abs() < 1e-15);
    }

    #[test]
    fn unknown_name_is_named() {
        let err = ExpressionMapping::parse("3 + jawOpened=0.5").unwrap_err();
        assert!(err.to_string().contains("jawOpened"), "{err}");
    }

    #[test]
    fn duplicate_and_range_checks() {
        assert!(ExpressionMapping::parse("0 + jawOpen=0.2\n0 + jawLeft=0.1").is_err());
        assert!(ExpressionMapping::parse("0 + jawOpen=1.2").is_err());
        assert!(ExpressionMapping::parse("0 * jawOpen=0.2").is_err());
        let map = ExpressionMapping::parse("7 + jawOpen=0.2").unwrap();
        assert!(build_gl::<f32>(&map, 5, GlMode::Difference).is_err());
    }

    #[test]
    fn one_by_one_product_and_clamp() {
        let map = ExpressionMapping::parse("0 + jawOpen=0.9").unwrap();
        let gl: GlMatrix<f64> = build_gl(&map, 1, GlMode::PositiveOnly).unwrap();
        let out = flame_to_arkit(&Matrix::from_vec(1, 1, vec![3.0]).unwrap(), &gl).unwrap();
        assert!((out.get(0, jaw_open()) - 0.9).abs() < 1e-12);
        let out = flame_to_arkit(&Matrix::from_vec(1, 1, vec![-3.0]).unwrap(), &gl).unwrap();
        assert_eq!(out.get(0, jaw_open()), 0.0);
    }

    #[test]
    fn zero_batch_zero_output_and_shape_check() {
        let map = ExpressionMapping::parse("1 + browInnerUp=1.0").unwrap();
        let gl: GlMatrix<f32> = build_gl(&map, 3, GlMode::Difference).unwrap();
        let out = flame_to_arkit(&Matrix::zeros(5, 3), &gl).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert!(flame_to_arkit(&Matrix::zeros(5, 4), &gl).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let map = ExpressionMapping::parse("0 + jawOpen=0.9 mouthFunnel=0.2\n2 - browDownLeft=0.7")
            .unwrap();
        let gl: GlMatrix<f32> = build_gl(&map, 10, GlMode::Difference).unwrap();
        let back = GlMatrix::<f32>::from_bytes(&gl.to_bytes()).unwrap();
        assert_eq!(back, gl);
        let bytes = gl.to_bytes();
        assert_eq!(&bytes[..4], b"GLM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 10);
        assert!(GlMatrix::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn linear_before_clamp(
            f1 in proptest::collection::vec(-3.0f64..3.0, 12),
            f2 in proptest::collection::vec(-3.0f64..3.0, 12),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
            weights in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let mut map = ExpressionMapping::default();
            map.insert(0, Sign::Plus, &[("jawOpen", weights[0]), ("mouthSmileLeft", weights[1])]).unwrap();
            map.insert(1, Sign::Minus, &[("browInnerUp", weights[2])]).unwrap();
            map.insert(3, Sign::Plus, &[("cheekPuff", weights[3])]).unwrap();
            let gl: GlMatrix<f64> = build_gl(&map, 4, GlMode::Difference).unwrap();
            let a = Matrix::from_vec(3, 4, f1).unwrap();
            let b = Matrix::from_vec(3, 4, f2).unwrap();
            let combo = Matrix::from_vec(
                3, 4,
                a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| alpha * x + beta * y).collect(),
            ).unwrap();
            let ta = flame_to_arkit_unclamped(&a, &gl).unwrap();
            let tb = flame_to_arkit_unclamped(&b, &gl).unwrap();
            let tc = flame_to_arkit_unclamped(&combo, &gl).unwrap();
            for ((c, x), y) in tc.as_slice().iter().zip(ta.as_slice()).zip(tb.as_slice()) {
                prop_assert!((c - (alpha * x + beta * y)).abs() < 1e-12);
            }
            let clamped = flame_to_arkit(&combo, &gl).unwrap();
            prop_assert!(clamped.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
