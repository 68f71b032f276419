//! Vector quantization: nearest-entry lookup and Lloyd k-means training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T: Real> {
    entries: Matrix<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(entries: Matrix<T>) -> Result<Self> {
        if !entries.is_finite() {
            return Err(Error::Numeric("codebook has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, i: usize) -> &[T] {
        self.entries.row(i)
    }

    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            entries: self.entries.map_into(|v| U::lit(v.to_f64_lossy())),
        }
    }

    /// Index of the nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn quantize(&self, x: &[T]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::Contract("quantize against an empty codebook".into()));
        }
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "vector has {} values, codebook entries have {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.nearest(x).0)
    }

    /// (index, squared distance) of the nearest entry. Assumes a non-empty codebook.
    fn nearest(&self, x: &[T]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d = sq_dist(self.entry(i), x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p.to_f64_lossy() - q.to_f64_lossy();
            d * d
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct Training<T: Real> {
    pub codebook: Codebook<T>,
    /// Total squared quantization error after each assignment pass, starting with the initial one.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd k-means. Centroids start at `k` seeded-random data points (distinct values
/// where the data allows); an emptied cluster is re-seeded at the point farthest from
/// its centroid.
pub fn train_codebook<T: Real>(
    data: &[Vec<T>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Training<T>> {
    if k == 0 || data.len() < k {
        return Err(Error::Contract(format!(
            "{} training vectors cannot fill {k} clusters",
            data.len()
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|v| v.len() != dim) {
        return Err(Error::Contract("training vectors differ in length".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("training data has non-finite values".into()));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|&c| data[c] == data[i]) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let rows: Vec<Vec<T>> = chosen.iter().map(|&i| data[i].clone()).collect();
    let mut codebook = Codebook::from_rows(&rows)?;

    let mut assign = vec![0usize; data.len()];
    let mut dist = vec![0.0f64; data.len()];
    let assign_all = |cb: &Codebook<T>, assign: &mut [usize], dist: &mut [f64]| -> bool {
        let mut changed = false;
        for (i, v) in data.iter().enumerate() {
            let (idx, d) = cb.nearest(v);
            changed |= assign[i] != idx;
            assign[i] = idx;
            dist[i] = d;
        }
        changed
    };
    assign_all(&codebook, &mut assign, &mut dist);
    let mut errors = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(v) {
                *s += x.to_f64_lossy();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in codebook.entries.row_mut(c).iter_mut().zip(&sums[c]) {
                    *dst = T::lit(s * inv);
                }
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..data.len())
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("data is non-empty");
            codebook.entries.row_mut(c).copy_from_slice(&data[far]);
            dist[far] = 0.0;
        }
        let changed = assign_all(&codebook, &mut assign, &mut dist);
        errors.push(dist.iter().sum());
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(Training {
        codebook,
        errors,
        iterations,
        converged,
    })
}
