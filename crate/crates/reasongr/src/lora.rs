//! Low-rank adapters over frozen quantized matrices.
//!
//! An adapter holds trainable factors A (d×r, orthonormal columns at init)
//! and B (k×r, zero at init), contributing `(α/r)·A·Bᵀ` on top of the frozen
//! base. The product path never materializes A·Bᵀ.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedMatrix;

pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Name of the base matrix this adapter attaches to.
    pub target: String,
    /// d×r factor; columns start orthonormal.
    pub a: Array2<f64>,
    /// k×r factor; starts at zero so the initial delta vanishes.
    pub b: Array2<f64>,
    pub rank: usize,
    /// Scale numerator; the effective delta is (alpha/rank)·A·Bᵀ.
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Materialized (α/r)·A·Bᵀ; for inspection and tests, not the hot path.
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b.t()) * self.scale()
    }
}

/// Initializes an adapter for a d×k base matrix: A gets orthonormal columns
/// from Gram-Schmidt over Gaussian draws, B is zero, and alpha = r so the
/// scale α/r starts at 1.
pub fn init_lora<R: Rng>(target: &str, d: usize, k: usize, r: usize, rng: &mut R) -> Result<LoraAdapter> {
    if r == 0 || r > d.min(k) {
        return Err(Error::Dims(format!(
            "rank {r} outside 1..=min({d},{k}) for `{target}`"
        )));
    }
    let a = orthonormal_columns(d, r, rng);
    Ok(LoraAdapter {
        target: target.to_string(),
        a,
        b: Array2::zeros((k, r)),
        rank: r,
        alpha: r as f64,
    })
}

/// Gram-Schmidt over Gaussian draws; redraws a column if it degenerates.
fn orthonormal_columns<R: Rng>(d: usize, r: usize, rng: &mut R) -> Array2<f64> {
    let mut a = Array2::zeros((d, r));
    let mut col = 0;
    while col < r {
        let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
        for prev in 0..col {
            let prev_col = a.column(prev);
            let proj = v.dot(&prev_col);
            v = &v - &(&prev_col.to_owned() * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw, try again
        }
        a.column_mut(col).assign(&(&v / norm));
        col += 1;
    }
    a
}

/// `dequantize(q)·x + (α/r)·A·(Bᵀ·x)` without forming A·Bᵀ.
pub fn apply_adapted(q: &QuantizedMatrix, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    let (d, k) = (q.rows, q.cols);
    if x.len() != k {
        return Err(Error::Dims(format!(
            "input length {} does not match base cols {k}",
            x.len()
        )));
    }
    if adapter.a.nrows() != d || adapter.b.nrows() != k || adapter.a.ncols() != adapter.rank
        || adapter.b.ncols() != adapter.rank
    {
        return Err(Error::Dims(format!(
            "adapter `{}` shapes do not match a {d}x{k} base",
            adapter.target
        )));
    }

    // base path: deq(Q)·x, reading codes directly
    let mut y = vec![0.0f64; d];
    for (row, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (col, &xv) in x.iter().enumerate() {
            acc += q.value(row * k + col) * xv;
        }
        *out = acc;
    }

    // low-rank path: (α/r)·A·(Bᵀ·x)
    let scale = adapter.scale();
    let mut bx = vec![0.0f64; adapter.rank];
    for (j, slot) in bx.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &xv) in x.iter().enumerate() {
            acc += adapter.b[[i, j]] * xv;
        }
        *slot = acc;
    }
    for (row, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &bj) in bx.iter().enumerate() {
            acc += adapter.a[[row, j]] * bj;
        }
        *out += scale * acc;
    }
    Ok(y)
}

/// Least-squares fit of rank-r factors to a target delta by alternating
/// normal-equation solves. At r = min(d,k) the reconstruction is exact.
pub fn fit_lora<R: Rng>(delta: &Array2<f64>, r: usize, rng: &mut R) -> Result<(Array2<f64>, Array2<f64>)> {
    let (d, k) = (delta.nrows(), delta.ncols());
    if r == 0 || r > d.min(k) {
        return Err(Error::Dims(format!("rank {r} outside 1..=min({d},{k})")));
    }
    let mut b: Array2<f64> = Array2::from_shape_fn((k, r), |_| rng.sample(StandardNormal));
    let mut a = Array2::zeros((d, r));
    for _ in 0..10 {
        // A = Δ B (BᵀB)⁻¹
        let m = b.t().dot(&b);
        let rhs = delta.dot(&b); // d×r
        a = solve_spd(&m, &rhs.t().to_owned())?.t().to_owned();
        // B = Δᵀ A (AᵀA)⁻¹
        let m = a.t().dot(&a);
        let rhs = delta.t().dot(&a); // k×r
        b = solve_spd(&m, &rhs.t().to_owned())?.t().to_owned();
    }
    Ok((a, b))
}

/// Solves M·X = RHS for square M by Gaussian elimination with partial
/// pivoting. M is small (r×r) here.
fn solve_spd(m: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    if m.ncols() != n || rhs.nrows() != n {
        return Err(Error::Dims("solve: shape mismatch".into()));
    }
    let cols = rhs.ncols();
    let mut aug = Array2::zeros((n, n + cols));
    aug.slice_mut(ndarray::s![.., ..n]).assign(m);
    aug.slice_mut(ndarray::s![.., n..]).assign(rhs);

    for pivot in 0..n {
        let mut best = pivot;
        for row in pivot + 1..n {
            if aug[[row, pivot]].abs() > aug[[best, pivot]].abs() {
                best = row;
            }
        }
        if aug[[best, pivot]].abs() < 1e-300 {
            return Err(Error::Numeric("solve: singular system".into()));
        }
        if best != pivot {
            for c in 0..n + cols {
                aug.swap([pivot, c], [best, c]);
            }
        }
        let diag = aug[[pivot, pivot]];
        for row in 0..n {
            if row == pivot {
                continue;
            }
            let factor = aug[[row, pivot]] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in pivot..n + cols {
                aug[[row, c]] -= factor * aug[[pivot, c]];
            }
        }
    }
    let mut x = Array2::zeros((n, cols));
    for row in 0..n {
        let diag = aug[[row, row]];
        for c in 0..cols {
            x[[row, c]] = aug[[row, n + c]] / diag;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_4bit};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_delta_is_zero_and_a_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (d, k, r) in [(8, 6, 2), (4, 4, 4), (16, 3, 3)] {
            let ad = init_lora("w", d, k, r, &mut rng).unwrap();
            assert_eq!(ad.delta(), Array2::<f64>::zeros((d, k)));
            let gram = ad.a.t().dot(&ad.a);
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - want).abs() < 1e-10, "gram[{i},{j}]");
                }
            }
        }
    }

    #[test]
    fn init_rejects_oversized_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(init_lora("w", 4, 2, 3, &mut rng).is_err());
        assert!(init_lora("w", 4, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn square_full_rank_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ad = init_lora("w", 5, 5, 5, &mut rng).unwrap();
        let gram = ad.a.t().dot(&ad.a);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hand_worked_two_by_two() {
        // Q = exact identity, A = [1,2]^T, B = [3,4]^T, x = [1,0]^T
        let q = quantize_4bit(&arr2(&[[1.0, 0.0], [0.0, 1.0]]), 4).unwrap();
        assert_eq!(dequantize(&q), arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let adapter = LoraAdapter {
            target: "w".into(),
            a: arr2(&[[1.0], [2.0]]),
            b: arr2(&[[3.0], [4.0]]),
            rank: 1,
            alpha: 1.0,
        };
        let y = apply_adapted(&q, &adapter, &[1.0, 0.0]).unwrap();
        assert_eq!(y, vec![4.0, 6.0]);
    }

    #[test]
    fn zero_b_matches_base_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let q = quantize_4bit(&w, 8).unwrap();
        let adapter = init_lora("w", 6, 5, 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.7).collect();
        let adapted = apply_adapted(&q, &adapter, &x).unwrap();
        let base = dequantize(&q).dot(&Array1::from(x));
        assert_eq!(adapted, base.to_vec());
    }

    #[test]
    fn matches_explicit_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let d = rng.gen_range(2..10);
            let k = rng.gen_range(2..10);
            let r = rng.gen_range(1..=d.min(k));
            let w = Array2::from_shape_fn((d, k), |_| rng.gen_range(-1.0..1.0));
            let q = quantize_4bit(&w, 16).unwrap();
            let mut adapter = init_lora("w", d, k, r, &mut rng).unwrap();
            adapter.b = Array2::from_shape_fn((k, r), |_| rng.sample(StandardNormal));
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let fast = apply_adapted(&q, &adapter, &x).unwrap();
            let explicit = (dequantize(&q) + adapter.delta()).dot(&Array1::from(x.clone()));
            for (f, e) in fast.iter().zip(explicit.iter()) {
                assert!((f - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = quantize_4bit(&Array2::zeros((3, 4)), 4).unwrap();
        let adapter = init_lora("w", 3, 4, 2, &mut rng).unwrap();
        assert!(apply_adapted(&q, &adapter, &[0.0; 3]).is_err());
        let wrong = init_lora("w", 4, 4, 2, &mut rng).unwrap();
        assert!(apply_adapted(&q, &wrong, &[0.0; 4]).is_err());
    }

    #[test]
    fn full_rank_fit_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (d, k) in [(6, 4), (4, 6), (5, 5)] {
            let delta = Array2::from_shape_fn((d, k), |_| rng.sample::<f64, _>(StandardNormal));
            let (a, b) = fit_lora(&delta, d.min(k), &mut rng).unwrap();
            let recon = a.dot(&b.t());
            let err = (&recon - &delta).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err < 1e-8, "({d},{k}): residual {err}");
        }
    }

    #[test]
    fn low_rank_fit_reduces_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (a, b) = fit_lora(&delta, 4, &mut rng).unwrap();
        let err = (&a.dot(&b.t()) - &delta).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err < norm, "rank-4 fit should beat the zero fit");
    }
}
