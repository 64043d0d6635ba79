//! Row gather/scatter between original and compact layouts, and their adjoints.
//!
//! Forward ops are pure row copies, so they are bit-exact and independent of
//! how the rows are batched. Backward ops are scatter-adds that accumulate in
//! ascending source-row order.

use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Environment variable capping intra-op threads.
pub const THREADS_ENV: &str = "RADIX_COMPACT_THREADS";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("IndexOutOfRange: index {index} at slot {slot} is not below {bound}")]
pub struct IndexOutOfRange {
    pub slot: usize,
    pub index: u32,
    pub bound: usize,
}

/// Thread count from `RADIX_COMPACT_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

fn check_indices(indices: &[u32], bound: usize) -> Result<(), IndexOutOfRange> {
    match indices.iter().position(|&i| i as usize >= bound) {
        Some(slot) => Err(IndexOutOfRange { slot, index: indices[slot], bound }),
        None => Ok(()),
    }
}

fn select_rows<T: Scalar>(src: &DenseMatrix<T>, indices: &[u32], threads: usize) -> DenseMatrix<T> {
    let d = src.cols();
    let mut out = DenseMatrix::zeros(indices.len(), d);
    if d == 0 || indices.is_empty() {
        return out;
    }
    let copy = |chunk: &mut [T], idx: &[u32]| {
        for (dst, &i) in chunk.chunks_exact_mut(d).zip(idx) {
            dst.copy_from_slice(src.row(i as usize));
        }
    };
    let threads = threads.clamp(1, indices.len());
    if threads == 1 {
        copy(out.as_mut_slice(), indices);
    } else {
        let rows_per = indices.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk, idx) in out.as_mut_slice().chunks_mut(rows_per * d).zip(indices.chunks(rows_per)) {
                scope.spawn(move || copy(chunk, idx));
            }
        });
    }
    out
}

fn add_rows<T: Scalar>(grad: &DenseMatrix<T>, indices: &[u32], out_rows: usize, threads: usize) -> DenseMatrix<T> {
    let d = grad.cols();
    let accumulate = |range: std::ops::Range<usize>| {
        let mut acc = DenseMatrix::zeros(out_rows, d);
        for j in range {
            let dst = acc.row_mut(indices[j] as usize);
            for (a, &g) in dst.iter_mut().zip(grad.row(j)) {
                *a += g;
            }
        }
        acc
    };
    let threads = threads.clamp(1, indices.len().max(1));
    if threads == 1 {
        return accumulate(0..indices.len());
    }
    let rows_per = indices.len().div_ceil(threads);
    let partials: Vec<DenseMatrix<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let start = (t * rows_per).min(indices.len());
                let end = ((t + 1) * rows_per).min(indices.len());
                scope.spawn(move || accumulate(start..end))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("accumulator thread panicked")).collect()
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one partial");
    for p in iter {
        total.add_assign(&p).expect("partials share a shape");
    }
    total
}

/// `out[j] = x[gather[j]]`.
pub fn gather_rows<T: Scalar>(x: &DenseMatrix<T>, gather: &[u32]) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    gather_rows_par(x, gather, 1)
}

pub fn gather_rows_par<T: Scalar>(
    x: &DenseMatrix<T>,
    gather: &[u32],
    threads: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    check_indices(gather, x.rows())?;
    Ok(select_rows(x, gather, threads))
}

/// `out[i] = y[scatter[i]]`.
pub fn scatter_rows<T: Scalar>(y: &DenseMatrix<T>, scatter: &[u32]) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    scatter_rows_par(y, scatter, 1)
}

pub fn scatter_rows_par<T: Scalar>(
    y: &DenseMatrix<T>,
    scatter: &[u32],
    threads: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    check_indices(scatter, y.rows())?;
    Ok(select_rows(y, scatter, threads))
}

/// Adjoint of [`gather_rows`]: `out[gather[j]] += grad_out[j]` into `n` zero rows.
pub fn gather_rows_backward<T: Scalar>(
    grad_out: &DenseMatrix<T>,
    gather: &[u32],
    n: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    gather_rows_backward_par(grad_out, gather, n, 1)
}

/// Row-parallel [`gather_rows_backward`]. Each thread accumulates a contiguous
/// block of `grad_out` rows; partial sums are then added in thread order.
pub fn gather_rows_backward_par<T: Scalar>(
    grad_out: &DenseMatrix<T>,
    gather: &[u32],
    n: usize,
    threads: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    check_indices(gather, n)?;
    expect_rows(grad_out, gather.len())?;
    Ok(add_rows(grad_out, gather, n, threads))
}

/// Adjoint of [`scatter_rows`]: `out[k] = sum of grad_out[i] over i with scatter[i] = k`.
pub fn scatter_rows_backward<T: Scalar>(
    grad_out: &DenseMatrix<T>,
    scatter: &[u32],
    n_compact: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    scatter_rows_backward_par(grad_out, scatter, n_compact, 1)
}

pub fn scatter_rows_backward_par<T: Scalar>(
    grad_out: &DenseMatrix<T>,
    scatter: &[u32],
    n_compact: usize,
    threads: usize,
) -> Result<DenseMatrix<T>, IndexOutOfRange> {
    check_indices(scatter, n_compact)?;
    expect_rows(grad_out, scatter.len())?;
    Ok(add_rows(grad_out, scatter, n_compact, threads))
}

fn expect_rows<T: Scalar>(m: &DenseMatrix<T>, rows: usize) -> Result<(), IndexOutOfRange> {
    // a short gradient would be indexed past its end
    if m.rows() < rows {
        return Err(IndexOutOfRange { slot: m.rows(), index: m.rows() as u32, bound: rows });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gather_examples() {
        let x = col(&[1.0, 2.0, 3.0, 1.0, 2.0, 4.0]);
        assert_eq!(gather_rows(&x, &[0, 1, 2, 5]).unwrap(), col(&[1.0, 2.0, 3.0, 4.0]));
        let id: Vec<u32> = (0..6).collect();
        assert_eq!(gather_rows(&x, &id).unwrap(), x);
        let one = DenseMatrix::from_rows(&[vec![1.5, -2.0]]);
        let rep = gather_rows(&one, &[0, 0, 0]).unwrap();
        assert_eq!(rep, DenseMatrix::from_rows(&[vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]]));
        assert_eq!(
            gather_rows(&x, &[0, 6]).unwrap_err(),
            IndexOutOfRange { slot: 1, index: 6, bound: 6 }
        );
    }

    #[test]
    fn scatter_examples() {
        let y = col(&[10.0, 20.0, 30.0, 40.0]);
        let out = scatter_rows(&y, &[0, 1, 2, 0, 1, 3]).unwrap();
        assert_eq!(out, col(&[10.0, 20.0, 30.0, 10.0, 20.0, 40.0]));
        assert_eq!(scatter_rows(&y, &[0, 1, 2, 3]).unwrap(), y);
        assert!(scatter_rows(&y, &[4]).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = col(&[1.0, 1.0, 1.0]);
        assert_eq!(gather_rows_backward(&g, &[0, 0, 2], 3).unwrap(), col(&[2.0, 0.0, 1.0]));
        let ones = col(&[1.0; 6]);
        assert_eq!(scatter_rows_backward(&ones, &[0, 1, 2, 0, 1, 3], 4).unwrap(), col(&[2.0, 2.0, 1.0, 1.0]));
        let id: Vec<u32> = (0..3).collect();
        let h = col(&[0.25, -3.0, 7.0]);
        assert_eq!(gather_rows_backward(&h, &id, 3).unwrap(), h);
        assert_eq!(scatter_rows_backward(&h, &id, 3).unwrap(), h);
        assert!(scatter_rows_backward(&ones, &[0, 1, 2, 0, 1, 4], 4).is_err());
    }

    #[test]
    fn round_trip_through_plan() {
        let batch = crate::RaggedBatch::from_sequences(&[vec![1, 2, 3], vec![1, 2, 4], vec![1, 5]]);
        let plan = crate::build_plan(&batch).unwrap();
        // duplicate originals carry equal rows: derive rows from the compact layout
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let compact = random_matrix(&mut rng, plan.n_compact(), 4);
        let x = scatter_rows(&compact, plan.scatter_indices()).unwrap();
        let g = gather_rows(&x, plan.gather_indices()).unwrap();
        assert_eq!(scatter_rows(&g, plan.scatter_indices()).unwrap(), x);
    }

    /// Central differences of f(x) = sum(op(x)^2), compared with 2 * backward(op(x)).
    fn finite_difference_check(
        forward: impl Fn(&DenseMatrix<f64>) -> DenseMatrix<f64>,
        backward: impl Fn(&DenseMatrix<f64>) -> DenseMatrix<f64>,
        x: &DenseMatrix<f64>,
    ) {
        let f = |m: &DenseMatrix<f64>| forward(m).as_slice().iter().map(|v| v * v).sum::<f64>();
        let y = forward(x);
        let analytic = backward(&y.map(|v| 2.0 * v));
        let h = 1e-5;
        for k in 0..x.as_slice().len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[k] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            assert!((a - numeric).abs() / scale <= 1e-6, "entry {k}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 6, 3);
        let gather = [0u32, 0, 2, 5, 5, 5, 1];
        finite_difference_check(
            |m| gather_rows(m, &gather).unwrap(),
            |g| gather_rows_backward(g, &gather, 6).unwrap(),
            &x,
        );
        let y = random_matrix(&mut rng, 4, 3);
        let scatter = [0u32, 1, 2, 0, 1, 3, 3];
        finite_difference_check(
            |m| scatter_rows(m, &scatter).unwrap(),
            |g| scatter_rows_backward(g, &scatter, 4).unwrap(),
            &y,
        );
    }

    fn indices_strategy() -> impl Strategy<Value = (usize, Vec<u32>)> {
        (1usize..12).prop_flat_map(|n| (Just(n), prop::collection::vec(0..n as u32, 0..20)))
    }

    proptest! {
        #[test]
        fn adjointness((n, idx) in indices_strategy(), d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, n, d);
            let y = random_matrix(&mut rng, idx.len(), d);
            let lhs = gather_rows(&x, &idx).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&gather_rows_backward(&y, &idx, n).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            // scatter has the same shape contract with roles of N and N' swapped
            let lhs = scatter_rows(&x, &idx).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&scatter_rows_backward(&y, &idx, n).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn backward_is_linear((n, idx) in indices_strategy(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g1 = random_matrix(&mut rng, idx.len(), 2);
            let g2 = random_matrix(&mut rng, idx.len(), 2);
            let combo = DenseMatrix::from_fn(idx.len(), 2, |r, c| a * g1.get(r, c) + b * g2.get(r, c));
            let lhs = gather_rows_backward(&combo, &idx, n).unwrap();
            let r1 = gather_rows_backward(&g1, &idx, n).unwrap();
            let r2 = gather_rows_backward(&g2, &idx, n).unwrap();
            for k in 0..lhs.as_slice().len() {
                let expect = a * r1.as_slice()[k] + b * r2.as_slice()[k];
                prop_assert!((lhs.as_slice()[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn gather_is_batch_invariant((n, idx) in indices_strategy(), split in 0usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, n, 3);
            let whole = gather_rows(&x, &idx).unwrap();
            // split the source rows; each output row comes from whichever part holds its index
            let cut = split.min(n);
            let (lo, hi) = (x.slice_rows(0, cut), x.slice_rows(cut, n));
            let parts: Vec<DenseMatrix<f64>> = idx
                .iter()
                .map(|&i| {
                    let i = i as usize;
                    if i < cut { gather_rows(&lo, &[i as u32]).unwrap() } else { gather_rows(&hi, &[(i - cut) as u32]).unwrap() }
                })
                .collect();
            let stacked = if parts.is_empty() { DenseMatrix::zeros(0, 3) } else { DenseMatrix::vstack(&parts).unwrap() };
            prop_assert_eq!(stacked.as_slice(), whole.as_slice());
            // and splitting the index list
            let k = split.min(idx.len());
            let halves = [gather_rows(&x, &idx[..k]).unwrap(), gather_rows(&x, &idx[k..]).unwrap()];
            prop_assert_eq!(DenseMatrix::vstack(&halves).unwrap(), whole);
        }

        #[test]
        fn parallel_matches_serial((n, idx) in indices_strategy(), threads in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, n, 3);
            prop_assert_eq!(gather_rows_par(&x, &idx, threads).unwrap(), gather_rows(&x, &idx).unwrap());
            let g = random_matrix(&mut rng, idx.len(), 3);
            let serial = gather_rows_backward(&g, &idx, n).unwrap();
            let par = gather_rows_backward_par(&g, &idx, n, threads).unwrap();
            let again = gather_rows_backward_par(&g, &idx, n, threads).unwrap();
            prop_assert_eq!(&par, &again);
            for (a, b) in par.as_slice().iter().zip(serial.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
