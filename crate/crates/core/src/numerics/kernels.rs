//! Dense matrix-multiply kernels.
//!
//! Every output row is produced by the same inner kernel regardless of how
//! rows are partitioned, so the parallel and sequential paths agree bitwise.

use super::scalar::Scalar;

/// Shape of a (possibly batched) product `out[b] = op(a[b]) * op(b[b])`.
#[derive(Clone, Copy, Debug)]
pub struct GemmShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `a[b]` stored as `[k, m]` instead of `[m, k]`.
    pub trans_a: bool,
    /// `b[b]` stored as `[n, k]` instead of `[k, n]`.
    pub trans_b: bool,
}

impl GemmShape {
    fn strides_a(&self) -> (isize, isize) {
        if self.trans_a {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn strides_b(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    #[cfg(feature = "parallel")]
    fn flops(&self) -> usize {
        self.batch * self.m * self.k * self.n
    }
}

#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;
#[cfg(feature = "parallel")]
const ROW_CHUNK: usize = 32;

/// Multiply into `out`, accumulating when `accumulate` is set.
pub fn gemm<T: Scalar>(shape: GemmShape, a: &[T], b: &[T], out: &mut [T], accumulate: bool) {
    #[cfg(feature = "parallel")]
    {
        if shape.flops() >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
            gemm_parallel(shape, a, b, out, accumulate);
            return;
        }
    }
    gemm_sequential(shape, a, b, out, accumulate);
}

/// Single-threaded reference path.
pub fn gemm_sequential<T: Scalar>(
    shape: GemmShape,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    check_lengths(&shape, a, b, out);
    let (m, k, n) = (shape.m, shape.k, shape.n);
    for bi in 0..shape.batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = &b[bi * k * n..(bi + 1) * k * n];
        let o_b = &mut out[bi * m * n..(bi + 1) * m * n];
        row_block(&shape, a_b, b_b, o_b, 0, m, accumulate);
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_parallel<T: Scalar>(
    shape: GemmShape,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    use rayon::prelude::*;
    check_lengths(&shape, a, b, out);
    let (m, k, n) = (shape.m, shape.k, shape.n);
    if shape.batch > 1 {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, o_b)| {
                let a_b = &a[bi * m * k..(bi + 1) * m * k];
                let b_b = &b[bi * k * n..(bi + 1) * k * n];
                row_block(&shape, a_b, b_b, o_b, 0, m, accumulate);
            });
    } else {
        out.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(ci, o_rows)| {
                let r0 = ci * ROW_CHUNK;
                let r1 = (r0 + ROW_CHUNK).min(m);
                row_block(&shape, a, b, o_rows, r0, r1, accumulate);
            });
    }
}

fn check_lengths<T>(shape: &GemmShape, a: &[T], b: &[T], out: &[T]) {
    assert_eq!(a.len(), shape.batch * shape.m * shape.k, "gemm: lhs length");
    assert_eq!(b.len(), shape.batch * shape.k * shape.n, "gemm: rhs length");
    assert_eq!(out.len(), shape.batch * shape.m * shape.n, "gemm: out length");
}

/// Rows `r0..r1` of one batch item; `out` holds exactly those rows.
fn row_block<T: Scalar>(
    shape: &GemmShape,
    a: &[T],
    b: &[T],
    out: &mut [T],
    r0: usize,
    r1: usize,
    accumulate: bool,
) {
    let rows = r1 - r0;
    if rows == 0 || shape.n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if shape.k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = shape.strides_a();
    let (rsb, csb) = shape.strides_b();
    // SAFETY: bounds asserted in check_lengths; the row offset stays inside `a`.
    unsafe {
        T::gemm(
            rows,
            shape.k,
            shape.n,
            T::one(),
            a.as_ptr().offset(r0 as isize * rsa),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            shape.n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(shape: GemmShape, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (shape.m, shape.k, shape.n);
        let mut out = vec![0.0; shape.batch * m * n];
        for bi in 0..shape.batch {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let av = if shape.trans_a {
                            a[bi * m * k + p * m + i]
                        } else {
                            a[bi * m * k + i * k + p]
                        };
                        let bv = if shape.trans_b {
                            b[bi * k * n + j * k + p]
                        } else {
                            b[bi * k * n + p * n + j]
                        };
                        s += av * bv;
                    }
                    out[bi * m * n + i * n + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_for_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let shape = GemmShape { batch: 3, m: 5, k: 7, n: 4, trans_a: ta, trans_b: tb };
            let a: Vec<f64> = (0..3 * 35).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3 * 28).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; 3 * 20];
            gemm(shape, &a, &b, &mut out, false);
            let want = naive(shape, &a, &b);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_path_is_bitwise_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = GemmShape { batch: 1, m: 200, k: 64, n: 96, trans_a: false, trans_b: true };
        let a: Vec<f32> = (0..200 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..64 * 96).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut seq = vec![0.0f32; 200 * 96];
        let mut par = vec![0.0f32; 200 * 96];
        gemm_sequential(shape, &a, &b, &mut seq, false);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        pool.install(|| gemm_parallel(shape, &a, &b, &mut par, false));
        assert_eq!(seq, par);
    }

    #[test]
    fn accumulate_adds_into_existing() {
        let shape = GemmShape { batch: 1, m: 1, k: 2, n: 1, trans_a: false, trans_b: false };
        let mut out = vec![10.0f64];
        gemm(shape, &[1.0, 2.0], &[3.0, 4.0], &mut out, true);
        assert_eq!(out, vec![21.0]);
    }
}
