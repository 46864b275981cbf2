//! Dense products for the narrow, tall matrices of the network.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::gnn::Real;

/// `c += a · b`. Products with a unit dimension bypass the blocked kernel,
/// whose operand packing dominates for them.
pub(crate) fn gemm_acc<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>, c: &mut ArrayViewMut2<F>) {
    let (m, k) = a.dim();
    let n = b.ncols();
    debug_assert_eq!(b.nrows(), k);
    debug_assert_eq!(c.dim(), (m, n));
    if n == 1 {
        let bc = b.column(0);
        for (row, out) in a.outer_iter().zip(c.column_mut(0).iter_mut()) {
            let mut acc = F::zero();
            for (&x, &y) in row.iter().zip(bc.iter()) {
                acc += x * y;
            }
            *out += acc;
        }
    } else if k == 1 {
        let br = b.row(0);
        for (&s, mut out) in a.column(0).iter().zip(c.outer_iter_mut()) {
            out.scaled_add(s, &br);
        }
    } else {
        general_mat_mul(F::one(), a, b, F::one(), c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn naive(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let n = b.ncols();
        Array2::from_shape_fn((m, n), |(i, j)| (0..k).map(|p| a[[i, p]] * b[[p, j]]).sum())
    }

    #[test]
    fn matches_naive_product() {
        for (m, k, n) in [(7, 3, 5), (40, 130, 70), (3, 200, 1), (5, 1, 33), (64, 64, 64)] {
            let a = random(m, k, 1);
            let b = random(k, n, 2);
            let mut c = random(m, n, 3);
            let expected = &c + &naive(&a, &b);
            gemm_acc(&a.view(), &b.view(), &mut c.view_mut());
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_and_sliced_operands() {
        let a = random(50, 20, 4);
        let b = random(50, 36, 5);
        let mut c = Array2::<f64>::zeros((20, 36));
        gemm_acc(&a.t(), &b.view(), &mut c.view_mut());
        let expected = naive(&a.t().to_owned(), &b);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = random(40, 36, 6);
        let mut big = Array2::<f64>::zeros((50, 40));
        let expected = naive(&b, &w.slice(s![..20, ..]).t().to_owned());
        gemm_acc(&b.view(), &w.slice(s![..20, ..]).t(), &mut big.slice_mut(s![.., ..20]));
        for (x, y) in big.slice(s![.., ..20]).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(big.slice(s![.., 20..]).iter().all(|&v| v == 0.0));
    }
}
