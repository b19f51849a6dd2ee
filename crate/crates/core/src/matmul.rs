//! Matrix products for the MLP layers.
//!
//! Products whose result rows are [`WIDTH`] wide (every hidden layer at the
//! default size) use a register-blocked AVX-512 kernel when the CPU has it.
//! Everything else goes through ndarray.

use ndarray::{Array2, ArrayView2};

const WIDTH: usize = 64;
/// Result rows held in registers at once: 3 x 8 accumulators of 8 lanes.
const ROWS: usize = 3;

/// `a · b`.
pub(crate) fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if b.ncols() == WIDTH && std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
            let b = b.as_standard_layout();
            let mut c = Array2::zeros((a.nrows(), WIDTH));
            let out = c.as_slice_mut().expect("fresh array");
            // SAFETY: the CPU supports the enabled features.
            unsafe { wide_avx512(&a, b.as_slice().expect("standard layout"), out) };
            return c;
        }
    }
    a.dot(&b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn wide_avx512(a: &ArrayView2<f64>, b: &[f64], c: &mut [f64]) {
    let n = a.nrows();
    let whole = n - n % ROWS;
    for r0 in (0..whole).step_by(ROWS) {
        block::<ROWS>(a, r0, b, c);
    }
    for r0 in whole..n {
        block::<1>(a, r0, b, c);
    }
}

#[inline(always)]
fn block<const R: usize>(a: &ArrayView2<f64>, r0: usize, b: &[f64], c: &mut [f64]) {
    let mut acc = [[0.0f64; WIDTH]; R];
    for s in 0..a.ncols() {
        let row: &[f64; WIDTH] = b[s * WIDTH..(s + 1) * WIDTH].try_into().expect("row width");
        for (r, acc) in acc.iter_mut().enumerate() {
            let v = a[[r0 + r, s]];
            for l in 0..WIDTH {
                acc[l] = v.mul_add(row[l], acc[l]);
            }
        }
    }
    for (r, acc) in acc.iter().enumerate() {
        c[(r0 + r) * WIDTH..(r0 + r + 1) * WIDTH].copy_from_slice(acc);
    }
}
