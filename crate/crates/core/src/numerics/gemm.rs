//! Thin, bounds-checked wrapper over the `matrixmultiply` GEMM kernels.

use super::Float;

/// Row-major matrix view: element `(i, j)` lives at `data[i * ld + j]`, or
/// at `data[j * ld + i]` when `trans` is set (the view is then of `Aᵀ`).
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    pub data: &'a [Float],
    pub ld: usize,
    pub trans: bool,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [Float], ld: usize) -> Self {
        MatView {
            data,
            ld,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            trans: !self.trans,
            ..self
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn check(&self, rows: usize, cols: usize, what: &str) {
        let (rs, cs) = self.strides();
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(
            (last as usize) < self.data.len(),
            "gemm: {what} view {rows}x{cols} (ld {}) overruns buffer of {}",
            self.ld,
            self.data.len()
        );
    }
}

/// `C = alpha * A·B + beta * C` where `A` is m×k, `B` is k×n and `C` is a
/// row-major m×n block with leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: Float,
    c: &mut [Float],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        (m - 1) * ldc + n <= c.len(),
        "gemm: output {m}x{n} (ld {ldc}) overruns buffer of {}",
        c.len()
    );
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    a.check(m, k, "lhs");
    b.check(k, n, "rhs");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: every index touched by the kernel was bounds-checked above
    // against the backing slices, and `c` is uniquely borrowed.
    unsafe {
        kernel(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as kernel;

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as kernel;
