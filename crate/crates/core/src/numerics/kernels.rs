//! Raw dense kernels shared by the differentiable graph and the gradient-free
//! inference path, so both produce bit-identical values.

/// `C[m,n] = A[m,k] · B[k,n]`, all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(a, (k as isize, 1), b, (n as isize, 1), &mut c, m, k, n, 0.0);
    c
}

/// `C[m,n] += Aᵀ · B` where `A` is stored as `[k,m]` and `B` as `[k,n]`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm(a, (1, m as isize), b, (n as isize, 1), c, m, k, n, 1.0);
}

/// `C[m,n] += A · Bᵀ` where `A` is `[m,k]` and `B` is stored as `[n,k]`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k as isize, 1), b, (1, k as isize), c, m, k, n, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds `bias[n]` to every row of `x[m,n]` in place.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow for large `|z|`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn silu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = silu(*v);
    }
}

/// Per-row sum of squares of `x[m,n]`.
pub fn row_sq_norm(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks_exact(n)
        .map(|row| row.iter().map(|v| v * v).sum())
        .collect()
}
