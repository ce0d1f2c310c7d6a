//! Dense row-major kernels used by the transformer: GEMM wrappers, layer
//! norm, dropout masks, and (log-)softmax.

use rand::Rng;

/// `out[m,n] = a·b` (or `+=` when `accumulate`). `a_t` means `a` is stored as
/// `[k,m]` and used transposed; `b_t` means `b` is stored as `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds are checked above for the strides used here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided matrix view: `(data, offset, row_stride, col_stride)`.
pub type View<'a> = (&'a [f64], usize, usize, usize);
pub type ViewMut<'a> = (&'a mut [f64], usize, usize, usize);

fn view_fits(len: usize, off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || off + (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c = alpha·a·b + beta·c` on strided views (`a` is `m×k`, `b` is `k×n`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    assert!(view_fits(a.0.len(), a.1, m, k, a.2, a.3));
    assert!(view_fits(b.0.len(), b.1, k, n, b.2, b.3));
    assert!(view_fits(c.0.len(), c.1, m, n, c.2, c.3));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 || m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, alpha, a, b, beta, c);
        return;
    }
    // SAFETY: every addressed element was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            c.3 as isize,
        );
    }
}

/// Below this many multiply-adds the packing done by `matrixmultiply` costs
/// more than the arithmetic.
const SMALL_GEMM: usize = 32 * 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    let (cd, co, crs, ccs) = c;
    if a.3 == 1 && b.2 == 1 {
        // rows of `a` and columns of `b` are contiguous: dot products
        for i in 0..m {
            let ar = &a.0[a.1 + i * a.2..a.1 + i * a.2 + k];
            for j in 0..n {
                let bc = &b.0[b.1 + j * b.3..b.1 + j * b.3 + k];
                let dot: f64 = ar.iter().zip(bc).map(|(x, y)| x * y).sum();
                let dst = &mut cd[co + i * crs + j * ccs];
                *dst = alpha * dot + if beta == 0.0 { 0.0 } else { beta * *dst };
            }
        }
        return;
    }
    for i in 0..m {
        if beta == 0.0 {
            for j in 0..n {
                cd[co + i * crs + j * ccs] = 0.0;
            }
        } else if beta != 1.0 {
            for j in 0..n {
                cd[co + i * crs + j * ccs] *= beta;
            }
        }
        for p in 0..k {
            let s = alpha * a.0[a.1 + i * a.2 + p * a.3];
            if s == 0.0 {
                continue;
            }
            if b.3 == 1 && ccs == 1 {
                let br = &b.0[b.1 + p * b.2..b.1 + p * b.2 + n];
                let cr = &mut cd[co + i * crs..co + i * crs + n];
                for (x, y) in cr.iter_mut().zip(br) {
                    *x += s * y;
                }
            } else {
                for j in 0..n {
                    cd[co + i * crs + j * ccs] += s * b.0[b.1 + p * b.2 + j * b.3];
                }
            }
        }
    }
}

/// `y[rows,out] = x[rows,in] · Wᵀ + b` with `W` stored `[out,in]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    gemm(rows, inp, out, x, false, w, true, &mut y, false);
    for r in y.chunks_exact_mut(out) {
        for (v, bias) in r.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db`, and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(out, rows, inp, dy, true, x, false, dw, true);
    for r in dy.chunks_exact(out) {
        for (g, d) in db.iter_mut().zip(r) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, dy, false, w, false, &mut dx, false);
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], dim: usize) -> (Vec<f64>, NormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gamma[i] + beta[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Forward-only layer norm (no cache).
pub fn layer_norm_infer(x: &[f64], gamma: &[f64], beta: &[f64], dim: usize) -> Vec<f64> {
    layer_norm(x, gamma, beta, dim).0
}

pub fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    dim: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..dim {
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[r * dim + i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`. `None` when `p == 0`.
pub fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Option<Vec<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
}

pub fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// In-place softmax of one row; entries equal to `-inf` get probability 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Sinusoidal position table `[positions, dim]`.
pub fn sinusoidal_positions(positions: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; positions * dim];
    let half = dim / 2;
    for p in 0..positions {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let angle = p as f64 * freq;
            table[p * dim + i] = angle.sin();
            table[p * dim + half + i] = angle.cos();
        }
    }
    table
}
