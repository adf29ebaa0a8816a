//! Raw buffer kernels behind the tape primitives.

/// `c (m×n) = op(a) · op(b)` (or `+=` when `accumulate`), all buffers row-major.
///
/// `a` is stored `m×k`, or `k×m` when `a_t`; `b` is stored `k×n`, or `n×k` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // extents checked against the slice lengths.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold a `d×t` sequence into `(d·k)×t` columns for a same-padded convolution.
pub(crate) fn im2col(x: &[f64], d: usize, t: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut cols = vec![0.0; d * k * t];
    for c in 0..d {
        let xrow = &x[c * t..(c + 1) * t];
        for j in 0..k {
            let row = &mut cols[(c * k + j) * t..(c * k + j + 1) * t];
            // output position `pos` reads input `pos + j - pad`
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for pos in lo..hi {
                row[pos] = xrow[pos + j - pad];
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the sequence.
pub(crate) fn col2im_add(cols: &[f64], d: usize, t: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    for c in 0..d {
        for j in 0..k {
            let row = &cols[(c * k + j) * t..(c * k + j + 1) * t];
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for pos in lo..hi {
                dx[c * t + pos + j - pad] += row[pos];
            }
        }
    }
}

/// Row-wise softmax of an `rows×cols` buffer with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    out
}
