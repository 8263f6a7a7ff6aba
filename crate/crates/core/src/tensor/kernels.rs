//! Dense row-major kernels shared by the forward and backward rules.
//!
//! Every kernel accumulates into `out` (`out += ...`) so backward rules can
//! sum contributions from several consumers without extra buffers.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, stable for large |x|.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Same-length 1-D convolution over the rows of `input` (`len × width`).
///
/// Filter `f` holds `window × width` weights laid out window-major. Output is
/// `filters × len` (one feature map row per filter). Positions outside the
/// sequence are zero padding and contribute nothing.
pub(crate) fn conv1d_same(
    input: &[f64],
    len: usize,
    width: usize,
    filters: &[f64],
    n_filters: usize,
    window: usize,
    bias: &[f64],
) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut out = vec![0.0; n_filters * len];
    for f in 0..n_filters {
        let filt = &filters[f * window * width..(f + 1) * window * width];
        for t in 0..len {
            let mut acc = 0.0;
            for w in 0..window {
                let src = t as isize + w as isize - half;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                let x = &input[src * width..(src + 1) * width];
                let k = &filt[w * width..(w + 1) * width];
                for c in 0..width {
                    acc += k[c] * x[c];
                }
            }
            out[f * len + t] = acc + bias[f];
        }
    }
    out
}
