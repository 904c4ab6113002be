//! Flat-slice numeric kernels shared by the graph executor and the
//! recurrent inference path.
//!
//! All loops run in a fixed order so results are bit-identical across runs
//! of the same build. Reductions use eight independent accumulators, which
//! both defines a stable summation order and lets the compiler vectorize.

use super::Scalar;

const LANES: usize = 8;

/// Dot product with lane-split accumulation.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] = a[base + l].mul_add(b[base + l], acc[l]);
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i % LANES] = a[i].mul_add(b[i], acc[i % LANES]);
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    s
}

/// `y += alpha * x`.
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = alpha.mul_add(xv, *yv);
    }
}

/// `out = a (m×k) · b (k×n)`, overwriting `out`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.fill(T::zero());
    matmul_acc(a, b, m, k, n, out);
}

/// Row count of one register tile in [`matmul_acc`].
const TILE_ROWS: usize = 4;
/// Column count of one register tile in [`matmul_acc`].
const TILE_COLS: usize = 16;

/// `out += a (m×k) · b (k×n)`.
///
/// Full 4×16 tiles accumulate in registers so each loaded `b` chunk feeds
/// four output rows and nothing is stored until the k loop finishes; edge
/// rows and columns run through the plain row-times-row loop instead.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + TILE_ROWS <= m {
        let mut j = 0;
        while j + TILE_COLS <= n {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for p in 0..k {
                let b_chunk = &b[p * n + j..p * n + j + TILE_COLS];
                for (r, lanes) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (lane, &bv) in lanes.iter_mut().zip(b_chunk) {
                        *lane = av.mul_add(bv, *lane);
                    }
                }
            }
            for (r, lanes) in acc.iter().enumerate() {
                let row = (i + r) * n + j;
                for (ov, &lv) in out[row..row + TILE_COLS].iter_mut().zip(lanes) {
                    *ov = *ov + lv;
                }
            }
            j += TILE_COLS;
        }
        for r in 0..TILE_ROWS {
            acc_row_tail(a, b, i + r, k, n, j, out);
        }
        i += TILE_ROWS;
    }
    for row in i..m {
        acc_row_tail(a, b, row, k, n, 0, out);
    }
}

/// Accumulates columns `from_col..n` of one output row of `a · b`.
fn acc_row_tail<T: Scalar>(
    a: &[T],
    b: &[T],
    row: usize,
    k: usize,
    n: usize,
    from_col: usize,
    out: &mut [T],
) {
    if from_col == n {
        return;
    }
    let a_row = &a[row * k..(row + 1) * k];
    let out_rem = &mut out[row * n + from_col..(row + 1) * n];
    for (p, &av) in a_row.iter().enumerate() {
        axpy(av, &b[p * n + from_col..(p + 1) * n], out_rem);
    }
}

/// `dst = src (rows×cols) transposed`, so `dst` holds a cols×rows matrix.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), src.len());
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// `out = a (m×k) · b (n×k) transposed`, overwriting `out`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.fill(T::zero());
    matmul_nt_acc(a, b, m, k, n, out);
}

/// `out += a (m×k) · b (n×k) transposed`.
///
/// `b` is transposed into a scratch buffer first; the copy is k·n elements
/// against m·k·n multiply-adds, and it keeps the inner product on the tiled
/// unit-stride path of [`matmul_acc`].
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    transpose(b, n, k, &mut bt);
    matmul_acc(a, &bt, m, k, n, out);
}

/// `out += a (m×k) transposed · b (m×n)`, giving a k×n result.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut at = vec![T::zero(); k * m];
    transpose(a, m, k, &mut at);
    matmul_acc(&at, b, k, m, n, out);
}

/// `state = decay * state + outer(k, v)` for a (dk × dv) state matrix.
pub fn decay_outer_acc<T: Scalar>(decay: T, key: &[T], value: &[T], state: &mut [T]) {
    let dv = value.len();
    debug_assert_eq!(state.len(), key.len() * dv);
    for (i, &kv) in key.iter().enumerate() {
        let row = &mut state[i * dv..(i + 1) * dv];
        for (sv, &vv) in row.iter_mut().zip(value) {
            *sv = kv.mul_add(vv, decay * *sv);
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Rotates consecutive element pairs of one row by position-scaled angles.
///
/// Pair `j` of `x` is treated as a 2-D point and rotated by `pos * thetas[j]`;
/// `conjugate` negates the angle. Trigonometry is evaluated in f64 regardless
/// of `T` so large positions do not lose phase accuracy in narrow builds.
pub fn rotate_pairs<T: Scalar>(x: &[T], pos: usize, thetas: &[f64], conjugate: bool, out: &mut [T]) {
    debug_assert_eq!(x.len(), thetas.len() * 2);
    debug_assert_eq!(out.len(), x.len());
    for (j, &theta) in thetas.iter().enumerate() {
        let angle = pos as f64 * theta;
        let (sin, cos) = angle.sin_cos();
        let s = T::from_f64(if conjugate { -sin } else { sin });
        let c = T::from_f64(cos);
        let x0 = x[2 * j];
        let x1 = x[2 * j + 1];
        out[2 * j] = c * x0 - s * x1;
        out[2 * j + 1] = s.mul_add(x0, c * x1);
    }
}

/// Root-mean-square normalization of one row: `out = x / rms(x) * gain`.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) {
    debug_assert_eq!(x.len(), gain.len());
    debug_assert_eq!(x.len(), out.len());
    let d = T::from_f64(x.len() as f64);
    let inv = (dot(x, x) / d + eps).sqrt().recip();
    for ((ov, &xv), &gv) in out.iter_mut().zip(x).zip(gain) {
        *ov = xv * inv * gv;
    }
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}
