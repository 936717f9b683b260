//! Raw forward/backward loops over flat buffers. Shapes are validated by the
//! tape before these are called.

use super::Real;

/// Maps every flat index of `full` onto the flat index of `small`, where
/// `small` has the same rank and each extent is either 1 or equal.
pub(crate) fn broadcast_map(full: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut small_strides = vec![0usize; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        small_strides[axis] = if small[axis] == 1 { 0 } else { stride };
        stride *= small[axis];
    }
    let n: usize = full.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&small_strides).map(|(i, s)| i * s).sum());
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < full[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

/// Output shape and input→output index map for a reduction over `axes`.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(a, &e)| if axes.contains(&a) { 1 } else { e })
        .collect();
    let map = broadcast_map(shape, &kept);
    let out_shape = shape
        .iter()
        .enumerate()
        .filter(|(a, _)| !axes.contains(a))
        .map(|(_, &e)| e)
        .collect();
    (out_shape, map)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvDims {
    /// Output positions `t0..t1` whose tap `j` reads inside the input, and
    /// the input index read at `t0`. Consecutive outputs read `stride` apart.
    #[inline]
    fn tap_range(&self, j: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // Smallest t with t·s + j >= p.
        let t0 = if j >= p { 0 } else { (p - j).div_ceil(s) };
        // Largest t with t·s + j - p < len, plus one.
        let t1 = if self.len + p > j {
            ((self.len + p - j - 1) / s + 1).min(self.out_len)
        } else {
            0
        };
        if t0 >= t1 {
            return (t1, t1, 0);
        }
        (t0, t1, t0 * s + j - p)
    }
}

/// A read-only strided matrix view: `(data, row stride, column stride)`.
type View<'a, T> = (&'a [T], usize, usize);

fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// `c[m, n] (+)= a[m, k] · b[k, n]`, with `c` dense row-major.
pub(crate) fn matmul<T: Real>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, c: &mut [T], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "matmul output too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    assert!(a.0.len() >= reach(m, k, a.1, a.2), "matmul lhs out of bounds");
    assert!(b.0.len() >= reach(k, n, b.1, b.2), "matmul rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the views can reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            (a.1 as isize, a.2 as isize),
            b.0.as_ptr(),
            (b.1 as isize, b.2 as isize),
            beta,
            c.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}

/// Unfolds one sample `[c_in, len]` into `[c_in·kernel, out_len]` so that
/// the convolution becomes a matrix product.
fn im2col<T: Real>(x: &[T], col: &mut [T], d: &ConvDims, taps: &[(usize, usize, usize)]) {
    for c in 0..d.c_in {
        let xrow = &x[c * d.len..][..d.len];
        for (j, &(t0, t1, src)) in taps.iter().enumerate() {
            let row = &mut col[(c * d.kernel + j) * d.out_len..][..d.out_len];
            row[..t0].iter_mut().for_each(|v| *v = T::zero());
            row[t1..].iter_mut().for_each(|v| *v = T::zero());
            for (v, &xv) in row[t0..t1].iter_mut().zip(xrow[src..].iter().step_by(d.stride)) {
                *v = xv;
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Real>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let r = d.c_in * d.kernel;
    let mut y = vec![T::zero(); d.batch * d.c_out * d.out_len];
    let mut col = vec![T::zero(); r * d.out_len];
    let taps: Vec<_> = (0..d.kernel).map(|j| d.tap_range(j)).collect();
    for b in 0..d.batch {
        im2col(&x[b * d.c_in * d.len..][..d.c_in * d.len], &mut col, d, &taps);
        let yb = &mut y[b * d.c_out * d.out_len..][..d.c_out * d.out_len];
        for (row, &bv) in yb.chunks_exact_mut(d.out_len).zip(bias) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        matmul(d.c_out, r, d.out_len, (w, r, 1), (&col, d.out_len, 1), yb, true);
    }
    y
}

/// Returns `(dx, dw, dbias)`; `dx` is skipped when `want_dx` is false.
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let r = d.c_in * d.kernel;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); d.c_out];
    let mut col = vec![T::zero(); r * d.out_len];
    let mut dcol = vec![T::zero(); if want_dx { r * d.out_len } else { 0 }];
    let taps: Vec<_> = (0..d.kernel).map(|j| d.tap_range(j)).collect();
    for b in 0..d.batch {
        let gy = &dy[b * d.c_out * d.out_len..][..d.c_out * d.out_len];
        for (o, row) in gy.chunks_exact(d.out_len).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
        im2col(&x[b * d.c_in * d.len..][..d.c_in * d.len], &mut col, d, &taps);
        matmul(d.c_out, d.out_len, r, (gy, d.out_len, 1), (&col, 1, d.out_len), &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            matmul(r, d.c_out, d.out_len, (w, 1, r), (gy, d.out_len, 1), &mut dcol, false);
            let dxb = &mut dx[b * d.c_in * d.len..][..d.c_in * d.len];
            for c in 0..d.c_in {
                let dxrow = &mut dxb[c * d.len..][..d.len];
                for (j, &(t0, t1, src)) in taps.iter().enumerate() {
                    let g = &dcol[(c * d.kernel + j) * d.out_len..][t0..t1];
                    for (v, &gv) in dxrow[src..].iter_mut().step_by(d.stride).zip(g) {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y[r, o] = b[o] + Σ_i x[r, i] w[o, i]`.
pub(crate) fn linear_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * n_out];
    for row in y.chunks_exact_mut(n_out) {
        row.copy_from_slice(bias);
    }
    matmul(rows, n_in, n_out, (x, n_in, 1), (w, 1, n_in), &mut y, true);
    y
}

pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut db = vec![T::zero(); n_out];
    for row in dy.chunks_exact(n_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    let mut dw = vec![T::zero(); n_out * n_in];
    matmul(n_out, rows, n_in, (dy, 1, n_out), (x, n_in, 1), &mut dw, false);
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * n_in];
        matmul(rows, n_out, n_in, (dy, n_out, 1), (w, n_in, 1), &mut dx, false);
        dx
    });
    (dx, dw, db)
}

/// Per-channel `(mean, biased variance)` over batch and time of `[B, C, L]`.
pub(crate) fn channel_stats<T: Real>(x: &[T], batch: usize, ch: usize, len: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((batch * len) as f64);
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    for c in 0..ch {
        let mut s = T::zero();
        for b in 0..batch {
            s = s + x[(b * ch + c) * len..][..len].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut sq = T::zero();
        for b in 0..batch {
            for &v in &x[(b * ch + c) * len..][..len] {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_over_middle_axis() {
        let map = broadcast_map(&[2, 3], &[2, 1]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_map(&[2, 3], &[1, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn reduce_map_drops_axes() {
        let (shape, map) = reduce_map(&[2, 3, 4], &[0, 2]);
        assert_eq!(shape, vec![3]);
        assert_eq!(map[0], 0);
        assert_eq!(map[4], 1);
        assert_eq!(map[12], 0);
    }

    fn naive(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut y = vec![0.0; d.batch * d.c_out * d.out_len];
        for b in 0..d.batch {
            for o in 0..d.c_out {
                for t in 0..d.out_len {
                    for c in 0..d.c_in {
                        for j in 0..d.kernel {
                            let pos = (t * d.stride + j) as isize - d.padding as isize;
                            if pos >= 0 && (pos as usize) < d.len {
                                y[(b * d.c_out + o) * d.out_len + t] +=
                                    w[(o * d.c_in + c) * d.kernel + j] * x[(b * d.c_in + c) * d.len + pos as usize];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (len, kernel, stride, padding) in [(9, 3, 2, 1), (8, 3, 1, 1), (5, 5, 1, 4), (4, 3, 3, 0), (1, 3, 2, 1), (7, 1, 2, 0), (1, 2, 3, 1), (2, 4, 3, 2)] {
            let out_len = (len + 2 * padding - kernel) / stride + 1;
            let d = ConvDims { batch: 2, c_in: 2, len, c_out: 3, kernel, stride, padding, out_len };
            let x: Vec<f64> = (0..2 * 2 * len).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * kernel).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let y = conv1d_forward(&x, &w, &[0.0; 3], &d);
            assert_eq!(y, naive(&x, &w, &d), "{d:?}");

            // Adjoint identity: <dy, conv(x)> = <conv^T(dy), x> and = <dw, w>.
            let dy: Vec<f64> = (0..y.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
            let (dx, dw, _) = conv1d_backward(&x, &w, &dy, &d, true);
            let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, via_x, "{d:?}");
            assert_eq!(lhs, via_w, "{d:?}");
        }
    }
}
