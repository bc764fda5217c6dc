//! Planar (channel, row, column) kernels: 3x3 patch gather/scatter,
//! pooling and per-pixel activations.

use super::real::Real;

/// Gathers 3x3 neighbourhoods of a `ch x rows x cols` image sampled on a
/// `grid_rows x grid_cols` grid with the given stride:
/// `dst[(c*9 + ki*3 + kj), i*grid_cols + j] = src[c, stride*i + ki - 1, stride*j + kj - 1]`,
/// zero outside the image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col3<T: Real>(
    src: &[T],
    ch: usize,
    rows: usize,
    cols: usize,
    stride: usize,
    grid_rows: usize,
    grid_cols: usize,
    dst: &mut [T],
) {
    let gp = grid_rows * grid_cols;
    debug_assert!(src.len() >= ch * rows * cols);
    debug_assert!(dst.len() >= ch * 9 * gp);
    for c in 0..ch {
        let plane = &src[c * rows * cols..(c + 1) * rows * cols];
        for ki in 0..3 {
            for kj in 0..3 {
                let out = &mut dst[(c * 9 + ki * 3 + kj) * gp..(c * 9 + ki * 3 + kj + 1) * gp];
                for i in 0..grid_rows {
                    let row = &mut out[i * grid_cols..(i + 1) * grid_cols];
                    let si = (stride * i + ki) as isize - 1;
                    if si < 0 || si >= rows as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[si as usize * cols..(si as usize + 1) * cols];
                    if stride == 1 {
                        // valid j: 0 <= j + kj - 1 < cols
                        let lo = 1usize.saturating_sub(kj);
                        let hi = grid_cols.min(cols + 1 - kj);
                        row[..lo].fill(T::zero());
                        if hi > lo {
                            row[lo..hi].copy_from_slice(&src_row[lo + kj - 1..hi + kj - 1]);
                        }
                        row[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (j, v) in row.iter_mut().enumerate() {
                            let sj = (stride * j + kj) as isize - 1;
                            *v = if sj >= 0 && (sj as usize) < cols {
                                src_row[sj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-adds columns back onto `dst`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im3<T: Real>(
    cols_buf: &[T],
    ch: usize,
    rows: usize,
    cols: usize,
    stride: usize,
    grid_rows: usize,
    grid_cols: usize,
    dst: &mut [T],
) {
    let gp = grid_rows * grid_cols;
    for c in 0..ch {
        let plane = &mut dst[c * rows * cols..(c + 1) * rows * cols];
        for ki in 0..3 {
            for kj in 0..3 {
                let src = &cols_buf[(c * 9 + ki * 3 + kj) * gp..(c * 9 + ki * 3 + kj + 1) * gp];
                for i in 0..grid_rows {
                    let si = (stride * i + ki) as isize - 1;
                    if si < 0 || si >= rows as isize {
                        continue;
                    }
                    let dst_row = &mut plane[si as usize * cols..(si as usize + 1) * cols];
                    let row = &src[i * grid_cols..(i + 1) * grid_cols];
                    if stride == 1 {
                        let lo = 1usize.saturating_sub(kj);
                        let hi = grid_cols.min(cols + 1 - kj);
                        for j in lo..hi {
                            dst_row[j + kj - 1] += row[j];
                        }
                    } else {
                        for (j, &v) in row.iter().enumerate() {
                            let sj = (stride * j + kj) as isize - 1;
                            if sj >= 0 && (sj as usize) < cols {
                                dst_row[sj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling. Returns pooled values and the flat source index of each
/// maximum (first maximum wins ties).
pub(crate) fn max_pool2<T: Real>(src: &[T], ch: usize, rows: usize, cols: usize) -> (Vec<T>, Vec<u32>) {
    let (pr, pc) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(ch * pr * pc);
    let mut idx = Vec::with_capacity(ch * pr * pc);
    for c in 0..ch {
        let base = c * rows * cols;
        for i in 0..pr {
            for j in 0..pc {
                let mut best = base + 2 * i * cols + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * cols + 2 * j + dj;
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                out.push(src[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn max_unpool2_add<T: Real>(grad: &[T], idx: &[u32], dst: &mut [T]) {
    for (&g, &k) in grad.iter().zip(idx) {
        dst[k as usize] += g;
    }
}

pub(crate) fn add_bias_relu<T: Real>(buf: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut buf[c * plane..(c + 1) * plane] {
            let x = *v + b;
            *v = if x > T::zero() { x } else { T::zero() };
        }
    }
}

pub(crate) fn add_bias<T: Real>(buf: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut buf[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
pub(crate) fn relu_mask<T: Real>(grad: &mut [T], activation: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Accumulates per-channel sums of `grad` into `dbias`.
pub(crate) fn bias_grad<T: Real>(grad: &[T], plane: usize, dbias: &mut [T]) {
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += grad[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Softmax across channels at every pixel of a `ch x plane` buffer.
pub(crate) fn softmax_channels<T: Real>(logits: &[T], ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for p in 0..plane {
        let mut max = T::neg_infinity();
        for c in 0..ch {
            max = max.max(logits[c * plane + p]);
        }
        let mut sum = T::zero();
        for c in 0..ch {
            let e = (logits[c * plane + p] - max).exp();
            out[c * plane + p] = e;
            sum += e;
        }
        for c in 0..ch {
            out[c * plane + p] = out[c * plane + p] / sum;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        let (ch, r, c) = (2, 5, 4);
        let x = lcg(ch * r * c, 1);
        let mut cols = vec![0.0; ch * 9 * r * c];
        im2col3(&x, ch, r, c, 1, r, c, &mut cols);
        for ci in 0..ch {
            for ki in 0..3 {
                for kj in 0..3 {
                    for i in 0..r {
                        for j in 0..c {
                            let (si, sj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                            let want = if si >= 0 && sj >= 0 && (si as usize) < r && (sj as usize) < c {
                                x[(ci * r + si as usize) * c + sj as usize]
                            } else {
                                0.0
                            };
                            assert_eq!(cols[(ci * 9 + ki * 3 + kj) * r * c + i * c + j], want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, r, c, gr, gc) in &[(1usize, 6usize, 5usize, 6usize, 5usize), (2, 8, 6, 4, 3)] {
            let ch = 3;
            let x = lcg(ch * r * c, 2);
            let y = lcg(ch * 9 * gr * gc, 3);
            let mut cx = vec![0.0; y.len()];
            im2col3(&x, ch, r, c, stride, gr, gc, &mut cx);
            let mut ty = vec![0.0; x.len()];
            col2im3(&y, ch, r, c, stride, gr, gc, &mut ty);
            approx::assert_relative_eq!(dot(&cx, &y), dot(&x, &ty), epsilon = 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (out, idx) = max_pool2(&x, 1, 2, 4);
        assert_eq!(out, vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
        let mut back = vec![0.0; 8];
        max_unpool2_add(&[1.0, 2.0], &idx, &mut back);
        assert_eq!(back, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_sigmoid_is_stable() {
        let logits = vec![1000.0, -3.0, 0.0, 1001.0, 2.0, 0.5];
        let s = softmax_channels(&logits, 2, 3);
        for p in 0..3 {
            approx::assert_relative_eq!(s[p] + s[3 + p], 1.0, epsilon = 1e-12);
        }
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        approx::assert_relative_eq!(sigmoid(0.0f64), 0.5);
    }
}
