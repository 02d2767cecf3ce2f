//! Raw compute kernels: convolution (im2col + GEMM), pooling, resampling.
//!
//! All kernels are deterministic: parallel workers write disjoint output
//! regions and every reduction runs in a fixed order, so results are
//! bit-identical regardless of thread count.

use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Raw pointer wrapper so parallel tasks can write disjoint output regions.
#[derive(Copy, Clone)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Output spatial size of a k x k convolution.
#[inline]
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[inline]
fn im2col_rows<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    r0: usize,
    r1: usize,
    cols: &mut [T],
) {
    let kk = k * k * cin;
    cols[..(r1 - r0) * wo * kk].fill(T::zero());
    for oy in r0..r1 {
        for ox in 0..wo {
            let row = ((oy - r0) * wo + ox) * kk;
            for dy in 0..k {
                let iy = (oy * stride + dy).wrapping_sub(pad);
                if iy >= h {
                    continue;
                }
                for dx in 0..k {
                    let ix = (ox * stride + dx).wrapping_sub(pad);
                    if ix >= w {
                        continue;
                    }
                    let src = (iy * w + ix) * cin;
                    let dst = row + (dy * k + dx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
}

#[inline]
fn col2im_rows<T: Scalar>(
    dx: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    r0: usize,
    r1: usize,
    dcols: &[T],
) {
    let kk = k * k * cin;
    for oy in r0..r1 {
        for ox in 0..wo {
            let row = ((oy - r0) * wo + ox) * kk;
            for dy in 0..k {
                let iy = (oy * stride + dy).wrapping_sub(pad);
                if iy >= h {
                    continue;
                }
                for dx in 0..k {
                    let ix = (ox * stride + dx).wrapping_sub(pad);
                    if ix >= w {
                        continue;
                    }
                    let dst = (iy * w + ix) * cin;
                    let src = row + (dy * k + dx) * cin;
                    for c in 0..cin {
                        dx[dst + c] = dx[dst + c] + dcols[src + c];
                    }
                }
            }
        }
    }
}

fn rows_per_block<T>(wo: usize, kk: usize, ho: usize) -> usize {
    let bytes_per_row = wo * kk * std::mem::size_of::<T>();
    (2_000_000 / bytes_per_row.max(1)).clamp(4, ho.max(1))
}

/// 2-D convolution, NHWC input, weight layout `[k, k, cin, cout]`
/// (row-major, i.e. a `(k*k*cin) x cout` matrix), zero padding.
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, h, wi, cin] = x.shape;
    let [k, k2, cin_w, cout] = w.shape;
    assert_eq!(k, k2);
    assert_eq!(cin, cin_w, "conv2d: input channels mismatch");
    assert_eq!(b.numel(), cout);
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wi, k, stride, pad);
    let kk = k * k * cin;
    let mut out = Tensor::zeros([n, ho, wo, cout]);

    let sample_in = h * wi * cin;
    let sample_out = ho * wo * cout;
    let br = rows_per_block::<T>(wo, kk, ho);
    let blocks_per_sample = ho.div_ceil(br);
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|s| (0..blocks_per_sample).map(move |i| (s, i * br, ((i + 1) * br).min(ho))))
        .collect();

    let out_ptr = SendPtr(out.data.as_mut_ptr());
    let work = n * ho * wo * kk * cout;
    let run = |&(s, r0, r1): &(usize, usize, usize)| {
        let xs = &x.data[s * sample_in..(s + 1) * sample_in];
        let mut cols = vec![T::zero(); (r1 - r0) * wo * kk];
        im2col_rows(xs, h, wi, cin, k, stride, pad, wo, r0, r1, &mut cols);
        let m = (r1 - r0) * wo;
        let off = s * sample_out + r0 * wo * cout;
        let dst = unsafe { std::slice::from_raw_parts_mut(out_ptr.0.add(off), m * cout) };
        // bias first, then accumulate the GEMM on top
        for row in dst.chunks_exact_mut(cout) {
            row.copy_from_slice(&b.data);
        }
        T::gemm(
            m,
            kk,
            cout,
            T::one(),
            &cols,
            kk as isize,
            1,
            &w.data,
            cout as isize,
            1,
            T::one(),
            dst,
            cout as isize,
            1,
        );
    };
    if work < 100_000 || tasks.len() == 1 {
        tasks.iter().for_each(run);
    } else {
        tasks.par_iter().for_each(run);
    }
    out
}

/// Backward of [`conv2d_fwd`]. Returns `(dx, dw, db)`; `dx`/`dw` are only
/// computed when requested.
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, h, wi, cin] = x.shape;
    let [k, _, _, cout] = w.shape;
    let [n2, ho, wo, cout2] = dy.shape;
    assert_eq!(n, n2);
    assert_eq!(cout, cout2);
    let kk = k * k * cin;
    let m = ho * wo;
    let sample_in = h * wi * cin;
    let sample_out = m * cout;

    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape);
        let dx_ptr = SendPtr(dx.data.as_mut_ptr());
        let run = |s: usize| {
            let dys = &dy.data[s * sample_out..(s + 1) * sample_out];
            // dcols[m x kk] = dy[m x cout] * w^T[cout x kk]
            let mut dcols = vec![T::zero(); m * kk];
            T::gemm(
                m,
                cout,
                kk,
                T::one(),
                dys,
                cout as isize,
                1,
                &w.data,
                1,
                cout as isize,
                T::zero(),
                &mut dcols,
                kk as isize,
                1,
            );
            let dxs =
                unsafe { std::slice::from_raw_parts_mut(dx_ptr.0.add(s * sample_in), sample_in) };
            col2im_rows(dxs, h, wi, cin, k, stride, pad, wo, 0, ho, &dcols);
        };
        if n * m * kk * cout < 100_000 || n == 1 {
            (0..n).for_each(run);
        } else {
            (0..n).into_par_iter().for_each(run);
        }
        Some(dx)
    } else {
        None
    };

    let (dw, db) = if need_dw {
        // per-sample partials in parallel, then a fixed-order reduction
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &x.data[s * sample_in..(s + 1) * sample_in];
                let dys = &dy.data[s * sample_out..(s + 1) * sample_out];
                let mut cols = vec![T::zero(); m * kk];
                im2col_rows(xs, h, wi, cin, k, stride, pad, wo, 0, ho, &mut cols);
                // dw[kk x cout] = cols^T[kk x m] * dy[m x cout]
                let mut dws = vec![T::zero(); kk * cout];
                T::gemm(
                    kk,
                    m,
                    cout,
                    T::one(),
                    &cols,
                    1,
                    kk as isize,
                    dys,
                    cout as isize,
                    1,
                    T::zero(),
                    &mut dws,
                    cout as isize,
                    1,
                );
                dws
            })
            .collect();
        let mut dw = Tensor::zeros(w.shape);
        for p in &partials {
            for (d, s) in dw.data.iter_mut().zip(p.iter()) {
                *d = *d + *s;
            }
        }
        let mut db = Tensor::zeros([1, 1, 1, cout]);
        for s in 0..n {
            for row in dy.data[s * sample_out..(s + 1) * sample_out].chunks_exact(cout) {
                for (d, v) in db.data.iter_mut().zip(row.iter()) {
                    *d = *d + *v;
                }
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    (dx, dw, db)
}

/// 2x2 max pooling, stride 2, no padding. Returns the pooled tensor and the
/// argmax index (0..4) per output element for the backward pass.
pub fn maxpool2_fwd<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [n, h, w, c] = x.shape;
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, ho, wo, c]);
    let mut idx = vec![0u8; n * ho * wo * c];
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = x.at(s, 2 * oy, 2 * ox, ch);
                    let mut which = 0u8;
                    for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x.at(s, 2 * oy + dy, 2 * ox + dx, ch);
                        if v > best {
                            best = v;
                            which = i as u8 + 1;
                        }
                    }
                    let o = out.idx(s, oy, ox, ch);
                    out.data[o] = best;
                    idx[o] = which;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_bwd<T: Scalar>(x_shape: [usize; 4], idx: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x_shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let o = dy.idx(s, oy, ox, ch);
                    let which = idx[o];
                    let (dy_, dx_) = ((which / 2) as usize, (which % 2) as usize);
                    let i = dx.idx(s, 2 * oy + dy_, 2 * ox + dx_, ch);
                    dx.data[i] = dx.data[i] + dy.data[o];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nn_fwd<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, h, w, c] = x.shape;
    let mut out = Tensor::zeros([n, h * factor, w * factor, c]);
    for s in 0..n {
        for y in 0..h * factor {
            let sy = y / factor;
            for xw in 0..w * factor {
                let sx = xw / factor;
                let src = x.idx(s, sy, sx, 0);
                let dst = out.idx(s, y, xw, 0);
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample_nn_bwd<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, h, w, c] = dy.shape;
    assert!(h % factor == 0 && w % factor == 0);
    let mut dx = Tensor::zeros([n, h / factor, w / factor, c]);
    for s in 0..n {
        for y in 0..h {
            for xw in 0..w {
                let src = dy.idx(s, y, xw, 0);
                let dst = dx.idx(s, y / factor, xw / factor, 0);
                for ch in 0..c {
                    dx.data[dst + ch] = dx.data[dst + ch] + dy.data[src + ch];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_c<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, ca] = a.shape;
    let [n2, h2, w2, cb] = b.shape;
    assert_eq!((n, h, w), (n2, h2, w2), "concat_c: spatial mismatch");
    let mut out = Tensor::zeros([n, h, w, ca + cb]);
    for i in 0..n * h * w {
        out.data[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&a.data[i * ca..(i + 1) * ca]);
        out.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
            .copy_from_slice(&b.data[i * cb..(i + 1) * cb]);
    }
    out
}

/// Split channel-concatenated gradient back into the two parts.
pub fn split_c<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, h, w, c] = dy.shape;
    let cb = c - ca;
    let mut da = Tensor::zeros([n, h, w, ca]);
    let mut db = Tensor::zeros([n, h, w, cb]);
    for i in 0..n * h * w {
        da.data[i * ca..(i + 1) * ca].copy_from_slice(&dy.data[i * c..i * c + ca]);
        db.data[i * cb..(i + 1) * cb].copy_from_slice(&dy.data[i * c + ca..(i + 1) * c]);
    }
    (da, db)
}

/// Reflect-pad (mirror without edge repeat) on the bottom/right so that
/// H and W become multiples of `multiple`.
pub fn pad_reflect_to_multiple<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let [n, h, w, c] = x.shape;
    let ph = h.next_multiple_of(multiple);
    let pw = w.next_multiple_of(multiple);
    if ph == h && pw == w {
        return x.clone();
    }
    assert!(ph - h < h && pw - w < w, "image too small to reflect-pad");
    let mut out = Tensor::zeros([n, ph, pw, c]);
    for s in 0..n {
        for y in 0..ph {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for xw in 0..pw {
                let sx = if xw < w { xw } else { 2 * w - 2 - xw };
                let src = x.idx(s, sy, sx, 0);
                let dst = out.idx(s, y, xw, 0);
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

/// Crop to the top-left `h x w` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, xh, xw, c] = x.shape;
    assert!(h <= xh && w <= xw);
    if h == xh && w == xw {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, h, w, c]);
    for s in 0..n {
        for y in 0..h {
            let src = x.idx(s, y, 0, 0);
            let dst = out.idx(s, y, 0, 0);
            out.data[dst..dst + w * c].copy_from_slice(&x.data[src..src + w * c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [n, h, wi, cin] = x.shape;
        let [k, _, _, cout] = w.shape;
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wi, k, stride, pad);
        let mut out = Tensor::zeros([n, ho, wo, cout]);
        for s in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = b.data[co];
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = oy as isize * stride as isize + dy as isize - pad as isize;
                                let ix = ox as isize * stride as isize + dx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(s, iy as usize, ix as usize, ci)
                                        * w.at(dy, dx, ci, co);
                                }
                            }
                        }
                        *out.at_mut(s, oy, ox, co) = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(stride, h, w) in &[(1usize, 7usize, 9usize), (2, 8, 8), (2, 7, 9), (1, 4, 4)] {
            let x = rand_tensor([2, h, w, 3], 1);
            let wt = rand_tensor([3, 3, 3, 5], 2);
            let b = rand_tensor([1, 1, 1, 5], 3);
            let got = conv2d_fwd(&x, &wt, &b, stride, 1);
            let want = naive_conv(&x, &wt, &b, stride, 1);
            assert_eq!(got.shape, want.shape);
            for (g, w_) in got.data.iter().zip(want.data.iter()) {
                assert!((g - w_).abs() < 1e-10, "{g} vs {w_}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = rand_tensor([1, 5, 6, 2], 10);
        let w = rand_tensor([3, 3, 2, 3], 11);
        let b = rand_tensor([1, 1, 1, 3], 12);
        // loss = sum(conv * g) for a fixed random g
        let g = rand_tensor(conv2d_fwd(&x, &w, &b, 1, 1).shape, 13);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_fwd(x, w, b, 1, 1)
                .data
                .iter()
                .zip(g.data.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dx, dw, db) = conv2d_bwd(&x, &w, &g, 1, 1, true, true);
        let (dx, dw, db) = (dx.unwrap(), dw.unwrap(), db.unwrap());
        let eps = 1e-6;
        for i in (0..x.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data[i] += eps;
            let mut wm = w.clone();
            wm.data[i] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - dw.data[i]).abs() < 1e-6, "dw[{i}]: {fd} vs {}", dw.data[i]);
        }
        for i in 0..b.numel() {
            let mut bp = b.clone();
            bp.data[i] += eps;
            let mut bm = b.clone();
            bm.data[i] -= eps;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((fd - db.data[i]).abs() < 1e-6, "db[{i}]");
        }
    }

    #[test]
    fn maxpool_selects_max_and_routes_gradient() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0f64, 5.0, 2.0, 3.0]);
        let (y, idx) = maxpool2_fwd(&x);
        assert_eq!(y.data, vec![5.0]);
        let dy = Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]);
        let dx = maxpool2_bwd(x.shape, &idx, &dy);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::from_vec([1, 1, 2, 1], vec![3.0f64, 4.0]);
        let y = upsample_nn_fwd(&x, 2);
        assert_eq!(y.shape, [1, 2, 4, 1]);
        assert_eq!(y.data, vec![3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let dx = upsample_nn_bwd(&y, 2);
        assert_eq!(dx.data, vec![12.0, 16.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = rand_tensor([2, 3, 3, 2], 20);
        let b = rand_tensor([2, 3, 3, 4], 21);
        let c = concat_c(&a, &b);
        assert_eq!(c.shape, [2, 3, 3, 6]);
        let (da, db) = split_c(&c, 2);
        assert_eq!(da.data, a.data);
        assert_eq!(db.data, b.data);
    }

    #[test]
    fn reflect_pad_mirrors_and_crops_back() {
        let x = Tensor::from_vec([1, 2, 3, 1], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = pad_reflect_to_multiple(&x, 4);
        assert_eq!(p.shape, [1, 4, 4, 1]);
        // row 2 mirrors row 0, col 3 mirrors col 1
        assert_eq!(p.at(0, 2, 0, 0), 1.0);
        assert_eq!(p.at(0, 0, 3, 0), 2.0);
        let c = crop(&p, 2, 3);
        assert_eq!(c.data, x.data);
    }
}
