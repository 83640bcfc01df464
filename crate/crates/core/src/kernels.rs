//! Forward and backward loops for the heavy operators. Each output buffer is
//! split into disjoint chunks handed to [`crate::par`], and every reduction
//! runs in a fixed order inside its chunk, so both feature builds agree
//! bit-for-bit.

use crate::par;

/// Geometry of a causal 1-D convolution over `[batch, c_in, len]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
}

/// `y[b,o,t] = bias[o] + Σ_c Σ_j w[o,c,j] · x[b,c,t − j·dilation]`, zero for
/// negative time.
pub fn conv1d_causal_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: Conv1dDims) -> Vec<f64> {
    let Conv1dDims { batch, c_in, c_out, len, kernel, dilation } = d;
    let mut y = vec![0.0; batch * c_out * len];
    par::for_each_chunk(&mut y, c_out * len, |b, yb| {
        let xb = &x[b * c_in * len..(b + 1) * c_in * len];
        for o in 0..c_out {
            let yo = &mut yb[o * len..(o + 1) * len];
            if let Some(bias) = bias {
                yo.fill(bias[o]);
            }
            for c in 0..c_in {
                let xc = &xb[c * len..(c + 1) * len];
                let wr = &w[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                for (j, &wv) in wr.iter().enumerate() {
                    let shift = j * dilation;
                    if shift >= len {
                        break;
                    }
                    for (yv, xv) in yo[shift..].iter_mut().zip(&xc[..len - shift]) {
                        *yv += wv * xv;
                    }
                }
            }
        }
    });
    y
}

pub fn conv1d_causal_backward_input(gy: &[f64], w: &[f64], d: Conv1dDims) -> Vec<f64> {
    let Conv1dDims { batch, c_in, c_out, len, kernel, dilation } = d;
    let mut dx = vec![0.0; batch * c_in * len];
    par::for_each_chunk(&mut dx, c_in * len, |b, dxb| {
        let gb = &gy[b * c_out * len..(b + 1) * c_out * len];
        for o in 0..c_out {
            let go = &gb[o * len..(o + 1) * len];
            for c in 0..c_in {
                let dxc = &mut dxb[c * len..(c + 1) * len];
                let wr = &w[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                for (j, &wv) in wr.iter().enumerate() {
                    let shift = j * dilation;
                    if shift >= len {
                        break;
                    }
                    for (dv, gv) in dxc[..len - shift].iter_mut().zip(&go[shift..]) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    });
    dx
}

pub fn conv1d_causal_backward_weight(gy: &[f64], x: &[f64], d: Conv1dDims) -> Vec<f64> {
    let Conv1dDims { batch, c_in, c_out, len, kernel, dilation } = d;
    let mut dw = vec![0.0; c_out * c_in * kernel];
    par::for_each_chunk(&mut dw, c_in * kernel, |o, dwo| {
        for b in 0..batch {
            let go = &gy[(b * c_out + o) * len..(b * c_out + o + 1) * len];
            for c in 0..c_in {
                let xc = &x[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                for j in 0..kernel {
                    let shift = j * dilation;
                    if shift >= len {
                        break;
                    }
                    let s: f64 = go[shift..].iter().zip(&xc[..len - shift]).map(|(g, x)| g * x).sum();
                    dwo[c * kernel + j] += s;
                }
            }
        }
    });
    dw
}

/// Sums `gy` over every axis except the channel axis of `[batch, ch, inner]`.
pub fn channel_sums(gy: &[f64], batch: usize, ch: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += gy[(b * ch + c) * inner..(b * ch + c + 1) * inner].iter().sum::<f64>();
        }
    }
    out
}

/// Geometry of a 2-D convolution over `[batch, c_in, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output positions `o` along one axis whose input `o·stride + k − pad`
    /// falls inside `0..n`.
    fn valid(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let mut lo = 0isize;
        while lo < n_out as isize && lo * s + off < 0 {
            lo += 1;
        }
        let mut hi = n_out as isize;
        while hi > lo && (hi - 1) * s + off >= n as isize {
            hi -= 1;
        }
        (lo as usize, hi as usize)
    }
}

impl Conv2dDims {
    fn taps(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// A 1×1, stride-1, unpadded kernel reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Column matrix `[c_in·kh·kw, out_h·out_w]` of one batch item.
    fn im2col(&self, xb: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_h(), self.out_w());
        let (s, p, in_plane) = (self.stride, self.pad, self.h * self.w);
        let mut cols = vec![0.0; self.taps() * ho * wo];
        for c in 0..self.c_in {
            let xc = &xb[c * in_plane..(c + 1) * in_plane];
            for ki in 0..self.kh {
                let (oh_lo, oh_hi) = self.valid(ki, self.h, ho);
                for kj in 0..self.kw {
                    let (ow_lo, ow_hi) = self.valid(kj, self.w, wo);
                    let row = &mut cols[((c * self.kh + ki) * self.kw + kj) * ho * wo..][..ho * wo];
                    for oh in oh_lo..oh_hi {
                        let xrow = &xc[(oh * s + ki - p) * self.w..][..self.w];
                        for ow in ow_lo..ow_hi {
                            row[oh * wo + ow] = xrow[ow * s + kj - p];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a column matrix back onto the input grid.
    fn col2im(&self, cols: &[f64], dxb: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let (s, p, in_plane) = (self.stride, self.pad, self.h * self.w);
        for c in 0..self.c_in {
            let dxc = &mut dxb[c * in_plane..(c + 1) * in_plane];
            for ki in 0..self.kh {
                let (oh_lo, oh_hi) = self.valid(ki, self.h, ho);
                for kj in 0..self.kw {
                    let (ow_lo, ow_hi) = self.valid(kj, self.w, wo);
                    let row = &cols[((c * self.kh + ki) * self.kw + kj) * ho * wo..][..ho * wo];
                    for oh in oh_lo..oh_hi {
                        let xrow = &mut dxc[(oh * s + ki - p) * self.w..][..self.w];
                        for ow in ow_lo..ow_hi {
                            xrow[ow * s + kj - p] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: Conv2dDims) -> Vec<f64> {
    let out_plane = d.out_h() * d.out_w();
    let in_len = d.c_in * d.h * d.w;
    let taps = d.taps();
    let mut y = vec![0.0; d.batch * d.c_out * out_plane];
    par::for_each_chunk(&mut y, d.c_out * out_plane, |b, yb| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let owned;
        let cols: &[f64] = if d.is_pointwise() {
            xb
        } else {
            owned = d.im2col(xb);
            &owned
        };
        for (o, yo) in yb.chunks_mut(out_plane).enumerate() {
            if let Some(bias) = bias {
                yo.fill(bias[o]);
            }
            for (k, &wv) in w[o * taps..(o + 1) * taps].iter().enumerate() {
                if wv != 0.0 {
                    axpy(yo, wv, &cols[k * out_plane..(k + 1) * out_plane]);
                }
            }
        }
    });
    y
}

pub fn conv2d_backward_input(gy: &[f64], w: &[f64], d: Conv2dDims) -> Vec<f64> {
    let out_plane = d.out_h() * d.out_w();
    let in_len = d.c_in * d.h * d.w;
    let taps = d.taps();
    let mut dx = vec![0.0; d.batch * in_len];
    par::for_each_chunk(&mut dx, in_len, |b, dxb| {
        let gb = &gy[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
        let mut owned = Vec::new();
        let dcols: &mut [f64] = if d.is_pointwise() {
            dxb
        } else {
            owned = vec![0.0; taps * out_plane];
            &mut owned
        };
        for (o, go) in gb.chunks(out_plane).enumerate() {
            for (k, &wv) in w[o * taps..(o + 1) * taps].iter().enumerate() {
                if wv != 0.0 {
                    axpy(&mut dcols[k * out_plane..(k + 1) * out_plane], wv, go);
                }
            }
        }
        if !d.is_pointwise() {
            d.col2im(&owned, dxb);
        }
    });
    dx
}

pub fn conv2d_backward_weight(gy: &[f64], x: &[f64], d: Conv2dDims) -> Vec<f64> {
    let out_plane = d.out_h() * d.out_w();
    let in_len = d.c_in * d.h * d.w;
    let taps = d.taps();
    let mut dw = vec![0.0; d.c_out * taps];
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let owned;
        let cols: &[f64] = if d.is_pointwise() {
            xb
        } else {
            owned = d.im2col(xb);
            &owned
        };
        let gb = &gy[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
        par::for_each_chunk(&mut dw, taps, |o, dwo| {
            let go = &gb[o * out_plane..(o + 1) * out_plane];
            for (k, dv) in dwo.iter_mut().enumerate() {
                *dv += dot(go, &cols[k * out_plane..(k + 1) * out_plane]);
            }
        });
    }
    dw
}

/// `y[b,o] = bias[o] + Σ_i w[o,i] · x[b,i]`.
pub fn dense_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * n_out];
    par::for_each_chunk(&mut y, n_out, |b, yb| {
        let xb = &x[b * n_in..(b + 1) * n_in];
        for (o, yv) in yb.iter_mut().enumerate() {
            let wr = &w[o * n_in..(o + 1) * n_in];
            let dot: f64 = wr.iter().zip(xb).map(|(a, b)| a * b).sum();
            *yv = dot + bias.map_or(0.0, |bs| bs[o]);
        }
    });
    y
}

pub fn dense_backward_input(gy: &[f64], w: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut dx = vec![0.0; batch * n_in];
    par::for_each_chunk(&mut dx, n_in, |b, dxb| {
        for o in 0..n_out {
            let g = gy[b * n_out + o];
            if g == 0.0 {
                continue;
            }
            for (dv, wv) in dxb.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *dv += g * wv;
            }
        }
    });
    dx
}

pub fn dense_backward_weight(gy: &[f64], x: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut dw = vec![0.0; n_out * n_in];
    par::for_each_chunk(&mut dw, n_in, |o, dwo| {
        for b in 0..batch {
            let g = gy[b * n_out + o];
            if g == 0.0 {
                continue;
            }
            for (dv, xv) in dwo.iter_mut().zip(&x[b * n_in..(b + 1) * n_in]) {
                *dv += g * xv;
            }
        }
    });
    dw
}

/// Per-channel mean and biased variance of `[batch, ch, inner]`.
pub fn channel_moments(x: &[f64], batch: usize, ch: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * inner) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * ch + c) * inner..(b * ch + c + 1) * inner].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[(b * ch + c) * inner..(b * ch + c + 1) * inner]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_matches_direct_sum() {
        // two channels in, one out, dilation 2
        let d = Conv1dDims { batch: 1, c_in: 2, c_out: 1, len: 5, kernel: 2, dilation: 2 };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 0.5, 0.0, -1.0, 2.0, 1.0];
        let w = [1.0, 10.0, -1.0, 0.0];
        let y = conv1d_causal_forward(&x, &w, Some(&[0.25]), d);
        let mut expect = vec![0.25; 5];
        for t in 0..5 {
            expect[t] += x[t] - x[5 + t];
            if t >= 2 {
                expect[t] += 10.0 * x[t - 2];
            }
        }
        assert_eq!(y, expect);
    }

    #[test]
    fn conv2d_stride_two_shape_and_value() {
        let d = Conv2dDims { batch: 1, c_in: 1, c_out: 1, h: 4, w: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        assert_eq!((d.out_h(), d.out_w()), (2, 2));
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let w = vec![1.0; 9];
        let y = conv2d_forward(&x, &w, None, d);
        // top-left output sees rows 0..2, cols 0..2 (padding elsewhere)
        assert_eq!(y[0], 0.0 + 1.0 + 4.0 + 5.0);
        // bottom-right sees rows 1..4, cols 1..4
        let br: f64 = [5, 6, 7, 9, 10, 11, 13, 14, 15].iter().map(|&i| i as f64).sum();
        assert_eq!(y[3], br);
    }

    fn naive_conv2d(x: &[f64], w: &[f64], d: Conv2dDims, gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ho, wo) = (d.out_h(), d.out_w());
        let mut y = vec![0.0; d.batch * d.c_out * ho * wo];
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for b in 0..d.batch {
            for o in 0..d.c_out {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let yi = ((b * d.c_out + o) * ho + oh) * wo + ow;
                        for c in 0..d.c_in {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * d.c_in + c) * d.h + ih as usize) * d.w + iw as usize;
                                    let wi = ((o * d.c_in + c) * d.kh + ki) * d.kw + kj;
                                    y[yi] += w[wi] * x[xi];
                                    dx[xi] += w[wi] * gy[yi];
                                    dw[wi] += x[xi] * gy[yi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, dx, dw)
    }

    #[test]
    fn conv2d_kernels_match_direct_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let k = [1, 3][rng.gen_range(0..2)];
            let d = Conv2dDims {
                batch: rng.gen_range(1..3),
                c_in: rng.gen_range(1..4),
                c_out: rng.gen_range(1..4),
                h: rng.gen_range(k..7),
                w: rng.gen_range(k..7),
                kh: k,
                kw: k,
                stride: rng.gen_range(1..3),
                pad: if k == 3 { rng.gen_range(0..2) } else { 0 },
            };
            let x: Vec<f64> = (0..d.batch * d.c_in * d.h * d.w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d.c_out * d.c_in * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gy: Vec<f64> = (0..d.batch * d.c_out * d.out_h() * d.out_w()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (y, dx, dw) = naive_conv2d(&x, &w, d, &gy);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&conv2d_forward(&x, &w, None, d), &y), "{d:?}");
            assert!(close(&conv2d_backward_input(&gy, &w, d), &dx), "{d:?}");
            assert!(close(&conv2d_backward_weight(&gy, &x, d), &dw), "{d:?}");
        }
    }
}
