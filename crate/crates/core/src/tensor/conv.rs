//! im2col convolution kernels (NCHW activations, OIHW weights).

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(Error::shape("conv2d", input, weight));
        }
        let out_h = conv_output_size(input[2], weight[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", input, weight))?;
        let out_w = conv_output_size(input[3], weight[3], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", input, weight))?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel_h: weight[2],
            kernel_w: weight[3],
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the unfolded matrix (`C * kh * kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds `x` into a `[C*kh*kw, N*Ho*Wo]` matrix.
pub(crate) fn im2col<T: Real>(geo: &ConvGeometry, x: &[T]) -> Vec<T> {
    let cols = geo.batch * geo.out_plane();
    let mut col = vec![T::zero(); geo.patch_len() * cols];
    let plane = geo.height * geo.width;
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..geo.batch {
                    let src = &x[(n * geo.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[n * geo.out_plane()..(n + 1) * geo.out_plane()];
                    for oh in 0..geo.out_h {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= geo.height as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * geo.width..][..geo.width];
                        let dst_seg = &mut dst[oh * geo.out_w..(oh + 1) * geo.out_w];
                        for (ow, d) in dst_seg.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < geo.width as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `[C*kh*kw, N*Ho*Wo]` back into NCHW.
pub(crate) fn col2im<T: Real>(geo: &ConvGeometry, col: &[T]) -> Vec<T> {
    let cols = geo.batch * geo.out_plane();
    let plane = geo.height * geo.width;
    let mut x = vec![T::zero(); geo.batch * geo.in_channels * plane];
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..geo.batch {
                    let dst = &mut x[(n * geo.in_channels + c) * plane..][..plane];
                    let src = &src_row[n * geo.out_plane()..(n + 1) * geo.out_plane()];
                    for oh in 0..geo.out_h {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= geo.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * geo.width..][..geo.width];
                        for ow in 0..geo.out_w {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < geo.width as isize {
                                dst_row[iw as usize] = dst_row[iw as usize] + src[oh * geo.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, N*P]` -> `[N, O, P]`
pub(crate) fn channel_major_to_batch<T: Real>(geo: &ConvGeometry, src: &[T]) -> Vec<T> {
    let (o, n, p) = (geo.out_channels, geo.batch, geo.out_plane());
    let mut out = vec![T::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..][..p].copy_from_slice(&src[oc * n * p + b * p..][..p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`
pub(crate) fn batch_to_channel_major<T: Real>(geo: &ConvGeometry, src: &[T]) -> Vec<T> {
    let (o, n, p) = (geo.out_channels, geo.batch, geo.out_plane());
    let mut out = vec![T::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[oc * n * p + b * p..][..p].copy_from_slice(&src[(b * o + oc) * p..][..p]);
        }
    }
    out
}

pub(crate) fn forward_raw<T: Real>(geo: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let col = im2col(geo, x);
    let k = geo.patch_len();
    let cols = geo.batch * geo.out_plane();
    let mut tmp = vec![T::zero(); geo.out_channels * cols];
    T::gemm(
        geo.out_channels,
        k,
        cols,
        T::one(),
        w,
        k as isize,
        1,
        &col,
        cols as isize,
        1,
        T::zero(),
        &mut tmp,
        cols as isize,
        1,
    );
    channel_major_to_batch(geo, &tmp)
}

/// Returns `(d_input, d_weight)`.
pub(crate) fn backward_raw<T: Real>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input_grad: bool,
    need_weight_grad: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = geo.patch_len();
    let cols = geo.batch * geo.out_plane();
    let dyp = batch_to_channel_major(geo, dy);
    let dw = need_weight_grad.then(|| {
        let col = im2col(geo, x);
        let mut dw = vec![T::zero(); geo.out_channels * k];
        // dW = dYp * col^T
        T::gemm(
            geo.out_channels,
            cols,
            k,
            T::one(),
            &dyp,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            T::zero(),
            &mut dw,
            k as isize,
            1,
        );
        dw
    });
    let dx = need_input_grad.then(|| {
        let mut dcol = vec![T::zero(); k * cols];
        // dcol = W^T * dYp
        T::gemm(
            k,
            geo.out_channels,
            cols,
            T::one(),
            w,
            1,
            k as isize,
            &dyp,
            cols as isize,
            1,
            T::zero(),
            &mut dcol,
            cols as isize,
            1,
        );
        col2im(geo, &dcol)
    });
    (dx, dw)
}

/// Graph-free convolution, used by inference-only paths.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    Tensor::new(&geo.output_shape(), forward_raw(&geo, input.data(), weight.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], s: usize, p: usize) -> Vec<f64> {
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let ih = (i * s + a) as isize - p as isize;
                                    let iw = (j * s + bb) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + ih as usize) * wd + iw as usize]
                                        * w[((oc * c + ic) * kh + a) * kw + bb];
                                }
                            }
                        }
                        out[((b * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_conv() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::<f32>::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(xs, ws, s, p) in &[
            ([1, 2, 4, 4], [3, 2, 3, 3], 1, 1),
            ([2, 3, 7, 5], [4, 3, 3, 3], 2, 1),
            ([2, 4, 6, 6], [5, 4, 1, 1], 2, 0),
        ] {
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expected = naive(&x, xs, &w, ws, s, p);
            let xt = Tensor::<f32>::from_f64(&xs, &x).unwrap();
            let wt = Tensor::<f32>::from_f64(&ws, &w).unwrap();
            let got = conv2d_forward(&xt, &wt, s, p).unwrap();
            for (g, e) in got.data().iter().zip(&expected) {
                assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let geo = ConvGeometry::new(&[2, 3, 5, 6], &[4, 3, 3, 3], 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2 * 3 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..geo.patch_len() * 2 * geo.out_plane()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = im2col(&geo, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&geo, &y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_channel_mismatch() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[3, 3, 3, 3], 1, 1).is_err());
    }
}
