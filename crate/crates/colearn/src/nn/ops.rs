//! Per-layer forward/backward kernels. Convolution goes through im2col plus
//! GEMM; everything is single-threaded and deterministic so results never
//! depend on worker count.

use super::Volume;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Element, Tensor};

pub(crate) struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn new(
        input: Volume,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let in_h = input.height;
        let in_w = input.width;
        ConvDims {
            in_channels: input.channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Lays out all receptive fields as columns: output is
/// `(C*k*k, B*out_h*out_w)` row-major, column index `((b*out_h + oy)*out_w + ox)`.
pub(crate) fn im2col<E: Element>(x: &[E], batch: usize, d: &ConvDims) -> Tensor<E> {
    let n_cols = batch * d.out_h * d.out_w;
    let mut cols = Tensor::zeros(&[d.patch_len(), n_cols]);
    let data = cols.data_mut();
    let plane = d.in_h * d.in_w;
    let img = d.in_channels * plane;
    for c in 0..d.in_channels {
        for ky in 0..d.kernel {
            for kx in 0..d.kernel {
                let row = (c * d.kernel + ky) * d.kernel + kx;
                let out_row = &mut data[row * n_cols..(row + 1) * n_cols];
                let mut col = 0usize;
                for b in 0..batch {
                    let base = b * img + c * plane;
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            col += d.out_w;
                            continue;
                        }
                        let row_base = base + iy as usize * d.in_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix >= 0 && ix < d.in_w as isize {
                                out_row[col] = x[row_base + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Accumulates column gradients back into input positions (inverse of im2col).
pub(crate) fn col2im<E: Element>(dcols: &[E], batch: usize, d: &ConvDims, dx: &mut [E]) {
    let n_cols = batch * d.out_h * d.out_w;
    let plane = d.in_h * d.in_w;
    let img = d.in_channels * plane;
    for c in 0..d.in_channels {
        for ky in 0..d.kernel {
            for kx in 0..d.kernel {
                let row = (c * d.kernel + ky) * d.kernel + kx;
                let in_row = &dcols[row * n_cols..(row + 1) * n_cols];
                let mut col = 0usize;
                for b in 0..batch {
                    let base = b * img + c * plane;
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            col += d.out_w;
                            continue;
                        }
                        let row_base = base + iy as usize * d.in_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix >= 0 && ix < d.in_w as isize {
                                dx[row_base + ix as usize] += in_row[col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output `(B, OC, out_h, out_w)` and the im2col matrix, which the
/// backward pass reuses for the weight gradient.
pub(crate) fn conv_forward<E: Element>(
    x: &Tensor<E>,
    batch: usize,
    d: &ConvDims,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let cols = im2col(x.data(), batch, d);
    let n_cols = batch * d.out_h * d.out_w;
    let mut out_mat = vec![E::zero(); d.out_channels * n_cols];
    matmul_nn(d.out_channels, d.patch_len(), n_cols, weight.data(), cols.data(), &mut out_mat);

    let plane = d.out_h * d.out_w;
    let mut y = Tensor::zeros(&[batch, d.out_channels, d.out_h, d.out_w]);
    let ydata = y.data_mut();
    for o in 0..d.out_channels {
        let bias_o = bias.data()[o];
        let src = &out_mat[o * n_cols..(o + 1) * n_cols];
        for b in 0..batch {
            let dst = &mut ydata[(b * d.out_channels + o) * plane..(b * d.out_channels + o + 1) * plane];
            let s = &src[b * plane..(b + 1) * plane];
            for (dv, &sv) in dst.iter_mut().zip(s) {
                *dv = sv + bias_o;
            }
        }
    }
    (y, cols)
}

/// Gradients for weights, bias, and (unless `need_dx` is false) the input.
pub(crate) fn conv_backward<E: Element>(
    d_out: &Tensor<E>,
    cols: &Tensor<E>,
    batch: usize,
    d: &ConvDims,
    weight: &Tensor<E>,
    need_dx: bool,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let n_cols = batch * d.out_h * d.out_w;
    let plane = d.out_h * d.out_w;

    // Gather (B, OC, oh, ow) into (OC, B*oh*ow) matching the im2col column order.
    let mut d_mat = vec![E::zero(); d.out_channels * n_cols];
    let src = d_out.data();
    for o in 0..d.out_channels {
        let dst = &mut d_mat[o * n_cols..(o + 1) * n_cols];
        for b in 0..batch {
            let s = &src[(b * d.out_channels + o) * plane..(b * d.out_channels + o + 1) * plane];
            dst[b * plane..(b + 1) * plane].copy_from_slice(s);
        }
    }

    let mut d_weight = Tensor::zeros_like(weight);
    matmul_nt(
        d.out_channels,
        n_cols,
        d.patch_len(),
        &d_mat,
        cols.data(),
        d_weight.data_mut(),
    );

    let mut d_bias = Tensor::zeros(&[d.out_channels]);
    for o in 0..d.out_channels {
        d_bias.data_mut()[o] = d_mat[o * n_cols..(o + 1) * n_cols].iter().copied().sum();
    }

    let dx = if need_dx {
        let mut dcols = vec![E::zero(); d.patch_len() * n_cols];
        matmul_tn(d.patch_len(), d.out_channels, n_cols, weight.data(), &d_mat, &mut dcols);
        let mut dx = Tensor::zeros(&[batch, d.in_channels, d.in_h, d.in_w]);
        col2im(&dcols, batch, d, dx.data_mut());
        Some(dx)
    } else {
        None
    };
    (d_weight, d_bias, dx)
}

/// `y = x W^T + b` over a batch; `x` is read as `(B, inputs)`.
pub(crate) fn dense_forward<E: Element>(
    x: &Tensor<E>,
    batch: usize,
    inputs: usize,
    outputs: usize,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Tensor<E> {
    let mut y = Tensor::zeros(&[batch, outputs]);
    matmul_nt(batch, inputs, outputs, x.data(), weight.data(), y.data_mut());
    let ydata = y.data_mut();
    for b in 0..batch {
        for (o, &bo) in bias.data().iter().enumerate() {
            ydata[b * outputs + o] += bo;
        }
    }
    y
}

pub(crate) fn dense_backward<E: Element>(
    d_out: &Tensor<E>,
    x: &Tensor<E>,
    batch: usize,
    inputs: usize,
    outputs: usize,
    weight: &Tensor<E>,
    need_dx: bool,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let mut d_weight = Tensor::zeros(&[outputs, inputs]);
    matmul_tn(outputs, batch, inputs, d_out.data(), x.data(), d_weight.data_mut());

    let mut d_bias = Tensor::zeros(&[outputs]);
    let db = d_bias.data_mut();
    for b in 0..batch {
        for o in 0..outputs {
            db[o] += d_out.data()[b * outputs + o];
        }
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[batch, inputs]);
        matmul_nn(batch, outputs, inputs, d_out.data(), weight.data(), dx.data_mut());
        Some(dx)
    } else {
        None
    };
    (d_weight, d_bias, dx)
}

/// Max pooling; ties go to the first (lowest-index) maximum so the backward
/// routing is deterministic. Returns output and per-output argmax indices
/// into the input buffer.
pub(crate) fn pool_forward<E: Element>(
    x: &Tensor<E>,
    batch: usize,
    input: Volume,
    kernel: usize,
    stride: usize,
) -> (Tensor<E>, Vec<u32>) {
    let out_h = (input.height - kernel) / stride + 1;
    let out_w = (input.width - kernel) / stride + 1;
    let mut y = Tensor::zeros(&[batch, input.channels, out_h, out_w]);
    let mut argmax = vec![0u32; batch * input.channels * out_h * out_w];
    let plane = input.height * input.width;
    let xdata = x.data();
    let ydata = y.data_mut();
    let mut out_idx = 0usize;
    for b in 0..batch {
        for c in 0..input.channels {
            let base = (b * input.channels + c) * plane;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best_idx = base + oy * stride * input.width + ox * stride;
                    let mut best = xdata[best_idx];
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * input.width + ox * stride;
                        for kx in 0..kernel {
                            let v = xdata[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    ydata[out_idx] = best;
                    argmax[out_idx] = best_idx as u32;
                    out_idx += 1;
                }
            }
        }
    }
    (y, argmax)
}

pub(crate) fn pool_backward<E: Element>(
    d_out: &Tensor<E>,
    argmax: &[u32],
    batch: usize,
    input: Volume,
) -> Tensor<E> {
    let mut dx = Tensor::zeros(&[batch, input.channels, input.height, input.width]);
    let dxd = dx.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        dxd[idx as usize] += *g;
    }
    dx
}

/// In-place ReLU; the returned mask marks strictly positive entries.
pub(crate) fn relu_forward<E: Element>(x: &mut Tensor<E>) -> Vec<bool> {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            if *v > E::zero() {
                true
            } else {
                *v = E::zero();
                false
            }
        })
        .collect()
}

pub(crate) fn relu_backward<E: Element>(d_out: &mut Tensor<E>, active: &[bool]) {
    for (g, &a) in d_out.data_mut().iter_mut().zip(active) {
        if !a {
            *g = E::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_roundtrip_counts_window_coverage() {
        // col2im(im2col(x)) multiplies each input cell by the number of
        // windows covering it; with k = s = 1 and no padding that is exactly 1.
        let d = ConvDims::new(Volume::new(2, 3, 3), 4, 1, 1, 0);
        let x: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let cols = im2col(&x, 1, &d);
        let mut back = vec![0.0f64; 18];
        col2im(cols.data(), 1, &d, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn conv_forward_matches_direct_correlation_loop() {
        // 1 sample, 2 in channels 4x4, 3 out channels, k=3, s=1, p=1.
        let vol = Volume::new(2, 4, 4);
        let d = ConvDims::new(vol, 3, 3, 1, 1);
        let mut rng = 1234u64;
        let mut next = || {
            rng = crate::seeds::splitmix64(rng);
            (rng as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|_| next()).collect()).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| next()).collect()).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let (y, _) = conv_forward(&x, 1, &d, &w, &b);

        for o in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                                    acc += x.data()[(c * 4 + iy as usize) * 4 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 4 + oy) * 4 + ox];
                    assert!((got - acc).abs() < 1e-12, "o={o} oy={oy} ox={ox}: {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_first_maximum() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 1.0, 1.0, 1.0]).unwrap();
        let (y, argmax) = pool_forward(&x, 1, Volume::new(1, 2, 2), 2, 2);
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);

        let d_out = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0f64]).unwrap();
        let dx = pool_backward(&d_out, &argmax, 1, Volume::new(1, 2, 2));
        assert_eq!(dx.data(), &[5.0, 0.0, 0.0, 0.0]);
    }
}
