//! Raw numeric kernels used by the autodiff graph.
//!
//! Everything here works on flat row-major slices with explicit extents.
//! The graph layer owns shape checking; these functions assume it passed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if c != kc {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            batch: b,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            k_h: kh,
            k_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output positions `lo..hi` along one axis whose input tap
    /// `o * stride + k - padding` lands inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if extent + p < k + 1 {
            return (0, 0);
        }
        let hi = ((extent - 1 + p - k) / s + 1).min(out);
        (lo.min(hi), hi)
    }

    fn rows(&self, ky: usize) -> (usize, usize) {
        self.valid_range(ky, self.in_h, self.out_h)
    }

    fn cols(&self, kx: usize) -> (usize, usize) {
        self.valid_range(kx, self.in_w, self.out_w)
    }
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let (s, p) = (g.stride, g.padding);
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let out_base = (b * g.out_channels + o) * out_plane;
            let dst = &mut out[out_base..out_base + out_plane];
            for c in 0..g.in_channels {
                let src = &input[(b * g.in_channels + c) * in_plane..][..in_plane];
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for ky in 0..g.k_h {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.k_w {
                        let w = kernel[kbase + ky * g.k_w + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.cols(kx);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                            let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            if s == 1 {
                                let ix0 = x0 + kx - p;
                                for (d, &v) in drow[x0..x1].iter_mut().zip(&srow[ix0..ix0 + (x1 - x0)]) {
                                    *d += w * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] += w * srow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut grad_in = vec![0.0; g.batch * g.in_channels * in_plane];
    let (s, p) = (g.stride, g.padding);
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(b * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let gi_base = (b * g.in_channels + c) * in_plane;
                let gi = &mut grad_in[gi_base..gi_base + in_plane];
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for ky in 0..g.k_h {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.k_w {
                        let w = kernel[kbase + ky * g.k_w + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.cols(kx);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                            let irow = &mut gi[iy * g.in_w..(iy + 1) * g.in_w];
                            if s == 1 {
                                let ix0 = x0 + kx - p;
                                for (d, &v) in irow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                    *d += w * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    irow[ox * s + kx - p] += w * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of the convolution output with respect to the kernel.
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut grad_k = vec![0.0; g.out_channels * g.in_channels * g.k_h * g.k_w];
    let (s, p) = (g.stride, g.padding);
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(b * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &input[(b * g.in_channels + c) * in_plane..][..in_plane];
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for ky in 0..g.k_h {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.k_w {
                        let (x0, x1) = g.cols(kx);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                            let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in x0..x1 {
                                acc += grow[ox] * srow[ox * s + kx - p];
                            }
                        }
                        grad_k[kbase + ky * g.k_w + kx] += acc;
                    }
                }
            }
        }
    }
    grad_k
}

/// Non-overlapping `factor`×`factor` mean pooling. Extents must divide evenly.
pub fn avg_pool_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avg_pool",
            format!("extent {h}x{w} is not divisible by pooling factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let src = input.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                d[(y / factor) * ow + x / factor] += s[y * w + x] * scale;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avg_pool_backward(grad_out: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let planes = in_shape[0] * in_shape[1];
    let go = grad_out.data();
    let mut gi = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let g = &go[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut gi[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = g[(y / factor) * ow + x / factor] * scale;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gi).expect("pool backward shape")
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("gap", "spatial extents must be at least 1"));
    }
    let plane = h * w;
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![b, c], data)
}
