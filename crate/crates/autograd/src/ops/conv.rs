use std::borrow::Cow;

use super::linalg::{gemm, Layout};
use crate::{Tensor, Var};

/// Kernel, stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    /// Cubic `k x k x k` kernel with the same stride and padding on each axis.
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], pad: [pad; 3] }
    }

    /// Planar `k x k` kernel, expressed with a unit depth axis.
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = dims[a] + 2 * self.pad[a];
            assert!(span >= self.kernel[a], "conv: kernel larger than padded input");
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

struct Geometry {
    c: usize,
    dims: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.spec.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    fn in_len(&self) -> usize {
        self.c * self.dims.iter().product::<usize>()
    }

    /// Visits every (row, col, input offset) triple whose input position
    /// falls inside the unpadded volume.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out;
        let [kd, kh, kw] = self.spec.kernel;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.pad;
        let l = self.cols();
        for c in 0..self.c {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        let base = row * l;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = ((c * d + iz as usize) * h + iy as usize) * w;
                                let out_row = base + (oz * oh + oy) * ow;
                                // Output x range whose input x lies in [0, w).
                                let lo = if pw > kx { (pw - kx).div_ceil(sw) } else { 0 };
                                let hi_num = w as isize - 1 + pw as isize - kx as isize;
                                if hi_num < 0 {
                                    continue;
                                }
                                let hi = ((hi_num as usize) / sw + 1).min(ow);
                                f(out_row + lo, in_row + lo * sw + kx - pw, hi.saturating_sub(lo), sw);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        if self.spec.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|dst, src, len, stride| {
            if stride == 1 {
                cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for t in 0..len {
                    cols[dst + t] = x[src + t * stride];
                }
            }
        });
        Cow::Owned(cols)
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        if self.spec.is_pointwise() {
            for (a, b) in dx.iter_mut().zip(cols) {
                *a += b;
            }
            return;
        }
        self.for_each_tap(|src, dst, len, stride| {
            for t in 0..len {
                dx[dst + t * stride] += cols[src + t];
            }
        });
    }
}

fn split_5d(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match shape {
        [n, c, d, h, w] => (*n, *c, [*d, *h, *w]),
        [n, c, h, w] => (*n, *c, [1, *h, *w]),
        _ => panic!("convolution input must be [N, C, H, W] or [N, C, D, H, W], got {shape:?}"),
    }
}

impl<'g> Var<'g> {
    /// Cross-correlation of `[N, C, D, H, W]` (or `[N, C, H, W]` with a planar
    /// spec) with weights `[O, C, kd, kh, kw]` (or `[O, C, kh, kw]`).
    pub fn conv(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, spec: ConvSpec) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let planar = x.ndim() == 4;
        let (n, c, dims) = split_5d(x.shape());
        let o = wt.shape()[0];
        let geo = Geometry { c, dims, out: spec.out_dims(dims), spec };
        assert_eq!(wt.numel(), o * geo.rows(), "conv weight shape {:?} mismatches input", wt.shape());
        if planar {
            assert_eq!(spec.kernel[0], 1, "planar input needs a unit depth kernel");
        }
        let (ck, l, in_len) = (geo.rows(), geo.cols(), geo.in_len());
        let bias_v = bias.map(|b| b.value());
        let mut out = vec![0.0; n * o * l];
        for i in 0..n {
            let cols = geo.im2col(&x.data()[i * in_len..(i + 1) * in_len]);
            let dst = &mut out[i * o * l..(i + 1) * o * l];
            gemm(o, ck, l, 1.0, wt.data(), Layout::rm(ck), &cols, Layout::rm(l), 0.0, dst, Layout::rm(l));
            if let Some(b) = &bias_v {
                for (oc, row) in dst.chunks_mut(l).enumerate() {
                    let bv = b.data()[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out_shape: Vec<usize> = if planar {
            vec![n, o, geo.out[1], geo.out[2]]
        } else {
            vec![n, o, geo.out[0], geo.out[1], geo.out[2]]
        };
        let has_bias = bias.is_some();
        let mut inputs = vec![*self, *weight];
        if let Some(b) = bias {
            inputs.push(*b);
        }
        self.graph().custom(&inputs, Tensor::new(&out_shape, out), move |ctx| {
            let (x, wt, g) = (ctx.input(0), ctx.input(1), ctx.grad.data());
            let mut dx = ctx.needs(0).then(|| vec![0.0; n * in_len]);
            let mut dw = ctx.needs(1).then(|| vec![0.0; wt.numel()]);
            let mut dcols = vec![0.0; if dx.is_some() { ck * l } else { 0 }];
            for i in 0..n {
                let gi = &g[i * o * l..(i + 1) * o * l];
                if let Some(dw) = dw.as_mut() {
                    let cols = geo.im2col(&x.data()[i * in_len..(i + 1) * in_len]);
                    gemm(o, l, ck, 1.0, gi, Layout::rm(l), &cols, Layout::rm_t(l), 1.0, dw, Layout::rm(ck));
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(ck, o, l, 1.0, wt.data(), Layout::rm_t(ck), gi, Layout::rm(l), 0.0, &mut dcols, Layout::rm(l));
                    geo.col2im(&dcols, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(x.shape(), d)),
                dw.map(|d| Tensor::new(wt.shape(), d)),
            ];
            if has_bias {
                let db = ctx.needs(2).then(|| {
                    let mut acc = vec![0.0; o];
                    for i in 0..n {
                        for (oc, row) in g[i * o * l..(i + 1) * o * l].chunks(l).enumerate() {
                            acc[oc] += row.iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&[o], acc)
                });
                grads.push(db);
            }
            grads
        })
    }

    /// Nearest-neighbour 2x upsampling of every spatial axis of a
    /// `[N, C, H, W]` or `[N, C, D, H, W]` tensor.
    pub fn upsample2x(&self) -> Var<'g> {
        let x = self.value();
        let planar = x.ndim() == 4;
        let (n, c, [d, h, w]) = split_5d(x.shape());
        let (od, oh, ow) = (if planar { 1 } else { 2 * d }, 2 * h, 2 * w);
        let sd = if planar { 1 } else { 2 };
        let map = move |nc: usize, z: usize, y: usize, xx: usize| ((nc * d + z / sd) * h + y / 2) * w + xx / 2;
        let mut out = vec![0.0; n * c * od * oh * ow];
        let mut k = 0;
        for nc in 0..n * c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[k] = x.data()[map(nc, z, y, xx)];
                        k += 1;
                    }
                }
            }
        }
        let out_shape: Vec<usize> = if planar { vec![n, c, oh, ow] } else { vec![n, c, od, oh, ow] };
        self.graph().custom(&[*self], Tensor::new(&out_shape, out), move |ctx| {
            let mut g = vec![0.0; n * c * d * h * w];
            let mut k = 0;
            for nc in 0..n * c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            g[map(nc, z, y, xx)] += ctx.grad.data()[k];
                            k += 1;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(ctx.input(0).shape(), g))]
        })
    }

    /// Mean over all spatial positions: `[N, C, ..] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Var<'g> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s: usize = x.shape()[2..].iter().product();
        let data = x.data().chunks(s).map(|r| r.iter().sum::<f64>() / s as f64).collect();
        self.graph().custom(&[*self], Tensor::new(&[n, c], data), move |ctx| {
            let mut g = Vec::with_capacity(n * c * s);
            for &v in ctx.grad.data() {
                g.extend(std::iter::repeat_n(v / s as f64, s));
            }
            vec![Some(Tensor::new(ctx.input(0).shape(), g))]
        })
    }
}

