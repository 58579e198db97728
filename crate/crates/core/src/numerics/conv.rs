//! im2col convolution and max pooling kernels used by the tape.

use crate::error::{Error, Result};
use crate::numerics::linalg::{gemm, Mat};

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, in_c, in_h, in_w], &[out_c, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape(format!(
                "conv2d expects input [B,C,H,W] and kernel [O,C,kh,kw], got {x:?} and {w:?}"
            )));
        };
        if wc != in_c {
            return Err(Error::shape(format!("conv2d kernel has {wc} input channels, input has {in_c}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if kh == 0 || kw == 0 || kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Valid output columns `[lo, hi)` for kernel column `j` (input column `ox·stride + j − pad`).
fn col_range(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride);
    let hi = (g.in_w + g.pad).checked_sub(j).map_or(0, |lim| lim.div_ceil(g.stride)).min(g.out_w);
    (lo, hi.max(lo))
}

/// Calls `f(col_offset, src_offset, len)` for every contiguous run (stride 1)
/// or single element (stride > 1) linking a column row to the input.
fn for_each_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let s = g.spatial();
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * s;
                let (lo, hi) = col_range(g, j);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let Some(y) = (oy * g.stride + i).checked_sub(g.pad).filter(|&y| y < g.in_h) else {
                        continue;
                    };
                    let dst = row + oy * g.out_w;
                    let src = (c * g.in_h + y) * g.in_w;
                    if g.stride == 1 {
                        f(dst + lo, src + lo + j - g.pad, hi - lo);
                    } else {
                        for ox in lo..hi {
                            f(dst + ox, src + ox * g.stride + j - g.pad, 1);
                        }
                    }
                }
            }
        }
    }
}

/// `col` must be zeroed; padding positions are left untouched.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    for_each_run(g, |d, s, n| col[d..d + n].copy_from_slice(&x[s..s + n]));
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    for_each_run(g, |d, s, n| {
        for (o, v) in dx[s..s + n].iter_mut().zip(&col[d..d + n]) {
            *o += v;
        }
    });
}

/// Returns the output and the per-image column buffers kept for backward.
pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (p, s) = (g.patch(), g.spatial());
    let mut cols = vec![0.0; g.batch * p * s];
    let mut out = vec![0.0; g.batch * g.out_c * s];
    for b in 0..g.batch {
        let col = &mut cols[b * p * s..(b + 1) * p * s];
        im2col(g, &x[b * g.in_image()..(b + 1) * g.in_image()], col);
        gemm(
            Mat::row_major(w, g.out_c, p),
            Mat::row_major(col, p, s),
            &mut out[b * g.out_c * s..(b + 1) * g.out_c * s],
            0.0,
        );
    }
    (out, cols)
}

pub(crate) fn backward(
    g: &ConvGeom,
    dout: &[f64],
    w: &[f64],
    cols: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, s) = (g.patch(), g.spatial());
    let mut dw = want_dw.then(|| vec![0.0; g.out_c * p]);
    let mut dx = want_dx.then(|| vec![0.0; g.batch * g.in_image()]);
    let mut dcol = if want_dx { vec![0.0; p * s] } else { Vec::new() };
    for b in 0..g.batch {
        let db = Mat::row_major(&dout[b * g.out_c * s..(b + 1) * g.out_c * s], g.out_c, s);
        if let Some(dw) = dw.as_mut() {
            gemm(db, Mat::row_major(&cols[b * p * s..(b + 1) * p * s], p, s).t(), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::row_major(w, g.out_c, p).t(), db, &mut dcol, 0.0);
            col2im(g, &dcol, &mut dx[b * g.in_image()..(b + 1) * g.in_image()]);
        }
    }
    (dx, dw)
}

#[derive(Clone, Debug)]
pub(crate) struct PoolGeom {
    lead: Vec<usize>,
    in_h: usize,
    in_w: usize,
    size: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], size: usize) -> Result<Self> {
        if shape.len() < 2 || size == 0 {
            return Err(Error::shape(format!("max_pool2d({size}) of {shape:?}")));
        }
        let (lead, hw) = shape.split_at(shape.len() - 2);
        if hw[0] < size || hw[1] < size {
            return Err(Error::shape(format!("max_pool2d window {size} larger than {}x{}", hw[0], hw[1])));
        }
        Ok(Self { lead: lead.to_vec(), in_h: hw[0], in_w: hw[1], size })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.in_h / self.size, self.in_w / self.size]);
        s
    }
}

/// Floor-mode pooling; ties go to the first element in row-major window order.
pub(crate) fn max_pool(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes: usize = g.lead.iter().product();
    let (oh, ow) = (g.in_h / g.size, g.in_w / g.size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * g.size * g.in_w + ox * g.size;
                for dy in 0..g.size {
                    for dx in 0..g.size {
                        let idx = base + (oy * g.size + dy) * g.in_w + ox * g.size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
