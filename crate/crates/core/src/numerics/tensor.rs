use crate::error::{Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(f).collect(), grad: None, requires_grad: false }
    }

    /// Builder form of [`Tensor::set_requires_grad`].
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!("gradient of length {} for tensor of shape {:?}", g.len(), self.shape)));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::new(shape, self.data.clone())?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for dim {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Slice `index` along the leading dimension.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let (&lead, rest) = self.shape.split_first().ok_or_else(|| Error::shape("select() on a scalar"))?;
        if index >= lead {
            return Err(Error::shape(format!("select({index}) on leading dim of size {lead}")));
        }
        let step = numel(rest);
        Tensor::new(rest, self.data[index * step..(index + 1) * step].to_vec())
    }

    /// Stack equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::shape("stack() of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!("stack() of mismatched shapes {:?} and {:?}", first.shape, t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Bilinear resize of the last two dimensions (half-pixel centers, edge clamped).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let plan = ResizePlan::new(&self.shape, out_h, out_w)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(&self.data, &mut out);
        Tensor::new(&plan.out_shape, out)
    }

    /// Row-major argmax; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }
}

pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Precomputed interpolation taps for one bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_shape: Vec<usize>,
    planes: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape(format!("bilinear resize needs at least 2 dims, got {shape:?}")));
        }
        let (lead, spatial) = shape.split_at(shape.len() - 2);
        let (in_h, in_w) = (spatial[0], spatial[1]);
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("bilinear resize from {in_h}x{in_w} to {out_h}x{out_w}")));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([out_h, out_w]);
        Ok(Self { in_h, in_w, out_shape, planes: numel(lead), rows: taps(in_h, out_h), cols: taps(in_w, out_w) })
    }

    pub fn out_len(&self) -> usize {
        numel(&self.out_shape)
    }

    // Written as nested lerps (a + t(b - a)) so constant inputs come back exactly.
    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        let (ih, iw) = (self.in_h, self.in_w);
        let (oh, ow) = (self.rows.len(), self.cols.len());
        for p in 0..self.planes {
            let src = &input[p * ih * iw..(p + 1) * ih * iw];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (c, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let a = src[y0 * iw + x0];
                    let b = src[y0 * iw + x1];
                    let cc = src[y1 * iw + x0];
                    let d = src[y1 * iw + x1];
                    let top = a + fx * (b - a);
                    let bottom = cc + fx * (d - cc);
                    dst[r * ow + c] = top + fy * (bottom - top);
                }
            }
        }
    }

    pub fn backward(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (ih, iw) = (self.in_h, self.in_w);
        let (oh, ow) = (self.rows.len(), self.cols.len());
        for p in 0..self.planes {
            let g_in = &mut grad_in[p * ih * iw..(p + 1) * ih * iw];
            let g_out = &grad_out[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (c, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let g = g_out[r * ow + c];
                    g_in[y0 * iw + x0] += g * (1.0 - fx) * (1.0 - fy);
                    g_in[y0 * iw + x1] += g * fx * (1.0 - fy);
                    g_in[y1 * iw + x0] += g * (1.0 - fx) * fy;
                    g_in[y1 * iw + x1] += g * fx * fy;
                }
            }
        }
    }
}
