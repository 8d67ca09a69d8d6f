//! Elementwise, reduction, concatenation, linear and softmax operations.

use super::tape::{Op, Tape, Var};
use super::{split_nc_spatial, Result, Tensor, TensorError};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn mul_elementwise(g: &Tensor, other: &[f64]) -> Tensor {
    let data = g.data().iter().zip(other).map(|(a, b)| a * b).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same length")
}

pub(crate) fn relu_backward(g: &Tensor, out: &Tensor) -> Tensor {
    let data = g.data().iter().zip(out.data()).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same length")
}

pub(crate) fn concat_backward(g: &Tensor, shapes: &[&[usize]]) -> Vec<Tensor> {
    let n = g.shape()[0];
    let c_total = g.shape()[1];
    let spatial: usize = g.shape()[2..].iter().product();
    let mut outs: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let gd = g.data();
    for b in 0..n {
        let mut c0 = 0;
        for (t, s) in outs.iter_mut().zip(shapes) {
            let c = s[1];
            let src = &gd[(b * c_total + c0) * spatial..(b * c_total + c0 + c) * spatial];
            t.data_mut()[b * c * spatial..(b + 1) * c * spatial].copy_from_slice(src);
            c0 += c;
        }
    }
    outs
}

pub(crate) fn gap_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let spatial: usize = in_shape[2..].iter().product();
    let inv = 1.0 / spatial as f64;
    let mut out = Tensor::zeros(in_shape);
    for (chunk, &gv) in out.data_mut().chunks_mut(spatial).zip(g.data()) {
        chunk.fill(gv * inv);
    }
    out
}

pub(crate) fn linear_backward_input(g: &Tensor, w: &Tensor) -> Tensor {
    let (n, k) = (g.shape()[0], g.shape()[1]);
    let f = w.shape()[0];
    let mut out = vec![0.0; n * f];
    for b in 0..n {
        for i in 0..f {
            let mut acc = 0.0;
            for j in 0..k {
                acc += g.data()[b * k + j] * w.data()[i * k + j];
            }
            out[b * f + i] = acc;
        }
    }
    Tensor::new(vec![n, f], out).expect("shape")
}

pub(crate) fn linear_backward_weight(g: &Tensor, x: &Tensor) -> Tensor {
    let (n, k) = (g.shape()[0], g.shape()[1]);
    let f = x.shape()[1];
    let mut out = vec![0.0; f * k];
    for i in 0..f {
        for j in 0..k {
            let mut acc = 0.0;
            for b in 0..n {
                acc += x.data()[b * f + i] * g.data()[b * k + j];
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::new(vec![f, k], out).expect("shape")
}

pub(crate) fn linear_backward_bias(g: &Tensor) -> Tensor {
    let (n, k) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![0.0; k];
    for b in 0..n {
        for j in 0..k {
            out[j] += g.data()[b * k + j];
        }
    }
    Tensor::new(vec![k], out).expect("shape")
}

pub(crate) fn softmax_backward(g: &Tensor, p: &Tensor) -> Tensor {
    let k = p.shape()[1];
    let mut out = vec![0.0; p.numel()];
    for ((row_out, row_p), row_g) in out.chunks_mut(k).zip(p.data().chunks(k)).zip(g.data().chunks(k)) {
        let dot: f64 = row_p.iter().zip(row_g).map(|(a, b)| a * b).sum();
        for j in 0..k {
            row_out[j] = row_p[j] * (row_g[j] - dot);
        }
    }
    Tensor::new(p.shape().to_vec(), out).expect("shape")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(TensorError::ShapeMismatch(format!("softmax expects [N,K], got {:?}", z.shape())));
    }
    let k = z.shape()[1];
    let mut out = Vec::with_capacity(z.numel());
    for row in z.data().chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(z.shape().to_vec(), out)
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let y = mul_elementwise(self.value(a), self.value(b).data());
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// One element (flat row-major index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| TensorError::ShapeMismatch(format!("index {index} out of range")))?;
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Concatenation along the channel axis of `[N, C_i, *spatial]` inputs.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::ShapeMismatch("empty concat".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!("concat needs [N,C,...], got {s0:?}")));
        }
        let mut c_total = 0;
        for v in xs {
            let s = self.shape(*v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::ShapeMismatch(format!("concat {s:?} with {s0:?}")));
            }
            c_total += s[1];
        }
        let n = s0[0];
        let spatial: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(n * c_total * spatial);
        for b in 0..n {
            for v in xs {
                let t = self.value(*v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * spatial..(b + 1) * c * spatial]);
            }
        }
        let mut shape = s0;
        shape[1] = c_total;
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    /// Mean over all spatial positions: `[N, C, *] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        split_nc_spatial(&shape)?;
        let spatial: usize = shape[2..].iter().product();
        let data = self.value(x).data().chunks(spatial).map(|c| c.iter().sum::<f64>() / spatial as f64).collect();
        let y = Tensor::new(vec![shape[0], shape[1]], data)?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    /// `x[N,F] · W[F,K] + b[K]`, accumulated over ascending feature index.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch(format!("linear {xs:?} x {ws:?}")));
        }
        let (n, f, k) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(TensorError::ShapeMismatch(format!("bias {:?} for {k} outputs", self.shape(b))));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            for j in 0..k {
                let mut acc = 0.0;
                for i in 0..f {
                    acc += xd[r * f + i] * wd[i * k + j];
                }
                if let Some(bd) = bd {
                    acc += bd[j];
                }
                out[r * k + j] = acc;
            }
        }
        let y = Tensor::new(vec![n, k], out)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let y = softmax_rows(self.value(z))?;
        Ok(self.push(y, Op::Softmax(z)))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch("dropout mask length".into()));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let y = mul_elementwise(self.value(x), &mask);
        Ok(self.push(y, Op::Dropout { x, mask }))
    }
}
