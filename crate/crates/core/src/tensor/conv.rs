//! Direct (loop) cross-correlation for 2D and 3D inputs.
//!
//! 2D tensors are handled as 3D with a unit depth axis. For every output
//! element contributions are added in ascending input channel, then
//! row-major kernel offset.

use super::tape::{Op, Tape, Var};
use super::{join_nc_spatial, split_nc_spatial, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

/// Output index range `[lo, hi)` for which `o*stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let k = k as isize;
    let (s, p, len) = (stride as isize, pad as isize, len as isize);
    let lo_num = p - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = len - 1 + p - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn expand(v: &[usize], rank: usize, what: &str, fill: usize) -> Result<[usize; 3]> {
    if v.len() != rank {
        return Err(TensorError::ShapeMismatch(format!("{what} has {} entries for spatial rank {rank}", v.len())));
    }
    Ok(if rank == 2 { [fill, v[0], v[1]] } else { [v[0], v[1], v[2]] })
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: &[usize], padding: &[usize]) -> Result<Self> {
        let (n, c_in, in_sp) = split_nc_spatial(x_shape)?;
        let rank = x_shape.len() - 2;
        if w_shape.len() != x_shape.len() {
            return Err(TensorError::ShapeMismatch(format!("weight {w_shape:?} for input {x_shape:?}")));
        }
        if w_shape[1] != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "weight expects {} input channels, input has {c_in}",
                w_shape[1]
            )));
        }
        let kernel = expand(&w_shape[2..], rank, "kernel", 1)?;
        let stride = expand(stride, rank, "stride", 1)?;
        let pad = expand(padding, rank, "padding", 0)?;
        let mut out_sp = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(TensorError::ShapeMismatch("stride must be positive".into()));
            }
            let padded = in_sp[a] + 2 * pad[a];
            if kernel[a] == 0 || kernel[a] > padded {
                return Err(TensorError::ShapeMismatch(format!(
                    "kernel {:?} does not fit padded input {:?}",
                    kernel, in_sp
                )));
            }
            out_sp[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self { n, c_in, c_out: w_shape[0], in_sp, out_sp, kernel, stride, pad })
    }

    fn in_plane(&self) -> usize {
        self.in_sp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Calls `f(out_offset, in_offset, count)` for every run of output
    /// positions along w paired with kernel offset `(kd, kh, kw)`. Input
    /// positions advance by the w stride.
    #[inline]
    fn for_each_run(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.in_sp;
        let [od, oh, ow] = self.out_sp;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let (d0, d1) = valid_range(kd, sd, pd, id, od);
        let (h0, h1) = valid_range(kh, sh, ph, ih, oh);
        let (w0, w1) = valid_range(kw, sw, pw, iw, ow);
        if w0 >= w1 {
            return;
        }
        for o_d in d0..d1 {
            let i_d = o_d * sd + kd - pd;
            for o_h in h0..h1 {
                let i_h = o_h * sh + kh - ph;
                let out_base = (o_d * oh + o_h) * ow;
                let in_base = (i_d * ih + i_h) * iw;
                f(out_base + w0, in_base + w0 * sw + kw - pw, w1 - w0);
            }
        }
    }
}

fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeometry) -> Vec<f64> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.k_volume());
    let sw = g.stride[2];
    let [_, kh_n, kw_n] = g.kernel;
    let mut out = vec![0.0; g.n * g.c_out * op];
    let (xd, wd) = (x.data(), w.data());
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o = &mut out[(n * g.c_out + co) * op..(n * g.c_out + co + 1) * op];
            if let Some(b) = b {
                o.fill(b.data()[co]);
            }
            for ci in 0..g.c_in {
                let xi = &xd[(n * g.c_in + ci) * ip..(n * g.c_in + ci + 1) * ip];
                let wk = &wd[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
                for kd in 0..g.kernel[0] {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                            g.for_each_run(kd, kh, kw, |oo, io, cnt| {
                                let orow = &mut o[oo..oo + cnt];
                                if sw == 1 {
                                    for (ov, xv) in orow.iter_mut().zip(&xi[io..io + cnt]) {
                                        *ov += wv * xv;
                                    }
                                } else {
                                    for (j, ov) in orow.iter_mut().enumerate() {
                                        *ov += wv * xi[io + j * sw];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(grad: &Tensor, w: &Tensor, x_shape: &[usize], g: &ConvGeometry) -> Tensor {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.k_volume());
    let sw = g.stride[2];
    let [_, kh_n, kw_n] = g.kernel;
    let mut dx = vec![0.0; g.n * g.c_in * ip];
    let (gd, wd) = (grad.data(), w.data());
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let d = &mut dx[(n * g.c_in + ci) * ip..(n * g.c_in + ci + 1) * ip];
            for co in 0..g.c_out {
                let go = &gd[(n * g.c_out + co) * op..(n * g.c_out + co + 1) * op];
                let wk = &wd[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
                for kd in 0..g.kernel[0] {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                            g.for_each_run(kd, kh, kw, |oo, io, cnt| {
                                let grow = &go[oo..oo + cnt];
                                if sw == 1 {
                                    for (dv, gv) in d[io..io + cnt].iter_mut().zip(grow) {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        d[io + j * sw] += wv * gv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("input shape")
}

pub(crate) fn backward_weight(grad: &Tensor, x: &Tensor, w_shape: &[usize], g: &ConvGeometry) -> Tensor {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.k_volume());
    let sw = g.stride[2];
    let [_, kh_n, kw_n] = g.kernel;
    let mut dw = vec![0.0; g.c_out * g.c_in * kv];
    let (gd, xd) = (grad.data(), x.data());
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let dk = &mut dw[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
            for kd in 0..g.kernel[0] {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let mut acc = 0.0;
                        for n in 0..g.n {
                            let go = &gd[(n * g.c_out + co) * op..(n * g.c_out + co + 1) * op];
                            let xi = &xd[(n * g.c_in + ci) * ip..(n * g.c_in + ci + 1) * ip];
                            g.for_each_run(kd, kh, kw, |oo, io, cnt| {
                                let grow = &go[oo..oo + cnt];
                                if sw == 1 {
                                    for (gv, xv) in grow.iter().zip(&xi[io..io + cnt]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        acc += gv * xi[io + j * sw];
                                    }
                                }
                            });
                        }
                        dk[(kd * kh_n + kh) * kw_n + kw] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), dw).expect("weight shape")
}

pub(crate) fn backward_bias(grad: &Tensor) -> Tensor {
    let (n, c) = (grad.shape()[0], grad.shape()[1]);
    let plane: usize = grad.shape()[2..].iter().product();
    let mut db = vec![0.0; c];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += grad.data()[(b * c + co) * plane..(b * c + co + 1) * plane].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], db).expect("bias shape")
}

impl Tape {
    /// Cross-correlation of `x[N, C_in, *spatial]` with `w[C_out, C_in, *kernel]`.
    ///
    /// `stride` and `padding` carry one entry per spatial axis.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize], padding: &[usize]) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::ShapeMismatch(format!("bias {:?} for {} channels", self.shape(b), geom.c_out)));
            }
        }
        let data = forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let shape = join_nc_spatial(self.shape(x), geom.n, geom.c_out, geom.out_sp);
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }
}
