use super::tape::{Op, Tape, Var};
use super::{join_nc_spatial, split_nc_spatial, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    n: usize,
    c: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl PoolGeometry {
    fn new(shape: &[usize], window: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self> {
        let (n, c, in_sp) = split_nc_spatial(shape)?;
        let rank = shape.len() - 2;
        let exp = |v: &[usize], fill: usize| -> Result<[usize; 3]> {
            if v.len() != rank {
                return Err(TensorError::ShapeMismatch(format!("pool parameter {v:?} for rank {rank}")));
            }
            Ok(if rank == 2 { [fill, v[0], v[1]] } else { [v[0], v[1], v[2]] })
        };
        let (window, stride, pad) = (exp(window, 1)?, exp(stride, 1)?, exp(pad, 0)?);
        let mut out_sp = [0; 3];
        for a in 0..3 {
            let padded = in_sp[a] + 2 * pad[a];
            if window[a] == 0 || stride[a] == 0 || window[a] > padded || 2 * pad[a] > window[a] {
                return Err(TensorError::ShapeMismatch(format!(
                    "pool window {window:?} stride {stride:?} pad {pad:?} on {in_sp:?}"
                )));
            }
            out_sp[a] = (padded - window[a]) / stride[a] + 1;
        }
        Ok(Self { n, c, in_sp, out_sp, window, stride, pad })
    }

    /// Input flat offsets (within a plane) covered by output position `o`.
    fn window_offsets(&self, o: [usize; 3], out: &mut Vec<usize>) {
        out.clear();
        for kd in 0..self.window[0] {
            let d = (o[0] * self.stride[0] + kd) as isize - self.pad[0] as isize;
            if d < 0 || d >= self.in_sp[0] as isize {
                continue;
            }
            for kh in 0..self.window[1] {
                let h = (o[1] * self.stride[1] + kh) as isize - self.pad[1] as isize;
                if h < 0 || h >= self.in_sp[1] as isize {
                    continue;
                }
                for kw in 0..self.window[2] {
                    let w = (o[2] * self.stride[2] + kw) as isize - self.pad[2] as isize;
                    if w < 0 || w >= self.in_sp[2] as isize {
                        continue;
                    }
                    out.push((d as usize * self.in_sp[1] + h as usize) * self.in_sp[2] + w as usize);
                }
            }
        }
    }

    fn out_positions(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [od, oh, ow] = self.out_sp;
        (0..od).flat_map(move |d| (0..oh).flat_map(move |h| (0..ow).map(move |w| [d, h, w])))
    }
}

pub(crate) fn max_pool_backward(g: &Tensor, argmax: &[usize], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&src, &gv) in argmax.iter().zip(g.data()) {
        d[src] += gv;
    }
    dx
}

pub(crate) fn avg_pool_backward(g: &Tensor, in_shape: &[usize], geom: &PoolGeometry) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let ip: usize = geom.in_sp.iter().product();
    let op: usize = geom.out_sp.iter().product();
    let denom = geom.window.iter().product::<usize>() as f64;
    let mut offs = Vec::new();
    let gd = g.data();
    let d = dx.data_mut();
    for plane in 0..geom.n * geom.c {
        for (k, o) in geom.out_positions().enumerate() {
            geom.window_offsets(o, &mut offs);
            let gv = gd[plane * op + k] / denom;
            for &i in &offs {
                d[plane * ip + i] += gv;
            }
        }
    }
    dx
}

impl Tape {
    /// Max pooling; padded positions never win. Ties go to the first
    /// element in row-major window order.
    pub fn max_pool(&mut self, x: Var, window: &[usize], stride: &[usize], padding: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let geom = PoolGeometry::new(&shape, window, stride, padding)?;
        let ip: usize = geom.in_sp.iter().product();
        let op: usize = geom.out_sp.iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(geom.n * geom.c * op);
        let mut argmax = Vec::with_capacity(out.capacity());
        let mut offs = Vec::new();
        for plane in 0..geom.n * geom.c {
            for o in geom.out_positions() {
                geom.window_offsets(o, &mut offs);
                let mut best = f64::NEG_INFINITY;
                let mut arg = plane * ip + offs[0];
                for &i in &offs {
                    let v = xd[plane * ip + i];
                    if v > best {
                        best = v;
                        arg = plane * ip + i;
                    }
                }
                out.push(best);
                argmax.push(arg);
            }
        }
        let y = Tensor::new(join_nc_spatial(&shape, geom.n, geom.c, geom.out_sp), out)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    /// Average pooling without padding (denominator is the window size).
    pub fn avg_pool(&mut self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let zero = vec![0; window.len()];
        let geom = PoolGeometry::new(&shape, window, stride, &zero)?;
        let ip: usize = geom.in_sp.iter().product();
        let denom = geom.window.iter().product::<usize>() as f64;
        let xd = self.value(x).data();
        let mut out = Vec::new();
        let mut offs = Vec::new();
        for plane in 0..geom.n * geom.c {
            for o in geom.out_positions() {
                geom.window_offsets(o, &mut offs);
                let s: f64 = offs.iter().map(|&i| xd[plane * ip + i]).sum();
                out.push(s / denom);
            }
        }
        let y = Tensor::new(join_nc_spatial(&shape, geom.n, geom.c, geom.out_sp), out)?;
        Ok(self.push(y, Op::AvgPool { x, geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_of_constant() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 2, 4, 4, 4], 3.25), false);
        let y = t.avg_pool(x, &[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2, 2, 2]);
        assert!(t.value(y).data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn max_pool_stem_geometry() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap(), false);
        let y = t.max_pool(x, &[3, 3], &[2, 2], &[1, 1]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap(), true);
        let y = t.max_pool(x, &[2, 2], &[2, 2], &[0, 0]).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_extent_floors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 5, 5, 5]), false);
        let y = t.avg_pool(x, &[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2, 2]);
    }
}
