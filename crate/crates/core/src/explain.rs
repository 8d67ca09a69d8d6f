//! Grad-CAM class-activation maps and NIfTI overlay export.

use crate::net::{ForwardOptions, LayerKind, Model, NetError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::volio::{write_nifti_file, IntensityUnit, VolioError, Volume};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown layer '{0}'")]
    UnknownLayer(String),
    #[error("layer '{0}' is not convolutional")]
    NotConvolutional(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} outside 0..{1}")]
    UnknownClass(usize, usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volio(#[from] VolioError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// A network that can expose one intermediate activation for Grad-CAM.
pub trait CamModel {
    /// Records an inference pass for a single sample `[1, C, *spatial]` and
    /// returns the class logits `[1, K]` and the activation of `layer`
    /// `[1, C_l, *spatial_l]`.
    fn cam_forward(&self, tape: &mut Tape, input: Var, metadata: Option<&Tensor>, layer: &str) -> Result<(Var, Var)>;

    /// Input-voxel position of activation cell `j` as `stride · j + offset`.
    /// `None` assumes cells evenly tile the input.
    fn cell_centers(&self, _layer: &str) -> Option<(f64, f64)> {
        None
    }
}

impl CamModel for Model {
    fn cam_forward(&self, tape: &mut Tape, input: Var, metadata: Option<&Tensor>, layer: &str) -> Result<(Var, Var)> {
        match self.layer_kind(layer) {
            None => return Err(ExplainError::UnknownLayer(layer.to_string())),
            Some(LayerKind::Conv) => {}
            Some(_) => return Err(ExplainError::NotConvolutional(layer.to_string())),
        }
        let bound = self.bind(tape, |_| false);
        let m = metadata.map(|m| tape.leaf(m.clone(), false));
        let out = self.forward_on(tape, &bound, input, m, ForwardOptions::eval())?;
        let act = out.activation(layer).ok_or_else(|| ExplainError::UnknownLayer(layer.to_string()))?;
        Ok((out.logits, act))
    }

    fn cell_centers(&self, layer: &str) -> Option<(f64, f64)> {
        // The stem convolution and max pool each halve the grid around
        // centred windows; every transition's 2-wide average pool halves it
        // again and moves the centre by half a cell.
        if layer == "stem.conv" {
            return Some((2.0, 0.0));
        }
        let stage = ["block", "transition"]
            .iter()
            .find_map(|p| layer.strip_prefix(p))
            .and_then(|rest| rest.split('.').next())
            .and_then(|d| d.parse::<u32>().ok())?;
        let (mut stride, mut offset) = (4.0, 0.0);
        for _ in 1..stage {
            offset += stride / 2.0;
            stride *= 2.0;
        }
        Some((stride, offset))
    }
}

/// Normalized class-activation map at input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    /// Values in [0, 1], spatial storage order.
    pub grid: Vec<f64>,
    pub spatial: Vec<usize>,
    pub target_class: usize,
    pub layer: String,
    /// Maximum of the map before normalization.
    pub peak: f64,
    /// Set when the map is zero everywhere.
    pub all_zero: bool,
}

impl Saliency {
    /// Indices of the `fraction` highest-valued voxels, ties broken by index.
    pub fn top_indices(&self, fraction: f64) -> Vec<usize> {
        let k = ((self.grid.len() as f64 * fraction).ceil() as usize).min(self.grid.len());
        let mut order: Vec<usize> = (0..self.grid.len()).collect();
        order.sort_by(|&a, &b| self.grid[b].total_cmp(&self.grid[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }

    /// Unravels a flat index into spatial coordinates in storage order.
    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut c = vec![0; self.spatial.len()];
        for a in (0..self.spatial.len()).rev() {
            c[a] = index % self.spatial[a];
            index /= self.spatial[a];
        }
        c
    }

    /// Mean storage-order coordinate of the top `fraction` voxels.
    pub fn top_centroid(&self, fraction: f64) -> Vec<f64> {
        let top = self.top_indices(fraction);
        let mut acc = vec![0.0; self.spatial.len()];
        for &i in &top {
            for (a, c) in self.coords(i).into_iter().enumerate() {
                acc[a] += c as f64;
            }
        }
        acc.iter().map(|s| s / top.len().max(1) as f64).collect()
    }
}

/// Linear resampling of a `[*src]` grid onto `[*dst]` with half-voxel
/// alignment and edge clamping.
pub fn upsample_linear(data: &[f64], src: &[usize], dst: &[usize]) -> Vec<f64> {
    let centers: Vec<(f64, f64)> =
        src.iter().zip(dst).map(|(&s, &d)| (d as f64 / s as f64, 0.5 * d as f64 / s as f64 - 0.5)).collect();
    upsample_with_centers(data, src, dst, &centers)
}

/// Linear resampling where source cell `j` along axis `a` sits at
/// destination coordinate `centers[a].0 · j + centers[a].1`; positions
/// beyond the outermost cells take the edge value.
pub fn upsample_with_centers(data: &[f64], src: &[usize], dst: &[usize], centers: &[(f64, f64)]) -> Vec<f64> {
    let pad = |s: &[usize]| {
        let mut d = [1usize; 3];
        d[3 - s.len()..].copy_from_slice(s);
        d
    };
    let (s, d) = (pad(src), pad(dst));
    let mut c = [(1.0, 0.0); 3];
    c[3 - centers.len()..].copy_from_slice(centers);
    let axis = |a: usize, o: usize| -> (usize, usize, f64) {
        let x = ((o as f64 - c[a].1) / c[a].0).clamp(0.0, (s[a] - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(s[a] - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(d.iter().product());
    for z in 0..d[0] {
        let (z0, z1, fz) = axis(0, z);
        for y in 0..d[1] {
            let (y0, y1, fy) = axis(1, y);
            for x in 0..d[2] {
                let (x0, x1, fx) = axis(2, x);
                let at = |k: usize, j: usize, i: usize| data[(k * s[1] + j) * s[2] + i];
                let plane = |k| {
                    let r0 = at(k, y0, x0) * (1.0 - fx) + at(k, y0, x1) * fx;
                    let r1 = at(k, y1, x0) * (1.0 - fx) + at(k, y1, x1) * fx;
                    r0 * (1.0 - fy) + r1 * fy
                };
                out.push(plane(z0) * (1.0 - fz) + plane(z1) * fz);
            }
        }
    }
    out
}

/// Unnormalized Grad-CAM map at the resolution of `layer`:
/// `ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of `∂logit_c/∂A_k`.
pub fn grad_cam_coarse(
    model: &impl CamModel,
    input: &Tensor,
    metadata: Option<&Tensor>,
    class_idx: usize,
    layer: &str,
) -> Result<Tensor> {
    if input.rank() < 3 || input.shape()[0] != 1 {
        return Err(ExplainError::ShapeMismatch(format!("expected one sample [1, C, ...], got {:?}", input.shape())));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let (logits, act) = model.cam_forward(&mut tape, x, metadata, layer)?;
    let k = tape.shape(logits)[1];
    if class_idx >= k {
        return Err(ExplainError::UnknownClass(class_idx, k));
    }
    let score = tape.pick(logits, class_idx)?;
    let grads = tape.backward(score)?;
    let a = tape.value(act);
    let shape = a.shape().to_vec();
    let spatial: usize = shape[2..].iter().product();
    let zeros = Tensor::zeros(&shape);
    let g = grads.get(act).unwrap_or(&zeros);
    let mut map = vec![0.0; spatial];
    for c in 0..shape[1] {
        let gs = &g.data()[c * spatial..(c + 1) * spatial];
        let alpha = gs.iter().sum::<f64>() / spatial as f64;
        for (m, &av) in map.iter_mut().zip(&a.data()[c * spatial..(c + 1) * spatial]) {
            *m += alpha * av;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Tensor::new(shape[2..].to_vec(), map)?)
}

/// Grad-CAM saliency for `class_idx`, upsampled to the input's spatial
/// shape and scaled so its maximum is 1.
pub fn grad_cam(
    model: &impl CamModel,
    input: &Tensor,
    metadata: Option<&Tensor>,
    class_idx: usize,
    layer: &str,
) -> Result<Saliency> {
    let coarse = grad_cam_coarse(model, input, metadata, class_idx, layer)?;
    let spatial = input.shape()[2..].to_vec();
    let mut grid = if coarse.shape() == spatial.as_slice() {
        coarse.data().to_vec()
    } else if let Some(c) = model.cell_centers(layer) {
        upsample_with_centers(coarse.data(), coarse.shape(), &spatial, &vec![c; spatial.len()])
    } else {
        upsample_linear(coarse.data(), coarse.shape(), &spatial)
    };
    let peak = grid.iter().copied().fold(0.0, f64::max);
    let all_zero = peak <= 0.0;
    if all_zero {
        grid.iter_mut().for_each(|v| *v = 0.0);
    } else {
        grid.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
    }
    Ok(Saliency { grid, spatial, target_class: class_idx, layer: layer.to_string(), peak, all_zero })
}

/// Writes the saliency as a NIfTI volume on the reference grid.
pub fn export_overlay(saliency: &Saliency, reference: &Volume, path: &Path) -> Result<Volume> {
    let [nx, ny, nz] = reference.shape();
    let expected = if nz == 1 && saliency.spatial.len() == 2 { vec![ny, nx] } else { vec![nz, ny, nx] };
    if saliency.spatial != expected {
        return Err(ExplainError::ShapeMismatch(format!(
            "saliency {:?} vs reference {:?}",
            saliency.spatial,
            reference.shape()
        )));
    }
    let data = saliency.grid.iter().map(|&v| v as f32).collect();
    let v = Volume::new(data, reference.shape(), *reference.affine(), IntensityUnit::Normalized)?;
    write_nifti_file(&v, path)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::DenseNetConfig;
    use crate::volio::{diagonal_affine, read_nifti_file};

    /// Logit `c` is `w_c · Σ A`, where `A` is the input itself.
    struct LinearReadout {
        weights: Vec<f64>,
    }

    impl CamModel for LinearReadout {
        fn cam_forward(&self, tape: &mut Tape, input: Var, _: Option<&Tensor>, layer: &str) -> Result<(Var, Var)> {
            if layer != "features" {
                return Err(ExplainError::UnknownLayer(layer.into()));
            }
            let s = tape.sum(input);
            let parts: Vec<Var> = self.weights.iter().map(|&w| tape.scale(s, w)).collect();
            let logits = tape.custom(
                &parts,
                Tensor::new(vec![1, parts.len()], parts.iter().map(|&p| tape.value(p).data()[0]).collect())?,
                Box::new(Gather),
            );
            Ok((logits, input))
        }
    }

    struct Gather;

    impl crate::tensor::Function for Gather {
        fn backward(&self, grad: &Tensor, _: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
            grad.data().iter().map(|&g| Some(Tensor::scalar(g))).collect()
        }
    }

    fn toy_input() -> Tensor {
        let data: Vec<f64> = (0..36).map(|i| ((i as f64) * 0.7).sin()).collect();
        Tensor::new(vec![1, 1, 6, 6], data).unwrap()
    }

    #[test]
    fn linear_readout_gives_relu_of_activation() {
        let x = toy_input();
        let toy = LinearReadout { weights: vec![1.0, -1.0] };
        let coarse = grad_cam_coarse(&toy, &x, None, 0, "features").unwrap();
        for (c, &a) in coarse.data().iter().zip(x.data()) {
            assert!((c - a.max(0.0)).abs() < 1e-12);
        }
        let s = grad_cam(&toy, &x, None, 0, "features").unwrap();
        let peak = x.data().iter().copied().fold(0.0, f64::max);
        for (v, &a) in s.grid.iter().zip(x.data()) {
            assert!((v - a.max(0.0) / peak).abs() < 1e-10);
        }
    }

    #[test]
    fn readout_scale_leaves_saliency_unchanged() {
        let x = toy_input();
        let a = grad_cam(&LinearReadout { weights: vec![1.0, 0.0] }, &x, None, 0, "features").unwrap();
        let b = grad_cam(&LinearReadout { weights: vec![3.5, 0.0] }, &x, None, 0, "features").unwrap();
        assert!((b.peak - 3.5 * a.peak).abs() < 1e-12);
        for (u, v) in a.grid.iter().zip(&b.grid) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_readouts_have_disjoint_support() {
        let x = toy_input();
        let toy = LinearReadout { weights: vec![1.0, -1.0] };
        let s0 = grad_cam(&toy, &x, None, 0, "features").unwrap();
        let s1 = grad_cam(&toy, &x, None, 1, "features").unwrap();
        assert!(s0.grid.iter().zip(&s1.grid).all(|(a, b)| *a == 0.0 || *b == 0.0));
        assert!(s1.grid.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn negative_map_is_flagged_zero() {
        let x = Tensor::full(&[1, 1, 4, 4], 2.0);
        let s = grad_cam(&LinearReadout { weights: vec![-1.0, 1.0] }, &x, None, 0, "features").unwrap();
        assert!(s.all_zero && s.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_layers_are_checked() {
        let m = Model::build(DenseNetConfig::tiny(2, 16), 0).unwrap();
        let x = Tensor::full(&m.input_shape(1), 0.5);
        assert!(matches!(grad_cam(&m, &x, None, 1, "nope"), Err(ExplainError::UnknownLayer(_))));
        assert!(matches!(grad_cam(&m, &x, None, 1, "final.norm"), Err(ExplainError::NotConvolutional(_))));
        assert!(matches!(grad_cam(&m, &x, None, 1, "head"), Err(ExplainError::NotConvolutional(_))));
        let s = grad_cam(&m, &x, None, 1, &m.last_conv_layer()).unwrap();
        assert_eq!(s.spatial, vec![16, 16]);
        assert!(s.grid.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upsampling_preserves_constants_and_identity() {
        let c = upsample_linear(&[2.0; 8], &[2, 2, 2], &[5, 6, 7]);
        assert!(c.iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let d: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(upsample_linear(&d, &[3, 4], &[3, 4]), d);
        let up = upsample_with_centers(&[0.0, 8.0], &[2], &[12], &[(8.0, 2.0)]);
        assert_eq!(up[..3], [0.0, 0.0, 0.0]);
        assert_eq!(up[6], 4.0);
        assert_eq!(up[10..], [8.0, 8.0]);
    }

    #[test]
    fn cell_centers_follow_network_strides() {
        let m = Model::build(DenseNetConfig::tiny(3, 32), 0).unwrap();
        assert_eq!(m.cell_centers("stem.conv"), Some((2.0, 0.0)));
        assert_eq!(m.cell_centers("block1.layer2.conv2"), Some((4.0, 0.0)));
        assert_eq!(m.cell_centers("transition1.conv"), Some((4.0, 0.0)));
        assert_eq!(m.cell_centers("block2.layer1.conv1"), Some((8.0, 2.0)));
        assert_eq!(m.cell_centers("block3.layer1.conv1"), Some((16.0, 6.0)));
    }

    #[test]
    fn overlay_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let reference = Volume::zeros([4, 3, 2], diagonal_affine([2.0, 2.0, 3.0], [1.0, -2.0, 5.0]), IntensityUnit::Hu).unwrap();
        let grid: Vec<f64> = (0..24).map(|i| i as f64 / 23.0).collect();
        let s = Saliency { grid, spatial: vec![2, 3, 4], target_class: 1, layer: "x".into(), peak: 1.0, all_zero: false };
        let path = dir.path().join("cam.nii");
        export_overlay(&s, &reference, &path).unwrap();
        let back = read_nifti_file(&path).unwrap();
        assert_eq!(back.affine(), reference.affine());
        for (a, b) in back.data().iter().zip(&s.grid) {
            assert_eq!(*a, *b as f32);
        }
        let zero = Saliency { grid: vec![0.0; 24], all_zero: true, ..s.clone() };
        assert!(export_overlay(&zero, &reference, &path).is_ok());
        let wrong = Saliency { spatial: vec![4, 3, 2], ..s };
        assert!(matches!(export_overlay(&wrong, &reference, &path), Err(ExplainError::ShapeMismatch(_))));
    }
}
