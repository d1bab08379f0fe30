//! Grad-CAM maps at a backbone stage.
//!
//! For activations `A` (`[N, C, h, w]`) at the target stage and the class score
//! `s` (pre-softmax logit), the channel weights are the spatial means of
//! `∂s/∂A` and the raw map is `relu(Σ_c w_c · A_c)`.
//!
//! A differentiable map keeps the gradient computation in the graph, so a loss
//! over the map propagates second-order terms to the parameters.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

use crate::autograd::{self, Tensor};
use crate::backbone::{Classifier, LayerId};
use crate::error::{Error, Result};
use crate::sampling::{bilinear_clamped, resize_coord};

/// Spread below which a map counts as constant during normalization.
pub const CONSTANT_MAP_TOL: f64 = 1e-12;

/// One image's saliency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub grid: Array2<f64>,
    pub class_index: usize,
    pub layer: LayerId,
    pub differentiable: bool,
}

/// Maps for a batch, stored as one `[N, h, w]` tensor.
#[derive(Clone, Debug)]
pub struct CamBatch {
    pub maps: Tensor,
    /// `[N, C]` channel weights (values only).
    pub weights: Array2<f64>,
    pub classes: Vec<usize>,
    pub layer: LayerId,
    pub differentiable: bool,
}

impl CamBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn map(&self, i: usize) -> CamMap {
        let grid = self
            .maps
            .value()
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        CamMap {
            grid,
            class_index: self.classes[i],
            layer: self.layer,
            differentiable: self.differentiable,
        }
    }

    pub fn to_maps(&self) -> Vec<CamMap> {
        (0..self.len()).map(|i| self.map(i)).collect()
    }
}

fn check_classes(classes: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if classes.len() != n {
        return Err(Error::Input(format!(
            "{} class indices for a batch of {n}",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Input(format!(
            "class index {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn check_finite(activations: &Tensor, layer: LayerId) -> Result<()> {
    let bad = activations.value().iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numeric(format!(
            "{bad} of {} activations at {layer} are not finite",
            activations.len()
        )));
    }
    Ok(())
}

fn weighted_map(activations: &Tensor, grads: &Tensor) -> (Tensor, Array2<f64>) {
    let w = grads.mean_axes(&[2, 3], true);
    let weights = w
        .value()
        .clone()
        .into_shape_with_order((activations.shape()[0], activations.shape()[1]))
        .unwrap();
    let map = w.mul(activations).sum_axes(&[1], false).relu();
    (map, weights)
}

/// Raw Grad-CAM maps for `batch` at `layer`, explaining `classes[i]` for image `i`.
///
/// With `differentiable == false` the maps are constants; otherwise they stay
/// connected to the parameters through both the activations and the gradient.
pub fn compute_cam<M: Classifier + ?Sized>(
    model: &M,
    batch: &Tensor,
    classes: &[usize],
    layer: LayerId,
    differentiable: bool,
) -> Result<CamBatch> {
    check_classes(classes, batch.shape().first().copied().unwrap_or(0), model.num_classes())?;
    if differentiable {
        let out = model.forward(batch, Some(layer))?;
        let activations = out.captured.expect("capture requested");
        cam_from_forward(&activations, &out.logits, classes, layer)
    } else {
        let activations = autograd::no_grad(|| model.forward(batch, Some(layer)))?
            .captured
            .expect("capture requested");
        detached_cam(model, &activations, classes, layer)
    }
}

/// Differentiable maps from a forward pass that captured `activations` on the
/// way to `logits`.
pub fn cam_from_forward(
    activations: &Tensor,
    logits: &Tensor,
    classes: &[usize],
    layer: LayerId,
) -> Result<CamBatch> {
    check_classes(classes, activations.shape()[0], logits.shape()[1])?;
    check_finite(activations, layer)?;
    if !activations.requires_grad() {
        return Err(Error::Usage(
            "differentiable CAM needs activations recorded in the graph".into(),
        ));
    }
    let score = autograd::select_columns(logits, classes).sum_all();
    let grads = autograd::grad(&score, std::slice::from_ref(activations), true)?.remove(0);
    let (maps, weights) = weighted_map(activations, &grads);
    Ok(CamBatch {
        maps,
        weights,
        classes: classes.to_vec(),
        layer,
        differentiable: true,
    })
}

/// Constant maps: the head is re-run from a detached copy of `activations`.
pub fn detached_cam<M: Classifier + ?Sized>(
    model: &M,
    activations: &Tensor,
    classes: &[usize],
    layer: LayerId,
) -> Result<CamBatch> {
    check_classes(classes, activations.shape()[0], model.num_classes())?;
    check_finite(activations, layer)?;
    let leaf = Tensor::parameter(activations.value().clone());
    let logits = model.forward_from(layer, &leaf)?;
    let score = autograd::select_columns(&logits, classes).sum_all();
    let grads = if score.requires_grad() {
        autograd::grad(&score, std::slice::from_ref(&leaf), false)?.remove(0)
    } else {
        Tensor::zeros(leaf.shape())
    };
    let (maps, weights) = autograd::no_grad(|| weighted_map(&leaf.detach(), &grads.detach()));
    Ok(CamBatch {
        maps: maps.detach(),
        weights,
        classes: classes.to_vec(),
        layer,
        differentiable: false,
    })
}

/// Per-image min-max scaling to `[0, 1]`; constant maps become all zeros.
pub fn normalize_cam(raw: &CamMap) -> Result<CamMap> {
    if raw.grid.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("CAM contains NaN".into()));
    }
    if raw.grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("CAM contains infinite values".into()));
    }
    let (lo, hi) = raw
        .grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let grid = if range <= CONSTANT_MAP_TOL {
        Array2::zeros(raw.grid.raw_dim())
    } else {
        raw.grid.mapv(|v| (v - lo) / range)
    };
    Ok(CamMap { grid, ..raw.clone() })
}

/// Batched [`normalize_cam`] on a `[N, h, w]` tensor, differentiable through
/// the min and max.
pub fn normalize_cam_batch(maps: &Tensor) -> Result<Tensor> {
    if maps.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("CAM batch contains non-finite values".into()));
    }
    let &[n, h, w] = maps.shape() else {
        return Err(Error::Input(format!("expected [N, h, w] maps, got {:?}", maps.shape())));
    };
    let flat = maps.reshape(&[n, h * w]);
    let lo = autograd::row_min(&flat);
    let hi = autograd::row_max(&flat);
    let range = hi.sub(&lo);
    let degenerate: Vec<bool> = range.value().iter().map(|&r| r <= CONSTANT_MAP_TOL).collect();
    let keep = ArrayD::from_shape_fn(IxDyn(&[n, 1]), |ix| if degenerate[ix[0]] { 0.0 } else { 1.0 });
    let pad = ArrayD::from_shape_fn(IxDyn(&[n, 1]), |ix| if degenerate[ix[0]] { 1.0 } else { 0.0 });
    let denom = range.add(&Tensor::constant(pad));
    let scaled = flat
        .sub(&lo)
        .mul(&denom.powf(-1.0))
        .mul(&Tensor::constant(keep));
    Ok(scaled.reshape(&[n, h, w]))
}

/// Bilinear upsampling of a map to `(height, width)`.
pub fn upsample_cam(map: &CamMap, target: (usize, usize)) -> Result<CamMap> {
    let (th, tw) = target;
    let (h, w) = map.grid.dim();
    if th == 0 || tw == 0 {
        return Err(Error::Input("upsample target has a zero dimension".into()));
    }
    if th < h || tw < w {
        return Err(Error::Input(format!(
            "upsample target {th}x{tw} is smaller than the {h}x{w} map"
        )));
    }
    let src = map.grid.as_standard_layout();
    let plane = src.as_slice().unwrap();
    let grid = Array2::from_shape_fn((th, tw), |(y, x)| {
        bilinear_clamped(
            plane,
            h,
            w,
            resize_coord(y, h as f64, th),
            resize_coord(x, w as f64, tw),
        )
    });
    Ok(CamMap { grid, ..map.clone() })
}
