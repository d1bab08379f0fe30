//! A two-convolution classifier small enough for brute-force oracles.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{self, Tensor};
use crate::backbone::{Classifier, ForwardResult, LayerId, ParamStore};
use crate::error::{Error, Result};

/// `x -> relu(conv1) [layer 1] -> relu(conv2) [layer 2] -> mean pool -> linear`.
pub struct ToyConvNet {
    params: ParamStore,
    input: (usize, usize, usize),
    num_classes: usize,
}

impl ToyConvNet {
    pub fn new(seed: u64, channels: usize, size: usize, width: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut normal = |shape: &[usize], std: f64| {
            let d = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(&mut rng))
        };
        let c1 = normal(&[width, channels, 3, 3], (2.0 / (channels * 9) as f64).sqrt());
        let c2 = normal(&[width, width, 3, 3], (2.0 / (width * 9) as f64).sqrt());
        let fw = normal(&[num_classes, width], (1.0 / width as f64).sqrt());
        let fb = normal(&[num_classes], 0.1);
        params.push("conv1.weight".into(), c1);
        params.push("conv2.weight".into(), c2);
        params.push("fc.weight".into(), fw);
        params.push("fc.bias".into(), fb);
        Self {
            params,
            input: (channels, size, size),
            num_classes,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `(channels, height, width)` of the expected input.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    fn check_layer(layer: LayerId) -> Result<()> {
        if layer.stage_index() > 2 {
            return Err(Error::Input(format!("toy model has no {layer}")));
        }
        Ok(())
    }

    fn head(&self, x: &Tensor) -> Tensor {
        autograd::linear(&autograd::global_avg_pool(x), self.params.get(2), self.params.get(3))
    }
}

impl Classifier for ToyConvNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, x: &Tensor, capture: Option<LayerId>) -> Result<ForwardResult> {
        let (c, h, w) = self.input;
        if !matches!(x.shape(), [_, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w)) {
            return Err(Error::Input(format!("toy model expects [N, {c}, {h}, {w}], got {:?}", x.shape())));
        }
        if let Some(l) = capture {
            Self::check_layer(l)?;
        }
        let a1 = autograd::conv2d(x, self.params.get(0), 1, 1).relu();
        let a2 = autograd::conv2d(&a1, self.params.get(1), 1, 1).relu();
        let logits = self.head(&a2);
        let captured = capture.map(|l| if l.stage_index() == 1 { a1.clone() } else { a2.clone() });
        Ok(ForwardResult {
            probabilities: autograd::softmax(&logits),
            logits,
            captured,
        })
    }

    fn forward_from(&self, layer: LayerId, activations: &Tensor) -> Result<Tensor> {
        Self::check_layer(layer)?;
        let a2 = if layer.stage_index() == 1 {
            autograd::conv2d(activations, self.params.get(1), 1, 1).relu()
        } else {
            activations.clone()
        };
        Ok(self.head(&a2))
    }

    fn parameters(&self) -> &ParamStore {
        &self.params
    }

    fn target_layers(&self) -> Vec<LayerId> {
        LayerId::ALL[..2].to_vec()
    }
}
