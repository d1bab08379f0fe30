//! Network building blocks composed from the primitive ops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Axis;

use super::{Tensor, PAD_INDEX};

type ColsKey = (usize, usize, usize, usize, usize, usize, usize);

thread_local! {
    static IM2COL_CACHE: RefCell<HashMap<ColsKey, Rc<Vec<u32>>>> = RefCell::new(HashMap::new());
}

fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather indices laying out every receptive field of an NCHW tensor as one
/// row of `[N*Ho*Wo, C*k*k]`.
fn im2col_index(shape: [usize; 4], k: usize, stride: usize, pad: usize) -> Rc<Vec<u32>> {
    let [n, c, h, w] = shape;
    let key = (n, c, h, w, k, stride, pad);
    if let Some(idx) = IM2COL_CACHE.with(|m| m.borrow().get(&key).cloned()) {
        return idx;
    }
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut idx = Vec::with_capacity(n * ho * wo * c * k * k);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                idx.push(PAD_INDEX);
                            } else {
                                idx.push((((b * c + ch) * h + iy as usize) * w + ix as usize) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    let idx = Rc::new(idx);
    IM2COL_CACHE.with(|m| {
        let mut m = m.borrow_mut();
        if m.len() > 64 {
            m.clear();
        }
        m.insert(key, idx.clone());
    });
    idx
}

/// 2-D convolution, NCHW input and `[out, in, k, k]` weights, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let &[n, c, h, w] = x.shape() else {
        panic!("conv2d input must be NCHW, got {:?}", x.shape());
    };
    let &[o, ci, k, k2] = weight.shape() else {
        panic!("conv2d weight must be [O,C,k,k], got {:?}", weight.shape());
    };
    assert_eq!(c, ci, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);

    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.permute(&[0, 2, 3, 1]).reshape(&[n * h * w, c])
    } else {
        let idx = im2col_index([n, c, h, w], k, stride, pad);
        x.gather(idx, &[n * ho * wo, c * k * k])
    };
    let w2 = weight.reshape(&[o, c * k * k]);
    cols.matmul(&w2.t())
        .reshape(&[n, ho, wo, o])
        .permute(&[0, 3, 1, 2])
}

/// `x @ weight^T + bias` for `x: [N, in]`, `weight: [out, in]`, `bias: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    x.matmul(&weight.t()).add(bias)
}

/// Per-sample group normalization of an NCHW tensor with a per-channel affine.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let &[n, c, h, w] = x.shape() else {
        panic!("group_norm input must be NCHW");
    };
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    let grouped = x.reshape(&[n, groups, (c / groups) * h * w]);
    let centered = grouped.sub(&grouped.mean_axes(&[2], true));
    let var = centered.square().mean_axes(&[2], true);
    let normed = centered.mul(&var.add_scalar(eps).powf(-0.5));
    normed
        .reshape(&[n, c, h, w])
        .mul(&gamma.reshape(&[1, c, 1, 1]))
        .add(&beta.reshape(&[1, c, 1, 1]))
}

/// Max pooling with implicit -inf padding.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let &[n, c, h, w] = x.shape() else {
        panic!("max_pool2d input must be NCHW");
    };
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let src = x.value().as_slice().expect("standard layout");
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = PAD_INDEX;
                let mut best_v = f64::NEG_INFINITY;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best == PAD_INDEX || src[i] > best_v {
                            best = i as u32;
                            best_v = src[i];
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    x.gather(Rc::new(idx), &[n, c, ho, wo])
}

/// Spatial mean of an NCHW tensor, giving `[N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    x.mean_axes(&[2, 3], false)
}

/// Row-wise log-softmax of `[N, K]` logits.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let max = logits
        .value()
        .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .insert_axis(Axis(1));
    let shifted = logits.sub(&Tensor::constant(max));
    let lse = shifted.exp().sum_axes(&[1], true).ln();
    shifted.sub(&lse)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    log_softmax(logits).exp()
}

fn row_extreme(x: &Tensor, pick_max: bool) -> Tensor {
    let &[n, m] = x.shape() else {
        panic!("row reduction expects [N, M]");
    };
    let src = x.value().as_slice().expect("standard layout");
    let idx: Vec<u32> = (0..n)
        .map(|r| {
            let row = &src[r * m..(r + 1) * m];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                let better = if pick_max { v > row[best] } else { v < row[best] };
                if better {
                    best = j;
                }
            }
            (r * m + best) as u32
        })
        .collect();
    x.gather(Rc::new(idx), &[n, 1])
}

/// Row maxima of `[N, M]` as `[N, 1]`; the gradient goes to the first maximizer.
pub fn row_max(x: &Tensor) -> Tensor {
    row_extreme(x, true)
}

/// Row minima of `[N, M]` as `[N, 1]`.
pub fn row_min(x: &Tensor) -> Tensor {
    row_extreme(x, false)
}

/// `out[i] = x[i, columns[i]]` for `x: [N, K]`.
pub fn select_columns(x: &Tensor, columns: &[usize]) -> Tensor {
    let &[n, k] = x.shape() else {
        panic!("select_columns expects [N, K]");
    };
    assert_eq!(n, columns.len());
    let idx: Vec<u32> = columns
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            assert!(c < k, "column {c} out of range {k}");
            (i * k + c) as u32
        })
        .collect();
    x.gather(Rc::new(idx), &[n])
}
