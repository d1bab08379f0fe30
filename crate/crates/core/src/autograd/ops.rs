use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

use super::{Array, Op, Tensor, PAD_INDEX};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} are not broadcastable"),
        };
    }
    out
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &y| *o = f(*o, y));
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl Op for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        match self.0 {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), needs[1].then(|| g.neg())],
            Binary::Mul => vec![
                needs[0].then(|| g.mul(&inputs[1])),
                needs[1].then(|| g.mul(&inputs[0])),
            ],
        }
    }
}

enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Exp,
    Ln,
    /// Passes gradient where the input lies in `[lo, hi]`.
    Clamp(f64, f64),
}

struct UnaryOp(Unary);

impl Op for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Powf(_) => "powf",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = &inputs[0];
        let gx = match self.0 {
            Unary::Neg => g.neg(),
            Unary::Scale(c) => g.scale(c),
            Unary::AddScalar(_) => g.clone(),
            Unary::Powf(p) => g.mul(&x.powf(p - 1.0).scale(p)),
            Unary::Exp => g.mul(out),
            Unary::Ln => g.mul(&x.powf(-1.0)),
            Unary::Clamp(lo, hi) => {
                let mask = x.value().mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                g.mul(&Tensor::constant(mask))
            }
        };
        vec![Some(gx)]
    }
}

struct SumOp {
    in_shape: Vec<usize>,
}

impl Op for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(&self.in_shape))]
    }
}

struct BroadcastOp {
    in_shape: Vec<usize>,
}

impl Op for BroadcastOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(&self.in_shape))]
    }
}

struct SumToOp {
    in_shape: Vec<usize>,
}

impl Op for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(&self.in_shape))]
    }
}

struct ReshapeOp {
    in_shape: Vec<usize>,
}

impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(&self.in_shape))]
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl Op for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.permute(&self.inverse))]
    }
}

struct MatMulOp;

impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| g.matmul(&b.t())),
            needs[1].then(|| a.t().matmul(g)),
        ]
    }
}

struct GatherOp {
    index: Rc<Vec<u32>>,
    in_shape: Vec<usize>,
}

impl Op for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.scatter_add(self.index.clone(), &self.in_shape))]
    }
}

struct ScatterAddOp {
    index: Rc<Vec<u32>>,
    in_shape: Vec<usize>,
}

impl Op for ScatterAddOp {
    fn name(&self) -> &'static str {
        "scatter_add"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.gather(self.index.clone(), &self.in_shape))]
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Binary) -> Tensor {
        if self.shape() != other.shape() {
            let shape = broadcast_shape(self.shape(), other.shape());
            let a = self.broadcast_to(&shape);
            let b = other.broadcast_to(&shape);
            return a.binary(&b, kind);
        }
        let value = match kind {
            Binary::Add => zip_map(self.value(), other.value(), |x, y| x + y),
            Binary::Sub => zip_map(self.value(), other.value(), |x, y| x - y),
            Binary::Mul => zip_map(self.value(), other.value(), |x, y| x * y),
        };
        Tensor::from_op(value, BinaryOp(kind), vec![self.clone(), other.clone()])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Mul)
    }

    fn unary(&self, kind: Unary) -> Tensor {
        let value = match kind {
            Unary::Neg => self.value().mapv(|v| -v),
            Unary::Scale(c) => self.value().mapv(|v| v * c),
            Unary::AddScalar(c) => self.value().mapv(|v| v + c),
            Unary::Powf(p) => self.value().mapv(|v| v.powf(p)),
            Unary::Exp => self.value().mapv(f64::exp),
            Unary::Ln => self.value().mapv(f64::ln),
            Unary::Clamp(lo, hi) => self.value().mapv(|v| v.clamp(lo, hi)),
        };
        Tensor::from_op(value, UnaryOp(kind), vec![self.clone()])
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Unary::AddScalar(c))
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(Unary::Powf(p))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Unary::Ln)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// Rectified linear unit. The derivative is a constant mask, so second
    /// derivatives through it vanish.
    pub fn relu(&self) -> Tensor {
        let mask = self.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.mul(&Tensor::constant(mask))
    }

    /// Multiplies by a constant array of the same shape.
    pub fn mul_const(&self, mask: Array) -> Tensor {
        self.mul(&Tensor::constant(mask))
    }

    /// Sum over `axes`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut value = self.value().clone();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let kept = Tensor::from_op(
            value,
            SumOp {
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        );
        if keepdim {
            kept
        } else {
            let shape: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !sorted.contains(i))
                .map(|(_, &d)| d)
                .collect();
            kept.reshape(&shape)
        }
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Tensor::from_op(
            value,
            BroadcastOp {
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let src = self.shape();
        let lead = src.len() - shape.len();
        let mut value = self.value().clone();
        for _ in 0..lead {
            value = value.sum_axis(Axis(0));
        }
        for (ax, &d) in shape.iter().enumerate() {
            if d == 1 && value.shape()[ax] != 1 {
                value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
        }
        assert_eq!(value.shape(), shape, "sum_to {:?} -> {:?}", src, shape);
        Tensor::from_op(
            value,
            SumToOp {
                in_shape: src.to_vec(),
            },
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        Tensor::from_op(
            value,
            ReshapeOp {
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape().len(), "permute rank mismatch");
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Tensor::from_op(value, PermuteOp { inverse }, vec![self.clone()])
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Tensor {
        self.permute(&[1, 0])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let b = other
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions differ");
        let value = a.dot(&b).into_dyn();
        Tensor::from_op(value, MatMulOp, vec![self.clone(), other.clone()])
    }

    /// `out.flat[i] = self.flat[index[i]]`, or zero where `index[i] == PAD_INDEX`.
    pub fn gather(&self, index: Rc<Vec<u32>>, out_shape: &[usize]) -> Tensor {
        let n: usize = out_shape.iter().product();
        assert_eq!(n, index.len(), "gather index length");
        let src = self.value().as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == PAD_INDEX { 0.0 } else { src[i as usize] })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), data).unwrap();
        Tensor::from_op(
            value,
            GatherOp {
                index,
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    /// Adjoint of [`Tensor::gather`]: accumulates `self.flat[i]` into `out.flat[index[i]]`.
    pub fn scatter_add(&self, index: Rc<Vec<u32>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), index.len(), "scatter index length");
        let mut out = vec![0.0; out_shape.iter().product()];
        let src = self.value().as_slice().expect("standard layout");
        for (&i, &v) in index.iter().zip(src) {
            if i != PAD_INDEX {
                out[i as usize] += v;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), out).unwrap();
        Tensor::from_op(
            value,
            ScatterAddOp {
                index,
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }
}
