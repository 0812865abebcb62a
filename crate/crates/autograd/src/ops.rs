use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::sparse::SparseMatrix;
use crate::tensor::{Op, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Sums `value` down to `shape` (the inverse of numpy-style broadcasting).
pub(crate) fn sum_to_value(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if value.shape() == shape {
        return value.clone();
    }
    let mut v = value.clone();
    while v.ndim() > shape.len() {
        v = v.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && v.shape()[i] != 1 {
            v = v.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    assert_eq!(v.shape(), shape, "cannot sum {:?} to {:?}", value.shape(), shape);
    v
}

fn binary(a: &Tensor, b: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let av = a.value();
    let bv = b.value();
    let value = if av.shape() == bv.shape() {
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
        out
    } else {
        let shape = broadcast_shape(av.shape(), bv.shape());
        let mut out = if av.shape() == shape.as_slice() { av.clone() } else { av.broadcast(IxDyn(&shape)).unwrap().to_owned() };
        out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
        out
    };
    Tensor::from_op(value, op, vec![a.clone(), b.clone()])
}

fn unary(a: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_op(a.value().mapv(f), op, vec![a.clone()])
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, Op::Div, |x, y| x / y)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, Op::Neg, |x| -x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, Op::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, Op::Sigmoid, sigmoid_f)
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large `|x|`.
    pub fn softplus(&self) -> Tensor {
        unary(self, Op::Softplus, softplus_f)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, Op::Tanh, f64::tanh)
    }

    pub fn sin(&self) -> Tensor {
        unary(self, Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        unary(self, Op::Cos, f64::cos)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, Op::Abs, f64::abs)
    }

    pub fn square(&self) -> Tensor {
        unary(self, Op::Square, |x| x * x)
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(self, Op::LeakyRelu(slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, Op::Clamp(lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, Op::Scale(c), move |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, Op::AddScalar, move |x| x + c)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
        let value = a.dot(&b).into_dyn();
        Tensor::from_op(value, Op::MatMul, vec![self.clone(), other.clone()])
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "t() requires a 2-D tensor");
        let value = self.value().t().as_standard_layout().into_owned();
        Tensor::from_op(value, Op::Transpose, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?}", self.shape(), shape);
        if shape == self.shape() {
            return self.clone();
        }
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape of standard-layout array");
        Tensor::from_op(value, Op::Reshape, vec![self.clone()])
    }

    pub fn sum(&self) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(value, Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let mut value = self.value().sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        Tensor::from_op(value, Op::SumAxis(axis, keepdim), vec![self.clone()])
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
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
        Tensor::from_op(value, Op::BroadcastTo, vec![self.clone()])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_value(self.value(), shape);
        Tensor::from_op(value, Op::SumTo, vec![self.clone()])
    }

    /// Applies a constant sparse matrix to the rows of a 2-D tensor: `S · self`.
    pub fn spmm(&self, s: &SparseMatrix) -> Tensor {
        assert_eq!(self.ndim(), 2, "spmm operand must be 2-D");
        let width = self.shape()[1];
        assert_eq!(self.shape()[0], s.cols(), "spmm: matrix has {} cols, operand {} rows", s.cols(), self.shape()[0]);
        let x = self.value().as_standard_layout();
        let out = s.csr().apply(x.as_slice().unwrap(), width);
        let value = ArrayD::from_shape_vec(IxDyn(&[s.rows(), width]), out).unwrap();
        Tensor::from_op(value, Op::Spmm(s.clone()), vec![self.clone()])
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        if start == 0 && len == self.shape()[axis] {
            return self.clone();
        }
        let value = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Tensor::from_op(value, Op::Narrow { axis, start }, vec![self.clone()])
    }

    /// Zero-pads along `axis` to length `total`, placing `self` at offset `before`.
    pub fn pad(&self, axis: usize, before: usize, total: usize) -> Tensor {
        let n = self.shape()[axis];
        assert!(before + n <= total);
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value.slice_axis_mut(Axis(axis), Slice::from(before..before + n)).assign(self.value());
        Tensor::from_op(value, Op::Pad { axis, before }, vec![self.clone()])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        Tensor::from_op(value, Op::Concat { axis }, parts.to_vec())
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
