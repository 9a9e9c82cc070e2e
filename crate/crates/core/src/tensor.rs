//! Dense row-major `f64` buffers and the elementwise operation set shared by
//! the optimizer interpreter and the network.
//!
//! Shapes must agree exactly. The only broadcast is scalar-with-tensor, where
//! a scalar is a tensor of shape `[]`. NaN is an ordinary value here: invalid
//! arithmetic (`sqrt(-1)`, `pow(-2, 0.5)`) produces NaN and it propagates.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("{op} takes {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Expand a scalar to `shape`; a tensor already of that shape is cloned.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if self.shape == shape {
            Ok(self.clone())
        } else if self.is_scalar() {
            Ok(Tensor::filled(shape, self.data[0]))
        } else {
            Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
            })
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok(Tensor {
                shape: self.shape.clone(),
                data,
            })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// Elementwise operations available to optimizer expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpCode {
    Add,
    Subtract,
    Multiply,
    Pow,
    Square,
    DivideNoNan,
    Sqrt,
    Negative,
    Sign,
}

impl OpCode {
    pub const ALL: [OpCode; 9] = [
        OpCode::Add,
        OpCode::Subtract,
        OpCode::Multiply,
        OpCode::Pow,
        OpCode::Square,
        OpCode::DivideNoNan,
        OpCode::Sqrt,
        OpCode::Negative,
        OpCode::Sign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCode::Add => "add",
            OpCode::Subtract => "subtract",
            OpCode::Multiply => "multiply",
            OpCode::Pow => "pow",
            OpCode::Square => "square",
            OpCode::DivideNoNan => "divide_no_nan",
            OpCode::Sqrt => "sqrt",
            OpCode::Negative => "negative",
            OpCode::Sign => "sign",
        }
    }

    pub fn from_name(name: &str) -> Option<OpCode> {
        OpCode::ALL.into_iter().find(|op| op.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            OpCode::Add | OpCode::Subtract | OpCode::Multiply | OpCode::Pow | OpCode::DivideNoNan => 2,
            OpCode::Square | OpCode::Sqrt | OpCode::Negative | OpCode::Sign => 1,
        }
    }

    pub fn apply_scalar(self, args: &[f64]) -> f64 {
        match self {
            OpCode::Add => args[0] + args[1],
            OpCode::Subtract => args[0] - args[1],
            OpCode::Multiply => args[0] * args[1],
            OpCode::Pow => args[0].powf(args[1]),
            OpCode::Square => args[0] * args[0],
            OpCode::DivideNoNan => {
                if args[1] == 0.0 {
                    0.0
                } else {
                    args[0] / args[1]
                }
            }
            OpCode::Sqrt => args[0].sqrt(),
            OpCode::Negative => -args[0],
            OpCode::Sign => sign_of(args[0]),
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else if v == 0.0 {
        0.0
    } else {
        f64::NAN
    }
}

/// Apply `op` to `args` elementwise.
pub fn elementwise(op: OpCode, args: &[&Tensor]) -> Result<Tensor, TensorError> {
    if args.len() != op.arity() {
        return Err(TensorError::Arity {
            op: op.name(),
            expected: op.arity(),
            got: args.len(),
        });
    }
    match args {
        [a] => Ok(a.map(|v| op.apply_scalar(&[v]))),
        [a, b] => a.zip_with(b, |x, y| op.apply_scalar(&[x, y])),
        _ => unreachable!("arity checked above"),
    }
}

/// `a / b` with zero wherever `b` is zero.
pub fn divide_no_nan(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    elementwise(OpCode::DivideNoNan, &[a, b])
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(a: &Tensor) -> Tensor {
    a.map(sign_of)
}

/// `c = a · b` for row-major matrices, `a` is (m, k), `b` is (k, n).
/// `trans_a`/`trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (m, k) = if trans_a { (a_dims.1, a_dims.0) } else { a_dims };
    let (k2, n) = if trans_b { (b_dims.1, b_dims.0) } else { b_dims };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };
    // SAFETY: slice lengths match the dimensions asserted above and the
    // strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn divide_no_nan_zero_denominator() {
        assert_eq!(divide_no_nan(&t(&[1.0]), &t(&[0.0])).unwrap(), t(&[0.0]));
        assert_eq!(
            divide_no_nan(&t(&[6.0, 1.0]), &t(&[2.0, 0.0])).unwrap(),
            t(&[3.0, 0.0])
        );
        assert_eq!(divide_no_nan(&t(&[2.5]), &t(&[2.5])).unwrap(), t(&[1.0]));
    }

    #[test]
    fn divide_no_nan_shape_mismatch() {
        let err = divide_no_nan(&t(&[1.0, 2.0]), &t(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn sign_values() {
        assert_eq!(sign(&t(&[-3.2, 0.0, 7.1])), t(&[-1.0, 0.0, 1.0]));
        assert_eq!(sign(&t(&[0.0])), t(&[0.0]));
    }

    #[test]
    fn unary_and_binary_ops() {
        assert_eq!(elementwise(OpCode::Square, &[&t(&[-2.0])]).unwrap(), t(&[4.0]));
        assert!(elementwise(OpCode::Sqrt, &[&t(&[-1.0])]).unwrap().data()[0].is_nan());
        assert_eq!(
            elementwise(OpCode::Pow, &[&t(&[2.0]), &t(&[3.0])]).unwrap(),
            t(&[8.0])
        );
        assert!(elementwise(OpCode::Pow, &[&t(&[-2.0]), &t(&[0.5])]).unwrap().data()[0].is_nan());
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let s = Tensor::scalar(2.0);
        let v = t(&[1.0, 3.0]);
        assert_eq!(elementwise(OpCode::Subtract, &[&v, &s]).unwrap(), t(&[-1.0, 1.0]));
        assert_eq!(elementwise(OpCode::Subtract, &[&s, &v]).unwrap(), t(&[1.0, -1.0]));
        let both = elementwise(OpCode::Multiply, &[&s, &s]).unwrap();
        assert!(both.is_scalar());
    }

    #[test]
    fn arity_checked() {
        let err = elementwise(OpCode::Add, &[&t(&[1.0])]).unwrap_err();
        assert!(matches!(err, TensorError::Arity { expected: 2, got: 1, .. }));
    }

    #[test]
    fn nan_propagates() {
        let out = elementwise(OpCode::Add, &[&t(&[f64::NAN, 1.0]), &t(&[1.0, 1.0])]).unwrap();
        assert!(out.data()[0].is_nan());
        assert_eq!(out.data()[1], 2.0);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(&a, (2, 3), false, &b, (3, 2), false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T (3x2) * a (2x3) diagonal entries are column norms
        let mut g = [0.0; 9];
        gemm(&a, (2, 3), true, &a, (2, 3), false, &mut g, 0.0);
        assert_eq!([g[0], g[4], g[8]], [17.0, 29.0, 45.0]);
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e6..1e6f64
    }

    proptest! {
        #[test]
        fn divide_no_nan_matches_division(a in finite(), b in finite().prop_filter("nonzero", |b| *b != 0.0)) {
            let out = divide_no_nan(&t(&[a]), &t(&[b])).unwrap().data()[0];
            let exact = a / b;
            prop_assert!(out == exact || (out - exact).abs() <= exact.abs() * f64::EPSILON);
        }

        #[test]
        fn add_and_multiply_commute(a in prop::collection::vec(finite(), 1..8), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + (seed + i as u64) as f64).collect();
            let (ta, tb) = (t(&a), t(&b));
            prop_assert_eq!(elementwise(OpCode::Add, &[&ta, &tb]).unwrap(), elementwise(OpCode::Add, &[&tb, &ta]).unwrap());
            prop_assert_eq!(elementwise(OpCode::Multiply, &[&ta, &tb]).unwrap(), elementwise(OpCode::Multiply, &[&tb, &ta]).unwrap());
        }

        #[test]
        fn double_negation_is_identity(a in prop::collection::vec(finite(), 1..8)) {
            let ta = t(&a);
            let twice = elementwise(OpCode::Negative, &[&elementwise(OpCode::Negative, &[&ta]).unwrap()]).unwrap();
            prop_assert_eq!(
                twice.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                ta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn sign_codomain(a in prop::collection::vec(finite(), 1..16)) {
            prop_assert!(sign(&t(&a)).data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        }
    }
}
