//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is plain storage: shape, flat data, an optional gradient of
//! the same length, and an optional link to the tape node it was last bound
//! to. All compute happens in 64-bit floats; artifact files store 32-bit
//! (see the artifacts module). Values are validated to be finite everywhere
//! they enter the system — no NaN or infinity ever lives in a `Tensor`.

use crate::error::{Error, Result};
use crate::util::RunningDigest;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Link from a tensor to the tape node it was registered on.
///
/// `tape` is the originating tape's unique id, so a stale handle from an
/// earlier step can be detected instead of silently reading a wrong node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub tape: u64,
    pub node: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub tape_id: Option<TapeRef>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "{context} produced a non-finite value ({v})"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::param(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {} elements but data has {}",
                numel_of(&shape),
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(vec![], vec![value])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std.max(0.0)).expect("std is non-negative");
        let n = numel_of(&shape);
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    /// Uniform init on [-limit, limit].
    pub fn rand_uniform(shape: Vec<usize>, limit: f64, rng: &mut impl Rng) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to values; the caller must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn set_requires_grad(&mut self, value: bool) -> &mut Self {
        self.requires_grad = value;
        self
    }

    /// Drops any accumulated gradient.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulates a gradient of matching length (sets it if absent).
    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// 2D transpose as a plain value (no tape involvement).
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "transpose expects a 2D tensor, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(vec![c, r], out)
    }

    /// Plain (untracked) matrix product; the tape op shares the same kernel.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self.shape())?;
        let (k2, n) = dims2(other.shape())?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let out = matmul_2d(&self.data, &other.data, m, k, n);
        check_finite(&out, "matmul")?;
        Tensor::from_vec(vec![m, n], out)
    }

    /// SHA-256 over shape and little-endian f64 bytes. Two tensors with the
    /// same checksum are byte-identical in shape and values.
    pub fn checksum(&self) -> String {
        let mut d = RunningDigest::new();
        for dim in &self.shape {
            d.update(&(*dim as u64).to_le_bytes());
        }
        d.update_f64s(&self.data);
        d.finish()
    }

    /// Quantizes values through f32, the artifact storage precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

pub(crate) fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(format!("expected a 2D tensor, got {other:?}"))),
    }
}

/// Row-major matrix product kernel: a is m x k, b is k x n.
///
/// ikj loop order keeps the inner loop over contiguous slices so it
/// autovectorizes; this single kernel carries all the heavy compute.
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically stabilized softmax with temperature over a single row.
pub(crate) fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        max = max.max(v / temperature);
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v / temperature - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax of `logits / temperature` as a plain value. Errors on
/// non-positive temperature; output rows sum to 1 within 1e-12.
pub fn softmax_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = logits.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::shape("softmax needs at least one axis"));
    }
    let v = *shape.last().unwrap();
    let mut out = vec![0.0; logits.numel()];
    for (row_in, row_out) in logits.data().chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        softmax_row(row_in, temperature, row_out);
    }
    check_finite(&out, "softmax_temperature")?;
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape_and_values() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        // I2 x A == A
        let i2 = Tensor::identity(2);
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let prod = i2.matmul(&a).unwrap();
        assert_eq!(prod.data(), a.data());

        // Hand multiplication oracle: [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let prod = a.matmul(&b).unwrap();
        assert_eq!(prod.shape(), &[2, 1]);
        assert_eq!(prod.data(), &[17.0, 39.0]);

        // A x 0 == 0
        let z = Tensor::zeros(vec![2, 3]);
        let prod = a.matmul(&z).unwrap();
        assert!(prod.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_temperature_examples() {
        // logits [0,0], any T -> [0.5, 0.5]
        let z = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        for t in [0.5, 1.0, 7.0] {
            let p = softmax_temperature(&z, t).unwrap();
            assert!((p.data()[0] - 0.5).abs() < 1e-15);
        }

        // logits [ln 2, 0], T=1 -> [2/3, 1/3]
        let z = Tensor::from_vec(vec![2], vec![2.0_f64.ln(), 0.0]).unwrap();
        let p = softmax_temperature(&z, 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        // logits [5,-5], huge T -> uniform within 1e-5
        let z = Tensor::from_vec(vec![2], vec![5.0, -5.0]).unwrap();
        let p = softmax_temperature(&z, 1e6).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-5);

        // non-positive temperature is a parameter error
        assert!(matches!(
            softmax_temperature(&z, 0.0),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            softmax_temperature(&z, -1.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::util::seeded_rng(9);
        let z = Tensor::randn(vec![4, 7], 3.0, &mut rng);
        let p = softmax_temperature(&z, 2.0).unwrap();
        for row in p.data().chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn checksum_distinguishes_values_and_shapes() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut c = a.clone();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), c.checksum());
        c.data_mut()[0] = 1.5;
        assert_ne!(a.checksum(), c.checksum());
    }
}
