//! Dense row-major tensor with shape metadata.
//!
//! Values are stored as 64-bit floats in memory; checkpoint files narrow to
//! 32-bit at the serialization boundary. Tensors are plain values: immutable
//! sharing across threads is safe, and all reductions run in a fixed
//! element order so results reproduce bit-for-bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Mean/std pair produced by [`Tensor::reduce_moments`].
///
/// `degenerate` is set when the reduced extent is 1, where a population
/// standard deviation is not informative; it is reported as exactly 0.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: Tensor,
    pub std: Tensor,
    pub degenerate: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if expected != data.len() {
            return Err(Error::BadTensor {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = checked_len(&shape).expect("invalid shape");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = checked_len(&shape).expect("invalid shape");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Elementwise product. Shapes must match exactly; there is no
    /// broadcasting.
    pub fn elementwise_mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Population mean and population standard deviation along `axis`
    /// (divide by n, not n-1). The reduced axis is removed from the output
    /// shape. Variances are clamped at zero to absorb rounding residue.
    pub fn reduce_moments(&self, axis: usize) -> Result<Moments> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape: Vec<usize> = Vec::with_capacity(self.rank().saturating_sub(1));
        out_shape.extend_from_slice(&self.shape[..axis]);
        out_shape.extend_from_slice(&self.shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }

        let slots = outer * inner;
        let mut sum = vec![0.0f64; slots];
        let mut sq = vec![0.0f64; slots];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let s = o * inner + i;
                    sum[s] += v;
                    sq[s] += v * v;
                }
            }
        }
        let n = extent as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Moments {
            mean: Tensor::new(out_shape.clone(), mean)?,
            std: Tensor::new(out_shape, std)?,
            degenerate: extent < 2,
        })
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::BadTensor {
            shape: shape.to_vec(),
            expected: 0,
            actual: 0,
        });
    }
    Ok(shape.iter().product())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_zero_extent() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn elementwise_mul_identity_and_zero_mask() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let ones = Tensor::filled(vec![3], 1.0);
        let mask = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(x.elementwise_mul(&ones).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.elementwise_mul(&mask).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn elementwise_mul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        match a.elementwise_mul(&b) {
            Err(Error::ShapeMismatch { left, right }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn moments_constant_and_two_point() {
        let c = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let m = c.reduce_moments(0).unwrap();
        assert_eq!(m.mean.data(), &[1.0]);
        assert_eq!(m.std.data(), &[0.0]);
        assert!(!m.degenerate);

        let two = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
        let m = two.reduce_moments(0).unwrap();
        assert_eq!(m.mean.data(), &[1.0]);
        assert_eq!(m.std.data(), &[1.0]);
    }

    #[test]
    fn moments_extent_one_is_degenerate() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = x.reduce_moments(0).unwrap();
        assert!(m.degenerate);
        assert!(m.std.data().iter().all(|&s| s == 0.0));
        assert_eq!(m.mean.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        // Two-pass oracle: mean first, then centered squares.
        let mut rng = crate::seed::stream_rng(11, &["moments-test"]);
        use rand::Rng;
        let data: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = Tensor::new(vec![100], data.clone()).unwrap();
        let m = x.reduce_moments(0).unwrap();

        let mean: f64 = data.iter().sum::<f64>() / 100.0;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 100.0;
        let std = var.sqrt();
        assert!((m.mean.data()[0] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((m.std.data()[0] - std).abs() <= 1e-12 * std.abs().max(1.0));
    }

    #[test]
    fn moments_axis_one_of_matrix() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = x.reduce_moments(1).unwrap();
        assert_eq!(m.mean.shape(), &[2]);
        assert_eq!(m.mean.data(), &[2.0, 5.0]);
    }
}
