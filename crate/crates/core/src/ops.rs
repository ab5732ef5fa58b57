//! Plain-tensor entry points for the differentiable operations.
//!
//! Each runs the same recorded operation the tape uses, so forward values
//! here and inside a model are computed by one implementation.

use crate::error::Result;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn silu(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let out = tape.silu(vx);
    tape.value(out).clone()
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg) = (tape.leaf(x.clone()), tape.leaf(gain.clone()));
    let out = tape.rms_norm(vx, vg)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    reduction: Reduction,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vl = tape.leaf(logits.clone());
    let out = tape.cross_entropy(vl, targets, mask, reduction)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity_and_zero() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let zeros = Tensor::from_rows(&[&[0.0], &[0.0]]).unwrap();
        assert_eq!(matmul(&row, &zeros).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn silu_values() {
        let out = silu(&Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(out.data()[0], 0.0);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out.data()[1] - oracle).abs() < 1e-15);
        assert!((out.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_constant_and_zero_rows() {
        let gain = Tensor::filled(&[4], 1.0);
        let out = rms_norm(&Tensor::filled(&[1, 4], -2.5), &gain).unwrap();
        for &v in out.data() {
            assert!((v + 1.0).abs() < 1e-6);
        }
        let out = rms_norm(&Tensor::zeros(&[1, 4]), &gain).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(rms_norm(&Tensor::zeros(&[1, 4]), &Tensor::filled(&[3], 1.0)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let logits = Tensor::zeros(&[3, 8]);
        let loss = softmax_cross_entropy(&logits, &[0, 5, 7], &[true; 3], Reduction::Mean).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-14);
        let sum = softmax_cross_entropy(&logits, &[0, 5, 7], &[true; 3], Reduction::Sum).unwrap();
        assert!((sum - 3.0 * 8f64.ln()).abs() < 1e-13);

        let mut row = vec![0.0; 8];
        row[2] = 50.0;
        let logits = Tensor::matrix(1, 8, row).unwrap();
        let loss = softmax_cross_entropy(&logits, &[2], &[true], Reduction::Mean).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::zeros(&[1, 4]);
        let err = softmax_cross_entropy(&logits, &[4], &[true], Reduction::Mean).unwrap_err();
        assert!(matches!(err, Error::Index { index: 4, bound: 4, .. }));
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let logits = Tensor::from_rows(&[&[5.0, 0.0], &[0.0, 0.0]]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[1, 0], &[false, true], Reduction::Mean).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }
}
