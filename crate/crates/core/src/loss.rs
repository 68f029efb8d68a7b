//! Training objective: Charbonnier reconstruction error plus the weighted
//! orthogonality penalty built from the stages' symmetry residuals.

use crate::error::{CsError, Result};
use crate::tape::{NodeId, Tape};

/// Charbonnier distance between the reconstruction and the target,
/// averaged over batch and elements.
pub fn loss_recon(tape: &mut Tape, x_hat: NodeId, x: NodeId, eps: f64) -> Result<NodeId> {
    tape.charbonnier(x_hat, x, eps)
}

/// Sum of the per-stage symmetry residuals.
pub fn loss_ortho(tape: &mut Tape, sym: &[NodeId]) -> Result<NodeId> {
    let mut it = sym.iter();
    let first = *it
        .next()
        .ok_or_else(|| CsError::parameter("orthogonality loss needs at least one stage"))?;
    it.try_fold(first, |acc, &s| tape.add(acc, s))
}

/// l_r + lambda * l_o.
pub fn loss_total(tape: &mut Tape, l_r: NodeId, l_o: NodeId, lambda: f64) -> Result<NodeId> {
    let scaled = tape.scale(l_o, lambda);
    tape.add(l_r, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn recon_of_identical_tensors_is_eps() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap());
        let l = loss_recon(&mut tape, a, b, 1e-3).unwrap();
        assert!((tape.value(l).data()[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn recon_single_element_closed_form() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let l = loss_recon(&mut tape, a, b, 1e-3).unwrap();
        assert!((tape.value(l).data()[0] - (9.0f64 + 1e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ortho_sums_stage_residuals_and_rejects_empty() {
        let mut tape = Tape::new();
        let s1 = tape.constant(Tensor::from_vec(&[1], vec![0.25]).unwrap());
        let s2 = tape.constant(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let l = loss_ortho(&mut tape, &[s1, s2]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.75]);
        assert!(matches!(
            loss_ortho(&mut tape, &[]),
            Err(CsError::Parameter(_))
        ));
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::new();
        let l_r = tape.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let l_o = tape.constant(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let t = loss_total(&mut tape, l_r, l_o, 0.01).unwrap();
        assert!((tape.value(t).data()[0] - 1.02).abs() < 1e-15);
        let z = loss_total(&mut tape, l_r, l_o, 0.0).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(l_r).data());
    }

    #[test]
    fn gradient_splits_linearly_between_terms() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap().with_requires_grad());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![5.0]).unwrap().with_requires_grad());
        let t = loss_total(&mut tape, a, b, 0.01).unwrap();
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.01]);
    }
}
