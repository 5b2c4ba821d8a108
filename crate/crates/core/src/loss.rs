//! The weighted CTC/attention objective.

use crate::autograd::Var;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_att: f64,
    pub alpha: f64,
    pub l_joint: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "ctc weight {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `alpha · l_ctc + (1 - alpha) · l_att`.
pub fn joint_loss(l_ctc: f64, l_att: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_ctc + (1.0 - alpha) * l_att)
}

/// Differentiable form of [`joint_loss`], with its breakdown.
pub fn joint_loss_var(l_ctc: &Var, l_att: &Var, alpha: f64) -> Result<(Var, LossBreakdown)> {
    check_alpha(alpha)?;
    let joint = l_ctc.scale(alpha)?.add(&l_att.scale(1.0 - alpha)?)?;
    let breakdown = LossBreakdown {
        l_ctc: l_ctc.item()?,
        l_att: l_att.item()?,
        alpha,
        l_joint: joint.item()?,
    };
    Ok((joint, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn convex_combination() {
        assert!((joint_loss(2.0, 1.0, 0.3).unwrap() - 1.3).abs() < 1e-15);
        assert_eq!(joint_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(joint_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert!(joint_loss(2.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn gradient_splits_by_weight() {
        let c = Var::leaf(Tensor::scalar(2.0));
        let a = Var::leaf(Tensor::scalar(1.0));
        let (j, b) = joint_loss_var(&c, &a, 0.3).unwrap();
        assert_eq!(b.l_joint, j.item().unwrap());
        let g = j.backward().unwrap();
        assert_eq!(g.get(&c).unwrap().item().unwrap(), 0.3);
        assert_eq!(g.get(&a).unwrap().item().unwrap(), 0.7);
    }
}
