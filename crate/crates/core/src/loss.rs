//! Soft-IoU training loss and its deep-supervision combination.

use core::fmt;

use crate::graph::{Graph, GraphError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Target contains a value outside {0, 1}.
    NonBinaryTarget { index: usize, value: f32 },
    Graph(GraphError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NonBinaryTarget { index, value } => {
                write!(f, "target[{index}] = {value} is not in {{0,1}}")
            }
            LossError::Graph(e) => write!(f, "{e}"),
        }
    }
}

impl From<GraphError> for LossError {
    fn from(e: GraphError) -> Self {
        LossError::Graph(e)
    }
}

pub fn check_binary(target: &[f32]) -> Result<(), LossError> {
    for (i, &v) in target.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(LossError::NonBinaryTarget { index: i, value: v });
        }
    }
    Ok(())
}

/// `1 - (sum(p*t) + eps) / (sum(p) + sum(t) - sum(p*t) + eps)` with
/// `p = sigmoid(logits)`, averaged over the batch axis.
pub fn soft_iou_loss(
    g: &mut Graph,
    logits: TensorId,
    target: &[f32],
    eps: f32,
) -> Result<TensorId, LossError> {
    check_binary(target)?;
    let shape = g.shape(logits).to_vec();
    let n = shape[0];
    let t = g.constant(&shape, target.to_vec());
    let p = g.sigmoid(logits);
    let pt = g.mul(p, t)?;
    let inter = g.sum_per_batch(pt)?;
    let psum = g.sum_per_batch(p)?;
    let tsum = g.sum_per_batch(t)?;
    let union = g.add(psum, tsum)?;
    let union = g.sub(union, inter)?;
    let num = g.add_const(inter, eps);
    let den = g.add_const(union, eps);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    let per_sample = g.add_const(neg, 1.0);
    let total = g.sum(per_sample);
    Ok(g.scale(total, 1.0 / n as f32))
}

/// Mean of the soft-IoU loss over the main head and every auxiliary head.
pub fn deep_supervision_loss(
    g: &mut Graph,
    main: TensorId,
    aux: &[TensorId],
    target: &[f32],
    eps: f32,
) -> Result<TensorId, LossError> {
    let mut acc = soft_iou_loss(g, main, target, eps)?;
    for &a in aux {
        let l = soft_iou_loss(g, a, target, eps)?;
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / (1 + aux.len()) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use alloc::vec;
    use alloc::vec::Vec;

    fn loss_value(logits: &[f32], target: &[f32], shape: &[usize]) -> f32 {
        let mut g = Graph::new();
        let l = g.constant(shape, logits.to_vec());
        let loss = soft_iou_loss(&mut g, l, target, 1.0).unwrap();
        g.data(loss)[0]
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_loss() {
        let target = [1.0, 0.0, 0.0, 1.0];
        let logits = [100.0, -100.0, -100.0, 100.0];
        let v = loss_value(&logits, &target, &[1, 1, 2, 2]);
        assert!(v.abs() < 1e-4, "loss {v}");
    }

    #[test]
    fn all_negative_logits_against_nine_positives() {
        // p ~ 0 everywhere: loss = 1 - eps/(9+eps) = 0.9 at eps=1
        let target: Vec<f32> = (0..16).map(|i| if i < 9 { 1.0 } else { 0.0 }).collect();
        let logits = vec![-100.0f32; 16];
        let v = loss_value(&logits, &target, &[1, 1, 4, 4]);
        assert!((v - 0.9).abs() < 1e-4, "loss {v}");
    }

    #[test]
    fn uniform_half_probabilities_worked_example() {
        // p = 0.5 everywhere, one of four pixels on:
        // sum p = 2, sum t = 1, sum pt = 0.5
        // loss = 1 - (0.5 + 1) / (2 + 1 - 0.5 + 1) = 1 - 1.5/3.5
        let target = [1.0, 0.0, 0.0, 0.0];
        let logits = [0.0f32; 4];
        let v = loss_value(&logits, &target, &[1, 1, 2, 2]);
        assert!((v - (1.0 - 1.5 / 3.5)).abs() < 1e-5, "loss {v}");
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let target = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        for seed in 0..10u32 {
            let logits: Vec<f32> = (0..8)
                .map(|i| libm::sinf((seed * 8 + i) as f32 * 1.7) * 5.0)
                .collect();
            let v = loss_value(&logits, &target, &[1, 1, 2, 4]);
            assert!((0.0..1.0).contains(&v), "loss {v}");
        }
    }

    #[test]
    fn per_batch_losses_are_averaged() {
        let t0 = [1.0, 0.0, 0.0, 1.0];
        let t1 = [0.0, 1.0, 1.0, 1.0];
        let l0 = [2.0, -1.0, 0.5, 1.0];
        let l1 = [-0.5, 0.25, 3.0, -2.0];
        let a = loss_value(&l0, &t0, &[1, 1, 2, 2]);
        let b = loss_value(&l1, &t1, &[1, 1, 2, 2]);
        let mut both = l0.to_vec();
        both.extend_from_slice(&l1);
        let mut target = t0.to_vec();
        target.extend_from_slice(&t1);
        let v = loss_value(&both, &target, &[2, 1, 2, 2]);
        assert!((v - (a + b) / 2.0).abs() < 1e-5);
    }

    #[test]
    fn deep_supervision_is_mean_over_heads() {
        let target = [1.0, 0.0, 0.0, 1.0];
        let main = [2.0f32, -1.0, 0.5, 1.0];
        let aux = [[-0.5f32, 0.25, 3.0, -2.0], [0.1, 0.2, -0.3, 0.4]];
        let mut expect = loss_value(&main, &target, &[1, 1, 2, 2]);
        for a in &aux {
            expect += loss_value(a, &target, &[1, 1, 2, 2]);
        }
        expect /= 3.0;

        let mut g = Graph::new();
        let m = g.constant(&[1, 1, 2, 2], main.to_vec());
        let heads: Vec<_> = aux
            .iter()
            .map(|a| g.constant(&[1, 1, 2, 2], a.to_vec()))
            .collect();
        let loss = deep_supervision_loss(&mut g, m, &heads, &target, 1.0).unwrap();
        assert!((g.data(loss)[0] - expect).abs() < 1e-5);
    }

    #[test]
    fn deep_supervision_without_aux_is_plain_loss() {
        let target = [1.0, 0.0, 0.0, 1.0];
        let main = [2.0f32, -1.0, 0.5, 1.0];
        let expect = loss_value(&main, &target, &[1, 1, 2, 2]);
        let mut g = Graph::new();
        let m = g.constant(&[1, 1, 2, 2], main.to_vec());
        let loss = deep_supervision_loss(&mut g, m, &[], &target, 1.0).unwrap();
        assert!((g.data(loss)[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let mut g = Graph::new();
        let l = g.constant(&[1, 1, 2, 2], vec![0.0; 4]);
        let err = soft_iou_loss(&mut g, l, &[1.0, 0.5, 0.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(
            err,
            LossError::NonBinaryTarget { index: 1, value } if (value - 0.5).abs() < 1e-6
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let target = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let point = [0.3f32, -0.7, 1.2, 0.05, -1.5, 0.8, -0.2, 0.6];
        let worst = grad_check(
            |g, l| soft_iou_loss(g, l, &target, 1.0).map_err(|_| crate::graph::GraphError::EmptyOutput { op: "loss" }),
            &point,
            &[2, 1, 2, 2],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(worst < 1e-3, "worst rel err {worst}");
    }
}
