//! Central finite-difference verification of the tape's backward rules.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, TensorId};
use crate::loss::soft_iou_loss;

/// Default probe step for f32 precision.
pub const DEFAULT_EPS: f32 = 1e-3;

/// Relative error between analytic and numeric derivatives:
/// `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / 1.0f32.max(analytic.abs()).max(numeric.abs())
}

/// Checks d(f)/d(point) against central differences, coordinate by
/// coordinate. `f` must build a scalar from the single leaf it is given.
/// Returns the max relative error over all coordinates.
pub fn grad_check<F>(
    f: F,
    point: &[f32],
    shape: &[usize],
    eps: f32,
) -> Result<f32, GraphError>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId, GraphError>,
{
    assert!(eps > 0.0);
    let eval = |data: Vec<f32>| -> Result<f32, GraphError> {
        let mut g = Graph::new();
        let x = g.leaf(shape, data, false);
        let y = f(&mut g, x)?;
        Ok(g.data(y)[0])
    };

    let mut g = Graph::new();
    let x = g.leaf(shape, point.to_vec(), true);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf requires_grad").to_vec();

    let mut max_err = 0f32;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += eps;
        let mut minus = point.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Finite-difference check over an arbitrary parameter vector owned by the
/// caller. `eval` recomputes the scalar objective from scratch; `analytic`
/// is the already-computed gradient for the same coordinates. `coords`
/// selects which coordinates to probe (all, when it covers the range).
pub fn fd_check_coords<E>(
    mut eval: E,
    data: &mut [f32],
    analytic: &[f32],
    coords: &[usize],
    eps: f32,
) -> f32
where
    E: FnMut(&[f32]) -> f32,
{
    let mut max_err = 0f32;
    for &i in coords {
        let orig = data[i];
        data[i] = orig + eps;
        let fp = eval(data);
        data[i] = orig - eps;
        let fm = eval(data);
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    max_err
}

/// One entry of the op-level battery: worst relative error across all
/// random instances of that op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f32,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from the ReLU kink so central differences stay on
/// one side of it.
fn kink_free(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1f32..1.0);
            if rng.gen_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Distinct values with pairwise gaps well above 2*eps, so the pooling
/// argmax cannot flip during a probe.
fn separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.iter().map(|&i| i as f32 * 0.013 - 0.4).collect()
}

/// Reduces a tensor to a scalar through a fixed random weighting, so the
/// incoming gradient at the op under test is non-uniform.
fn readout(
    g: &mut Graph,
    y: TensorId,
    weights: &[f32],
) -> Result<TensorId, GraphError> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(&shape, weights.to_vec());
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Runs `instances` random finite-difference checks per differentiable op
/// and returns the worst relative error for each. Deterministic in `seed`.
pub fn op_battery(seed: u64, instances: usize) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &'static str, errs: Vec<f32>| {
        let worst = errs.into_iter().fold(0f32, f32::max);
        results.push(OpCheck { name, max_rel_err: worst });
    };

    // conv2d with dilation, checked w.r.t. input and w.r.t. weights
    let mut errs = Vec::new();
    for k in 0..instances {
        let dilation = 1 + k % 3;
        let (cin, cout, h, w) = (2usize, 3usize, 7usize, 6usize);
        let kernel = uniform(&mut rng, cout * cin * 9, -0.5, 0.5);
        let bias = uniform(&mut rng, cout, -0.5, 0.5);
        let input = uniform(&mut rng, cin * h * w, -1.0, 1.0);
        let rd = uniform(&mut rng, cout * h * w, -1.0, 1.0);
        let wrt_input = grad_check(
            |g, x| {
                let kw = g.constant(&[cout, cin, 3, 3], kernel.clone());
                let b = g.constant(&[cout], bias.clone());
                let y = g.conv2d(x, kw, b, 1, dilation, dilation)?;
                readout(g, y, &rd)
            },
            &input,
            &[1, cin, h, w],
            DEFAULT_EPS,
        )
        .unwrap();
        let wrt_weight = grad_check(
            |g, kw| {
                let x = g.constant(&[1, cin, h, w], input.clone());
                let b = g.constant(&[cout], bias.clone());
                let y = g.conv2d(x, kw, b, 1, dilation, dilation)?;
                readout(g, y, &rd)
            },
            &kernel,
            &[cout, cin, 3, 3],
            DEFAULT_EPS,
        )
        .unwrap();
        errs.push(wrt_input.max(wrt_weight));
    }
    run("conv2d_dilated", errs);

    // pointwise conv
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (cin, cout, h, w) = (3usize, 2usize, 5usize, 5usize);
        let kernel = uniform(&mut rng, cout * cin, -0.5, 0.5);
        let bias = uniform(&mut rng, cout, -0.5, 0.5);
        let input = uniform(&mut rng, cin * h * w, -1.0, 1.0);
        let rd = uniform(&mut rng, cout * h * w, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let kw = g.constant(&[cout, cin, 1, 1], kernel.clone());
                    let b = g.constant(&[cout], bias.clone());
                    let y = g.conv2d(x, kw, b, 1, 0, 1)?;
                    readout(g, y, &rd)
                },
                &input,
                &[1, cin, h, w],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("pointwise_conv", errs);

    // fully connected
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (m, kdim) = (4usize, 6usize);
        let wdat = uniform(&mut rng, m * kdim, -0.5, 0.5);
        let bias = uniform(&mut rng, m, -0.5, 0.5);
        let input = uniform(&mut rng, kdim, -1.0, 1.0);
        let rd = uniform(&mut rng, m, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let w = g.constant(&[m, kdim], wdat.clone());
                    let b = g.constant(&[m], bias.clone());
                    let y = g.linear(x, w, b)?;
                    readout(g, y, &rd)
                },
                &input,
                &[1, kdim],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("fully_connected", errs);

    // softmax over the last axis
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (rows, cols) = (3usize, 5usize);
        let input = uniform(&mut rng, rows * cols, -2.0, 2.0);
        let rd = uniform(&mut rng, rows * cols, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let y = g.softmax(x, 1)?;
                    readout(g, y, &rd)
                },
                &input,
                &[rows, cols],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("softmax", errs);

    // batched matmul
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (b, m, kdim, n) = (2usize, 3usize, 4usize, 3usize);
        let rhs = uniform(&mut rng, b * kdim * n, -1.0, 1.0);
        let lhs = uniform(&mut rng, b * m * kdim, -1.0, 1.0);
        let rd = uniform(&mut rng, b * m * n, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let r = g.constant(&[b, kdim, n], rhs.clone());
                    let y = g.bmm(x, r)?;
                    readout(g, y, &rd)
                },
                &lhs,
                &[b, m, kdim],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("batched_matmul", errs);

    // 2x2 maxpool
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (c, h, w) = (2usize, 8usize, 8usize);
        let input = separated(&mut rng, c * h * w);
        let rd = uniform(&mut rng, c * h * w / 4, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let y = g.maxpool2x2(x)?;
                    readout(g, y, &rd)
                },
                &input,
                &[1, c, h, w],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("maxpool2x2", errs);

    // bilinear 2x upsample
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (c, h, w) = (2usize, 4usize, 5usize);
        let input = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let rd = uniform(&mut rng, c * h * w * 4, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let y = g.upsample_bilinear2x(x)?;
                    readout(g, y, &rd)
                },
                &input,
                &[1, c, h, w],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("upsample_bilinear2x", errs);

    // relu, away from the kink
    let mut errs = Vec::new();
    for _ in 0..instances {
        let n = 24usize;
        let input = kink_free(&mut rng, n);
        let rd = uniform(&mut rng, n, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let y = g.relu(x);
                    readout(g, y, &rd)
                },
                &input,
                &[n],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("relu", errs);

    // sigmoid
    let mut errs = Vec::new();
    for _ in 0..instances {
        let n = 24usize;
        let input = uniform(&mut rng, n, -3.0, 3.0);
        let rd = uniform(&mut rng, n, -1.0, 1.0);
        errs.push(
            grad_check(
                |g, x| {
                    let y = g.sigmoid(x);
                    readout(g, y, &rd)
                },
                &input,
                &[n],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("sigmoid", errs);

    // soft IoU loss over logits
    let mut errs = Vec::new();
    for _ in 0..instances {
        let n = 16usize;
        let target: Vec<f32> = (0..n)
            .map(|_| if rng.gen_range(0..2) == 0 { 0.0 } else { 1.0 })
            .collect();
        let input = uniform(&mut rng, n, -2.0, 2.0);
        errs.push(
            grad_check(
                |g, x| {
                    soft_iou_loss(g, x, &target, 1.0)
                        .map_err(|_| GraphError::EmptyOutput { op: "loss" })
                },
                &input,
                &[1, 1, 4, 4],
                DEFAULT_EPS,
            )
            .unwrap(),
        );
    }
    run("soft_iou_loss", errs);

    results
}

/// End-to-end finite-difference check of the assembled network at C=4,
/// 16x16, probing `coords_per_param` scattered coordinates of every
/// parameter tensor against the analytic gradient of the scaled logit sum
/// (main plus auxiliary heads). Returns the worst relative error.
///
/// The readout is the logit sum scaled well below 1. A raw sum reaches
/// magnitudes in the thousands at init, and forward-pass f32 rounding
/// noise grows with that magnitude until it swamps the finite-difference
/// probe; the scale factor bounds the noise without changing which
/// backward rules the check exercises.
pub fn full_network_check(seed: u64, coords_per_param: usize) -> f32 {
    use crate::model::{AbcConfig, AbcModel};
    use crate::params::ForwardCtx;

    const READOUT_SCALE: f32 = 1.0 / 1048576.0;

    fn objective(model: &AbcModel, image: &[f32]) -> f32 {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[1, 1, 16, 16], image.to_vec());
        let out = model.forward(&mut g, &mut ctx, x).unwrap();
        let mut total = g.sum(out.main_logits);
        for &a in &out.aux_logits {
            let s = g.sum(a);
            total = g.add(total, s).unwrap();
        }
        let scaled = g.scale(total, READOUT_SCALE);
        g.data(scaled)[0]
    }

    let mut model = AbcModel::new(AbcConfig::new(4, 16, 16), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = uniform(&mut rng, 256, 0.0, 1.0);

    // analytic gradients in one backward pass
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::new(&model.store);
    let x = g.constant(&[1, 1, 16, 16], image.clone());
    let out = model.forward(&mut g, &mut ctx, x).unwrap();
    let mut total = g.sum(out.main_logits);
    for &a in &out.aux_logits {
        let s = g.sum(a);
        total = g.add(total, s).unwrap();
    }
    let scaled = g.scale(total, READOUT_SCALE);
    g.backward(scaled).unwrap();
    let param_ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let grads: Vec<Vec<f32>> = param_ids.iter().map(|&id| ctx.grad(&g, &model.store, id)).collect();

    let mut worst = 0f32;
    for (i, &id) in param_ids.iter().enumerate() {
        let n = model.store.get(id).data.len();
        let mut coords: Vec<usize> = Vec::new();
        for _ in 0..coords_per_param.min(n) {
            coords.push(rng.gen_range(0..n));
        }
        coords.sort_unstable();
        coords.dedup();
        let analytic = grads[i].clone();
        // probe through the store, rebuilding the forward pass each time
        for &c in &coords {
            let orig = model.store.get(id).data[c];
            model.store.get_mut(id).data[c] = orig + DEFAULT_EPS;
            let fp = objective(&model, &image);
            model.store.get_mut(id).data[c] = orig - DEFAULT_EPS;
            let fm = objective(&model, &image);
            model.store.get_mut(id).data[c] = orig;
            let numeric = (fp - fm) / (2.0 * DEFAULT_EPS);
            worst = worst.max(rel_err(analytic[c], numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_and_is_deterministic() {
        let a = op_battery(7, 2);
        let b = op_battery(7, 2);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
            assert!(x.max_rel_err < 1e-3, "{}: {}", x.name, x.max_rel_err);
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let worst = full_network_check(3, 2);
        assert!(worst < 1e-3, "worst rel err {worst}");
    }
}
