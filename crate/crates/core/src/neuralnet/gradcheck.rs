use crate::error::Result;
use crate::linalg::Matrix;

use super::FeatureNetwork;

/// The stencil is evaluated at both steps and the closer estimate is kept: a
/// ReLU switching sign inside the wider stencil spoils that estimate, while a
/// wrong backward pass disagrees at both scales.
const FD_STEPS: [f64; 2] = [1e-5, 1e-6];
const REL_FLOOR: f64 = 1e-8;
/// Finite differences carry roundoff of about `ε_mach · |L| / h`; gradients
/// below `1e-6 |L|` are compared against that floor instead.
const LOSS_FLOOR_SCALE: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, REL_FLOOR)
}

fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative discrepancy between backpropagated gradients and central
/// differences, over every parameter and every input entry.
///
/// `loss_fn` maps the train-mode network output to a scalar and its gradient
/// with respect to that output. The network itself is not modified.
pub fn grad_check<F>(net: &FeatureNetwork, batch: &Matrix, loss_fn: F) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    let loss_at = |n: &FeatureNetwork, x: &Matrix| -> Result<f64> {
        let mut n = n.clone();
        let (out, _) = n.forward_train(x)?;
        Ok(loss_fn(&out)?.0)
    };

    let mut probe = net.clone();
    let (out, cache) = probe.forward_train(batch)?;
    let (base, upstream) = loss_fn(&out)?;
    let floor = REL_FLOOR.max(LOSS_FLOOR_SCALE * base.abs());
    let (grads, dx) = probe.backward(&cache, &upstream)?;
    let analytic_params: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let mut worst = 0.0f64;
    for (slot_idx, grads) in analytic_params.iter().enumerate() {
        for (k, a) in grads.iter().enumerate() {
            let err = best_error(*a, floor, |step| {
                let mut n = net.clone();
                n.param_slots("")[slot_idx].values[k] += step;
                loss_at(&n, batch)
            })?;
            worst = worst.max(err);
        }
    }

    for i in 0..batch.rows() {
        for j in 0..batch.cols() {
            let err = best_error(dx.get(i, j), floor, |step| {
                let mut b = batch.clone();
                b.add_at(i, j, step);
                loss_at(net, &b)
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn best_error<F: FnMut(f64) -> Result<f64>>(analytic: f64, floor: f64, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for h in FD_STEPS {
        best = best.min(relative_error_floor(analytic, fourth_order(&mut f, h)?, floor));
        if best < 1e-6 {
            break;
        }
    }
    Ok(best)
}

/// Five-point central difference, `O(h⁴)` truncation error.
fn fourth_order<F: FnMut(f64) -> Result<f64>>(f: &mut F, h: f64) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, NetworkSpec};
    use crate::rng::SeededRng;

    fn quadratic(out: &Matrix) -> Result<(f64, Matrix)> {
        let v = 0.5 * out.as_slice().iter().map(|v| v * v).sum::<f64>();
        Ok((v, out.clone()))
    }

    #[test]
    fn linear_network_quadratic_loss() {
        let mut rng = SeededRng::new(3);
        let net = FeatureNetwork::new(NetworkSpec::linear(3, 2), &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(&net, &x, quadratic).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn two_layer_with_batch_norm() {
        let mut rng = SeededRng::new(11);
        let spec = NetworkSpec::mlp(3, &[6], 4, Activation::Tanh, Activation::Tanh);
        let net = FeatureNetwork::new(spec, &mut rng).unwrap();
        let x = Matrix::from_vec(7, 3, (0..21).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(&net, &x, quadratic).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_upstream_gradient_is_detected() {
        let mut rng = SeededRng::new(12);
        let spec = NetworkSpec::mlp(3, &[5], 2, Activation::Relu, Activation::Linear);
        let net = FeatureNetwork::new(spec, &mut rng).unwrap();
        let x = Matrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(&net, &x, |o: &Matrix| {
            let (v, g) = quadratic(o)?;
            Ok((v, g.scale(1.01)))
        })
        .unwrap();
        assert!(err > 5e-3, "{err}");
    }
}
