//! Central finite-difference verification of the analytic gradients.
//!
//! The check runs entirely at f64: the network parameters are perturbed one
//! scalar at a time and the loss is re-evaluated, so the only error sources
//! are O(h^2) truncation and f64 rounding.

use super::{NetError, Network};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Worst relative disagreement seen in one layer's parameter tensors.
#[derive(Debug, Clone)]
pub struct LayerGradReport {
    pub layer: usize,
    pub kind: String,
    pub max_rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_layer: Vec<LayerGradReport>,
    pub max_rel: f64,
    pub params_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel < tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - n).abs() / denom.max(1e-8)
    }
}

/// Compares analytic parameter gradients against central finite differences.
///
/// `loss` maps the pre-softmax logits (or the head output when the net has
/// no softmax) to the scalar loss and its gradient at that tensor. The
/// report is always produced; use `passes` to gate on a tolerance.
pub fn grad_check<L>(
    net: &Network<f64>,
    input: &Tensor<f64>,
    covariate: Option<f64>,
    loss: L,
    step: f64,
) -> Result<GradCheckReport, NetError>
where
    L: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    if net.param_count() >= 100_000 {
        return Err(NetError::InvalidSpec(format!(
            "grad_check enumerates parameters; {} is too many (limit 1e5)",
            net.param_count()
        )));
    }
    let mut work = net.clone();
    work.zero_grads();
    let cache = work.forward_cached(input, covariate)?;
    let (_, dldz) = loss(cache.logits(&work));
    work.backward_from_logits(&cache, &dldz)?;

    let eval = |w: &Network<f64>| -> Result<f64, NetError> {
        let c = w.forward_cached(input, covariate)?;
        Ok(loss(c.logits(w)).0)
    };

    let mut per_layer = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for li in 0..work.spec.layers.len() {
        let mut layer_worst = 0.0f64;
        for ti in 0..work.params()[li].len() {
            for k in 0..work.params()[li][ti].len() {
                let orig = work.params()[li][ti].data()[k];
                work.params_mut()[li][ti].data_mut()[k] = orig + step;
                let lp = eval(&work)?;
                work.params_mut()[li][ti].data_mut()[k] = orig - step;
                let lm = eval(&work)?;
                work.params_mut()[li][ti].data_mut()[k] = orig;
                let numeric = (lp - lm) / (2.0 * step);
                let analytic = work.params()[li][ti].grad().unwrap()[k];
                let re = rel_err(analytic, numeric);
                layer_worst = layer_worst.max(re);
                checked += 1;
            }
        }
        per_layer.push(LayerGradReport {
            layer: li,
            kind: work.spec.layers[li].kind_name().into(),
            max_rel: layer_worst,
        });
        max_rel = max_rel.max(layer_worst);
    }
    Ok(GradCheckReport {
        per_layer,
        max_rel,
        params_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};

    fn f64_net(spec: NetworkSpec) -> Network<f64> {
        Network::init(spec).unwrap().cast::<f64>()
    }

    #[test]
    fn linear_net_with_abs_loss_checks_out() {
        // MAE-style loss away from the kink.
        let net = f64_net(NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense { out: 1, bias: true }],
            seed: 11,
        });
        let input = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let target = 5.0; // far from any prediction of a fresh net
        let report = grad_check(
            &net,
            &input,
            None,
            |out| {
                let pred = out.data()[0];
                let sign = if pred > target {
                    1.0
                } else if pred < target {
                    -1.0
                } else {
                    0.0
                };
                (
                    (pred - target).abs(),
                    Tensor::new(vec![1], vec![sign]).unwrap(),
                )
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel);
    }

    #[test]
    fn constant_loss_gives_zero_both_ways() {
        let net = f64_net(NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { out: 2, bias: true }],
            seed: 3,
        });
        let input = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            &net,
            &input,
            None,
            |out| (42.0, Tensor::zeros(vec![out.len()])),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert_eq!(report.max_rel, 0.0);
    }

    #[test]
    fn full_stack_with_squared_error_checks_out() {
        // Every layer kind in one net, gender covariate included.
        let net = f64_net(NetworkSpec {
            input_shape: vec![6, 6, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Concat { width: 4 },
                LayerSpec::Dense { out: 5, bias: true },
                LayerSpec::Softmax,
            ],
            seed: 21,
        });
        let input = Tensor::new(
            vec![6, 6, 1],
            (0..36).map(|i| ((i * 7 % 13) as f64) / 13.0 - 0.4).collect(),
        )
        .unwrap();
        // Squared error on logits against a fixed target vector.
        let target = [0.3, -0.2, 0.9, 0.1, -0.5];
        let report = grad_check(
            &net,
            &input,
            Some(1.0),
            |logits| {
                let mut l = 0.0;
                let mut g = vec![0.0; logits.len()];
                for (i, (&z, &t)) in logits.data().iter().zip(&target).enumerate() {
                    l += (z - t) * (z - t);
                    g[i] = 2.0 * (z - t);
                }
                (l, Tensor::new(vec![logits.len()], g).unwrap())
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel);
        assert_eq!(report.per_layer.len(), 6);
    }

    #[test]
    fn gmp_head_checks_out_away_from_ties() {
        let net = f64_net(NetworkSpec {
            input_shape: vec![5, 5, 2],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalMaxPool,
                LayerSpec::Dense { out: 3, bias: false },
            ],
            seed: 77,
        });
        let input = Tensor::new(
            vec![5, 5, 2],
            (0..50).map(|i| ((i * 11 % 23) as f64) / 10.0 - 1.0).collect(),
        )
        .unwrap();
        let report = grad_check(
            &net,
            &input,
            None,
            |out| {
                let l: f64 = out.data().iter().map(|v| v * v).sum();
                (
                    l,
                    Tensor::new(
                        vec![out.len()],
                        out.data().iter().map(|v| 2.0 * v).collect(),
                    )
                    .unwrap(),
                )
            },
            1e-4, // smaller step: GMP argmax must not flip under perturbation
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel);
    }
}
