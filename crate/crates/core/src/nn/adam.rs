//! Adam with a stepwise learning-rate schedule keyed by epoch.

use super::{NetError, Network};
use serde::{Deserialize, Serialize};

/// Sorted `(epoch, learning rate)` pairs; the rate of the last pair whose
/// epoch is <= the current epoch applies.
pub type LrSchedule = Vec<(usize, f32)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers mirror the network's parameter tensors one-to-one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    pub adam: AdamParams,
    pub step: u64,
    pub m: Vec<Vec<Vec<f32>>>,
    pub v: Vec<Vec<Vec<f32>>>,
}

impl OptimizerState {
    pub fn new(net: &Network<f32>, schedule: LrSchedule) -> Result<Self, NetError> {
        if schedule.is_empty() {
            return Err(NetError::InvalidSpec("empty learning-rate schedule".into()));
        }
        if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(NetError::InvalidSpec(
                "learning-rate schedule epochs must strictly increase".into(),
            ));
        }
        if schedule.iter().any(|&(_, lr)| lr <= 0.0) {
            return Err(NetError::InvalidSpec(
                "learning rates must be positive".into(),
            ));
        }
        let zeros = |net: &Network<f32>| {
            net.params()
                .iter()
                .map(|ts| ts.iter().map(|t| vec![0.0f32; t.len()]).collect())
                .collect()
        };
        Ok(Self {
            schedule,
            adam: AdamParams::default(),
            step: 0,
            m: zeros(net),
            v: zeros(net),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let mut lr = self.schedule[0].1;
        for &(e, r) in &self.schedule {
            if e <= epoch {
                lr = r;
            }
        }
        lr
    }

    /// One Adam update from the gradients accumulated on `net`'s parameters.
    /// `context` tags the error when a non-finite gradient aborts the step.
    pub fn adam_step(
        &mut self,
        net: &mut Network<f32>,
        epoch: usize,
        context: &str,
    ) -> Result<(), NetError> {
        let lr = self.lr_at(epoch);
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, eps) = (
            self.adam.beta1 as f64,
            self.adam.beta2 as f64,
            self.adam.epsilon as f64,
        );
        let corr1 = 1.0 - b1.powf(t);
        let corr2 = 1.0 - b2.powf(t);
        for (li, ts) in net.params_mut().iter_mut().enumerate() {
            for (ti, tensor) in ts.iter_mut().enumerate() {
                let m = &mut self.m[li][ti];
                let v = &mut self.v[li][ti];
                {
                    let g = tensor.grad().ok_or_else(|| {
                        NetError::InvalidSpec("missing gradients; run backward before adam_step".into())
                    })?;
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(NetError::NonFiniteGradient {
                            layer: li,
                            tensor: ti,
                            context: context.to_string(),
                        });
                    }
                    for k in 0..g.len() {
                        let gk = g[k] as f64;
                        let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                        let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                        m[k] = mk as f32;
                        v[k] = vk as f32;
                    }
                }
                let data = tensor.data_mut();
                for k in 0..data.len() {
                    let m_hat = m[k] as f64 / corr1;
                    let v_hat = v[k] as f64 / corr2;
                    data[k] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            }
        }
        Ok(())
    }
}
