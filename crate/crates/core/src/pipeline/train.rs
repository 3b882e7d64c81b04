//! Phase I / Phase II training loops. Single-threaded and fully determined
//! by the config seeds.

use super::{ExperimentConfig, PipelineError};
use crate::ldl::{expectation, joint_loss, phase1_loss, soft_label, AgeDistribution, SoftLabel};
use crate::nn::{LayerSpec, Network, NetworkSpec, OptimizerState};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which Phase-1 classifier is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase1Mode {
    /// Full-size input, global max pooling: finds the most discriminative
    /// region.
    Region1,
    /// Downscaled input, global average pooling: attends the whole object.
    Hand,
    /// Same as `Region1` but trained on images with Region-1 erased.
    Erased,
}

impl Phase1Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Phase1Mode::Region1 => "region1",
            Phase1Mode::Hand => "hand",
            Phase1Mode::Erased => "erased",
        }
    }

    pub fn input_size(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Phase1Mode::Hand => cfg.localization.hand_input,
            _ => cfg.localization.full_input,
        }
    }

    fn seed_salt(&self) -> u64 {
        match self {
            Phase1Mode::Region1 => 0x5261,
            Phase1Mode::Hand => 0x4861,
            Phase1Mode::Erased => 0x4572,
        }
    }
}

/// Regression head of the Phase-2 model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Head {
    /// Softmax age distribution, trained with the joint loss, predicting
    /// the distribution's expectation.
    Expectation,
    /// Single scalar output trained with the plain absolute-error loss.
    L1,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: Option<usize>,
}

pub fn build_phase1_net(cfg: &ExperimentConfig, mode: Phase1Mode) -> NetworkSpec {
    let s = mode.input_size(cfg);
    let mut layers = Vec::new();
    for (i, &c) in cfg.phase1.channels.iter().enumerate() {
        layers.push(LayerSpec::Conv2d {
            out_channels: c,
            kernel: 3,
            stride: cfg.phase1.stride_of(i),
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(match mode {
        Phase1Mode::Hand => LayerSpec::GlobalAvgPool,
        _ => LayerSpec::GlobalMaxPool,
    });
    // bias-free head keeps the attention-map mean equal to the logit
    layers.push(LayerSpec::Dense {
        out: cfg.loss.t_max,
        bias: false,
    });
    layers.push(LayerSpec::Softmax);
    NetworkSpec {
        input_shape: vec![s, s, 1],
        layers,
        seed: cfg.phase1.seed ^ mode.seed_salt(),
    }
}

pub fn build_phase2_net(cfg: &ExperimentConfig) -> NetworkSpec {
    let s = cfg.phase2_extra.crop_size;
    let c_in = cfg.regions.len();
    let mut layers = Vec::new();
    for &c in &cfg.phase2.channels {
        layers.push(LayerSpec::Conv2d {
            out_channels: c,
            kernel: 3,
            stride: 2,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Concat {
        width: cfg.phase2_extra.gender_width,
    });
    match cfg.phase2_extra.head {
        Phase2Head::Expectation => {
            layers.push(LayerSpec::Dense {
                out: cfg.loss.t_max,
                bias: true,
            });
            layers.push(LayerSpec::Softmax);
        }
        Phase2Head::L1 => {
            layers.push(LayerSpec::Dense { out: 1, bias: true });
        }
    }
    NetworkSpec {
        input_shape: vec![s, s, c_in],
        layers,
        seed: cfg.phase2.seed ^ 0x5032,
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64 + 1) * 0x9E37_79B9));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Trains a soft-label classifier on prepared input tensors. `inputs[i]`
/// must already be resized for the mode.
pub fn train_phase1(
    cfg: &ExperimentConfig,
    mode: Phase1Mode,
    inputs: &[Tensor<f32>],
    ages: &[usize],
) -> Result<(Network<f32>, OptimizerState, TrainLog), PipelineError> {
    assert_eq!(inputs.len(), ages.len());
    let spec = build_phase1_net(cfg, mode);
    let mut net = Network::init(spec)?;
    let mut opt = OptimizerState::new(&net, cfg.phase1.lr.clone())?;
    let mut log = TrainLog::default();

    // soft labels cached per age
    let mut labels: Vec<Option<SoftLabel>> = vec![None; cfg.loss.t_max + 1];
    for &a in ages {
        if labels[a].is_none() {
            labels[a] = Some(soft_label(a, cfg.phase1_extra.soft_width, cfg.loss.t_max)?);
        }
    }

    for epoch in 0..cfg.phase1.epochs {
        let order = epoch_order(inputs.len(), cfg.phase1.seed ^ mode.seed_salt(), epoch);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.phase1.batch).enumerate() {
            net.zero_grads();
            for &i in batch {
                let cache = net.forward_cached(&inputs[i], None)?;
                let label = labels[ages[i]].as_ref().expect("label cached");
                let (loss, dldz) = phase1_loss(cache.logits(&net), label, &format!("idx{i}"))?;
                if !loss.is_finite() {
                    return Err(PipelineError::Diverged {
                        epoch,
                        batch: batch_no,
                    });
                }
                epoch_loss += loss;
                net.backward_from_logits(&cache, &dldz)?;
            }
            net.scale_grads(1.0 / batch.len() as f32);
            opt.adam_step(&mut net, epoch, &format!("epoch {epoch} batch {batch_no}"))?;
        }
        log.train_loss.push(epoch_loss / inputs.len() as f64);
    }
    Ok((net, opt, log))
}

/// One Phase-2 training sample: stacked region crops plus the gender scalar.
#[derive(Debug, Clone)]
pub struct Phase2Sample {
    pub id: String,
    pub input: Tensor<f32>,
    pub gender: f32,
    pub age: usize,
}

/// Predicted age in months from a trained Phase-2 network.
pub fn predict_age(
    net: &Network<f32>,
    head: Phase2Head,
    input: &Tensor<f32>,
    gender: f32,
    t_max: usize,
) -> Result<f64, PipelineError> {
    let out = net.forward(input, Some(gender))?;
    Ok(match head {
        Phase2Head::Expectation => expectation(&AgeDistribution::new(
            out.data().iter().map(|&v| v as f64).collect(),
        )?),
        Phase2Head::L1 => (out.data()[0] as f64).clamp(1.0, t_max as f64),
    })
}

/// Predicted age distribution (expectation head only).
pub fn predict_distribution(
    net: &Network<f32>,
    input: &Tensor<f32>,
    gender: f32,
) -> Result<AgeDistribution, PipelineError> {
    let out = net.forward(input, Some(gender))?;
    Ok(AgeDistribution::new(
        out.data().iter().map(|&v| v as f64).collect(),
    )?)
}

/// Trains the Phase-2 regressor; retains the parameters of the epoch with
/// the best validation MAE.
pub fn train_phase2(
    cfg: &ExperimentConfig,
    train: &[Phase2Sample],
    val: &[Phase2Sample],
) -> Result<(Network<f32>, OptimizerState, TrainLog), PipelineError> {
    let head = cfg.phase2_extra.head;
    let spec = build_phase2_net(cfg);
    let mut net = Network::init(spec)?;
    let mut opt = OptimizerState::new(&net, cfg.phase2.lr.clone())?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<Vec<Tensor<f32>>>)> = None;

    for epoch in 0..cfg.phase2.epochs {
        let order = epoch_order(train.len(), cfg.phase2.seed ^ 0x5032, epoch);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.phase2.batch).enumerate() {
            net.zero_grads();
            for &i in batch {
                let s = &train[i];
                let cache = net.forward_cached(&s.input, Some(s.gender))?;
                let (loss, dldz) = match head {
                    Phase2Head::Expectation => {
                        joint_loss(cache.logits(&net), s.age, &cfg.loss, &s.id)?
                    }
                    Phase2Head::L1 => {
                        let z = cache.output.data()[0] as f64;
                        let resid = z - s.age as f64;
                        let sign = if resid > 0.0 {
                            1.0
                        } else if resid < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        (
                            resid.abs(),
                            Tensor::new(vec![1], vec![sign as f32]).unwrap(),
                        )
                    }
                };
                if !loss.is_finite() {
                    return Err(PipelineError::Diverged {
                        epoch,
                        batch: batch_no,
                    });
                }
                epoch_loss += loss;
                net.backward_from_logits(&cache, &dldz)?;
            }
            net.scale_grads(1.0 / batch.len() as f32);
            opt.adam_step(&mut net, epoch, &format!("epoch {epoch} batch {batch_no}"))?;
        }
        log.train_loss.push(epoch_loss / train.len() as f64);

        if !val.is_empty() {
            let mut err = 0.0;
            for s in val {
                let pred = predict_age(&net, head, &s.input, s.gender, cfg.loss.t_max)?;
                err += (pred - s.age as f64).abs();
            }
            let val_mae = err / val.len() as f64;
            log.val_mae.push(val_mae);
            if best.as_ref().map_or(true, |(b, _)| val_mae < *b) {
                best = Some((val_mae, net.params().to_vec()));
                log.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, params)) = best {
        let spec = net.spec.clone();
        net = Network::from_params(spec, params)?;
    }
    Ok((net, opt, log))
}

/// Mean |argmax age - true age| of a classifier; coarse progress measure
/// comparable across label schemes.
pub fn classification_argmax_mae(
    net: &Network<f32>,
    inputs: &[Tensor<f32>],
    ages: &[usize],
) -> Result<f64, PipelineError> {
    let mut err = 0.0;
    for (input, &age) in inputs.iter().zip(ages) {
        let out = net.forward(input, None)?;
        let pred = crate::attention::argmax_class(&out);
        err += (pred as f64 - age as f64).abs();
    }
    Ok(err / inputs.len() as f64)
}

/// Image tensor helper: `[S,S,1]` from a grayscale image resized to `s`.
pub fn image_input(image: &crate::raster::GrayImage, s: usize) -> Result<Tensor<f32>, PipelineError> {
    let resized = if image.width() == s && image.height() == s {
        image.clone()
    } else {
        image.resize(s, s)?
    };
    Ok(Tensor::new(vec![s, s, 1], resized.data().to_vec()).expect("matching buffer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RegionChannel;
    use crate::synth::{generate, GenSpec};

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.gen = Some(GenSpec {
            seed: 5,
            ..GenSpec::default()
        });
        cfg.data.n = 80;
        cfg.split = super::super::SplitConfig {
            n_val: 10,
            n_test: 10,
            seed: 3,
        };
        cfg.phase1.epochs = 3;
        cfg.phase1.channels = vec![4, 8];
        cfg.phase2.epochs = 3;
        cfg.phase2.channels = vec![4, 8];
        cfg
    }

    #[test]
    fn phase1_smoke_run_reduces_training_loss() {
        let cfg = tiny_cfg();
        let records = generate(cfg.data.gen.as_ref().unwrap(), 60).unwrap();
        let inputs: Vec<_> = records
            .iter()
            .map(|r| image_input(&r.image, cfg.localization.full_input).unwrap())
            .collect();
        let ages: Vec<usize> = records.iter().map(|r| r.age).collect();
        let (_, _, log) = train_phase1(&cfg, Phase1Mode::Region1, &inputs, &ages).unwrap();
        assert!(log.train_loss.last().unwrap() < log.train_loss.first().unwrap());
    }

    #[test]
    fn phase1_training_is_deterministic() {
        let cfg = tiny_cfg();
        let records = generate(cfg.data.gen.as_ref().unwrap(), 40).unwrap();
        let inputs: Vec<_> = records
            .iter()
            .map(|r| image_input(&r.image, cfg.localization.hand_input).unwrap())
            .collect();
        let ages: Vec<usize> = records.iter().map(|r| r.age).collect();
        let (a, _, _) = train_phase1(&cfg, Phase1Mode::Hand, &inputs, &ages).unwrap();
        let (b, _, _) = train_phase1(&cfg, Phase1Mode::Hand, &inputs, &ages).unwrap();
        for (ta, tb) in a.params().iter().flatten().zip(b.params().iter().flatten()) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn phase2_keeps_best_validation_epoch() {
        let mut cfg = tiny_cfg();
        cfg.regions = vec![RegionChannel::Original];
        cfg.phase2.epochs = 4;
        let records = generate(cfg.data.gen.as_ref().unwrap(), 50).unwrap();
        let samples: Vec<Phase2Sample> = records
            .iter()
            .map(|r| Phase2Sample {
                id: r.id.clone(),
                input: image_input(&r.image, cfg.phase2_extra.crop_size).unwrap(),
                gender: r.gender as f32,
                age: r.age,
            })
            .collect();
        let (net, _, log) = train_phase2(&cfg, &samples[..40], &samples[40..]).unwrap();
        assert_eq!(log.val_mae.len(), 4);
        let best = log.best_epoch.unwrap();
        let best_mae = log.val_mae[best];
        for &m in &log.val_mae {
            assert!(best_mae <= m + 1e-12);
        }
        // the retained parameters reproduce the best validation MAE
        let mut err = 0.0;
        for s in &samples[40..] {
            let p = predict_age(
                &net,
                cfg.phase2_extra.head,
                &s.input,
                s.gender,
                cfg.loss.t_max,
            )
            .unwrap();
            err += (p - s.age as f64).abs();
        }
        assert!((err / 10.0 - best_mae).abs() < 1e-9);
    }

    #[test]
    fn l1_head_trains_and_predicts_in_range() {
        let mut cfg = tiny_cfg();
        cfg.regions = vec![RegionChannel::Original];
        cfg.phase2_extra.head = Phase2Head::L1;
        let records = generate(cfg.data.gen.as_ref().unwrap(), 30).unwrap();
        let samples: Vec<Phase2Sample> = records
            .iter()
            .map(|r| Phase2Sample {
                id: r.id.clone(),
                input: image_input(&r.image, cfg.phase2_extra.crop_size).unwrap(),
                gender: r.gender as f32,
                age: r.age,
            })
            .collect();
        let (net, _, _) = train_phase2(&cfg, &samples, &samples[..5]).unwrap();
        for s in &samples[..5] {
            let p =
                predict_age(&net, Phase2Head::L1, &s.input, s.gender, cfg.loss.t_max).unwrap();
            assert!((1.0..=240.0).contains(&p));
        }
    }
}
