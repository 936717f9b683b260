//! Optimizer, training loop and evaluation.

mod adam;
mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Adam, AdamConfig};
pub use eval::{
    evaluate, infer_top1, mean_iou, predict_moments, recall_at, select_top1, MetricsReport, RECALL_THRESHOLDS,
};

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{
    assign_targets, iou_loss, reg_loss, total_loss, BatchTargets, Targets, DEFAULT_LAMBDA, DEFAULT_TAU_REG,
};
use crate::tensor::{BatchNormMode, Real, Tape, Tensor};

/// Optimization settings. Offset scales `alpha`/`beta` live in the model
/// config since decoding needs them too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub tau_reg: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            lr: adam.lr,
            epochs: 20,
            lambda: DEFAULT_LAMBDA,
            tau_reg: DEFAULT_TAU_REG,
            seed: 0,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.tau_reg) {
            return Err(Error::Config(format!("tau_reg must lie in [0, 1], got {}", self.tau_reg)));
        }
        self.adam().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_iou: f64,
    pub l_reg: f64,
    pub total: f64,
    pub batches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Stacks samples into `video: [B, N, d_v]` and `text: [B, d_t]`.
pub fn stack_batch<T: Real>(samples: &[&GroundingSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (vs, ts) = (first.video.shape().to_vec(), first.text.shape().to_vec());
    let mut video = Vec::with_capacity(samples.len() * first.video.numel());
    let mut text = Vec::with_capacity(samples.len() * first.text.numel());
    for s in samples {
        for (what, expected, found) in [("video", &vs, s.video.shape()), ("text", &ts, s.text.shape())] {
            if expected.as_slice() != found {
                return Err(Error::Shape {
                    what: format!("{what} features of {}", s.id),
                    expected: expected.clone(),
                    found: found.to_vec(),
                });
            }
        }
        video.extend(s.video.data().iter().map(|&v| T::of(v as f64)));
        text.extend(s.text.data().iter().map(|&v| T::of(v as f64)));
    }
    let b = samples.len();
    let mut vshape = vec![b];
    vshape.extend_from_slice(&vs);
    let mut tshape = vec![b];
    tshape.extend_from_slice(&ts);
    Ok((Tensor::new(vshape, video)?, Tensor::new(tshape, text)?))
}

/// Splits a shuffled order into batches. A trailing batch of one sample is
/// merged into the previous batch: batch norm on the length-1 top level
/// needs at least two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_iou: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Forward, backward and one optimizer update on a single batch.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Adam,
    batch: &[&GroundingSample],
    targets: &[&Targets],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let (video, text) = stack_batch::<T>(batch)?;
    let stacked = BatchTargets::<T>::stack(&targets.iter().map(|&t| t.clone()).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = tape.constant(video);
    let s = tape.constant(text);
    let out = model.forward(&mut tape, &bound, v, s, BatchNormMode::Train)?;
    let l_iou = iou_loss(&mut tape, out.iou, &stacked.iou)?;
    let l_reg = reg_loss(&mut tape, out.dc, out.dw, &stacked.dc, &stacked.dw, &stacked.mask)?;
    let total = total_loss(&mut tape, l_iou, l_reg, cfg.lambda)?;
    let losses = StepLosses {
        l_iou: tape.data(l_iou)[0].as_f64(),
        l_reg: tape.data(l_reg)[0].as_f64(),
        total: tape.data(total)[0].as_f64(),
    };
    if !losses.total.is_finite() {
        return Ok(losses);
    }
    tape.backward(total)?;
    model.accumulate_grads(&tape, &bound)?;
    optimizer.step(model.params_mut())?;
    model.zero_grad();
    Ok(losses)
}

/// Trains in place and returns per-epoch mean losses (and validation
/// metrics when `val` is given). Shuffling draws from one RNG seeded with
/// `cfg.seed`, so equal inputs give bitwise-equal results.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &[GroundingSample],
    cfg: &TrainConfig,
    val: Option<&[GroundingSample]>,
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mc = model.config().clone();
    let targets: Vec<Targets> = data
        .iter()
        .map(|s| assign_targets(model.proposals(), s.gt, mc.alpha, mc.beta, cfg.tau_reg))
        .collect::<Result<_>>()?;
    let mut optimizer = Adam::new(cfg.adam(), model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let plan = batches(&order, cfg.batch_size);
        for (batch, idx) in plan.iter().enumerate() {
            let samples: Vec<&GroundingSample> = idx.iter().map(|&i| &data[i]).collect();
            let tgt: Vec<&Targets> = idx.iter().map(|&i| &targets[i]).collect();
            let l = train_step(model, &mut optimizer, &samples, &tgt, cfg)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            sums[0] += l.l_iou;
            sums[1] += l.l_reg;
            sums[2] += l.total;
        }
        let n = plan.len() as f64;
        let val = match val {
            Some(v) => Some(evaluate(model, v, cfg.batch_size)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            l_iou: sums[0] / n,
            l_reg: sums[1] / n,
            total: sums[2] / n,
            batches: plan.len(),
            val,
        });
    }
    Ok(history)
}
