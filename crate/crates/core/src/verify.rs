//! Fixed finite-difference suite over every tape op, the losses and a
//! tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Bound, Model, ModelConfig};
use crate::objective::{iou_loss, reg_loss, total_loss, DEFAULT_LAMBDA};
use crate::tensor::{BatchNormMode, GradCheck, RunningStats, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const DEFAULT_SEEDS: u64 = 10;
/// Analytic gradients of the op named by `SuiteOptions::corrupt` are scaled
/// by this factor.
pub const CORRUPTION_FACTOR: f64 = 1.01;

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    build: fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Objective),
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn obj(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Objective {
    Box::new(f)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "add",
            build: |r| (vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.add(v[0], v[1])?))),
        },
        Case {
            op: "add_broadcast",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 1], -2.0, 2.0)], obj(|t, v| Ok(t.add(v[0], v[1])?))),
        },
        Case {
            op: "sub",
            build: |r| (vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[1, 4], -2.0, 2.0)], obj(|t, v| Ok(t.sub(v[0], v[1])?))),
        },
        Case {
            op: "mul",
            build: |r| (vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.mul(v[0], v[1])?))),
        },
        Case {
            op: "mul_broadcast",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 1], -2.0, 2.0)], obj(|t, v| Ok(t.mul(v[0], v[1])?))),
        },
        Case {
            op: "scale",
            build: |r| (vec![uniform(r, &[5], -2.0, 2.0)], obj(|t, v| Ok(t.scale(v[0], -1.7)?))),
        },
        Case {
            op: "shift",
            build: |r| (vec![uniform(r, &[5], -2.0, 2.0)], obj(|t, v| Ok(t.shift(v[0], 0.3)?))),
        },
        Case {
            op: "relu",
            build: |r| (vec![away_from(r, &[4, 5], -2.0, 2.0, &[0.0], 0.05)], obj(|t, v| Ok(t.relu(v[0])?))),
        },
        Case {
            op: "sigmoid",
            build: |r| (vec![uniform(r, &[4, 5], -6.0, 6.0)], obj(|t, v| Ok(t.sigmoid(v[0])?))),
        },
        Case {
            op: "exp",
            build: |r| (vec![uniform(r, &[4, 5], -2.0, 2.0)], obj(|t, v| Ok(t.exp(v[0])?))),
        },
        Case {
            op: "log",
            build: |r| (vec![uniform(r, &[4, 5], 0.1, 3.0)], obj(|t, v| Ok(t.log(v[0])?))),
        },
        Case {
            op: "clamp",
            build: |r| {
                let x = away_from(r, &[4, 5], -1.0, 2.0, &[0.2, 0.8], 0.05);
                (vec![x], obj(|t, v| Ok(t.clamp(v[0], 0.2, 0.8)?)))
            },
        },
        Case {
            op: "smooth_l1",
            build: |r| (vec![away_from(r, &[4, 5], -3.0, 3.0, &[-1.0, 1.0], 0.05)], obj(|t, v| Ok(t.smooth_l1(v[0])?))),
        },
        Case {
            op: "sum",
            build: |r| (vec![uniform(r, &[3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.sum(v[0])?))),
        },
        Case {
            op: "mean",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.mean(v[0], &[0, 2])?))),
        },
        Case {
            op: "mean_all",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.mean_all(v[0])?))),
        },
        Case {
            op: "linear",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)];
                (inputs, obj(|t, v| Ok(t.linear(v[0], v[1], v[2])?)))
            },
        },
        Case {
            op: "conv1d",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3, 6], -1.0, 1.0), uniform(r, &[4, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
                (inputs, obj(|t, v| Ok(t.conv1d(v[0], v[1], v[2], 1, 1)?)))
            },
        },
        Case {
            op: "conv1d_strided",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3, 7], -1.0, 1.0), uniform(r, &[2, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)];
                (inputs, obj(|t, v| Ok(t.conv1d(v[0], v[1], v[2], 2, 1)?)))
            },
        },
        Case {
            op: "batchnorm1d_train",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)];
                let f = obj(|t, v| {
                    let mut stats = RunningStats::standard(3);
                    Ok(t.batchnorm1d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train)?)
                });
                (inputs, f)
            },
        },
        Case {
            op: "batchnorm1d_eval",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)];
                let stats = RunningStats {
                    mean: vec![r.random_range(-0.5..0.5); 3],
                    var: vec![r.random_range(0.5..2.0); 3],
                    initialized: true,
                };
                let f = obj(move |t, v| {
                    let mut stats = stats.clone();
                    Ok(t.batchnorm1d(v[0], v[1], v[2], &mut stats, BatchNormMode::Eval)?)
                });
                (inputs, f)
            },
        },
        Case {
            op: "swap_last2",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.swap_last2(v[0])?))),
        },
        Case {
            op: "reshape",
            build: |r| (vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], obj(|t, v| Ok(t.reshape(v[0], vec![6, 4])?))),
        },
        Case {
            op: "narrow",
            build: |r| (vec![uniform(r, &[2, 6, 3], -2.0, 2.0)], obj(|t, v| Ok(t.narrow(v[0], 1, 2, 3)?))),
        },
        Case {
            op: "concat",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 5], -2.0, 2.0)];
                (inputs, obj(|t, v| Ok(t.concat(&[v[0], v[1]], 1)?)))
            },
        },
        Case {
            op: "iou_loss",
            build: |r| {
                let theta = uniform(r, &[2, 5], 0.05, 0.95);
                let target = uniform(r, &[2, 5], 0.0, 1.0);
                (vec![theta], obj(move |t, v| iou_loss(t, v[0], &target)))
            },
        },
        Case {
            op: "reg_loss",
            build: |r| {
                let inputs = vec![uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)];
                // Targets keep every residual away from the smooth L1 kinks.
                let residual = |r: &mut ChaCha8Rng| away_from(r, &[2, 5], -2.5, 2.5, &[-1.0, 1.0], 0.05);
                let (rc, rw) = (residual(r), residual(r));
                let tc = add_tensors(&inputs[0], &rc);
                let tw = add_tensors(&inputs[1], &rw);
                let mask = Tensor::new(vec![2, 5], (0..10).map(|i| f64::from(i % 3 != 0)).collect()).expect("sized");
                (inputs, obj(move |t, v| reg_loss(t, v[0], v[1], &tc, &tw, &mask)))
            },
        },
        Case {
            op: "total_loss",
            build: |r| {
                let inputs = vec![Tensor::scalar(r.random_range(0.1..1.0)), Tensor::scalar(r.random_range(0.1..5.0))];
                (inputs, obj(|t, v| total_loss(t, v[0], v[1], DEFAULT_LAMBDA)))
            },
        },
        Case {
            op: "model_end_to_end",
            build: end_to_end,
        },
    ]
}

fn add_tensors(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// A tiny model with every layer type: train-mode forward, both losses,
/// gradients with respect to all parameters and both inputs.
fn end_to_end(r: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Objective) {
    let config = ModelConfig {
        d_in_video: 3,
        d_in_text: 3,
        d_hidden: 3,
        n_pre_convs: 1,
        kernel_size: 3,
        stride: 2,
        l1: 4,
        seed: r.random(),
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(config).expect("valid tiny config");
    let (b, j) = (3, model.config().num_proposals());
    let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(uniform(r, &[b, 4, 3], -1.0, 1.0));
    inputs.push(uniform(r, &[b, 3], -1.0, 1.0));
    let target = uniform(r, &[b, j], 0.0, 1.0);
    let tc = uniform(r, &[b, j], -0.5, 0.5);
    let tw = uniform(r, &[b, j], -0.5, 0.5);
    let mask = Tensor::new(vec![b, j], (0..b * j).map(|i| f64::from(i % 2 == 0)).collect()).expect("sized");
    let n_params = model.params().len();
    let f = obj(move |t, v| {
        let bound = Bound::from_vars(v[..n_params].to_vec());
        let mut running = model.running_stats().to_vec();
        let out = model.forward_with(t, &bound, &mut running, v[n_params], v[n_params + 1], BatchNormMode::Train)?;
        let l_iou = iou_loss(t, out.iou, &target)?;
        let l_reg = reg_loss(t, out.dc, out.dw, &tc, &tw, &mask)?;
        // Weight the regression term up so its gradient is not swamped.
        total_loss(t, l_iou, l_reg, 0.5)
    });
    (inputs, f)
}

/// Names of every check, in suite order.
pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Number of seeds, `0..seeds`.
    pub seeds: u64,
    /// Op whose analytic gradient is deliberately scaled.
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpResult {
    pub op: &'static str,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub eps: f64,
    pub seeds: u64,
    pub results: Vec<OpResult>,
    pub passed: bool,
}

pub fn run_gradcheck_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let all = cases();
    if let Some(name) = &opts.corrupt {
        if !all.iter().any(|c| c.op == name) {
            return Err(Error::Config(format!("unknown op {name:?}; known: {}", op_names().join(", "))));
        }
    }
    let mut results = Vec::with_capacity(all.len());
    for case in &all {
        let mut checker = GradCheck::new(EPS);
        if opts.corrupt.as_deref() == Some(case.op) {
            checker = checker.corrupt_analytic(CORRUPTION_FACTOR);
        }
        let mut result = OpResult {
            op: case.op,
            max_rel_error: 0.0,
            worst_seed: 0,
            coords_checked: 0,
            passed: true,
        };
        for seed in 0..opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = (case.build)(&mut rng);
            let report = checker.run(&f, &inputs)?;
            result.coords_checked += report.coords_checked;
            if report.max_rel_error > result.max_rel_error {
                result.max_rel_error = report.max_rel_error;
                result.worst_seed = seed;
            }
        }
        result.passed = result.max_rel_error < TOLERANCE;
        results.push(result);
    }
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        eps: EPS,
        seeds: opts.seeds,
        passed: results.iter().all(|r| r.passed),
        results,
    })
}
