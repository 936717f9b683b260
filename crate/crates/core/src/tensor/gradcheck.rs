//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid, Tape, Tensor, TensorError, Var};

/// Below this gradient magnitude the error is effectively absolute: a
/// structurally zero gradient has only finite-difference rounding noise.
pub const ABS_FLOOR: f64 = 1e-6;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(ABS_FLOOR, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Configurable checker. Functions receive their inputs as tape leaves and
/// return a tensor; non-scalar outputs are contracted with fixed random
/// weights so every output coordinate contributes.
#[derive(Debug, Clone)]
pub struct GradCheck {
    eps: f64,
    sample: Option<(f64, u64)>,
    corrupt: Option<f64>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            sample: None,
            corrupt: None,
        }
    }

    /// Check only a random `fraction` of coordinates (at least one per input).
    pub fn sample(mut self, fraction: f64, seed: u64) -> Self {
        self.sample = Some((fraction, seed));
        self
    }

    /// Scale the analytic gradient before comparing. Used to confirm that a
    /// wrong gradient is caught.
    pub fn corrupt_analytic(mut self, factor: f64) -> Self {
        self.corrupt = Some(factor);
        self
    }

    pub fn run<F, E>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport, E>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
        E: From<TensorError>,
    {
        if !(1e-7..=1e-3).contains(&self.eps) {
            return Err(invalid("grad_check", format!("eps {} outside [1e-7, 1e-3]", self.eps)).into());
        }
        let mut weights: Option<Vec<f64>> = None;
        let mut objective = |vals: &[Tensor<f64>], keep: bool| -> Result<(f64, Option<Vec<Vec<f64>>>), E> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let w = weights.get_or_insert_with(|| {
                let n = tape.value(out).numel();
                if n == 1 {
                    vec![1.0]
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                    (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
                }
            });
            let shape = tape.shape(out).to_vec();
            let wv = tape.constant(Tensor::new(shape, w.clone())?);
            let prod = tape.mul(out, wv)?;
            let loss = tape.sum(prod)?;
            let value = tape.data(loss)[0];
            if !keep {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            let grads = vars
                .iter()
                .zip(vals)
                .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            Ok((value, Some(grads)))
        };

        let (_, analytic) = objective(inputs, true)?;
        let analytic = analytic.unwrap();
        let mut rng = self.sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            coords_checked: 0,
        };
        for (i, input) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match (&mut rng, self.sample) {
                (Some(rng), Some((fraction, _))) => {
                    let mut picked: Vec<usize> = (0..input.numel()).filter(|_| rng.random::<f64>() < fraction).collect();
                    if picked.is_empty() {
                        picked.push(rng.random_range(0..input.numel()));
                    }
                    picked
                }
                _ => (0..input.numel()).collect(),
            };
            for j in coords {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let (plus, _) = objective(&work, false)?;
                work[i].data_mut()[j] = orig - self.eps;
                let (minus, _) = objective(&work, false)?;
                work[i].data_mut()[j] = orig;

                let numeric = (plus - minus) / (2.0 * self.eps);
                let exact = analytic[i][j] * self.corrupt.unwrap_or(1.0);
                let err = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(ABS_FLOOR);
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (i, j);
                }
                report.coords_checked += 1;
            }
        }
        Ok(report)
    }
}

/// Max relative error between analytic and central-difference gradients of
/// `f` with respect to every coordinate of `inputs`.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    GradCheck::new(eps).run(f, inputs).map(|r| r.max_rel_error)
}
