use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linearly interpolates `[L, d]` features at `n` evenly spaced points
/// spanning `[0, L - 1]`. A single output point samples the middle.
pub fn resample_snippets(feats: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    if feats.rank() != 2 {
        return Err(Error::Shape {
            what: "snippet features".into(),
            expected: vec![feats.shape().first().copied().unwrap_or(1), 1],
            found: feats.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::Config("snippet count must be positive".into()));
    }
    let (len, d) = (feats.shape()[0], feats.shape()[1]);
    if len == n {
        return Ok(feats.clone());
    }
    let src = feats.data();
    let mut out = Vec::with_capacity(n * d);
    for j in 0..n {
        // Integer numerator keeps grid-aligned positions exact.
        let pos = if n == 1 {
            (len - 1) as f64 / 2.0
        } else {
            (j * (len - 1)) as f64 / (n - 1) as f64
        };
        let lo = (pos.floor() as usize).min(len - 1);
        let frac = pos - lo as f64;
        let a = &src[lo * d..][..d];
        if frac == 0.0 {
            out.extend_from_slice(a);
            continue;
        }
        let b = &src[(lo + 1) * d..][..d];
        out.extend(a.iter().zip(b).map(|(&x, &y)| {
            let v = x as f64 + (y as f64 - x as f64) * frac;
            v as f32
        }));
    }
    Ok(Tensor::new(vec![n, d], out).expect("n × d values"))
}
