//! The grounding network: projected video with a stack of temporal
//! convolutions, a projected sentence feature, Hadamard fusion, a strided
//! convolutional feature pyramid, and score/offset heads shared across
//! pyramid levels.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointError, Manifest, TensorEntry, BLOB_FILE, MANIFEST_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Proposal};
use crate::tensor::{BatchNormMode, Real, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in_video: usize,
    pub d_in_text: usize,
    /// Fused channel count.
    pub d_hidden: usize,
    /// Temporal convolutions applied to the video before fusion.
    pub n_pre_convs: usize,
    pub kernel_size: usize,
    /// Length reduction factor between pyramid levels.
    pub stride: usize,
    /// Length of the finest pyramid level; must be a power of `stride`.
    pub l1: usize,
    pub ratios: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Use a plain sigmoid for the center offset, so that centers can only
    /// move right. Off by default: the center offset is `2·sigmoid − 1`.
    pub strict_paper_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in_video: 768,
            d_in_text: 768,
            d_hidden: 768,
            n_pre_convs: 2,
            kernel_size: 3,
            stride: 2,
            l1: 128,
            ratios: vec![0.5, 1.0],
            alpha: 0.3,
            beta: 0.3,
            seed: 0,
            strict_paper_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("d_in_video", self.d_in_video),
            ("d_in_text", self.d_in_text),
            ("d_hidden", self.d_hidden),
            ("kernel_size", self.kernel_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        geometry::pyramid_lengths(self.l1, self.stride).map_err(|e| Error::Config(e.to_string()))?;
        geometry::validate_ratios(&self.ratios).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha and beta must be positive, got {} and {}", self.alpha, self.beta));
        }
        Ok(())
    }

    pub fn pyramid_lengths(&self) -> Vec<usize> {
        geometry::pyramid_lengths(self.l1, self.stride).expect("validated config")
    }

    pub fn num_ratios(&self) -> usize {
        self.ratios.len()
    }

    pub fn num_proposals(&self) -> usize {
        self.num_ratios() * self.pyramid_lengths().iter().sum::<usize>()
    }

    fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Per-proposal head outputs for one sample, in proposal-grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub iou: Vec<f64>,
    pub dc: Vec<f64>,
    pub dw: Vec<f64>,
}

/// Head outputs on a tape, each `[B, num_proposals]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub iou: Var,
    pub dc: Var,
    pub dw: Var,
}

/// Parameters recorded on a tape, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct PyramidBlock {
    conv: Affine,
    bn: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    video_proj: Affine,
    video_convs: Vec<Affine>,
    text_proj: Affine,
    pyramid: Vec<PyramidBlock>,
    iou_head: Affine,
    reg_head: Affine,
}

/// Parameter shapes by name, in canonical order, plus the index layout.
fn parameter_specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let affine = |specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, w: Vec<usize>, b: Vec<usize>| {
        specs.push((format!("{prefix}.weight"), w));
        specs.push((format!("{prefix}.bias"), b));
        Affine {
            weight: specs.len() - 2,
            bias: specs.len() - 1,
        }
    };
    let (dh, k, kk) = (cfg.d_hidden, cfg.kernel_size, cfg.num_ratios());
    let video_proj = affine(&mut specs, "video_proj", vec![dh, cfg.d_in_video], vec![dh]);
    let video_convs = (0..cfg.n_pre_convs)
        .map(|i| affine(&mut specs, &format!("video_convs.{i}"), vec![dh, dh, k], vec![dh]))
        .collect();
    let text_proj = affine(&mut specs, "text_proj", vec![dh, cfg.d_in_text], vec![dh]);
    let pyramid = (2..=cfg.pyramid_lengths().len())
        .map(|p| PyramidBlock {
            conv: affine(&mut specs, &format!("pyramid.block{p}.conv"), vec![dh, dh, k], vec![dh]),
            bn: affine(&mut specs, &format!("pyramid.block{p}.bn"), vec![dh], vec![dh]),
        })
        .collect();
    let iou_head = affine(&mut specs, "iou_head", vec![kk, dh, k], vec![kk]);
    let reg_head = affine(&mut specs, "reg_head", vec![2 * kk, dh, k], vec![2 * kk]);
    let layout = Layout {
        video_proj,
        video_convs,
        text_proj,
        pyramid,
        iou_head,
        reg_head,
    };
    (specs, layout)
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
    proposals: Vec<Proposal>,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model: He-uniform conv/linear weights,
    /// zero biases, batch norm scale 1 and shift 0, running statistics at
    /// mean 0 / variance 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (specs, _) = parameter_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bn.weight") {
                    vec![T::one(); n]
                } else if name.ends_with(".bias") {
                    vec![T::zero(); n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                };
                Parameter {
                    name,
                    tensor: Tensor::new(shape, data).expect("spec shapes match data").with_requires_grad(true),
                }
            })
            .collect();
        Self::assemble(config, params, None)
    }

    /// Rebuilds a model from named parameters (in canonical order) and
    /// optional running statistics.
    pub(crate) fn assemble(
        config: ModelConfig,
        params: Vec<Parameter<T>>,
        running: Option<Vec<RunningStats<T>>>,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = parameter_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "model expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if name != &p.name {
                return Err(Error::Config(format!("expected parameter {name}, found {}", p.name)));
            }
            if shape.as_slice() != p.tensor.shape() {
                return Err(Error::Shape {
                    what: name.clone(),
                    expected: shape.clone(),
                    found: p.tensor.shape().to_vec(),
                });
            }
        }
        let blocks = layout.pyramid.len();
        let running = running.unwrap_or_else(|| (0..blocks).map(|_| RunningStats::standard(config.d_hidden)).collect());
        if running.len() != blocks || running.iter().any(|r| r.channels() != config.d_hidden) {
            return Err(Error::Config("running statistics do not match the pyramid".into()));
        }
        let proposals = geometry::proposal_grid(config.l1, config.stride, &config.ratios)?;
        Ok(Self {
            config,
            params,
            running,
            layout,
            proposals,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Anchors aligned index-for-index with the flattened head outputs.
    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                    initialized: r.initialized,
                })
                .collect(),
            layout: self.layout.clone(),
            proposals: self.proposals.clone(),
        }
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    /// Adds the gradients computed on `tape` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    fn batched(tape: &mut Tape<T>, x: Var, rank: usize) -> Result<Var> {
        if tape.shape(x).len() == rank - 1 {
            let mut shape = vec![1];
            shape.extend_from_slice(tape.shape(x));
            Ok(tape.reshape(x, shape)?)
        } else {
            Ok(x)
        }
    }

    /// `[B, L1, d_in_video]` (or `[L1, d_in_video]`) to channel-major
    /// `[B, d_hidden, L1]`.
    pub fn encode_video(&self, tape: &mut Tape<T>, bound: &Bound, video: Var) -> Result<Var> {
        let video = Self::batched(tape, video, 3)?;
        let shape = tape.shape(video).to_vec();
        if shape.len() != 3 || shape[1] != self.config.l1 || shape[2] != self.config.d_in_video {
            return Err(Error::Shape {
                what: "video features".into(),
                expected: vec![shape.first().copied().unwrap_or(1), self.config.l1, self.config.d_in_video],
                found: shape,
            });
        }
        let p = &bound.0;
        let proj = self.layout.video_proj;
        let x = tape.linear(video, p[proj.weight], p[proj.bias])?;
        let mut x = tape.swap_last2(x)?;
        for conv in &self.layout.video_convs {
            x = tape.conv1d(x, p[conv.weight], p[conv.bias], 1, self.config.padding())?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// `[B, d_in_text]` (or `[d_in_text]`) to `[B, d_hidden]`.
    pub fn encode_text(&self, tape: &mut Tape<T>, bound: &Bound, text: Var) -> Result<Var> {
        let text = Self::batched(tape, text, 2)?;
        let shape = tape.shape(text).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_in_text {
            return Err(Error::Shape {
                what: "text feature".into(),
                expected: vec![shape.first().copied().unwrap_or(1), self.config.d_in_text],
                found: shape,
            });
        }
        let proj = self.layout.text_proj;
        let s = tape.linear(text, bound.0[proj.weight], bound.0[proj.bias])?;
        Ok(tape.relu(s)?)
    }

    /// `m_i = v_i ⊙ s` for every time step: video `[B, C, L]`, text `[B, C]`.
    pub fn fuse(tape: &mut Tape<T>, video: Var, text: Var) -> Result<Var> {
        let (vs, ts) = (tape.shape(video).to_vec(), tape.shape(text).to_vec());
        if vs.len() != 3 || ts.len() != 2 || vs[0] != ts[0] || vs[1] != ts[1] {
            return Err(Error::Shape {
                what: "fusion text width".into(),
                expected: vs.get(..2).map(<[usize]>::to_vec).unwrap_or_default(),
                found: ts,
            });
        }
        let text = tape.reshape(text, vec![ts[0], ts[1], 1])?;
        Ok(tape.mul(video, text)?)
    }

    /// Level 1 is `m1`; each further level is strided conv, batch norm and
    /// ReLU applied to the previous one.
    pub fn build_pyramid(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        m1: Var,
        running: &mut [RunningStats<T>],
        mode: BatchNormMode,
    ) -> Result<Vec<Var>> {
        let shape = tape.shape(m1);
        if shape.len() != 3 || shape[1] != self.config.d_hidden || shape[2] != self.config.l1 {
            return Err(Error::Shape {
                what: "fused map".into(),
                expected: vec![shape.first().copied().unwrap_or(1), self.config.d_hidden, self.config.l1],
                found: shape.to_vec(),
            });
        }
        let p = &bound.0;
        let mut levels = vec![m1];
        for (block, stats) in self.layout.pyramid.iter().zip(running.iter_mut()) {
            let prev = *levels.last().unwrap();
            let x = tape.conv1d(prev, p[block.conv.weight], p[block.conv.bias], self.config.stride, self.config.padding())?;
            let x = tape.batchnorm1d(x, p[block.bn.weight], p[block.bn.bias], stats, mode)?;
            levels.push(tape.relu(x)?);
        }
        Ok(levels)
    }

    /// `[B, C, L]` per level to `[B, L·C]` concatenated over levels, so that
    /// index `offset(level) + position·C + c` matches the proposal grid.
    fn flatten_levels(tape: &mut Tape<T>, per_level: &[Var]) -> Result<Var> {
        let mut flat = Vec::with_capacity(per_level.len());
        for &x in per_level {
            let s = tape.shape(x).to_vec();
            let t = tape.swap_last2(x)?;
            flat.push(tape.reshape(t, vec![s[0], s[1] * s[2]])?);
        }
        Ok(tape.concat(&flat, 1)?)
    }

    /// Shared heads over every level. The regression head's first `K`
    /// channels are center offsets, the next `K` width offsets.
    pub fn predict_heads(&self, tape: &mut Tape<T>, bound: &Bound, pyramid: &[Var]) -> Result<HeadOutputs> {
        let p = &bound.0;
        let k = self.config.num_ratios();
        let pad = self.config.padding();
        let (mut scores, mut centers, mut widths) = (Vec::new(), Vec::new(), Vec::new());
        for &level in pyramid {
            let (ih, rh) = (self.layout.iou_head, self.layout.reg_head);
            let s = tape.conv1d(level, p[ih.weight], p[ih.bias], 1, pad)?;
            scores.push(tape.sigmoid(s)?);
            let r = tape.conv1d(level, p[rh.weight], p[rh.bias], 1, pad)?;
            let dc = tape.narrow(r, 1, 0, k)?;
            let dc = tape.sigmoid(dc)?;
            centers.push(if self.config.strict_paper_heads {
                dc
            } else {
                let two = tape.scale(dc, 2.0)?;
                tape.shift(two, -1.0)?
            });
            let dw = tape.narrow(r, 1, k, k)?;
            widths.push(tape.sigmoid(dw)?);
        }
        Ok(HeadOutputs {
            iou: Self::flatten_levels(tape, &scores)?,
            dc: Self::flatten_levels(tape, &centers)?,
            dw: Self::flatten_levels(tape, &widths)?,
        })
    }

    /// Full forward pass on an already bound tape.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        running: &mut [RunningStats<T>],
        video: Var,
        text: Var,
        mode: BatchNormMode,
    ) -> Result<HeadOutputs> {
        let v = self.encode_video(tape, bound, video)?;
        let s = self.encode_text(tape, bound, text)?;
        if tape.shape(v)[0] != tape.shape(s)[0] {
            return Err(Error::Shape {
                what: "text batch".into(),
                expected: vec![tape.shape(v)[0], self.config.d_hidden],
                found: tape.shape(s).to_vec(),
            });
        }
        let m1 = Self::fuse(tape, v, s)?;
        let pyramid = self.build_pyramid(tape, bound, m1, running, mode)?;
        self.predict_heads(tape, bound, &pyramid)
    }

    /// Forward pass using the model's own running statistics; train mode
    /// updates them.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        video: Var,
        text: Var,
        mode: BatchNormMode,
    ) -> Result<HeadOutputs> {
        let mut running = std::mem::take(&mut self.running);
        let out = self.forward_with(tape, bound, &mut running, video, text, mode);
        self.running = running;
        out
    }

    /// Eval-mode predictions for a batch `video: [B, L1, d_v]`,
    /// `text: [B, d_t]` (unbatched inputs are accepted too).
    pub fn predict(&self, video: &Tensor<T>, text: &Tensor<T>) -> Result<Vec<Predictions>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = tape.constant(video.clone());
        let s = tape.constant(text.clone());
        let mut running = self.running.clone();
        let out = self.forward_with(&mut tape, &bound, &mut running, v, s, BatchNormMode::Eval)?;
        Ok(split_predictions(&tape, out))
    }
}

/// Copies head outputs off a tape, one [`Predictions`] per batch row.
pub fn split_predictions<T: Real>(tape: &Tape<T>, out: HeadOutputs) -> Vec<Predictions> {
    let j = tape.shape(out.iou)[1];
    let rows = |v: Var| -> Vec<Vec<f64>> {
        tape.data(v)
            .chunks(j)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect()
    };
    let (iou, dc, dw) = (rows(out.iou), rows(out.dc), rows(out.dw));
    iou.into_iter()
        .zip(dc)
        .zip(dw)
        .map(|((iou, dc), dw)| Predictions { iou, dc, dw })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_in_video: 6,
            d_in_text: 5,
            d_hidden: 4,
            n_pre_convs: 2,
            l1: 8,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn paper_scale_pyramid_has_eight_levels() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pyramid_lengths(), vec![128, 64, 32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn rejects_non_power_length() {
        let cfg = ModelConfig {
            l1: 127,
            ..small_config()
        };
        let err = Model::<f32>::new(cfg).unwrap_err().to_string();
        assert!(err.contains("power"), "{err}");
        let even_kernel = ModelConfig {
            kernel_size: 4,
            ..small_config()
        };
        assert!(Model::<f32>::new(even_kernel).is_err());
    }

    #[test]
    fn init_is_deterministic_with_stable_names() {
        let a = Model::<f32>::new(small_config()).unwrap();
        let b = Model::<f32>::new(small_config()).unwrap();
        assert_eq!(a.params(), b.params());
        let names: Vec<&str> = a.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"pyramid.block2.conv.weight"));
        assert!(names.contains(&"pyramid.block4.bn.bias"));
        assert!(!names.contains(&"pyramid.block5.conv.weight"));
        let mut uniq = names.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
    }

    #[test]
    fn encode_video_shapes_and_zero_input() {
        let model = Model::<f64>::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let v = tape.constant(Tensor::zeros(vec![8, 6]));
        let out = model.encode_video(&mut tape, &bound, v).unwrap();
        assert_eq!(tape.shape(out), &[1, 4, 8]);
        assert!(tape.data(out).iter().all(|&x| x == 0.0));

        let bad = tape.constant(Tensor::zeros(vec![7, 6]));
        assert!(model.encode_video(&mut tape, &bound, bad).is_err());
    }

    #[test]
    fn no_pre_convs_is_a_linear_projection() {
        let cfg = ModelConfig {
            n_pre_convs: 0,
            ..small_config()
        };
        let model = Model::<f64>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = random(&[8, 6], 1);
        let v = tape.constant(x.clone());
        let out = model.encode_video(&mut tape, &bound, v).unwrap();
        let w = &model.params()[0].tensor;
        // out[0, c, t] = Σ_i w[c, i] x[t, i]
        for c in 0..4 {
            for t in 0..8 {
                let want: f64 = (0..6).map(|i| w.data()[c * 6 + i] * x.data()[t * 6 + i]).sum();
                assert!((tape.data(out)[c * 8 + t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_text_shape_and_width_check() {
        let model = Model::<f64>::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s = tape.constant(Tensor::zeros(vec![5]));
        let out = model.encode_text(&mut tape, &bound, s).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);
        assert!(tape.data(out).iter().all(|&x| x == 0.0));
        let bad = tape.constant(Tensor::zeros(vec![4]));
        assert!(model.encode_text(&mut tape, &bound, bad).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::<f64>::new();
        // v_1 = [1, 2], v_2 = [3, 4] stored channel-major as [B=1, C=2, L=2]
        let v = tape.constant(Tensor::from_f64(vec![1, 2, 2], &[1.0, 3.0, 2.0, 4.0]).unwrap());
        let s = tape.constant(Tensor::from_f64(vec![1, 2], &[10.0, 0.5]).unwrap());
        let m = Model::fuse(&mut tape, v, s).unwrap();
        assert_eq!(tape.data(m), &[10.0, 30.0, 1.0, 2.0]);

        let ones = tape.constant(Tensor::full(vec![1, 2], 1.0));
        let m = Model::fuse(&mut tape, v, ones).unwrap();
        assert_eq!(tape.data(m), tape.data(v));
        let zeros = tape.constant(Tensor::zeros(vec![1, 2]));
        let m = Model::fuse(&mut tape, v, zeros).unwrap();
        assert!(tape.data(m).iter().all(|&x| x == 0.0));

        let wide = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(Model::fuse(&mut tape, v, wide).is_err());
    }

    #[test]
    fn pyramid_lengths_halve_to_one() {
        let model = Model::<f64>::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let m1 = tape.constant(random(&[2, 4, 8], 2));
        let mut running = model.running_stats().to_vec();
        let levels = model
            .build_pyramid(&mut tape, &bound, m1, &mut running, BatchNormMode::Train)
            .unwrap();
        let lens: Vec<usize> = levels.iter().map(|&l| tape.shape(l)[2]).collect();
        assert_eq!(lens, vec![8, 4, 2, 1]);
    }

    #[test]
    fn heads_cover_the_grid() {
        let model = Model::<f64>::new(small_config()).unwrap();
        assert_eq!(model.proposals().len(), 30);
        let preds = model.predict(&random(&[8, 6], 4), &random(&[5], 5)).unwrap();
        assert_eq!(preds.len(), 1);
        let p = &preds[0];
        assert_eq!(p.iou.len(), 30);
        assert!(p.iou.iter().all(|&t| t > 0.0 && t < 1.0));
        assert!(p.dc.iter().all(|&t| t > -1.0 && t < 1.0));
        assert!(p.dw.iter().all(|&t| t > 0.0 && t < 1.0));
        let again = model.predict(&random(&[8, 6], 4), &random(&[5], 5)).unwrap();
        assert_eq!(preds, again);
    }

    #[test]
    fn strict_heads_keep_center_offsets_positive() {
        let cfg = ModelConfig {
            strict_paper_heads: true,
            ..small_config()
        };
        let model = Model::<f64>::new(cfg).unwrap();
        let p = &model.predict(&random(&[8, 6], 4), &random(&[5], 5)).unwrap()[0];
        assert!(p.dc.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    /// Each flattened head output must come from the pyramid cell and ratio
    /// channel of the proposal at the same index.
    #[test]
    fn head_order_matches_proposal_grid() {
        let model = Model::<f64>::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let lengths = model.config().pyramid_lengths();
        let k = model.config().num_ratios();
        // Channel 0 of each level map carries a distinct value per cell.
        let levels: Vec<Var> = lengths
            .iter()
            .enumerate()
            .map(|(lvl, &len)| {
                let mut data = vec![0.0; 4 * len];
                for pos in 0..len {
                    data[pos] = (lvl * 100 + pos) as f64;
                }
                tape.constant(Tensor::from_f64(vec![1, 4, len], &data).unwrap())
            })
            .collect();
        let out = model.predict_heads(&mut tape, &bound, &levels).unwrap();
        let flat = tape.data(out.iou).to_vec();
        let mut j = 0;
        for &lvl in &levels {
            let s = tape.conv1d(lvl, bound.vars()[bound.vars().len() - 4], bound.vars()[bound.vars().len() - 3], 1, 1).unwrap();
            let s = tape.sigmoid(s).unwrap();
            let len = tape.shape(s)[2];
            for pos in 0..len {
                for r in 0..k {
                    let p = model.proposals()[j];
                    assert_eq!((p.position, p.ratio), (pos, r));
                    assert_eq!(flat[j], tape.data(s)[r * len + pos]);
                    j += 1;
                }
            }
        }
        assert_eq!(j, model.proposals().len());
    }
}
