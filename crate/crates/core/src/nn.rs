//! The network: a shared MLP encoder (optionally preceded by one 3x3
//! convolution), a C-way classifier head and a 4-way rotation head.
//!
//! Parameters live in a flat list of named blocks so the optimizer, EMA and
//! checkpoint code can treat the model as a sequence of arrays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ROTATIONS: usize = 4;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    /// Hidden layer widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Number of 3x3 convolution filters in front of the MLP; 0 disables it.
    pub conv_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            hidden: vec![64, 64],
            num_classes: 20,
            conv_channels: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim())
    }

    fn conv_out_side(&self) -> usize {
        self.image_side + 1 - KERNEL
    }

    fn encoder_input_dim(&self) -> usize {
        if self.conv_channels > 0 {
            self.conv_out_side().pow(2) * self.conv_channels
        } else {
            self.input_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.num_classes == 0 || self.hidden.is_empty() {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.conv_channels > 0 && self.image_side < KERNEL {
            return Err(Error::Config(format!("convolution needs image_side >= {KERNEL}")));
        }
        Ok(())
    }

    /// Names and shapes of every parameter block, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if self.conv_channels > 0 {
            out.push(("conv.w".into(), vec![KERNEL * KERNEL, self.conv_channels]));
            out.push(("conv.b".into(), vec![self.conv_channels]));
        }
        let mut fan_in = self.encoder_input_dim();
        for (i, &w) in self.hidden.iter().enumerate() {
            out.push((format!("enc{i}.w"), vec![fan_in, w]));
            out.push((format!("enc{i}.b"), vec![w]));
            fan_in = w;
        }
        out.push(("cls.w".into(), vec![fan_in, self.num_classes]));
        out.push(("cls.b".into(), vec![self.num_classes]));
        out.push(("rot.w".into(), vec![fan_in, ROTATIONS]));
        out.push(("rot.b".into(), vec![ROTATIONS]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<S> {
    pub name: String,
    pub value: Array<S>,
}

/// All trainable parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    blocks: Vec<ParamBlock<S>>,
}

/// Plain (tape-free) forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S> {
    pub features: Array<S>,
    pub logits: Array<S>,
    pub rotation_logits: Array<S>,
}

/// Forward results recorded on a tape.
#[derive(Clone, Copy)]
pub struct ForwardVars<'t, S> {
    pub features: Var<'t, S>,
    pub logits: Var<'t, S>,
    pub rotation_logits: Var<'t, S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() == 2 {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| S::lit(rng.random_range(-limit..=limit))).collect();
                    Array::new(shape, data)?
                } else {
                    Array::zeros(&shape)
                };
                Ok(ParamBlock { name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, blocks })
    }

    /// Every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .layout()
            .into_iter()
            .map(|(name, shape)| ParamBlock {
                name,
                value: Array::zeros(&shape),
            })
            .collect();
        Ok(Self { config, blocks })
    }

    /// Rebuilds a model from explicit blocks, checking them against the layout.
    pub fn from_blocks(config: ModelConfig, blocks: Vec<ParamBlock<S>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != blocks.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter blocks, got {}",
                layout.len(),
                blocks.len()
            )));
        }
        for ((name, shape), block) in layout.iter().zip(&blocks) {
            if name != &block.name || shape.as_slice() != block.value.shape() {
                return Err(Error::shape("from_blocks", shape, block.value.shape()));
            }
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<S>] {
        &mut self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }

    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &Self) {
        self.clone_from(snapshot);
    }

    /// `self <- m * self + (1 - m) * source`, elementwise, written as
    /// `self + (1 - m) * (source - self)` so that equal models stay equal.
    pub fn ema_blend(&mut self, source: &Self, momentum: S) -> Result<()> {
        if !(S::zero()..=S::one()).contains(&momentum) {
            return Err(Error::Invalid(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        if self.blocks.len() != source.blocks.len() {
            return Err(Error::Invalid("EMA between models of different depth".into()));
        }
        for (t, s) in self.blocks.iter().zip(&source.blocks) {
            if t.value.shape() != s.value.shape() {
                return Err(Error::shape("ema_blend", t.value.shape(), s.value.shape()));
            }
        }
        if momentum == S::zero() {
            self.blocks.clone_from(&source.blocks);
            return Ok(());
        }
        let rest = S::one() - momentum;
        for (t, s) in self.blocks.iter_mut().zip(&source.blocks) {
            for (p, &q) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                *p = *p + rest * (q - *p);
            }
        }
        Ok(())
    }

    /// Squared Euclidean distance between two parameter sets.
    pub fn distance_sq(&self, other: &Self) -> S {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum()
    }

    /// Records every parameter block on `tape`.
    pub fn bind<'t>(&'t self, tape: &'t Tape<S>, trainable: bool) -> BoundModel<'t, S> {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                if trainable {
                    tape.param(b.value.clone())
                } else {
                    tape.constant(b.value.clone())
                }
            })
            .collect();
        BoundModel {
            config: self.config.clone(),
            vars,
        }
    }

    /// Tape-free forward pass over a `[batch, side * side]` array.
    pub fn forward(&self, batch: &Array<S>) -> Result<ForwardOutput<S>> {
        let tape = Tape::new();
        let model = self.bind(&tape, false);
        let out = model.forward(tape.constant(batch.clone()))?;
        let features = out.features.value().clone();
        let logits = out.logits.value().clone();
        let rotation_logits = out.rotation_logits.value().clone();
        Ok(ForwardOutput {
            features,
            logits,
            rotation_logits,
        })
    }

    /// Classifier logits for a batch of stored feature vectors.
    pub fn classify_features(&self, features: &Array<S>) -> Result<Array<S>> {
        let tape = Tape::new();
        let model = self.bind(&tape, false);
        let logits = model.classify(tape.constant(features.clone()))?;
        let out = logits.value().clone();
        Ok(out)
    }
}

/// A model whose parameters are recorded on a tape.
pub struct BoundModel<'t, S> {
    config: ModelConfig,
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> BoundModel<'t, S> {
    /// Wraps tape variables laid out as [`ModelConfig::layout`].
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var<'t, S>>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != vars.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter blocks, got {}",
                layout.len(),
                vars.len()
            )));
        }
        for ((name, shape), v) in layout.iter().zip(&vars) {
            if v.shape() != *shape {
                return Err(Error::Invalid(format!(
                    "block `{name}` has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            vars,
        })
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    fn head_offset(&self) -> usize {
        self.vars.len() - 4
    }

    /// Feature vectors for a `[batch, side * side]` input.
    pub fn encode(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim() || shape[0] == 0 {
            return Err(Error::shape("encode", &shape, &[0, self.config.input_dim()]));
        }
        let mut h = x;
        let mut next = 0;
        if self.config.conv_channels > 0 {
            h = self.conv(x)?;
            next = 2;
        }
        for _ in 0..self.config.hidden.len() {
            h = h.matmul(self.vars[next])?.add_row(self.vars[next + 1])?.relu();
            next += 2;
        }
        Ok(h)
    }

    fn conv(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let batch = x.shape()[0];
        let side = self.config.image_side;
        let out_side = self.config.conv_out_side();
        let patches = {
            let input = x.value();
            let mut data = Vec::with_capacity(batch * out_side * out_side * KERNEL * KERNEL);
            for b in 0..batch {
                let img = input.row(b);
                for i in 0..out_side {
                    for j in 0..out_side {
                        for di in 0..KERNEL {
                            for dj in 0..KERNEL {
                                data.push(img[(i + di) * side + j + dj]);
                            }
                        }
                    }
                }
            }
            Array::new(vec![batch * out_side * out_side, KERNEL * KERNEL], data)?
        };
        let cols = x.tape().constant(patches);
        let maps = cols.matmul(self.vars[0])?.add_row(self.vars[1])?.relu();
        maps.reshape(&[batch, out_side * out_side * self.config.conv_channels])
    }

    pub fn classify(&self, features: Var<'t, S>) -> Result<Var<'t, S>> {
        let o = self.head_offset();
        features.matmul(self.vars[o])?.add_row(self.vars[o + 1])
    }

    pub fn rotation(&self, features: Var<'t, S>) -> Result<Var<'t, S>> {
        let o = self.head_offset() + 2;
        features.matmul(self.vars[o])?.add_row(self.vars[o + 1])
    }

    pub fn forward(&self, x: Var<'t, S>) -> Result<ForwardVars<'t, S>> {
        let features = self.encode(x)?;
        Ok(ForwardVars {
            features,
            logits: self.classify(features)?,
            rotation_logits: self.rotation(features)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_side: 4,
            hidden: vec![5, 3],
            num_classes: 3,
            conv_channels: 0,
        }
    }

    fn batch(rows: usize, dim: usize, seed: u64) -> Array<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| rng.random::<f64>()).collect();
        Array::new(vec![rows, dim], data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let model = ModelParams::<f64>::zeros(small()).unwrap();
        let out = model.forward(&batch(3, 16, 1)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.features.shape(), &[3, 3]);
        assert_eq!(out.rotation_logits.shape(), &[3, 4]);
    }

    #[test]
    fn rows_do_not_interact() {
        let model = ModelParams::<f64>::init(small(), 7).unwrap();
        let x = batch(8, 16, 2);
        let all = model.forward(&x).unwrap();
        let single = model.forward(&x.select_rows(&[5]).unwrap()).unwrap();
        assert_eq!(single.logits.row(0), all.logits.row(5));
        assert_eq!(single.features.row(0), all.features.row(5));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = ModelParams::<f64>::init(small(), 3).unwrap();
        let b = ModelParams::<f64>::init(small(), 3).unwrap();
        let x = batch(4, 16, 9);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let model = ModelParams::<f64>::init(small(), 3).unwrap();
        assert!(model.forward(&batch(2, 15, 1)).is_err());
    }

    #[test]
    fn snapshot_is_independent() {
        let mut live = ModelParams::<f64>::init(small(), 11).unwrap();
        let x = batch(2, 16, 4);
        let before = live.forward(&x).unwrap();
        let snap = live.snapshot();
        for w in live.blocks_mut()[0].value.data_mut() {
            *w += 1.0;
        }
        assert_eq!(snap.forward(&x).unwrap(), before);
        assert_ne!(live.forward(&x).unwrap(), before);
        live.restore(&snap);
        assert_eq!(live.forward(&x).unwrap(), before);
        assert_eq!(snap.snapshot(), snap);
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let cfg = small();
        let src = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        let orig = ModelParams::<f64>::init(cfg.clone(), 2).unwrap();

        let mut t = orig.clone();
        t.ema_blend(&src, 1.0).unwrap();
        assert_eq!(t, orig);

        let mut t = orig.clone();
        t.ema_blend(&src, 0.0).unwrap();
        assert_eq!(t, src);

        let mut two = ModelParams::<f64>::zeros(cfg.clone()).unwrap();
        let mut four = ModelParams::<f64>::zeros(cfg).unwrap();
        two.blocks_mut().iter_mut().for_each(|b| b.value = b.value.map(|_| 2.0));
        four.blocks_mut()
            .iter_mut()
            .for_each(|b| b.value = b.value.map(|_| 4.0));
        two.ema_blend(&four, 0.5).unwrap();
        assert!(two.blocks().iter().all(|b| b.value.data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut a = ModelParams::<f64>::init(small(), 1).unwrap();
        let mut other = small();
        other.num_classes = 5;
        let b = ModelParams::<f64>::init(other, 1).unwrap();
        assert!(a.ema_blend(&b, 0.5).is_err());
        let c = a.clone();
        assert!(a.ema_blend(&c, 1.5).is_err());
    }

    #[test]
    fn conv_front_end_shapes() {
        let cfg = ModelConfig {
            image_side: 5,
            hidden: vec![4],
            num_classes: 2,
            conv_channels: 2,
        };
        let model = ModelParams::<f64>::init(cfg, 5).unwrap();
        assert_eq!(model.blocks()[2].value.shape(), &[18, 4]);
        let out = model.forward(&batch(3, 25, 8)).unwrap();
        assert_eq!(out.logits.shape(), &[3, 2]);
    }

    #[test]
    fn glorot_bounds() {
        let cfg = ModelConfig::default();
        let model = ModelParams::<f64>::init(cfg, 0).unwrap();
        let w = &model.blocks()[0].value;
        let limit = (6.0 / (256.0 + 64.0f64)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(model.blocks()[1].value.data().iter().all(|&v| v == 0.0));
    }
}
