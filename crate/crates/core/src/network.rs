//! The three trainable maps: an MLP backbone `f: R^D -> R^d`, a linear
//! classification head `g: R^d -> R^C` and a linear projection `h: R^d -> R^d`,
//! plus Nesterov SGD and the EMA shadow used for evaluation and calibration.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("hidden sizes must be >= 1: {:?}", self.hidden_sizes)));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: d_in x d_out`, `b: 1 x d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(d_in, d_out),
            bias: Tensor::zeros(1, d_out),
        }
    }

    /// He-scaled uniform weights, `U(-a, a)` with `a = sqrt(6 / fan_in)`, so
    /// the weight variance is `2 / fan_in`. Biases start at zero.
    pub fn he_uniform<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(d_in, d_out, data).expect("length matches"),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamEntry<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    /// Weight matrices are regularized; biases are not.
    pub is_weight: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Linear>,
    pub head: Linear,
    pub projection: Linear,
}

impl ModelParams {
    pub fn init(seed: u64, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.hidden_sizes);
        widths.push(dims.feature_dim);
        let backbone = widths
            .windows(2)
            .map(|w| Linear::he_uniform(w[0], w[1], &mut rng))
            .collect();
        let head = Linear::he_uniform(dims.feature_dim, dims.num_classes, &mut rng);
        let projection = Linear::he_uniform(dims.feature_dim, dims.feature_dim, &mut rng);
        let params = Self {
            backbone,
            head,
            projection,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks that the layer chain composes: `D -> ... -> d`, `g: d -> C`, `h: d -> d`.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .backbone
            .first()
            .ok_or_else(|| Error::Config("backbone needs at least one layer".into()))?;
        let mut width = first.d_in();
        for layer in &self.backbone {
            if layer.d_in() != width || layer.bias.shape() != (1, layer.d_out()) {
                return Err(Error::Config("backbone layer dimensions do not compose".into()));
            }
            width = layer.d_out();
        }
        if self.head.d_in() != width || self.head.bias.shape() != (1, self.head.d_out()) {
            return Err(Error::Config("head input does not match feature dim".into()));
        }
        if self.projection.d_in() != width
            || self.projection.d_out() != width
            || self.projection.bias.shape() != (1, width)
        {
            return Err(Error::Config("projection must map d -> d".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.backbone[0].d_in(),
            hidden_sizes: self.backbone[..self.backbone.len() - 1]
                .iter()
                .map(Linear::d_out)
                .collect(),
            feature_dim: self.head.d_in(),
            num_classes: self.head.d_out(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Linear)> {
        self.backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("f.{i}"), l))
            .chain([("g".to_string(), &self.head), ("h".to_string(), &self.projection)])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.backbone
            .iter_mut()
            .chain([&mut self.head, &mut self.projection])
    }

    /// Every parameter tensor in canonical order: each layer's weight then bias,
    /// backbone first, then `g`, then `h`.
    pub fn entries(&self) -> Vec<ParamEntry<'_>> {
        let mut out = Vec::new();
        for (prefix, layer) in self.layers() {
            out.push(ParamEntry {
                name: format!("{prefix}.weight"),
                tensor: &layer.weight,
                is_weight: true,
            });
            out.push(ParamEntry {
                name: format!("{prefix}.bias"),
                tensor: &layer.bias,
                is_weight: false,
            });
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::entries`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|e| e.tensor.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in self.entries() {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("set_flat", (self.num_scalars(), 1), (flat.len(), 1)));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|e| e.tensor.is_finite())
    }

    /// Backbone `f`: ReLU between layers, linear output.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.backbone.len() - 1;
        for (i, layer) in self.backbone.iter().enumerate() {
            if h.cols() != layer.d_in() {
                return Err(Error::shape("forward_features", h.shape(), layer.weight.shape()));
            }
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Head `g`.
    pub fn forward_logits(&self, feats: &Tensor) -> Result<Tensor> {
        self.head.forward(feats)
    }

    /// Projection `h`.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        self.projection.forward(v)
    }

    /// `g(f(x))`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_logits(&self.forward_features(x)?)
    }

    /// Records every parameter on `tape` as a grad-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let layer = |tape: &mut Tape, l: &Linear| -> Result<LinearVars> {
            Ok(LinearVars {
                weight: tape.param(l.weight.clone())?,
                bias: tape.param(l.bias.clone())?,
            })
        };
        let backbone = self
            .backbone
            .iter()
            .map(|l| layer(tape, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars {
            backbone,
            head: layer(tape, &self.head)?,
            projection: layer(tape, &self.projection)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row_bias(xw, self.bias)
    }
}

/// [`ModelParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub backbone: Vec<LinearVars>,
    pub head: LinearVars,
    pub projection: LinearVars,
}

impl ParamVars {
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.backbone.len() - 1;
        for (i, layer) in self.backbone.iter().enumerate() {
            let (_, cols) = tape.shape(h);
            let (d_in, _) = tape.shape(layer.weight);
            if cols != d_in {
                return Err(Error::shape("forward_features", tape.shape(h), tape.shape(layer.weight)));
            }
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        self.head.forward(tape, feats)
    }

    pub fn project(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.projection.forward(tape, v)
    }

    fn layers(&self) -> impl Iterator<Item = &LinearVars> {
        self.backbone.iter().chain([&self.head, &self.projection])
    }

    /// Weight matrices only (no biases), in canonical order.
    pub fn weights(&self) -> Vec<Var> {
        self.layers().map(|l| l.weight).collect()
    }

    /// All vars in the order of [`ModelParams::entries`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Gradients in the order of [`ModelParams::entries`].
    pub fn collect_grads(&self, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        self.vars()
            .into_iter()
            .map(|v| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::Contract("parameter missing from gradients".into()))
            })
            .collect()
    }

    pub fn flat_grad(&self, grads: &mut Gradients) -> Result<Vec<f64>> {
        Ok(self
            .collect_grads(grads)?
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect())
    }
}

/// SGD with Nesterov momentum:
/// `v <- m v + g`, then `theta <- theta - lr (g + m v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
    pub steps: u64,
}

impl SgdNesterov {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols()))
                .collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() || self.velocity.len() != tensors.len() {
            return Err(Error::shape(
                "sgd_nesterov_step",
                (tensors.len(), 1),
                (grads.len(), 1),
            ));
        }
        for ((theta, g), v) in tensors.iter().zip(grads).zip(&self.velocity) {
            if theta.shape() != g.shape() || theta.shape() != v.shape() {
                return Err(Error::shape("sgd_nesterov_step", theta.shape(), g.shape()));
            }
        }
        let m = self.momentum;
        for ((theta, g), v) in tensors.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((t, &gi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vi = m * *vi + gi;
                *t -= lr * (gi + m * *vi);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow {
    pub params: ModelParams,
    pub momentum: f64,
}

impl EmaShadow {
    /// Starts as an exact copy of `params`.
    pub fn new(params: &ModelParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum must be in [0, 1], got {momentum}")));
        }
        Ok(Self {
            params: params.clone(),
            momentum,
        })
    }

    /// `shadow <- m shadow + (1 - m) params`, per entry.
    pub fn update(&mut self, live: &ModelParams) -> Result<()> {
        let m = self.momentum;
        let live_entries = live.entries();
        let mut shadow = self.params.tensors_mut();
        if live_entries.len() != shadow.len() {
            return Err(Error::shape("ema_update", (shadow.len(), 1), (live_entries.len(), 1)));
        }
        for (s, l) in shadow.iter_mut().zip(&live_entries) {
            if s.shape() != l.tensor.shape() {
                return Err(Error::shape("ema_update", s.shape(), l.tensor.shape()));
            }
            for (sv, &lv) in s.data_mut().iter_mut().zip(l.tensor.data()) {
                *sv = m * *sv + (1.0 - m) * lv;
            }
        }
        Ok(())
    }
}
