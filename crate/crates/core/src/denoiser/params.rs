use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Width of the diffused feature block (one-hot atom types).
    pub vocab_size: usize,
    pub condition_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Schedule length, used to feed `t / T` to the network.
    pub steps: usize,
    /// Schedule clamp `s`; the output skip weights are `alpha_t` and `sigma_t`.
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_clamp() -> f64 {
    crate::schedule::DEFAULT_CLAMP
}

impl Architecture {
    /// Per-node input width: features, time, condition.
    pub fn input_width(&self) -> usize {
        self.vocab_size + 1 + self.condition_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden == 0
            || self.layers == 0
            || self.steps == 0
            || !(self.clamp > 0.0 && self.clamp < 0.5)
        {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Dense affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    fn uniform<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients for upstream `gy` and returns the input gradient.
    pub(crate) fn backward(
        &self,
        x: &Array2<f64>,
        gy: &Array2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &x.t().dot(gy);
        if let Some(gb) = &mut grad.bias {
            *gb += &gy.sum_axis(ndarray::Axis(0));
        }
        gy.dot(&self.weight.t())
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64], Vec<usize>)>) {
        out.push((
            format!("{prefix}.weight"),
            self.weight.as_slice().expect("standard layout"),
            self.weight.shape().to_vec(),
        ));
        if let Some(b) = &self.bias {
            out.push((
                format!("{prefix}.bias"),
                b.as_slice().expect("standard layout"),
                vec![b.len()],
            ));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().expect("standard layout"));
        if let Some(b) = &mut self.bias {
            out.push(b.as_slice_mut().expect("standard layout"));
        }
    }
}

/// One message-passing block: edge, coordinate and node networks, each a two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EgnnLayer {
    pub edge1: Linear,
    pub edge2: Linear,
    pub coord1: Linear,
    pub coord2: Linear,
    pub node1: Linear,
    pub node2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Linear,
    pub layers: Vec<EgnnLayer>,
    pub out: Linear,
}

impl Weights {
    pub fn zeros(arch: &Architecture) -> Self {
        let h = arch.hidden;
        Self {
            embed: Linear::zeros(arch.input_width(), h, true),
            layers: (0..arch.layers)
                .map(|_| EgnnLayer {
                    edge1: Linear::zeros(2 * h + 1, h, true),
                    edge2: Linear::zeros(h, h, true),
                    coord1: Linear::zeros(h, h, true),
                    coord2: Linear::zeros(h, 1, false),
                    node1: Linear::zeros(2 * h, h, true),
                    node2: Linear::zeros(h, h, true),
                })
                .collect(),
            out: Linear::zeros(h, arch.vocab_size, true),
        }
    }

    /// Named read-only views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out = Vec::new();
        self.embed.tensors("embed", &mut out);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.edge1.tensors(&format!("layers.{l}.edge1"), &mut out);
            layer.edge2.tensors(&format!("layers.{l}.edge2"), &mut out);
            layer
                .coord1
                .tensors(&format!("layers.{l}.coord1"), &mut out);
            layer
                .coord2
                .tensors(&format!("layers.{l}.coord2"), &mut out);
            layer.node1.tensors(&format!("layers.{l}.node1"), &mut out);
            layer.node2.tensors(&format!("layers.{l}.node2"), &mut out);
        }
        self.out.tensors("out", &mut out);
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.embed.tensors_mut(&mut out);
        for layer in &mut self.layers {
            layer.edge1.tensors_mut(&mut out);
            layer.edge2.tensors_mut(&mut out);
            layer.coord1.tensors_mut(&mut out);
            layer.coord2.tensors_mut(&mut out);
            layer.node1.tensors_mut(&mut out);
            layer.node2.tensors_mut(&mut out);
        }
        self.out.tensors_mut(&mut out);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for (_, t, _) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range")
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }

    pub fn shapes_match(&self, other: &Weights) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.2 == y.2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub weights: Weights,
}

impl DenoiserParams {
    /// Fan-in uniform weights, zero biases, zero final coordinate layer.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let h = arch.hidden;
        let weights = Weights {
            embed: Linear::uniform(rng, arch.input_width(), h, true),
            layers: (0..arch.layers)
                .map(|_| EgnnLayer {
                    edge1: Linear::uniform(rng, 2 * h + 1, h, true),
                    edge2: Linear::uniform(rng, h, h, true),
                    coord1: Linear::uniform(rng, h, h, true),
                    coord2: Linear::zeros(h, 1, false),
                    node1: Linear::uniform(rng, 2 * h, h, true),
                    node2: Linear::uniform(rng, h, h, true),
                })
                .collect(),
            out: Linear::uniform(rng, h, arch.vocab_size, true),
        };
        Ok(Self { arch, weights })
    }

    /// Overwrites every scalar, biases and the coordinate head included, with
    /// `U(-scale/sqrt(fan_in), scale/sqrt(fan_in))`-style noise.
    pub fn randomize_all<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        let shapes: Vec<Vec<usize>> = self.weights.tensors().into_iter().map(|t| t.2).collect();
        for (t, shape) in self.weights.tensors_mut().into_iter().zip(shapes) {
            let bound = scale / (shape[0] as f64).sqrt();
            t.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
    }
}

/// Parameter-shaped derivative container.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub arch: Architecture,
    pub weights: Weights,
}

impl GradientBundle {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self {
            arch: params.arch,
            weights: Weights::zeros(&params.arch),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        if !self.weights.shapes_match(&other.weights) {
            return Err(Error::Shape(
                "gradient bundles have different shapes".into(),
            ));
        }
        self.weights.add_assign(&other.weights);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .tensors()
            .iter()
            .flat_map(|(_, t, _)| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
