//! Fixed-topology ReLU MLP with exact reverse-mode gradients.
//!
//! All trainable parameters live in one flat [`ParamVector`], the position
//! of the diffusing particle. Per layer the layout is the weight matrix
//! (row-major, `out x in`), the bias, and, for hidden layers with batch
//! normalization, the BN scale and shift.

mod mlp;
mod optim;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, domain};
use crate::{Error, Result};

pub use mlp::{activation_pattern, loss, loss_and_grad, predict};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub use_batch_norm: bool,
}

/// Where one linear layer's parameters sit inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    /// BN scale and shift, present on hidden layers when batch norm is on.
    pub norm: Option<(Range<usize>, Range<usize>)>,
}

impl LayerLayout {
    pub fn span(&self) -> Range<usize> {
        let end = self.norm.as_ref().map_or(self.bias.end, |(_, shift)| shift.end);
        self.weights.start..end
    }
}

impl Architecture {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        let arch = Architecture {
            layer_widths,
            activation: Activation::Relu,
            use_batch_norm: false,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.use_batch_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "zero width in {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let n = self.num_layers();
        let mut offset = 0;
        let mut out = Vec::with_capacity(n);
        for (l, pair) in self.layer_widths.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let weights = offset..offset + inputs * outputs;
            offset = weights.end;
            let bias = offset..offset + outputs;
            offset = bias.end;
            let norm = if self.use_batch_norm && l + 1 < n {
                let scale = offset..offset + outputs;
                let shift = scale.end..scale.end + outputs;
                offset = shift.end;
                Some((scale, shift))
            } else {
                None
            };
            out.push(LayerLayout {
                inputs,
                outputs,
                weights,
                bias,
                norm,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |l| l.span().end)
    }
}

/// Flat, ordered view of every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    /// Index range of each linear layer (weights, bias and any BN params).
    pub layer_offsets: Vec<Range<usize>>,
}

impl ParamVector {
    pub fn from_values(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        let layer_offsets: Vec<_> = arch.layout().iter().map(LayerLayout::span).collect();
        let dim = layer_offsets.last().map_or(0, |r| r.end);
        if values.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for an architecture with {dim} parameters",
                values.len()
            )));
        }
        Ok(ParamVector { values, layer_offsets })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[self.layer_offsets[l].clone()]
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layer_offsets != other.layer_offsets {
            return Err(Error::ShapeMismatch("parameter layouts differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

/// Kaiming fan-in normal weights, zero biases, unit BN scale.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = rng::stream(seed, domain::INIT, 0);
    let layout = arch.layout();
    let mut values = vec![0.0; arch.param_count()];
    for layer in &layout {
        let std = (2.0 / layer.inputs as f64).sqrt();
        for w in &mut values[layer.weights.clone()] {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        if let Some((scale, _)) = &layer.norm {
            values[scale.clone()].iter_mut().for_each(|g| *g = 1.0);
        }
    }
    ParamVector::from_values(arch, values)
}

/// Euclidean distance between two parameter vectors of the same layout.
pub fn displacement(params: &ParamVector, reference: &ParamVector) -> Result<f64> {
    params.check_layout(reference)?;
    Ok(squared_distance(&params.values, &reference.values).sqrt())
}

pub fn per_layer_displacement(params: &ParamVector, reference: &ParamVector) -> Result<Vec<f64>> {
    params.check_layout(reference)?;
    Ok(params
        .layer_offsets
        .iter()
        .map(|r| squared_distance(&params.values[r.clone()], &reference.values[r.clone()]).sqrt())
        .collect())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
