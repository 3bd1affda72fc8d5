//! Dense layers and parameter plumbing shared by the generator, the scale
//! head and the critic.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, TensorError, Var};

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Clones the tensors of `p` into an owned list.
pub fn snapshot<P: Parameters + ?Sized>(p: &P) -> Vec<Tensor> {
    p.tensors().into_iter().cloned().collect()
}

/// Collects gradients for `vars`, substituting zeros where no path exists.
pub fn collect_grads(grads: &Gradients, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Graph handles for a bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, graph: &mut Graph, x: Var) -> Result<Var, TensorError> {
        graph.affine(x, self.weight, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![inputs, outputs], data).expect("shape matches"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Registers the layer on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundLinear {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BoundLinear {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of `Linear` layers with `tanh` between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn forward(&self, graph: &mut Graph, mut x: Var) -> Result<Var, TensorError> {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(graph, x)?;
            if k < last {
                x = graph.tanh(x);
            }
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(graph, trainable))
                .collect(),
        }
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}
