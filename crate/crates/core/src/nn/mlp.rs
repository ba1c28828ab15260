use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `out`.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Linear => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Linear),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One affine layer `y = act(W x + b)`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Fully connected network applied column-wise to `in × m` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Weight and bias slices in the same order as [`Mlp::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl Mlp {
    /// Layer widths `sizes[0] → … → sizes[last]`; `hidden` on every layer but
    /// the last, `output` on the last. Weights and biases are drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let depth = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..=bound));
                let bias = DVector::from_fn(fan_out, |_, _| rng.gen_range(-bound..=bound));
                Layer {
                    weight,
                    bias,
                    activation: if i + 1 == depth { output } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::config(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::config(format!("layer {i}: input width does not chain")));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::input(format!(
                "network expects {} input rows, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut z = &layer.weight * &cur;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let act = z.map(|v| layer.activation.apply(v));
            inputs.push(std::mem::replace(&mut cur, act));
            pre.push(z);
        }
        Ok(ForwardPass {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut z = &layer.weight * &cur;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            z.apply(|v| *v = layer.activation.apply(*v));
            cur = z;
        }
        Ok(cur)
    }

    /// Reverse pass: given `∂f/∂output`, returns parameter gradients and `∂f/∂input`.
    pub fn backward(&self, pass: &ForwardPass, grad_output: &DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let n_layers = self.layers.len();
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        let mut grad = grad_output.clone();
        for idx in (0..n_layers).rev() {
            let layer = &self.layers[idx];
            let out = if idx + 1 == n_layers {
                &pass.output
            } else {
                &pass.inputs[idx + 1]
            };
            let pre = &pass.pre[idx];
            for ((g, &p), &o) in grad.iter_mut().zip(pre.iter()).zip(out.iter()) {
                *g *= layer.activation.derivative(p, o);
            }
            weights.push(&grad * pass.inputs[idx].transpose());
            biases.push(grad.column_sum());
            grad = layer.weight.transpose() * &grad;
        }
        weights.reverse();
        biases.reverse();
        (MlpGrads { weights, biases }, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_net(sizes: &[usize], hidden: Activation, seed: u64) -> Mlp {
        Mlp::new(sizes, hidden, Activation::Linear, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = random_net(&[3, 4, 2], Activation::Tanh, 1);
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        let x = DMatrix::from_fn(3, 5, |i, j| (i + j) as f64);
        assert!(net.predict(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![Layer {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
            activation: Activation::Linear,
        }])
        .unwrap();
        let x = DMatrix::from_fn(3, 4, |i, j| i as f64 - 0.5 * j as f64);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn two_layer_matches_scalar_neurons() {
        let net = random_net(&[4, 3, 2], Activation::Tanh, 7);
        let x = [0.3, -1.2, 0.7, 2.0];
        let input = DMatrix::from_column_slice(4, 1, &x);
        let out = net.forward(&input).unwrap().output;
        let (l0, l1) = (&net.layers[0], &net.layers[1]);
        let mut hidden = [0.0; 3];
        for (r, h) in hidden.iter_mut().enumerate() {
            let mut s = l0.bias[r];
            for (c, xv) in x.iter().enumerate() {
                s += l0.weight[(r, c)] * xv;
            }
            *h = s.tanh();
        }
        for r in 0..2 {
            let mut s = l1.bias[r];
            for (c, hv) in hidden.iter().enumerate() {
                s += l1.weight[(r, c)] * hv;
            }
            assert!((out[(r, 0)] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = random_net(&[3, 2], Activation::Tanh, 0);
        assert!(matches!(
            net.forward(&DMatrix::zeros(4, 2)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // f = sum(output ⊙ probe) so ∂f/∂output = probe.
        for hidden in [Activation::Tanh, Activation::Relu] {
            let mut net = random_net(&[3, 5, 4, 2], hidden, 21);
            let x = DMatrix::from_fn(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.4 - 0.9);
            let probe = DMatrix::from_fn(2, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
            let f = |n: &Mlp| n.predict(&x).unwrap().component_mul(&probe).sum();
            let pass = net.forward(&x).unwrap();
            let (grads, gx) = net.backward(&pass, &probe);
            let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.to_vec()).collect();
            let h = 1e-6;
            let mut k = 0;
            for t in 0..net.tensors_mut().len() {
                for i in 0..net.tensors_mut()[t].len() {
                    let orig = net.tensors_mut()[t][i];
                    net.tensors_mut()[t][i] = orig + h;
                    let fp = f(&net);
                    net.tensors_mut()[t][i] = orig - h;
                    let fm = f(&net);
                    net.tensors_mut()[t][i] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                        "{hidden:?} param {k}"
                    );
                    k += 1;
                }
            }
            assert_eq!(gx.shape(), (3, 4));
        }
    }
}
