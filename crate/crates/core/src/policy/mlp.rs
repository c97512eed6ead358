//! Fully connected ReLU network with hand-written reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;

/// One affine map `h ↦ W h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "serde_mat::mat")]
    pub weights: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Affine layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradient with the same layout as the network.
pub type MlpGradient = Mlp;

fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|z| z.max(0.0))
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`, all parameters zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// Weights uniform in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Dimension(format!(
                    "layer {i} feeds {} units into {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension(format!(
                    "layer {i} bias length {}",
                    l.bias.len()
                )));
            }
            if !linalg::all_finite_m(&l.weights) || !linalg::all_finite_v(&l.bias) {
                return Err(Error::Domain(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = &l.weights * &h + &l.bias;
            h = if i < last { relu(&z) } else { z };
        }
        h
    }

    /// Gradient of `upstreamᵀ f(x)` with respect to every parameter.
    pub fn backward(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> MlpGradient {
        let last = self.layers.len() - 1;
        // Layer inputs h_0..h_{L-1} and hidden pre-activations.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = &l.weights * &h + &l.bias;
            inputs.push(h);
            if i < last {
                h = relu(&z);
                pre.push(z);
            } else {
                h = z;
            }
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            grads.push(Layer {
                weights: &delta * inputs[i].transpose(),
                bias: delta.clone(),
            });
            if i > 0 {
                let back = self.layers[i].weights.transpose() * &delta;
                delta = back.zip_map(&pre[i - 1], |g, z| if z > 0.0 { g } else { 0.0 });
            }
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    /// Parameters flattened layer by layer, row-major weights then bias.
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.outputs() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for a network of {}",
                p.len(),
                self.param_count()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for r in 0..l.outputs() {
                for c in 0..l.inputs() {
                    l.weights[(r, c)] = p[i];
                    i += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = p[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// `self += scale · other`, used to accumulate gradients in a fixed order.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights * scale;
            a.bias += &b.bias * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 42, 42, 2]).unwrap();
        let y = net.forward(&DVector::from_vec(vec![1.0, -3.0, 20.0, 0.5]));
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn hand_computed_path() {
        // 2 → 3 → 1, one hidden unit inactive.
        let net = Mlp {
            layers: vec![
                Layer {
                    weights: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]),
                    bias: DVector::from_vec(vec![0.0, 0.5, 0.0]),
                },
                Layer {
                    weights: DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 3.0]),
                    bias: DVector::from_vec(vec![0.25]),
                },
            ],
        };
        // hidden = relu([1, 2.5, -3]) = [1, 2.5, 0], out = 2 − 2.5 + 0 + 0.25.
        let y = net.forward(&DVector::from_vec(vec![1.0, 2.0]));
        assert!((y[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn positive_homogeneity_without_biases() {
        let mut rng = seed::rng(4);
        let net = Mlp::glorot(&[4, 42, 42, 2], &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        let y = net.forward(&x);
        let y3 = net.forward(&(&x * 3.0));
        assert!((y3 - y * 3.0).amax() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = seed::rng(5);
        let net = Mlp::glorot(&[4, 8, 2], &mut rng).unwrap();
        let g = net.backward(&DVector::from_element(4, 1.0), &DVector::zeros(2));
        assert!(g.params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_bias_gradient_is_upstream() {
        let mut rng = seed::rng(6);
        let net = Mlp::glorot(&[4, 8, 8, 2], &mut rng).unwrap();
        let up = DVector::from_vec(vec![0.7, -1.3]);
        let g = net.backward(&DVector::from_element(4, 0.2), &up);
        assert_eq!(g.layers[2].bias, up);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = seed::rng(7);
        let net = Mlp::glorot(&[3, 5, 2], &mut rng).unwrap();
        let mut other = Mlp::zeros(&[3, 5, 2]).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(other, net);
    }
}
