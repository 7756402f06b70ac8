use rand_distr::{Distribution, StandardNormal};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Negative-side slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Fully connected layer. `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let nonzero: Vec<usize> = if x.iter().filter(|v| **v != 0.0).count() * 2 < x.len() {
            (0..x.len()).filter(|&j| x[j] != 0.0).collect()
        } else {
            Vec::new()
        };
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let acc = if nonzero.is_empty() {
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            } else {
                nonzero.iter().map(|&j| row[j] * x[j]).sum::<f64>()
            };
            out.push(acc + self.biases[o]);
        }
    }
}

/// Multilayer perceptron: leaky-ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

/// Activations recorded by a forward pass, consumed by [`MlpTape::backward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// input seen by each layer
    inputs: Vec<Vec<f64>>,
    /// pre-activation of each hidden layer
    pre: Vec<Vec<f64>>,
}

#[inline]
fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Gaussian init scaled by `1/sqrt(fan_in)`, zero biases. With `zero_last`, the
/// output layer is exactly zero so the network maps everything to zero.
pub fn mlp_init(rng_seed: u64, layer_sizes: &[usize], zero_last: bool) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidParameter(
            "an MLP needs at least an input and an output size".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidParameter(
            "layer sizes must be positive".into(),
        ));
    }
    let mut rng = rng_from_seed(rng_seed);
    let n = layer_sizes.len() - 1;
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut layer = Dense::zeros(fan_in, fan_out);
            if !(zero_last && i + 1 == n) {
                let scale = 1.0 / (fan_in as f64).sqrt();
                for v in &mut layer.weights {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = scale * z;
                }
            }
            layer
        })
        .collect();
    Ok(MlpParams { layers })
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("empty layer list".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimMismatch(format!(
                    "layer output {} feeds input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::DimMismatch("layer buffers vs declared dims".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Appends parameters layer by layer, weights (row-major) before biases.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    /// Inverse of [`flatten_into`](Self::flatten_into); returns the number of values consumed.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(Error::DimMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }

    pub fn output_only(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.forward(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = leaky(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass returning the output and the tape needed to backpropagate.
    pub fn apply(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut cur = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(l.out_dim);
            l.forward(&cur, &mut out);
            inputs.push(cur);
            if i < last {
                let act = out.iter().map(|&v| leaky(v)).collect();
                pre.push(out);
                cur = act;
            } else {
                cur = out;
            }
        }
        Ok((cur, MlpTape { inputs, pre }))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "MLP input has {} entries, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl MlpTape {
    /// Returns `(d loss / d params, d loss / d input)` in flattening order.
    pub fn backward(&self, params: &MlpParams, d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grads = vec![0.0; params.num_params()];
        let d_in = self.backward_into(params, d_out, &mut grads, true);
        (grads, d_in.unwrap_or_default())
    }

    /// Adds the parameter gradient into `grads` (this network's flat segment) and
    /// optionally returns the input gradient.
    pub fn backward_into(
        &self,
        params: &MlpParams,
        d_out: &[f64],
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        assert_eq!(d_out.len(), params.output_dim(), "upstream gradient length");
        assert_eq!(grads.len(), params.num_params(), "gradient buffer length");
        let layers = &params.layers;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut at = 0;
        for l in layers {
            offsets.push(at);
            at += l.num_params();
        }

        let mut delta = d_out.to_vec();
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            if li < layers.len() - 1 {
                for (d, &z) in delta.iter_mut().zip(&self.pre[li]) {
                    *d *= leaky_grad(z);
                }
            }
            let x = &self.inputs[li];
            let (gw, gb) =
                grads[offsets[li]..offsets[li] + l.num_params()].split_at_mut(l.weights.len());
            let nonzero: Vec<usize> = if x.iter().filter(|v| **v != 0.0).count() * 2 < x.len() {
                (0..x.len()).filter(|&j| x[j] != 0.0).collect()
            } else {
                Vec::new()
            };
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                if nonzero.is_empty() {
                    for (g, &v) in row.iter_mut().zip(x) {
                        *g += d * v;
                    }
                } else {
                    for &j in &nonzero {
                        row[j] += d * x[j];
                    }
                }
            }
            if li == 0 && !want_input_grad {
                return None;
            }
            let mut d_in = vec![0.0; l.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                for (g, &w) in d_in.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            delta = d_in;
        }
        Some(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn shapes_follow_layer_sizes() {
        let m = mlp_init(3, &[4, 8, 2], false).unwrap();
        assert_eq!(m.layers()[0].weights.len(), 8 * 4);
        assert_eq!(m.layers()[0].biases.len(), 8);
        assert_eq!(m.layers()[1].weights.len(), 2 * 8);
        assert_eq!(m.layers()[1].biases.len(), 2);
        assert_eq!(m.num_params(), 32 + 8 + 16 + 2);
    }

    #[test]
    fn init_errors_and_determinism() {
        assert!(mlp_init(0, &[], false).is_err());
        assert!(mlp_init(0, &[3], false).is_err());
        assert_eq!(
            mlp_init(5, &[3, 4, 2], false).unwrap(),
            mlp_init(5, &[3, 4, 2], false).unwrap()
        );
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let m = mlp_init(1, &[5, 7, 3], true).unwrap();
        let (y, _) = m.apply(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        assert!(m.layers()[1].weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_last_layer_blocks_input_gradient_but_not_own() {
        let m = mlp_init(1, &[5, 7, 3], true).unwrap();
        let (_, tape) = m.apply(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        let (g, d_in) = tape.backward(&m, &[1.0, 0.5, -1.0]);
        assert!(d_in.iter().all(|&v| v == 0.0));
        let own = &g[m.layers()[0].num_params()..];
        assert!(own.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let layer = Dense {
            in_dim: 2,
            out_dim: 2,
            weights: vec![1.0, 2.0, 3.0, 4.0],
            biases: vec![0.5, -0.5],
        };
        let m = MlpParams::from_layers(vec![layer]).unwrap();
        let (y, _) = m.apply(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![-0.5, -1.5]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let m = mlp_init(1, &[3, 2], false).unwrap();
        assert!(matches!(m.apply(&[1.0]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn flatten_roundtrip() {
        let m = mlp_init(2, &[3, 5, 2], false).unwrap();
        let flat = m.flatten();
        let mut other = mlp_init(9, &[3, 5, 2], false).unwrap();
        assert_eq!(other.assign_flat(&flat).unwrap(), flat.len());
        assert_eq!(other, m);
        // layer-major, weights before biases, row-major
        assert_eq!(flat[1], m.layers()[0].weights[1]);
        assert_eq!(flat[15], m.layers()[0].biases[0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(77);
        let mut m = mlp_init(4, &[6, 9, 7, 3], false).unwrap();
        // nonzero biases so that every parameter matters
        for l in m.layers_mut() {
            l.biases
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &MlpParams, x: &[f64]| -> f64 {
            let y = m.output_only(x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + 0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, tape) = m.apply(&x).unwrap();
        let d_out: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a + b).collect();
        let (g, d_in) = tape.backward(&m, &d_out);

        let flat = m.flatten();
        let err = grad_check(
            |p| {
                let mut mm = m.clone();
                mm.assign_flat(p).unwrap();
                loss(&mm, &x)
            },
            &flat,
            &g,
            1e-5,
        );
        assert!(err < 1e-4, "param grad error {err}");

        let err = grad_check(|xx| loss(&m, xx), &x, &d_in, 1e-5);
        assert!(err < 1e-4, "input grad error {err}");
    }

    #[test]
    fn sparse_inputs_take_the_same_values() {
        let m = mlp_init(8, &[10, 4, 2], false).unwrap();
        let mut x = vec![0.0; 10];
        x[3] = 0.7;
        x[8] = -1.1;
        let (y, tape) = m.apply(&x).unwrap();
        let (g, _) = tape.backward(&m, &[1.0, -2.0]);
        // dense reference
        let l0 = &m.layers()[0];
        let h: Vec<f64> = (0..4)
            .map(|o| {
                let z: f64 =
                    (0..10).map(|j| l0.weights[o * 10 + j] * x[j]).sum::<f64>() + l0.biases[o];
                leaky(z)
            })
            .collect();
        let l1 = &m.layers()[1];
        for o in 0..2 {
            let z: f64 = (0..4).map(|j| l1.weights[o * 4 + j] * h[j]).sum::<f64>() + l1.biases[o];
            assert!((z - y[o]).abs() < 1e-14);
        }
        assert_eq!(g[0], 0.0);
    }
}
