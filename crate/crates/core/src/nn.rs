//! Fully connected networks with ReLU hidden layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameters {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

/// One affine layer, `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

/// A stack of [`Dense`] layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    /// Random network with layer widths `widths = [in, hidden.., out]`.
    ///
    /// Weights are drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                Dense {
                    weight: Tensor::matrix(fan_out, fan_in, data),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    /// All weights and biases zero.
    pub fn zeroed(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(w[1], w[0]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network without layers"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.rows() {
                return Err(Error::dim(format!(
                    "layer {k}: bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if k > 0 && layers[k - 1].weight.rows() != l.weight.cols() {
                return Err(Error::dim(format!(
                    "layer {k} expects {} inputs, previous layer emits {}",
                    l.weight.cols(),
                    layers[k - 1].weight.rows()
                )));
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

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Registers the parameters on `g` as leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        BoundNet {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
            input_width: self.input_width(),
        }
    }

    /// Evaluates the network on `x[batch × in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = bound.forward_checked(&mut g, xv)?;
        g.check()?;
        Ok(g.value(out).clone())
    }
}

impl Parameters for DenseNet {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// A [`DenseNet`] whose parameters live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundNet {
    layers: Vec<(Var, Var)>,
    input_width: usize,
}

impl BoundNet {
    /// Parameter handles in the same order as [`Parameters::parameters`].
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(weight, bias)` of layer `k`.
    pub fn layer(&self, k: usize) -> (Var, Var) {
        self.layers[k]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_from(g, x, 0)
    }

    /// Runs layers `start..` on `h`, which must already be the activated
    /// output of layer `start - 1` (or the raw input when `start == 0`).
    pub fn forward_from(&self, g: &mut Graph, h: Var, start: usize) -> Var {
        let last = self.layers.len() - 1;
        let mut h = h;
        for (k, &(w, b)) in self.layers.iter().enumerate().skip(start) {
            let wt = g.transpose(w);
            let z = g.matmul(h, wt);
            h = g.add_row(z, b);
            if k < last {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn forward_checked(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_width {
            return Err(Error::dim(format!(
                "network expects {} input columns, got {cols}",
                self.input_width
            )));
        }
        Ok(self.forward(g, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line reimplementation used as an oracle.
    fn oracle_forward(net: &DenseNet, x: &Tensor) -> Vec<Vec<f64>> {
        let mut rows = x.to_rows();
        let last = net.layers().len() - 1;
        for (k, l) in net.layers().iter().enumerate() {
            rows = rows
                .iter()
                .map(|r| {
                    (0..l.weight.rows())
                        .map(|o| {
                            let mut acc = l.bias.get(0, o);
                            for (i, v) in r.iter().enumerate() {
                                acc += l.weight.get(o, i) * v;
                            }
                            if k < last {
                                acc.max(0.0)
                            } else {
                                acc
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn zero_weights_emit_the_bias() {
        let mut net = DenseNet::zeroed(&[3, 4, 2]);
        net.layers_mut()[1].bias = Tensor::matrix(1, 2, vec![0.5, -1.5]);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let y = net.forward(&x).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn one_by_one_affine() {
        let net = DenseNet::from_layers(vec![Dense {
            weight: Tensor::scalar(2.0),
            bias: Tensor::scalar(1.0),
        }])
        .unwrap();
        assert_eq!(net.forward(&Tensor::scalar(3.0)).unwrap().item(), 7.0);
    }

    #[test]
    fn matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::new(&[4, 15, 3], &mut rng);
        let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect());
        let y = net.forward(&x).unwrap();
        for (r, expect) in oracle_forward(&net, &x).iter().enumerate() {
            for (a, b) in y.row(r).iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_a_dimension_error() {
        let net = DenseNet::zeroed(&[3, 2, 1]);
        assert!(matches!(
            net.forward(&Tensor::zeros(2, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let bad = vec![
            Dense {
                weight: Tensor::zeros(4, 3),
                bias: Tensor::zeros(1, 4),
            },
            Dense {
                weight: Tensor::zeros(2, 5),
                bias: Tensor::zeros(1, 2),
            },
        ];
        assert!(DenseNet::from_layers(bad).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = DenseNet::new(&[20, 15, 20], &mut ChaCha8Rng::seed_from_u64(1));
        let b = DenseNet::new(&[20, 15, 20], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let bound = (6.0f64 / 35.0).sqrt();
        assert!(a.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
    }
}
