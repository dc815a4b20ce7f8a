use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Backbone of a single network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpKind {
    Mlp,
    ModifiedMlp,
}

/// One affine map `x -> W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot normal weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut crate::rng::Rng) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
    }

    fn assign_flat(&mut self, flat: &[f64]) -> usize {
        let nw = self.weight.len();
        for (w, v) in self.weight.iter_mut().zip(&flat[..nw]) {
            *w = *v;
        }
        let nb = self.bias.len();
        for (b, v) in self.bias.iter_mut().zip(&flat[nw..nw + nb]) {
            *b = *v;
        }
        nw + nb
    }
}

/// Flattened parameters of a list of affine maps, weights row-major then
/// bias, in list order.
pub fn flatten_affines(affines: &[&Affine]) -> Vec<f64> {
    let mut out = Vec::with_capacity(affines.iter().map(|a| a.n_params()).sum());
    for a in affines {
        a.push_flat(&mut out);
    }
    out
}

pub fn assign_affines(affines: &mut [&mut Affine], flat: &[f64]) -> Result<()> {
    let total: usize = affines.iter().map(|a| a.n_params()).sum();
    if total != flat.len() {
        return Err(Error::Shape {
            context: "flat parameter vector",
            expected: total,
            got: flat.len(),
        });
    }
    let mut off = 0;
    for a in affines.iter_mut() {
        off += a.assign_flat(&flat[off..]);
    }
    Ok(())
}

/// Weights and biases of one feed-forward network.
///
/// For [`MlpKind::ModifiedMlp`] the `encoders` hold the two input
/// encoders `U` and `V`; every hidden layer has the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub kind: MlpKind,
    pub activation: Activation,
    pub layers: Vec<Affine>,
    pub encoders: Option<[Affine; 2]>,
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

/// Glorot-normal initialization of a plain tanh MLP.
pub fn init_glorot(layer_sizes: &[usize], seed: u64) -> Result<ParameterSet> {
    check_sizes(layer_sizes)?;
    let mut rng = rng_from_seed(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| Affine::glorot(w[0], w[1], &mut rng))
        .collect();
    Ok(ParameterSet {
        kind: MlpKind::Mlp,
        activation: Activation::Tanh,
        layers,
        encoders: None,
    })
}

/// Glorot-normal initialization of a modified (gated) MLP. All hidden
/// widths must agree; the encoders map the input to that width.
pub fn init_modified_glorot(layer_sizes: &[usize], seed: u64) -> Result<ParameterSet> {
    check_sizes(layer_sizes)?;
    if layer_sizes.len() < 3 {
        return Err(Error::Config(
            "a modified MLP needs at least one hidden layer".into(),
        ));
    }
    let hidden = &layer_sizes[1..layer_sizes.len() - 1];
    if hidden.iter().any(|&w| w != hidden[0]) {
        return Err(Error::Config(
            "modified MLP hidden widths must all be equal".into(),
        ));
    }
    let mut params = init_glorot(layer_sizes, seed)?;
    let mut rng = crate::rng::child_rng(seed, "encoders", 0);
    let (d_in, width) = (layer_sizes[0], hidden[0]);
    params.kind = MlpKind::ModifiedMlp;
    params.encoders = Some([
        Affine::glorot(d_in, width, &mut rng),
        Affine::glorot(d_in, width, &mut rng),
    ]);
    Ok(params)
}

impl ParameterSet {
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.output_dim()));
        s
    }

    /// Affine maps in flattening order: layers, then encoders.
    pub fn affines(&self) -> Vec<&Affine> {
        let mut v: Vec<&Affine> = self.layers.iter().collect();
        if let Some(enc) = &self.encoders {
            v.extend(enc.iter());
        }
        v
    }

    pub fn affines_mut(&mut self) -> Vec<&mut Affine> {
        let mut v: Vec<&mut Affine> = self.layers.iter_mut().collect();
        if let Some(enc) = &mut self.encoders {
            v.extend(enc.iter_mut());
        }
        v
    }

    pub fn n_params(&self) -> usize {
        self.affines().iter().map(|a| a.n_params()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_affines(&self.affines())
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        assign_affines(&mut self.affines_mut(), flat)
    }

    /// Checks that adjacent dimensions chain and encoders match the width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Shape {
                    context: "layer chaining",
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape {
                    context: "bias length",
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        match (self.kind, &self.encoders) {
            (MlpKind::Mlp, None) => Ok(()),
            (MlpKind::Mlp, Some(_)) => Err(Error::Config("plain MLP carries encoders".into())),
            (MlpKind::ModifiedMlp, None) => {
                Err(Error::Config("modified MLP is missing its encoders".into()))
            }
            (MlpKind::ModifiedMlp, Some(enc)) => {
                let width = self.layers[0].output_dim();
                for e in enc {
                    if e.input_dim() != self.input_dim() || e.output_dim() != width {
                        return Err(Error::Config(format!(
                            "encoder shape {}x{} does not match input {} / width {}",
                            e.output_dim(),
                            e.input_dim(),
                            self.input_dim(),
                            width
                        )));
                    }
                }
                for l in &self.layers[1..self.layers.len() - 1] {
                    if l.input_dim() != width || l.output_dim() != width {
                        return Err(Error::Config(
                            "modified MLP gate layers must be square at the hidden width".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_network_has_one_weight_and_zero_bias() {
        let p = init_glorot(&[1, 1], 0).unwrap();
        assert_eq!(p.n_params(), 2);
        assert_eq!(p.layers[0].bias[0], 0.0);
        // std = sqrt(2 / 2) = 1: a single draw from N(0, 1)
        let mut rng = rng_from_seed(0);
        let expected: f64 = rng.sample(StandardNormal);
        assert_eq!(p.layers[0].weight[(0, 0)], expected);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_glorot(&[3, 8, 2], 9).unwrap(), init_glorot(&[3, 8, 2], 9).unwrap());
        assert_ne!(init_glorot(&[3, 8, 2], 9).unwrap(), init_glorot(&[3, 8, 2], 10).unwrap());
    }

    #[test]
    fn glorot_variance_matches() {
        let p = init_glorot(&[500, 500], 1).unwrap();
        let w = &p.layers[0].weight;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 1000.0;
        assert!((var - target).abs() / target < 0.1, "var = {var}");
    }

    #[test]
    fn bad_layer_lists_are_rejected() {
        assert!(matches!(init_glorot(&[], 0), Err(Error::Config(_))));
        assert!(matches!(init_glorot(&[4], 0), Err(Error::Config(_))));
        assert!(matches!(init_glorot(&[4, 0, 1], 0), Err(Error::Config(_))));
        assert!(init_modified_glorot(&[2, 8, 4, 1], 0).is_err());
    }

    #[test]
    fn flatten_round_trips_and_keeps_count() {
        let mut p = init_modified_glorot(&[2, 5, 5, 3], 4).unwrap();
        p.validate().unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.n_params());
        let mut q = p.clone();
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        q.assign_flat(&shifted).unwrap();
        assert_eq!(q.n_params(), p.n_params());
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(p.assign_flat(&flat[1..]).is_err());
    }
}
