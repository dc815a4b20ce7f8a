//! DeepONet forward passes.
//!
//! A model maps an input function sampled at `m` sensors and a query
//! coordinate `y` to `n ≥ 1` outputs. Three variants share one parameter
//! container:
//!
//! * `mlp`: plain branch and trunk MLPs, `G = Σ_k b_k(u) t_k(y)`.
//! * `modified-mlp`: the same dot product with gated MLP backbones that do
//!   not share parameters.
//! * `modified-deeponet`: two encoders `U = φ(W_u u + b_u)`,
//!   `V = φ(W_y y + b_y)` blended into every hidden layer of both paths,
//!   `H ← (1 − Z) ⊙ U + Z ⊙ V` with `Z = φ(W H + b)`, and an activated
//!   final layer on both paths before the dot product.
//!
//! For `modified-deeponet` the branch and trunk [`ParameterSet`]s hold the
//! first, gate and final layers in order (kind `mlp`); the encoders live
//! on [`DeepOnetParams`]. Evaluation is always per `(u, y)` pair: the
//! tape gets one column per pair.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{
    self, flatten_affines, init_glorot, init_modified_glorot, Activation, Adjoints, Affine,
    JetLayout, MlpKind, NodeId, ParameterSet, Tape,
};
use crate::rng::{child_rng, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mlp,
    ModifiedMlp,
    ModifiedDeeponet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mlp => "mlp",
            Variant::ModifiedMlp => "modified-mlp",
            Variant::ModifiedDeeponet => "modified-deeponet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnetParams {
    pub variant: Variant,
    pub branch: ParameterSet,
    pub trunk: ParameterSet,
    pub latent_dim: usize,
    pub output_splits: Vec<usize>,
    pub encoders: Option<[Affine; 2]>,
}

/// Network shape for [`DeepOnetParams::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub variant: Variant,
    pub sensors: usize,
    pub coord_dim: usize,
    pub width: usize,
    /// Number of affine layers per sub-network.
    pub depth: usize,
    pub latent_dim: usize,
    #[serde(default = "default_outputs")]
    pub outputs: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_outputs() -> usize {
    1
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn check_splits(splits: &[usize], q: usize) -> Result<()> {
    if splits.len() < 2 || splits[0] != 0 || *splits.last().unwrap() != q {
        return Err(Error::Config(format!(
            "output splits {splits:?} must run from 0 to the latent size {q}"
        )));
    }
    if splits.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "output splits {splits:?} must be strictly increasing"
        )));
    }
    Ok(())
}

/// Equal blocks `0, q/n, 2q/n, …, q`.
pub fn even_splits(q: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || !q.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "latent size {q} does not split into {n} equal blocks"
        )));
    }
    Ok((0..=n).map(|i| i * q / n).collect())
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.sensors == 0 || self.coord_dim == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let min_depth = if self.variant == Variant::Mlp { 1 } else { 2 };
        if self.depth < min_depth {
            return Err(Error::Config(format!(
                "{} networks need depth ≥ {min_depth}",
                self.variant.name()
            )));
        }
        even_splits(self.latent_dim, self.outputs).map(|_| ())
    }

    fn sizes(&self, input: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.width, self.depth - 1));
        s.push(self.latent_dim);
        s
    }
}

impl DeepOnetParams {
    /// Glorot-normal initialization. Branch, trunk and encoders draw from
    /// separate streams derived from `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (bs, ts) = (arch.sizes(arch.sensors), arch.sizes(arch.coord_dim));
        let (sb, st) = (derive_seed(seed, "branch", 0), derive_seed(seed, "trunk", 0));
        let (branch, trunk, encoders) = match arch.variant {
            Variant::Mlp => (init_glorot(&bs, sb)?, init_glorot(&ts, st)?, None),
            Variant::ModifiedMlp => (
                init_modified_glorot(&bs, sb)?,
                init_modified_glorot(&ts, st)?,
                None,
            ),
            Variant::ModifiedDeeponet => {
                let mut rng = child_rng(seed, "encoders", 0);
                let enc = [
                    Affine::glorot(arch.sensors, arch.width, &mut rng),
                    Affine::glorot(arch.coord_dim, arch.width, &mut rng),
                ];
                (init_glorot(&bs, sb)?, init_glorot(&ts, st)?, Some(enc))
            }
        };
        let p = Self {
            variant: arch.variant,
            branch: branch.with_activation(arch.activation),
            trunk: trunk.with_activation(arch.activation),
            latent_dim: arch.latent_dim,
            output_splits: even_splits(arch.latent_dim, arch.outputs)?,
            encoders,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sensors(&self) -> usize {
        self.branch.input_dim()
    }

    pub fn coord_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_splits.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.branch.activation
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.trunk.validate()?;
        let q = self.latent_dim;
        for (name, net) in [("branch", &self.branch), ("trunk", &self.trunk)] {
            if net.output_dim() != q {
                return Err(Error::Config(format!(
                    "{name} output width {} differs from latent size {q}",
                    net.output_dim()
                )));
            }
        }
        check_splits(&self.output_splits, q)?;
        let want_kind = match self.variant {
            Variant::ModifiedMlp => MlpKind::ModifiedMlp,
            _ => MlpKind::Mlp,
        };
        if self.branch.kind != want_kind || self.trunk.kind != want_kind {
            return Err(Error::Config(format!(
                "{} model carries mismatched sub-network kinds",
                self.variant.name()
            )));
        }
        match (self.variant, &self.encoders) {
            (Variant::ModifiedDeeponet, Some([eu, ey])) => {
                let width = self.branch.layers[0].output_dim();
                let dims_ok = eu.input_dim() == self.sensors()
                    && ey.input_dim() == self.coord_dim()
                    && eu.output_dim() == width
                    && ey.output_dim() == width;
                let hidden_ok = [&self.branch, &self.trunk].iter().all(|net| {
                    let d = net.depth();
                    d >= 2
                        && net.layers[..d - 1].iter().all(|l| l.output_dim() == width)
                        && net.layers[1..d].iter().all(|l| l.input_dim() == width)
                });
                if !dims_ok || !hidden_ok {
                    return Err(Error::Config(
                        "encoder widths must equal every hidden width of both sub-networks".into(),
                    ));
                }
                Ok(())
            }
            (Variant::ModifiedDeeponet, None) => {
                Err(Error::Config("modified DeepONet is missing its encoders".into()))
            }
            (_, Some(_)) => Err(Error::Config(format!(
                "{} model must not carry shared encoders",
                self.variant.name()
            ))),
            (_, None) => Ok(()),
        }
    }

    /// Affine maps in flattening order: branch, trunk, shared encoders.
    pub fn affines(&self) -> Vec<&Affine> {
        let mut v = self.branch.affines();
        v.extend(self.trunk.affines());
        if let Some(enc) = &self.encoders {
            v.extend(enc.iter());
        }
        v
    }

    fn affines_mut(&mut self) -> Vec<&mut Affine> {
        let mut v = self.branch.affines_mut();
        v.extend(self.trunk.affines_mut());
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
        netcore::assign_affines(&mut self.affines_mut(), flat)
    }

    /// Records the model on a tape whose layer list came from
    /// [`Self::affines`], returning the `[n_outputs, …]` output node.
    pub fn record(&self, tape: &mut Tape<'_>, u: NodeId, y: NodeId) -> Result<NodeId> {
        let nb = self.branch.affines().len();
        let nt = self.trunk.affines().len();
        let (b, t) = match self.variant {
            Variant::Mlp | Variant::ModifiedMlp => (
                netcore::build_network(tape, &self.branch, 0, u)?,
                netcore::build_network(tape, &self.trunk, nb, y)?,
            ),
            Variant::ModifiedDeeponet => {
                let act = self.activation();
                let enc = nb + nt;
                let eu = tape.affine(enc, u)?;
                let eu = tape.activate(act, eu)?;
                let ev = tape.affine(enc + 1, y)?;
                let ev = tape.activate(act, ev)?;
                let path = |tape: &mut Tape<'_>, net: &ParameterSet, off: usize, x: NodeId| {
                    let d = net.depth();
                    let mut h = tape.affine(off, x)?;
                    h = tape.activate(act, h)?;
                    for l in 1..d - 1 {
                        let z = tape.affine(off + l, h)?;
                        let z = tape.activate(act, z)?;
                        h = tape.blend(z, eu, ev)?;
                    }
                    let h = tape.affine(off + d - 1, h)?;
                    tape.activate(act, h)
                };
                let b = path(tape, &self.branch, 0, u)?;
                let t = path(tape, &self.trunk, nb, y)?;
                (b, t)
            }
        };
        tape.dot(b, t, &self.output_splits)
    }

    fn check_batch(&self, u: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>) -> Result<()> {
        if u.nrows() != self.sensors() {
            return Err(Error::Shape {
                context: "branch input",
                expected: self.sensors(),
                got: u.nrows(),
            });
        }
        if y.nrows() != self.coord_dim() {
            return Err(Error::Shape {
                context: "trunk input",
                expected: self.coord_dim(),
                got: y.nrows(),
            });
        }
        if u.ncols() != y.ncols() {
            return Err(Error::Shape {
                context: "pair count",
                expected: u.ncols(),
                got: y.ncols(),
            });
        }
        Ok(())
    }

    /// Outputs for a batch of pairs: `u` is `[m, n]`, `y` is `[d, n]`,
    /// the result `[n_outputs, n]`.
    pub fn forward_batch(&self, u: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mt = ModelTape::build(self, u, y, JetLayout::value_only())?;
        Ok(mt.component(0))
    }

    /// Outputs for one input function at many query points (`y` is
    /// `[d, n]`).
    pub fn predict(&self, u_values: &[f64], y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = y.ncols();
        let ucol = ArrayView2::from_shape((u_values.len(), 1), u_values).expect("column");
        let u = ucol.broadcast((u_values.len(), n)).expect("broadcast").to_owned();
        self.forward_batch(u.view(), y)
    }

    /// Single-output predictions at points given row-major as
    /// `[n, coord_dim]`.
    pub fn predict_points(&self, u_values: &[f64], points: &[f64]) -> Result<Vec<f64>> {
        let d = self.coord_dim();
        if !points.len().is_multiple_of(d) {
            return Err(Error::Shape {
                context: "query points",
                expected: d * (points.len() / d + 1),
                got: points.len(),
            });
        }
        let n = points.len() / d;
        let y = Array2::from_shape_fn((d, n), |(i, j)| points[j * d + i]);
        Ok(self.predict(u_values, y.view())?.row(0).to_vec())
    }

    fn single(&self, u_values: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let yv = ArrayView2::from_shape((y.len(), 1), y).expect("column");
        Ok(self.predict(u_values, yv)?.column(0).to_vec())
    }

    pub fn to_checkpoint(&self, seed: Option<u64>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            variant: self.variant,
            activation: self.activation(),
            branch_sizes: self.branch.layer_sizes(),
            trunk_sizes: self.trunk.layer_sizes(),
            output_splits: self.output_splits.clone(),
            seed,
            params: self.flatten(),
            config: None,
        }
    }

    pub fn save(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(seed))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes a checkpoint that embeds `config`.
    pub fn save_with_config(&self, path: &Path, seed: u64, config: serde_json::Value) -> Result<()> {
        let ck = Checkpoint {
            config: Some(config),
            ..self.to_checkpoint(Some(seed))
        };
        std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.into_params()
    }
}

/// `Σ_k b_k(u) t_k(y)` for a single-output model.
pub fn deeponet_forward(p: &DeepOnetParams, u_values: &[f64], y: &[f64]) -> Result<f64> {
    if p.n_outputs() != 1 {
        return Err(Error::Config(format!(
            "model has {} outputs; use the multi-output forward",
            p.n_outputs()
        )));
    }
    Ok(p.single(u_values, y)?[0])
}

/// Blockwise dot products over the output splits.
pub fn deeponet_forward_multi(p: &DeepOnetParams, u_values: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_splits(&p.output_splits, p.latent_dim)?;
    p.single(u_values, y)
}

pub fn modified_deeponet_forward(p: &DeepOnetParams, u_values: &[f64], y: &[f64]) -> Result<f64> {
    if p.variant != Variant::ModifiedDeeponet {
        return Err(Error::Config("expected a modified DeepONet".into()));
    }
    p.validate()?;
    deeponet_forward(p, u_values, y)
}

/// A model recorded on a tape for a batch of `(u, y)` pairs.
pub struct ModelTape<'a> {
    tape: Tape<'a>,
    out: NodeId,
}

impl<'a> ModelTape<'a> {
    pub fn build(
        p: &'a DeepOnetParams,
        u: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        layout: JetLayout,
    ) -> Result<Self> {
        p.check_batch(&u, &y)?;
        let mut tape = Tape::new(p.affines(), layout, u.ncols());
        let un = tape.constant(u.to_owned())?;
        let yn = tape.coordinates(y.to_owned())?;
        let out = p.record(&mut tape, un, yn)?;
        Ok(Self { tape, out })
    }

    /// Jet component `c` of the outputs, `[n_outputs, ncols]`.
    pub fn component(&self, c: usize) -> Array2<f64> {
        self.tape.component_or_zero(self.out, c)
    }

    pub fn layout(&self) -> &JetLayout {
        self.tape.layout()
    }

    pub fn ncols(&self) -> usize {
        self.tape.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.tape.rows(self.out)
    }

    /// Backward pass; `seed` is `[n_outputs, ncomp * ncols]`.
    pub fn backward(&self, seed: &Array2<f64>) -> Result<Adjoints> {
        self.tape.backward(self.out, seed)
    }

    pub fn tape(&self) -> &Tape<'a> {
        &self.tape
    }
}

pub const CHECKPOINT_FORMAT: &str = "operant-checkpoint-v1";

/// JSON checkpoint: architecture plus the flat parameter vector in
/// [`DeepOnetParams::affines`] order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Variant,
    pub activation: Activation,
    pub branch_sizes: Vec<usize>,
    pub trunk_sizes: Vec<usize>,
    pub output_splits: Vec<usize>,
    pub seed: Option<u64>,
    pub params: Vec<f64>,
    /// Resolved experiment configuration, when written by an experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn into_params(self) -> Result<DeepOnetParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unknown checkpoint format {:?}", self.format)));
        }
        let (bs, ts) = (&self.branch_sizes, &self.trunk_sizes);
        if bs.len() < 2 || ts.len() < 2 {
            return Err(Error::Data("checkpoint layer sizes are too short".into()));
        }
        let arch = Architecture {
            variant: self.variant,
            sensors: bs[0],
            coord_dim: ts[0],
            width: bs.get(1).copied().unwrap_or(1),
            depth: bs.len() - 1,
            latent_dim: *bs.last().unwrap(),
            outputs: 1,
            activation: self.activation,
        };
        let mut p = DeepOnetParams::init(&arch, 0)?;
        if p.branch.layer_sizes() != *bs || p.trunk.layer_sizes() != *ts {
            return Err(Error::Data(
                "checkpoint layer sizes do not describe a supported architecture".into(),
            ));
        }
        check_splits(&self.output_splits, p.latent_dim)?;
        p.output_splits = self.output_splits;
        p.assign_flat(&self.params)?;
        p.validate()?;
        Ok(p)
    }
}
