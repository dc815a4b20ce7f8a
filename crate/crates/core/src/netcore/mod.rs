//! Feed-forward networks and their derivatives.

mod params;
pub mod tape;

use ndarray::{Array2, ArrayView2};

pub use params::{
    assign_affines, flatten_affines, init_glorot, init_modified_glorot, Activation, Affine,
    MlpKind, ParameterSet,
};
pub use tape::{Adjoints, JetLayout, NodeId, Tape};

use crate::error::{Error, Result};

/// Appends the affine maps of `params` to a tape layer list and returns
/// their starting offset.
pub fn push_layers<'a>(layers: &mut Vec<&'a Affine>, params: &'a ParameterSet) -> usize {
    let off = layers.len();
    layers.extend(params.affines());
    off
}

/// Records the network on `tape` with its layers starting at `offset`
/// (as returned by [`push_layers`]).
pub fn build_network(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    offset: usize,
    x: NodeId,
) -> Result<NodeId> {
    let act = params.activation;
    let depth = params.depth();
    match params.kind {
        MlpKind::Mlp => {
            let mut h = x;
            for l in 0..depth {
                h = tape.affine(offset + l, h)?;
                if l + 1 < depth {
                    h = tape.activate(act, h)?;
                }
            }
            Ok(h)
        }
        MlpKind::ModifiedMlp => {
            let enc = offset + depth;
            let u = tape.affine(enc, x)?;
            let u = tape.activate(act, u)?;
            let v = tape.affine(enc + 1, x)?;
            let v = tape.activate(act, v)?;
            let mut h = tape.affine(offset, x)?;
            h = tape.activate(act, h)?;
            for l in 1..depth - 1 {
                let z = tape.affine(offset + l, h)?;
                let z = tape.activate(act, z)?;
                h = tape.blend(z, u, v)?;
            }
            tape.affine(offset + depth - 1, h)
        }
    }
}

fn check_input(params: &ParameterSet, dim: usize) -> Result<()> {
    if dim != params.input_dim() {
        return Err(Error::Shape {
            context: "network input",
            expected: params.input_dim(),
            got: dim,
        });
    }
    Ok(())
}

/// Evaluates a network on a batch of inputs stored as columns.
pub fn forward_batch(params: &ParameterSet, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, inputs.nrows())?;
    let mut layers = Vec::new();
    let off = push_layers(&mut layers, params);
    let mut tape = Tape::new(layers, JetLayout::value_only(), inputs.ncols());
    let x = tape.constant(inputs.to_owned())?;
    let out = build_network(&mut tape, params, off, x)?;
    Ok(tape.component_or_zero(out, 0))
}

fn forward_one(params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
    let col = ArrayView2::from_shape((input.len(), 1), input).expect("column shape");
    Ok(forward_batch(params, col)?.column(0).to_vec())
}

/// Plain MLP: tanh hidden layers, affine output.
pub fn mlp_forward(params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
    if params.kind != MlpKind::Mlp {
        return Err(Error::Config("expected a plain MLP".into()));
    }
    forward_one(params, input)
}

/// Gated MLP. With encoders `U = φ(W_u x + b_u)`, `V = φ(W_v x + b_v)`:
///
/// ```text
/// H¹ = φ(W¹ x + b¹)
/// Zˡ = φ(Wˡ⁺¹ Hˡ + bˡ⁺¹),  Hˡ⁺¹ = (1 − Zˡ) ⊙ U + Zˡ ⊙ V
/// f(x) = W^L H^{L−1} + b^L
/// ```
pub fn modified_mlp_forward(params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
    if params.kind != MlpKind::ModifiedMlp {
        return Err(Error::Config("expected a modified MLP".into()));
    }
    params.validate()?;
    forward_one(params, input)
}

/// Value and parameter gradient of a scalar function of the network
/// outputs over a batch.
///
/// `loss` receives the output jets, `[outputs, ncomp * ncols]` laid out as
/// described in [`tape`], and returns the scalar together with its
/// derivative with respect to every jet entry.
pub fn grad_params<F>(
    params: &ParameterSet,
    inputs: ArrayView2<'_, f64>,
    layout: JetLayout,
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    check_input(params, inputs.nrows())?;
    let mut layers = Vec::new();
    let off = push_layers(&mut layers, params);
    let ncols = inputs.ncols();
    let nc = layout.ncomp();
    let mut tape = Tape::new(layers, layout, ncols);
    let x = tape.coordinates(inputs.to_owned())?;
    let out = build_network(&mut tape, params, off, x)?;
    let mut jets = Array2::zeros((tape.rows(out), nc * ncols));
    for c in 0..nc {
        jets.slice_mut(ndarray::s![.., c * ncols..(c + 1) * ncols])
            .assign(&tape.component_or_zero(out, c));
    }
    let (value, seed) = loss(&jets);
    let adj = tape.backward(out, &seed)?;
    Ok((value, tape.param_grad(&adj, None)?))
}

/// Derivative of every network output with respect to input `coordinate`.
pub fn input_derivative(
    params: &ParameterSet,
    input: &[f64],
    coordinate: usize,
    order: usize,
) -> Result<Vec<f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::UnsupportedOrder(order));
    }
    check_input(params, input.len())?;
    if coordinate >= input.len() {
        return Err(Error::Config(format!(
            "coordinate {coordinate} out of range for a {}-dimensional input",
            input.len()
        )));
    }
    let layout = JetLayout::new(vec![coordinate], order == 2)?;
    let comp = if order == 1 {
        layout.first(0)
    } else {
        layout.second().expect("second tracked")
    };
    let mut layers = Vec::new();
    let off = push_layers(&mut layers, params);
    let mut tape = Tape::new(layers, layout, 1);
    let col = Array2::from_shape_vec((input.len(), 1), input.to_vec()).expect("column shape");
    let x = tape.coordinates(col)?;
    let out = build_network(&mut tape, params, off, x)?;
    Ok(tape.component_or_zero(out, comp).column(0).to_vec())
}
