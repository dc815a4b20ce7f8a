//! Reverse-mode differentiation over input-derivative jets.
//!
//! Every node holds a batch of `ncols` evaluation columns. Besides the
//! value, a node may carry truncated Taylor components with respect to the
//! network input: first derivatives along a list of input coordinates and,
//! optionally, the pure second derivative along the first of them. Forward
//! ops propagate these components exactly (chain and product rules), so a
//! network output node contains `G`, `∂G/∂y_i` and `∂²G/∂y_0²` for every
//! column. The backward pass then differentiates any of these components
//! with respect to the parameters.
//!
//! Columns never interact, so one backward pass with per-column seeds
//! yields every column's own gradient: they can be summed with per-column
//! weights ([`Tape::param_grad`]), reduced to per-group squared norms
//! without materializing them ([`Tape::group_sq_norms`]), or materialized
//! ([`Tape::group_jacobian`]).
//!
//! Storage: a node is a `[width, ncomp * ncols]` row-major matrix with the
//! components laid out in contiguous column blocks. Nodes that are
//! constant along the input (e.g. branch-only activations) store only the
//! value block.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{Activation, Affine};
use crate::error::{Error, Result};

/// Which input-derivative components are propagated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JetLayout {
    directions: Vec<usize>,
    second: bool,
}

impl JetLayout {
    pub fn value_only() -> Self {
        Self {
            directions: Vec::new(),
            second: false,
        }
    }

    /// First derivatives along `directions`; with `second`, also the pure
    /// second derivative along `directions[0]`.
    pub fn new(directions: Vec<usize>, second: bool) -> Result<Self> {
        if second && directions.is_empty() {
            return Err(Error::Config(
                "a second derivative needs a first-derivative direction".into(),
            ));
        }
        Ok(Self { directions, second })
    }

    pub fn ncomp(&self) -> usize {
        1 + self.directions.len() + usize::from(self.second)
    }

    pub fn directions(&self) -> &[usize] {
        &self.directions
    }

    /// Component index of `∂/∂y_{directions[i]}`.
    pub fn first(&self, i: usize) -> usize {
        1 + i
    }

    /// Component index of the second derivative, if tracked.
    pub fn second(&self) -> Option<usize> {
        self.second.then_some(1 + self.directions.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { layer: usize, x: NodeId },
    Act { act: Activation, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    RowSum { x: NodeId, splits: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    data: Array2<f64>,
    nc: usize,
    op: Op,
}

/// Per-node adjoints from one backward pass.
pub struct Adjoints {
    adj: Vec<Option<Array2<f64>>>,
}

pub struct Tape<'a> {
    layers: Vec<&'a Affine>,
    layout: JetLayout,
    ncols: usize,
    nodes: Vec<Node>,
}

#[inline]
fn act_derivs(act: Activation, a: f64, s: f64) -> (f64, f64, f64) {
    match act {
        Activation::Tanh => {
            let d1 = 1.0 - s * s;
            let d2 = -2.0 * s * d1;
            let d3 = -2.0 * d1 * d1 + 4.0 * s * s * d1;
            (d1, d2, d3)
        }
        Activation::Relu => (if a > 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0),
    }
}

#[inline]
fn act_value(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Tanh => a.tanh(),
        Activation::Relu => a.max(0.0),
    }
}

impl<'a> Tape<'a> {
    pub fn new(layers: Vec<&'a Affine>, layout: JetLayout, ncols: usize) -> Self {
        Self {
            layers,
            layout,
            ncols,
            nodes: Vec::new(),
        }
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }

    fn full_nc(&self) -> usize {
        self.layout.ncomp()
    }

    fn push(&mut self, data: Array2<f64>, nc: usize, op: Op) -> NodeId {
        self.nodes.push(Node { data, nc, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.nrows()
    }

    /// Number of stored components (1 for input-constant nodes).
    pub fn stored_components(&self, id: NodeId) -> usize {
        self.nodes[id.0].nc
    }

    /// A constant along the input (e.g. sensor values), `[rows, ncols]`.
    pub fn constant(&mut self, values: Array2<f64>) -> Result<NodeId> {
        if values.ncols() != self.ncols {
            return Err(Error::Shape {
                context: "tape constant columns",
                expected: self.ncols,
                got: values.ncols(),
            });
        }
        Ok(self.push(values.as_standard_layout().to_owned(), 1, Op::Input))
    }

    /// The differentiation variable `y`, `[dim, ncols]`, seeded with unit
    /// tangents along the layout's directions.
    pub fn coordinates(&mut self, coords: Array2<f64>) -> Result<NodeId> {
        if coords.ncols() != self.ncols {
            return Err(Error::Shape {
                context: "tape coordinate columns",
                expected: self.ncols,
                got: coords.ncols(),
            });
        }
        let dim = coords.nrows();
        if let Some(&d) = self.layout.directions.iter().find(|&&d| d >= dim) {
            return Err(Error::Config(format!(
                "derivative coordinate {d} out of range for a {dim}-dimensional input"
            )));
        }
        let nc = self.full_nc();
        if nc == 1 {
            return Ok(self.push(coords.as_standard_layout().to_owned(), 1, Op::Input));
        }
        let n = self.ncols;
        let mut data = Array2::zeros((dim, nc * n));
        data.slice_mut(ndarray::s![.., 0..n]).assign(&coords);
        for (i, &d) in self.layout.directions.iter().enumerate() {
            let c = self.layout.first(i);
            data.slice_mut(ndarray::s![d, c * n..(c + 1) * n]).fill(1.0);
        }
        Ok(self.push(data, nc, Op::Input))
    }

    pub fn affine(&mut self, layer: usize, x: NodeId) -> Result<NodeId> {
        let w = self.layers.get(layer).copied().ok_or_else(|| {
            Error::Config(format!("layer index {layer} out of range"))
        })?;
        let xin = &self.nodes[x.0];
        if xin.data.nrows() != w.input_dim() {
            return Err(Error::Shape {
                context: "affine input",
                expected: w.input_dim(),
                got: xin.data.nrows(),
            });
        }
        let nc = xin.nc;
        let n = self.ncols;
        let mut out = w.weight.dot(&xin.data);
        {
            let row_len = nc * n;
            let buf = out.as_slice_mut().expect("standard layout");
            for (r, &b) in w.bias.iter().enumerate() {
                for v in &mut buf[r * row_len..r * row_len + n] {
                    *v += b;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer,
                context: "affine forward",
            });
        }
        Ok(self.push(out, nc, Op::Affine { layer, x }))
    }

    pub fn activate(&mut self, act: Activation, x: NodeId) -> Result<NodeId> {
        let node = &self.nodes[x.0];
        let (rows, nc, n) = (node.data.nrows(), node.nc, self.ncols);
        let src = node.data.as_slice().expect("standard layout");
        let mut out = vec![0.0; src.len()];
        let second = self.layout.second();
        let nd = self.layout.directions.len();
        for r in 0..rows {
            let base = r * nc * n;
            for j in 0..n {
                let a = src[base + j];
                let s = act_value(act, a);
                out[base + j] = s;
                if nc > 1 {
                    let (d1, d2, _) = act_derivs(act, a, s);
                    for i in 0..nd {
                        let c = 1 + i;
                        out[base + c * n + j] = d1 * src[base + c * n + j];
                    }
                    if let Some(cs) = second {
                        let ax = src[base + n + j];
                        out[base + cs * n + j] = d2 * ax * ax + d1 * src[base + cs * n + j];
                    }
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer: self.last_layer_before(x),
                context: "activation",
            });
        }
        let data = Array2::from_shape_vec((rows, nc * n), out).expect("shape");
        Ok(self.push(data, nc, Op::Act { act, x }))
    }

    fn last_layer_before(&self, id: NodeId) -> usize {
        (0..=id.0)
            .rev()
            .find_map(|i| match self.nodes[i].op {
                Op::Affine { layer, .. } => Some(layer),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn check_same_rows(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<usize> {
        let (ra, rb) = (self.rows(a), self.rows(b));
        if ra != rb {
            return Err(Error::Shape {
                context,
                expected: ra,
                got: rb,
            });
        }
        Ok(ra)
    }

    fn linear_combine(&mut self, a: NodeId, b: NodeId, sign: f64, op: Op) -> Result<NodeId> {
        let rows = self.check_same_rows(a, b, "elementwise sum")?;
        let n = self.ncols;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let nc = na.nc.max(nb.nc);
        let mut out = Array2::zeros((rows, nc * n));
        for c in 0..nc {
            let mut blk = out.slice_mut(ndarray::s![.., c * n..(c + 1) * n]);
            if c < na.nc {
                blk += &na.data.slice(ndarray::s![.., c * n..(c + 1) * n]);
            }
            if c < nb.nc {
                blk.scaled_add(sign, &nb.data.slice(ndarray::s![.., c * n..(c + 1) * n]));
            }
        }
        Ok(self.push(out, nc, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.linear_combine(a, b, 1.0, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.linear_combine(a, b, -1.0, Op::Sub { a, b })
    }

    /// Elementwise product with the jet product rule.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let rows = self.check_same_rows(a, b, "elementwise product")?;
        let n = self.ncols;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let nc = na.nc.max(nb.nc);
        let (sa, sb) = (
            na.data.as_slice().expect("standard layout"),
            nb.data.as_slice().expect("standard layout"),
        );
        let nd = self.layout.directions.len();
        let second = self.layout.second();
        let mut out = vec![0.0; rows * nc * n];
        let (ca, cb) = (na.nc, nb.nc);
        for r in 0..rows {
            let (ba, bb, bo) = (r * ca * n, r * cb * n, r * nc * n);
            for j in 0..n {
                let a0 = sa[ba + j];
                let b0 = sb[bb + j];
                out[bo + j] = a0 * b0;
                if nc > 1 {
                    let comp = |s: &[f64], base: usize, cn: usize, c: usize| {
                        if c < cn {
                            s[base + c * n + j]
                        } else {
                            0.0
                        }
                    };
                    for i in 0..nd {
                        let c = 1 + i;
                        out[bo + c * n + j] = comp(sa, ba, ca, c) * b0 + a0 * comp(sb, bb, cb, c);
                    }
                    if let Some(cs) = second {
                        out[bo + cs * n + j] = comp(sa, ba, ca, cs) * b0
                            + 2.0 * comp(sa, ba, ca, 1) * comp(sb, bb, cb, 1)
                            + a0 * comp(sb, bb, cb, cs);
                    }
                }
            }
        }
        let data = Array2::from_shape_vec((rows, nc * n), out).expect("shape");
        Ok(self.push(data, nc, Op::Mul { a, b }))
    }

    /// `(1 - z) ⊙ u + z ⊙ v`.
    pub fn blend(&mut self, z: NodeId, u: NodeId, v: NodeId) -> Result<NodeId> {
        let d = self.sub(v, u)?;
        let zd = self.mul(z, d)?;
        self.add(u, zd)
    }

    /// Sums consecutive row blocks `[splits[i], splits[i+1])`.
    pub fn row_sum(&mut self, x: NodeId, splits: &[usize]) -> Result<NodeId> {
        let rows = self.rows(x);
        if splits.len() < 2
            || splits[0] != 0
            || *splits.last().unwrap() != rows
            || splits.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(format!(
                "splits {splits:?} do not partition {rows} rows"
            )));
        }
        let node = &self.nodes[x.0];
        let mut out = Array2::zeros((splits.len() - 1, node.data.ncols()));
        for (i, w) in splits.windows(2).enumerate() {
            let block = node.data.slice(ndarray::s![w[0]..w[1], ..]).sum_axis(Axis(0));
            out.row_mut(i).assign(&block);
        }
        let nc = node.nc;
        Ok(self.push(
            out,
            nc,
            Op::RowSum {
                x,
                splits: splits.to_vec(),
            },
        ))
    }

    /// Inner product over rows, one output row per split block.
    pub fn dot(&mut self, a: NodeId, b: NodeId, splits: &[usize]) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.row_sum(p, splits)
    }

    /// Component `c` of node `id` as a `[rows, ncols]` view; `None` when
    /// the node is constant along the input and `c > 0`.
    pub fn component(&self, id: NodeId, c: usize) -> Option<ArrayView2<'_, f64>> {
        let node = &self.nodes[id.0];
        let n = self.ncols;
        (c < node.nc).then(|| node.data.slice(ndarray::s![.., c * n..(c + 1) * n]))
    }

    /// Component `c` as an owned array, zero-filled if not stored.
    pub fn component_or_zero(&self, id: NodeId, c: usize) -> Array2<f64> {
        match self.component(id, c) {
            Some(v) => v.to_owned(),
            None => Array2::zeros((self.rows(id), self.ncols)),
        }
    }

    /// Runs the backward pass from `output` with `seed`, a
    /// `[rows, ncomp * ncols]` adjoint over all components of the output
    /// (full layout, even if the output node stores fewer).
    pub fn backward(&self, output: NodeId, seed: &Array2<f64>) -> Result<Adjoints> {
        let n = self.ncols;
        let out_node = &self.nodes[output.0];
        let full = self.full_nc();
        if seed.nrows() != out_node.data.nrows() || seed.ncols() != full * n {
            return Err(Error::Shape {
                context: "backward seed",
                expected: out_node.data.nrows() * full * n,
                got: seed.len(),
            });
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(
            seed.slice(ndarray::s![.., 0..out_node.nc * n])
                .to_owned(),
        );
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Affine { layer, x } => {
                    let w = self.layers[*layer];
                    let gx = w.weight.t().dot(&g);
                    accumulate(&mut adj, &self.nodes, *x, gx, n);
                }
                Op::Act { act, x } => {
                    let gx = self.act_backward(*act, &self.nodes[x.0], node, &g);
                    accumulate(&mut adj, &self.nodes, *x, gx, n);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, &self.nodes, *a, g.clone(), n);
                    accumulate(&mut adj, &self.nodes, *b, g.clone(), n);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj, &self.nodes, *a, g.clone(), n);
                    accumulate(&mut adj, &self.nodes, *b, -&g, n);
                }
                Op::Mul { a, b } => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let ga = self.mul_backward(na, nb, node.nc, &g);
                    let gb = self.mul_backward(nb, na, node.nc, &g);
                    accumulate(&mut adj, &self.nodes, *a, ga, n);
                    accumulate(&mut adj, &self.nodes, *b, gb, n);
                }
                Op::RowSum { x, splits } => {
                    let mut gx = Array2::zeros(self.nodes[x.0].data.raw_dim());
                    for (i, w) in splits.windows(2).enumerate() {
                        for r in w[0]..w[1] {
                            gx.row_mut(r).assign(&g.row(i));
                        }
                    }
                    accumulate(&mut adj, &self.nodes, *x, gx, n);
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    fn act_backward(&self, act: Activation, x: &Node, out: &Node, g: &Array2<f64>) -> Array2<f64> {
        let n = self.ncols;
        let nc = x.nc;
        let rows = x.data.nrows();
        let (sx, so, sg) = (
            x.data.as_slice().expect("standard layout"),
            out.data.as_slice().expect("standard layout"),
            g.as_slice().expect("standard layout"),
        );
        let nd = self.layout.directions.len();
        let second = self.layout.second();
        let mut gx = vec![0.0; sx.len()];
        for r in 0..rows {
            let base = r * nc * n;
            for j in 0..n {
                let a = sx[base + j];
                let s = so[base + j];
                let (d1, d2, d3) = act_derivs(act, a, s);
                let g0 = sg[base + j];
                if nc == 1 {
                    gx[base + j] = d1 * g0;
                    continue;
                }
                let mut acc = d1 * g0;
                for i in 0..nd {
                    let c = 1 + i;
                    let gi = sg[base + c * n + j];
                    acc += d2 * gi * sx[base + c * n + j];
                    gx[base + c * n + j] = d1 * gi;
                }
                if let Some(cs) = second {
                    let gss = sg[base + cs * n + j];
                    let ax = sx[base + n + j];
                    acc += d2 * gss * sx[base + cs * n + j] + d3 * gss * ax * ax;
                    gx[base + n + j] += 2.0 * d2 * gss * ax;
                    gx[base + cs * n + j] = d1 * gss;
                }
                gx[base + j] = acc;
            }
        }
        Array2::from_shape_vec((rows, nc * n), gx).expect("shape")
    }

    /// Adjoint of factor `a` in `p = a ⊙ b`, shaped to `a`'s storage.
    fn mul_backward(&self, a: &Node, b: &Node, nc_out: usize, g: &Array2<f64>) -> Array2<f64> {
        let n = self.ncols;
        let rows = a.data.nrows();
        let (ca, cb) = (a.nc, b.nc);
        let sb = b.data.as_slice().expect("standard layout");
        let sg = g.as_slice().expect("standard layout");
        let nd = self.layout.directions.len();
        let second = self.layout.second();
        let mut ga = vec![0.0; rows * ca * n];
        for r in 0..rows {
            let (bb, bg, bo) = (r * cb * n, r * nc_out * n, r * ca * n);
            for j in 0..n {
                let b0 = sb[bb + j];
                let bcomp = |c: usize| if c < cb { sb[bb + c * n + j] } else { 0.0 };
                let mut acc = sg[bg + j] * b0;
                if nc_out > 1 {
                    for i in 0..nd {
                        let c = 1 + i;
                        let gi = sg[bg + c * n + j];
                        acc += gi * bcomp(c);
                        if ca > 1 {
                            ga[bo + c * n + j] = gi * b0;
                        }
                    }
                    if let Some(cs) = second {
                        let gss = sg[bg + cs * n + j];
                        acc += gss * bcomp(cs);
                        if ca > 1 {
                            ga[bo + n + j] += 2.0 * gss * bcomp(1);
                            ga[bo + cs * n + j] = gss * b0;
                        }
                    }
                }
                ga[bo + j] = acc;
            }
        }
        Array2::from_shape_vec((rows, ca * n), ga).expect("shape")
    }

    fn affine_nodes(&self) -> Vec<(usize, NodeId, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Affine { layer, x } => Some((layer, x, NodeId(i))),
                _ => None,
            })
            .collect()
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        for l in &self.layers {
            offs.push(acc);
            acc += l.n_params();
        }
        offs.push(acc);
        offs
    }

    /// Parameter gradient summed over columns, each column's contribution
    /// scaled by `col_scale[j]` (1 when `None`). Flat layout follows
    /// [`super::params::flatten_affines`] over the tape's layers.
    pub fn param_grad(&self, adj: &Adjoints, col_scale: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.ncols;
        if let Some(s) = col_scale {
            if s.len() != n {
                return Err(Error::Shape {
                    context: "column scale",
                    expected: n,
                    got: s.len(),
                });
            }
        }
        let offs = self.param_offsets();
        let mut grad = vec![0.0; offs[self.layers.len()]];
        for (layer, x, out) in self.affine_nodes() {
            let Some(g) = adj.adj[out.0].as_ref() else { continue };
            let xin = &self.nodes[x.0];
            let nc = xin.nc;
            let g = match col_scale {
                None => g.clone(),
                Some(s) => {
                    let mut gs = g.clone();
                    for mut row in gs.rows_mut() {
                        for c in 0..nc {
                            for (v, &f) in row.slice_mut(ndarray::s![c * n..(c + 1) * n]).iter_mut().zip(s) {
                                *v *= f;
                            }
                        }
                    }
                    gs
                }
            };
            let gw = g.dot(&xin.data.t());
            let gb: Array1<f64> = g.slice(ndarray::s![.., 0..n]).sum_axis(Axis(1));
            let off = offs[layer];
            let nw = gw.len();
            for (d, v) in grad[off..off + nw].iter_mut().zip(gw.iter()) {
                *d += v;
            }
            for (d, v) in grad[off + nw..off + nw + gb.len()].iter_mut().zip(gb.iter()) {
                *d += v;
            }
            if !grad[off..off + nw + gb.len()].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer,
                    context: "parameter gradient",
                });
            }
        }
        Ok(grad)
    }

    /// `‖Σ_{j ∈ group} ∂(column j)/∂θ‖²` for every group of columns,
    /// computed from Gram matrices of the stored activations and adjoints.
    pub fn group_sq_norms(&self, adj: &Adjoints, groups: &[Vec<usize>]) -> Result<Vec<f64>> {
        let n = self.ncols;
        let mut per_layer: Vec<Vec<(NodeId, NodeId)>> = vec![Vec::new(); self.layers.len()];
        for (layer, x, out) in self.affine_nodes() {
            if adj.adj[out.0].is_some() {
                per_layer[layer].push((x, out));
            }
        }
        let mut norms = vec![0.0; groups.len()];
        let mut xs: Vec<f64> = Vec::new();
        let mut gs: Vec<f64> = Vec::new();
        for (layer, uses) in per_layer.iter().enumerate() {
            if uses.is_empty() {
                continue;
            }
            let (w_in, w_out) = (self.layers[layer].input_dim(), self.layers[layer].output_dim());
            for (gi, group) in groups.iter().enumerate() {
                xs.clear();
                gs.clear();
                let mut bias = vec![0.0; w_out];
                let mut p = 0;
                for &(x, out) in uses {
                    let xin = &self.nodes[x.0];
                    let g = adj.adj[out.0].as_ref().expect("checked");
                    let nc = xin.nc;
                    for &col in group {
                        for c in 0..nc {
                            let k = c * n + col;
                            xs.extend(xin.data.column(k).iter());
                            gs.extend(g.column(k).iter());
                            p += 1;
                        }
                        for (b, v) in bias.iter_mut().zip(g.column(col).iter()) {
                            *b += v;
                        }
                    }
                }
                let mut total = bias.iter().map(|v| v * v).sum::<f64>();
                for i in 0..p {
                    let (xi, gi_) = (&xs[i * w_in..(i + 1) * w_in], &gs[i * w_out..(i + 1) * w_out]);
                    for j in 0..=i {
                        let xj = &xs[j * w_in..(j + 1) * w_in];
                        let gj = &gs[j * w_out..(j + 1) * w_out];
                        let dx: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                        let dg: f64 = gi_.iter().zip(gj).map(|(a, b)| a * b).sum();
                        total += if i == j { dx * dg } else { 2.0 * dx * dg };
                    }
                }
                norms[gi] += total;
            }
        }
        if let Some(k) = norms.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite squared gradient norm for group {k}"
            )));
        }
        Ok(norms)
    }

    /// Materialized per-group gradients, `[groups, n_params]`.
    pub fn group_jacobian(&self, adj: &Adjoints, groups: &[Vec<usize>]) -> Result<Array2<f64>> {
        let n = self.ncols;
        let offs = self.param_offsets();
        let mut jac = Array2::zeros((groups.len(), offs[self.layers.len()]));
        for (layer, x, out) in self.affine_nodes() {
            let Some(g) = adj.adj[out.0].as_ref() else { continue };
            let xin = &self.nodes[x.0];
            let (w_in, w_out) = (self.layers[layer].input_dim(), self.layers[layer].output_dim());
            let off = offs[layer];
            for (gi, group) in groups.iter().enumerate() {
                let mut row = jac.row_mut(gi);
                let row = row.as_slice_mut().expect("contiguous row");
                for &col in group {
                    for c in 0..xin.nc {
                        let k = c * n + col;
                        let xv = xin.data.column(k);
                        let gv = g.column(k);
                        for o in 0..w_out {
                            let go = gv[o];
                            if go == 0.0 {
                                continue;
                            }
                            let dst = &mut row[off + o * w_in..off + (o + 1) * w_in];
                            for (d, xval) in dst.iter_mut().zip(xv.iter()) {
                                *d += go * xval;
                            }
                        }
                    }
                    for o in 0..w_out {
                        row[off + w_in * w_out + o] += g[(o, col)];
                    }
                }
            }
        }
        Ok(jac)
    }
}

/// Adds `contrib` into the adjoint of `id`, trimming components the node
/// does not store.
fn accumulate(adj: &mut [Option<Array2<f64>>], nodes: &[Node], id: NodeId, contrib: Array2<f64>, n: usize) {
    let nc = nodes[id.0].nc;
    let contrib = if contrib.ncols() == nc * n {
        contrib
    } else {
        contrib.slice(ndarray::s![.., 0..nc * n]).to_owned()
    };
    match &mut adj[id.0] {
        Some(a) => *a += &contrib,
        slot @ None => *slot = Some(contrib),
    }
}
