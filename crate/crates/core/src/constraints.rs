//! Benchmark operators and the fully-decoupled loss.
//!
//! Every scalar penalty is a [`ConstraintTerm`]: one `(sample, kind,
//! point)` triple whose signed value `T` enters the loss as
//! `(2 / N*) Σ_k λ_k T_k²`.
//!
//! Terms are evaluated in batches ([`TermBatch`]): every term becomes one
//! tape column (two for periodic conditions, which compare `x = 0` with
//! `x = 1`), the output jets give `G`, `∂G/∂x`, `∂G/∂t` and `∂²G/∂x²`,
//! and a single backward pass seeded with `∂T/∂(jets)` yields every
//! term's parameter gradient at once.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldgen::InputFunction;
use crate::netcore::{Adjoints, JetLayout};
use crate::operatornet::{DeepOnetParams, ModelTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Antiderivative,
    Advection,
    Burgers,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Antiderivative => "antiderivative",
            Benchmark::Advection => "advection",
            Benchmark::Burgers => "burgers",
        }
    }

    /// Dimension of the query coordinate: `y` or `(x, t)`.
    pub fn coord_dim(self) -> usize {
        match self {
            Benchmark::Antiderivative => 1,
            _ => 2,
        }
    }

    /// Input-derivative components every batch of this benchmark needs.
    pub fn layout(self) -> JetLayout {
        match self {
            Benchmark::Antiderivative => JetLayout::value_only(),
            Benchmark::Advection => JetLayout::new(vec![0, 1], false).expect("layout"),
            Benchmark::Burgers => JetLayout::new(vec![0, 1], true).expect("layout"),
        }
    }
}

/// Ordering of this enum is the within-sample term order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    DataFit,
    Initial,
    BoundaryDirichlet,
    BoundaryPeriodicValue,
    BoundaryPeriodicDerivative,
    PdeResidual,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::DataFit => "data-fit",
            TermKind::Initial => "initial",
            TermKind::BoundaryDirichlet => "boundary-dirichlet",
            TermKind::BoundaryPeriodicValue => "boundary-periodic-value",
            TermKind::BoundaryPeriodicDerivative => "boundary-periodic-derivative",
            TermKind::PdeResidual => "pde-residual",
        }
    }

    pub fn has_target(self) -> bool {
        matches!(
            self,
            TermKind::DataFit | TermKind::Initial | TermKind::BoundaryDirichlet
        )
    }

    /// Loss component this kind is reported under.
    pub fn component(self) -> Component {
        match self {
            TermKind::DataFit => Component::Data,
            TermKind::Initial => Component::Initial,
            TermKind::BoundaryDirichlet
            | TermKind::BoundaryPeriodicValue
            | TermKind::BoundaryPeriodicDerivative => Component::Boundary,
            TermKind::PdeResidual => Component::Residual,
        }
    }

    fn columns(self) -> usize {
        match self {
            TermKind::BoundaryPeriodicValue | TermKind::BoundaryPeriodicDerivative => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Data,
    Initial,
    Boundary,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintTerm {
    pub kind: TermKind,
    pub sample_index: usize,
    /// `[y, 0]` for the antiderivative, `[x, t]` otherwise. Periodic terms
    /// store `[0, t]`; their partner point is `[1, t]`.
    pub point: [f64; 2],
    pub target: Option<f64>,
    pub benchmark: Benchmark,
}

/// Advection initial condition.
pub fn advection_ic(x: f64) -> f64 {
    (std::f64::consts::PI * x).sin()
}

/// Advection inflow condition at `x = 0`.
pub fn advection_inflow(t: f64) -> f64 {
    (0.5 * std::f64::consts::PI * t).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    /// Number of input functions.
    pub n: usize,
    /// Sensors per input function.
    pub m: usize,
    /// Observations (antiderivative) or initial/boundary points per sample.
    pub p: usize,
    /// Collocation points per sample.
    pub q: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub tag: Benchmark,
    #[serde(default)]
    pub viscosity: Option<f64>,
    pub counts: Counts,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if c.n == 0 || c.m == 0 || c.p == 0 {
            return Err(Error::Config("counts N, m and P must be positive".into()));
        }
        match self.tag {
            Benchmark::Antiderivative => Ok(()),
            _ if c.q == 0 => Err(Error::Config("collocation count Q must be positive".into())),
            Benchmark::Advection => Ok(()),
            Benchmark::Burgers => match self.viscosity {
                Some(nu) if nu > 0.0 && nu.is_finite() => Ok(()),
                _ => Err(Error::Config("Burgers needs a positive viscosity".into())),
            },
        }
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity.unwrap_or(0.0)
    }

    /// Terms contributed by one sample.
    pub fn terms_per_sample(&self) -> usize {
        let c = &self.counts;
        match self.tag {
            Benchmark::Antiderivative => c.p,
            Benchmark::Advection => 2 * c.p + c.q,
            Benchmark::Burgers => 3 * c.p + c.q,
        }
    }
}

/// Points and targets of one input sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplePoints {
    /// `(y, s(y))` pairs for supervised fitting.
    #[serde(default)]
    pub observations: Vec<(f64, f64)>,
    /// Initial-condition locations `x` (at `t = 0`).
    #[serde(default)]
    pub ic_x: Vec<f64>,
    /// Boundary times `t`.
    #[serde(default)]
    pub bc_t: Vec<f64>,
    /// Interior collocation points `(x, t)`.
    #[serde(default)]
    pub collocation: Vec<[f64; 2]>,
}

/// Training inputs: `N` input functions on `m` sensors with their points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDataset {
    pub inputs: Vec<InputFunction>,
    pub samples: Vec<SamplePoints>,
}

impl OperatorDataset {
    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn m(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    fn check(&self, spec: &BenchmarkSpec) -> Result<()> {
        let c = &spec.counts;
        let mismatch = |what: &str, want: usize, got: usize| {
            Error::Config(format!("dataset {what} count {got} does not match the benchmark's {want}"))
        };
        if self.inputs.len() != c.n || self.samples.len() != c.n {
            return Err(mismatch("sample", c.n, self.inputs.len().min(self.samples.len())));
        }
        for (u, s) in self.inputs.iter().zip(&self.samples) {
            if u.len() != c.m {
                return Err(mismatch("sensor", c.m, u.len()));
            }
            let (p_got, q_got) = match spec.tag {
                Benchmark::Antiderivative => (s.observations.len(), c.q),
                Benchmark::Advection | Benchmark::Burgers => {
                    if s.ic_x.len() != s.bc_t.len() {
                        return Err(mismatch("boundary", s.ic_x.len(), s.bc_t.len()));
                    }
                    (s.ic_x.len(), s.collocation.len())
                }
            };
            if p_got != c.p {
                return Err(mismatch("P", c.p, p_got));
            }
            if q_got != c.q {
                return Err(mismatch("Q", c.q, q_got));
            }
        }
        Ok(())
    }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Lists every term, sample-major, then by kind, then by point.
pub fn assemble_terms(spec: &BenchmarkSpec, dataset: &OperatorDataset) -> Result<Vec<ConstraintTerm>> {
    spec.validate()?;
    dataset.check(spec)?;
    let b = spec.tag;
    let mut terms = Vec::with_capacity(spec.counts.n * spec.terms_per_sample());
    let term = |kind, sample_index, point: [f64; 2], target| -> Result<ConstraintTerm> {
        if !point.iter().all(|&v| in_unit(v)) {
            return Err(Error::Data(format!(
                "{} point {point:?} of sample {sample_index} lies outside [0, 1]²",
                TermKind::name(kind)
            )));
        }
        Ok(ConstraintTerm {
            kind,
            sample_index,
            point,
            target,
            benchmark: b,
        })
    };
    for (i, (u, s)) in dataset.inputs.iter().zip(&dataset.samples).enumerate() {
        match b {
            Benchmark::Antiderivative => {
                for &(y, sy) in &s.observations {
                    terms.push(term(TermKind::DataFit, i, [y, 0.0], Some(sy))?);
                }
            }
            Benchmark::Advection => {
                for &x in &s.ic_x {
                    terms.push(term(TermKind::Initial, i, [x, 0.0], Some(advection_ic(x)))?);
                }
                for &t in &s.bc_t {
                    terms.push(term(TermKind::BoundaryDirichlet, i, [0.0, t], Some(advection_inflow(t)))?);
                }
                for &p in &s.collocation {
                    terms.push(term(TermKind::PdeResidual, i, p, None)?);
                }
            }
            Benchmark::Burgers => {
                for &x in &s.ic_x {
                    terms.push(term(TermKind::Initial, i, [x, 0.0], Some(u.interpolate(x)?))?);
                }
                for &t in &s.bc_t {
                    terms.push(term(TermKind::BoundaryPeriodicValue, i, [0.0, t], None)?);
                }
                for &t in &s.bc_t {
                    terms.push(term(TermKind::BoundaryPeriodicDerivative, i, [0.0, t], None)?);
                }
                for &p in &s.collocation {
                    terms.push(term(TermKind::PdeResidual, i, p, None)?);
                }
            }
        }
    }
    Ok(terms)
}

/// Output jets of one column.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub g: f64,
    pub gx: f64,
    pub gt: f64,
    pub gxx: f64,
}

/// `T` and `∂T/∂(g, gx, gt, gxx)` at the term's first column, plus the
/// same partials at its second column for periodic terms.
fn term_value(
    term: &ConstraintTerm,
    jets: &[Jet],
    coeff: f64,
    nu: f64,
) -> Result<(f64, [[f64; 4]; 2])> {
    let missing = || {
        Error::Data(format!(
            "{} term of sample {} has no target",
            term.kind.name(),
            term.sample_index
        ))
    };
    let j = jets[0];
    let mut d = [[0.0; 4]; 2];
    let value = match term.kind {
        TermKind::DataFit | TermKind::Initial | TermKind::BoundaryDirichlet => {
            let target = term.target.ok_or_else(missing)?;
            d[0][0] = 1.0;
            j.g - target
        }
        TermKind::BoundaryPeriodicValue => {
            d[0][0] = 1.0;
            d[1][0] = -1.0;
            j.g - jets[1].g
        }
        TermKind::BoundaryPeriodicDerivative => {
            d[0][1] = 1.0;
            d[1][1] = -1.0;
            j.gx - jets[1].gx
        }
        TermKind::PdeResidual => match term.benchmark {
            Benchmark::Advection => {
                d[0] = [0.0, coeff, 1.0, 0.0];
                j.gt + coeff * j.gx
            }
            Benchmark::Burgers => {
                d[0] = [j.gx, j.g, 1.0, -nu];
                j.gt + j.g * j.gx - nu * j.gxx
            }
            Benchmark::Antiderivative => {
                return Err(Error::Config(
                    "the antiderivative benchmark has no residual terms".into(),
                ))
            }
        },
    };
    Ok((value, d))
}

/// Evaluated terms with one shared backward pass.
pub struct TermBatch<'a> {
    mt: ModelTape<'a>,
    values: Vec<f64>,
    groups: Vec<Vec<usize>>,
    adj: Option<Adjoints>,
}

impl<'a> TermBatch<'a> {
    /// Evaluates `terms`; with `backward`, also runs the backward pass so
    /// gradients become available.
    pub fn build(
        model: &'a DeepOnetParams,
        terms: &[ConstraintTerm],
        dataset: &OperatorDataset,
        nu: f64,
        backward: bool,
    ) -> Result<Self> {
        let bench = match terms.first() {
            Some(t) => t.benchmark,
            None => return Err(Error::Config("empty term batch".into())),
        };
        if terms.iter().any(|t| t.benchmark != bench) {
            return Err(Error::Config("a batch mixes benchmarks".into()));
        }
        if model.n_outputs() != 1 {
            return Err(Error::Config("benchmark losses need a single-output model".into()));
        }
        let d = bench.coord_dim();
        if model.coord_dim() != d {
            return Err(Error::Shape {
                context: "trunk input for benchmark",
                expected: d,
                got: model.coord_dim(),
            });
        }
        let m = model.sensors();
        let ncols: usize = terms.iter().map(|t| t.kind.columns()).sum();
        let mut u = Array2::zeros((m, ncols));
        let mut y = Array2::zeros((d, ncols));
        let mut groups = Vec::with_capacity(terms.len());
        let mut col = 0;
        for t in terms {
            let input = dataset.inputs.get(t.sample_index).ok_or_else(|| {
                Error::Data(format!("term refers to missing sample {}", t.sample_index))
            })?;
            if input.len() != m {
                return Err(Error::Shape {
                    context: "sensor count",
                    expected: m,
                    got: input.len(),
                });
            }
            let mut g = Vec::with_capacity(2);
            for c in 0..t.kind.columns() {
                for (r, &v) in input.sensor_values.iter().enumerate() {
                    u[(r, col)] = v;
                }
                y[(0, col)] = if c == 0 { t.point[0] } else { 1.0 };
                if d == 2 {
                    y[(1, col)] = t.point[1];
                }
                g.push(col);
                col += 1;
            }
            groups.push(g);
        }
        let layout = bench.layout();
        let mt = ModelTape::build(model, u.view(), y.view(), layout.clone())?;
        let comps: Vec<Array2<f64>> = (0..layout.ncomp()).map(|c| mt.component(c)).collect();
        let slot = |name: Option<usize>| name.map(|c| &comps[c]);
        let (cx, ct, cxx) = if d == 2 {
            (slot(Some(layout.first(0))), slot(Some(layout.first(1))), slot(layout.second()))
        } else {
            (None, None, None)
        };
        let jet_at = |j: usize| Jet {
            g: comps[0][(0, j)],
            gx: cx.map_or(0.0, |a| a[(0, j)]),
            gt: ct.map_or(0.0, |a| a[(0, j)]),
            gxx: cxx.map_or(0.0, |a| a[(0, j)]),
        };
        let nc = layout.ncomp();
        let mut seed = Array2::zeros((1, nc * ncols));
        let comp_index = [
            Some(0),
            (d == 2).then(|| layout.first(0)),
            (d == 2).then(|| layout.first(1)),
            layout.second(),
        ];
        let mut values = Vec::with_capacity(terms.len());
        for (t, g) in terms.iter().zip(&groups) {
            let jets: Vec<Jet> = g.iter().map(|&j| jet_at(j)).collect();
            let coeff = match (t.kind, t.benchmark) {
                (TermKind::PdeResidual, Benchmark::Advection) => {
                    dataset.inputs[t.sample_index].interpolate(t.point[0])?
                }
                _ => 0.0,
            };
            let (v, partials) = term_value(t, &jets, coeff, nu)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite {} term for sample {} at {:?}",
                    t.kind.name(),
                    t.sample_index,
                    t.point
                )));
            }
            values.push(v);
            for (k, &j) in g.iter().enumerate() {
                for (slot, &ci) in comp_index.iter().enumerate() {
                    if let Some(ci) = ci {
                        seed[(0, ci * ncols + j)] = partials[k][slot];
                    }
                }
            }
        }
        let adj = if backward { Some(mt.backward(&seed)?) } else { None };
        Ok(Self {
            mt,
            values,
            groups,
            adj,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn adjoints(&self) -> Result<&Adjoints> {
        self.adj
            .as_ref()
            .ok_or_else(|| Error::Config("batch was evaluated without a backward pass".into()))
    }

    /// `Σ_k scale_k ∂T_k/∂θ`.
    pub fn weighted_gradient(&self, scale: &[f64]) -> Result<Vec<f64>> {
        if scale.len() != self.values.len() {
            return Err(Error::Shape {
                context: "term scale",
                expected: self.values.len(),
                got: scale.len(),
            });
        }
        let mut col_scale = vec![0.0; self.mt.ncols()];
        for (g, &s) in self.groups.iter().zip(scale) {
            for &j in g {
                col_scale[j] = s;
            }
        }
        self.mt.tape().param_grad(self.adjoints()?, Some(&col_scale))
    }

    /// `‖∂T_k/∂θ‖²` for every term.
    pub fn grad_sq_norms(&self) -> Result<Vec<f64>> {
        self.mt.tape().group_sq_norms(self.adjoints()?, &self.groups)
    }

    /// Rows `∂T_k/∂θ`.
    pub fn jacobian(&self) -> Result<Array2<f64>> {
        self.mt.tape().group_jacobian(self.adjoints()?, &self.groups)
    }
}

/// Terms per tape in the chunked drivers. Chunks are reduced in order,
/// so results do not depend on the number of worker threads.
pub const CHUNK: usize = 64;

/// Runs `f` over fixed-size chunks of `terms` in parallel, returning the
/// per-chunk results in order.
pub fn map_chunks<R, F>(terms: &[ConstraintTerm], f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&[ConstraintTerm]) -> Result<R> + Sync,
{
    terms.par_chunks(CHUNK).map(&f).collect()
}

/// Signed values of all terms.
pub fn term_values(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    nu: f64,
) -> Result<Vec<f64>> {
    let parts = map_chunks(terms, |c| {
        Ok(TermBatch::build(model, c, dataset, nu, false)?.values)
    })?;
    Ok(parts.concat())
}

/// Signed value of one term.
pub fn eval_constraint(
    term: &ConstraintTerm,
    model: &DeepOnetParams,
    dataset: &OperatorDataset,
    nu: f64,
) -> Result<f64> {
    Ok(TermBatch::build(model, std::slice::from_ref(term), dataset, nu, false)?.values[0])
}

/// Value and parameter gradient of one term, from its own tape.
pub fn constraint_gradient(
    term: &ConstraintTerm,
    model: &DeepOnetParams,
    dataset: &OperatorDataset,
    nu: f64,
) -> Result<(f64, Vec<f64>)> {
    let b = TermBatch::build(model, std::slice::from_ref(term), dataset, nu, true)?;
    Ok((b.values[0], b.weighted_gradient(&[1.0])?))
}

fn single_input(u: &InputFunction) -> OperatorDataset {
    OperatorDataset {
        inputs: vec![u.clone()],
        samples: vec![SamplePoints::default()],
    }
}

fn residual_term(benchmark: Benchmark, x: f64, t: f64) -> ConstraintTerm {
    ConstraintTerm {
        kind: TermKind::PdeResidual,
        sample_index: 0,
        point: [x, t],
        target: None,
        benchmark,
    }
}

/// `∂G/∂t + u(x) ∂G/∂x` with `u` linearly interpolated between sensors.
pub fn advection_residual(model: &DeepOnetParams, u: &InputFunction, x: f64, t: f64) -> Result<f64> {
    eval_constraint(&residual_term(Benchmark::Advection, x, t), model, &single_input(u), 0.0)
}

/// `∂G/∂t + G ∂G/∂x − ν ∂²G/∂x²`.
pub fn burgers_residual(model: &DeepOnetParams, u: &InputFunction, x: f64, t: f64, nu: f64) -> Result<f64> {
    eval_constraint(&residual_term(Benchmark::Burgers, x, t), model, &single_input(u), nu)
}

/// `(2 / N*) Σ_k λ_k T_k²`.
pub fn weighted_loss_from_values(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} weights for {} terms",
            weights.len(),
            values.len()
        )));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = values.iter().zip(weights).map(|(t, l)| l * t * t).sum();
    Ok(2.0 * s / values.len() as f64)
}

pub fn weighted_loss(
    terms: &[ConstraintTerm],
    weights: &[f64],
    model: &DeepOnetParams,
    dataset: &OperatorDataset,
    nu: f64,
) -> Result<f64> {
    if terms.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} weights for {} terms",
            weights.len(),
            terms.len()
        )));
    }
    weighted_loss_from_values(&term_values(model, terms, dataset, nu)?, weights)
}
