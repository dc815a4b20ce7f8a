//! Adam training with per-term loss weights.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    map_chunks, Component, ConstraintTerm, OperatorDataset, TermBatch, TermKind,
};
use crate::error::{Error, Result};
use crate::ntk::{ntk_weights, WeightState};
use crate::operatornet::DeepOnetParams;
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `λ = 1`.
    None,
    /// Constant weight per term kind.
    Fixed,
    /// `λ = 1 / ‖s‖_∞` per sample, from its targets.
    DataGuided,
    /// Kernel-diagonal weights recomputed on the minibatch.
    NtkGuided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub fixed_weights: Option<BTreeMap<TermKind, f64>>,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default = "default_update_every")]
    pub ntk_update_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Upper bound for data-guided weights of all-zero targets.
    #[serde(default = "default_max_weight")]
    pub max_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoint callbacks; none by default.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_decay_rate() -> f64 {
    0.9
}
fn default_decay_every() -> usize {
    2000
}
fn default_update_every() -> usize {
    1
}
fn default_log_every() -> usize {
    100
}
fn default_max_weight() -> f64 {
    1e6
}

impl TrainConfig {
    pub fn new(scheme: Scheme, batch_size: usize, iterations: usize) -> Self {
        Self {
            scheme,
            alpha: None,
            fixed_weights: None,
            batch_size,
            iterations,
            base_lr: default_lr(),
            decay_rate: default_decay_rate(),
            decay_every: default_decay_every(),
            ntk_update_every: default_update_every(),
            log_every: default_log_every(),
            max_weight: default_max_weight(),
            seed: 0,
            checkpoint_every: None,
        }
    }

    pub fn ntk(alpha: f64, batch_size: usize, iterations: usize) -> Self {
        Self {
            alpha: Some(alpha),
            ..Self::new(Scheme::NtkGuided, batch_size, iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.decay_every == 0
            || self.ntk_update_every == 0
            || self.log_every == 0
            || self.checkpoint_every == Some(0)
        {
            return Err(Error::Config(
                "batch size, decay interval, update cadence and log interval must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay rate {} outside (0, 1]", self.decay_rate)));
        }
        match self.scheme {
            Scheme::NtkGuided => match self.alpha {
                Some(a) if (0.0..=1.0).contains(&a) => {}
                Some(a) => return Err(Error::Config(format!("alpha {a} outside [0, 1]"))),
                None => return Err(Error::Config("ntk-guided weighting needs alpha".into())),
            },
            Scheme::Fixed => match &self.fixed_weights {
                Some(w) if w.values().all(|v| *v > 0.0 && v.is_finite()) => {}
                Some(_) => return Err(Error::Config("fixed weights must be positive".into())),
                None => return Err(Error::Config("fixed weighting needs fixed_weights".into())),
            },
            _ => {}
        }
        if !(self.max_weight > 0.0) {
            return Err(Error::Config("max_weight must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr · decay_rate^⌊step / decay_every⌋`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.decay_rate.powi((step / config.decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update in place. `step` is only used in the
/// error report.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, step: usize) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Shape {
            context: "optimizer state",
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient entry {i}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `λ_i = 1 / max_j |s_ij|` over the targets of sample `i`, broadcast to
/// all of its terms. Samples without targets get 1; all-zero targets get
/// `max_weight`.
pub fn data_guided_weights(terms: &[ConstraintTerm], max_weight: f64) -> WeightState {
    let mut peak: BTreeMap<usize, f64> = BTreeMap::new();
    for t in terms {
        if let Some(s) = t.target {
            let e = peak.entry(t.sample_index).or_insert(0.0);
            *e = e.max(s.abs());
        }
    }
    let lambdas = terms
        .iter()
        .map(|t| match peak.get(&t.sample_index) {
            None => 1.0,
            Some(&p) if p > 0.0 => (1.0 / p).min(max_weight),
            Some(_) => max_weight,
        })
        .collect();
    WeightState {
        lambdas,
        alpha: 0.0,
        last_update_step: 0,
        clamped: 0,
    }
}

/// Loss, gradient and term values of `(2 / B) Σ λ_k T_k²` over `terms`.
pub struct BatchResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub values: Vec<f64>,
    /// Kernel diagonal, when requested.
    pub diag: Option<Vec<f64>>,
}

/// Evaluates a batch in fixed chunks. When `weights` is `None` the
/// weights come from `make_weights(diag)` applied to the batch's kernel
/// diagonal, which is then computed from the same backward pass.
pub fn batch_step<W>(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    nu: f64,
    want_diag: bool,
    weights: W,
) -> Result<(BatchResult, Vec<f64>)>
where
    W: FnOnce(Option<&[f64]>) -> Result<Vec<f64>>,
{
    let chunks = map_chunks(terms, |c| {
        let b = TermBatch::build(model, c, dataset, nu, true)?;
        let d = if want_diag { Some(b.grad_sq_norms()?) } else { None };
        Ok((b, d))
    })?;
    let values: Vec<f64> = chunks.iter().flat_map(|(b, _)| b.values().iter().copied()).collect();
    let diag: Option<Vec<f64>> = want_diag.then(|| chunks.iter().flat_map(|(_, d)| d.clone().unwrap()).collect());
    let lambdas = weights(diag.as_deref())?;
    if lambdas.len() != terms.len() {
        return Err(Error::Shape {
            context: "batch weights",
            expected: terms.len(),
            got: lambdas.len(),
        });
    }
    let bsz = terms.len() as f64;
    let mut loss = 0.0;
    for (t, l) in values.iter().zip(&lambdas) {
        loss += l * t * t;
    }
    loss *= 2.0 / bsz;
    let mut gradient = vec![0.0; model.n_params()];
    let mut off = 0;
    for (b, _) in &chunks {
        let n = b.values().len();
        let scale: Vec<f64> = (0..n)
            .map(|i| 4.0 / bsz * lambdas[off + i] * values[off + i])
            .collect();
        let g = b.weighted_gradient(&scale)?;
        for (a, v) in gradient.iter_mut().zip(&g) {
            *a += v;
        }
        off += n;
    }
    Ok((
        BatchResult {
            loss,
            gradient,
            values,
            diag,
        },
        lambdas,
    ))
}

/// Loss and gradient of `(2 / N*) Σ λ_k T_k²` with given weights.
pub fn loss_and_gradient(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    nu: f64,
    lambdas: &[f64],
) -> Result<BatchResult> {
    Ok(batch_step(model, terms, dataset, nu, false, |_| Ok(lambdas.to_vec()))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_data: f64,
    pub loss_ic: f64,
    pub loss_bc: f64,
    pub loss_res: f64,
    pub loss_total_weighted: f64,
    pub lr: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_mean: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Total count of diagonal entries raised to the floor.
    pub clamped: usize,
}

impl TrainLog {
    /// Writes the records as CSV. Wall time is left out so the file is
    /// reproducible.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "step,loss_ic,loss_bc,loss_res,loss_data,loss_total_weighted,lr,lambda_min,lambda_max,lambda_mean\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.step,
                r.loss_ic,
                r.loss_bc,
                r.loss_res,
                r.loss_data,
                r.loss_total_weighted,
                r.lr,
                r.lambda_min,
                r.lambda_max,
                r.lambda_mean
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// What an observer sees at every weight update.
pub struct WeightUpdate<'a> {
    pub step: usize,
    pub terms: &'a [ConstraintTerm],
    pub diag: &'a [f64],
    pub lambdas: &'a [f64],
}

/// Training callbacks. Closures taking a [`WeightUpdate`] implement it.
pub trait Observer {
    fn weights(&mut self, _update: &WeightUpdate<'_>) {}
    fn checkpoint(&mut self, _step: usize, _model: &DeepOnetParams) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

impl<F: FnMut(&WeightUpdate<'_>)> Observer for F {
    fn weights(&mut self, update: &WeightUpdate<'_>) {
        self(update)
    }
}

/// Minibatches drawn without replacement, reshuffled every epoch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: crate::rng::Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = child_rng(seed, "batching", 0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let size = size.min(n);
        if self.pos + size > n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        b
    }
}

fn component_losses(terms: &[ConstraintTerm], values: &[f64]) -> BTreeMap<Component, f64> {
    let mut acc: BTreeMap<Component, (f64, usize)> = BTreeMap::new();
    for (t, v) in terms.iter().zip(values) {
        let e = acc.entry(t.kind.component()).or_insert((0.0, 0));
        e.0 += v * v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Trains `model` on `terms` and returns the final parameters with the
/// log. `observer` sees every kernel-weight update and checkpoint.
pub fn train(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    viscosity: f64,
    config: &TrainConfig,
    mut observer: impl Observer,
) -> Result<(DeepOnetParams, TrainLog)> {
    config.validate()?;
    let mut model = model.clone();
    let mut log = TrainLog::default();
    if config.iterations == 0 {
        return Ok((model, log));
    }
    if terms.is_empty() {
        return Err(Error::Config("no terms to train on".into()));
    }
    let n = terms.len();
    let static_weights: Vec<f64> = match config.scheme {
        Scheme::None | Scheme::NtkGuided => vec![1.0; n],
        Scheme::Fixed => {
            let w = config.fixed_weights.as_ref().expect("validated");
            terms.iter().map(|t| w.get(&t.kind).copied().unwrap_or(1.0)).collect()
        }
        Scheme::DataGuided => data_guided_weights(terms, config.max_weight).lambdas,
    };
    let mut held = static_weights;
    let alpha = config.alpha.unwrap_or(0.0);
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut batcher = Batcher::new(n, config.seed);
    let start = Instant::now();
    for step in 0..config.iterations {
        let idx = batcher.next(config.batch_size);
        let batch: Vec<ConstraintTerm> = idx.iter().map(|&i| terms[i]).collect();
        let update = config.scheme == Scheme::NtkGuided && step % config.ntk_update_every == 0;
        let mut clamped = 0;
        let (res, lambdas) = batch_step(&model, &batch, dataset, viscosity, update, |diag| {
            match diag {
                Some(d) => {
                    let w = ntk_weights(d, alpha)?;
                    clamped = w.clamped;
                    Ok(w.lambdas)
                }
                None => Ok(idx.iter().map(|&i| held[i]).collect()),
            }
        })?;
        if update {
            log.clamped += clamped;
            for (&i, &l) in idx.iter().zip(&lambdas) {
                held[i] = l;
            }
            observer.weights(&WeightUpdate {
                step,
                terms: &batch,
                diag: res.diag.as_deref().expect("requested"),
                lambdas: &lambdas,
            });
        }
        if !res.loss.is_finite() {
            let worst = res.values.iter().position(|v| !v.is_finite()).unwrap_or(0);
            let t = &batch[worst];
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} ({} term of sample {} at {:?}; λ in [{:e}, {:e}])",
                    res.loss,
                    t.kind.name(),
                    t.sample_index,
                    t.point,
                    lambdas.iter().copied().fold(f64::INFINITY, f64::min),
                    lambdas.iter().copied().fold(0.0, f64::max),
                ),
            });
        }
        let lr = lr_at(step, config);
        if step % config.log_every == 0 || step + 1 == config.iterations {
            let comp = component_losses(&batch, &res.values);
            let get = |c| comp.get(&c).copied().unwrap_or(0.0);
            log.records.push(LogRecord {
                step,
                loss_data: get(Component::Data),
                loss_ic: get(Component::Initial),
                loss_bc: get(Component::Boundary),
                loss_res: get(Component::Residual),
                loss_total_weighted: res.loss,
                lr,
                lambda_min: lambdas.iter().copied().fold(f64::INFINITY, f64::min),
                lambda_max: lambdas.iter().copied().fold(0.0, f64::max),
                lambda_mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        adam_step(&mut flat, &res.gradient, &mut adam, lr, step)?;
        model.assign_flat(&flat)?;
        if config.checkpoint_every.is_some_and(|k| (step + 1) % k == 0) {
            observer.checkpoint(step + 1, &model)?;
        }
    }
    Ok((model, log))
}

/// Parameter gradient of one sample's mean squared term,
/// `∇_θ (1/P) Σ_j T_j²`, over that sample's terms.
pub fn sample_gradient(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    nu: f64,
    sample: usize,
) -> Result<Vec<f64>> {
    let own: Vec<ConstraintTerm> = terms.iter().filter(|t| t.sample_index == sample).copied().collect();
    if own.is_empty() {
        return Err(Error::Data(format!("sample {sample} has no terms")));
    }
    // (2/P) Σ T² has gradient (4/P) Σ T ∇T; halve for (1/P) Σ T²
    let g = loss_and_gradient(model, &own, dataset, nu, &vec![1.0; own.len()])?.gradient;
    Ok(g.into_iter().map(|v| 0.5 * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub sample_id: usize,
    /// `bins + 1` shared edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histograms of per-sample gradient entries on shared bin edges spanning
/// all requested samples.
pub fn gradient_histogram(
    model: &DeepOnetParams,
    terms: &[ConstraintTerm],
    dataset: &OperatorDataset,
    nu: f64,
    sample_ids: &[usize],
    bins: usize,
) -> Result<Vec<Histogram>> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let grads = sample_ids
        .iter()
        .map(|&s| sample_gradient(model, terms, dataset, nu, s))
        .collect::<Result<Vec<_>>>()?;
    let (mut lo, mut hi) = grads
        .iter()
        .flatten()
        .fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        lo -= 1.0;
        hi += 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    Ok(sample_ids
        .iter()
        .zip(&grads)
        .map(|(&sample_id, g)| {
            let mut counts = vec![0; bins];
            for &v in g {
                let b = (((v - lo) / width).floor() as usize).min(bins - 1);
                counts[b] += 1;
            }
            Histogram {
                sample_id,
                edges: edges.clone(),
                counts,
            }
        })
        .collect())
}
