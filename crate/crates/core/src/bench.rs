//! Experiment plumbing: configs, dataset generation, evaluation and the
//! exported tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{assemble_terms, Benchmark, BenchmarkSpec, ConstraintTerm, Counts, OperatorDataset, SamplePoints, TermKind};
use crate::error::{Error, Result};
use crate::fieldgen::{
    draw_output_scale, make_positive_advection_coeff, sample_grf, sample_periodic_grf, uniform_sensors, GrfSpec,
    InputFunction, KernelFamily,
};
use crate::netcore::Activation;
use crate::ntk::{ntk_diag, ntk_weights, TermSet};
use crate::operatornet::{Architecture, DeepOnetParams, Variant};
use crate::refsolvers::{integrate_antiderivative, solve_advection_auto, solve_burgers, BurgersSettings, ReferenceSolution};
use crate::rng::{child_rng, derive_seed};
use crate::trainer::{train, Observer, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub width: usize,
    pub depth: usize,
    /// Defaults to `width`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Defaults to ReLU for the antiderivative and tanh otherwise.
    #[serde(default)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Sensors per input function.
    pub m: usize,
    /// Observations, or initial and boundary points, per sample.
    pub p: usize,
    /// Collocation points per sample.
    #[serde(default)]
    pub q: usize,
    /// Draw `k = 10^a`, `a ~ U(-2, 2)`, per training input.
    #[serde(default)]
    pub random_output_scale: bool,
    /// Fixed output scales for the test set, `n_test` inputs each.
    #[serde(default)]
    pub test_scales: Vec<f64>,
    /// Spatial test grid size (antiderivative and advection).
    #[serde(default = "default_grid")]
    pub test_nx: usize,
    /// Temporal test grid size (advection).
    #[serde(default = "default_grid")]
    pub test_nt: usize,
    #[serde(default)]
    pub burgers_solver: BurgersSettings,
}

fn default_grid() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    #[serde(default)]
    pub viscosity: Option<f64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub grf: GrfSpec,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark_spec().validate()?;
        self.train.validate()?;
        self.grf.validate()?;
        self.architecture().validate()?;
        let d = &self.data;
        if d.n_test == 0 || d.test_nx < 2 || (self.benchmark == Benchmark::Advection && d.test_nt < 2) {
            return Err(Error::Config("test set and grid sizes must be positive".into()));
        }
        let want = match self.benchmark {
            Benchmark::Burgers => KernelFamily::PeriodicSpectral,
            _ => KernelFamily::SquaredExponential,
        };
        if self.grf.kernel_family != want {
            return Err(Error::Config(format!("{} inputs need a {want:?} prior", self.benchmark.name())));
        }
        if d.test_scales.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("test scales must be positive".into()));
        }
        Ok(())
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            tag: self.benchmark,
            viscosity: self.viscosity,
            counts: Counts {
                n: self.data.n_train,
                m: self.data.m,
                p: self.data.p,
                q: self.data.q,
            },
        }
    }

    pub fn architecture(&self) -> Architecture {
        let n = &self.network;
        Architecture {
            variant: n.variant,
            sensors: self.data.m,
            coord_dim: self.benchmark.coord_dim(),
            width: n.width,
            depth: n.depth,
            latent_dim: n.latent_dim.unwrap_or(n.width),
            outputs: 1,
            activation: n.activation.unwrap_or(match self.benchmark {
                Benchmark::Antiderivative => Activation::Relu,
                _ => Activation::Tanh,
            }),
        }
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity.unwrap_or(0.0)
    }

    /// Training settings with the batching stream split from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "batching", 0),
            ..self.train.clone()
        }
    }

    fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }
}

/// Held-out inputs with reference solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub inputs: Vec<InputFunction>,
    /// Output scale of each input, when drawn at a fixed scale.
    pub scales: Vec<Option<f64>>,
    pub references: Vec<ReferenceSolution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: OperatorDataset,
    pub test: TestSet,
}

fn draw_input(cfg: &ExperimentConfig, spec: &GrfSpec, seed: u64) -> Result<InputFunction> {
    let sensors = uniform_sensors(cfg.data.m);
    match cfg.benchmark {
        Benchmark::Antiderivative => sample_grf(spec, &sensors, seed),
        Benchmark::Advection => Ok(make_positive_advection_coeff(&sample_grf(spec, &sensors, seed)?)),
        Benchmark::Burgers => sample_periodic_grf(spec, &sensors, seed),
    }
}

fn train_sample(cfg: &ExperimentConfig, i: usize) -> Result<(InputFunction, SamplePoints)> {
    let root = cfg.data_seed();
    let spec = if cfg.data.random_output_scale {
        cfg.grf.with_output_scale(draw_output_scale(derive_seed(root, "train-scale", i as u64)))
    } else {
        cfg.grf.clone()
    };
    let u = draw_input(cfg, &spec, derive_seed(root, "train-input", i as u64))?;
    let mut rng = child_rng(root, "train-points", i as u64);
    let d = &cfg.data;
    let mut pts = SamplePoints::default();
    match cfg.benchmark {
        Benchmark::Antiderivative => {
            let ys: Vec<f64> = (0..d.p).map(|_| rng.gen::<f64>()).collect();
            let s = integrate_antiderivative(&u, &ys)?;
            pts.observations = ys.iter().copied().zip(s.values.iter().copied()).collect();
        }
        Benchmark::Advection | Benchmark::Burgers => {
            pts.ic_x = if cfg.benchmark == Benchmark::Burgers && d.p == d.m {
                u.sensor_locations.clone()
            } else {
                (0..d.p).map(|_| rng.gen::<f64>()).collect()
            };
            pts.bc_t = (0..d.p).map(|_| rng.gen::<f64>()).collect();
            pts.collocation = (0..d.q).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        }
    }
    Ok((u, pts))
}

fn reference(cfg: &ExperimentConfig, u: &InputFunction) -> Result<ReferenceSolution> {
    let d = &cfg.data;
    match cfg.benchmark {
        Benchmark::Antiderivative => integrate_antiderivative(u, &uniform_sensors(d.test_nx)),
        Benchmark::Advection => solve_advection_auto(u, d.test_nx, d.test_nt),
        Benchmark::Burgers => solve_burgers(u, cfg.viscosity(), &d.burgers_solver),
    }
}

fn test_sample(cfg: &ExperimentConfig, i: usize) -> Result<(InputFunction, Option<f64>, ReferenceSolution)> {
    let root = cfg.data_seed();
    let d = &cfg.data;
    let scale = if !d.test_scales.is_empty() {
        Some(d.test_scales[i / d.n_test])
    } else if d.random_output_scale {
        Some(draw_output_scale(derive_seed(root, "test-scale", i as u64)))
    } else {
        None
    };
    let spec = scale.map_or_else(|| cfg.grf.clone(), |k| cfg.grf.with_output_scale(k));
    let u = draw_input(cfg, &spec, derive_seed(root, "test-input", i as u64))?;
    let r = reference(cfg, &u)?;
    Ok((u, scale, r))
}

/// Draws training inputs and points and solves the test references.
/// Samples are generated in parallel and collected in order.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train: Vec<_> = (0..cfg.data.n_train)
        .into_par_iter()
        .map(|i| train_sample(cfg, i))
        .collect::<Result<_>>()?;
    let n_test = cfg.data.n_test * cfg.data.test_scales.len().max(1);
    let test: Vec<_> = (0..n_test)
        .into_par_iter()
        .map(|i| test_sample(cfg, i))
        .collect::<Result<_>>()?;
    let (inputs, samples) = train.into_iter().unzip();
    let mut t = TestSet {
        inputs: Vec::new(),
        scales: Vec::new(),
        references: Vec::new(),
    };
    for (u, k, r) in test {
        t.inputs.push(u);
        t.scales.push(k);
        t.references.push(r);
    }
    Ok(Dataset {
        train: OperatorDataset { inputs, samples },
        test: t,
    })
}

pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Layout under `dir`: `config.json`, `train.json`, `test.json`, and one
/// `inputs/{train,test}_NNNNN.csv` with a JSON sidecar per input function.
pub fn write_dataset(cfg: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<()> {
    let inputs = dir.join("inputs");
    std::fs::create_dir_all(&inputs).map_err(|e| Error::io(&inputs, e))?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    write_json(&dir.join("train.json"), &data.train)?;
    write_json(&dir.join("test.json"), &data.test)?;
    let named = data
        .train
        .inputs
        .iter()
        .enumerate()
        .map(|(i, u)| (format!("train_{i:05}.csv"), u, None))
        .chain(data.test.inputs.iter().enumerate().map(|(i, u)| (format!("test_{i:05}.csv"), u, data.test.scales[i])));
    for (name, u, scale) in named {
        let spec = scale.map_or_else(|| cfg.grf.clone(), |k| cfg.grf.with_output_scale(k));
        u.write_with_sidecar(&inputs.join(name), &spec)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_json(&dir.join("train.json"))?,
        test: read_json(&dir.join("test.json"))?,
    })
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<DeepOnetParams> {
    DeepOnetParams::init(&cfg.architecture(), cfg.init_seed())
}

/// Initializes from the config's seed and trains on the training split.
pub fn train_model(
    cfg: &ExperimentConfig,
    train_set: &OperatorDataset,
    observer: impl Observer,
) -> Result<(DeepOnetParams, TrainLog)> {
    let terms = assemble_terms(&cfg.benchmark_spec(), train_set)?;
    let model = init_model(cfg)?;
    train(&model, &terms, train_set, cfg.viscosity(), &cfg.train_config(), observer)
}

/// `‖pred − truth‖₂ / ‖truth‖₂`.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            context: "relative error",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::UndefinedMetric);
    }
    let diff = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

const PREDICT_CHUNK: usize = 2048;

/// Model output on every grid point of `r`, in the row-major order of
/// `r.values`.
pub fn predict_on_grid(model: &DeepOnetParams, u: &InputFunction, r: &ReferenceSolution) -> Result<Vec<f64>> {
    let pts: Vec<[f64; 2]> = if r.t.is_empty() {
        r.x.iter().map(|&x| [x, 0.0]).collect()
    } else {
        r.t.iter().flat_map(|&t| r.x.iter().map(move |&x| [x, t])).collect()
    };
    let d = model.coord_dim();
    let mut out = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(PREDICT_CHUNK) {
        let y = Array2::from_shape_fn((d, chunk.len()), |(i, j)| chunk[j][i]);
        out.extend(model.predict(&u.sensor_values, y.view())?.row(0).iter().copied());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub scale: f64,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub errors: Vec<f64>,
    pub scales: Vec<Option<f64>>,
    pub mean: f64,
    /// Population standard deviation of `errors`.
    pub std: f64,
    pub per_scale: Vec<ScaleStats>,
    pub runtime_seconds: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_errors(errors: Vec<f64>, scales: Vec<Option<f64>>, runtime_seconds: f64) -> Result<Self> {
        if errors.is_empty() || errors.len() != scales.len() {
            return Err(Error::Data("report needs one scale slot per error".into()));
        }
        let (mean, std) = mean_std(&errors);
        let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (e, k) in errors.iter().zip(&scales) {
            if let Some(k) = k {
                groups.entry(k.to_bits()).or_default().push(*e);
            }
        }
        let mut per_scale: Vec<ScaleStats> = groups
            .into_iter()
            .map(|(bits, v)| {
                let (mean, std) = mean_std(&v);
                ScaleStats {
                    scale: f64::from_bits(bits),
                    count: v.len(),
                    mean,
                    std,
                }
            })
            .collect();
        per_scale.sort_by(|a, b| a.scale.total_cmp(&b.scale));
        Ok(Self {
            errors,
            scales,
            mean,
            std,
            per_scale,
            runtime_seconds,
        })
    }

    /// `sample_id,scale_k,rel_l2`; `scale_k` is empty when unknown.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,scale_k,rel_l2\n");
        for (i, (e, k)) in self.errors.iter().zip(&self.scales).enumerate() {
            let k = k.map(|k| format!("{k:e}")).unwrap_or_default();
            out.push_str(&format!("{i},{k},{e:e}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Relative L² error of the model on every test input.
pub fn evaluate(model: &DeepOnetParams, test: &TestSet) -> Result<EvalReport> {
    if test.references.len() != test.inputs.len() || test.inputs.is_empty() {
        return Err(Error::Data("test set is missing reference solutions".into()));
    }
    let start = std::time::Instant::now();
    let errors = test
        .inputs
        .par_iter()
        .zip(&test.references)
        .map(|(u, r)| {
            let pred = predict_on_grid(model, u, r)?;
            relative_l2(&pred, r.values.as_slice().expect("standard layout"))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_errors(errors, test.scales.clone(), start.elapsed().as_secs_f64())
}

/// Residual weights `(max H / H(x, t))^α` over the grid `xs × ts`, with the
/// maximum taken over the grid. Rows follow `ts`.
pub fn residual_weight_map(
    model: &DeepOnetParams,
    benchmark: Benchmark,
    viscosity: f64,
    u: &InputFunction,
    xs: &[f64],
    ts: &[f64],
    alpha: f64,
) -> Result<Array2<f64>> {
    if benchmark == Benchmark::Antiderivative {
        return Err(Error::Config("the antiderivative benchmark has no residual".into()));
    }
    if let Some(&v) = xs.iter().chain(ts).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Interpolation { x: v, lo: 0.0, hi: 1.0 });
    }
    let dataset = OperatorDataset {
        inputs: vec![u.clone()],
        samples: vec![SamplePoints::default()],
    };
    let terms: Vec<ConstraintTerm> = ts
        .iter()
        .flat_map(|&t| {
            xs.iter().map(move |&x| ConstraintTerm {
                kind: TermKind::PdeResidual,
                sample_index: 0,
                point: [x, t],
                target: None,
                benchmark,
            })
        })
        .collect();
    let src = TermSet {
        model,
        terms: &terms,
        dataset: &dataset,
        viscosity,
    };
    let w = ntk_weights(&ntk_diag(&src)?, alpha)?;
    Ok(Array2::from_shape_vec((ts.len(), xs.len()), w.lambdas).expect("grid"))
}

/// `|∂s/∂x|` on the reference grid by central differences (one-sided at
/// the ends).
pub fn spatial_gradient_magnitude(r: &ReferenceSolution) -> Array2<f64> {
    let (nt, nx) = r.values.dim();
    Array2::from_shape_fn((nt, nx), |(i, j)| {
        let (a, b) = (j.saturating_sub(1), (j + 1).min(nx - 1));
        ((r.values[[i, b]] - r.values[[i, a]]) / (r.x[b] - r.x[a])).abs()
    })
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() - 1) as f64 * q).round() as usize]
}

/// Jaccard index between the lowest-decile cells of `map` and the
/// top-decile cells of `field`.
pub fn low_high_decile_jaccard(map: &Array2<f64>, field: &Array2<f64>) -> Result<f64> {
    if map.dim() != field.dim() {
        return Err(Error::Shape {
            context: "decile overlap",
            expected: field.len(),
            got: map.len(),
        });
    }
    let (mv, fv) = (map.iter().copied().collect::<Vec<_>>(), field.iter().copied().collect::<Vec<_>>());
    let (lo, hi) = (quantile(&mv, 0.1), quantile(&fv, 0.9));
    let (mut both, mut any) = (0usize, 0usize);
    for (m, f) in mv.iter().zip(&fv) {
        let (a, b) = (*m <= lo, *f >= hi);
        both += (a && b) as usize;
        any += (a || b) as usize;
    }
    Ok(both as f64 / any.max(1) as f64)
}

pub fn write_weight_map_csv(path: &Path, xs: &[f64], ts: &[f64], map: &Array2<f64>) -> Result<()> {
    let mut out = String::from("x,t,lambda\n");
    for (i, t) in ts.iter().enumerate() {
        for (j, x) in xs.iter().enumerate() {
            out.push_str(&format!("{x:e},{t:e},{:e}\n", map[[i, j]]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
