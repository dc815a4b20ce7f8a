//! Random input functions.
//!
//! Two Gaussian random field priors are provided:
//!
//! * squared-exponential: covariance `k² exp(-(x - x')² / (2 l²))`, sampled
//!   exactly on the sensor grid through a Cholesky factor of the unit-scale
//!   kernel matrix;
//! * periodic-spectral: a truncated Karhunen–Loève expansion on `[0, 1]`
//!   with Laplacian eigenvalues `(2πj)²` and mode variance
//!   `k² ((2πj)² + shift)^(-exponent)`.
//!
//! Both factor the output scale out of the kernel, so sampled values scale
//! linearly with `output_scale` for a fixed seed.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SquaredExponential,
    PeriodicSpectral,
}

/// Parameters of a Gaussian random field prior on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSpec {
    pub kernel_family: KernelFamily,
    pub length_scale: f64,
    pub output_scale: f64,
    #[serde(default = "default_exponent")]
    pub spectral_exponent: f64,
    #[serde(default = "default_shift")]
    pub spectral_shift: f64,
    #[serde(default = "default_modes")]
    pub num_modes: usize,
}

fn default_exponent() -> f64 {
    4.0
}
fn default_shift() -> f64 {
    25.0
}
fn default_modes() -> usize {
    32
}

/// Jitter ladder for the unit-scale kernel: 1e-10, 1e-9, ..., 1e-4.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

impl GrfSpec {
    pub fn squared_exponential(length_scale: f64, output_scale: f64) -> Self {
        Self {
            kernel_family: KernelFamily::SquaredExponential,
            length_scale,
            output_scale,
            spectral_exponent: default_exponent(),
            spectral_shift: default_shift(),
            num_modes: default_modes(),
        }
    }

    /// Periodic prior `k² (-Δ + shift I)^(-exponent)`. The nominal length
    /// scale is set to `1/sqrt(shift)`; it does not enter the sampler.
    pub fn periodic_spectral(output_scale: f64, shift: f64, exponent: f64, num_modes: usize) -> Self {
        Self {
            kernel_family: KernelFamily::PeriodicSpectral,
            length_scale: 1.0 / shift.sqrt(),
            output_scale,
            spectral_exponent: exponent,
            spectral_shift: shift,
            num_modes,
        }
    }

    /// The Burgers initial-condition prior `25² (-Δ + 25 I)^(-4)`.
    pub fn burgers_default() -> Self {
        Self::periodic_spectral(25.0, 25.0, 4.0, default_modes())
    }

    pub fn with_output_scale(&self, output_scale: f64) -> Self {
        Self {
            output_scale,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(Error::Config(format!(
                "length_scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.output_scale >= 0.0) || !self.output_scale.is_finite() {
            return Err(Error::Config(format!(
                "output_scale must be non-negative, got {}",
                self.output_scale
            )));
        }
        if self.kernel_family == KernelFamily::PeriodicSpectral
            && (!(self.spectral_exponent > 0.0) || !(self.spectral_shift > 0.0))
        {
            return Err(Error::Config(
                "spectral exponent and shift must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Variance of periodic mode `j` (per cosine / sine coefficient in the
    /// orthonormal basis `{1, √2 cos 2πjx, √2 sin 2πjx}`).
    pub fn mode_variance(&self, j: usize) -> f64 {
        let lap = (2.0 * PI * j as f64).powi(2);
        self.output_scale.powi(2) * (lap + self.spectral_shift).powf(-self.spectral_exponent)
    }
}

/// An input function represented by its values at fixed sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFunction {
    pub sensor_locations: Vec<f64>,
    pub sensor_values: Vec<f64>,
    pub seed: u64,
}

impl InputFunction {
    pub fn new(sensor_locations: Vec<f64>, sensor_values: Vec<f64>, seed: u64) -> Result<Self> {
        if sensor_locations.len() != sensor_values.len() {
            return Err(Error::Shape {
                context: "input function",
                expected: sensor_locations.len(),
                got: sensor_values.len(),
            });
        }
        if sensor_locations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "sensor locations must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            sensor_locations,
            sensor_values,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.sensor_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensor_values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.sensor_values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.sensor_values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.sensor_values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Piecewise-linear interpolation of the sensor values.
    pub fn interpolate(&self, x: f64) -> Result<f64> {
        let xs = &self.sensor_locations;
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        if !(x >= lo && x <= hi) {
            return Err(Error::Interpolation { x, lo, hi });
        }
        // first index with xs[i] > x
        let i = xs.partition_point(|&s| s <= x);
        if i == 0 {
            return Ok(self.sensor_values[0]);
        }
        if i >= xs.len() {
            return Ok(self.sensor_values[xs.len() - 1]);
        }
        let (x0, x1) = (xs[i - 1], xs[i]);
        let (v0, v1) = (self.sensor_values[i - 1], self.sensor_values[i]);
        let w = (x - x0) / (x1 - x0);
        Ok(v0 + w * (v1 - v0))
    }

    /// Writes `location,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("location,value\n");
        for (x, v) in self.sensor_locations.iter().zip(&self.sensor_values) {
            out.push_str(&format!("{x:e},{v:e}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the CSV next to a JSON sidecar recording the prior and seed.
    pub fn write_with_sidecar(&self, csv_path: &Path, spec: &GrfSpec) -> Result<()> {
        self.write_csv(csv_path)?;
        let sidecar = csv_path.with_extension("json");
        let doc = serde_json::json!({ "grf": spec, "seed": self.seed, "m": self.len() });
        let mut f = std::fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        f.write_all(serde_json::to_string_pretty(&doc)?.as_bytes())
            .map_err(|e| Error::io(&sidecar, e))
    }
}

/// `m` evenly spaced sensors on `[0, 1]`, endpoints included.
pub fn uniform_sensors(m: usize) -> Vec<f64> {
    assert!(m >= 2, "need at least two sensors");
    let h = 1.0 / (m - 1) as f64;
    (0..m).map(|i| if i + 1 == m { 1.0 } else { i as f64 * h }).collect()
}

/// Unit-scale squared-exponential kernel matrix on `sensors`.
pub fn se_kernel_matrix(sensors: &[f64], length_scale: f64) -> DMatrix<f64> {
    let m = sensors.len();
    let two_l2 = 2.0 * length_scale * length_scale;
    DMatrix::from_fn(m, m, |i, j| {
        let d = sensors[i] - sensors[j];
        (-(d * d) / two_l2).exp()
    })
}

enum Factor {
    Cholesky(DMatrix<f64>),
    Periodic { amplitudes: Vec<f64> },
}

/// A sampler with the kernel factor precomputed for a fixed sensor grid.
pub struct GrfSampler {
    spec: GrfSpec,
    sensors: Vec<f64>,
    factor: Factor,
}

impl GrfSampler {
    pub fn new(spec: &GrfSpec, sensors: &[f64]) -> Result<Self> {
        spec.validate()?;
        if sensors.len() < 2 {
            return Err(Error::Config("need at least two sensors".into()));
        }
        let factor = match spec.kernel_family {
            KernelFamily::SquaredExponential => {
                let base = se_kernel_matrix(sensors, spec.length_scale);
                let mut jitter = JITTER_START;
                loop {
                    let mut k = base.clone();
                    for i in 0..k.nrows() {
                        k[(i, i)] += jitter;
                    }
                    if let Some(ch) = Cholesky::new(k) {
                        break Factor::Cholesky(ch.l());
                    }
                    jitter *= 10.0;
                    if jitter > JITTER_MAX * 1.000_001 {
                        return Err(Error::CovarianceNotPsd { jitter: JITTER_MAX });
                    }
                }
            }
            KernelFamily::PeriodicSpectral => {
                if 2 * spec.num_modes > sensors.len() {
                    return Err(Error::Config(format!(
                        "num_modes {} exceeds the Nyquist limit {} for {} sensors",
                        spec.num_modes,
                        sensors.len() / 2,
                        sensors.len()
                    )));
                }
                let unit = spec.with_output_scale(1.0);
                Factor::Periodic {
                    amplitudes: (0..=spec.num_modes)
                        .map(|j| unit.mode_variance(j).sqrt())
                        .collect(),
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            sensors: sensors.to_vec(),
            factor,
        })
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.spec
    }

    pub fn sensors(&self) -> &[f64] {
        &self.sensors
    }

    /// Draw one input function. A pure function of `(spec, sensors, seed)`.
    pub fn sample(&self, seed: u64) -> InputFunction {
        let mut rng = rng_from_seed(seed);
        let k = self.spec.output_scale;
        let values = match &self.factor {
            Factor::Cholesky(l) => {
                let m = self.sensors.len();
                let xi = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let base = l * xi;
                base.iter().map(|v| k * v).collect()
            }
            Factor::Periodic { amplitudes } => {
                let dc = amplitudes[0] * rng.sample::<f64, _>(StandardNormal);
                let coeffs: Vec<(f64, f64)> = (1..amplitudes.len())
                    .map(|_| {
                        let c: f64 = rng.sample(StandardNormal);
                        let s: f64 = rng.sample(StandardNormal);
                        (c, s)
                    })
                    .collect();
                self.sensors
                    .iter()
                    .map(|&x| {
                        let mut v = dc;
                        for (j, (c, s)) in coeffs.iter().enumerate() {
                            let w = 2.0 * PI * (j + 1) as f64 * x;
                            v += amplitudes[j + 1]
                                * std::f64::consts::SQRT_2
                                * (c * w.cos() + s * w.sin());
                        }
                        k * v
                    })
                    .collect()
            }
        };
        InputFunction {
            sensor_locations: self.sensors.clone(),
            sensor_values: values,
            seed,
        }
    }
}

/// One squared-exponential GRF draw at `sensors`.
pub fn sample_grf(spec: &GrfSpec, sensors: &[f64], seed: u64) -> Result<InputFunction> {
    if spec.kernel_family != KernelFamily::SquaredExponential {
        return Err(Error::Config(
            "sample_grf expects a squared-exponential spec".into(),
        ));
    }
    Ok(GrfSampler::new(spec, sensors)?.sample(seed))
}

/// One periodic-spectral GRF draw at `sensors`.
pub fn sample_periodic_grf(spec: &GrfSpec, sensors: &[f64], seed: u64) -> Result<InputFunction> {
    if spec.kernel_family != KernelFamily::PeriodicSpectral {
        return Err(Error::Config(
            "sample_periodic_grf expects a periodic-spectral spec".into(),
        ));
    }
    Ok(GrfSampler::new(spec, sensors)?.sample(seed))
}

pub fn output_scale_from_exponent(a: f64) -> f64 {
    10f64.powf(a)
}

/// `k = 10^a` with `a ~ U(-2, 2)`.
pub fn draw_output_scale(seed: u64) -> f64 {
    let a: f64 = rng_from_seed(seed).gen_range(-2.0..=2.0);
    output_scale_from_exponent(a)
}

/// Shift a field so that its minimum is exactly one: `u = v - min v + 1`.
pub fn make_positive_advection_coeff(v: &InputFunction) -> InputFunction {
    let lo = v.min_value();
    InputFunction {
        sensor_locations: v.sensor_locations.clone(),
        sensor_values: v.sensor_values.iter().map(|x| x - lo + 1.0).collect(),
        seed: v.seed,
    }
}
