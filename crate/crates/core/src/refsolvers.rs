//! Reference solutions for the three benchmarks.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::constraints::{advection_ic, advection_inflow};
use crate::error::{Error, Result};
use crate::fieldgen::InputFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "kebab-case")]
pub enum SolverInfo {
    DormandPrince { atol: f64 },
    LaxWendroff { cfl: f64, dt: f64, steps: usize },
    Etdrk4 { modes: usize, dt: f64, viscosity: f64 },
}

/// Values on a tensor grid: `values[[i, j]]` is the field at `(x[j], t[i])`.
/// The antiderivative has no time axis and a single row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub values: Array2<f64>,
    pub info: SolverInfo,
}

impl ReferenceSolution {
    fn checked(self) -> Result<Self> {
        let rows = self.t.len().max(1);
        if self.values.dim() != (rows, self.x.len()) {
            return Err(Error::Shape {
                context: "reference grid",
                expected: rows * self.x.len(),
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("reference solution is not finite".into()));
        }
        Ok(self)
    }

    /// Bilinear interpolation on the grid; `t` is ignored without a time
    /// axis.
    pub fn at(&self, x: f64, t: f64) -> Result<f64> {
        let (jx, wx) = bracket(&self.x, x)?;
        let row = |i: usize| {
            let r = self.values.row(i);
            r[jx] + wx * (r[(jx + 1).min(self.x.len() - 1)] - r[jx])
        };
        if self.t.is_empty() {
            return Ok(row(0));
        }
        let (it, wt) = bracket(&self.t, t)?;
        let a = row(it);
        let b = row((it + 1).min(self.t.len() - 1));
        Ok(a + wt * (b - a))
    }
}

fn bracket(grid: &[f64], x: f64) -> Result<(usize, f64)> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if !(x >= lo && x <= hi) {
        return Err(Error::Interpolation { x, lo, hi });
    }
    if grid.len() == 1 {
        return Ok((0, 0.0));
    }
    let i = grid.partition_point(|&g| g <= x).clamp(1, grid.len() - 1) - 1;
    Ok((i, (x - grid[i]) / (grid[i + 1] - grid[i])))
}

pub const ANTIDERIVATIVE_ATOL: f64 = 1e-9;

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of the scalar ODE `y' = f(t, y)`
/// from `t0` to `t1`.
pub fn dormand_prince<F>(f: F, t0: f64, y0: f64, t1: f64, atol: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0);
    }
    let (mut t, mut y) = (t0, y0);
    let mut h = span;
    let min_step = 1e-14 * span.abs().max(1.0);
    while (t1 - t) * span.signum() > 0.0 {
        if (t + h - t1) * span.signum() > 0.0 {
            h = t1 - t;
        }
        let mut k = [0.0; 7];
        for s in 0..7 {
            let ys = y + h * (0..s).map(|j| A[s][j] * k[j]).sum::<f64>();
            k[s] = f(t + C[s] * h, ys)?;
        }
        let y5 = y + h * (0..7).map(|s| B5[s] * k[s]).sum::<f64>();
        let y4 = y + h * (0..7).map(|s| B4[s] * k[s]).sum::<f64>();
        let err = (y5 - y4).abs();
        if !y5.is_finite() {
            return Err(Error::Integration(format!("non-finite state at t = {t}")));
        }
        if err <= atol {
            t = if (t + h - t1) * span.signum() >= 0.0 { t1 } else { t + h };
            y = y5;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * (atol / err).powf(0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < min_step && (t1 - t).abs() > min_step {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
    }
    Ok(y)
}

/// `s(y) = ∫_0^y u`, with `u` linear between sensors. Integration restarts
/// at every sensor so the integrand is smooth inside each step.
pub fn integrate_antiderivative(u: &InputFunction, query: &[f64]) -> Result<ReferenceSolution> {
    if let Some(&y) = query.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Interpolation { x: y, lo: 0.0, hi: 1.0 });
    }
    let mut order: Vec<usize> = (0..query.len()).collect();
    order.sort_by(|&a, &b| query[a].total_cmp(&query[b]));
    let mut out = vec![0.0; query.len()];
    let knots = &u.sensor_locations;
    let rhs = |x: f64, _| u.interpolate(x);
    let (mut pos, mut acc) = (0.0, 0.0);
    let mut next_knot = 0;
    for i in order {
        let target = query[i];
        while next_knot < knots.len() && knots[next_knot] < target {
            if knots[next_knot] > pos {
                acc = dormand_prince(rhs, pos, acc, knots[next_knot], ANTIDERIVATIVE_ATOL)?;
                pos = knots[next_knot];
            }
            next_knot += 1;
        }
        if target > pos {
            acc = dormand_prince(rhs, pos, acc, target, ANTIDERIVATIVE_ATOL)?;
            pos = target;
        }
        out[i] = if target == 0.0 { 0.0 } else { acc };
    }
    ReferenceSolution {
        x: query.to_vec(),
        t: Vec::new(),
        values: Array2::from_shape_vec((1, query.len()), out).expect("row"),
        info: SolverInfo::DormandPrince {
            atol: ANTIDERIVATIVE_ATOL,
        },
    }
    .checked()
}

/// Smallest number of time points on `[0, 1]` that keeps the Courant
/// number at or below one.
pub fn advection_min_nt(u: &InputFunction, nx: usize) -> usize {
    let umax = u.max_abs();
    (umax * (nx - 1) as f64).ceil() as usize + 1
}

/// Advection benchmark: `s(x, 0) = sin(πx)`, inflow `s(0, t) = sin(πt/2)`.
pub fn solve_advection(u: &InputFunction, nx: usize, nt: usize) -> Result<ReferenceSolution> {
    lax_wendroff(u, nx, nt, advection_ic, advection_inflow)
}

/// Lax–Wendroff for `s_t + u(x) s_x = 0` on `[0, 1]²` with `nx × nt` grid
/// points. The outflow ghost cell is extrapolated linearly.
pub fn lax_wendroff(
    u: &InputFunction,
    nx: usize,
    nt: usize,
    initial: impl Fn(f64) -> f64,
    inflow: impl Fn(f64) -> f64,
) -> Result<ReferenceSolution> {
    if nx < 3 || nt < 2 {
        return Err(Error::Config(format!("advection grid {nx}x{nt} too small")));
    }
    if u.min_value() < 0.0 {
        return Err(Error::Config("advection coefficient must be non-negative".into()));
    }
    let dx = 1.0 / (nx - 1) as f64;
    let dt = 1.0 / (nt - 1) as f64;
    let cfl = u.max_abs() * dt / dx;
    if cfl > 1.0 {
        return Err(Error::Config(format!(
            "Courant number {cfl:.3} exceeds 1; need nt >= {}",
            advection_min_nt(u, nx)
        )));
    }
    let x: Vec<f64> = (0..nx).map(|i| i as f64 * dx).collect();
    let t: Vec<f64> = (0..nt).map(|n| n as f64 * dt).collect();
    let a: Vec<f64> = x.iter().map(|&xi| u.interpolate(xi)).collect::<Result<_>>()?;
    // face speeds at i + 1/2; the last one is reused for the ghost face
    let mut af: Vec<f64> = (0..nx - 1)
        .map(|i| u.interpolate(0.5 * (x[i] + x[i + 1])))
        .collect::<Result<_>>()?;
    af.push(af[nx - 2]);
    let (r1, r2) = (dt / (2.0 * dx), dt * dt / (2.0 * dx * dx));
    let mut values = Array2::zeros((nt, nx));
    let mut s: Vec<f64> = x.iter().map(|&xi| initial(xi)).collect();
    values.row_mut(0).assign(&ndarray::ArrayView1::from(&s));
    let mut next = vec![0.0; nx];
    for (n, &tn) in t.iter().enumerate().skip(1) {
        for i in 1..nx {
            let right = if i + 1 < nx { s[i + 1] } else { 2.0 * s[i] - s[i - 1] };
            let left = s[i - 1];
            next[i] = s[i] - r1 * a[i] * (right - left)
                + r2 * a[i] * (af[i] * (right - s[i]) - af[i - 1] * (s[i] - left));
        }
        next[0] = inflow(tn);
        std::mem::swap(&mut s, &mut next);
        values.row_mut(n).assign(&ndarray::ArrayView1::from(&s));
    }
    ReferenceSolution {
        x,
        t,
        values,
        info: SolverInfo::LaxWendroff {
            cfl,
            dt,
            steps: nt - 1,
        },
    }
    .checked()
}

/// Solves on a time grid fine enough for stability and returns the
/// `nx × nt` subsampled field.
pub fn solve_advection_auto(u: &InputFunction, nx: usize, nt: usize) -> Result<ReferenceSolution> {
    if nt < 2 {
        return Err(Error::Config("need at least two time points".into()));
    }
    let need = advection_min_nt(u, nx);
    let refine = (need.saturating_sub(1)).div_ceil(nt - 1).max(1);
    let fine = solve_advection(u, nx, refine * (nt - 1) + 1)?;
    let rows: Vec<usize> = (0..nt).map(|n| n * refine).collect();
    Ok(ReferenceSolution {
        x: fine.x.clone(),
        t: rows.iter().map(|&r| fine.t[r]).collect(),
        values: fine.values.select(ndarray::Axis(0), &rows),
        info: fine.info,
    })
}

/// Burgers solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersSettings {
    pub modes: usize,
    pub dt: f64,
    /// Steps between stored snapshots.
    pub snapshot_every: usize,
    pub snapshots: usize,
}

impl Default for BurgersSettings {
    fn default() -> Self {
        Self {
            modes: 128,
            dt: 1e-3,
            snapshot_every: 10,
            snapshots: 101,
        }
    }
}

const CONTOUR_POINTS: usize = 32;
const BLOWUP_FACTOR: f64 = 1e3;

struct Spectral {
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    /// `-ik/2` with the 2/3 mask applied.
    g: Vec<Complex64>,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let cutoff = n / 3;
        let g = (0..n)
            .map(|j| {
                let w = if j <= n / 2 { j as i64 } else { j as i64 - n as i64 };
                if w.unsigned_abs() as usize > cutoff || (n.is_multiple_of(2) && j == n / 2) {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, -0.5 * 2.0 * PI * w as f64)
                }
            })
            .collect();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            g,
        }
    }

    fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        let mut buf = v.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / self.n as f64).collect()
    }

    fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    /// Dealiased `-(u²/2)_x` in spectral space.
    fn nonlinear(&self, v: &[Complex64]) -> Vec<Complex64> {
        let u = self.to_physical(v);
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        self.to_spectral(&sq).iter().zip(&self.g).map(|(a, g)| a * g).collect()
    }
}

/// Fourier pseudo-spectral ETDRK4 for `s_t + s s_x = ν s_xx` with periodic
/// boundary conditions on `[0, 1)`. The returned x grid appends `x = 1`,
/// which repeats the `x = 0` column.
pub fn solve_burgers(u0: &InputFunction, nu: f64, settings: &BurgersSettings) -> Result<ReferenceSolution> {
    let BurgersSettings {
        modes: n,
        dt,
        snapshot_every,
        snapshots,
    } = *settings;
    if !(nu > 0.0) {
        return Err(Error::Config(format!("viscosity must be positive, got {nu}")));
    }
    if n < 4 || !(dt > 0.0) || snapshot_every == 0 || snapshots == 0 {
        return Err(Error::Config("invalid Burgers solver settings".into()));
    }
    let sp = Spectral::new(n);
    let x: Vec<f64> = (0..n).map(|j| j as f64 / n as f64).collect();
    let init: Vec<f64> = x.iter().map(|&xj| u0.interpolate(xj)).collect::<Result<_>>()?;
    let limit = BLOWUP_FACTOR * init.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);

    // coefficients per wavenumber via contour averages
    let mut e = vec![0.0; n];
    let mut e2 = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut f3 = vec![0.0; n];
    for j in 0..n {
        let w = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
        let l = -nu * (2.0 * PI * w).powi(2);
        e[j] = (dt * l).exp();
        e2[j] = (dt * l / 2.0).exp();
        let (mut sq, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
        for p in 1..=CONTOUR_POINTS {
            let r = Complex64::from_polar(1.0, PI * (p as f64 - 0.5) / CONTOUR_POINTS as f64);
            let z = r + dt * l;
            let ez = z.exp();
            let z3 = z * z * z;
            sq += (((z / 2.0).exp() - 1.0) / z).re;
            s1 += ((-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3).re;
            s2 += ((2.0 + z + ez * (z - 2.0)) / z3).re;
            s3 += ((-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3).re;
        }
        let m = CONTOUR_POINTS as f64;
        q[j] = dt * sq / m;
        f1[j] = dt * s1 / m;
        f2[j] = dt * s2 / m;
        f3[j] = dt * s3 / m;
    }

    let mut v = sp.to_spectral(&init);
    let mut values = Array2::zeros((snapshots, n + 1));
    let store = |values: &mut Array2<f64>, row: usize, u: &[f64]| {
        for (j, &val) in u.iter().enumerate() {
            values[[row, j]] = val;
        }
        values[[row, n]] = u[0];
    };
    store(&mut values, 0, &init);
    let mut step = 0usize;
    for row in 1..snapshots {
        for _ in 0..snapshot_every {
            let nv = sp.nonlinear(&v);
            let a: Vec<Complex64> = (0..n).map(|j| e2[j] * v[j] + q[j] * nv[j]).collect();
            let na = sp.nonlinear(&a);
            let b: Vec<Complex64> = (0..n).map(|j| e2[j] * v[j] + q[j] * na[j]).collect();
            let nb = sp.nonlinear(&b);
            let c: Vec<Complex64> = (0..n).map(|j| e2[j] * a[j] + q[j] * (2.0 * nb[j] - nv[j])).collect();
            let nc = sp.nonlinear(&c);
            for j in 0..n {
                v[j] = e[j] * v[j] + nv[j] * f1[j] + 2.0 * (na[j] + nb[j]) * f2[j] + nc[j] * f3[j];
            }
            step += 1;
        }
        let u = sp.to_physical(&v);
        let peak = u.iter().fold(0.0f64, |a, x| if x.is_finite() { a.max(x.abs()) } else { f64::INFINITY });
        if peak > limit {
            return Err(Error::Instability {
                t: step as f64 * dt,
                max_abs: peak,
            });
        }
        store(&mut values, row, &u);
    }
    let mut xs = x;
    xs.push(1.0);
    ReferenceSolution {
        x: xs,
        t: (0..snapshots).map(|r| (r * snapshot_every) as f64 * dt).collect(),
        values,
        info: SolverInfo::Etdrk4 {
            modes: n,
            dt,
            viscosity: nu,
        },
    }
    .checked()
}

/// Energy in the highest mode kept by the 2/3 rule relative to total
/// energy, for snapshot `row` of a Burgers solution.
pub fn highest_mode_energy_fraction(sol: &ReferenceSolution, row: usize) -> f64 {
    let n = sol.x.len() - 1;
    let sp = Spectral::new(n);
    let snap: Vec<f64> = sol.values.row(row).iter().take(n).copied().collect();
    let v = sp.to_spectral(&snap);
    let energy = |j: usize| v[j].norm_sqr();
    let total: f64 = (0..n).map(energy).sum();
    let k = n / 3;
    (energy(k) + energy(n - k)) / total
}
