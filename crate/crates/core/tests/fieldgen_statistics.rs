//! Monte-Carlo checks of the input-function priors.

use std::f64::consts::PI;

use operant::fieldgen::{draw_output_scale, sample_grf, uniform_sensors, GrfSampler, GrfSpec};
use operant::rng::derive_seed;

#[test]
fn squared_exponential_covariance_matches_kernel() {
    let sensors: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let spec = GrfSpec::squared_exponential(0.2, 1.0);
    let sampler = GrfSampler::new(&spec, &sensors).unwrap();
    let n = 10_000;
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let u = sampler.sample(derive_seed(7, "cov", i));
        let (a, b) = (u.sensor_values[3], u.sensor_values[5]);
        sa += a;
        sb += b;
        sab += a * b;
    }
    let nf = n as f64;
    let cov = sab / nf - (sa / nf) * (sb / nf);
    let d = sensors[5] - sensors[3];
    let expected = (-(d * d) / (2.0 * 0.2 * 0.2)).exp();
    assert!((expected - (-0.5f64).exp()).abs() < 1e-12);
    assert!(((cov - expected) / expected).abs() < 0.05, "cov {cov} vs {expected}");
}

#[test]
fn squared_exponential_sampler_agrees_with_one_shot_call() {
    let sensors = uniform_sensors(50);
    let spec = GrfSpec::squared_exponential(0.2, 3.0);
    let sampler = GrfSampler::new(&spec, &sensors).unwrap();
    for seed in [0, 1, 99] {
        assert_eq!(sampler.sample(seed), sample_grf(&spec, &sensors, seed).unwrap());
    }
}

#[test]
fn periodic_variance_spectrum_matches_prior() {
    let sensors = uniform_sensors(101);
    let spec = GrfSpec::burgers_default();
    let sampler = GrfSampler::new(&spec, &sensors).unwrap();
    let modes = spec.num_modes;
    // Discrete Fourier projection on the 100 distinct points of the periodic grid.
    let n = 100;
    let draws = 10_000;
    let mut cos_sq = vec![0.0; modes + 1];
    let mut sin_sq = vec![0.0; modes + 1];
    for i in 0..draws {
        let u = sampler.sample(derive_seed(11, "spectrum", i));
        for j in 0..=modes {
            let (mut c, mut s) = (0.0, 0.0);
            for (p, v) in u.sensor_values[..n].iter().enumerate() {
                let w = 2.0 * PI * j as f64 * p as f64 / n as f64;
                c += v * w.cos();
                s += v * w.sin();
            }
            let norm = if j == 0 { 1.0 / n as f64 } else { 2f64.sqrt() / n as f64 };
            cos_sq[j] += (c * norm).powi(2);
            sin_sq[j] += (s * norm).powi(2);
        }
    }
    for j in 0..=modes {
        let expected = 625.0 * ((2.0 * PI * j as f64).powi(2) + 25.0).powi(-4);
        let vc = cos_sq[j] / draws as f64;
        assert!(((vc - expected) / expected).abs() < 0.1, "cos mode {j}: {vc} vs {expected}");
        if j > 0 {
            let vs = sin_sq[j] / draws as f64;
            assert!(((vs - expected) / expected).abs() < 0.1, "sin mode {j}: {vs} vs {expected}");
        }
    }
}

#[test]
fn log_output_scale_is_centred() {
    let n = 100_000;
    let mut sum = 0.0;
    for i in 0..n {
        let k = draw_output_scale(derive_seed(3, "scale", i));
        assert!((1e-2..=1e2).contains(&k));
        sum += k.log10();
    }
    let mean = sum / n as f64;
    assert!(mean.abs() < 0.02, "mean log10 k = {mean}");
}

#[test]
fn log_output_scale_is_uniform() {
    // Decile counts of a ~ U(-2, 2) over 10^5 draws.
    let n = 100_000;
    let mut bins = [0usize; 10];
    for i in 0..n {
        let a = draw_output_scale(derive_seed(5, "scale", i)).log10();
        bins[(((a + 2.0) / 0.4) as usize).min(9)] += 1;
    }
    for c in bins {
        // 5 sigma of a binomial(10^5, 0.1) count.
        assert!((c as f64 - 10_000.0).abs() < 5.0 * 9000f64.sqrt(), "{bins:?}");
    }
}
