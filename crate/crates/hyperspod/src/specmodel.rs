//! Spectral fluctuation statistics and simulated spectrum generation.
//!
//! The model: a measured spectrum of one category is
//! `s = (b*gamma + 1) o ((a + v) o gamma + 1) o s_bar`, where `o` is the
//! elementwise product, `gamma` the per-band coefficient of variation of a
//! reference area, `a ~ Normal(0, sigma_a)` a per-pixel baseline factor,
//! `v_i ~ Normal(0, sigma_v_i)` per-band noise, and `b` a wide-area factor
//! shared by all pixels of one object (Uniform[-0.3, 0.3] when unset).
//!
//! Gaussian draws use `rand_distr::Normal` (ziggurat); with a fixed seed the
//! sample stream is reproducible across builds on the same rand_distr
//! version, which is pinned in the manifest.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsicube::HyperCube;

/// Orientation of the coefficient of variation.
///
/// `StdOverMean` is the conventional CV (sigma/mu) and the default; the
/// literal alternative (mu/sigma) is kept behind this flag for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvOrientation {
    #[default]
    StdOverMean,
    MeanOverStd,
}

/// Per-band statistics of a reference region plus the fluctuation-noise
/// parameters of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    /// Per-band mean radiance.
    pub mu: Vec<f64>,
    /// Per-band standard deviation (population denominator).
    pub sigma: Vec<f64>,
    /// Per-band coefficient of variation.
    pub gamma: Vec<f64>,
    /// Std of the per-pixel baseline factor `a`.
    pub sigma_a: f64,
    /// Per-band std of the standardized-factor noise `v`.
    pub sigma_v: Vec<f64>,
}

impl SpectrumStats {
    pub fn bands(&self) -> usize {
        self.mu.len()
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// A pure material spectrum used as a mixing basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndmemberSpectrum {
    pub name: String,
    /// Per-band reflectance in [0, 1], when known.
    pub reflectance: Option<Vec<f64>>,
    /// Per-band radiance baseline, strictly positive.
    pub radiance_baseline: Vec<f64>,
}

/// Estimate reference-area statistics with the default CV orientation.
pub fn estimate_stats(region: &HyperCube) -> Result<SpectrumStats> {
    estimate_stats_with(region, CvOrientation::StdOverMean)
}

/// Estimate reference-area statistics.
///
/// Per band: `mu`, `sigma` are the sample mean/std over pixels (population
/// denominator). Per pixel j the standardized local factor is
/// `alpha_bar_i^j = ((s_i^j - mu_i) / mu_i) / gamma_i`, its per-pixel mean
/// over bands is the baseline `a^j`; `sigma_a` is the std of `a^j` over
/// pixels and `sigma_v_i` the std over pixels of `alpha_bar_i^j - a^j`.
pub fn estimate_stats_with(region: &HyperCube, orientation: CvOrientation) -> Result<SpectrumStats> {
    let n_pixels = region.height() * region.width();
    if n_pixels < 2 {
        return Err(Error::InvalidArgument("reference region needs at least 2 pixels".into()));
    }
    let bands = region.bands();
    let plane = n_pixels;
    let data = region.data();

    let mut mu = vec![0.0f64; bands];
    let mut sigma = vec![0.0f64; bands];
    for b in 0..bands {
        let slice = &data[b * plane..(b + 1) * plane];
        let m: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / n_pixels as f64;
        let var: f64 =
            slice.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n_pixels as f64;
        mu[b] = m;
        sigma[b] = var.sqrt();
        if sigma[b] == 0.0 || m <= 0.0 {
            return Err(Error::DegenerateBand { band: b });
        }
    }
    let gamma: Vec<f64> = match orientation {
        CvOrientation::StdOverMean => mu.iter().zip(&sigma).map(|(m, s)| s / m).collect(),
        CvOrientation::MeanOverStd => mu.iter().zip(&sigma).map(|(m, s)| m / s).collect(),
    };

    // standardized local factors per pixel
    let mut baselines = vec![0.0f64; n_pixels];
    let mut alpha = vec![0.0f64; n_pixels * bands];
    for j in 0..n_pixels {
        let mut acc = 0.0;
        for b in 0..bands {
            let s = data[b * plane + j] as f64;
            let a_bar = ((s - mu[b]) / mu[b]) / gamma[b];
            alpha[j * bands + b] = a_bar;
            acc += a_bar;
        }
        baselines[j] = acc / bands as f64;
    }
    let mean_a: f64 = baselines.iter().sum::<f64>() / n_pixels as f64;
    let sigma_a = (baselines.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / n_pixels as f64)
        .sqrt();

    let mut sigma_v = vec![0.0f64; bands];
    for b in 0..bands {
        let resid: Vec<f64> =
            (0..n_pixels).map(|j| alpha[j * bands + b] - baselines[j]).collect();
        let m: f64 = resid.iter().sum::<f64>() / n_pixels as f64;
        sigma_v[b] =
            (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n_pixels as f64).sqrt();
    }

    Ok(SpectrumStats { mu, sigma, gamma, sigma_a, sigma_v })
}

/// Draws used by [`simulate_spectrum`], exposed so tests can force them.
#[derive(Debug, Clone, Copy)]
pub struct FluctuationDraw {
    pub a: f64,
    pub b: f64,
}

/// Simulate one spectrum from the combined fluctuation model.
///
/// Draws `a ~ Normal(0, sigma_a)` and `v_i ~ Normal(0, sigma_v_i)` from the
/// supplied rng; `b` is drawn Uniform[-0.3, 0.3] when `None`.
pub fn simulate_spectrum(
    stats: &SpectrumStats,
    baseline: &[f64],
    b: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if baseline.len() != stats.bands() {
        return Err(Error::LengthMismatch { expected: stats.bands(), actual: baseline.len() });
    }
    let a = if stats.sigma_a > 0.0 {
        Normal::new(0.0, stats.sigma_a).unwrap().sample(rng)
    } else {
        0.0
    };
    let b = match b {
        Some(b) if b.is_finite() => b,
        Some(_) => return Err(Error::InvalidArgument("b must be finite".into())),
        None => Uniform::new_inclusive(WIDE_AREA_B_RANGE.0, WIDE_AREA_B_RANGE.1).sample(rng),
    };
    Ok(simulate_spectrum_forced(stats, baseline, FluctuationDraw { a, b }, rng))
}

/// Range of the wide-area factor `b` when drawn by the generator.
pub const WIDE_AREA_B_RANGE: (f64, f64) = (-0.3, 0.3);

/// Apply the model with `a` and `b` fixed; only the per-band noise `v` is
/// drawn. Panics on length mismatch (callers validate).
pub fn simulate_spectrum_forced(
    stats: &SpectrumStats,
    baseline: &[f64],
    draw: FluctuationDraw,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert_eq!(baseline.len(), stats.bands());
    baseline
        .iter()
        .enumerate()
        .map(|(i, &s_bar)| {
            let v = if stats.sigma_v[i] > 0.0 {
                Normal::new(0.0, stats.sigma_v[i]).unwrap().sample(rng)
            } else {
                0.0
            };
            let g = stats.gamma[i];
            (draw.b * g + 1.0) * ((draw.a + v) * g + 1.0) * s_bar
        })
        .collect()
}

/// Convert a reflectance curve to a radiance baseline scaled so its maximum
/// equals `m_t`: `raw = (s_w / r_w) o r_t`, output `= m_t / max(raw) * raw`.
pub fn reflectance_to_radiance(
    name: &str,
    r_t: &[f64],
    r_w: &[f64],
    s_w: &[f64],
    m_t: f64,
) -> Result<EndmemberSpectrum> {
    if r_w.len() != r_t.len() || s_w.len() != r_t.len() {
        return Err(Error::LengthMismatch { expected: r_t.len(), actual: r_w.len().min(s_w.len()) });
    }
    if m_t <= 0.0 {
        return Err(Error::InvalidArgument("m_t must be positive".into()));
    }
    if let Some(band) = r_w.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroReflectanceDivisor { band });
    }
    let raw: Vec<f64> = r_t.iter().zip(r_w).zip(s_w).map(|((rt, rw), sw)| sw / rw * rt).collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("reflectance curve has no positive response".into()));
    }
    let scale = m_t / max;
    Ok(EndmemberSpectrum {
        name: name.to_string(),
        reflectance: Some(r_t.to_vec()),
        radiance_baseline: raw.iter().map(|v| v * scale).collect(),
    })
}

/// Range of the radiance-baseline peak `M_t` used by dataset generators.
pub const M_T_RANGE: (f64, f64) = (2000.0, 3000.0);

/// Write an endmember spectrum as CSV (wavelength_nm, value).
pub fn write_endmember_csv(
    spectrum: &EndmemberSpectrum,
    wavelengths: Option<&[f64]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    })?;
    w.write_record(["wavelength_nm", "value"]).ok();
    for (i, v) in spectrum.radiance_baseline.iter().enumerate() {
        let wl = wavelengths.map(|w| w[i]).unwrap_or(i as f64);
        w.write_record([format!("{wl}"), format!("{v}")]).ok();
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read per-band values from a (wavelength_nm, value) CSV.
pub fn read_spectrum_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        let v: f64 = rec
            .get(1)
            .ok_or_else(|| Error::InvalidArgument("csv row missing value column".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("csv value: {e}")))?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::Unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn constant_region_is_degenerate() {
        let cube = HyperCube::new(2, 2, 3, vec![5.0; 12], None, Unit::Radiance).unwrap();
        assert!(matches!(estimate_stats(&cube), Err(Error::DegenerateBand { band: 0 })));
    }

    #[test]
    fn two_pixel_mean_std() {
        let cube = HyperCube::new(1, 2, 1, vec![90.0, 110.0], None, Unit::Radiance).unwrap();
        let stats = estimate_stats(&cube).unwrap();
        assert!((stats.mu[0] - 100.0).abs() < 1e-9);
        assert!((stats.sigma[0] - 10.0).abs() < 1e-9);
        assert!((stats.gamma[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn proportional_region_has_zero_sigma_a_spread() {
        // every pixel equals mu*(1 + c_j*gamma): all alpha_bar_i^j == c_j,
        // so per-pixel baselines equal c_j exactly and sigma_v == 0.
        let mu = [100.0, 200.0, 400.0];
        let c = [-1.2, -0.4, 0.4, 1.2];
        // first construct a region yielding known mu/gamma: pixel values
        // mu_i*(1 + c_j*g) with g chosen so the sample stats reproduce it.
        // Population std over c is 0.894427...; use g = 0.1 * that scale.
        let spread = {
            let m: f64 = c.iter().sum::<f64>() / 4.0;
            (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt()
        };
        let g = 0.05;
        let mut data = vec![0f32; 3 * 4];
        for (b, &m) in mu.iter().enumerate() {
            for (j, &cj) in c.iter().enumerate() {
                data[b * 4 + j] = (m * (1.0 + cj * g)) as f32;
            }
        }
        let cube = HyperCube::new(1, 4, 3, data, None, Unit::Radiance).unwrap();
        let stats = estimate_stats(&cube).unwrap();
        // gamma_i reflects the spread of c scaled by g
        for gi in &stats.gamma {
            assert!((gi - g * spread).abs() < 1e-6, "gamma {gi}");
        }
        // residual noise vanishes: all fluctuation is in the baseline
        for sv in &stats.sigma_v {
            assert!(*sv < 1e-9, "sigma_v {sv}");
        }
        assert!((stats.sigma_a - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_fluctuation_identity() {
        let stats = SpectrumStats {
            mu: vec![100.0, 200.0],
            sigma: vec![10.0, 40.0],
            gamma: vec![0.1, 0.2],
            sigma_a: 0.0,
            sigma_v: vec![0.0, 0.0],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let s = simulate_spectrum(&stats, &[100.0, 200.0], Some(0.0), &mut rng).unwrap();
        assert_eq!(s, vec![100.0, 200.0]);
    }

    #[test]
    fn forced_draw_matches_hand_arithmetic() {
        let stats = SpectrumStats {
            mu: vec![100.0, 200.0],
            sigma: vec![10.0, 40.0],
            gamma: vec![0.1, 0.2],
            sigma_a: 1.0,
            sigma_v: vec![0.0, 0.0],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let s = simulate_spectrum_forced(
            &stats,
            &[100.0, 200.0],
            FluctuationDraw { a: 0.05, b: 0.3 },
            &mut rng,
        );
        assert!((s[0] - 1.03 * 1.005 * 100.0).abs() < 1e-9, "{}", s[0]);
        assert!((s[1] - 1.06 * 1.01 * 200.0).abs() < 1e-9, "{}", s[1]);
        assert!((s[0] - 103.515).abs() < 1e-9);
        assert!((s[1] - 214.12).abs() < 1e-9);
    }

    #[test]
    fn unset_b_is_uniform_in_range() {
        let stats = SpectrumStats {
            mu: vec![100.0],
            sigma: vec![10.0],
            gamma: vec![1.0],
            sigma_a: 0.0,
            sigma_v: vec![0.0],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = simulate_spectrum(&stats, &[1.0], None, &mut rng).unwrap();
            // s = b*1 + 1 with a=v=0, so b = s - 1
            let b = s[0] - 1.0;
            assert!((-0.3..=0.3).contains(&b), "b out of range: {b}");
        }
    }

    #[test]
    fn monotone_in_b() {
        let stats = SpectrumStats {
            mu: vec![100.0, 200.0],
            sigma: vec![10.0, 40.0],
            gamma: vec![0.1, 0.2],
            sigma_a: 0.3,
            sigma_v: vec![0.2, 0.2],
        };
        for seed in 0..20 {
            let mut r1 = ChaCha12Rng::seed_from_u64(seed);
            let mut r2 = ChaCha12Rng::seed_from_u64(seed);
            let lo = simulate_spectrum(&stats, &[100.0, 200.0], Some(0.1), &mut r1).unwrap();
            let hi = simulate_spectrum(&stats, &[100.0, 200.0], Some(0.2), &mut r2).unwrap();
            for (l, h) in lo.iter().zip(&hi) {
                // holds when (a+v)*gamma + 1 > 0, true at these scales
                assert!(h > l);
            }
        }
    }

    #[test]
    fn reflectance_ratio_identity() {
        let r = vec![0.3, 0.5];
        let s_w = vec![120.0, 80.0];
        let em = reflectance_to_radiance("w", &r, &r, &s_w, 600.0).unwrap();
        // raw == s_w, scaled so max == 600
        assert!((em.radiance_baseline[0] - 600.0).abs() < 1e-9);
        assert!((em.radiance_baseline[1] - 400.0).abs() < 1e-9);
    }

    #[test]
    fn reflectance_hand_oracle() {
        let em = reflectance_to_radiance(
            "t",
            &[0.2, 0.4],
            &[0.1, 0.1],
            &[50.0, 50.0],
            1000.0,
        )
        .unwrap();
        assert_eq!(em.radiance_baseline, vec![500.0, 1000.0]);
    }

    #[test]
    fn reflectance_zero_divisor() {
        let err = reflectance_to_radiance("t", &[0.2], &[0.0], &[50.0], 1000.0);
        assert!(matches!(err, Err(Error::ZeroReflectanceDivisor { band: 0 })));
    }

    #[test]
    fn reflectance_max_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 16;
            let r_t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let r_w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.3)).collect();
            let s_w: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..500.0)).collect();
            let m_t = rng.gen_range(2000.0..3000.0);
            let em = reflectance_to_radiance("t", &r_t, &r_w, &s_w, m_t).unwrap();
            let max = em.radiance_baseline.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((max - m_t).abs() / m_t <= 1e-6);
        }
    }

    #[test]
    fn model_round_trip_recovers_parameters() {
        // self-consistent regime: sigma_a^2 + sigma_v^2 = 1 so the sample CV
        // of the generated region equals gamma and estimate_stats applies.
        let bands = 24;
        let stats = SpectrumStats {
            mu: (0..bands).map(|i| 500.0 + 10.0 * i as f64).collect(),
            sigma: (0..bands).map(|i| (500.0 + 10.0 * i as f64) * 0.05).collect(),
            gamma: vec![0.05; bands],
            sigma_a: 0.6,
            sigma_v: vec![0.8; bands],
        };
        let n = 10_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut data = vec![0f32; n * bands];
        let mu = stats.mu.clone();
        for j in 0..n {
            let s = simulate_spectrum(&stats, &mu, Some(0.0), &mut rng).unwrap();
            for b in 0..bands {
                data[b * n + j] = s[b] as f32;
            }
        }
        let region = HyperCube::new(1, n, bands, data, None, Unit::Radiance).unwrap();
        let est = estimate_stats(&region).unwrap();
        assert!(
            (est.sigma_a - stats.sigma_a).abs() / stats.sigma_a < 0.05,
            "sigma_a {} vs {}",
            est.sigma_a,
            stats.sigma_a
        );
        for b in 0..bands {
            assert!(
                (est.sigma_v[b] - stats.sigma_v[b]).abs() / stats.sigma_v[b] < 0.05,
                "sigma_v[{b}] {} vs {}",
                est.sigma_v[b],
                stats.sigma_v[b]
            );
        }
    }
}
