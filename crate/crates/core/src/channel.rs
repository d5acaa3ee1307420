//! Synthetic geometric MISO-OFDM channels with ground-truth multipath
//! parameters and task labels.
//!
//! A [`MultipathParamSet`] is drawn once per sample and synthesized at two
//! carriers: the low band feeds the learning pipeline, the high band only
//! produces the best-beam labels.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Unit propagation direction for elevation `theta` and azimuth `phi`.
pub fn direction(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierConfig {
    pub center_hz: f64,
    pub spacing_hz: f64,
    pub n_subcarriers: usize,
    pub n_antennas: usize,
}

impl CarrierConfig {
    pub fn frequency(&self, n: usize) -> f64 {
        self.center_hz + (n as f64 - (self.n_subcarriers / 2) as f64) * self.spacing_hz
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_subcarriers).map(|n| self.frequency(n)).collect()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.center_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_hz > 0.0 && self.spacing_hz > 0.0) {
            return Err(Error::Config("carrier frequency and spacing must be positive".into()));
        }
        if self.n_subcarriers == 0 || self.n_antennas == 0 {
            return Err(Error::Config("carrier needs at least one antenna and subcarrier".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub positions: Vec<[f64; 3]>,
    pub wavelength: f64,
}

impl ArrayGeometry {
    /// Uniform linear array along x with element spacing `spacing_m`.
    pub fn ula_x(n: usize, spacing_m: f64, wavelength: f64) -> Self {
        Self {
            positions: (0..n).map(|m| [m as f64 * spacing_m, 0.0, 0.0]).collect(),
            wavelength,
        }
    }

    /// Half-wavelength ULA for a carrier.
    pub fn half_wavelength(carrier: &CarrierConfig) -> Self {
        let lambda = carrier.wavelength();
        Self::ula_x(carrier.n_antennas, lambda / 2.0, lambda)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn array_response(theta: f64, phi: f64, geometry: &ArrayGeometry) -> Vec<Complex64> {
    let u = direction(theta, phi);
    let norm = 1.0 / (geometry.len() as f64).sqrt();
    let k = 2.0 * PI / geometry.wavelength;
    geometry
        .positions
        .iter()
        .map(|r| {
            let proj = r[0] * u[0] + r[1] * u[1] + r[2] * u[2];
            Complex64::from_polar(norm, -k * proj)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    pub delay_s: f64,
    pub elevation: f64,
    pub azimuth: f64,
    /// |gain|².
    pub power: f64,
}

impl Path {
    pub fn new(gain: Complex64, delay_s: f64, elevation: f64, azimuth: f64) -> Self {
        Self {
            gain,
            delay_s,
            elevation,
            azimuth,
            power: gain.norm_sqr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathParamSet {
    pub paths: Vec<Path>,
    /// Free-space loss of the direct distance, dB.
    pub path_loss_db: f64,
    /// True iff `paths[0]` is the direct geometric path.
    pub los: bool,
    pub position: [f64; 2],
}

impl MultipathParamSet {
    pub fn validate(&self, max_paths: usize) -> Result<()> {
        let p = self.paths.len();
        if p == 0 || p > max_paths {
            return Err(Error::Contract(format!("path count {p} outside 1..={max_paths}")));
        }
        for path in &self.paths {
            if !(path.delay_s >= 0.0) {
                return Err(Error::Contract("negative path delay".into()));
            }
            if (path.power - path.gain.norm_sqr()).abs() > 1e-12 {
                return Err(Error::Contract("path power differs from |gain|²".into()));
            }
        }
        Ok(())
    }

    pub fn earliest_delay(&self) -> f64 {
        self.paths.iter().map(|p| p.delay_s).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: u32,
    pub name: String,
    pub los_probability: f64,
    pub min_paths: usize,
    pub max_paths: usize,
    pub delay_spread_s: f64,
    pub radius_min_m: f64,
    pub radius_max_m: f64,
    /// Azimuth sector of user positions, radians.
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub bs_height_m: f64,
    /// Power of the direct path relative to the scattered total, dB.
    pub los_k_factor_db: f64,
    /// Std of scattered-path azimuth around the user direction, radians.
    pub azimuth_spread: f64,
    /// Std of scattered-path elevation around the user direction, radians.
    pub elevation_spread: f64,
    /// Log-normal shadowing std of scattered path powers, dB.
    pub shadowing_db: f64,
}

impl ScenarioConfig {
    pub fn validate(&self, slot_budget: usize) -> Result<()> {
        if self.max_paths == 0 || slot_budget == 0 {
            return Err(Error::Config(format!("scenario {}: empty path budget", self.name)));
        }
        if self.min_paths == 0 || self.min_paths > self.max_paths || self.max_paths > slot_budget {
            return Err(Error::Config(format!(
                "scenario {}: path range {}..={} invalid for {} slots",
                self.name, self.min_paths, self.max_paths, slot_budget
            )));
        }
        if !(0.0..=1.0).contains(&self.los_probability) {
            return Err(Error::Config(format!("scenario {}: LoS probability outside [0,1]", self.name)));
        }
        if !(self.radius_min_m > 0.0 && self.radius_max_m >= self.radius_min_m) {
            return Err(Error::Config(format!("scenario {}: invalid radius range", self.name)));
        }
        if !(self.delay_spread_s > 0.0) || self.azimuth_max < self.azimuth_min {
            return Err(Error::Config(format!("scenario {}: invalid spreads", self.name)));
        }
        Ok(())
    }

    pub fn mean_path_count(&self) -> f64 {
        (self.min_paths + self.max_paths) as f64 / 2.0
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI) % (2.0 * PI);
    if x < 0.0 {
        x += 2.0 * PI;
    }
    x - PI
}

/// Draws one multipath realization. `wavelength` sets the free-space loss.
pub fn sample_multipath<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ScenarioConfig,
    slot_budget: usize,
    wavelength: f64,
) -> Result<MultipathParamSet> {
    cfg.validate(slot_budget)?;
    let r2 = rng.random_range(cfg.radius_min_m.powi(2)..=cfg.radius_max_m.powi(2));
    let radius = r2.sqrt();
    let az = if cfg.azimuth_max > cfg.azimuth_min {
        rng.random_range(cfg.azimuth_min..cfg.azimuth_max)
    } else {
        cfg.azimuth_min
    };
    let position = [radius * az.cos(), radius * az.sin()];
    let dist = (radius * radius + cfg.bs_height_m * cfg.bs_height_m).sqrt();
    let los_theta = (-cfg.bs_height_m / dist).acos();
    let los_phi = position[1].atan2(position[0]);
    let direct_delay = dist / SPEED_OF_LIGHT;

    let los = rng.random_bool(cfg.los_probability);
    let count = rng.random_range(cfg.min_paths..=cfg.max_paths);

    let excess = Exp::new(1.0 / cfg.delay_spread_s).map_err(|e| Error::Config(e.to_string()))?;
    let shadow = Normal::new(0.0, cfg.shadowing_db.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let az_jitter = Normal::new(0.0, cfg.azimuth_spread.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let el_jitter = Normal::new(0.0, cfg.elevation_spread.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    // (excess delay, relative power, elevation, azimuth)
    let mut raw: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(count);
    let scattered = if los { count - 1 } else { count };
    let mut scattered_total = 0.0;
    for _ in 0..scattered {
        let dt: f64 = excess.sample(rng);
        // NLoS paths are never earlier than the direct distance allows.
        let dt = if los { dt } else { dt + 0.1 * cfg.delay_spread_s };
        let power = (-dt / cfg.delay_spread_s).exp() * 10f64.powf(shadow.sample(rng) / 10.0);
        let theta = (los_theta + el_jitter.sample(rng)).clamp(1e-3, PI - 1e-3);
        let phi = wrap_angle(los_phi + az_jitter.sample(rng));
        scattered_total += power;
        raw.push((dt, power, theta, phi));
    }
    if los {
        let k = 10f64.powf(cfg.los_k_factor_db / 10.0);
        let direct_power = if scattered == 0 { 1.0 } else { k * scattered_total };
        raw.insert(0, (0.0, direct_power, los_theta, los_phi));
    }
    let total: f64 = raw.iter().map(|r| r.1).sum();
    let paths = raw
        .into_iter()
        .map(|(dt, p, theta, phi)| {
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = Complex64::from_polar((p / total).sqrt(), phase);
            Path::new(gain, direct_delay + dt, theta, phi)
        })
        .collect();
    let path_loss_db = 20.0 * (4.0 * PI * dist / wavelength).log10();
    Ok(MultipathParamSet {
        paths,
        path_loss_db,
        los,
        position,
    })
}

/// H[m, n] = Σ_p α_p e^{−j2π f_n τ_p} a_m(θ_p, φ_p).
pub fn synthesize_csi(params: &MultipathParamSet, carrier: &CarrierConfig, geometry: &ArrayGeometry) -> CMatrix {
    let freqs = carrier.frequencies();
    let n_a = geometry.len();
    let mut h = CMatrix::zeros(n_a, freqs.len());
    for path in &params.paths {
        let a = array_response(path.elevation, path.azimuth, geometry);
        let phasors: Vec<Complex64> = freqs
            .iter()
            .map(|f| path.gain * Complex64::from_polar(1.0, -2.0 * PI * f * path.delay_s))
            .collect();
        let data = h.data_mut();
        for (m, am) in a.iter().enumerate() {
            let row = &mut data[m * freqs.len()..(m + 1) * freqs.len()];
            for (z, p) in row.iter_mut().zip(&phasors) {
                *z += am * p;
            }
        }
    }
    h
}

/// DFT codebook column `b` of size `size` on an `n`-element array.
pub fn dft_codeword(n: usize, size: usize, b: usize) -> Vec<Complex64> {
    let norm = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|m| Complex64::from_polar(norm, -2.0 * PI * (m * b) as f64 / size as f64))
        .collect()
}

/// Beamforming gain Σ_n |c_bᴴ h[n]|² for every codeword.
pub fn beam_gains(h: &CMatrix, size: usize) -> Vec<f64> {
    (0..size)
        .map(|b| {
            let c = dft_codeword(h.rows(), size, b);
            (0..h.cols())
                .map(|n| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (m, cm) in c.iter().enumerate() {
                        acc += cm.conj() * h.get(m, n);
                    }
                    acc.norm_sqr()
                })
                .sum()
        })
        .collect()
}

pub fn best_beam(h: &CMatrix, size: usize) -> usize {
    let gains = beam_gains(h, size);
    let mut best = 0;
    for (b, &g) in gains.iter().enumerate() {
        if g > gains[best] {
            best = b;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub los: bool,
    pub position: [f64; 2],
    /// Best high-band beam for each configured codebook size.
    pub best_beams: Vec<u32>,
}

/// LoS flag and position pass through; beams come from the high-band
/// re-synthesis of the same paths.
pub fn derive_labels(
    params: &MultipathParamSet,
    carrier_hi: &CarrierConfig,
    geometry_hi: &ArrayGeometry,
    codebook_sizes: &[usize],
) -> Result<Labels> {
    for &size in codebook_sizes {
        if size == 0 || size > geometry_hi.len() {
            return Err(Error::Config(format!(
                "codebook size {size} must be in 1..={} (high-band antennas)",
                geometry_hi.len()
            )));
        }
    }
    let h_hi = synthesize_csi(params, carrier_hi, geometry_hi);
    Ok(Labels {
        los: params.los,
        position: params.position,
        best_beams: codebook_sizes.iter().map(|&s| best_beam(&h_hi, s) as u32).collect(),
    })
}
