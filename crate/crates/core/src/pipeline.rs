//! Deterministic CSI transforms: μ-law compression, tokenization with
//! positional labels, transformed-domain structure targets, noise
//! injection and batch ordering.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};

/// C_μ(a) = ln(1+μa)/ln(1+μ).
pub fn mu_law(a: f64, mu: f64) -> f64 {
    (mu * a).ln_1p() / mu.ln_1p()
}

pub fn mu_law_inverse(y: f64, mu: f64) -> f64 {
    (y * mu.ln_1p()).exp_m1() / mu
}

/// Per-sample max-normalized μ-law on magnitudes; phases are preserved.
pub fn mu_law_compress(h: &CMatrix, mu: f64) -> CMatrix {
    let max = h.max_abs();
    if max == 0.0 {
        return CMatrix::zeros(h.rows(), h.cols());
    }
    let data = h
        .data()
        .iter()
        .map(|z| {
            let a = z.norm();
            if a == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                z * (mu_law(a / max, mu) / a)
            }
        })
        .collect();
    CMatrix::from_vec(h.rows(), h.cols(), data)
}

/// Token geometry: patches are contiguous frequency segments of one
/// antenna row, ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_a: usize,
    pub n_f: usize,
    pub patch_len: usize,
}

impl TokenLayout {
    pub fn new(n_a: usize, n_f: usize, patch_len: usize) -> Result<Self> {
        if n_a == 0 || n_f == 0 || patch_len == 0 || n_f % patch_len != 0 {
            return Err(Error::Config(format!(
                "N_f={n_f} must be a positive multiple of patch length {patch_len}"
            )));
        }
        Ok(Self { n_a, n_f, patch_len })
    }

    pub fn segments(&self) -> usize {
        self.n_f / self.patch_len
    }

    pub fn num_tokens(&self) -> usize {
        self.n_a * self.segments()
    }

    pub fn token_dim(&self) -> usize {
        2 * self.patch_len
    }

    pub fn row(&self, k: usize) -> usize {
        k / self.segments()
    }

    pub fn segment(&self, k: usize) -> usize {
        k % self.segments()
    }

    pub fn rows(&self) -> Vec<usize> {
        (0..self.num_tokens()).map(|k| self.row(k)).collect()
    }

    pub fn segment_labels(&self) -> Vec<usize> {
        (0..self.num_tokens()).map(|k| self.segment(k)).collect()
    }
}

/// Flattened K×2L tokens; token k holds [Re(patch), Im(patch)].
pub fn tokenize(h: &CMatrix, layout: &TokenLayout) -> Result<Vec<f64>> {
    if h.rows() != layout.n_a || h.cols() != layout.n_f {
        return Err(Error::Contract(format!(
            "CSI is {}×{}, layout expects {}×{}",
            h.rows(),
            h.cols(),
            layout.n_a,
            layout.n_f
        )));
    }
    let l = layout.patch_len;
    let mut out = Vec::with_capacity(layout.num_tokens() * 2 * l);
    for k in 0..layout.num_tokens() {
        let (r, s) = (layout.row(k), layout.segment(k));
        let seg = &h.data()[r * layout.n_f + s * l..r * layout.n_f + (s + 1) * l];
        out.extend(seg.iter().map(|z| z.re));
        out.extend(seg.iter().map(|z| z.im));
    }
    Ok(out)
}

pub fn detokenize(tokens: &[f64], layout: &TokenLayout) -> Result<CMatrix> {
    let l = layout.patch_len;
    if tokens.len() != layout.num_tokens() * 2 * l {
        return Err(Error::Contract(format!(
            "{} token values, layout expects {}",
            tokens.len(),
            layout.num_tokens() * 2 * l
        )));
    }
    let mut h = CMatrix::zeros(layout.n_a, layout.n_f);
    for k in 0..layout.num_tokens() {
        let (r, s) = (layout.row(k), layout.segment(k));
        let tok = &tokens[k * 2 * l..(k + 1) * 2 * l];
        for i in 0..l {
            h.set(r, s * l + i, Complex64::new(tok[i], tok[l + i]));
        }
    }
    Ok(h)
}

/// In-place iterative radix-2 DFT, X[k] = Σ x[n] e^{−j2πkn/N}.
pub fn fft(x: &mut [Complex64]) {
    let n = x.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            x.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let w = Complex64::from_polar(1.0, -2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut wk = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = x[start + k];
                let v = x[start + k + len / 2] * wk;
                x[start + k] = u + v;
                x[start + k + len / 2] = u - v;
                wk *= w;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized 2-D DFT over (antenna, frequency).
pub fn fft2(h: &CMatrix) -> CMatrix {
    let (rows, cols) = (h.rows(), h.cols());
    let mut out = h.clone();
    for r in 0..rows {
        fft(&mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = out.get(r, c);
        }
        fft(&mut col);
        for r in 0..rows {
            out.set(r, c, col[r]);
        }
    }
    out
}

/// vec(C_μ(|FFT2(H)| / max)), row-major.
pub fn structure_target(h: &CMatrix, mu: f64) -> Vec<f64> {
    let f = fft2(h);
    let mags: Vec<f64> = f.data().iter().map(|z| z.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![0.0; mags.len()];
    }
    mags.iter().map(|&m| mu_law(m / max, mu)).collect()
}

#[derive(Debug, Clone)]
pub struct NoiseOutcome {
    pub h: CMatrix,
    /// Set when the input carried no power and was returned unchanged.
    pub zero_power: bool,
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the mean
/// per-entry signal power. `f64::INFINITY` leaves H unchanged.
pub fn inject_noise<R: Rng + ?Sized>(h: &CMatrix, snr_db: f64, rng: &mut R) -> NoiseOutcome {
    let p = h.mean_power();
    if snr_db == f64::INFINITY || p == 0.0 {
        return NoiseOutcome {
            h: h.clone(),
            zero_power: p == 0.0,
        };
    }
    let sigma = (p / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let data = h
        .data()
        .iter()
        .map(|z| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            z + Complex64::new(re, im) * sigma
        })
        .collect();
    NoiseOutcome {
        h: CMatrix::from_vec(h.rows(), h.cols(), data),
        zero_power: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPolicy {
    pub fraction: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl CorruptionPolicy {
    /// Returns the SNR drawn for this sample, or `None` if left clean.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        if rng.random::<f64>() < self.fraction {
            Some(rng.random_range(self.snr_min_db..=self.snr_max_db))
        } else {
            None
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, h: &CMatrix, rng: &mut R) -> (CMatrix, Option<f64>) {
        match self.draw(rng) {
            Some(snr) => (inject_noise(h, snr, rng).h, Some(snr)),
            None => (h.clone(), None),
        }
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn epoch_rng(seed: u64, label: &str, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(csifm_tensor::derive_seed(seed, &format!("{label}/epoch{epoch}")))
}

pub fn sample_rng(seed: u64, label: &str, epoch: usize, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(csifm_tensor::derive_seed(
        seed,
        &format!("{label}/epoch{epoch}/sample{sample_id}"),
    ))
}

/// Shuffled index batches for one epoch, determined by (seed, label, epoch).
/// The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, label: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut epoch_rng(seed, label, epoch));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
