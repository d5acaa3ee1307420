//! Training-only physical priors: path descriptors and their augmentations,
//! the set-attention parameter encoder with its contrastive pretraining, and
//! the transformed-domain structure head.

mod encoder;
mod structure;

pub use encoder::{
    contrastive_loss_param, teacher_targets, train_param_encoder, ParamEncoder, PriorEpochMetrics, PARAM_PREFIX,
};
pub use structure::{StructureHead, STRUCTURE_PREFIX};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{direction, MultipathParamSet};
use crate::config::AugmentConfig;
use crate::pipeline::std_dev;

pub const DESCRIPTOR_DIM: usize = 5;

/// Dataset-level normalization of descriptor fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Δτ is divided by this (scale only, so the earliest path stays at 0).
    pub delay_scale: f64,
    pub power_mean: f64,
    pub power_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
}

fn guard(std: f64) -> f64 {
    if std > 1e-300 {
        std
    } else {
        1.0
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            delay_scale: 1.0,
            power_mean: 0.0,
            power_std: 1.0,
            loss_mean: 0.0,
            loss_std: 1.0,
        }
    }

    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a MultipathParamSet>) -> Self {
        let (mut delays, mut powers, mut losses) = (Vec::new(), Vec::new(), Vec::new());
        for p in params {
            let t0 = p.earliest_delay();
            delays.extend(p.paths.iter().map(|q| q.delay_s - t0));
            powers.extend(p.paths.iter().map(|q| q.power));
            losses.push(p.path_loss_db);
        }
        if losses.is_empty() {
            return Self::identity();
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            delay_scale: guard(std_dev(&delays)),
            power_mean: mean(&powers),
            power_std: guard(std_dev(&powers)),
            loss_mean: mean(&losses),
            loss_std: guard(std_dev(&losses)),
        }
    }
}

/// Descriptor slots `[Δτ, ρ, u_x, u_y, u_z]` with validity, plus the
/// normalized path loss as global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInput {
    pub q: Vec<[f64; DESCRIPTOR_DIM]>,
    pub valid: Vec<bool>,
    pub g: f64,
}

impl ParamInput {
    pub fn slots(&self) -> usize {
        self.q.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn build_descriptor(params: &MultipathParamSet, stats: &NormStats, slots: usize) -> ParamInput {
    let t0 = params.earliest_delay();
    let mut q = vec![[0.0; DESCRIPTOR_DIM]; slots];
    let mut valid = vec![false; slots];
    for (i, p) in params.paths.iter().take(slots).enumerate() {
        let u = direction(p.elevation, p.azimuth);
        q[i] = [
            (p.delay_s - t0) / stats.delay_scale,
            (p.power - stats.power_mean) / stats.power_std,
            u[0],
            u[1],
            u[2],
        ];
        valid[i] = true;
    }
    ParamInput {
        q,
        valid,
        g: (params.path_loss_db - stats.loss_mean) / stats.loss_std,
    }
}

/// One stochastic view: slot permutation, path dropping (never the
/// strongest) with optional validity flips on dropped slots, jitter, and
/// global-feature dropout.
pub fn augment<R: Rng + ?Sized>(v: &ParamInput, cfg: &AugmentConfig, rng: &mut R) -> ParamInput {
    let mut out = v.clone();
    let valid_idx: Vec<usize> = (0..out.slots()).filter(|&i| out.valid[i]).collect();

    if cfg.p_permute > 0.0 && rng.random::<f64>() < cfg.p_permute {
        let mut order = valid_idx.clone();
        order.shuffle(rng);
        let rows: Vec<[f64; DESCRIPTOR_DIM]> = order.iter().map(|&i| v.q[i]).collect();
        for (&slot, row) in valid_idx.iter().zip(rows) {
            out.q[slot] = row;
        }
    }

    if cfg.p_drop > 0.0 && valid_idx.len() > 1 {
        let strongest = *valid_idx
            .iter()
            .max_by(|&&a, &&b| out.q[a][1].total_cmp(&out.q[b][1]))
            .expect("non-empty");
        for &i in &valid_idx {
            if i != strongest && rng.random::<f64>() < cfg.p_drop {
                out.q[i] = [0.0; DESCRIPTOR_DIM];
                out.valid[i] = false;
                if cfg.p_mask_flip > 0.0 && rng.random::<f64>() < cfg.p_mask_flip {
                    out.valid[i] = true;
                }
            }
        }
    }

    if cfg.p_jitter > 0.0 && rng.random::<f64>() < cfg.p_jitter {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for i in 0..out.slots() {
            let row = out.q[i];
            if !out.valid[i] || row.iter().all(|&x| x == 0.0) {
                continue;
            }
            let mut r = row;
            r[0] = (r[0] + cfg.jitter_delay * unit.sample(rng)).max(0.0);
            r[1] += cfg.jitter_power * unit.sample(rng);
            for c in 2..5 {
                r[c] += cfg.jitter_angle * unit.sample(rng);
            }
            let n = (r[2] * r[2] + r[3] * r[3] + r[4] * r[4]).sqrt();
            if n > 1e-12 {
                for c in 2..5 {
                    r[c] /= n;
                }
            } else {
                r[2..5].copy_from_slice(&row[2..5]);
            }
            out.q[i] = r;
        }
    }

    if cfg.p_global_dropout > 0.0 && rng.random::<f64>() < cfg.p_global_dropout {
        out.g = 0.0;
    }
    out
}
