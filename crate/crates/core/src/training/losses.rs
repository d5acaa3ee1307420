//! Pretraining objectives. Targets enter as constants; only predictions
//! carry gradients.

use csifm_tensor::{Session, Var};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageWeights};
use crate::error::{Error, Result};
use crate::pipeline::std_dev;

/// Added to a standard deviation below this value.
pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mae: f64,
    pub sa: f64,
    pub pa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa_pa: f64,
    pub kappa_par: f64,
}

impl LossWeights {
    pub fn from_stage(cfg: &RunConfig, w: StageWeights) -> Self {
        Self {
            mae: w.mae,
            sa: w.sa,
            pa: w.pa,
            alpha: cfg.training.alpha,
            beta: cfg.training.beta,
            kappa_pa: cfg.training.kappa_pa,
            kappa_par: cfg.prior.kappa_par,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mae, self.sa, self.pa, self.alpha, self.beta, self.kappa_pa, self.kappa_par];
        if all.iter().any(|v| !(*v >= 0.0)) || !(self.kappa_pa > 0.0 && self.kappa_par > 0.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Standard deviation with the degenerate-batch guard; the flag reports
/// whether the guard fired.
pub fn guarded_sigma(values: &[f64]) -> (f64, bool) {
    let s = std_dev(values);
    if s < SIGMA_EPS {
        (s + SIGMA_EPS, true)
    } else {
        (s, false)
    }
}

/// (1/|M|)·Σ_{k∈M} ‖(x_k − x̂_k)/σ‖², averaged over the batch.
/// `xhat` is [B, |M|, 2L]; `target` holds the matching values.
pub fn loss_mae(s: &mut Session, xhat: Var, target: Vec<f64>, sigma: f64) -> Result<Var> {
    let shape = s.shape(xhat).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Contract(format!("reconstruction shape {shape:?} has no masked tokens")));
    }
    let x = s.constant(&shape, target)?;
    let diff = s.sub(xhat, x)?;
    let sq = s.square(diff);
    let total = s.sum(sq);
    Ok(s.scale(total, 1.0 / ((shape[0] * shape[1]) as f64 * sigma * sigma)))
}

/// (1/(N_a·N_f))·‖(ŝ − s)/σ_s‖², averaged over the batch. `shat` is [B, N].
pub fn loss_sa(s: &mut Session, shat: Var, target: Vec<f64>, sigma: f64) -> Result<Var> {
    let shape = s.shape(shat).to_vec();
    let t = s.constant(&shape, target)?;
    let diff = s.sub(shat, t)?;
    let sq = s.square(diff);
    let total = s.sum(sq);
    let n: usize = shape.iter().product();
    Ok(s.scale(total, 1.0 / (n as f64 * sigma * sigma)))
}

#[derive(Debug, Clone, Copy)]
pub struct PaLosses {
    pub rel: Var,
    pub con: Var,
    pub total: Var,
}

/// Relation KL(softmax(TTᵀ/κ) ‖ softmax(RRᵀ/κ)) and InfoNCE with logits
/// r_bᵀt_j/κ. `r` and `t` are [B, d_t]; `t` is treated as a constant.
pub fn loss_pa(s: &mut Session, r: Var, t: Var, w: &LossWeights) -> Result<PaLosses> {
    let b = s.shape(r)[0];
    if b == 0 || s.shape(t)[0] != b {
        return Err(Error::Contract(format!(
            "alignment batches must match and be nonempty, got {} and {}",
            b,
            s.shape(t)[0]
        )));
    }
    let inv = 1.0 / w.kappa_pa;
    let p_t = {
        let tv = s.value(t).to_vec();
        let d = tv.len() / b;
        let mut p = vec![0.0; b * b];
        for i in 0..b {
            let row: Vec<f64> = (0..b)
                .map(|j| (0..d).map(|c| tv[i * d + c] * tv[j * d + c]).sum::<f64>() * inv)
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..b {
                p[i * b + j] = (row[j] - m).exp() / z;
            }
        }
        p
    };
    let entropy_term: f64 = p_t.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();

    let rt = s.transpose(r)?;
    let rr = s.matmul(r, rt)?;
    let rr = s.scale(rr, inv);
    let p_r = s.softmax_last(rr)?;
    let log_pr = s.log(p_r);
    let pt = s.constant(&[b, b], p_t)?;
    let cross = s.mul(pt, log_pr)?;
    let cross = s.sum(cross);
    let rel = s.scale(cross, -1.0 / b as f64);
    let rel = s.add_scalar(rel, entropy_term / b as f64);

    let tt = s.transpose(t)?;
    let logits = s.matmul(r, tt)?;
    let logits = s.scale(logits, inv);
    let p = s.softmax_last(logits)?;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = s.constant(&[b, b], eye)?;
    let diag = s.mul(p, eye)?;
    let diag = s.sum_axis(diag, 1)?;
    let logd = s.log(diag);
    let con = s.mean(logd);
    let con = s.neg(con);

    let a = s.scale(rel, w.alpha);
    let c = s.scale(con, w.beta);
    let total = s.add(a, c)?;
    Ok(PaLosses { rel, con, total })
}

/// λ_mae·L_MAE + λ_sa·L_SA + λ_pa·L_PA over the components present;
/// absent components and zero weights contribute nothing.
pub fn total_loss(s: &mut Session, mae: Option<Var>, sa: Option<Var>, pa: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [(mae, w.mae), (sa, w.sa), (pa, w.pa)] {
        if let (Some(v), true) = (term, weight != 0.0) {
            let scaled = s.scale(v, weight);
            acc = Some(match acc {
                None => scaled,
                Some(a) => s.add(a, scaled)?,
            });
        }
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(s.constant(&[], vec![0.0])?),
    }
}
