use std::time::Instant;

use csifm_tensor::{AdamWConfig, AdamWState, Init, ParamId, ParamStore, Session, Var};
use serde::{Deserialize, Serialize};

use super::{augment, build_descriptor, NormStats, ParamInput, DESCRIPTOR_DIM};
use crate::config::PriorConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::layers::{Linear, Mlp};
use crate::pipeline::{epoch_batches, sample_rng};

pub const PARAM_PREFIX: &str = "param.";

/// Set encoder f_θ (per-slot MLP, single-query attention pooling, fusion
/// with the global feature) followed by the projector g_θ.
#[derive(Debug, Clone)]
pub struct ParamEncoder {
    slot: Mlp,
    query: ParamId,
    global: Linear,
    fusion: Mlp,
    proj: Mlp,
    pub slot_dim: usize,
    pub target_dim: usize,
}

const INVALID_BIAS: f64 = -1e30;

impl ParamEncoder {
    pub fn new(store: &mut ParamStore, slot_dim: usize, target_dim: usize, seed: u64) -> Result<Self> {
        let e = slot_dim;
        Ok(Self {
            slot: Mlp::new(store, "param.slot", DESCRIPTOR_DIM, e, e, seed)?,
            query: store.init("param.query", &[e, 1], Init::Normal(1.0 / (e as f64).sqrt()), seed)?,
            global: Linear::new(store, "param.global", 1, e, seed)?,
            fusion: Mlp::new(store, "param.fusion", 2 * e, e, e, seed)?,
            proj: Mlp::new(store, "param.proj", e, e, target_dim, seed)?,
            slot_dim,
            target_dim,
        })
    }

    /// Returns (h [B, e], t [B, d_t]) with unit-norm rows of t.
    pub fn forward(&self, s: &mut Session, inputs: &[ParamInput]) -> Result<(Var, Var)> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Contract("empty parameter batch".into()));
        }
        let np = inputs[0].slots();
        if inputs.iter().any(|v| v.slots() != np) {
            return Err(Error::Contract("inputs differ in slot count".into()));
        }
        if let Some(i) = inputs.iter().position(|v| v.valid_count() == 0) {
            return Err(Error::Contract(format!("input {i} has no valid path slot")));
        }
        let e = self.slot_dim;
        let q: Vec<f64> = inputs.iter().flat_map(|v| v.q.iter().flatten().copied()).collect();
        let bias: Vec<f64> = inputs
            .iter()
            .flat_map(|v| v.valid.iter().map(|&ok| if ok { 0.0 } else { INVALID_BIAS }))
            .collect();
        let g: Vec<f64> = inputs.iter().map(|v| v.g).collect();

        let qv = s.constant(&[b, np, DESCRIPTOR_DIM], q)?;
        let emb = self.slot.forward(s, qv)?;
        let query = s.param(self.query);
        let scores = s.matmul(emb, query)?;
        let scores = s.reshape(scores, &[b, np])?;
        let scores = s.scale(scores, 1.0 / (e as f64).sqrt());
        let bias = s.constant(&[b, np], bias)?;
        let scores = s.add(scores, bias)?;
        let w = s.softmax_last(scores)?;
        let w = s.reshape(w, &[b, 1, np])?;
        let pooled = s.matmul(w, emb)?;
        let pooled = s.reshape(pooled, &[b, e])?;

        let gv = s.constant(&[b, 1], g)?;
        let ge = self.global.forward(s, gv)?;
        let ge = s.gelu(ge);
        let fused = s.concat(&[pooled, ge], 1)?;
        let h = self.fusion.forward(s, fused)?;
        let t = self.proj.forward(s, h)?;
        let t = s.l2_normalize(t)?;
        Ok((h, t))
    }
}

/// NT-Xent over the 2B rows of [T1; T2]: positives are the other view of the
/// same sample, the denominator runs over every other row.
pub fn contrastive_loss_param(s: &mut Session, t1: Var, t2: Var, kappa: f64) -> Result<Var> {
    let b = s.shape(t1)[0];
    if b == 0 || s.shape(t2)[0] != b {
        return Err(Error::Contract(format!(
            "contrastive views need equal nonzero batch sizes, got {} and {}",
            b,
            s.shape(t2)[0]
        )));
    }
    let n = 2 * b;
    let z = s.concat(&[t1, t2], 0)?;
    let zt = s.transpose(z)?;
    let sim = s.matmul(z, zt)?;
    let sim = s.scale(sim, 1.0 / kappa);
    let mut diag = vec![0.0; n * n];
    let mut pos = vec![0.0; n * n];
    for r in 0..n {
        diag[r * n + r] = INVALID_BIAS;
        pos[r * n + (r + b) % n] = 1.0;
    }
    let diag = s.constant(&[n, n], diag)?;
    let logits = s.add(sim, diag)?;
    let p = s.softmax_last(logits)?;
    let pos = s.constant(&[n, n], pos)?;
    let picked = s.mul(p, pos)?;
    let picked = s.sum_axis(picked, 1)?;
    let logp = s.log(picked);
    let m = s.mean(logp);
    Ok(s.neg(m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

/// Contrastive pretraining of the parameter encoder on the training split.
/// `on_epoch` sees the store after every epoch (for checkpointing).
pub fn train_param_encoder(
    data: &Dataset,
    cfg: &PriorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ParamStore, &PriorEpochMetrics) -> Result<()>,
) -> Result<(ParamStore, ParamEncoder, Vec<PriorEpochMetrics>)> {
    let mut store = ParamStore::new();
    let enc = ParamEncoder::new(&mut store, cfg.slot_dim, cfg.target_dim, seed)?;
    let stats = &data.manifest.norm_stats;
    let slots = data.manifest.max_paths;
    let base: Vec<ParamInput> = data
        .samples
        .iter()
        .map(|s| build_descriptor(&s.params, stats, slots))
        .collect();
    let mut opt = AdamWState::for_all(
        &store,
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(base.len(), cfg.batch_size, seed, "param", epoch) {
            let (mut v1, mut v2) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
            for &i in &batch {
                let mut rng = sample_rng(seed, "param", epoch, data.samples[i].sample_id);
                v1.push(augment(&base[i], &cfg.augment, &mut rng));
                v2.push(augment(&base[i], &cfg.augment, &mut rng));
            }
            let mut s = Session::new(&store);
            let (_, t1) = enc.forward(&mut s, &v1)?;
            let (_, t2) = enc.forward(&mut s, &v2)?;
            let loss = contrastive_loss_param(&mut s, t1, t2, cfg.kappa_par)?;
            let lv = s.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: "param".into(),
                    epoch,
                    detail: format!("contrastive loss {lv}"),
                    last_good: None,
                });
            }
            let grads = s.backward(loss)?;
            store.apply_grads(grads)?;
            opt.step(&mut store)?;
            total += lv * batch.len() as f64;
            count += batch.len();
        }
        let m = PriorEpochMetrics {
            epoch,
            loss: total / count.max(1) as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&store, &m)?;
        history.push(m);
    }
    Ok((store, enc, history))
}

/// Frozen targets t_i for every sample, in dataset order.
pub fn teacher_targets(store: &ParamStore, enc: &ParamEncoder, data: &Dataset, stats: &NormStats) -> Result<Vec<Vec<f64>>> {
    let slots = data.manifest.max_paths;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(256) {
        let inputs: Vec<ParamInput> = chunk.iter().map(|s| build_descriptor(&s.params, stats, slots)).collect();
        let mut s = Session::frozen(store);
        let (_, t) = enc.forward(&mut s, &inputs)?;
        out.extend(s.value(t).chunks(enc.target_dim).map(|r| r.to_vec()));
    }
    Ok(out)
}
