//! Frozen-encoder transfer: LoS/NLoS classification, positioning,
//! cross-band beam prediction and channel estimation.
//!
//! All tasks run on the test split (unseen scenarios). The split into a
//! head-training pool and an evaluation set, the input noise, and the head
//! initialization depend only on the downstream seed, so two encoders are
//! always compared under identical heads and data.

pub mod estimation;
pub mod heads;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use csifm_tensor::{derive_seed, ParamStore, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{param_hash, Checkpoint};
use crate::cmatrix::CMatrix;
use crate::config::{hash_json, RunConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{MaeModel, ENCODER_PREFIX};
use crate::pipeline::{inject_noise, mu_law_compress, sample_rng, tokenize};
pub use estimation::{ls_estimate, observe, pilot_symbols, run_estimation_baselines, run_estimation_task, PilotGrid};
pub use heads::{HeadArch, HeadSpec, Standardizer, Targets, TrainedHead};
pub use metrics::{macro_f1, mde, nmse, nmse_db, to_db};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Los,
    Pos,
    Beam,
    Chest,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Los, TaskKind::Pos, TaskKind::Beam, TaskKind::Chest];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Los => "los",
            TaskKind::Pos => "pos",
            TaskKind::Beam => "beam",
            TaskKind::Chest => "chest",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskKind,
    pub seed: u64,
    pub variant: String,
    pub ratio: f64,
    /// `f64::INFINITY` for noiseless input.
    pub snr_db: f64,
    pub codebook: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub head_config_hash: String,
}

pub fn snr_label(snr: f64) -> String {
    if snr.is_finite() {
        format!("{snr}")
    } else {
        "inf".into()
    }
}

/// Configured eval SNRs, plus noiseless when enabled.
pub fn eval_snrs(cfg: &RunConfig) -> Vec<f64> {
    let mut v = cfg.downstream.eval_snrs_db.clone();
    if cfg.downstream.include_noiseless {
        v.push(f64::INFINITY);
    }
    v
}

/// Shuffled (head-training pool, evaluation) index split.
pub fn split_pool(n: usize, cfg: &RunConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.downstream.seed, "downstream/split")));
    let k = ((n as f64 * cfg.downstream.head_train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let eval = idx.split_off(k);
    (idx, eval)
}

/// First ⌈ratio·|pool|⌉ pool entries (at least two). With `classes`, the
/// subset is patched to contain at least two classes whenever the pool does.
pub fn ratio_subset(pool: &[usize], ratio: f64, classes: Option<&[usize]>) -> Vec<usize> {
    let n = ((pool.len() as f64 * ratio).ceil() as usize).clamp(2.min(pool.len()), pool.len());
    let mut sub = pool[..n].to_vec();
    if let Some(labels) = classes {
        let first = labels[sub[0]];
        if sub.iter().all(|&i| labels[i] == first) {
            if let Some(&other) = pool[n..].iter().find(|&&i| labels[i] != first) {
                *sub.last_mut().expect("non-empty") = other;
            }
        }
    }
    sub
}

/// Encoder weights in their own store; inference only.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    cfg: RunConfig,
    store: ParamStore,
    model: MaeModel,
}

impl FrozenEncoder {
    /// Builds the encoder for `cfg` and loads every `encoder.*` tensor.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut enc = Self::untrained(cfg)?;
        ck.restore_prefix(&mut enc.store, ENCODER_PREFIX)?;
        Ok(enc)
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(cfg, &Checkpoint::read(path)?)
    }

    /// Freshly initialized weights (random-feature control).
    pub fn untrained(cfg: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = MaeModel::new(&mut store, &cfg.model, cfg.layout(), cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
        })
    }

    pub fn hash(&self) -> String {
        param_hash(&self.store, ENCODER_PREFIX)
    }

    pub fn d(&self) -> usize {
        self.cfg.model.d
    }

    pub fn full_dim(&self) -> usize {
        (self.model.num_tokens() + 1) * self.d()
    }

    /// Flattened F ([K+1]·d, SPA row first) from token rows [K·2L].
    pub fn features_from_tokens(&self, tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let layout = self.model.layout;
        let (k, dim) = (layout.num_tokens(), layout.token_dim());
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(64) {
            let b = chunk.len();
            let mut s = Session::frozen(&self.store);
            let x = s.constant(&[b, k, dim], chunk.iter().flat_map(|t| t.iter().copied()).collect())?;
            let emb = self.model.embed(&mut s, x)?;
            let f = self.model.encode_full(&mut s, emb)?;
            out.extend(s.value(f).chunks(self.full_dim()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Flattened F for raw CSI (μ-law + tokenize, no masking).
    pub fn features(&self, hs: &[CMatrix]) -> Result<Vec<Vec<f64>>> {
        let layout = self.model.layout;
        let tokens = hs
            .iter()
            .map(|h| tokenize(&mu_law_compress(h, self.cfg.pipeline.mu), &layout))
            .collect::<Result<Vec<_>>>()?;
        self.features_from_tokens(&tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// z₀ only.
    Spa,
    /// Whole F.
    Full,
}

/// Runs the LoS, positioning and beam tasks for one encoder, caching
/// features per SNR.
pub struct Evaluator<'a> {
    pub enc: &'a FrozenEncoder,
    pub data: &'a Dataset,
    pub cfg: &'a RunConfig,
    pub variant: String,
    pool: Vec<usize>,
    eval: Vec<usize>,
    cache: BTreeMap<u64, Vec<Vec<f64>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(enc: &'a FrozenEncoder, data: &'a Dataset, cfg: &'a RunConfig, variant: &str) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Config(format!("downstream split has only {} samples", data.len())));
        }
        if (data.manifest.n_antennas, data.manifest.n_subcarriers) != (cfg.dataset.carrier_low.n_antennas, cfg.dataset.carrier_low.n_subcarriers) {
            return Err(Error::Config("dataset grid differs from the configured encoder grid".into()));
        }
        let (pool, eval) = split_pool(data.len(), cfg);
        Ok(Self {
            enc,
            data,
            cfg,
            variant: variant.to_string(),
            pool,
            eval,
            cache: BTreeMap::new(),
        })
    }

    /// Full features of every sample at `snr` (noise keyed by sample id).
    pub fn features(&mut self, snr: f64) -> Result<&Vec<Vec<f64>>> {
        let key = snr.to_bits();
        if !self.cache.contains_key(&key) {
            let label = format!("downstream/{}", snr_label(snr));
            let hs: Vec<CMatrix> = self
                .data
                .samples
                .iter()
                .map(|s| inject_noise(&s.h, snr, &mut sample_rng(self.cfg.downstream.seed, &label, 0, s.sample_id)).h)
                .collect();
            let f = self.enc.features(&hs)?;
            self.cache.insert(key, f);
        }
        Ok(&self.cache[&key])
    }

    fn view(&mut self, snr: f64, mode: FeatureMode, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let d = self.enc.d();
        let all = self.features(snr)?;
        Ok(idx
            .iter()
            .map(|&i| match mode {
                FeatureMode::Spa => all[i][..d].to_vec(),
                FeatureMode::Full => all[i].clone(),
            })
            .collect())
    }

    fn head_spec(&self, task: TaskKind, arch: HeadArch, in_dim: usize, out_dim: usize, classification: bool) -> HeadSpec {
        let ds = &self.cfg.downstream;
        HeadSpec {
            arch,
            in_dim,
            out_dim,
            classification,
            epochs: ds.head_epochs,
            batch_size: ds.head_batch_size,
            lr: ds.head_lr,
            seed: derive_seed(ds.seed, task.name()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&self, task: TaskKind, spec: &HeadSpec, ratio: f64, snr: f64, codebook: Option<usize>, metric: &str, value: f64) -> ReportRow {
        let hash = hash_json(&serde_json::json!({
            "task": task.name(),
            "spec": spec,
            "ratio": ratio,
            "snr": snr_label(snr),
            "codebook": codebook,
            "pool": self.pool.len(),
            "eval": self.eval.len(),
        }));
        ReportRow {
            task,
            seed: self.cfg.seed,
            variant: self.variant.clone(),
            ratio,
            snr_db: snr,
            codebook,
            metric: metric.into(),
            value,
            head_config_hash: hash,
        }
    }

    fn guard<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let before = self.enc.hash();
        let out = f()?;
        if self.enc.hash() != before {
            return Err(Error::Contract("encoder parameters changed during head training".into()));
        }
        Ok(out)
    }

    pub fn los_cell(&mut self, ratio: f64, snr: f64) -> Result<ReportRow> {
        let labels: Vec<usize> = self.data.samples.iter().map(|s| usize::from(s.labels.los)).collect();
        let pos = self.pool.iter().filter(|&&i| labels[i] == 1).count();
        if pos == 0 || pos == self.pool.len() {
            return Err(Error::Contract(format!(
                "LoS head-training pool is single-class ({pos} LoS of {})",
                self.pool.len()
            )));
        }
        let train = ratio_subset(&self.pool, ratio, Some(&labels));
        let eval = self.eval.clone();
        let xt = self.view(snr, FeatureMode::Spa, &train)?;
        let xe = self.view(snr, FeatureMode::Spa, &eval)?;
        let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let ye: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();
        let spec = self.head_spec(TaskKind::Los, HeadArch::Logistic, self.enc.d(), 2, true);
        let f1 = self.guard(|| {
            let head = TrainedHead::fit(&spec, &xt, Targets::Classes(&yt))?;
            Ok(macro_f1(&head.predict_classes(&xe)?, &ye))
        })?;
        Ok(self.row(TaskKind::Los, &spec, ratio, snr, None, "f1", f1))
    }

    pub fn pos_cell(&mut self, ratio: f64, snr: f64) -> Result<ReportRow> {
        let train = ratio_subset(&self.pool, ratio, None);
        let eval = self.eval.clone();
        let xt = self.view(snr, FeatureMode::Spa, &train)?;
        let xe = self.view(snr, FeatureMode::Spa, &eval)?;
        let p = |i: &usize| self.data.samples[*i].labels.position;
        let yt: Vec<Vec<f64>> = train.iter().map(|i| p(i).to_vec()).collect();
        let ye: Vec<[f64; 2]> = eval.iter().map(p).collect();
        let hidden = self.cfg.downstream.head_hidden;
        let spec = self.head_spec(TaskKind::Pos, HeadArch::Mlp { hidden }, self.enc.d(), 2, false);
        let err = self.guard(|| {
            let head = TrainedHead::fit(&spec, &xt, Targets::Values(&yt))?;
            let pred: Vec<[f64; 2]> = head.predict(&xe)?.iter().map(|r| [r[0], r[1]]).collect();
            Ok(mde(&pred, &ye))
        })?;
        Ok(self.row(TaskKind::Pos, &spec, ratio, snr, None, "mde_m", err))
    }

    pub fn beam_cell(&mut self, codebook: usize, ratio: f64, snr: f64) -> Result<ReportRow> {
        let n_hi = self.data.manifest.carrier_high.n_antennas;
        if codebook == 0 || codebook > n_hi {
            return Err(Error::Config(format!(
                "codebook size {codebook} must be in 1..={n_hi} (high-band antennas)"
            )));
        }
        let ci = self.data.codebook_index(codebook)?;
        let labels: Vec<usize> = self.data.samples.iter().map(|s| s.labels.best_beams[ci] as usize).collect();
        let train = ratio_subset(&self.pool, ratio, None);
        let eval = self.eval.clone();
        let xt = self.view(snr, FeatureMode::Full, &train)?;
        let xe = self.view(snr, FeatureMode::Full, &eval)?;
        let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let ye: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();
        let hidden = self.cfg.downstream.head_hidden;
        let spec = self.head_spec(TaskKind::Beam, HeadArch::Mlp { hidden }, self.enc.full_dim(), codebook, true);
        let f1 = self.guard(|| {
            let head = TrainedHead::fit(&spec, &xt, Targets::Classes(&yt))?;
            Ok(macro_f1(&head.predict_classes(&xe)?, &ye))
        })?;
        Ok(self.row(TaskKind::Beam, &spec, ratio, snr, Some(codebook), "f1", f1))
    }

    pub fn run_los(&mut self) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for snr in eval_snrs(self.cfg) {
            for &r in &self.cfg.downstream.training_ratios {
                rows.push(self.los_cell(r, snr)?);
            }
        }
        Ok(rows)
    }

    pub fn run_pos(&mut self) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for snr in eval_snrs(self.cfg) {
            for &r in &self.cfg.downstream.training_ratios {
                rows.push(self.pos_cell(r, snr)?);
            }
        }
        Ok(rows)
    }

    pub fn run_beam(&mut self) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for &cb in &self.cfg.dataset.codebook_sizes {
            for snr in eval_snrs(self.cfg) {
                for &r in &self.cfg.downstream.beam_ratios {
                    rows.push(self.beam_cell(cb, r, snr)?);
                }
            }
        }
        Ok(rows)
    }

    pub fn run(&mut self, task: TaskKind) -> Result<Vec<ReportRow>> {
        match task {
            TaskKind::Los => self.run_los(),
            TaskKind::Pos => self.run_pos(),
            TaskKind::Beam => self.run_beam(),
            TaskKind::Chest => run_estimation_task(self.enc, self.data, self.cfg, &self.variant),
        }
    }
}

pub const REPORT_HEADER: &str = "task,seed,variant,ratio,snr,codebook,metric,value,head_config_hash";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.seed,
            r.variant,
            r.ratio,
            snr_label(r.snr_db),
            r.codebook.map(|c| c.to_string()).unwrap_or_default(),
            r.metric,
            r.value,
            r.head_config_hash
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: TaskKind,
    pub variant: String,
    pub metric: String,
    pub ratio: f64,
    pub snr_db: f64,
    pub codebook: Option<usize>,
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean across seeds (0 for one seed).
    pub sem: f64,
}

/// Mean and standard error per (task, variant, metric, ratio, SNR, codebook).
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(TaskKind, String, String, u64, u64, Option<usize>), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.task, r.variant.clone(), r.metric.clone(), r.ratio.to_bits(), r.snr_db.to_bits(), r.codebook))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((task, variant, metric, ratio, snr, codebook), v)| {
            let (mean, sem) = mean_sem(&v);
            SummaryRow {
                task,
                variant,
                metric,
                ratio: f64::from_bits(ratio),
                snr_db: f64::from_bits(snr),
                codebook,
                n: v.len(),
                mean,
                sem,
            }
        })
        .collect()
}

/// Mean and standard error (sample std / √n).
pub fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("task,variant,metric,ratio,snr,codebook,n,mean,sem\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.variant,
            r.metric,
            r.ratio,
            snr_label(r.snr_db),
            r.codebook.map(|c| c.to_string()).unwrap_or_default(),
            r.n,
            r.mean,
            r.sem
        ));
    }
    out
}

/// Fixed-width table for terminal output.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<6} {:<12} {:<8} {:>6} {:>5} {:>4} {:>3} {:>10} {:>8}\n",
        "task", "variant", "metric", "ratio", "snr", "cb", "n", "mean", "sem"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:<12} {:<8} {:>6} {:>5} {:>4} {:>3} {:>10.4} {:>8.4}\n",
            r.task.name(),
            r.variant,
            r.metric,
            r.ratio,
            snr_label(r.snr_db),
            r.codebook.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
            r.n,
            r.mean,
            r.sem
        ));
    }
    out
}
