//! Stage-wise pretraining: Stage I (reconstruction + structure) and
//! Stage II (+ parameter-aware alignment against the frozen parameter
//! encoder), with plain-MAE and single-guidance ablations.

pub mod losses;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use csifm_tensor::{AdamWConfig, AdamWState, ParamId, ParamStore, Session, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{param_hash, Checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::layers::Mlp;
use crate::model::{random_mask, MaeModel, MaskPlan, DECODER_PREFIX, ENCODER_PREFIX};
use crate::pipeline::{epoch_batches, mu_law_compress, sample_rng, structure_target, tokenize};
use crate::prior::{build_descriptor, ParamEncoder, ParamInput, StructureHead, PARAM_PREFIX, STRUCTURE_PREFIX};
pub use losses::{guarded_sigma, loss_mae, loss_pa, loss_sa, total_loss, LossWeights, PaLosses, SIGMA_EPS};

pub const ALIGN_PREFIX: &str = "align.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoSa,
    NoPa,
    PlainMae,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoSa, Ablation::NoPa, Ablation::PlainMae];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSa => "no_sa",
            Ablation::NoPa => "no_pa",
            Ablation::PlainMae => "plain_mae",
        }
    }

    /// Variant label used in reports.
    pub fn variant(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoSa => "no_sa",
            Ablation::NoPa => "no_pa",
            Ablation::PlainMae => "plain_mae",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub epochs: usize,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    /// Both stages with the ablation's weights zeroed. Epoch budgets are
    /// identical across ablations.
    pub fn from_config(cfg: &RunConfig, ablation: Ablation) -> Self {
        let mut w1 = LossWeights::from_stage(cfg, cfg.training.stage1_weights);
        let mut w2 = LossWeights::from_stage(cfg, cfg.training.stage2_weights);
        if matches!(ablation, Ablation::NoSa | Ablation::PlainMae) {
            w1.sa = 0.0;
            w2.sa = 0.0;
        }
        if matches!(ablation, Ablation::NoPa | Ablation::PlainMae) {
            w1.pa = 0.0;
            w2.pa = 0.0;
        }
        Self {
            stages: vec![
                StageSpec {
                    name: "stage1".into(),
                    epochs: cfg.training.stage1_epochs,
                    weights: w1,
                },
                StageSpec {
                    name: "stage2".into(),
                    epochs: cfg.training.stage2_epochs,
                    weights: w2,
                },
            ],
        }
    }

    pub fn stage(&self, name: &str) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no stage named {name:?}")))
    }

    pub fn needs_structure(&self) -> bool {
        self.stages.iter().any(|s| s.weights.sa > 0.0)
    }

    pub fn needs_teacher(&self) -> bool {
        self.stages.iter().any(|s| s.weights.pa > 0.0)
    }
}

/// SPA output → two-layer MLP → L2 normalization.
#[derive(Debug, Clone)]
pub struct AlignHead {
    mlp: Mlp,
}

impl AlignHead {
    pub fn new(store: &mut ParamStore, d: usize, target_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "align.mlp", d, d, target_dim, seed)?,
        })
    }

    pub fn forward(&self, s: &mut Session, z0: Var) -> Result<Var> {
        let r = self.mlp.forward(s, z0)?;
        Ok(s.l2_normalize(r)?)
    }
}

/// Per-sample quantities that do not depend on the epoch.
#[derive(Debug, Clone)]
pub struct Precomputed {
    /// μ-law tokens of the clean CSI (reconstruction targets).
    pub clean_tokens: Vec<Vec<f64>>,
    pub structure: Vec<Vec<f64>>,
    pub descriptors: Vec<ParamInput>,
}

impl Precomputed {
    pub fn new(data: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let layout = cfg.layout();
        let mu = cfg.pipeline.mu;
        let mut clean_tokens = Vec::with_capacity(data.len());
        let mut structure = Vec::with_capacity(data.len());
        let mut descriptors = Vec::with_capacity(data.len());
        for s in &data.samples {
            clean_tokens.push(tokenize(&mu_law_compress(&s.h, mu), &layout)?);
            structure.push(structure_target(&s.h, mu));
            descriptors.push(build_descriptor(&s.params, &data.manifest.norm_stats, data.manifest.max_paths));
        }
        Ok(Self {
            clean_tokens,
            structure,
            descriptors,
        })
    }
}

/// One training batch: noisy input tokens and per-sample mask plans.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x_in: Vec<f64>,
    pub plans: Vec<MaskPlan>,
    pub corrupted: usize,
}

/// Noise and masks are drawn from a stream keyed by (seed, stage, epoch,
/// sample id), so any epoch can be rebuilt without replaying earlier ones.
pub fn prepare_batch(data: &Dataset, indices: &[usize], cfg: &RunConfig, label: &str, epoch: usize) -> Result<Batch> {
    let layout = cfg.layout();
    let mut x_in = Vec::with_capacity(indices.len() * layout.num_tokens() * layout.token_dim());
    let mut plans = Vec::with_capacity(indices.len());
    let mut corrupted = 0;
    for &i in indices {
        let sample = &data.samples[i];
        let mut rng = sample_rng(cfg.seed, label, epoch, sample.sample_id);
        let (h, snr) = cfg.pipeline.corruption.apply(&sample.h, &mut rng);
        corrupted += usize::from(snr.is_some());
        x_in.extend(tokenize(&mu_law_compress(&h, cfg.pipeline.mu), &layout)?);
        plans.push(random_mask(layout.num_tokens(), cfg.pipeline.mask_ratio, &mut rng)?);
    }
    Ok(Batch {
        indices: indices.to_vec(),
        x_in,
        plans,
        corrupted,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub l_mae: f64,
    pub l_sa: f64,
    pub l_rel: f64,
    pub l_con: f64,
    pub l_pa: f64,
    pub total: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub l_mae: f64,
    pub l_sa: f64,
    pub l_rel: f64,
    pub l_con: f64,
    pub l_pa: f64,
    pub total: f64,
    pub lr: f64,
    pub steps: usize,
    pub flagged_batches: usize,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Checkpoints and metrics are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Epochs already completed (resume point).
    pub start_epoch: usize,
    pub resume_optimizer: Option<AdamWState>,
    /// Stops after this epoch without changing the schedule.
    pub stop_after: Option<usize>,
    pub meta: serde_json::Value,
    pub verbose: bool,
}

pub struct Pretrainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: MaeModel,
    pub structure: Option<StructureHead>,
    pub align: Option<AlignHead>,
    pub teacher: Option<ParamEncoder>,
}

impl Pretrainer {
    /// Initial values depend only on (seed, parameter name), so the heads'
    /// presence never changes the backbone initialization.
    pub fn new(cfg: &RunConfig, with_structure: bool, with_align: bool) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = cfg.layout();
        let model = MaeModel::new(&mut store, &cfg.model, layout, cfg.seed)?;
        let structure = if with_structure {
            Some(StructureHead::new(
                &mut store,
                cfg.model.d,
                cfg.prior.structure_hidden,
                layout.n_a * layout.n_f,
                cfg.prior.threshold_init,
                cfg.seed,
            )?)
        } else {
            None
        };
        let align = if with_align {
            Some(AlignHead::new(&mut store, cfg.model.d, cfg.prior.target_dim, cfg.seed)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            structure,
            align,
            teacher: None,
        })
    }

    pub fn for_plan(cfg: &RunConfig, plan: &StagePlan) -> Result<Self> {
        Self::new(cfg, plan.needs_structure(), plan.needs_teacher())
    }

    /// Loads the frozen parameter encoder into this store under `param.*`.
    pub fn attach_teacher(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.header.stage != "param" {
            return Err(Error::Prerequisite(format!(
                "teacher checkpoint has stage {:?}, expected \"param\"",
                ck.header.stage
            )));
        }
        if self.teacher.is_none() {
            let enc = ParamEncoder::new(&mut self.store, self.cfg.prior.slot_dim, self.cfg.prior.target_dim, self.cfg.seed)?;
            self.teacher = Some(enc);
        }
        ck.restore_into(&mut self.store)
    }

    pub fn session(&self) -> Session<'_> {
        Session::with_frozen(&self.store, |n| n.starts_with(PARAM_PREFIX))
    }

    /// Parameters updated in a stage with these weights.
    pub fn trainable_ids(&self, w: &LossWeights) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let n = self.store.name(id);
                n.starts_with(ENCODER_PREFIX)
                    || n.starts_with(DECODER_PREFIX)
                    || (w.sa > 0.0 && n.starts_with(STRUCTURE_PREFIX))
                    || (w.pa > 0.0 && n.starts_with(ALIGN_PREFIX))
            })
            .collect()
    }

    /// Builds the weighted objective on `s`. Components with zero weight
    /// are not evaluated.
    pub fn compute_loss(&self, s: &mut Session, batch: &Batch, pre: &Precomputed, w: &LossWeights) -> Result<(Var, StepStats)> {
        let layout = self.model.layout;
        let (b, k, dim) = (batch.indices.len(), layout.num_tokens(), layout.token_dim());
        let d = self.cfg.model.d;
        let x = s.constant(&[b, k, dim], batch.x_in.clone())?;
        let emb = self.model.embed(s, x)?;
        let enc = self.model.encode_masked(s, emb, &batch.plans)?;
        let mut stats = StepStats::default();

        let mae = if w.mae > 0.0 {
            let xhat = self.model.decode(s, enc, &batch.plans)?;
            let clean: Vec<f64> = batch.indices.iter().flat_map(|&i| pre.clean_tokens[i].iter().copied()).collect();
            let target = self.model.gather_masked(&clean, &batch.plans);
            let (sigma, flagged) = guarded_sigma(&target);
            stats.flagged |= flagged;
            let l = loss_mae(s, xhat, target, sigma)?;
            stats.l_mae = s.scalar(l);
            Some(l)
        } else {
            None
        };

        let needs_z0 = w.sa > 0.0 || w.pa > 0.0;
        let z0 = if needs_z0 {
            let z = s.slice(enc, 1, 0, 1)?;
            Some(s.reshape(z, &[b, d])?)
        } else {
            None
        };

        let sa = if w.sa > 0.0 {
            let head = self
                .structure
                .as_ref()
                .ok_or_else(|| Error::Contract("structure weight set but no structure head".into()))?;
            let shat = head.forward(s, z0.expect("z0"))?;
            let target: Vec<f64> = batch.indices.iter().flat_map(|&i| pre.structure[i].iter().copied()).collect();
            let (sigma, flagged) = guarded_sigma(&target);
            stats.flagged |= flagged;
            let l = loss_sa(s, shat, target, sigma)?;
            stats.l_sa = s.scalar(l);
            Some(l)
        } else {
            None
        };

        let pa = if w.pa > 0.0 {
            let teacher = self
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Prerequisite("parameter-aware stage needs the frozen parameter encoder".into()))?;
            let align = self
                .align
                .as_ref()
                .ok_or_else(|| Error::Contract("alignment weight set but no alignment head".into()))?;
            let inputs: Vec<ParamInput> = batch.indices.iter().map(|&i| pre.descriptors[i].clone()).collect();
            let (_, t) = teacher.forward(s, &inputs)?;
            let r = align.forward(s, z0.expect("z0"))?;
            let l = loss_pa(s, r, t, w)?;
            stats.l_rel = s.scalar(l.rel);
            stats.l_con = s.scalar(l.con);
            stats.l_pa = s.scalar(l.total);
            Some(l.total)
        } else {
            None
        };

        let total = total_loss(s, mae, sa, pa, w)?;
        stats.total = s.scalar(total);
        Ok((total, stats))
    }

    fn header(&self, stage: &str, epoch: usize, step: u64, meta: &serde_json::Value) -> CheckpointHeader {
        CheckpointHeader {
            stage: stage.to_string(),
            epoch,
            step,
            config_hash: self.cfg.hash(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            meta: meta.clone(),
        }
    }

    /// Student parameters only (the frozen teacher has its own checkpoint).
    pub fn checkpoint(&self, stage: &str, epoch: usize, opt: Option<&AdamWState>, meta: &serde_json::Value) -> Checkpoint {
        let step = opt.map_or(0, |o| o.step);
        Checkpoint::capture(
            self.header(stage, epoch, step, meta),
            &self.store,
            &[ENCODER_PREFIX, DECODER_PREFIX, STRUCTURE_PREFIX, ALIGN_PREFIX],
            opt,
        )
    }

    /// Restores student parameters (and returns optimizer state if stored).
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<Option<AdamWState>> {
        ck.restore_into(&mut self.store)?;
        ck.restore_optimizer(&self.store)
    }

    pub fn run_stage(&mut self, data: &Dataset, pre: &Precomputed, stage: &StageSpec, opts: StageOptions) -> Result<Vec<EpochMetrics>> {
        let w = stage.weights;
        w.validate()?;
        if w.pa > 0.0 && self.teacher.is_none() {
            return Err(Error::Prerequisite(format!(
                "{} uses parameter-aware alignment but no frozen parameter-encoder checkpoint is attached",
                stage.name
            )));
        }
        let ids = self.trainable_ids(&w);
        let mut opt = match opts.resume_optimizer {
            Some(o) => o,
            None => AdamWState::new(
                &self.store,
                ids.clone(),
                AdamWConfig {
                    lr: self.cfg.training.lr,
                    weight_decay: self.cfg.training.weight_decay,
                    ..Default::default()
                },
            ),
        };
        let bs = self.cfg.training.batch_size;
        let per_epoch = data.len().div_ceil(bs);
        let total_steps = per_epoch * stage.epochs;
        let warmup = ((self.cfg.training.warmup_fraction * total_steps as f64).ceil() as u64).max(1);
        let teacher_hash = param_hash(&self.store, PARAM_PREFIX);
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut last_good: Option<PathBuf> = None;
        let mut history = Vec::new();
        for epoch in opts.start_epoch + 1..=stage.epochs {
            if opts.stop_after.is_some_and(|s| epoch > s) {
                break;
            }
            let started = Instant::now();
            let mut acc = StepStats::default();
            let mut seen = 0usize;
            let mut flagged = 0usize;
            let mut steps = 0usize;
            let mut lr = 0.0;
            for indices in epoch_batches(data.len(), bs, self.cfg.seed, &stage.name, epoch) {
                let batch = prepare_batch(data, &indices, &self.cfg, &stage.name, epoch)?;
                let mut s = self.session();
                let (loss, st) = self.compute_loss(&mut s, &batch, pre, &w)?;
                if !st.total.is_finite() {
                    return Err(Error::Diverged {
                        stage: stage.name.clone(),
                        epoch,
                        detail: format!("non-finite loss {st:?}"),
                        last_good,
                    });
                }
                let grads = s.backward(loss)?;
                for id in self.store.ids_with_prefix(PARAM_PREFIX) {
                    if grads.get(id).is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                        return Err(Error::Contract(format!(
                            "frozen parameter {} received a gradient",
                            self.store.name(id)
                        )));
                    }
                }
                self.store.apply_grads(grads)?;
                for &id in &opt.params {
                    if self.store.get(id).grad().is_none() {
                        let n = self.store.get(id).numel();
                        self.store.get_mut(id).set_grad(vec![0.0; n])?;
                    }
                }
                lr = self.cfg.training.lr * ((opt.step + 1) as f64 / warmup as f64).min(1.0);
                opt.step_with_lr(&mut self.store, lr)?;
                if let Some(h) = &self.structure {
                    h.project_thresholds(&mut self.store);
                }
                self.store.zero_grads();
                let n = indices.len() as f64;
                acc.l_mae += st.l_mae * n;
                acc.l_sa += st.l_sa * n;
                acc.l_rel += st.l_rel * n;
                acc.l_con += st.l_con * n;
                acc.l_pa += st.l_pa * n;
                acc.total += st.total * n;
                flagged += usize::from(st.flagged);
                seen += indices.len();
                steps += 1;
            }
            let n = seen.max(1) as f64;
            let m = EpochMetrics {
                stage: stage.name.clone(),
                epoch,
                l_mae: acc.l_mae / n,
                l_sa: acc.l_sa / n,
                l_rel: acc.l_rel / n,
                l_con: acc.l_con / n,
                l_pa: acc.l_pa / n,
                total: acc.total / n,
                lr,
                steps,
                flagged_batches: flagged,
                wall_s: started.elapsed().as_secs_f64(),
            };
            if param_hash(&self.store, PARAM_PREFIX) != teacher_hash {
                return Err(Error::Contract("frozen parameter encoder changed during training".into()));
            }
            if opts.verbose {
                eprintln!(
                    "[{}] epoch {:>3}/{}  mae {:.5}  sa {:.5}  pa {:.5}  total {:.5}  ({:.1}s)",
                    m.stage, m.epoch, stage.epochs, m.l_mae, m.l_sa, m.l_pa, m.total, m.wall_s
                );
            }
            if let Some(dir) = &opts.out_dir {
                let ck = self.checkpoint(&stage.name, epoch, Some(&opt), &opts.meta);
                let path = epoch_checkpoint_path(dir, &stage.name, epoch);
                ck.write(&path)?;
                if epoch == stage.epochs {
                    ck.write(&dir.join(format!("{}.ck", stage.name)))?;
                }
                append_jsonl(&dir.join("metrics.jsonl"), &m)?;
                last_good = Some(path);
            }
            history.push(m);
        }
        Ok(history)
    }
}

pub fn epoch_checkpoint_path(dir: &Path, stage: &str, epoch: usize) -> PathBuf {
    dir.join(format!("{stage}_epoch{epoch:03}.ck"))
}

/// Highest-numbered per-epoch checkpoint of `stage` in `dir`.
pub fn latest_epoch_checkpoint(dir: &Path, stage: &str) -> Option<(usize, PathBuf)> {
    let prefix = format!("{stage}_epoch");
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let num = name.strip_prefix(&prefix)?.strip_suffix(".ck")?.parse::<usize>().ok()?;
            Some((num, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("stage,epoch,l_mae,l_sa,l_rel,l_con,l_pa,total,lr,steps,flagged_batches,wall_s\n");
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            m.stage, m.epoch, m.l_mae, m.l_sa, m.l_rel, m.l_con, m.l_pa, m.total, m.lr, m.steps, m.flagged_batches, m.wall_s
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, Split};
    use crate::prior::train_param_encoder;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::preset("toy").unwrap();
        cfg.dataset.n_train = 24;
        cfg.training.batch_size = 8;
        cfg.training.stage1_epochs = 2;
        cfg.training.stage2_epochs = 2;
        cfg.prior.epochs = 1;
        cfg
    }

    fn teacher(cfg: &RunConfig, data: &Dataset) -> Checkpoint {
        let (store, _, _) = train_param_encoder(data, &cfg.prior, cfg.seed, |_, _| Ok(())).unwrap();
        Checkpoint::capture(
            CheckpointHeader {
                stage: "param".into(),
                epoch: 1,
                step: 0,
                config_hash: cfg.hash(),
                config: serde_json::Value::Null,
                meta: serde_json::Value::Null,
            },
            &store,
            &[],
            None,
        )
    }

    #[test]
    fn ablation_plans() {
        let cfg = RunConfig::defaults();
        let plain = StagePlan::from_config(&cfg, Ablation::PlainMae);
        assert!(!plain.needs_structure() && !plain.needs_teacher());
        let full = StagePlan::from_config(&cfg, Ablation::None);
        assert!(full.needs_structure() && full.needs_teacher());
        assert_eq!(full.stages[0].weights.pa, 0.0);
        assert!(!StagePlan::from_config(&cfg, Ablation::NoPa).needs_teacher());
        assert!(!StagePlan::from_config(&cfg, Ablation::NoSa).needs_structure());
        assert_eq!("no_sa".parse::<Ablation>().unwrap(), Ablation::NoSa);
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn seeded_runs_are_identical_and_handoff_preserves_encoder() {
        let cfg = tiny();
        let data = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
        let pre = Precomputed::new(&data, &cfg).unwrap();
        let ck = teacher(&cfg, &data);
        let plan = StagePlan::from_config(&cfg, Ablation::None);
        let run = || {
            let mut p = Pretrainer::for_plan(&cfg, &plan).unwrap();
            p.attach_teacher(&ck).unwrap();
            p.run_stage(&data, &pre, &plan.stages[0], StageOptions::default()).unwrap();
            let h1 = param_hash(&p.store, ENCODER_PREFIX);
            let m = p.run_stage(&data, &pre, &plan.stages[1], StageOptions::default()).unwrap();
            (h1, p.checkpoint("stage2", 2, None, &serde_json::Value::Null).params, m)
        };
        let (h1, a, m) = run();
        let (_, b, _) = run();
        assert_eq!(a, b);
        assert!(m.iter().all(|e| e.l_pa > 0.0 && e.total.is_finite()));

        // Stage II step 0 sees exactly the Stage I encoder.
        let mut p = Pretrainer::for_plan(&cfg, &plan).unwrap();
        p.attach_teacher(&ck).unwrap();
        p.run_stage(&data, &pre, &plan.stages[0], StageOptions::default()).unwrap();
        let stage1 = p.checkpoint("stage1", 2, None, &serde_json::Value::Null);
        let mut q = Pretrainer::for_plan(&cfg, &plan).unwrap();
        q.attach_teacher(&ck).unwrap();
        q.restore(&stage1).unwrap();
        assert_eq!(param_hash(&q.store, ENCODER_PREFIX), h1);
    }

    #[test]
    fn stage_two_without_teacher_is_prerequisite_error() {
        let cfg = tiny();
        let data = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
        let pre = Precomputed::new(&data, &cfg).unwrap();
        let plan = StagePlan::from_config(&cfg, Ablation::None);
        let mut p = Pretrainer::for_plan(&cfg, &plan).unwrap();
        let err = p.run_stage(&data, &pre, &plan.stages[1], StageOptions::default());
        assert!(matches!(err, Err(Error::Prerequisite(_))));
    }

    #[test]
    fn plain_mae_gradients_match_prior_free_build() {
        let cfg = tiny();
        let data = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
        let pre = Precomputed::new(&data, &cfg).unwrap();
        let batch = prepare_batch(&data, &[0, 3, 5], &cfg, "stage1", 1).unwrap();
        let w = StagePlan::from_config(&cfg, Ablation::PlainMae).stages[0].weights;
        let grads = |p: &Pretrainer| {
            let mut s = p.session();
            let (l, _) = p.compute_loss(&mut s, &batch, &pre, &w).unwrap();
            let g = s.backward(l).unwrap();
            p.store
                .ids_with_prefix("")
                .filter(|&id| {
                    let n = p.store.name(id);
                    n.starts_with(ENCODER_PREFIX) || n.starts_with(DECODER_PREFIX)
                })
                .map(|id| (p.store.name(id).to_string(), g.get(id).map(|v| v.to_vec())))
                .collect::<Vec<_>>()
        };
        let with = Pretrainer::new(&cfg, true, true).unwrap();
        let without = Pretrainer::new(&cfg, false, false).unwrap();
        assert_eq!(grads(&with), grads(&without));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let data = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
        let pre = Precomputed::new(&data, &cfg).unwrap();
        let plan = StagePlan::from_config(&cfg, Ablation::NoPa);
        let dir = tempfile::tempdir().unwrap();
        let mut full = Pretrainer::for_plan(&cfg, &plan).unwrap();
        full.run_stage(&data, &pre, &plan.stages[0], StageOptions::default()).unwrap();

        let mut first = Pretrainer::for_plan(&cfg, &plan).unwrap();
        let opts = StageOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(1),
            ..Default::default()
        };
        first.run_stage(&data, &pre, &plan.stages[0], opts).unwrap();
        let (epoch, path) = latest_epoch_checkpoint(dir.path(), "stage1").unwrap();
        assert_eq!(epoch, 1);
        let ck = Checkpoint::read(&path).unwrap();
        let mut resumed = Pretrainer::for_plan(&cfg, &plan).unwrap();
        let opt = resumed.restore(&ck).unwrap();
        let opts = StageOptions {
            start_epoch: epoch,
            resume_optimizer: opt,
            ..Default::default()
        };
        resumed.run_stage(&data, &pre, &plan.stages[0], opts).unwrap();
        assert_eq!(param_hash(&resumed.store, ""), param_hash(&full.store, ""));
    }
}
