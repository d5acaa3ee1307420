//! Pilot-based channel estimation: LS with bilinear interpolation, and a
//! transformer predictor refining the LS grid from encoder features.

use std::f64::consts::PI;

use csifm_tensor::{derive_seed, AdamWConfig, AdamWState, ParamStore, Session, Var};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{eval_snrs, snr_label, split_pool, FrozenEncoder, ReportRow, TaskKind};
use crate::cmatrix::CMatrix;
use crate::config::{hash_json, RunConfig};
use crate::dataset::Dataset;
use crate::downstream::metrics::{nmse, to_db};
use crate::error::{Error, Result};
use crate::model::layers::{run_blocks, Block, LayerNorm, Linear};
use crate::model::{MaeModel, ENCODER_PREFIX};
use crate::pipeline::{detokenize, epoch_batches, mu_law_compress, sample_rng, tokenize, TokenLayout};

pub const CHEST_PREFIX: &str = "chest.";

/// Product pilot grid over (antenna, subcarrier).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotGrid {
    pub n_a: usize,
    pub n_f: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl PilotGrid {
    pub fn full(n_a: usize, n_f: usize) -> Self {
        Self::strided(n_a, n_f, 1, 1)
    }

    /// Every `sa`-th antenna and `sf`-th subcarrier, starting at 0.
    pub fn strided(n_a: usize, n_f: usize, sa: usize, sf: usize) -> Self {
        Self {
            n_a,
            n_f,
            rows: (0..n_a).step_by(sa.max(1)).collect(),
            cols: (0..n_f).step_by(sf.max(1)).collect(),
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows.binary_search(&r).is_ok() && self.cols.binary_search(&c).is_ok()
    }

    pub fn density(&self) -> f64 {
        (self.rows.len() * self.cols.len()) as f64 / (self.n_a * self.n_f) as f64
    }
}

/// Unit-modulus QPSK pilots, fixed per grid position.
pub fn pilot_symbols(n_a: usize, n_f: usize) -> CMatrix {
    CMatrix::from_fn(n_a, n_f, |r, c| Complex64::from_polar(1.0, PI / 4.0 + PI / 2.0 * ((7 * r + 3 * c) % 4) as f64))
}

/// Y = X ⊙ H + N on pilot positions (zero elsewhere), with per-entry
/// noise power mean|H|²/ρ. `f64::INFINITY` gives a noiseless observation.
pub fn observe<R: Rng + ?Sized>(h: &CMatrix, grid: &PilotGrid, pilots: &CMatrix, snr_db: f64, rng: &mut R) -> CMatrix {
    let sigma = if snr_db.is_finite() {
        (h.mean_power() / 10f64.powf(snr_db / 10.0) / 2.0).sqrt()
    } else {
        0.0
    };
    let mut y = CMatrix::zeros(h.rows(), h.cols());
    for &r in &grid.rows {
        for &c in &grid.cols {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            y.set(r, c, pilots.get(r, c) * h.get(r, c) + Complex64::new(re, im) * sigma);
        }
    }
    y
}

/// Bracketing pilot indices and weight for position `x`; clamps outside
/// the pilot span.
fn bracket(p: &[usize], x: usize) -> (usize, usize, f64) {
    if x <= p[0] {
        return (p[0], p[0], 0.0);
    }
    let last = *p.last().expect("non-empty");
    if x >= last {
        return (last, last, 0.0);
    }
    let i = p.partition_point(|&v| v <= x) - 1;
    let (a, b) = (p[i], p[i + 1]);
    (a, b, (x - a) as f64 / (b - a) as f64)
}

/// H_ls = Y / X on pilots, bilinear over the grid elsewhere.
pub fn ls_estimate(y: &CMatrix, grid: &PilotGrid, pilots: &CMatrix) -> Result<CMatrix> {
    if grid.rows.is_empty() || grid.cols.is_empty() {
        return Err(Error::Contract("pilot grid is empty".into()));
    }
    let mut at = CMatrix::zeros(y.rows(), y.cols());
    for &r in &grid.rows {
        for &c in &grid.cols {
            let x = pilots.get(r, c);
            if x.norm() == 0.0 {
                return Err(Error::Contract(format!("pilot symbol at ({r}, {c}) is zero")));
            }
            at.set(r, c, y.get(r, c) / x);
        }
    }
    Ok(CMatrix::from_fn(y.rows(), y.cols(), |r, c| {
        let (r0, r1, wr) = bracket(&grid.rows, r);
        let (c0, c1, wc) = bracket(&grid.cols, c);
        at.get(r0, c0) * ((1.0 - wr) * (1.0 - wc))
            + at.get(r0, c1) * ((1.0 - wr) * wc)
            + at.get(r1, c0) * (wr * (1.0 - wc))
            + at.get(r1, c1) * (wr * wc)
    }))
}

/// Blocks over F, then per-token residual on the scaled LS tokens.
#[derive(Debug, Clone)]
pub struct ChestPredictor {
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl ChestPredictor {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, layout: &TokenLayout, seed: u64) -> Result<Self> {
        let d = cfg.model.d;
        let blocks = (0..cfg.downstream.chest.predictor_depth)
            .map(|i| Block::new(store, &format!("chest.block{i}"), d, cfg.model.heads, cfg.model.ff_mult, seed))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "chest.norm", d, seed)?;
        let head = Linear::new(store, "chest.head", d, layout.token_dim(), seed)?;
        // Start from the LS estimate itself.
        store.get_mut(head.w).data_mut().fill(0.0);
        Ok(Self { blocks, norm, head })
    }

    /// `f`: [B, K+1, d]; `ls`: [B, K, 2L] → [B, K, 2L].
    pub fn forward(&self, s: &mut Session, f: Var, ls: Var) -> Result<Var> {
        let k = s.shape(ls)[1];
        let x = run_blocks(&self.blocks, s, f)?;
        let x = s.slice(x, 1, 1, 1 + k)?;
        let x = self.norm.forward(s, x)?;
        let delta = self.head.forward(s, x)?;
        Ok(s.add(ls, delta)?)
    }
}

/// One prepared estimation sample.
#[derive(Debug, Clone)]
pub struct ChestItem {
    pub h: CMatrix,
    pub h_ls: CMatrix,
    /// max|H_ls| (1 when all-zero).
    pub scale: f64,
    /// Encoder input tokens (μ-law of H_ls).
    pub enc_tokens: Vec<f64>,
    /// tokenize(H_ls / scale).
    pub ls_tokens: Vec<f64>,
    /// tokenize(H / scale).
    pub target: Vec<f64>,
}

pub fn prepare_item(h: &CMatrix, grid: &PilotGrid, pilots: &CMatrix, snr_db: f64, rng: &mut impl Rng, cfg: &RunConfig) -> Result<ChestItem> {
    let layout = cfg.layout();
    let y = observe(h, grid, pilots, snr_db, rng);
    let h_ls = ls_estimate(&y, grid, pilots)?;
    let m = h_ls.max_abs();
    let scale = if m > 0.0 { m } else { 1.0 };
    Ok(ChestItem {
        h: h.clone(),
        enc_tokens: tokenize(&mu_law_compress(&h_ls, cfg.pipeline.mu), &layout)?,
        ls_tokens: tokenize(&h_ls.scale(1.0 / scale), &layout)?,
        target: tokenize(&h.scale(1.0 / scale), &layout)?,
        h_ls,
        scale,
    })
}

/// Frozen features (precomputed) or a trainable backbone in the graph.
pub enum Backbone<'a> {
    Frozen { features: &'a [Vec<f64>] },
    Trainable { model: MaeModel },
}

pub struct ChestNet<'a> {
    pub store: ParamStore,
    pub predictor: ChestPredictor,
    pub backbone: Backbone<'a>,
}

impl<'a> ChestNet<'a> {
    pub fn frozen(cfg: &RunConfig, features: &'a [Vec<f64>]) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = cfg.layout();
        let predictor = ChestPredictor::new(&mut store, cfg, &layout, derive_seed(cfg.downstream.seed, "chest"))?;
        Ok(Self {
            store,
            predictor,
            backbone: Backbone::Frozen { features },
        })
    }

    /// Same predictor (same init) on a freshly initialized backbone that
    /// trains jointly.
    pub fn from_scratch(cfg: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = cfg.layout();
        let predictor = ChestPredictor::new(&mut store, cfg, &layout, derive_seed(cfg.downstream.seed, "chest"))?;
        let model = MaeModel::new(&mut store, &cfg.model, layout, derive_seed(cfg.downstream.seed, "supervised"))?;
        Ok(Self {
            store,
            predictor,
            backbone: Backbone::Trainable { model },
        })
    }

    fn forward(&self, s: &mut Session, items: &[&ChestItem], rows: &[usize], layout: &TokenLayout, d: usize) -> Result<Var> {
        let b = items.len();
        let (k, dim) = (layout.num_tokens(), layout.token_dim());
        let ls = s.constant(&[b, k, dim], items.iter().flat_map(|it| it.ls_tokens.iter().copied()).collect())?;
        let f = match &self.backbone {
            Backbone::Frozen { features } => {
                let data = rows.iter().flat_map(|&i| features[i].iter().copied()).collect();
                s.constant(&[b, k + 1, d], data)?
            }
            Backbone::Trainable { model } => {
                let x = s.constant(&[b, k, dim], items.iter().flat_map(|it| it.enc_tokens.iter().copied()).collect())?;
                let emb = model.embed(s, x)?;
                model.encode_full(s, emb)?
            }
        };
        self.predictor.forward(s, f, ls)
    }

    pub fn train(&mut self, items: &[ChestItem], cfg: &RunConfig) -> Result<()> {
        let layout = cfg.layout();
        let ch = &cfg.downstream.chest;
        let ids = self
            .store
            .ids()
            .filter(|&id| {
                let n = self.store.name(id);
                n.starts_with(CHEST_PREFIX)
                    || (matches!(self.backbone, Backbone::Trainable { .. }) && n.starts_with(ENCODER_PREFIX))
            })
            .collect();
        let mut opt = AdamWState::new(
            &self.store,
            ids,
            AdamWConfig {
                lr: ch.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for epoch in 1..=ch.epochs {
            for rows in epoch_batches(items.len(), ch.batch_size, cfg.downstream.seed, "chest", epoch) {
                let batch: Vec<&ChestItem> = rows.iter().map(|&i| &items[i]).collect();
                let mut s = Session::new(&self.store);
                let out = self.forward(&mut s, &batch, &rows, &layout, cfg.model.d)?;
                let out_shape = s.shape(out).to_vec();
                let t = s.constant(
                    &out_shape,
                    batch.iter().flat_map(|it| it.target.iter().copied()).collect(),
                )?;
                let diff = s.sub(out, t)?;
                let sq = s.square(diff);
                let loss = s.mean(sq);
                if !s.scalar(loss).is_finite() {
                    return Err(Error::Numeric(format!("estimation predictor diverged at epoch {epoch}")));
                }
                let grads = s.backward(loss)?;
                self.store.apply_grads(grads)?;
                for &id in &opt.params {
                    if self.store.get(id).grad().is_none() {
                        let n = self.store.get(id).numel();
                        self.store.get_mut(id).set_grad(vec![0.0; n])?;
                    }
                }
                opt.step(&mut self.store)?;
                self.store.zero_grads();
            }
        }
        Ok(())
    }

    /// Ĥ for each item; `rows` index the frozen feature table.
    pub fn estimate(&self, items: &[ChestItem], rows: &[usize], cfg: &RunConfig) -> Result<Vec<CMatrix>> {
        let layout = cfg.layout();
        let mut out = Vec::with_capacity(items.len());
        for (chunk, idx) in items.chunks(32).zip(rows.chunks(32)) {
            let batch: Vec<&ChestItem> = chunk.iter().collect();
            let mut s = Session::frozen(&self.store);
            let y = self.forward(&mut s, &batch, idx, &layout, cfg.model.d)?;
            let per = layout.num_tokens() * layout.token_dim();
            for (it, tok) in chunk.iter().zip(s.value(y).chunks(per)) {
                out.push(detokenize(tok, &layout)?.scale(it.scale));
            }
        }
        Ok(out)
    }
}

struct ChestSplit {
    train: Vec<ChestItem>,
    /// Per eval SNR.
    eval: Vec<(f64, Vec<ChestItem>)>,
}

fn chest_split(data: &Dataset, cfg: &RunConfig) -> Result<ChestSplit> {
    let ch = &cfg.downstream.chest;
    let (n_a, n_f) = (data.manifest.n_antennas, data.manifest.n_subcarriers);
    let grid = PilotGrid::strided(n_a, n_f, ch.pilot_antenna_stride, ch.pilot_freq_stride);
    let pilots = pilot_symbols(n_a, n_f);
    let (pool, eval_idx) = split_pool(data.len(), cfg);
    let seed = cfg.downstream.seed;
    let train = pool
        .iter()
        .take(ch.n_train)
        .map(|&i| {
            let s = &data.samples[i];
            prepare_item(&s.h, &grid, &pilots, ch.train_snr_db, &mut sample_rng(seed, "chest/train", 0, s.sample_id), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = eval_snrs(cfg)
        .into_iter()
        .map(|snr| {
            let label = format!("chest/eval/{}", snr_label(snr));
            let items = eval_idx
                .iter()
                .take(ch.n_eval)
                .map(|&i| {
                    let s = &data.samples[i];
                    prepare_item(&s.h, &grid, &pilots, snr, &mut sample_rng(seed, &label, 0, s.sample_id), cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((snr, items))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChestSplit { train, eval })
}

pub fn head_config_hash(cfg: &RunConfig) -> String {
    let ch = &cfg.downstream.chest;
    hash_json(&serde_json::json!({
        "task": "chest",
        "predictor_depth": ch.predictor_depth,
        "d": cfg.model.d,
        "heads": cfg.model.heads,
        "epochs": ch.epochs,
        "batch_size": ch.batch_size,
        "lr": ch.lr,
        "n_train": ch.n_train,
        "train_snr_db": ch.train_snr_db,
        "pilot_strides": [ch.pilot_antenna_stride, ch.pilot_freq_stride],
        "seed": cfg.downstream.seed,
    }))
}

fn row(cfg: &RunConfig, variant: &str, snr: f64, value: f64, hash: &str) -> ReportRow {
    ReportRow {
        task: TaskKind::Chest,
        seed: cfg.seed,
        variant: variant.to_string(),
        ratio: 1.0,
        snr_db: snr,
        codebook: None,
        metric: "nmse_db".into(),
        value,
        head_config_hash: hash.to_string(),
    }
}

/// NMSE (dB) per eval SNR for the predictor on the frozen encoder.
pub fn run_estimation_task(enc: &FrozenEncoder, data: &Dataset, cfg: &RunConfig, variant: &str) -> Result<Vec<ReportRow>> {
    let before = enc.hash();
    let split = chest_split(data, cfg)?;
    let train_inputs: Vec<Vec<f64>> = split.train.iter().map(|it| it.enc_tokens.clone()).collect();
    let train_f = enc.features_from_tokens(&train_inputs)?;
    let mut net = ChestNet::frozen(cfg, &train_f)?;
    net.train(&split.train, cfg)?;
    let hash = head_config_hash(cfg);
    let mut rows = Vec::new();
    for (snr, items) in &split.eval {
        let inputs: Vec<Vec<f64>> = items.iter().map(|it| it.enc_tokens.clone()).collect();
        let f = enc.features_from_tokens(&inputs)?;
        let eval_net = ChestNet {
            store: net.store.clone(),
            predictor: net.predictor.clone(),
            backbone: Backbone::Frozen { features: &f },
        };
        let idx: Vec<usize> = (0..items.len()).collect();
        let est = eval_net.estimate(items, &idx, cfg)?;
        let truth: Vec<CMatrix> = items.iter().map(|it| it.h.clone()).collect();
        rows.push(row(cfg, variant, *snr, to_db(nmse(&est, &truth)), &hash));
    }
    if enc.hash() != before {
        return Err(Error::Contract("encoder parameters changed during the estimation task".into()));
    }
    Ok(rows)
}

/// LS and from-scratch supervised twin rows.
pub fn run_estimation_baselines(data: &Dataset, cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let split = chest_split(data, cfg)?;
    let hash = head_config_hash(cfg);
    let mut twin = ChestNet::from_scratch(cfg)?;
    twin.train(&split.train, cfg)?;
    let mut rows = Vec::new();
    for (snr, items) in &split.eval {
        let truth: Vec<CMatrix> = items.iter().map(|it| it.h.clone()).collect();
        let ls: Vec<CMatrix> = items.iter().map(|it| it.h_ls.clone()).collect();
        rows.push(row(cfg, "ls", *snr, to_db(nmse(&ls, &truth)), &hash));
        let idx: Vec<usize> = (0..items.len()).collect();
        let est = twin.estimate(items, &idx, cfg)?;
        rows.push(row(cfg, "supervised", *snr, to_db(nmse(&est, &truth)), &hash));
    }
    Ok(rows)
}
