//! Masked-autoencoder backbone with a learnable SPA token.
//!
//! Sequence index 0 is the SPA token; CSI tokens occupy 1..=K. Masking
//! only ever samples from the CSI tokens.

pub mod layers;

use csifm_tensor::{Init, ParamId, ParamStore, Session, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::pipeline::TokenLayout;
use layers::{run_blocks, sinusoidal_table, Block, LayerNorm, Linear, Mlp};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

/// Keep/mask partition of the CSI sequence indices {1..K}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub keep: Vec<usize>,
    pub mask: Vec<usize>,
    /// `restore[t]` is the position of CSI token `t` (0-based) in `keep ++ mask`.
    pub restore: Vec<usize>,
}

pub fn mask_count(k: usize, ratio: f64) -> usize {
    (ratio * k as f64).round() as usize
}

pub fn random_mask<R: Rng + ?Sized>(k: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
    }
    let m = mask_count(k, ratio);
    if m == 0 || m == k {
        return Err(Error::Config(format!("mask count {m} degenerate for K={k}")));
    }
    let mut order: Vec<usize> = (1..=k).collect();
    order.shuffle(rng);
    let keep = order[..k - m].to_vec();
    let mask = order[k - m..].to_vec();
    let mut restore = vec![0; k];
    for (pos, &seq) in order.iter().enumerate() {
        restore[seq - 1] = pos;
    }
    Ok(MaskPlan { keep, mask, restore })
}

fn check_plans(plans: &[MaskPlan], batch: usize) -> Result<()> {
    if plans.len() != batch {
        return Err(Error::Contract(format!("{} mask plans for batch {batch}", plans.len())));
    }
    let (kk, km) = (plans[0].keep.len(), plans[0].mask.len());
    if km == 0 {
        return Err(Error::Contract("empty mask set".into()));
    }
    if plans.iter().any(|p| p.keep.len() != kk || p.mask.len() != km) {
        return Err(Error::Contract("mask plans differ in size across the batch".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub layout: TokenLayout,
    f_in: Mlp,
    row_embed: ParamId,
    seg_embed: ParamId,
    pub spa: ParamId,
    enc_blocks: Vec<Block>,
    dec_embed: Linear,
    pub mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_head: Linear,
}

impl MaeModel {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, layout: TokenLayout, seed: u64) -> Result<Self> {
        let d = cfg.d;
        let dd = cfg.dec_dim;
        let k = layout.num_tokens();
        let f_in = Mlp::new(store, "encoder.f_in", layout.token_dim(), d, d, seed)?;
        let row_embed = store.add(
            "encoder.row_embed",
            Tensor::new(vec![layout.n_a, d], sinusoidal_table(layout.n_a, d))?,
        )?;
        let seg_embed = store.init("encoder.seg_embed", &[layout.segments(), d], Init::Normal(0.02), seed)?;
        let spa = store.init("encoder.spa", &[d], Init::Normal(0.02), seed)?;
        let enc_blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.block{i}"), d, cfg.heads, cfg.ff_mult, seed))
            .collect::<Result<Vec<_>>>()?;
        let dec_embed = Linear::new(store, "decoder.embed", d, dd, seed)?;
        let mask_token = store.init("decoder.mask_token", &[dd], Init::Normal(0.02), seed)?;
        let dec_pos = store.add("decoder.pos", Tensor::new(vec![k, dd], sinusoidal_table(k, dd))?)?;
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| Block::new(store, &format!("decoder.block{i}"), dd, cfg.heads, cfg.ff_mult, seed))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, "decoder.norm", dd, seed)?;
        let dec_head = Linear::new(store, "decoder.head", dd, layout.token_dim(), seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            f_in,
            row_embed,
            seg_embed,
            spa,
            enc_blocks,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_head,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.num_tokens()
    }

    /// z̃_k = f_in(x_k) + e_row(r_k) + e_seg(s_k) for tokens [B, K, 2L].
    pub fn embed_with_labels(&self, s: &mut Session, x: Var, rows: &[usize], segs: &[usize]) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.layout.token_dim() {
            return Err(Error::Contract(format!(
                "token batch shape {shape:?}, expected [B, K, {}]",
                self.layout.token_dim()
            )));
        }
        if rows.len() != shape[1] || segs.len() != shape[1] {
            return Err(Error::Contract("label count differs from token count".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= self.layout.n_a) {
            return Err(Error::Contract(format!("row label {r} outside table of {}", self.layout.n_a)));
        }
        if let Some(&g) = segs.iter().find(|&&g| g >= self.layout.segments()) {
            return Err(Error::Contract(format!(
                "segment label {g} outside table of {}",
                self.layout.segments()
            )));
        }
        let h = self.f_in.forward(s, x)?;
        let er = s.param(self.row_embed);
        let es = s.param(self.seg_embed);
        let pr = s.index_select(er, 0, rows)?;
        let ps = s.index_select(es, 0, segs)?;
        let pos = s.add(pr, ps)?;
        Ok(s.add(h, pos)?)
    }

    pub fn embed(&self, s: &mut Session, x: Var) -> Result<Var> {
        let rows = self.layout.rows();
        let segs = self.layout.segment_labels();
        self.embed_with_labels(s, x, &rows, &segs)
    }

    /// SPA parameter broadcast to [B, 1, d].
    pub fn spa_rows(&self, s: &mut Session, batch: usize) -> Result<Var> {
        let p = s.param(self.spa);
        Ok(s.broadcast_to(p, &[batch, 1, self.cfg.d])?)
    }

    pub fn encoder(&self, s: &mut Session, seq: Var) -> Result<Var> {
        run_blocks(&self.enc_blocks, s, seq)
    }

    /// Full mode: [B, K+1, d] with the SPA output at row 0.
    pub fn encode_full(&self, s: &mut Session, emb: Var) -> Result<Var> {
        let b = s.shape(emb)[0];
        let spa = self.spa_rows(s, b)?;
        let seq = s.concat(&[spa, emb], 1)?;
        self.encoder(s, seq)
    }

    /// Masked mode: SPA plus kept tokens, [B, 1 + |keep|, d].
    pub fn encode_masked(&self, s: &mut Session, emb: Var, plans: &[MaskPlan]) -> Result<Var> {
        let b = s.shape(emb)[0];
        check_plans(plans, b)?;
        let keep: Vec<Vec<usize>> = plans.iter().map(|p| p.keep.iter().map(|&i| i - 1).collect()).collect();
        let visible = s.batch_gather(emb, &keep)?;
        let spa = self.spa_rows(s, b)?;
        let seq = s.concat(&[spa, visible], 1)?;
        self.encoder(s, seq)
    }

    /// Reconstructs the masked tokens, [B, |M|, 2L], in `plan.mask` order.
    pub fn decode(&self, s: &mut Session, enc: Var, plans: &[MaskPlan]) -> Result<Var> {
        let shape = s.shape(enc).to_vec();
        let b = shape[0];
        check_plans(plans, b)?;
        let (kk, km) = (plans[0].keep.len(), plans[0].mask.len());
        if shape[1] != 1 + kk {
            return Err(Error::Contract(format!(
                "decoder got {} rows, expected 1 + {kk} (masked-mode encoding)",
                shape[1]
            )));
        }
        let dd = self.cfg.dec_dim;
        let y = self.dec_embed.forward(s, enc)?;
        let spa_row = s.slice(y, 1, 0, 1)?;
        let visible = s.slice(y, 1, 1, 1 + kk)?;
        let mt = s.param(self.mask_token);
        let fill = s.broadcast_to(mt, &[b, km, dd])?;
        let shuffled = s.concat(&[visible, fill], 1)?;
        let restore: Vec<Vec<usize>> = plans.iter().map(|p| p.restore.clone()).collect();
        let ordered = s.batch_gather(shuffled, &restore)?;
        let pos = s.param(self.dec_pos);
        let tokens = s.add(ordered, pos)?;
        let out = if self.cfg.decoder_sees_spa {
            let seq = s.concat(&[spa_row, tokens], 1)?;
            let seq = run_blocks(&self.dec_blocks, s, seq)?;
            let k = self.num_tokens();
            s.slice(seq, 1, 1, 1 + k)?
        } else {
            run_blocks(&self.dec_blocks, s, tokens)?
        };
        let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.mask.iter().map(|&i| i - 1).collect()).collect();
        let picked = s.batch_gather(out, &masked)?;
        let normed = self.dec_norm.forward(s, picked)?;
        self.dec_head.forward(s, normed)
    }

    /// Masked target tokens [B·|M|·2L] gathered from flattened [B, K, 2L] tokens.
    pub fn gather_masked(&self, tokens: &[f64], plans: &[MaskPlan]) -> Vec<f64> {
        let dim = self.layout.token_dim();
        let k = self.num_tokens();
        let mut out = Vec::new();
        for (b, p) in plans.iter().enumerate() {
            for &seq in &p.mask {
                let start = (b * k + seq - 1) * dim;
                out.extend_from_slice(&tokens[start..start + dim]);
            }
        }
        out
    }

    pub fn encoder_param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(ENCODER_PREFIX).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(depth: usize, sees_spa: bool) -> (ParamStore, MaeModel) {
        let mut cfg = RunConfig::preset("toy").unwrap();
        cfg.model.depth = depth;
        cfg.model.decoder_sees_spa = sees_spa;
        let mut store = ParamStore::new();
        let m = MaeModel::new(&mut store, &cfg.model, cfg.layout(), 3).unwrap();
        (store, m)
    }

    fn tokens(b: usize, m: &MaeModel, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b * m.num_tokens() * m.layout.token_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn mask_partitions_and_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_mask(64, 0.5, &mut rng).unwrap();
        assert_eq!(p.mask.len(), 32);
        let mut all: Vec<usize> = p.keep.iter().chain(&p.mask).copied().collect();
        all.sort();
        assert_eq!(all, (1..=64).collect::<Vec<_>>());
        let order: Vec<usize> = p.keep.iter().chain(&p.mask).copied().collect();
        for t in 0..64 {
            assert_eq!(order[p.restore[t]], t + 1);
        }
    }

    #[test]
    fn degenerate_masks_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(random_mask(2, 0.1, &mut rng), Err(Error::Config(_))));
        assert!(matches!(random_mask(2, 0.9, &mut rng), Err(Error::Config(_))));
        assert!(matches!(random_mask(4, 1.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 17];
        for _ in 0..10_000 {
            for i in random_mask(16, 0.5, &mut rng).unwrap().mask {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / 10_000.0 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn embedding_is_additive_in_segments() {
        let (store, m) = toy(2, true);
        let dim = m.layout.token_dim();
        let x: Vec<f64> = (0..dim).map(|i| i as f64 * 0.1).collect();
        let mut both = x.clone();
        both.extend(&x);
        let mut s = Session::frozen(&store);
        let v = s.constant(&[1, 2, dim], both).unwrap();
        let e = m.embed_with_labels(&mut s, v, &[1, 1], &[0, 1]).unwrap();
        let same = m.embed_with_labels(&mut s, v, &[1, 1], &[0, 0]).unwrap();
        let d = m.cfg.d;
        let seg = store.get(m.seg_embed).data();
        let e = s.value(e);
        for i in 0..d {
            assert!((e[i] - e[d + i] - (seg[i] - seg[d + i])).abs() < 1e-12);
            assert_eq!(s.value(same)[i], s.value(same)[d + i]);
        }
        assert!(matches!(m.embed_with_labels(&mut s, v, &[99, 0], &[0, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn row_table_starts_sinusoidal() {
        let (store, m) = toy(1, true);
        let row0 = &store.get(m.row_embed).data()[..4];
        assert_eq!(row0, &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn depth_zero_encoder_is_identity() {
        let (store, m) = toy(0, true);
        let x = tokens(2, &m, 4);
        let mut s = Session::frozen(&store);
        let v = s.constant(&[2, m.num_tokens(), m.layout.token_dim()], x).unwrap();
        let emb = m.embed(&mut s, v).unwrap();
        let out = m.encode_full(&mut s, emb).unwrap();
        let spa = m.spa_rows(&mut s, 2).unwrap();
        let seq = s.concat(&[spa, emb], 1).unwrap();
        assert_eq!(s.value(out), s.value(seq));
    }

    #[test]
    fn shapes_and_keep_order_equivariance() {
        let (store, m) = toy(2, true);
        let k = m.num_tokens();
        let x = tokens(1, &m, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = random_mask(k, 0.5, &mut rng).unwrap();
        let mut rev = plan.clone();
        rev.keep.reverse();
        let run = |p: &MaskPlan| {
            let mut s = Session::frozen(&store);
            let v = s.constant(&[1, k, m.layout.token_dim()], x.clone()).unwrap();
            let emb = m.embed(&mut s, v).unwrap();
            let enc = m.encode_masked(&mut s, emb, std::slice::from_ref(p)).unwrap();
            assert_eq!(s.shape(enc), &[1, 1 + k / 2, m.cfg.d]);
            s.value(enc).to_vec()
        };
        let a = run(&plan);
        let b = run(&rev);
        let d = m.cfg.d;
        let kk = plan.keep.len();
        assert!((0..d).all(|i| (a[i] - b[i]).abs() < 1e-10));
        for j in 0..kk {
            let jr = kk - 1 - j;
            for i in 0..d {
                assert!((a[(1 + j) * d + i] - b[(1 + jr) * d + i]).abs() < 1e-10);
            }
        }
        let mut s = Session::frozen(&store);
        let v = s.constant(&[1, k, m.layout.token_dim()], x.clone()).unwrap();
        let emb = m.embed(&mut s, v).unwrap();
        let full = m.encode_full(&mut s, emb).unwrap();
        assert_eq!(s.shape(full), &[1, k + 1, m.cfg.d]);
        let enc = m.encode_masked(&mut s, emb, std::slice::from_ref(&plan)).unwrap();
        let out = m.decode(&mut s, enc, std::slice::from_ref(&plan)).unwrap();
        assert_eq!(s.shape(out), &[1, plan.mask.len(), m.layout.token_dim()]);
        assert!(matches!(m.decode(&mut s, full, std::slice::from_ref(&plan)), Err(Error::Contract(_))));
    }

    fn spa_grad(depth: usize, sees: bool) -> Option<Vec<f64>> {
        let (store, m) = toy(depth, sees);
        let k = m.num_tokens();
        let x = tokens(2, &m, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let plans = vec![random_mask(k, 0.5, &mut rng).unwrap(), random_mask(k, 0.5, &mut rng).unwrap()];
        let mut s = Session::new(&store);
        let v = s.constant(&[2, k, m.layout.token_dim()], x).unwrap();
        let emb = m.embed(&mut s, v).unwrap();
        let enc = m.encode_masked(&mut s, emb, &plans).unwrap();
        let out = m.decode(&mut s, enc, &plans).unwrap();
        let sq = s.square(out);
        let l = s.mean(sq);
        let g = s.backward(l).unwrap();
        g.get(m.spa).map(|g| g.to_vec())
    }

    #[test]
    fn spa_gradient_flows_only_through_attention() {
        let none = spa_grad(0, false);
        assert!(none.map_or(true, |g| g.iter().all(|&v| v == 0.0)));
        let some = spa_grad(1, false).unwrap();
        assert!(some.iter().any(|&v| v != 0.0));
    }
}
