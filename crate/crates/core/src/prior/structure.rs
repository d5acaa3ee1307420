use csifm_tensor::{Init, ParamId, ParamStore, Session, Var};

use crate::error::Result;
use crate::model::layers::Linear;

pub const STRUCTURE_PREFIX: &str = "structure.";

/// SPA output → hidden projection → linear reconstruction → learnable
/// soft-threshold → ReLU.
#[derive(Debug, Clone)]
pub struct StructureHead {
    hidden: Linear,
    recon: Linear,
    pub threshold: ParamId,
    pub out_dim: usize,
}

impl StructureHead {
    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, out_dim: usize, threshold_init: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, "structure.hidden", d, hidden, seed)?,
            recon: Linear::new(store, "structure.recon", hidden, out_dim, seed)?,
            threshold: store.init("structure.threshold", &[out_dim], Init::Constant(threshold_init.max(0.0)), seed)?,
            out_dim,
        })
    }

    /// Pre-threshold reconstruction x for z0 [B, d].
    pub fn pre_threshold(&self, s: &mut Session, z0: Var) -> Result<Var> {
        let h = self.hidden.forward(s, z0)?;
        let h = s.gelu(h);
        self.recon.forward(s, h)
    }

    /// sign(x)·max(|x| − λ, 0) = relu(x − λ) − relu(−x − λ), then ReLU.
    pub fn threshold_and_rectify(&self, s: &mut Session, x: Var) -> Result<Var> {
        let lam = s.param(self.threshold);
        let up = s.sub(x, lam)?;
        let up = s.relu(up);
        let nx = s.neg(x);
        let down = s.sub(nx, lam)?;
        let down = s.relu(down);
        let soft = s.sub(up, down)?;
        Ok(s.relu(soft))
    }

    pub fn forward(&self, s: &mut Session, z0: Var) -> Result<Var> {
        let x = self.pre_threshold(s, z0)?;
        self.threshold_and_rectify(s, x)
    }

    /// Projects thresholds back onto λ ≥ 0.
    pub fn project_thresholds(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.threshold).data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}
