//! Small trainable heads on fixed feature vectors.

use csifm_tensor::{AdamWConfig, AdamWState, ParamStore, Session, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Linear, Mlp};
use crate::pipeline::epoch_batches;

const FEATURE_STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    /// One linear unit; the two-class logits are [0, z], so the positive
    /// probability is sigmoid(z).
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub arch: HeadArch,
    pub in_dim: usize,
    /// Class count, or regression width.
    pub out_dim: usize,
    pub classification: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [Vec<f64>]),
}

#[derive(Debug, Clone)]
enum Net {
    Logistic(Linear),
    Mlp(Mlp),
}

/// Per-column mean and std (floored) for z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > FEATURE_STD_FLOOR { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub spec: HeadSpec,
    store: ParamStore,
    net: Net,
    inputs: Standardizer,
    outputs: Option<Standardizer>,
}

fn forward(net: &Net, s: &mut Session, x: Var, rows: usize) -> Result<Var> {
    match net {
        Net::Logistic(l) => {
            let z = l.forward(s, x)?;
            let zero = s.constant(&[rows, 1], vec![0.0; rows])?;
            Ok(s.concat(&[zero, z], 1)?)
        }
        Net::Mlp(m) => m.forward(s, x),
    }
}

/// −mean log softmax(logits)[label].
pub fn cross_entropy(s: &mut Session, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = s.shape(logits).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} outside {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let p = s.softmax_last(logits)?;
    let p = s.add_scalar(p, 1e-12);
    let lp = s.log(p);
    let oh = s.constant(&[b, c], onehot)?;
    let picked = s.mul(lp, oh)?;
    let total = s.sum(picked);
    Ok(s.scale(total, -1.0 / b as f64))
}

impl TrainedHead {
    pub fn fit(spec: &HeadSpec, x: &[Vec<f64>], y: Targets<'_>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Contract("head training set is empty".into()));
        }
        if x.iter().any(|r| r.len() != spec.in_dim) {
            return Err(Error::Contract(format!("feature width differs from {}", spec.in_dim)));
        }
        let mut store = ParamStore::new();
        let net = match spec.arch {
            HeadArch::Logistic => {
                if !spec.classification || spec.out_dim != 2 {
                    return Err(Error::Config("logistic head needs two classes".into()));
                }
                Net::Logistic(Linear::new(&mut store, "head.out", spec.in_dim, 1, spec.seed)?)
            }
            HeadArch::Mlp { hidden } => Net::Mlp(Mlp::new(&mut store, "head.mlp", spec.in_dim, hidden, spec.out_dim, spec.seed)?),
        };
        let inputs = Standardizer::fit(x);
        let xs: Vec<Vec<f64>> = x.iter().map(|r| inputs.apply(r)).collect();
        let (labels, outputs, values) = match y {
            Targets::Classes(l) => {
                if !spec.classification || l.len() != x.len() {
                    return Err(Error::Contract("class targets do not match the head".into()));
                }
                (l.to_vec(), None, Vec::new())
            }
            Targets::Values(v) => {
                if spec.classification || v.len() != x.len() {
                    return Err(Error::Contract("regression targets do not match the head".into()));
                }
                let st = Standardizer::fit(v);
                let vs: Vec<Vec<f64>> = v.iter().map(|r| st.apply(r)).collect();
                (Vec::new(), Some(st), vs)
            }
        };
        let mut opt = AdamWState::for_all(
            &store,
            AdamWConfig {
                lr: spec.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for epoch in 1..=spec.epochs {
            for idx in epoch_batches(xs.len(), spec.batch_size, spec.seed, "head", epoch) {
                let b = idx.len();
                let data: Vec<f64> = idx.iter().flat_map(|&i| xs[i].iter().copied()).collect();
                let mut s = Session::new(&store);
                let xv = s.constant(&[b, spec.in_dim], data)?;
                let out = forward(&net, &mut s, xv, b)?;
                let loss = if spec.classification {
                    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    cross_entropy(&mut s, out, &l)?
                } else {
                    let t: Vec<f64> = idx.iter().flat_map(|&i| values[i].iter().copied()).collect();
                    let tv = s.constant(&[b, spec.out_dim], t)?;
                    let d = s.sub(out, tv)?;
                    let sq = s.square(d);
                    s.mean(sq)
                };
                if !s.scalar(loss).is_finite() {
                    return Err(Error::Numeric(format!("head loss diverged at epoch {epoch}")));
                }
                let grads = s.backward(loss)?;
                store.apply_grads(grads)?;
                opt.step(&mut store)?;
                store.zero_grads();
            }
        }
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
            inputs,
            outputs,
        })
    }

    /// Raw outputs: logits for classifiers, de-standardized values for
    /// regressors.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(256) {
            let b = chunk.len();
            let data: Vec<f64> = chunk.iter().flat_map(|r| self.inputs.apply(r)).collect();
            let mut s = Session::frozen(&self.store);
            let xv = s.constant(&[b, self.spec.in_dim], data)?;
            let y = forward(&self.net, &mut s, xv, b)?;
            let width = s.shape(y)[1];
            for row in s.value(y).chunks(width) {
                out.push(match &self.outputs {
                    Some(st) => st.invert(row),
                    None => row.to_vec(),
                });
            }
        }
        Ok(out)
    }

    pub fn predict_classes(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self
            .predict(x)?
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(arch: HeadArch, in_dim: usize, out_dim: usize, classification: bool) -> HeadSpec {
        HeadSpec {
            arch,
            in_dim,
            out_dim,
            classification,
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            seed: 3,
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let z = s.constant(&[2, 4], vec![0.0; 8]).unwrap();
        let l = cross_entropy(&mut s, z, &[1, 3]).unwrap();
        assert!((s.scalar(l) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn logistic_head_separates_leaked_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let x: Vec<Vec<f64>> = y.iter().map(|&c| vec![c as f64, rng.random::<f64>()]).collect();
        let head = TrainedHead::fit(&spec(HeadArch::Logistic, 2, 2, true), &x, Targets::Classes(&y)).unwrap();
        assert_eq!(head.predict_classes(&x).unwrap(), y);
    }

    #[test]
    fn mlp_regressor_fits_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![10.0 * r[0] + 5.0, -3.0 * r[1]]).collect();
        let mut sp = spec(HeadArch::Mlp { hidden: 32 }, 2, 2, false);
        sp.epochs = 150;
        let head = TrainedHead::fit(&sp, &x, Targets::Values(&y)).unwrap();
        let p = head.predict(&x).unwrap();
        let err: f64 = p.iter().zip(&y).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum::<f64>() / 64.0;
        assert!(err < 0.5, "mean abs error {err}");
    }
}
