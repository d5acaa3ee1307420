//! Dataset generation and the versioned binary dataset format.
//!
//! File layout: magic `CSIFMDS1`, version byte, u32 LE manifest length,
//! JSON manifest, then fixed-width little-endian records.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ArrayGeometry, Labels, MultipathParamSet, Path as RayPath};
use crate::cmatrix::CMatrix;
use crate::config::{hash_json, DatasetConfig};
use crate::error::{Error, Result};
use crate::prior::NormStats;

pub const DATASET_MAGIC: &[u8; 8] = b"CSIFMDS1";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub sample_id: u64,
    pub scenario_id: u32,
    /// Low-band CSI, N_a × N_f, noiseless.
    pub h: CMatrix,
    pub params: MultipathParamSet,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u8,
    pub split: Split,
    pub sample_count: usize,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub max_paths: usize,
    pub codebook_sizes: Vec<usize>,
    pub carrier_low: channel::CarrierConfig,
    pub carrier_high: channel::CarrierConfig,
    pub seed: u64,
    pub scenario_ids: Vec<u32>,
    pub scenario_hash: String,
    /// Descriptor normalization, always computed on the training split.
    pub norm_stats: NormStats,
    pub mu_law_per_sample_max_normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<CsiSample>,
}

fn sample_seed(seed: u64, split: Split, id: u64) -> u64 {
    csifm_tensor::derive_seed(seed, &format!("dataset/{}/{id}", split.name()))
}

/// One sample, fully determined by (seed, split, id).
pub fn generate_sample(cfg: &DatasetConfig, seed: u64, split: Split, id: u64) -> Result<CsiSample> {
    let scenarios = match split {
        Split::Test => &cfg.unseen_scenarios,
        _ => &cfg.seen_scenarios,
    };
    let scenario = &scenarios[(id as usize) % scenarios.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, id));
    let params = channel::sample_multipath(&mut rng, scenario, cfg.max_paths, cfg.carrier_low.wavelength())?;
    let geo_lo = ArrayGeometry::half_wavelength(&cfg.carrier_low);
    let geo_hi = ArrayGeometry::half_wavelength(&cfg.carrier_high);
    let h = channel::synthesize_csi(&params, &cfg.carrier_low, &geo_lo);
    let labels = channel::derive_labels(&params, &cfg.carrier_high, &geo_hi, &cfg.codebook_sizes)?;
    Ok(CsiSample {
        sample_id: id,
        scenario_id: scenario.id,
        h,
        params,
        labels,
    })
}

pub fn split_size(cfg: &DatasetConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.n_train,
        Split::Val => cfg.n_val,
        Split::Test => cfg.n_test,
    }
}

/// Generates a split. `norm_stats` must come from the training split; pass
/// `None` when generating the training split itself.
pub fn generate_split(cfg: &DatasetConfig, seed: u64, split: Split, norm_stats: Option<&NormStats>) -> Result<Dataset> {
    let n = split_size(cfg, split);
    let samples = (0..n as u64)
        .map(|id| generate_sample(cfg, seed, split, id))
        .collect::<Result<Vec<_>>>()?;
    let stats = match norm_stats {
        Some(s) => s.clone(),
        None => NormStats::from_params(samples.iter().map(|s| &s.params)),
    };
    let scenarios = match split {
        Split::Test => &cfg.unseen_scenarios,
        _ => &cfg.seen_scenarios,
    };
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        split,
        sample_count: n,
        n_antennas: cfg.carrier_low.n_antennas,
        n_subcarriers: cfg.carrier_low.n_subcarriers,
        max_paths: cfg.max_paths,
        codebook_sizes: cfg.codebook_sizes.clone(),
        carrier_low: cfg.carrier_low.clone(),
        carrier_high: cfg.carrier_high.clone(),
        seed,
        scenario_ids: scenarios.iter().map(|s| s.id).collect(),
        scenario_hash: hash_json(scenarios),
        norm_stats: stats,
        mu_law_per_sample_max_normalized: true,
    };
    Ok(Dataset { manifest, samples })
}

/// Train, val and test splits; val/test reuse the training statistics.
pub fn generate_all(cfg: &DatasetConfig, seed: u64) -> Result<[Dataset; 3]> {
    let train = generate_split(cfg, seed, Split::Train, None)?;
    let stats = train.manifest.norm_stats.clone();
    let val = generate_split(cfg, seed, Split::Val, Some(&stats))?;
    let test = generate_split(cfg, seed, Split::Test, Some(&stats))?;
    Ok([train, val, test])
}

const PATH_FIELDS: usize = 7;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Record byte width for this manifest's dimensions.
    pub fn record_width(m: &Manifest) -> usize {
        8 + 4 + 16 * m.n_antennas * m.n_subcarriers + 4 + m.max_paths * PATH_FIELDS * 8 + 8 + 1 + 16 + 4 * m.codebook_sizes.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.manifest;
        let header = serde_json::to_vec(m).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + header.len() + self.samples.len() * Self::record_width(m));
        out.extend_from_slice(DATASET_MAGIC);
        out.push(DATASET_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.samples {
            out.extend_from_slice(&s.sample_id.to_le_bytes());
            out.extend_from_slice(&s.scenario_id.to_le_bytes());
            for z in s.h.data() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
            out.extend_from_slice(&(s.params.paths.len() as u32).to_le_bytes());
            for slot in 0..m.max_paths {
                let vals = match s.params.paths.get(slot) {
                    Some(p) => [1.0, p.gain.re, p.gain.im, p.delay_s, p.elevation, p.azimuth, p.power],
                    None => [0.0; PATH_FIELDS],
                };
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend_from_slice(&s.params.path_loss_db.to_le_bytes());
            out.push(u8::from(s.params.los));
            out.extend_from_slice(&s.params.position[0].to_le_bytes());
            out.extend_from_slice(&s.params.position[1].to_le_bytes());
            for b in &s.labels.best_beams {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let hlen = r.u32()? as usize;
        let manifest: Manifest =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let width = Self::record_width(&manifest);
        if r.remaining() != width * manifest.sample_count {
            return Err(Error::Format(format!(
                "expected {} record bytes, found {}",
                width * manifest.sample_count,
                r.remaining()
            )));
        }
        let (n_a, n_f) = (manifest.n_antennas, manifest.n_subcarriers);
        let mut samples = Vec::with_capacity(manifest.sample_count);
        for _ in 0..manifest.sample_count {
            let sample_id = r.u64()?;
            let scenario_id = r.u32()?;
            let mut h = Vec::with_capacity(n_a * n_f);
            for _ in 0..n_a * n_f {
                h.push(Complex64::new(r.f64()?, r.f64()?));
            }
            let count = r.u32()? as usize;
            let mut paths = Vec::with_capacity(count);
            for slot in 0..manifest.max_paths {
                let mut v = [0.0; PATH_FIELDS];
                for x in &mut v {
                    *x = r.f64()?;
                }
                if slot < count {
                    if v[0] != 1.0 {
                        return Err(Error::Format(format!("sample {sample_id}: slot {slot} flagged invalid")));
                    }
                    paths.push(RayPath {
                        gain: Complex64::new(v[1], v[2]),
                        delay_s: v[3],
                        elevation: v[4],
                        azimuth: v[5],
                        power: v[6],
                    });
                }
            }
            let path_loss_db = r.f64()?;
            let los = r.take(1)?[0] != 0;
            let position = [r.f64()?, r.f64()?];
            let best_beams = (0..manifest.codebook_sizes.len())
                .map(|_| r.u32())
                .collect::<Result<Vec<_>>>()?;
            samples.push(CsiSample {
                sample_id,
                scenario_id,
                h: CMatrix::from_vec(n_a, n_f, h),
                params: MultipathParamSet {
                    paths,
                    path_loss_db,
                    los,
                    position,
                },
                labels: Labels {
                    los,
                    position,
                    best_beams,
                },
            });
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Index of `size` among the manifest's codebook sizes.
    pub fn codebook_index(&self, size: usize) -> Result<usize> {
        self.manifest
            .codebook_sizes
            .iter()
            .position(|&b| b == size)
            .ok_or_else(|| Error::Config(format!("codebook size {size} not in dataset {:?}", self.manifest.codebook_sizes)))
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<CsiSample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut manifest = self.manifest.clone();
        manifest.sample_count = samples.len();
        Dataset { manifest, samples }
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) use Reader as ByteReader;
