use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use csifm_core::checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
use csifm_core::config::RunConfig;
use csifm_core::dataset::{generate_all, Dataset, Split, DATASET_MAGIC};
use csifm_core::downstream::{
    report_csv, run_estimation_baselines, summarize, summary_csv, summary_table, Evaluator, FrozenEncoder, ReportRow,
    TaskKind,
};
use csifm_core::prior::train_param_encoder;
use csifm_core::training::{
    append_jsonl, latest_epoch_checkpoint, write_metrics_csv, Ablation, EpochMetrics, Precomputed, Pretrainer, StageOptions,
    StagePlan,
};
use csifm_core::{Error, Result};

use crate::{AblationArg, StageArg, TaskArg, OUTPUT_ROOT_ENV};

/// Artifact locations under the output root.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn dataset(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.csids", split.name()))
    }

    fn manifest(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.manifest.json", split.name()))
    }

    fn param_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("param.ck")
    }

    fn stage_dir(&self, ablation: Ablation) -> PathBuf {
        self.root.join("pretrain").join(ablation.name())
    }

    fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Resolves the layered config, applies the output-root override and
/// echoes the resolved config and its hash into the run directory.
fn load_config(path: &Path) -> Result<(RunConfig, RunDir)> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })?;
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() {
            cfg.output_dir = root;
        }
    }
    let dirs = RunDir {
        root: PathBuf::from(&cfg.output_dir),
    };
    create_dir(&dirs.root)?;
    write_file(&dirs.root.join("resolved_config.toml"), cfg.to_toml())?;
    write_file(&dirs.root.join("config_hash.txt"), format!("{}\n", cfg.hash()))?;
    Ok((cfg, dirs))
}

fn read_dataset(dirs: &RunDir, split: Split) -> Result<Dataset> {
    let path = dirs.dataset(split);
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "{} is missing; run `csifm generate` first",
            path.display()
        )));
    }
    Dataset::read(&path)
}

pub fn generate(config: &Path) -> Result<()> {
    let (cfg, dirs) = load_config(config)?;
    create_dir(&dirs.root.join("data"))?;
    let splits = generate_all(&cfg.dataset, cfg.seed)?;
    for ds in &splits {
        let split = ds.manifest.split;
        ds.write(&dirs.dataset(split))?;
        let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
        write_file(&dirs.manifest(split), manifest)?;
        println!(
            "{:<5} {:>6} samples  scenarios {:?}  -> {}",
            split.name(),
            ds.len(),
            ds.manifest.scenario_ids,
            dirs.dataset(split).display()
        );
    }
    Ok(())
}

fn ablation_of(arg: AblationArg) -> Ablation {
    match arg {
        AblationArg::None => Ablation::None,
        AblationArg::NoSa => Ablation::NoSa,
        AblationArg::NoPa => Ablation::NoPa,
        AblationArg::PlainMae => Ablation::PlainMae,
    }
}

fn check_hash(header: &CheckpointHeader, cfg: &RunConfig, path: &Path) -> Result<()> {
    if header.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was produced by config {} but the current config hashes to {}; use a fresh output directory",
            path.display(),
            header.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

fn run_param(cfg: &RunConfig, dirs: &RunDir, train: &Dataset) -> Result<()> {
    let dir = dirs.root.join("pretrain");
    create_dir(&dir)?;
    let log = dir.join("param_metrics.jsonl");
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let epochs = cfg.prior.epochs;
    let (store, _, history) = train_param_encoder(train, &cfg.prior, cfg.seed, |_, m| {
        eprintln!("[param] epoch {:>3}/{epochs}  loss {:.5}  ({:.1}s)", m.epoch, m.loss, m.wall_s);
        append_jsonl(&log, m)
    })?;
    let header = CheckpointHeader {
        stage: "param".into(),
        epoch: history.len(),
        step: 0,
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        meta: serde_json::json!({ "kind": "parameter_encoder" }),
    };
    let path = dirs.param_checkpoint();
    Checkpoint::capture(header, &store, &[], None).write(&path)?;
    println!("param encoder -> {}", path.display());
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Drops log records of `stage` past `keep_through` (resume or restart).
fn trim_metrics(path: &Path, stage: &str, keep_through: usize) -> Result<()> {
    let kept: Vec<EpochMetrics> = read_metrics(path)?
        .into_iter()
        .filter(|m| m.stage != stage || m.epoch <= keep_through)
        .collect();
    let mut text = String::new();
    for m in &kept {
        text.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        text.push('\n');
    }
    write_file(path, text)
}

fn run_mae_stage(cfg: &RunConfig, dirs: &RunDir, plan: &StagePlan, ablation: Ablation, name: &str, train: &Dataset) -> Result<()> {
    let spec = plan.stage(name)?.clone();
    let dir = dirs.stage_dir(ablation);
    create_dir(&dir)?;
    let final_path = dir.join(format!("{name}.ck"));
    if final_path.exists() {
        let ck = Checkpoint::read(&final_path)?;
        check_hash(&ck.header, cfg, &final_path)?;
        println!("{name} ({ablation}) already complete: {}", final_path.display());
        return Ok(());
    }
    let mut p = Pretrainer::for_plan(cfg, plan)?;
    if name == "stage2" {
        let s1 = dir.join("stage1.ck");
        if !s1.exists() {
            return Err(Error::Prerequisite(format!(
                "stage2 needs the stage1 checkpoint {}; run `--stage stage1` first",
                s1.display()
            )));
        }
        let ck = Checkpoint::read(&s1)?;
        check_hash(&ck.header, cfg, &s1)?;
        p.restore(&ck)?;
    }
    if spec.weights.pa > 0.0 {
        let path = dirs.param_checkpoint();
        if !path.exists() {
            return Err(Error::Prerequisite(format!(
                "{name} needs the frozen parameter encoder {}; run `--stage param` first",
                path.display()
            )));
        }
        let ck = Checkpoint::read(&path)?;
        check_hash(&ck.header, cfg, &path)?;
        p.attach_teacher(&ck)?;
    }
    let log = dir.join("metrics.jsonl");
    let (start, optimizer) = match latest_epoch_checkpoint(&dir, name) {
        Some((epoch, path)) => {
            let ck = Checkpoint::read(&path)?;
            check_hash(&ck.header, cfg, &path)?;
            let opt = p.restore(&ck)?;
            eprintln!("[{name}] resuming after epoch {epoch} from {}", path.display());
            (epoch, opt)
        }
        None => (0, None),
    };
    trim_metrics(&log, name, start)?;
    let pre = Precomputed::new(train, cfg)?;
    let opts = StageOptions {
        out_dir: Some(dir.clone()),
        start_epoch: start,
        resume_optimizer: optimizer,
        stop_after: None,
        meta: serde_json::json!({ "ablation": ablation.name(), "variant": ablation.variant() }),
        verbose: true,
    };
    p.run_stage(train, &pre, &spec, opts)?;
    if !final_path.exists() {
        // Interrupted between the last epoch checkpoint and the final copy.
        let last = epoch_path(&dir, name, spec.epochs);
        std::fs::copy(&last, &final_path).map_err(|e| Error::io(&final_path, e))?;
    }
    write_metrics_csv(&dir.join("metrics.csv"), &read_metrics(&log)?)?;
    println!("{name} ({ablation}) -> {}", final_path.display());
    Ok(())
}

fn epoch_path(dir: &Path, stage: &str, epoch: usize) -> PathBuf {
    csifm_core::training::epoch_checkpoint_path(dir, stage, epoch)
}

pub fn pretrain(config: &Path, stage: StageArg, ablation: AblationArg) -> Result<()> {
    let (cfg, dirs) = load_config(config)?;
    let ablation = ablation_of(ablation);
    let plan = StagePlan::from_config(&cfg, ablation);
    let train = read_dataset(&dirs, Split::Train)?;
    match stage {
        StageArg::Param => run_param(&cfg, &dirs, &train),
        StageArg::Stage1 => run_mae_stage(&cfg, &dirs, &plan, ablation, "stage1", &train),
        StageArg::Stage2 => run_mae_stage(&cfg, &dirs, &plan, ablation, "stage2", &train),
        StageArg::All => {
            if plan.needs_teacher() {
                let path = dirs.param_checkpoint();
                let reusable = path.exists() && Checkpoint::read(&path)?.header.config_hash == cfg.hash();
                if reusable {
                    println!("param encoder already trained: {}", path.display());
                } else {
                    run_param(&cfg, &dirs, &train)?;
                }
            } else {
                println!("param stage skipped: ablation {ablation} does not use the parameter encoder");
            }
            run_mae_stage(&cfg, &dirs, &plan, ablation, "stage1", &train)?;
            run_mae_stage(&cfg, &dirs, &plan, ablation, "stage2", &train)
        }
    }
}

fn variant_name(ck: &Checkpoint, path: &Path) -> String {
    ck.header
        .meta
        .get("variant")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "encoder".into()))
}

/// Every evaluation cell must use the same head configuration for all
/// compared encoders.
fn check_parity(rows: &[ReportRow]) -> Result<()> {
    let mut cells: BTreeMap<(String, u64, u64, Option<usize>, String), &str> = BTreeMap::new();
    for r in rows {
        if matches!(r.variant.as_str(), "ls" | "supervised") {
            continue;
        }
        let key = (r.task.name().to_string(), r.ratio.to_bits(), r.snr_db.to_bits(), r.codebook, r.metric.clone());
        match cells.get(&key) {
            Some(h) if *h != r.head_config_hash => {
                return Err(Error::Contract(format!(
                    "head configuration differs between encoders for {} ratio {} snr {}",
                    r.task, r.ratio, r.snr_db
                )))
            }
            Some(_) => {}
            None => {
                cells.insert(key, &r.head_config_hash);
            }
        }
    }
    Ok(())
}

pub fn eval(config: &Path, task: TaskArg, encoders: &[PathBuf]) -> Result<()> {
    let (cfg, dirs) = load_config(config)?;
    let test = read_dataset(&dirs, Split::Test)?;
    let tasks: Vec<TaskKind> = match task {
        TaskArg::Los => vec![TaskKind::Los],
        TaskArg::Pos => vec![TaskKind::Pos],
        TaskArg::Beam => vec![TaskKind::Beam],
        TaskArg::Chest => vec![TaskKind::Chest],
        TaskArg::All => TaskKind::ALL.to_vec(),
    };
    let mut loaded = Vec::with_capacity(encoders.len());
    for path in encoders {
        let ck = Checkpoint::read(path)?;
        let mut name = variant_name(&ck, path);
        if loaded.iter().any(|(n, _): &(String, FrozenEncoder)| *n == name) {
            name = format!("{name}_{}", loaded.len());
        }
        loaded.push((name, FrozenEncoder::from_checkpoint(&cfg, &ck)?));
    }
    let mut evaluators = loaded
        .iter()
        .map(|(name, enc)| Evaluator::new(enc, &test, &cfg, name))
        .collect::<Result<Vec<_>>>()?;
    let out = dirs.eval_dir();
    create_dir(&out)?;
    let mut all = Vec::new();
    for t in tasks {
        let mut rows = Vec::new();
        for ev in evaluators.iter_mut() {
            eprintln!("[eval] {t} on {}", ev.variant);
            rows.extend(ev.run(t)?);
        }
        if t == TaskKind::Chest {
            eprintln!("[eval] chest baselines (LS, supervised from scratch)");
            rows.extend(run_estimation_baselines(&test, &cfg)?);
        }
        check_parity(&rows)?;
        let path = out.join(format!("{t}.csv"));
        write_file(&path, report_csv(&rows))?;
        println!("{t} -> {}", path.display());
        all.extend(rows);
    }
    let summary = summarize(&all);
    write_file(&out.join("summary.csv"), summary_csv(&summary))?;
    print!("{}", summary_table(&summary));
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 8];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    if &magic == DATASET_MAGIC {
        let ds = Dataset::read(path)?;
        println!("dataset {}", path.display());
        println!("{}", serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes"));
        let los = ds.samples.iter().filter(|s| s.labels.los).count();
        println!("samples {}  LoS {}  NLoS {}", ds.len(), los, ds.len() - los);
    } else if &magic == CHECKPOINT_MAGIC {
        let ck = Checkpoint::read(path)?;
        let h = &ck.header;
        println!("checkpoint {}", path.display());
        println!("stage {}  epoch {}  step {}  config {}", h.stage, h.epoch, h.step, h.config_hash);
        println!("meta {}", h.meta);
        let total: usize = ck.params.iter().map(|p| p.data.len()).sum();
        println!("{} tensors, {} scalars", ck.params.len(), total);
        for p in &ck.params {
            println!("  {:<40} {:?}", p.name, p.shape);
        }
        match &ck.optimizer {
            Some(o) => println!("optimizer: AdamW step {} over {} tensors", o.step, o.moments.len()),
            None => println!("optimizer: none"),
        }
    } else {
        return Err(Error::Format(format!("{} is neither a dataset nor a checkpoint", path.display())));
    }
    Ok(())
}
