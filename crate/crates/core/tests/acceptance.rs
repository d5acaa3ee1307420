//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test -p csifm-core --test acceptance` runs everything. Set
//! `CSIFM_ACCEPT=1,2,5` to run a subset.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use csifm_core::channel::{array_response, synthesize_csi, ArrayGeometry, CarrierConfig, MultipathParamSet, Path as Ray};
use csifm_core::checkpoint::{param_hash, Checkpoint, CheckpointHeader};
use csifm_core::cmatrix::CMatrix;
use csifm_core::config::RunConfig;
use csifm_core::dataset::{generate_all, generate_split, Dataset, Split};
use csifm_core::downstream::estimation::{ls_estimate, observe, pilot_symbols, run_estimation_task, PilotGrid};
use csifm_core::downstream::metrics::nmse;
use csifm_core::downstream::{eval_snrs, mean_sem, Evaluator, FrozenEncoder};
use csifm_core::model::{mask_count, random_mask, DECODER_PREFIX, ENCODER_PREFIX};
use csifm_core::pipeline::{detokenize, fft2, mu_law, structure_target, tokenize, TokenLayout};
use csifm_core::prior::{train_param_encoder, PARAM_PREFIX};
use csifm_core::training::losses::total_loss;
use csifm_core::training::{prepare_batch, Ablation, EpochMetrics, Precomputed, Pretrainer, StageOptions, StagePlan};
use csifm_tensor::check::{max_relative_error, numeric_gradient};
use csifm_tensor::{ParamStore, Session, Tape, Tensor, Var};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;
const PRIMITIVE_FLOOR: f64 = 1e-3;
const LOSS_TOL: f64 = 1e-4;
const LOSS_FLOOR: f64 = 1e-5;
const LOSS_MAX_PARAMS: usize = 5000;
const FIXTURE_TOL: f64 = 1e-9;
const MASK_DRAWS: usize = 100_000;
const SPARSITY_BAR: f64 = 0.999;
const LS_SAMPLES: usize = 1000;
const LS_TOL: f64 = 0.05;
const ABLATION_SEEDS: u64 = 5;
const LOW_RATIO: f64 = 0.1;
const LOW_SNR_DB: f64 = 0.0;
/// C_μ(0.5) at μ = 255, evaluated offline as ln(128.5)/ln(256).
const MU_LAW_HALF: f64 = 0.8757030686492349;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn note(msg: impl AsRef<str>) {
    println!("      {}", msg.as_ref());
}

// ---------------------------------------------------------------- shared

/// Smallest model that still exercises every loss component.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::preset("toy").unwrap();
    cfg.dataset.n_train = 16;
    cfg.dataset.carrier_low.n_antennas = 4;
    cfg.dataset.carrier_low.n_subcarriers = 8;
    cfg.pipeline.patch_len = 4;
    cfg.model.d = 8;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.model.dec_depth = 1;
    cfg.model.dec_dim = 8;
    cfg.prior.slot_dim = 8;
    cfg.prior.target_dim = 8;
    cfg.prior.structure_hidden = 8;
    cfg.prior.epochs = 1;
    cfg.prior.batch_size = 16;
    cfg.training.batch_size = 8;
    cfg.training.stage1_epochs = 1;
    cfg.training.stage2_epochs = 1;
    cfg
}

fn teacher_checkpoint(cfg: &RunConfig, train: &Dataset) -> (Checkpoint, Vec<f64>) {
    let (store, _, history) = train_param_encoder(train, &cfg.prior, cfg.seed, |_, _| Ok(())).unwrap();
    let header = CheckpointHeader {
        stage: "param".into(),
        epoch: history.len(),
        step: 0,
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg).unwrap(),
        meta: serde_json::json!({ "kind": "parameter_encoder" }),
    };
    let losses = history.iter().map(|m| m.loss).collect();
    (Checkpoint::capture(header, &store, &[], None), losses)
}

/// Stage-II trainer with the teacher attached.
fn stage_two_trainer(cfg: &RunConfig, train: &Dataset) -> (Pretrainer, StagePlan) {
    let plan = StagePlan::from_config(cfg, Ablation::None);
    let mut p = Pretrainer::for_plan(cfg, &plan).unwrap();
    let (ck, _) = teacher_checkpoint(cfg, train);
    p.attach_teacher(&ck).unwrap();
    (p, plan)
}

struct PretrainRun {
    teacher_hash: Option<String>,
    prior_losses: Vec<f64>,
    stages: Vec<(String, Vec<EpochMetrics>, String)>,
    trainer: Pretrainer,
}

impl PretrainRun {
    fn encoder(&self) -> FrozenEncoder {
        let ck = self.trainer.checkpoint("stage2", 0, None, &serde_json::Value::Null);
        FrozenEncoder::from_checkpoint(&self.trainer.cfg, &ck).unwrap()
    }
}

/// Prior (when needed), Stage I and Stage II in one process, mirroring the
/// CLI's `pretrain --stage all`.
fn pretrain(cfg: &RunConfig, ablation: Ablation, train: &Dataset, teacher: Option<&(Checkpoint, Vec<f64>)>, out: Option<&Path>, verbose: bool) -> PretrainRun {
    let plan = StagePlan::from_config(cfg, ablation);
    let mut p = Pretrainer::for_plan(cfg, &plan).unwrap();
    let (mut teacher_hash, mut prior_losses) = (None, Vec::new());
    if plan.needs_teacher() {
        let owned;
        let (ck, losses) = match teacher {
            Some(t) => t,
            None => {
                owned = teacher_checkpoint(cfg, train);
                &owned
            }
        };
        p.attach_teacher(ck).unwrap();
        teacher_hash = Some(param_hash(&p.store, PARAM_PREFIX));
        prior_losses = losses.clone();
    }
    let pre = Precomputed::new(train, cfg).unwrap();
    let mut stages = Vec::new();
    for spec in &plan.stages {
        let opts = StageOptions {
            out_dir: out.map(|d| d.join(ablation.name())),
            meta: serde_json::json!({ "ablation": ablation.name(), "variant": ablation.variant() }),
            verbose,
            ..Default::default()
        };
        let m = p.run_stage(train, &pre, spec, opts).unwrap();
        let student: String = [ENCODER_PREFIX, DECODER_PREFIX, "structure.", "align."]
            .iter()
            .map(|pfx| param_hash(&p.store, pfx))
            .collect::<Vec<_>>()
            .join(":");
        stages.push((spec.name.clone(), m, student));
    }
    PretrainRun {
        teacher_hash,
        prior_losses,
        stages,
        trainer: p,
    }
}

// ------------------------------------------------------------ criterion 1

#[derive(Clone, Copy)]
enum Domain {
    Uniform,
    Positive,
    OffKink,
}

fn draw(rng: &mut ChaCha8Rng, n: usize, dom: Domain) -> Vec<f64> {
    (0..n)
        .map(|_| match dom {
            Domain::Uniform => rng.random_range(-1.0..1.0),
            Domain::Positive => rng.random_range(0.5..2.0),
            Domain::OffKink => {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            }
        })
        .collect()
}

type Op = Box<dyn Fn(&mut Tape, Var) -> Var>;

fn constant(t: &mut Tape, c: &Tensor) -> Var {
    t.constant(c.shape(), c.data().to_vec()).unwrap()
}

/// (name, input shape, input domain, op) for every differentiable primitive.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, Domain, Op)> {
    let mut t = |shape: &[usize], dom: Domain| Tensor::new(shape.to_vec(), draw(rng, shape.iter().product(), dom)).unwrap();
    let row = t(&[4], Domain::Positive);
    let col = t(&[3, 1], Domain::Positive);
    let big = t(&[3, 4], Domain::Positive);
    let rhs = t(&[4, 2], Domain::Uniform);
    let lhs3 = t(&[2, 3, 4], Domain::Uniform);
    let rhs3 = t(&[2, 4, 3], Domain::Uniform);
    let other = t(&[2, 2, 3], Domain::Uniform);
    let ln_x = t(&[2, 8], Domain::Uniform);
    let gain = t(&[8], Domain::Positive);
    let bias = t(&[8], Domain::Uniform);
    let mut cases: Vec<(&'static str, Vec<usize>, Domain, Op)> = vec![
        ("exp", vec![3, 4], Domain::Uniform, Box::new(|t, x| t.exp(x))),
        ("log", vec![3, 4], Domain::Positive, Box::new(|t, x| t.log(x))),
        ("neg", vec![5], Domain::Uniform, Box::new(|t, x| t.neg(x))),
        ("powf", vec![5], Domain::Positive, Box::new(|t, x| t.powf(x, 2.5))),
        ("square", vec![5], Domain::Uniform, Box::new(|t, x| t.square(x))),
        ("relu", vec![6], Domain::OffKink, Box::new(|t, x| t.relu(x))),
        ("gelu", vec![2, 5], Domain::Uniform, Box::new(|t, x| t.gelu(x))),
        ("scale", vec![4], Domain::Uniform, Box::new(|t, x| t.scale(x, -1.7))),
        ("add_scalar", vec![4], Domain::Uniform, Box::new(|t, x| t.add_scalar(x, 0.3))),
        ("sigmoid", vec![4], Domain::Uniform, Box::new(|t, x| t.sigmoid(x).unwrap())),
        ("softmax axis0", vec![3, 4], Domain::Uniform, Box::new(|t, x| t.softmax(x, 0).unwrap())),
        ("softmax last", vec![3, 4], Domain::Uniform, Box::new(|t, x| t.softmax_last(x).unwrap())),
        ("l2_normalize", vec![3, 4], Domain::Uniform, Box::new(|t, x| t.l2_normalize(x).unwrap())),
        ("slice", vec![2, 5, 3], Domain::Uniform, Box::new(|t, x| t.slice(x, 1, 1, 4).unwrap())),
        ("reshape", vec![2, 6], Domain::Uniform, Box::new(|t, x| t.reshape(x, &[3, 4]).unwrap())),
        ("transpose", vec![2, 3, 4], Domain::Uniform, Box::new(|t, x| t.transpose(x).unwrap())),
        ("permute", vec![2, 3, 4], Domain::Uniform, Box::new(|t, x| t.permute(x, &[1, 2, 0]).unwrap())),
        ("broadcast_to", vec![1, 3], Domain::Uniform, Box::new(|t, x| t.broadcast_to(x, &[4, 3]).unwrap())),
        ("sum", vec![2, 3], Domain::Uniform, Box::new(|t, x| t.sum(x))),
        ("mean", vec![2, 3], Domain::Uniform, Box::new(|t, x| t.mean(x))),
        ("sum_axis", vec![2, 3, 4], Domain::Uniform, Box::new(|t, x| t.sum_axis(x, 1).unwrap())),
        ("mean_axis", vec![2, 3, 4], Domain::Uniform, Box::new(|t, x| t.mean_axis(x, 2).unwrap())),
        ("index_select", vec![4, 3], Domain::Uniform, Box::new(|t, x| t.index_select(x, 0, &[3, 0, 3, 1]).unwrap())),
        (
            "batch_gather",
            vec![2, 4, 3],
            Domain::Uniform,
            Box::new(|t, x| t.batch_gather(x, &[vec![1, 3], vec![0, 0]]).unwrap()),
        ),
        (
            "concat",
            vec![2, 1, 3],
            Domain::Uniform,
            Box::new(move |t, x| {
                let o = constant(t, &other);
                t.concat(&[o, x, o], 1).unwrap()
            }),
        ),
        ("matmul lhs", vec![3, 4], Domain::Uniform, {
            let rhs = rhs.clone();
            Box::new(move |t, x| {
                let b = constant(t, &rhs);
                t.matmul(x, b).unwrap()
            })
        }),
        (
            "matmul shared rhs",
            vec![4, 2],
            Domain::Uniform,
            Box::new(move |t, x| {
                let a = constant(t, &lhs3);
                t.matmul(a, x).unwrap()
            }),
        ),
        (
            "batched matmul",
            vec![2, 3, 4],
            Domain::Uniform,
            Box::new(move |t, x| {
                let b = constant(t, &rhs3);
                t.matmul(x, b).unwrap()
            }),
        ),
        ("layer_norm x", vec![2, 8], Domain::Uniform, {
            let (g, b) = (gain.clone(), bias.clone());
            Box::new(move |t, x| {
                let (gv, bv) = (constant(t, &g), constant(t, &b));
                t.layer_norm(x, gv, bv, 1e-5).unwrap()
            })
        }),
        ("layer_norm gain", vec![8], Domain::Positive, {
            let (xs, b) = (ln_x.clone(), bias.clone());
            Box::new(move |t, g| {
                let (xv, bv) = (constant(t, &xs), constant(t, &b));
                t.layer_norm(xv, g, bv, 1e-5).unwrap()
            })
        }),
        ("layer_norm bias", vec![8], Domain::Uniform, {
            let (xs, g) = (ln_x, gain);
            Box::new(move |t, b| {
                let (xv, gv) = (constant(t, &xs), constant(t, &g));
                t.layer_norm(xv, gv, b, 1e-5).unwrap()
            })
        }),
    ];
    for (i, name) in ["add", "sub", "mul", "div"].into_iter().enumerate() {
        let apply = move |t: &mut Tape, a: Var, b: Var| match i {
            0 => t.add(a, b).unwrap(),
            1 => t.sub(a, b).unwrap(),
            2 => t.mul(a, b).unwrap(),
            _ => t.div(a, b).unwrap(),
        };
        let (r, c, g) = (row.clone(), col.clone(), big.clone());
        cases.push((name, vec![3, 4], Domain::Positive, Box::new(move |t, x| {
            let b = constant(t, &r);
            apply(t, x, b)
        })));
        cases.push((name, vec![3, 4], Domain::Positive, Box::new(move |t, x| {
            let b = constant(t, &c);
            apply(t, x, b)
        })));
        cases.push((name, vec![4], Domain::Positive, Box::new(move |t, x| {
            let a = constant(t, &g);
            apply(t, a, x)
        })));
    }
    cases
}

/// Relative error of reverse-mode vs central differences for sum(op(x)·w).
fn primitive_error(shape: &[usize], dom: Domain, op: &Op, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = draw(&mut rng, shape.iter().product(), dom);
    let weights_seed = seed ^ 0x5eed;
    let eval = |x: &[f64], grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut t = Tape::new();
        let xv = t.variable(shape, x.to_vec()).unwrap();
        let y = op(&mut t, xv);
        let ys = t.shape(y).to_vec();
        let n = t.value(y).len();
        let w = draw(&mut ChaCha8Rng::seed_from_u64(weights_seed), n, Domain::Uniform);
        let wv = t.constant(&ys, w).unwrap();
        let p = t.mul(y, wv).unwrap();
        let l = t.sum(p);
        let v = t.scalar(l);
        (v, grad.then(|| t.backward(l).unwrap().get(xv).unwrap().to_vec()))
    };
    let analytic = eval(&x0, true).1.unwrap();
    let numeric = numeric_gradient(|x| eval(x, false).0, &x0, FD_STEP);
    max_relative_error(&analytic, &numeric, PRIMITIVE_FLOOR)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        for (name, shape, dom, op) in primitive_cases(&mut rng) {
            let e = primitive_error(&shape, dom, &op, 100 * seed + checks as u64 % 97);
            checks += 1;
            if e > worst.0 {
                worst = (e, format!("{name} (seed {seed})"));
            }
        }
    }
    let prim_ok = worst.0 < PRIMITIVE_TOL;
    note(format!("{checks} primitive checks, worst {:.2e} at {}", worst.0, worst.1));

    let cfg = tiny_config();
    let train = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
    let pre = Precomputed::new(&train, &cfg).unwrap();
    let (mut p, plan) = stage_two_trainer(&cfg, &train);
    let w = plan.stages[1].weights;
    let batch = prepare_batch(&train, &(0..8).collect::<Vec<_>>(), &cfg, "stage2", 1).unwrap();
    let ids = p.trainable_ids(&w);
    let n_params: usize = ids.iter().map(|&id| p.store.get(id).numel()).sum();
    let analytic: Vec<f64> = {
        let mut s = p.session();
        let (l, _) = p.compute_loss(&mut s, &batch, &pre, &w).unwrap();
        let g = s.backward(l).unwrap();
        ids.iter()
            .flat_map(|&id| match g.get(id) {
                Some(v) => v.to_vec(),
                None => vec![0.0; p.store.get(id).numel()],
            })
            .collect()
    };
    let mut numeric = Vec::with_capacity(n_params);
    for &id in &ids {
        for j in 0..p.store.get(id).numel() {
            let orig = p.store.get(id).data()[j];
            let mut at = |v: f64| {
                p.store.get_mut(id).data_mut()[j] = v;
                let mut s = p.session();
                let (l, _) = p.compute_loss(&mut s, &batch, &pre, &w).unwrap();
                s.scalar(l)
            };
            let d = (at(orig + FD_STEP) - at(orig - FD_STEP)) / (2.0 * FD_STEP);
            p.store.get_mut(id).data_mut()[j] = orig;
            numeric.push(d);
        }
    }
    let loss_err = max_relative_error(&analytic, &numeric, LOSS_FLOOR);
    let elapsed = started.elapsed().as_secs_f64();
    note(format!(
        "Stage-II loss over {n_params} trainable scalars: max rel err {loss_err:.2e} (floor {LOSS_FLOOR:e})"
    ));
    let pass = prim_ok && loss_err < LOSS_TOL && n_params <= LOSS_MAX_PARAMS && elapsed < 60.0;
    Outcome::new(
        pass,
        format!(
            "autodiff: primitives {:.1e} < {PRIMITIVE_TOL:e}, Stage-II loss {loss_err:.1e} < {LOSS_TOL:e} on {n_params} params, {elapsed:.1}s",
            worst.0
        ),
    )
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let mu = 255.0;
    let mut fails = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > FIXTURE_TOL {
            fails.push(format!("{name}: {got} vs {want}"));
        }
    };
    check("C(0)", mu_law(0.0, mu), 0.0);
    check("C(1)", mu_law(1.0, mu), 1.0);
    check("C(0.5)", mu_law(0.5, mu), MU_LAW_HALF);
    check("C(0.5) direct", mu_law(0.5, mu), (1.0 + mu * 0.5).ln() / (1.0 + mu).ln());

    // Two elements half a wavelength apart on x, broadside along +x.
    let lambda = 0.1;
    let geo = ArrayGeometry::ula_x(2, lambda / 2.0, lambda);
    let a = array_response(PI / 2.0, 0.0, &geo);
    let r = 1.0 / 2f64.sqrt();
    for (m, want) in [(0, Complex64::new(r, 0.0)), (1, Complex64::new(-r, 0.0))] {
        check(&format!("a[{m}].re"), a[m].re, want.re);
        check(&format!("a[{m}].im"), a[m].im, want.im);
    }

    // Single path: entry (m, n) = α·e^{−j2π f_n τ}·e^{−jπ m sinθ cosφ}/√N_a.
    let carrier = CarrierConfig {
        center_hz: 3.5e9,
        spacing_hz: 1.25e6,
        n_subcarriers: 16,
        n_antennas: 8,
    };
    let geo = ArrayGeometry::half_wavelength(&carrier);
    let (alpha, tau, theta, phi) = (Complex64::from_polar(0.7, 0.4), 137e-9, 1.1, 0.6);
    let params = MultipathParamSet {
        paths: vec![Ray::new(alpha, tau, theta, phi)],
        path_loss_db: 80.0,
        los: true,
        position: [10.0, 5.0],
    };
    let h = synthesize_csi(&params, &carrier, &geo);
    let mut ramp_err = 0.0f64;
    for m in 0..8 {
        for n in 0..16 {
            let f = 3.5e9 + (n as f64 - 8.0) * 1.25e6;
            let phase = -2.0 * PI * f * tau - PI * m as f64 * theta.sin() * phi.cos();
            let want = alpha * Complex64::from_polar(1.0 / 8f64.sqrt(), phase);
            ramp_err = ramp_err.max((h.get(m, n) - want).norm());
        }
    }
    check("phase ramp", ramp_err, 0.0);

    let cfg = RunConfig::defaults();
    let w1 = cfg.training.stage1_weights;
    let w2 = cfg.training.stage2_weights;
    check("λ stage I mae", w1.mae, 1.0);
    check("λ stage I sa", w1.sa, 0.2);
    check("λ stage II mae", w2.mae, 1.0);
    check("λ stage II sa", w2.sa, 0.05);
    check("λ stage II pa", w2.pa, 0.1);
    let plan = StagePlan::from_config(&cfg, Ablation::None);
    let store = ParamStore::new();
    let mut totals = Vec::new();
    for (spec, pa) in plan.stages.iter().zip([false, true]) {
        let mut s = Session::frozen(&store);
        let one = |s: &mut Session| s.constant(&[], vec![1.0]).unwrap();
        let (m, a) = (one(&mut s), one(&mut s));
        let p = pa.then(|| one(&mut s));
        let t = total_loss(&mut s, Some(m), Some(a), p, &spec.weights).unwrap();
        totals.push(s.scalar(t));
    }
    check("stage I total", totals[0], 1.2);
    check("stage II total", totals[1], 1.15);
    Outcome::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!(
                "formula fixtures within {FIXTURE_TOL:e}: C(0.5)={:.10}, ramp err {ramp_err:.1e}, totals {:.12}/{:.12}",
                mu_law(0.5, mu),
                totals[0],
                totals[1]
            )
        } else {
            format!("formula fixtures: {}", fails.join("; "))
        },
    )
}

// ------------------------------------------------------------ criterion 3

fn criterion_3() -> Outcome {
    let mut fails = Vec::new();
    let desk = RunConfig::defaults();
    let paper = RunConfig::preset("paper").unwrap();
    let k_paper = paper.layout().num_tokens();
    if k_paper != 64 {
        fails.push(format!("K = {k_paper} at the 32×32/L=16 preset"));
    }
    for (cfg, draws) in [(&desk, MASK_DRAWS), (&paper, MASK_DRAWS / 10)] {
        let k = cfg.layout().num_tokens();
        let want = (cfg.pipeline.mask_ratio * k as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut spa_masked = 0;
        let mut bad = 0;
        for _ in 0..draws {
            let plan = random_mask(k, cfg.pipeline.mask_ratio, &mut rng).unwrap();
            spa_masked += usize::from(plan.mask.contains(&0) || plan.keep.contains(&0));
            let all: BTreeSet<usize> = plan.keep.iter().chain(&plan.mask).copied().collect();
            bad += usize::from(plan.mask.len() != want || all.len() != k || all != (1..=k).collect());
        }
        if spa_masked > 0 || bad > 0 || mask_count(k, cfg.pipeline.mask_ratio) != want {
            fails.push(format!("K={k}: SPA in partition {spa_masked}×, malformed plans {bad}"));
        }
        note(format!("K={k}: {draws} draws, |M|={want}, SPA never in the partition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (n_a, n_f, l) in [(16, 16, 8), (32, 32, 16), (4, 8, 4)] {
        let layout = TokenLayout::new(n_a, n_f, l).unwrap();
        let h = CMatrix::from_fn(n_a, n_f, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let t = tokenize(&h, &layout).unwrap();
        let back = detokenize(&t, &layout).unwrap();
        let t2 = tokenize(&back, &layout).unwrap();
        if back != h || t2 != t {
            fails.push(format!("tokenize round trip differs at {n_a}×{n_f}/L={l}"));
        }
    }
    Outcome::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!("masking/tokenization: {MASK_DRAWS} draws clean, bijection exact, K={k_paper} at paper grid")
        } else {
            format!("masking/tokenization: {}", fails.join("; "))
        },
    )
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Outcome {
    let carrier = CarrierConfig {
        center_hz: 3.5e9,
        spacing_hz: 1.25e6,
        n_subcarriers: 16,
        n_antennas: 16,
    };
    let geo = ArrayGeometry::half_wavelength(&carrier);
    // Delay bin 3: τ = 3/(N_f Δf). Angle bin 5: sinθ cosφ = 2·5/N_a.
    let tau = 3.0 / (16.0 * 1.25e6);
    let theta = (10.0f64 / 16.0).asin();
    let params = MultipathParamSet {
        paths: vec![Ray::new(Complex64::from_polar(0.9, -1.2), tau, theta, 0.0)],
        path_loss_db: 70.0,
        los: true,
        position: [1.0, 1.0],
    };
    let h = synthesize_csi(&params, &carrier, &geo);
    let f = fft2(&h);
    let energies: Vec<f64> = f.data().iter().map(|z| z.norm_sqr()).collect();
    let total: f64 = energies.iter().sum();
    let (peak_bin, peak) = energies.iter().copied().enumerate().fold((0, 0.0), |b, (i, e)| if e > b.1 { (i, e) } else { b });
    let share = peak / total;
    let s = structure_target(&h, 255.0);
    let target_peak = s.iter().copied().enumerate().fold((0, 0.0), |b, (i, e)| if e > b.1 { (i, e) } else { b }).0;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parseval = 0.0f64;
    for m in [h.clone(), CMatrix::from_fn(16, 16, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))), CMatrix::from_fn(8, 32, |r, c| Complex64::new((r * c) as f64, -(r as f64)))] {
        let lhs = fft2(&m).energy();
        let rhs = (m.rows() * m.cols()) as f64 * m.energy();
        parseval = parseval.max((lhs - rhs).abs() / rhs);
    }
    let pass = share > SPARSITY_BAR && parseval < FIXTURE_TOL && target_peak == peak_bin;
    Outcome::new(
        pass,
        format!("sparsity oracle: peak bin holds {:.12} of energy (> {SPARSITY_BAR}), Parseval rel err {parseval:.1e}", share),
    )
}

// ------------------------------------------------------------ criterion 5

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut cfg = RunConfig::defaults();
    cfg.dataset.n_test = LS_SAMPLES;
    let test = generate_split(&cfg.dataset, cfg.seed, Split::Test, None).unwrap();
    let (n_a, n_f) = (cfg.dataset.carrier_low.n_antennas, cfg.dataset.carrier_low.n_subcarriers);
    let grid = PilotGrid::full(n_a, n_f);
    let pilots = pilot_symbols(n_a, n_f);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for snr_db in [0.0, 10.0, 20.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + snr_db as u64);
        let truth: Vec<CMatrix> = test.samples.iter().map(|s| s.h.clone()).collect();
        let est: Vec<CMatrix> = truth
            .iter()
            .map(|h| ls_estimate(&observe(h, &grid, &pilots, snr_db, &mut rng), &grid, &pilots).unwrap())
            .collect();
        let got = nmse(&est, &truth);
        let want = 10f64.powf(-snr_db / 10.0);
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        parts.push(format!("{snr_db} dB: {got:.5} vs {want:.5}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    Outcome::new(
        worst < LS_TOL && elapsed < 60.0,
        format!("LS full grid over {LS_SAMPLES} samples: {} (worst {:.2}% < 5%), {elapsed:.1}s", parts.join(", "), 100.0 * worst),
    )
}

// ------------------------------------------------------------ criterion 6

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let cfg = RunConfig::defaults();
    let train = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
    note(format!(
        "desk run: {} samples at {}×{}, plan {}/{}/{} epochs",
        train.len(),
        cfg.dataset.carrier_low.n_antennas,
        cfg.dataset.carrier_low.n_subcarriers,
        cfg.prior.epochs,
        cfg.training.stage1_epochs,
        cfg.training.stage2_epochs
    ));
    let dir = tempfile::tempdir().unwrap();
    let first = pretrain(&cfg, Ablation::None, &train, None, Some(dir.path()), true);
    let first_s = started.elapsed().as_secs_f64();
    let mut fails = Vec::new();
    let p = &first.prior_losses;
    note(format!("prior loss {:.4} -> {:.4}", p[0], p[p.len() - 1]));
    if p.iter().any(|v| !v.is_finite()) || p[p.len() - 1] >= p[0] {
        fails.push("prior loss did not decrease".to_string());
    }
    for (name, m, _) in &first.stages {
        let (a, b) = (m[0].l_mae, m[m.len() - 1].l_mae);
        note(format!("{name}: L_MAE epoch 1 {a:.5} -> epoch {} {b:.5}", m.len()));
        let finite = m.iter().all(|e| [e.l_mae, e.l_sa, e.l_rel, e.l_con, e.l_pa, e.total].iter().all(|v| v.is_finite()));
        if !finite {
            fails.push(format!("{name} has non-finite metrics"));
        }
        if b >= a {
            fails.push(format!("{name} L_MAE did not decrease"));
        }
        let last = dir.path().join("none").join(format!("{name}.ck"));
        if !last.exists() {
            fails.push(format!("{name} final checkpoint missing"));
        }
    }
    let second = pretrain(&cfg, Ablation::None, &train, None, None, false);
    let same_metrics = first.stages.iter().zip(&second.stages).all(|(a, b)| {
        a.2 == b.2 && a.1.iter().zip(&b.1).all(|(x, y)| x.l_mae.to_bits() == y.l_mae.to_bits() && x.total.to_bits() == y.total.to_bits())
    });
    let same = first.teacher_hash == second.teacher_hash && first.prior_losses == second.prior_losses && same_metrics;
    if !same {
        fails.push("re-run differs".into());
    }
    let elapsed = started.elapsed().as_secs_f64();
    note(format!("first run {first_s:.0}s, with re-run {elapsed:.0}s (target < 1800s per run)"));
    Outcome::new(
        fails.is_empty() && first_s < 1800.0,
        if fails.is_empty() {
            format!("training progress: L_MAE falls in every stage, no NaNs, re-run bit-identical, {first_s:.0}s per run")
        } else {
            format!("training progress: {}", fails.join("; "))
        },
    )
}

// ------------------------------------------------------- criteria 7 and 8

struct SeedRun {
    seed: u64,
    cfg: RunConfig,
    test: Dataset,
    encoders: Vec<(Ablation, FrozenEncoder)>,
}

impl SeedRun {
    fn encoder(&self, a: Ablation) -> &FrozenEncoder {
        &self.encoders.iter().find(|(x, _)| *x == a).unwrap().1
    }
}

fn toy_runs(ablations: &[Ablation]) -> Vec<SeedRun> {
    let base = RunConfig::preset("toy").unwrap();
    (0..ABLATION_SEEDS)
        .map(|i| {
            let started = Instant::now();
            let mut cfg = base.clone();
            cfg.seed = base.seed + i;
            cfg.downstream.seed = base.downstream.seed + i;
            let [train, _, test] = generate_all(&cfg.dataset, cfg.seed).unwrap();
            let teacher = teacher_checkpoint(&cfg, &train);
            let encoders = ablations
                .iter()
                .map(|&a| (a, pretrain(&cfg, a, &train, Some(&teacher), None, false).encoder()))
                .collect();
            note(format!("seed {}: {} encoders in {:.0}s", cfg.seed, ablations.len(), started.elapsed().as_secs_f64()));
            SeedRun {
                seed: cfg.seed,
                cfg,
                test,
                encoders,
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mut f1 = std::collections::BTreeMap::<&str, Vec<f64>>::new();
    for run in runs {
        let mut line = Vec::new();
        for a in Ablation::ALL {
            let mut ev = Evaluator::new(run.encoder(a), &run.test, &run.cfg, a.variant()).unwrap();
            let v = ev.los_cell(LOW_RATIO, LOW_SNR_DB).unwrap().value;
            f1.entry(a.variant()).or_default().push(v);
            line.push(format!("{} {v:.4}", a.variant()));
        }
        note(format!("seed {}: {}", run.seed, line.join(", ")));
    }
    let diffs: Vec<f64> = f1["full"].iter().zip(&f1["plain_mae"]).map(|(a, b)| a - b).collect();
    let (gap, se) = mean_sem(&diffs);
    let means: Vec<String> = Ablation::ALL.iter().map(|a| format!("{} {:.4}", a.variant(), mean(&f1[a.variant()]))).collect();
    note(format!("mean LoS F1 (unseen split, {LOW_SNR_DB} dB, ratio {LOW_RATIO}): {}", means.join(", ")));
    let (full, plain) = (mean(&f1["full"]), mean(&f1["plain_mae"]));
    let inner = ["no_sa", "no_pa"].iter().all(|v| full >= mean(&f1[v]) && mean(&f1[v]) >= plain);
    note(format!("inner ordering full ≥ single-guidance ≥ plain: {}", if inner { "holds" } else { "does not hold (reported only)" }));
    Outcome::new(
        gap > se,
        format!("ablation: full − plain LoS F1 = {gap:+.4} vs paired SE {se:.4} over {} seeds", runs.len()),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let variants = [Ablation::None, Ablation::PlainMae];
    let mut nmse_db = [Vec::new(), Vec::new()];
    let mut beam = [Vec::new(), Vec::new()];
    let mut mde = [Vec::new(), Vec::new()];
    for run in runs {
        let largest = *run.cfg.dataset.codebook_sizes.iter().max().unwrap();
        let lowest = run.cfg.downstream.beam_ratios.iter().copied().fold(f64::INFINITY, f64::min);
        for (k, &a) in variants.iter().enumerate() {
            let enc = run.encoder(a);
            let rows = run_estimation_task(enc, &run.test, &run.cfg, a.variant()).unwrap();
            nmse_db[k].push(mean(&rows.iter().map(|r| r.value).collect::<Vec<_>>()));
            let mut ev = Evaluator::new(enc, &run.test, &run.cfg, a.variant()).unwrap();
            let b: Vec<f64> = eval_snrs(&run.cfg).into_iter().map(|snr| ev.beam_cell(largest, lowest, snr).unwrap().value).collect();
            beam[k].push(mean(&b));
            mde[k].push(mean(&ev.run_pos().unwrap().iter().map(|r| r.value).collect::<Vec<_>>()));
        }
        note(format!(
            "seed {}: NMSE dB {:.3}/{:.3}, beam F1 {:.4}/{:.4}, MDE m {:.3}/{:.3} (full/plain)",
            run.seed,
            nmse_db[0].last().unwrap(),
            nmse_db[1].last().unwrap(),
            beam[0].last().unwrap(),
            beam[1].last().unwrap(),
            mde[0].last().unwrap(),
            mde[1].last().unwrap()
        ));
    }
    let n = (mean(&nmse_db[0]), mean(&nmse_db[1]));
    let b = (mean(&beam[0]), mean(&beam[1]));
    let m = (mean(&mde[0]), mean(&mde[1]));
    let checks = [("NMSE", n.0 <= n.1), ("beam F1", b.0 >= b.1), ("MDE", m.0 <= m.1)];
    for (name, ok) in checks {
        note(format!("{name}: {}", if ok { "holds" } else { "fails" }));
    }
    Outcome::new(
        checks.iter().all(|c| c.1),
        format!(
            "downstream (full vs plain, {} seeds): NMSE {:.3} vs {:.3} dB, beam F1 {:.4} vs {:.4}, MDE {:.3} vs {:.3} m",
            runs.len(),
            n.0,
            n.1,
            b.0,
            b.1,
            m.0,
            m.1
        ),
    )
}

// ------------------------------------------------------------ criterion 9

fn criterion_9() -> Outcome {
    let cfg = tiny_config();
    let train = generate_split(&cfg.dataset, cfg.seed, Split::Train, None).unwrap();
    let pre = Precomputed::new(&train, &cfg).unwrap();
    let (mut p, plan) = stage_two_trainer(&cfg, &train);
    let w = plan.stages[1].weights;
    let batch = prepare_batch(&train, &(0..8).collect::<Vec<_>>(), &cfg, "stage2", 1).unwrap();
    let teacher_ids: Vec<_> = p.store.ids_with_prefix(PARAM_PREFIX).collect();
    let mut s = p.session();
    let (l, _) = p.compute_loss(&mut s, &batch, &pre, &w).unwrap();
    let used = teacher_ids.iter().filter(|&&id| s.is_bound(id)).count();
    let tracked = teacher_ids
        .iter()
        .filter(|&&id| {
            let v = s.param(id);
            s.requires_grad(v)
        })
        .count();
    let g = s.backward(l).unwrap();
    let nonzero = teacher_ids
        .iter()
        .filter(|&&id| g.get(id).is_some_and(|v| v.iter().any(|&x| x != 0.0)))
        .count();
    let before = param_hash(&p.store, PARAM_PREFIX);
    p.run_stage(&train, &pre, &plan.stages[1], StageOptions::default()).unwrap();
    let unchanged = param_hash(&p.store, PARAM_PREFIX) == before;
    note(format!(
        "{} teacher tensors: {used} used in the Stage-II graph, {tracked} tracked for gradients, {nonzero} with nonzero gradient, unchanged after a Stage-II epoch: {unchanged}",
        teacher_ids.len()
    ));

    let wp = StagePlan::from_config(&cfg, Ablation::PlainMae).stages[0].weights;
    let batch = prepare_batch(&train, &[0, 3, 5, 9], &cfg, "stage1", 1).unwrap();
    let grads = |p: &Pretrainer| -> Vec<(String, Vec<u64>)> {
        let mut s = p.session();
        let (l, _) = p.compute_loss(&mut s, &batch, &pre, &wp).unwrap();
        let g = s.backward(l).unwrap();
        p.store
            .ids()
            .filter(|&id| [ENCODER_PREFIX, DECODER_PREFIX].iter().any(|pfx| p.store.name(id).starts_with(pfx)))
            .map(|id| (p.store.name(id).to_string(), g.get(id).unwrap().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let (with, _) = stage_two_trainer(&cfg, &train);
    let without = Pretrainer::new(&cfg, false, false).unwrap();
    let (a, b) = (grads(&with), grads(&without));
    let identical = a == b;
    note(format!("plain-MAE gradients over {} tensors bit-identical with and without the prior module: {identical}", a.len()));
    Outcome::new(
        used == teacher_ids.len() && tracked == 0 && nonzero == 0 && unchanged && identical,
        format!("teacher freeze and ablation equivalence: {nonzero} teacher grads, plain-MAE grads identical = {identical}"),
    )
}

// ------------------------------------------------------------------ main

fn main() {
    let selected: Option<BTreeSet<usize>> = std::env::var("CSIFM_ACCEPT")
        .ok()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |c: usize| selected.as_ref().is_none_or(|s| s.contains(&c));
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |c: usize, f: &mut dyn FnMut() -> Outcome| {
        if want(c) {
            println!("[{c}] running");
            let o = f();
            println!("{} [{c}] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((c, o));
        }
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    run(6, &mut criterion_6);
    if want(7) || want(8) {
        let ablations: Vec<Ablation> = if want(7) { Ablation::ALL.to_vec() } else { vec![Ablation::None, Ablation::PlainMae] };
        println!("[7/8] pretraining {} toy encoders per seed over {ABLATION_SEEDS} seeds", ablations.len());
        let runs = toy_runs(&ablations);
        run(7, &mut || criterion_7(&runs));
        run(8, &mut || criterion_8(&runs));
    }
    run(9, &mut criterion_9);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
