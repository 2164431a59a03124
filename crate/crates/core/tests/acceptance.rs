//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `DSTL_ACCEPT_ONLY=a,b` restricts the run to criteria whose names contain
//! one of the given substrings.

use std::path::Path;
use std::time::{Duration, Instant};

use dstl_core::data::{self, LabeledImage};
use dstl_core::distill::{self, DistillWeights};
use dstl_core::distortions::{self, DistortionSpec};
use dstl_core::encoder::gradcheck::{self, GradcheckOptions};
use dstl_core::encoder::{self, checkpoint, init_params, ParamSet, ViTConfig};
use dstl_core::evaluation::{self, AblationArm, AblationSetup, EvalReport, Model};
use dstl_core::rng;
use dstl_core::trainer::adamw::{adamw_step, AdamWConfig, OptimizerState};
use dstl_core::trainer::schedule::cosine_lr;
use dstl_core::trainer::{self, Mode, TrainConfig};
use dstl_core::{Image, Result};
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [1, 2, 3];
const SEVERITIES: [f64; 4] = [0.5, 0.75, 0.9, 0.95];
const TRAIN_SEVERITY: f64 = 0.9;
const LABEL_FRACTION: f64 = 0.1;
const REALIZATIONS: usize = 5;
const SWEEP_REALIZATIONS: usize = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).expect("readable")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_gate() -> Result<Verdict> {
    let opts = GradcheckOptions::default();
    let c = &opts.config;
    assert_eq!((c.depth, c.dim, c.heads), (2, 16, 2));
    let t = Instant::now();
    let r = gradcheck::run_suite(&opts)?;
    let el = t.elapsed();
    let faulty = gradcheck::run_suite(&GradcheckOptions {
        fault: Some(encoder::model::BackwardFault::FlipLastMlpInput),
        ..GradcheckOptions::default()
    })?;
    verdict(
        r.passed() && el < Duration::from_secs(300) && !faulty.passed(),
        format!(
            "max rel err {:.2e} < 1e-4 over {} losses in {:.1}s; injected fault detected at {:.2e}",
            r.max_rel_err(),
            r.checks.len(),
            el.as_secs_f64(),
            faulty.max_rel_err()
        ),
    )
}

fn loss_identities() -> Result<Verdict> {
    let cfg = ViTConfig::default();
    let p = init_params(&cfg, 5)?.cast::<f64>();
    let img = &data::synth_shapes(1, 10, 32, 5)?[0].image;
    let id = distortions::apply(&DistortionSpec::identity(), img, 0)?;
    let w = DistillWeights::default();
    let same = distill::total_loss(&encoder::forward(&p, &cfg, img)?, &encoder::forward(&p, &cfg, &id)?, &w)?;

    let q = init_params(&cfg, 6)?.cast::<f64>();
    let t = encoder::forward(&p, &cfg, img)?;
    let s = encoder::forward(&q, &cfg, &distortions::apply(&DistortionSpec::mask(0.5, 1), img, 0)?)?;
    let full = distill::total_loss(&t, &s, &w)?;
    let mut arms_exact = true;
    for arm in AblationArm::ALL {
        let aw = arm.weights(&w);
        let got = distill::total_loss(&t, &s, &aw)?.total;
        let mut want = aw.lambda_cls * full.cls;
        if aw.lambda_patch != 0.0 {
            want += aw.lambda_patch * full.patch;
        }
        if aw.lambda_attn != 0.0 {
            want += aw.lambda_attn * full.attn;
        }
        arms_exact &= got == want;
    }

    let tau = 2.0;
    let a_t = [0.0f64, 0.0];
    let a_s = [tau * 4f64.ln(), 0.0];
    let kl = distill::loss_attn(&a_t, &a_s, 1, tau)?;
    let kl_err = (kl - 1.25f64.ln()).abs();
    verdict(
        same.total < 1e-10 && arms_exact && kl_err < 1e-9,
        format!(
            "self loss {:.1e}; zeroed arms exact: {arms_exact}; KL hand case error {kl_err:.1e}",
            same.total
        ),
    )
}

fn distortion_operators() -> Result<Verdict> {
    let img = Image::filled(32, 32, 3, 0.6);
    let mut mask_ok = true;
    for k in 0..20 {
        let ratio = k as f64 / 20.0;
        let out = distortions::apply(&DistortionSpec::mask(ratio, k), &img, 3)?;
        let zeros = (0..32 * 32)
            .filter(|&i| (0..3).all(|c| out.plane(c)[i] == 0.0))
            .count();
        let partial = (0..32 * 32)
            .filter(|&i| (0..3).any(|c| out.plane(c)[i] == 0.0) && !(0..3).all(|c| out.plane(c)[i] == 0.0))
            .count();
        mask_ok &= zeros == (ratio * 1024.0).round() as usize && partial == 0;
    }

    let sigma = 0.3;
    let n = 1 << 21;
    let field = distortions::gaussian_noise_field(n, sigma, &mut rng::stream(9, &[1]))?;
    let m = mean(&field);
    let sd = (field.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    let std_rel = (sd - sigma).abs() / sigma;

    let flat = Image::filled(32, 32, 3, 0.37);
    let blurred = distortions::apply(&DistortionSpec::blur(9, 2.0), &flat, 0)?;
    let const_err = blurred
        .data()
        .iter()
        .map(|v| (*v as f64 - 0.37f32 as f64).abs())
        .fold(0.0, f64::max);

    let mut px = vec![0.0f32; 3 * 32 * 32];
    for c in 0..3 {
        px[c * 1024 + 16 * 32 + 16] = 1.0;
    }
    let impulse = Image::new(32, 32, 3, px)?;
    let (ks, bs) = (9usize, 1.5f64);
    let out = distortions::apply_gaussian_blur(&impulse, ks, bs)?;
    let r = (ks / 2) as i64;
    let g: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * bs * bs)).exp()).collect();
    let z: f64 = g.iter().sum();
    let mut imp_err = 0.0f64;
    for c in 0..3 {
        for y in 0..32i64 {
            for x in 0..32i64 {
                let (dy, dx) = (y - 16, x - 16);
                let want = if dy.abs() <= r && dx.abs() <= r {
                    g[(dy + r) as usize] * g[(dx + r) as usize] / (z * z)
                } else {
                    0.0
                };
                imp_err = imp_err.max((out.get(c, y as usize, x as usize) as f64 - want).abs());
            }
        }
    }
    verdict(
        mask_ok && std_rel < 0.01 && const_err < 1e-6 && imp_err < 1e-6,
        format!(
            "mask counts exact on 20 ratios: {mask_ok}; noise std {sd:.5} vs {sigma} ({:.3}% off, n={n}); blur constant err {const_err:.1e}, impulse err {imp_err:.1e}",
            std_rel * 100.0
        ),
    )
}

fn small_distill_setup() -> Result<(ViTConfig, ParamSet<f32>, ParamSet<f32>, Vec<LabeledImage>, TrainConfig)> {
    let cfg = ViTConfig::default();
    let teacher = init_params(&cfg, 21)?;
    let student = init_params(&cfg, 22)?;
    let items = data::synth_shapes(96, 10, 32, 23)?;
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 32,
        seed: 4,
        distortion: DistortionSpec::mask(0.9, 4),
        ..TrainConfig::desk_distill()
    };
    Ok((cfg, teacher, student, items, tc))
}

fn teacher_freezing() -> Result<Verdict> {
    let dir = tempfile::tempdir().expect("temp dir");
    let (cfg, teacher, student, items, tc) = small_distill_setup()?;
    let path = dir.path().join("teacher.ckpt");
    checkpoint::save(&path, &cfg, &teacher)?;
    let before = sha(&path);
    let (_, loaded) = checkpoint::load(&path)?;
    let digest = loaded.digest();
    let out = trainer::distill_run(&loaded, student.clone(), &cfg, &tc, &items, Some(&dir.path().join("run")))?;
    let moved = out.student != student;
    let after = sha(&path);
    verdict(
        before == after && loaded.digest() == digest && moved,
        format!("checkpoint sha256 {}.. unchanged: {}; student updated: {moved}", &before[..12], before == after),
    )
}

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir().expect("temp dir");
    let (cfg, teacher, student, items, tc) = small_distill_setup()?;
    let tc = TrainConfig {
        deterministic: true,
        ..tc
    };
    let runs = ["a", "b"].map(|n| dir.path().join(n));
    for r in &runs {
        trainer::distill_run(&teacher, student.clone(), &cfg, &tc, &items, Some(r))?;
    }
    let same = ["1.ckpt", "2.ckpt", "metrics.jsonl", "config.json"]
        .iter()
        .all(|f| sha(&runs[0].join(f)) == sha(&runs[1].join(f)));
    verdict(same, format!("checkpoints, metrics and config bit-identical across two runs: {same}"))
}

fn schedule_optimizer() -> Result<Verdict> {
    let (peak, min, total, warm) = (3e-4, 1e-6, 101usize, 10usize);
    let pi = std::f64::consts::PI;
    let mut err = 0.0f64;
    err = err.max((cosine_lr(0, total, peak, min, warm) - 0.0).abs());
    err = err.max((cosine_lr(5, total, peak, min, warm) - peak * 0.5).abs());
    err = err.max((cosine_lr(warm, total, peak, min, warm) - peak).abs());
    err = err.max((cosine_lr(total - 1, total, peak, min, warm) - min).abs());
    let mid = warm + (total - 1 - warm) / 2;
    let p = (mid - warm) as f64 / (total - 1 - warm) as f64;
    err = err.max((cosine_lr(mid, total, peak, min, warm) - (min + 0.5 * (peak - min) * (1.0 + (pi * p).cos()))).abs());
    err = err.max((cosine_lr(55, 101, 1.0, 0.0, 0) - 0.5 * (1.0 + (pi * 0.55).cos())).abs());
    err = err.max((cosine_lr(50, 101, 1.0, 0.0, 0) - 0.5).abs());

    let c = AdamWConfig {
        weight_decay: 0.05,
        ..Default::default()
    };
    let tensor = |v: f64| {
        ParamSet::from_tensors(vec![encoder::Tensor {
            name: "w".into(),
            shape: vec![1],
            data: vec![v],
        }])
    };
    let (mut w, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
    let mut p = tensor(0.4);
    let mut st = OptimizerState::new(&p);
    let mut adam_err = 0.0f64;
    for k in 1..=10 {
        let g = (k as f64 * 1.3).cos() - 0.2;
        let lr = 1e-2 / k as f64;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(k));
        let vh = v / (1.0 - 0.999f64.powi(k));
        w = w - lr * 0.05 * w - lr * mh / (vh.sqrt() + 1e-8);
        adamw_step(&mut p, &tensor(g), &mut st, lr, &c)?;
        adam_err = adam_err.max((p.tensors()[0].data[0] - w).abs());
    }
    verdict(
        err < 1e-12 && adam_err < 1e-12,
        format!("cosine max err {err:.1e}; AdamW 10-step trace max err {adam_err:.1e}"),
    )
}

fn formats() -> Result<Verdict> {
    let cfg = ViTConfig::default().with_classes(10);
    let p = init_params(&cfg, 8)?;
    let bytes = checkpoint::encode(&cfg, &p)?;
    let (c2, p2) = checkpoint::decode(&bytes)?;
    let bits = |q: &ParamSet<f32>| -> Vec<u32> { q.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect() };
    let ckpt_ok = c2 == cfg && bits(&p) == bits(&p2) && checkpoint::encode(&c2, &p2)? == bytes;

    let mut raw = Vec::new();
    let mut want = Vec::new();
    for (label, base) in [(3u8, 7u32), (9u8, 200u32)] {
        raw.push(label);
        let px: Vec<u8> = (0..3072u32).map(|i| ((i * 31 + base) % 256) as u8).collect();
        raw.extend_from_slice(&px);
        want.push((label as usize, px));
    }
    let parsed = data::parse_cifar_binary(&raw)?;
    let cifar_ok = parsed.len() == 2
        && parsed.iter().zip(&want).all(|(s, (l, px))| {
            s.label == *l && s.image.data().iter().zip(px).all(|(v, &b)| *v == b as f32 / 255.0)
        })
        && data::parse_cifar_binary(&raw[..raw.len() - 1]).is_err();

    let dir = tempfile::tempdir().expect("temp dir");
    let img = &data::synth_shapes(1, 10, 32, 2)?[0].image;
    let e = evaluation::export_attention(&p, &cfg, img, &DistortionSpec::mask(0.5, 1), 0, dir.path(), "x")?;
    let mut pgm_ok = true;
    for f in [&e.clean, &e.distorted, &e.attention] {
        let pgm = evaluation::parse_pgm(&std::fs::read(f).expect("export readable"))?;
        pgm_ok &= pgm.width == 32 && pgm.height == 32 && pgm.maxval == 255 && pgm.pixels.len() == 1024;
    }
    verdict(
        ckpt_ok && cifar_ok && pgm_ok,
        format!("checkpoint round trip bit-identical: {ckpt_ok}; 2-record CIFAR fixture: {cifar_ok}; PGM P5 exports: {pgm_ok}"),
    )
}

/// State shared by the experimental criteria: one supervised teacher and,
/// per seed, a distilled student and the fraction-0.1 classifiers.
struct Experiment {
    cfg: ViTConfig,
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
    teacher: ParamSet<f32>,
    teacher_clean: f64,
    setup: Duration,
    seeds: Vec<SeedRun>,
}

struct SeedRun {
    seed: u64,
    student: ParamSet<f32>,
    distilled_clf: (ViTConfig, ParamSet<f32>),
    baseline_clf: (ViTConfig, ParamSet<f32>),
}

fn train_mask(seed: u64) -> DistortionSpec {
    DistortionSpec::mask(TRAIN_SEVERITY, seed)
}

fn test_mask(seed: u64) -> DistortionSpec {
    DistortionSpec::mask(TRAIN_SEVERITY, 1000 + seed)
}

fn teacher_config() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        peak_lr: 1e-3,
        weight_decay: 0.05,
        mode: Mode::Supervised,
        distortion: DistortionSpec::identity(),
        ..TrainConfig::desk_finetune()
    }
}

fn distill_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        peak_lr: 1e-3,
        seed,
        distortion: train_mask(seed),
        ..TrainConfig::desk_distill()
    }
}

fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        sample_budget: Some(20_000),
        seed,
        distortion: train_mask(seed),
        ..TrainConfig::desk_finetune()
    }
}

impl Experiment {
    fn build() -> Result<Self> {
        let t0 = Instant::now();
        let cfg = ViTConfig::default();
        let train = data::synth_shapes(10_000, 10, 32, 11)?;
        let test = data::synth_shapes(2_000, 10, 32, 12)?;
        let init = init_params(&cfg, 0)?;
        let t = trainer::finetune_run(&init, &cfg, &teacher_config(), &train, 10, 1.0, None)?;
        let teacher_clean = evaluation::top1(&t.params, &t.config, "test", &test, &DistortionSpec::identity(), 1)?.mean_top1;
        let teacher = t.params.backbone();
        eprintln!("  teacher: clean top-1 {teacher_clean:.2}% ({:.0}s)", t0.elapsed().as_secs_f64());
        let mut seeds = Vec::new();
        for &seed in &SEEDS {
            let t1 = Instant::now();
            let d = trainer::distill_run(&teacher, teacher.clone(), &cfg, &distill_config(seed), &train, None)?;
            let ftc = finetune_config(seed);
            let dc = trainer::finetune_run(&d.student, &cfg, &ftc, &train, 10, LABEL_FRACTION, None)?;
            let bc = trainer::finetune_run(&teacher, &cfg, &ftc, &train, 10, LABEL_FRACTION, None)?;
            eprintln!(
                "  seed {seed}: distill loss {:.2}, fine-tuned both arms ({:.0}s)",
                evaluation::last_epoch_mean(&d.records),
                t1.elapsed().as_secs_f64()
            );
            seeds.push(SeedRun {
                seed,
                student: d.student,
                distilled_clf: (dc.config, dc.params),
                baseline_clf: (bc.config, bc.params),
            });
        }
        Ok(Self {
            cfg,
            train,
            test,
            teacher,
            teacher_clean,
            setup: t0.elapsed(),
            seeds,
        })
    }

    fn score(&self, clf: &(ViTConfig, ParamSet<f32>), spec: &DistortionSpec, r: usize) -> Result<EvalReport> {
        evaluation::top1(&clf.1, &clf.0, "synthetic-test", &self.test, spec, r)
    }
}

fn table_gap(x: &Experiment) -> Result<Verdict> {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for s in &x.seeds {
        let spec = test_mask(s.seed);
        let d = x.score(&s.distilled_clf, &spec, REALIZATIONS)?.mean_top1;
        let b = x.score(&s.baseline_clf, &spec, REALIZATIONS)?.mean_top1;
        lines.push(format!("seed {}: {d:.2} vs {b:.2}", s.seed));
        gaps.push(d - b);
    }
    let gap = mean(&gaps);
    let runtime = x.setup + t.elapsed();
    verdict(
        x.teacher_clean >= 90.0 && gap >= 3.0 && runtime <= Duration::from_secs(2 * 3600),
        format!(
            "teacher clean {:.2}% (>= 90); mask 0.9 top-1 distilled vs baseline {}; mean gap {gap:+.2} points (>= 3); teacher, students and scoring took {:.0} min (<= 120)",
            x.teacher_clean,
            lines.join(", "),
            runtime.as_secs_f64() / 60.0
        ),
    )
}

fn label_fraction_trend(x: &Experiment) -> Result<Verdict> {
    let fractions = [0.05, 1.0];
    let mut gaps = vec![Vec::new(); fractions.len()];
    for s in &x.seeds {
        let ftc = TrainConfig {
            distortion: test_mask(s.seed),
            ..finetune_config(s.seed)
        };
        let encs = [("distilled", &s.student), ("baseline", &x.teacher)];
        let r = evaluation::label_fraction_sweep(&encs, &x.cfg, &ftc, &x.train, &x.test, "synthetic-test", 10, &fractions, SWEEP_REALIZATIONS)?;
        let (d, b) = (r.series("distilled").unwrap().means(), r.series("baseline").unwrap().means());
        for k in 0..fractions.len() {
            gaps[k].push(d[k] - b[k]);
        }
    }
    let (low, full) = (mean(&gaps[0]), mean(&gaps[1]));
    verdict(
        low >= full,
        format!("mean gap at fraction 0.05: {low:+.2}, at 1.0: {full:+.2}"),
    )
}

fn severity_trend(x: &Experiment) -> Result<Verdict> {
    let mut curves = [vec![0.0; SEVERITIES.len()], vec![0.0; SEVERITIES.len()]];
    for s in &x.seeds {
        let models = [
            Model {
                name: "distilled",
                params: &s.distilled_clf.1,
                config: &s.distilled_clf.0,
            },
            Model {
                name: "baseline",
                params: &s.baseline_clf.1,
                config: &s.baseline_clf.0,
            },
        ];
        let r = evaluation::severity_sweep(&models, "synthetic-test", &x.test, &test_mask(s.seed), &SEVERITIES, SWEEP_REALIZATIONS)?;
        for (k, name) in ["distilled", "baseline"].iter().enumerate() {
            for (c, m) in curves[k].iter_mut().zip(r.series(name).unwrap().means()) {
                *c += m / x.seeds.len() as f64;
            }
        }
    }
    let rho = curves.each_ref().map(|c| evaluation::spearman(&SEVERITIES, c));
    let dominates = SEVERITIES
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= TRAIN_SEVERITY)
        .all(|(i, _)| curves[0][i] >= curves[1][i]);
    let fmt = |c: &[f64]| c.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join("/");
    // Supplementary: the same curves restricted to severities at or above
    // the training severity. Reported only; the verdict uses the full grid.
    let above: Vec<usize> = (0..SEVERITIES.len()).filter(|&i| SEVERITIES[i] >= TRAIN_SEVERITY).collect();
    let falls_above = curves
        .iter()
        .all(|c| above.windows(2).all(|w| c[w[1]] <= c[w[0]]));
    verdict(
        rho[0] < 0.0 && rho[1] < 0.0 && dominates,
        format!(
            "mask {{0.5,0.75,0.9,0.95}} distilled {} (rho {:.2}), baseline {} (rho {:.2}); distilled >= baseline at >= 0.9: {dominates}; both non-increasing over severities >= 0.9: {falls_above}",
            fmt(&curves[0]),
            rho[0],
            fmt(&curves[1]),
            rho[1]
        ),
    )
}

fn ablation(x: &Experiment) -> Result<Verdict> {
    let seed = SEEDS[0];
    let dtc = TrainConfig {
        epochs: 2,
        ..distill_config(seed)
    };
    let ftc = finetune_config(seed);
    let setup = AblationSetup {
        teacher: &x.teacher,
        student_init: &x.teacher,
        config: &x.cfg,
        distill: &dtc,
        finetune: &ftc,
        train: &x.train,
        test: &x.test,
        dataset: "synthetic-test",
        num_classes: 10,
        label_fraction: LABEL_FRACTION,
        realizations: SWEEP_REALIZATIONS,
    };
    let table = evaluation::ablation_suite(&setup, &AblationArm::ALL)?;
    for line in table.render().lines() {
        eprintln!("  {line}");
    }
    let acc = |a| table.row(a).map(|r| r.report.mean_top1).unwrap_or(f64::NAN);
    let (full, global) = (acc(AblationArm::Full), acc(AblationArm::Global));
    verdict(
        table.rows.len() == 4 && full >= global,
        format!("4 arms ran; full {full:.2} vs global-only {global:.2} (soft)"),
    )
}

type Check<'a> = (&'a str, Box<dyn FnOnce() -> Result<Verdict> + 'a>);

fn main() {
    let only: Option<Vec<String>> = std::env::var("DSTL_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').map(str::to_string).collect());
    let wanted = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|p| name.contains(p.as_str())));

    let experimental = ["directional-table", "directional-label-fraction", "directional-severity", "ablation"];
    let experiment = if experimental.iter().any(|n| wanted(n)) {
        eprintln!("building shared teacher and per-seed students");
        Some(Experiment::build())
    } else {
        None
    };
    let experiment = &experiment;
    let exp = |f: fn(&Experiment) -> Result<Verdict>| -> Box<dyn FnOnce() -> Result<Verdict> + '_> {
        Box::new(move || match experiment.as_ref().expect("built") {
            Ok(x) => f(x),
            Err(e) => Err(dstl_core::Error::Input(format!("experiment setup failed: {e}"))),
        })
    };

    let checks: Vec<Check> = vec![
        ("gradient-gate", Box::new(gradient_gate)),
        ("loss-identities", Box::new(loss_identities)),
        ("distortion-operators", Box::new(distortion_operators)),
        ("teacher-freezing", Box::new(teacher_freezing)),
        ("determinism", Box::new(determinism)),
        ("directional-table", exp(table_gap)),
        ("directional-label-fraction", exp(label_fraction_trend)),
        ("directional-severity", exp(severity_trend)),
        ("ablation", exp(ablation)),
        ("schedule-optimizer", Box::new(schedule_optimizer)),
        ("formats", Box::new(formats)),
    ];
    let strict = std::env::var_os("DSTL_ACCEPT_STRICT").is_some_and(|v| v == "1");
    let (mut passed, mut failed, mut errored) = (0, 0, 0);
    for (name, f) in checks {
        if !wanted(name) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => {
                errored += 1;
                (false, format!("error: {e}"))
            }
        };
        let soft = name == "ablation";
        let tag = match (pass, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => "FAIL",
        };
        if pass {
            passed += 1;
        } else if !soft {
            failed += 1;
        }
        println!("{tag} {name} [{:.1}s]: {detail}", t.elapsed().as_secs_f64());
    }
    println!("acceptance: {passed} passed, {failed} failed");
    // A failed criterion is a reported result; only a broken harness fails
    // the test run unless DSTL_ACCEPT_STRICT=1.
    if errored > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}
