//! `dstl`: distillation, fine-tuning, evaluation, and verification runs.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dstl_core::data::{self, LabeledImage};
use dstl_core::distortions::{DistortionKind, DistortionSpec};
use dstl_core::encoder::gradcheck::{self, GradcheckOptions};
use dstl_core::encoder::model::BackwardFault;
use dstl_core::encoder::{checkpoint, init_params, ParamSet, ViTConfig};
use dstl_core::evaluation::{self, AblationArm, AblationSetup, Model, SweepAxis};
use dstl_core::trainer::{self, Mode};
use dstl_core::{Error, ErrorKind, Result};

use config::{parse_distortion, FileConfig};
use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "dstl", version, about = "Distortion-robust encoder distillation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON config file with optional "model", "train", "distill" and
    /// "finetune" objects.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Base hyperparameters: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed-order gradient reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print machine-readable results on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Sample visits per run; sets epochs to round(budget / n).
    #[arg(long)]
    budget: Option<usize>,
    /// Distortion as JSON or shorthand: none, mask:R, noise:S, blur:K:S
    /// (224-pixel geometry, rescaled) or blur:K:S:px.
    #[arg(long)]
    distortion: Option<String>,
    /// Disable crop and flip augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CIFAR-style binary train/test files.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        train: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Distill a student from a frozen teacher on unlabeled data.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Student initialization (default: copy of the teacher).
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Attach a classifier head and train on labeled distorted data.
    Finetune {
        /// Encoder checkpoint; omit with --fresh.
        #[arg(long, required_unless_present = "fresh")]
        encoder: Option<PathBuf>,
        /// Start from a fresh initialization (supervised training).
        #[arg(long)]
        fresh: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        /// Number of classes (default: from the labels).
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Top-1 accuracy of a classifier checkpoint under a distortion.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "none")]
        distortion: String,
        #[arg(long, default_value_t = evaluation::DEFAULT_REALIZATIONS)]
        realizations: usize,
    },
    /// Accuracy along a severity grid or a label-fraction grid.
    Sweep {
        #[arg(long, default_value = "severity")]
        axis: String,
        /// Distortion family for severity sweeps.
        #[arg(long)]
        kind: Option<String>,
        /// Comma-separated, strictly increasing axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Models as name=path (classifiers for severity, encoders for
        /// label fraction). Repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Test data.
        #[arg(long)]
        data: PathBuf,
        /// Training data (label-fraction sweeps).
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        realizations: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Loss-component ablation: distill, fine-tune, and score each arm.
    Ablate {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "global,global+local,global+attn,full")]
        arms: Vec<String>,
        #[arg(long, default_value_t = 0.1)]
        label_fraction: f64,
        #[arg(long, default_value_t = 3)]
        realizations: usize,
        #[command(flatten)]
        train: TrainFlags,
        /// Fine-tuning epochs (distillation epochs come from --epochs).
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Export clean, distorted, and attention-map PGM images.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample indices; repeatable.
        #[arg(long = "index", default_values_t = [0usize])]
        indices: Vec<usize>,
        #[arg(long, default_value = "none")]
        distortion: String,
    },
    /// Finite-difference verification of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Render JSON results (eval, sweep, ablation) as text tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Distill { .. } => "distill",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Ablate { .. } => "ablate",
            Command::Attn { .. } => "attn",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report { .. } => "report",
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

/// Result printing: JSON on stdout with --json, a text rendering otherwise.
fn emit<T: Serialize>(g: &Global, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if g.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_data(path: &Path) -> Result<Vec<LabeledImage>> {
    let items = data::load_cifar_binary(path)?;
    if items.is_empty() {
        return Err(Error::Input(format!("{}: dataset is empty", path.display())));
    }
    Ok(items)
}

fn load_ckpt(path: &Path) -> Result<(ViTConfig, ParamSet<f32>)> {
    checkpoint::load(path)
}

fn backbone_of(cfg: &ViTConfig, p: &ParamSet<f32>) -> (ViTConfig, ParamSet<f32>) {
    (
        ViTConfig {
            num_classes: None,
            ..cfg.clone()
        },
        p.backbone(),
    )
}

fn parse_named(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::Config(format!("expected name=path, got {spec:?}"))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let started = Instant::now();
    let mut m = Manifest::new(cli.command.name());
    match &cli.command {
        Command::Synth {
            train,
            test,
            classes,
        } => {
            let seed = file.seed_override(g.seed).unwrap_or(0);
            let tr = data::synth_shapes(*train, *classes, 32, seed)?;
            let te = data::synth_shapes(*test, *classes, 32, seed.wrapping_add(1))?;
            m.prepare(&g.out)?;
            let (ptr, pte) = (g.out.join("train.bin"), g.out.join("test.bin"));
            data::write_cifar_binary(&tr, &ptr)?;
            data::write_cifar_binary(&te, &pte)?;
            m.config = serde_json::json!({
                "train": train, "test": test, "classes": classes,
                "seed": seed,
            });
            m.outputs = vec![ptr.clone(), pte.clone()];
            emit(g, &m.outputs, || format!("wrote {} and {}\n", ptr.display(), pte.display()))?;
        }
        Command::Distill {
            teacher,
            student,
            data: data_path,
            train,
        } => {
            let tc = file.train_config(g, Mode::Distill, train)?;
            let (tcfg, tparams) = load_ckpt(teacher)?;
            let (cfg, tparams) = backbone_of(&tcfg, &tparams);
            let sparams = match student {
                Some(p) => {
                    let (scfg, sp) = load_ckpt(p)?;
                    let (scfg, sp) = backbone_of(&scfg, &sp);
                    if !scfg.same_backbone(&cfg) {
                        return Err(Error::Config("teacher and student configs differ".into()));
                    }
                    m.add_input(p)?;
                    sp
                }
                None => tparams.clone(),
            };
            let items = load_data(data_path)?;
            m.add_input(teacher)?;
            m.add_input(data_path)?;
            m.config = serde_json::json!({ "model": cfg, "train": tc });
            m.prepare(&g.out)?;
            eprintln!("distilling on {} images for {} epochs", items.len(), tc.epochs_for(items.len()));
            let out = trainer::distill_run(&tparams, sparams, &cfg, &tc, &items, Some(&g.out))?;
            let last = out.records.last().cloned();
            m.outputs = run_outputs(&g.out, tc.epochs_for(items.len()));
            let final_path = g.out.join("student.ckpt");
            checkpoint::save(&final_path, &cfg, &out.student)?;
            m.outputs.push(final_path);
            emit(g, &last, || match &last {
                Some(r) => format!(
                    "final step {}: total {:.4} (cls {:.4}, patch {:.4}, attn {:.4})\n",
                    r.step, r.loss_total, r.loss_cls, r.loss_patch, r.loss_attn
                ),
                None => "no steps run\n".into(),
            })?;
        }
        Command::Finetune {
            encoder,
            fresh,
            data: data_path,
            label_fraction,
            classes,
            train,
        } => {
            let mode = if *fresh { Mode::Supervised } else { Mode::Finetune };
            let tc = file.train_config(g, mode, train)?;
            let (cfg, enc) = match encoder {
                Some(p) if !fresh => {
                    let (c, e) = load_ckpt(p)?;
                    m.add_input(p)?;
                    backbone_of(&c, &e)
                }
                _ => {
                    let c = file.model_config()?;
                    let p = init_params(&c, tc.seed)?;
                    (c, p)
                }
            };
            let items = load_data(data_path)?;
            let k = classes.unwrap_or_else(|| data::num_classes(&items));
            m.add_input(data_path)?;
            m.config = serde_json::json!({
                "model": cfg, "train": tc, "label_fraction": label_fraction, "num_classes": k,
            });
            m.prepare(&g.out)?;
            let out = trainer::finetune_run(&enc, &cfg, &tc, &items, k, *label_fraction, Some(&g.out))?;
            m.outputs = run_outputs(&g.out, tc.epochs_for(out.subset.len()));
            let final_path = g.out.join("classifier.ckpt");
            checkpoint::save(&final_path, &out.config, &out.params)?;
            m.outputs.push(final_path);
            let summary = serde_json::json!({
                "labeled_samples": out.subset.len(),
                "final_loss": out.records.last().map(|r| r.loss_total),
            });
            emit(g, &summary, || {
                format!(
                    "fine-tuned on {} labeled samples, final loss {:.4}\n",
                    out.subset.len(),
                    out.records.last().map_or(f64::NAN, |r| r.loss_total)
                )
            })?;
        }
        Command::Eval {
            ckpt,
            data: data_path,
            distortion,
            realizations,
        } => {
            let spec = parse_distortion(distortion)?;
            let (cfg, params) = load_ckpt(ckpt)?;
            let items = load_data(data_path)?;
            m.add_input(ckpt)?;
            m.add_input(data_path)?;
            m.config = serde_json::json!({ "distortion": spec, "realizations": realizations });
            m.prepare(&g.out)?;
            let report = evaluation::top1(&params, &cfg, &dataset_id(data_path), &items, &spec, *realizations)?;
            let path = g.out.join("eval.json");
            write_json(&path, &report)?;
            m.outputs = vec![path];
            emit(g, &report, || {
                evaluation::render_reports(&[(ckpt.display().to_string(), report.clone())])
            })?;
        }
        Command::Sweep {
            axis,
            kind,
            values,
            models,
            data: data_path,
            train_data,
            realizations,
            train,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let named = models.iter().map(|s| parse_named(s)).collect::<Result<Vec<_>>>()?;
            let loaded = named
                .iter()
                .map(|(n, p)| Ok((n.clone(), load_ckpt(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let test = load_data(data_path)?;
            for (_, p) in &named {
                m.add_input(p)?;
            }
            m.add_input(data_path)?;
            let result = match axis {
                SweepAxis::Severity => {
                    let kind: DistortionKind = kind
                        .as_deref()
                        .ok_or_else(|| Error::Config("--kind is required for severity sweeps".into()))?
                        .parse()?;
                    let base = match &train.distortion {
                        Some(d) => parse_distortion(d)?,
                        None => default_spec(kind),
                    };
                    if base.kind != kind {
                        return Err(Error::Config("--distortion kind differs from --kind".into()));
                    }
                    m.config = serde_json::json!({
                        "axis": axis, "base": base, "values": values, "realizations": realizations,
                    });
                    m.prepare(&g.out)?;
                    let ms: Vec<Model<'_>> = loaded
                        .iter()
                        .map(|(n, (c, p))| Model {
                            name: n,
                            params: p,
                            config: c,
                        })
                        .collect();
                    evaluation::severity_sweep(&ms, &dataset_id(data_path), &test, &base, values, *realizations)?
                }
                SweepAxis::LabelFraction => {
                    let tpath = train_data
                        .as_ref()
                        .ok_or_else(|| Error::Config("--train-data is required for label-fraction sweeps".into()))?;
                    let tr = load_data(tpath)?;
                    m.add_input(tpath)?;
                    let tc = file.train_config(g, Mode::Finetune, train)?;
                    let bb: Vec<(String, ViTConfig, ParamSet<f32>)> = loaded
                        .iter()
                        .map(|(n, (c, p))| {
                            let (c, p) = backbone_of(c, p);
                            (n.clone(), c, p)
                        })
                        .collect();
                    let cfg = bb[0].1.clone();
                    if bb.iter().any(|(_, c, _)| !c.same_backbone(&cfg)) {
                        return Err(Error::Config("sweep encoders have different architectures".into()));
                    }
                    m.config = serde_json::json!({
                        "axis": axis, "train": tc, "values": values, "realizations": realizations,
                    });
                    m.prepare(&g.out)?;
                    let encs: Vec<(&str, &ParamSet<f32>)> = bb.iter().map(|(n, _, p)| (n.as_str(), p)).collect();
                    evaluation::label_fraction_sweep(
                        &encs,
                        &cfg,
                        &tc,
                        &tr,
                        &test,
                        &dataset_id(data_path),
                        data::num_classes(&tr).max(data::num_classes(&test)),
                        values,
                        *realizations,
                    )?
                }
            };
            let path = g.out.join("sweep.json");
            write_json(&path, &result)?;
            m.outputs = vec![path];
            emit(g, &result, || result.render())?;
        }
        Command::Ablate {
            teacher,
            train_data,
            data: data_path,
            arms,
            label_fraction,
            realizations,
            train,
            finetune_epochs,
        } => {
            let arms = arms.iter().map(|a| a.parse()).collect::<Result<Vec<AblationArm>>>()?;
            let dtc = file.train_config(g, Mode::Distill, train)?;
            let ft_flags = TrainFlags {
                epochs: finetune_epochs.or(None),
                lr: None,
                budget: None,
                ..train.clone()
            };
            let mut ftc = file.train_config(g, Mode::Finetune, &ft_flags)?;
            ftc.distortion = dtc.distortion.clone();
            let (tcfg, tp) = load_ckpt(teacher)?;
            let (cfg, tp) = backbone_of(&tcfg, &tp);
            let tr = load_data(train_data)?;
            let te = load_data(data_path)?;
            m.add_input(teacher)?;
            m.add_input(train_data)?;
            m.add_input(data_path)?;
            m.config = serde_json::json!({
                "model": cfg, "distill": dtc, "finetune": ftc, "arms": arms,
                "label_fraction": label_fraction, "realizations": realizations,
            });
            m.prepare(&g.out)?;
            let setup = AblationSetup {
                teacher: &tp,
                student_init: &tp,
                config: &cfg,
                distill: &dtc,
                finetune: &ftc,
                train: &tr,
                test: &te,
                dataset: &dataset_id(data_path),
                num_classes: data::num_classes(&tr).max(data::num_classes(&te)),
                label_fraction: *label_fraction,
                realizations: *realizations,
            };
            let table = evaluation::ablation_suite(&setup, &arms)?;
            let path = g.out.join("ablation.json");
            write_json(&path, &table)?;
            m.outputs = vec![path];
            emit(g, &table, || table.render())?;
        }
        Command::Attn {
            ckpt,
            data: data_path,
            indices,
            distortion,
        } => {
            let spec = parse_distortion(distortion)?;
            let (cfg, params) = load_ckpt(ckpt)?;
            let items = load_data(data_path)?;
            if let Some(&bad) = indices.iter().find(|&&i| i >= items.len()) {
                return Err(Error::Input(format!("index {bad} out of range ({} samples)", items.len())));
            }
            m.add_input(ckpt)?;
            m.add_input(data_path)?;
            m.config = serde_json::json!({ "distortion": spec, "indices": indices });
            m.prepare(&g.out)?;
            let mut exports = Vec::new();
            for &i in indices {
                let e = evaluation::export_attention(
                    &params,
                    &cfg,
                    &items[i].image,
                    &spec,
                    i as u64,
                    &g.out,
                    &format!("sample{i}"),
                )?;
                m.outputs.extend([e.clean.clone(), e.distorted.clone(), e.attention.clone()]);
                exports.push(e);
            }
            emit(g, &exports, || {
                exports
                    .iter()
                    .map(|e| format!("wrote {}\n", e.attention.display()))
                    .collect()
            })?;
        }
        Command::Gradcheck {
            tolerance,
            epsilon,
            inject_fault,
        } => {
            let opts = GradcheckOptions {
                tolerance: *tolerance,
                epsilon: *epsilon,
                seed: file.seed_override(g.seed).unwrap_or(0),
                fault: inject_fault.then_some(BackwardFault::FlipLastMlpInput),
                ..Default::default()
            };
            let report = gradcheck::run_suite(&opts)?;
            emit(g, &report, || render_gradcheck(&report))?;
            if !report.passed() {
                return Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.1e}",
                    report.max_rel_err(),
                    report.tolerance
                )));
            }
            return Ok(());
        }
        Command::Report { inputs } => {
            let mut out = String::new();
            for p in inputs {
                let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
                out.push_str(&format!("== {}\n", p.display()));
                out.push_str(&render_any(&bytes).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?);
                out.push('\n');
            }
            print!("{out}");
            return Ok(());
        }
    }
    m.finish(&g.out, started.elapsed())
}

fn dataset_id(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn default_spec(kind: DistortionKind) -> DistortionSpec {
    match kind {
        DistortionKind::Mask => DistortionSpec::mask(0.9, 0),
        DistortionKind::Noise => DistortionSpec::noise(0.5, 0),
        DistortionKind::Blur => DistortionSpec::blur(37, 9.0).at_reference(config::REFERENCE_SIZE),
    }
}

fn run_outputs(dir: &Path, epochs: usize) -> Vec<PathBuf> {
    let mut v = vec![dir.join("config.json"), dir.join("metrics.jsonl")];
    v.extend((1..=epochs).map(|e| dir.join(format!("{e}.ckpt"))));
    v
}

fn render_gradcheck(r: &gradcheck::GradcheckReport) -> String {
    let mut rows = vec![vec![
        "loss".to_string(),
        "tensor".into(),
        "rel err".into(),
        "max entry rel".into(),
        "max abs".into(),
    ]];
    for c in &r.checks {
        for t in &c.tensors {
            rows.push(vec![
                c.loss.clone(),
                t.name.clone(),
                format!("{:.3e}", t.rel_err),
                format!("{:.3e}", t.max_entry_rel_err),
                format!("{:.3e}", t.max_abs_err),
            ]);
        }
    }
    let mut s = evaluation::render_grid(&rows);
    s.push_str(&format!(
        "max relative error {:.3e} (tolerance {:.1e}): {}\n",
        r.max_rel_err(),
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    ));
    s
}

fn render_any(bytes: &[u8]) -> std::result::Result<String, String> {
    if let Ok(r) = serde_json::from_slice::<evaluation::EvalReport>(bytes) {
        return Ok(evaluation::render_reports(&[("model".into(), r)]));
    }
    if let Ok(s) = serde_json::from_slice::<evaluation::SweepResult>(bytes) {
        return Ok(s.render());
    }
    if let Ok(t) = serde_json::from_slice::<evaluation::AblationTable>(bytes) {
        return Ok(t.render());
    }
    Err("not an eval report, sweep result, or ablation table".into())
}
