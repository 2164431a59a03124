//! Central finite-difference verification of the hand-written backward
//! pass, run in `f64` on a small model.

use serde::Serialize;

use super::config::ViTConfig;
use super::model::{backward, backward_with_fault, forward_with_cache, BackwardFault, EncoderOutput, OutputGrad};
use super::params::{init_params, ParamSet};
use crate::distill::{total_loss_with_grad, DistillWeights};
use crate::distortions::{self, DistortionSpec};
use crate::error::Result;
use crate::image::Image;
use crate::rng;
use crate::trainer::cross_entropy;

/// Denominator floor of the relative errors, so that tensors whose true
/// gradient vanishes are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-8;

/// Per-tensor comparison. `rel_err` is `|a - n| / max(|a|, |n|)` over the
/// whole tensor (Euclidean norms) and is what the gate uses; the entrywise
/// maximum is diagnostic, since entries whose true gradient is exactly zero
/// (such as key biases under softmax shift invariance) only carry
/// finite-difference round-off.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub rel_err: f64,
    pub max_entry_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub value: f64,
    pub tensors: Vec<TensorCheck>,
}

impl LossCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub epsilon: f64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(LossCheck::max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub config: ViTConfig,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            config: ViTConfig::tiny(),
            epsilon: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

type LossFn<'a> = dyn Fn(&EncoderOutput<f64>) -> Result<(f64, OutputGrad<f64>)> + 'a;

/// Compares the analytic gradient of `loss` at `params` against central
/// differences `(L(w + eps) - L(w - eps)) / 2 eps`, entry by entry.
pub fn check_loss(
    name: &str,
    params: &ParamSet<f64>,
    cfg: &ViTConfig,
    img: &Image,
    loss: &LossFn<'_>,
    epsilon: f64,
    fault: Option<BackwardFault>,
) -> Result<LossCheck> {
    let (out, cache) = forward_with_cache(params, cfg, img)?;
    let (value, dout) = loss(&out)?;
    let mut analytic = params.zeros_like();
    match fault {
        None => backward(params, cfg, &cache, &out, &dout, &mut analytic),
        Some(f) => backward_with_fault(params, cfg, &cache, &out, &dout, &mut analytic, f),
    }

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let (o, _) = forward_with_cache(p, cfg, img)?;
        Ok(loss(&o)?.0)
    };

    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for ti in 0..params.tensors().len() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..params.tensors()[ti].numel() {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.tensors_mut()[ti].data[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.tensors()[ti].data[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            diff2 += abs * abs;
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel_err = diff2.sqrt() / f64::max(a2, n2).sqrt().max(REL_FLOOR);
        tensors.push(TensorCheck {
            name: params.tensors()[ti].name.clone(),
            numel: params.tensors()[ti].numel(),
            rel_err,
            max_entry_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(LossCheck {
        loss: name.to_string(),
        value,
        tensors,
    })
}

/// Adds a deterministic ripple to every parameter. Freshly initialized
/// weights give almost uniform attention, which would leave the attention
/// term with a vanishing gradient.
fn spread(mut p: ParamSet<f64>, phase: f64) -> ParamSet<f64> {
    for (k, t) in p.tensors_mut().iter_mut().enumerate() {
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += SPREAD * ((i as f64) * 0.618 + (k as f64) * 1.7 + phase).sin();
        }
    }
    p
}

const SPREAD: f64 = 0.3;

/// Full suite: each distillation term on its own, their default weighted
/// sum, and the classification cross-entropy (which also covers the head).
///
/// The teacher is a separately seeded model on a clean image; the student
/// sees a noise-corrupted copy, so every term is away from its minimum.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = opts.config.clone();
    cfg.validate()?;
    let student = spread(init_params(&cfg, opts.seed)?.cast::<f64>(), 0.0);
    let teacher = spread(init_params(&cfg, opts.seed.wrapping_add(1))?.cast::<f64>(), 1.0);

    let mut r = rng::stream(opts.seed, &[0x9c]);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let clean_data: Vec<f32> = (0..n).map(|_| rand::Rng::random::<f32>(&mut r)).collect();
    let clean = Image::new(cfg.image_size, cfg.image_size, cfg.channels, clean_data)?;
    let noisy = distortions::apply(&DistortionSpec::noise(0.3, opts.seed), &clean, 0)?;

    let (t_out, _) = forward_with_cache(&teacher, &cfg, &clean)?;
    let target = (t_out.tokens, t_out.attn);

    let full = DistillWeights::default();
    let arms = [
        ("cls", DistillWeights { lambda_cls: 1.0, lambda_patch: 0.0, lambda_attn: 0.0, ..full }),
        ("patch", DistillWeights { lambda_cls: 0.0, lambda_patch: 1.0, lambda_attn: 0.0, ..full }),
        ("attn", DistillWeights { lambda_cls: 0.0, lambda_patch: 0.0, lambda_attn: 1.0, ..full }),
        ("total", full),
    ];
    let mut checks = Vec::new();
    for (name, w) in arms {
        let loss = |o: &EncoderOutput<f64>| {
            let (v, _, g) = total_loss_with_grad(&target, o, &w)?;
            Ok((v, g))
        };
        checks.push(check_loss(name, &student, &cfg, &noisy, &loss, opts.epsilon, opts.fault)?);
    }

    let classes = 3;
    let (head_params, head_cfg) =
        super::params::attach_head(&student.cast::<f32>(), &cfg, classes, opts.seed)?;
    let mut head_params = head_params.cast::<f64>();
    // push the head away from zero so the class-token gradient is not tiny
    if let Some(w) = head_params.get_mut("head.weight") {
        w.data.iter_mut().enumerate().for_each(|(i, v)| *v += ((i as f64) * 0.37).sin());
    }
    let ce = |o: &EncoderOutput<f64>| {
        let logits = o.logits.as_ref().expect("head attached");
        let (v, g) = cross_entropy(logits, 1)?;
        Ok((
            v,
            OutputGrad {
                logits: Some(g),
                ..Default::default()
            },
        ))
    };
    checks.push(check_loss(
        "cross_entropy",
        &head_params,
        &head_cfg,
        &noisy,
        &ce,
        opts.epsilon,
        opts.fault,
    )?);

    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        epsilon: opts.epsilon,
        checks,
    })
}
