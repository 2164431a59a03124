//! Teacher-student alignment losses on class token, patch tokens and
//! last-layer attention.
//!
//! Squared distances are summed over the embedding dimension (no
//! averaging), so `loss_cls` is `||h_s - h_t||^2` and `loss_patch` is the
//! per-patch mean of the same quantity. The attention term is
//! `KL(softmax(A_t / tau) || softmax(A_s / tau))` averaged over heads,
//! evaluated with log-sum-exp. There is no `tau^2` rescaling. Teacher
//! quantities are constants: gradients are only ever produced for the
//! student side.

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionMaps, EncoderOutput, OutputGrad, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Scalar};

/// Weights of the three alignment terms and the attention temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillWeights {
    pub lambda_cls: f64,
    pub lambda_patch: f64,
    pub lambda_attn: f64,
    pub tau: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_patch: 1.0,
            lambda_attn: 50.0,
            tau: 2.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_cls, self.lambda_patch, self.lambda_attn];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {ws:?}")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_cls == 0.0 && self.lambda_patch == 0.0 && self.lambda_attn == 0.0
    }
}

/// Per-term loss values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub patch: f64,
    pub attn: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cls: f64, patch: f64, attn: f64, w: &DistillWeights) -> Self {
        let mut total = 0.0;
        if w.lambda_cls != 0.0 {
            total += w.lambda_cls * cls;
        }
        if w.lambda_patch != 0.0 {
            total += w.lambda_patch * patch;
        }
        if w.lambda_attn != 0.0 {
            total += w.lambda_attn * attn;
        }
        Self {
            cls,
            patch,
            attn,
            total,
        }
    }

    /// Component-wise mean over a batch of breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.cls += b.cls;
            acc.patch += b.patch;
            acc.attn += b.attn;
            acc.total += b.total;
        }
        LossBreakdown {
            cls: acc.cls / n,
            patch: acc.patch / n,
            attn: acc.attn / n,
            total: acc.total / n,
        }
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `||h_s - h_t||^2`.
pub fn loss_cls<T: Scalar>(h_s: &[T], h_t: &[T]) -> Result<T> {
    if h_s.len() != h_t.len() {
        return Err(Error::Input(format!(
            "class tokens differ in length: {} vs {}",
            h_s.len(),
            h_t.len()
        )));
    }
    Ok(sq_dist(h_s, h_t))
}

/// Mean over patches of the squared distance between matching rows of two
/// row-major `P x dim` matrices.
pub fn loss_patch<T: Scalar>(h_s: &[T], h_t: &[T], dim: usize) -> Result<T> {
    if h_s.len() != h_t.len() || dim == 0 || h_s.len() % dim != 0 || h_s.is_empty() {
        return Err(Error::Input(format!(
            "patch matrices incompatible: {} and {} values with dim {dim}",
            h_s.len(),
            h_t.len()
        )));
    }
    let p = h_s.len() / dim;
    Ok(sq_dist(h_s, h_t) / T::from_usize(p).unwrap())
}

fn check_attn<T>(a_t: &[T], a_s: &[T], heads: usize, tau: f64) -> Result<usize> {
    if a_t.len() != a_s.len() || heads == 0 || a_t.len() % heads != 0 || a_t.is_empty() {
        return Err(Error::Input(format!(
            "attention maps incompatible: {} and {} logits over {heads} heads",
            a_t.len(),
            a_s.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("temperature must be > 0, got {tau}")));
    }
    Ok(a_t.len() / heads)
}

/// Head-averaged KL divergence between temperature-softened teacher and
/// student attention logits (`heads x P`, row-major). Optionally writes
/// `d loss / d a_s` into `grad`.
fn attn_kl<T: Scalar>(
    a_t: &[T],
    a_s: &[T],
    heads: usize,
    tau: f64,
    mut grad: Option<&mut [T]>,
) -> Result<T> {
    let p = check_attn(a_t, a_s, heads, tau)?;
    let inv_tau = T::one() / T::lit(tau);
    let inv_k = T::one() / T::from_usize(heads).unwrap();
    let mut total = T::zero();
    let mut zt = vec![T::zero(); p];
    let mut zs = vec![T::zero(); p];
    for k in 0..heads {
        for i in 0..p {
            zt[i] = a_t[k * p + i] * inv_tau;
            zs[i] = a_s[k * p + i] * inv_tau;
        }
        let lt = log_sum_exp(&zt);
        let ls = log_sum_exp(&zs);
        let mut kl = T::zero();
        for i in 0..p {
            let log_p = zt[i] - lt;
            let log_q = zs[i] - ls;
            let pi = log_p.exp();
            kl += pi * (log_p - log_q);
            if let Some(g) = grad.as_deref_mut() {
                g[k * p + i] = (log_q.exp() - pi) * inv_tau * inv_k;
            }
        }
        total += kl;
    }
    Ok((total * inv_k).max(T::zero()))
}

pub fn loss_attn<T: Scalar>(a_t: &[T], a_s: &[T], heads: usize, tau: f64) -> Result<T> {
    attn_kl(a_t, a_s, heads, tau, None)
}

fn check_pair<T: Scalar>(
    t: &(TokenSequence<T>, AttentionMaps<T>),
    s: &(TokenSequence<T>, AttentionMaps<T>),
) -> Result<()> {
    if t.0.rows != s.0.rows || t.0.dim != s.0.dim || t.0.data.len() != s.0.data.len() {
        return Err(Error::Input(format!(
            "token sequences differ: {}x{} vs {}x{}",
            t.0.rows, t.0.dim, s.0.rows, s.0.dim
        )));
    }
    if t.1.heads != s.1.heads || t.1.patches != s.1.patches || t.1.logits.len() != s.1.logits.len()
    {
        return Err(Error::Input(format!(
            "attention maps differ: {}x{} vs {}x{}",
            t.1.heads, t.1.patches, s.1.heads, s.1.patches
        )));
    }
    Ok(())
}

/// All three terms and their weighted sum.
pub fn total_loss<T: Scalar>(
    teacher: &(TokenSequence<T>, AttentionMaps<T>),
    student: &(TokenSequence<T>, AttentionMaps<T>),
    w: &DistillWeights,
) -> Result<LossBreakdown> {
    check_pair(teacher, student)?;
    let cls = loss_cls(student.0.cls(), teacher.0.cls())?;
    let patch = loss_patch(student.0.patches(), teacher.0.patches(), student.0.dim)?;
    let attn = loss_attn(&teacher.1.logits, &student.1.logits, student.1.heads, w.tau)?;
    Ok(LossBreakdown::combine(
        cls.to_f64().unwrap(),
        patch.to_f64().unwrap(),
        attn.to_f64().unwrap(),
        w,
    ))
}

/// Loss breakdown plus the gradient of the weighted total with respect to
/// the student outputs. Terms with zero weight contribute no gradient.
pub fn total_loss_with_grad<T: Scalar>(
    teacher: &(TokenSequence<T>, AttentionMaps<T>),
    student: &EncoderOutput<T>,
    w: &DistillWeights,
) -> Result<(T, LossBreakdown, OutputGrad<T>)> {
    let s = (student.tokens.clone(), student.attn.clone());
    check_pair(teacher, &s)?;
    let (d, rows) = (s.0.dim, s.0.rows);
    let ht = &teacher.0.data;
    let hs = &s.0.data;

    let cls = loss_cls(s.0.cls(), teacher.0.cls())?;
    let patch = loss_patch(s.0.patches(), teacher.0.patches(), d)?;
    let mut dattn = vec![T::zero(); s.1.logits.len()];
    let attn = attn_kl(&teacher.1.logits, &s.1.logits, s.1.heads, w.tau, Some(&mut dattn))?;

    let two = T::lit(2.0);
    let mut dtok = vec![T::zero(); rows * d];
    if w.lambda_cls != 0.0 {
        let lc = T::lit(w.lambda_cls);
        for j in 0..d {
            dtok[j] += two * lc * (hs[j] - ht[j]);
        }
    }
    if w.lambda_patch != 0.0 {
        let lp = T::lit(w.lambda_patch) / T::from_usize(rows - 1).unwrap();
        for j in d..rows * d {
            dtok[j] += two * lp * (hs[j] - ht[j]);
        }
    }
    let attn_grad = if w.lambda_attn != 0.0 {
        let la = T::lit(w.lambda_attn);
        dattn.iter_mut().for_each(|v| *v *= la);
        Some(dattn)
    } else {
        None
    };

    let mut total = T::zero();
    if w.lambda_cls != 0.0 {
        total += T::lit(w.lambda_cls) * cls;
    }
    if w.lambda_patch != 0.0 {
        total += T::lit(w.lambda_patch) * patch;
    }
    if w.lambda_attn != 0.0 {
        total += T::lit(w.lambda_attn) * attn;
    }
    let breakdown = LossBreakdown::combine(
        cls.to_f64().unwrap(),
        patch.to_f64().unwrap(),
        attn.to_f64().unwrap(),
        w,
    );
    Ok((
        total,
        breakdown,
        OutputGrad {
            tokens: Some(dtok),
            attn: attn_grad,
            logits: None,
        },
    ))
}
