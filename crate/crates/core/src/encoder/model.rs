//! Forward and reverse passes of the pre-norm vision transformer.
//!
//! The forward pass records everything the backward pass needs in a
//! [`ForwardCache`]; the backward pass is written out by hand, layer by
//! layer, and accumulates into a [`ParamSet`]-shaped gradient buffer.

use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::params::{final_norm_idx, head_idx, layer_idx, ParamSet, CLS, PATCH_B, PATCH_W, POS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{
    add_row_bias, col_sum_acc, gemm, matmul, matmul_nt, matmul_tn_acc, softmax_in_place, Scalar,
    View,
};

pub const LN_EPS: f64 = 1e-6;

/// Last-layer token embeddings, `(P + 1) x d`. Row 0 is the class token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn cls(&self) -> &[T] {
        &self.data[..self.dim]
    }

    /// Patch tokens as a `P x d` row-major block.
    pub fn patches(&self) -> &[T] {
        &self.data[self.dim..]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Pre-softmax attention scores of the last layer's class-token query
/// against the P patch keys, one row per head (`K x P`). The class token's
/// score against itself is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps<T> {
    pub heads: usize,
    pub patches: usize,
    pub logits: Vec<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn head(&self, k: usize) -> &[T] {
        &self.logits[k * self.patches..(k + 1) * self.patches]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub tokens: TokenSequence<T>,
    pub attn: AttentionMaps<T>,
    /// Classifier logits, present when the parameters carry a head.
    pub logits: Option<Vec<T>>,
}

/// Gradient of a scalar loss with respect to the encoder outputs. Missing
/// parts are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad<T> {
    pub tokens: Option<Vec<T>>,
    pub attn: Option<Vec<T>>,
    pub logits: Option<Vec<T>>,
}

struct BlockCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    n1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn_out: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    n2: Vec<T>,
    hpre: Vec<T>,
    gact: Vec<T>,
}

/// Activations saved by [`forward_with_cache`] for [`backward`].
pub struct ForwardCache<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    final_xhat: Vec<T>,
    final_rstd: Vec<T>,
}

fn check_input<T: Scalar>(params: &ParamSet<T>, cfg: &ViTConfig, img: &Image) -> Result<()> {
    cfg.validate()?;
    if img.height() != cfg.image_size || img.width() != cfg.image_size {
        return Err(Error::Input(format!(
            "image is {}x{}, encoder expects {}x{}",
            img.height(),
            img.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    if img.channels() != cfg.channels {
        return Err(Error::Input(format!(
            "image has {} channels, encoder expects {}",
            img.channels(),
            cfg.channels
        )));
    }
    params.check_layout(cfg)
}

/// Cuts the image into a `P x (C * p * p)` matrix. Patches are ordered
/// row-major over the grid; within a patch, values are ordered by channel,
/// then row, then column.
pub fn patchify<T: Scalar>(cfg: &ViTConfig, img: &Image) -> Vec<T> {
    let (g, ps, pd) = (cfg.grid(), cfg.patch_size, cfg.patch_dim());
    let mut out = vec![T::zero(); cfg.num_patches() * pd];
    for gy in 0..g {
        for gx in 0..g {
            let row = &mut out[(gy * g + gx) * pd..(gy * g + gx + 1) * pd];
            let mut i = 0;
            for c in 0..cfg.channels {
                for py in 0..ps {
                    for px in 0..ps {
                        row[i] = T::from_f32(img.get(c, gy * ps + py, gx * ps + px)).unwrap();
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let eps = T::lit(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
}

/// Accumulates parameter gradients and adds the input gradient into `dx`.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rstd.len() {
        let dy_r = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dxhat[j] = dy_r[j] * gain[j];
            dgain[j] += dy_r[j] * xh[j];
            dbias[j] += dy_r[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

/// Tanh approximation of GELU.
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Token matrix entering the first transformer block: projected patches
/// with the class token prepended and position embeddings added.
pub fn embed<T: Scalar>(params: &ParamSet<T>, cfg: &ViTConfig, img: &Image) -> Result<Vec<T>> {
    check_input(params, cfg, img)?;
    let patches = patchify(cfg, img);
    Ok(embed_patches(params, cfg, &patches))
}

fn embed_patches<T: Scalar>(params: &ParamSet<T>, cfg: &ViTConfig, patches: &[T]) -> Vec<T> {
    let (n, d, np, pd) = (cfg.seq_len(), cfg.dim, cfg.num_patches(), cfg.patch_dim());
    let mut x = vec![T::zero(); n * d];
    matmul(patches, params.at(PATCH_W), &mut x[d..], np, pd, d, false);
    add_row_bias(&mut x[d..], params.at(PATCH_B));
    x[..d].copy_from_slice(params.at(CLS));
    for (v, p) in x.iter_mut().zip(params.at(POS)) {
        *v += *p;
    }
    x
}

/// Runs the encoder and keeps the activations needed for [`backward`].
pub fn forward_with_cache<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    img: &Image,
) -> Result<(EncoderOutput<T>, ForwardCache<T>)> {
    check_input(params, cfg, img)?;
    let (n, d, heads, dh, hid) = (cfg.seq_len(), cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden());
    let np = cfg.num_patches();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let patches = patchify(cfg, img);
    let mut x = embed_patches(params, cfg, &patches);
    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut attn_logits = vec![T::zero(); heads * np];

    for l in 0..cfg.depth {
        let li = layer_idx(l);
        let mut bc = BlockCache {
            xhat1: vec![T::zero(); n * d],
            rstd1: vec![T::zero(); n],
            n1: vec![T::zero(); n * d],
            qkv: vec![T::zero(); n * 3 * d],
            probs: vec![T::zero(); heads * n * n],
            attn_out: vec![T::zero(); n * d],
            xhat2: vec![T::zero(); n * d],
            rstd2: vec![T::zero(); n],
            n2: vec![T::zero(); n * d],
            hpre: vec![T::zero(); n * hid],
            gact: vec![T::zero(); n * hid],
        };

        layer_norm(
            &x,
            params.at(li.norm1_w),
            params.at(li.norm1_b),
            &mut bc.n1,
            &mut bc.xhat1,
            &mut bc.rstd1,
        );
        matmul(&bc.n1, params.at(li.qkv_w), &mut bc.qkv, n, d, 3 * d, false);
        add_row_bias(&mut bc.qkv, params.at(li.qkv_b));

        for h in 0..heads {
            let s = &mut bc.probs[h * n * n..(h + 1) * n * n];
            gemm(
                n,
                dh,
                n,
                View::at(&bc.qkv, h * dh, 3 * d, 1),
                View::at(&bc.qkv, d + h * dh, 1, 3 * d),
                T::zero(),
                s,
                0,
                n,
                1,
            );
            s.iter_mut().for_each(|v| *v *= scale);
            if l + 1 == cfg.depth {
                attn_logits[h * np..(h + 1) * np].copy_from_slice(&s[1..n]);
            }
            for row in s.chunks_exact_mut(n) {
                softmax_in_place(row);
            }
            gemm(
                n,
                n,
                dh,
                View::rm(&bc.probs[h * n * n..(h + 1) * n * n], n),
                View::at(&bc.qkv, 2 * d + h * dh, 3 * d, 1),
                T::zero(),
                &mut bc.attn_out,
                h * dh,
                d,
                1,
            );
        }
        matmul(&bc.attn_out, params.at(li.proj_w), &mut x, n, d, d, true);
        add_row_bias(&mut x, params.at(li.proj_b));

        layer_norm(
            &x,
            params.at(li.norm2_w),
            params.at(li.norm2_b),
            &mut bc.n2,
            &mut bc.xhat2,
            &mut bc.rstd2,
        );
        matmul(&bc.n2, params.at(li.fc1_w), &mut bc.hpre, n, d, hid, false);
        add_row_bias(&mut bc.hpre, params.at(li.fc1_b));
        for (g, &h) in bc.gact.iter_mut().zip(&bc.hpre) {
            *g = gelu(h);
        }
        matmul(&bc.gact, params.at(li.fc2_w), &mut x, n, hid, d, true);
        add_row_bias(&mut x, params.at(li.fc2_b));

        blocks.push(bc);
    }

    let (nw, nb) = final_norm_idx(cfg);
    let mut tokens = vec![T::zero(); n * d];
    let mut final_xhat = vec![T::zero(); n * d];
    let mut final_rstd = vec![T::zero(); n];
    layer_norm(
        &x,
        params.at(nw),
        params.at(nb),
        &mut tokens,
        &mut final_xhat,
        &mut final_rstd,
    );

    let logits = cfg.num_classes.map(|c| {
        let (hw, hb) = head_idx(cfg);
        let mut out = params.at(hb).to_vec();
        matmul(&tokens[..d], params.at(hw), &mut out, 1, d, c, true);
        out
    });

    let out = EncoderOutput {
        tokens: TokenSequence {
            rows: n,
            dim: d,
            data: tokens,
        },
        attn: AttentionMaps {
            heads,
            patches: np,
            logits: attn_logits,
        },
        logits,
    };
    let cache = ForwardCache {
        patches,
        blocks,
        final_xhat,
        final_rstd,
    };
    Ok((out, cache))
}

/// Encoder forward pass: last-layer tokens and class-row attention logits.
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    img: &Image,
) -> Result<(TokenSequence<T>, AttentionMaps<T>)> {
    let (out, _) = forward_with_cache(params, cfg, img)?;
    Ok((out.tokens, out.attn))
}

/// Classifier logits from the class token. Requires a head.
pub fn classify<T: Scalar>(params: &ParamSet<T>, cfg: &ViTConfig, img: &Image) -> Result<Vec<T>> {
    if cfg.num_classes.is_none() || !params.has_head() {
        return Err(Error::Config("encoder has no classifier head".into()));
    }
    let (out, _) = forward_with_cache(params, cfg, img)?;
    Ok(out.logits.expect("head present"))
}

/// Test hook: corrupts one path of the backward pass so gradient checks can
/// demonstrate that they catch errors.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Negates the gradient flowing from the MLP branch of the last block
    /// into the residual stream.
    FlipLastMlpInput,
}

/// Accumulates `d loss / d params` into `grads`, given the loss gradient
/// with respect to the encoder outputs.
pub fn backward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    cache: &ForwardCache<T>,
    out: &EncoderOutput<T>,
    dout: &OutputGrad<T>,
    grads: &mut ParamSet<T>,
) {
    backward_impl(params, cfg, cache, out, dout, grads, None)
}

#[doc(hidden)]
pub fn backward_with_fault<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    cache: &ForwardCache<T>,
    out: &EncoderOutput<T>,
    dout: &OutputGrad<T>,
    grads: &mut ParamSet<T>,
    fault: BackwardFault,
) {
    backward_impl(params, cfg, cache, out, dout, grads, Some(fault))
}

fn backward_impl<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    cache: &ForwardCache<T>,
    out: &EncoderOutput<T>,
    dout: &OutputGrad<T>,
    grads: &mut ParamSet<T>,
    fault: Option<BackwardFault>,
) {
    let (n, d, heads, dh, hid) = (cfg.seq_len(), cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden());
    let np = cfg.num_patches();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut dtok = match &dout.tokens {
        Some(g) => g.clone(),
        None => vec![T::zero(); n * d],
    };
    if let (Some(dl), Some(c)) = (&dout.logits, cfg.num_classes) {
        let (hw, hb) = head_idx(cfg);
        matmul_tn_acc(out.tokens.cls(), dl, grads.at_mut(hw), 1, d, c);
        col_sum_acc(dl, grads.at_mut(hb));
        matmul_nt(dl, params.at(hw), &mut dtok[..d], 1, c, d, true);
    }

    let mut dx = vec![T::zero(); n * d];
    {
        let (nw, nb) = final_norm_idx(cfg);
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];
        layer_norm_backward(
            &dtok,
            &cache.final_xhat,
            &cache.final_rstd,
            params.at(nw),
            &mut dgain,
            &mut dbias,
            &mut dx,
        );
        add_into(grads.at_mut(nw), &dgain);
        add_into(grads.at_mut(nb), &dbias);
    }

    let mut dg = vec![T::zero(); n * hid];
    let mut dn = vec![T::zero(); n * d];
    let mut d_o = vec![T::zero(); n * d];
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut da = vec![T::zero(); n * n];
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];

    for l in (0..cfg.depth).rev() {
        let li = layer_idx(l);
        let bc = &cache.blocks[l];

        // MLP branch
        matmul_tn_acc(&bc.gact, &dx, grads.at_mut(li.fc2_w), n, hid, d);
        col_sum_acc(&dx, grads.at_mut(li.fc2_b));
        matmul_nt(&dx, params.at(li.fc2_w), &mut dg, n, d, hid, false);
        for (g, &h) in dg.iter_mut().zip(&bc.hpre) {
            *g *= gelu_grad(h);
        }
        matmul_tn_acc(&bc.n2, &dg, grads.at_mut(li.fc1_w), n, d, hid);
        col_sum_acc(&dg, grads.at_mut(li.fc1_b));
        matmul_nt(&dg, params.at(li.fc1_w), &mut dn, n, hid, d, false);
        if fault == Some(BackwardFault::FlipLastMlpInput) && l + 1 == cfg.depth {
            dn.iter_mut().for_each(|v| *v = -*v);
        }
        dgain.iter_mut().for_each(|v| *v = T::zero());
        dbias.iter_mut().for_each(|v| *v = T::zero());
        layer_norm_backward(
            &dn,
            &bc.xhat2,
            &bc.rstd2,
            params.at(li.norm2_w),
            &mut dgain,
            &mut dbias,
            &mut dx,
        );
        add_into(grads.at_mut(li.norm2_w), &dgain);
        add_into(grads.at_mut(li.norm2_b), &dbias);

        // attention branch
        matmul_tn_acc(&bc.attn_out, &dx, grads.at_mut(li.proj_w), n, d, d);
        col_sum_acc(&dx, grads.at_mut(li.proj_b));
        matmul_nt(&dx, params.at(li.proj_w), &mut d_o, n, d, d, false);
        dqkv.iter_mut().for_each(|v| *v = T::zero());
        for h in 0..heads {
            let probs = &bc.probs[h * n * n..(h + 1) * n * n];
            // dA = dO_h V_h^T
            gemm(
                n,
                dh,
                n,
                View::at(&d_o, h * dh, d, 1),
                View::at(&bc.qkv, 2 * d + h * dh, 1, 3 * d),
                T::zero(),
                &mut da,
                0,
                n,
                1,
            );
            // dV_h = A^T dO_h
            gemm(
                n,
                n,
                dh,
                View::at(probs, 0, 1, n),
                View::at(&d_o, h * dh, d, 1),
                T::one(),
                &mut dqkv,
                2 * d + h * dh,
                3 * d,
                1,
            );
            // softmax backward, in place: dS = A * (dA - <dA, A>)
            for (da_row, p_row) in da.chunks_exact_mut(n).zip(probs.chunks_exact(n)) {
                let dot: T = da_row.iter().zip(p_row).map(|(a, p)| *a * *p).sum();
                for (g, &p) in da_row.iter_mut().zip(p_row) {
                    *g = p * (*g - dot);
                }
            }
            if l + 1 == cfg.depth {
                if let Some(dattn) = &dout.attn {
                    for (g, &e) in da[1..n].iter_mut().zip(&dattn[h * np..(h + 1) * np]) {
                        *g += e;
                    }
                }
            }
            da.iter_mut().for_each(|v| *v *= scale);
            // dQ_h = dS K_h, dK_h = dS^T Q_h
            gemm(
                n,
                n,
                dh,
                View::rm(&da, n),
                View::at(&bc.qkv, d + h * dh, 3 * d, 1),
                T::one(),
                &mut dqkv,
                h * dh,
                3 * d,
                1,
            );
            gemm(
                n,
                n,
                dh,
                View::at(&da, 0, 1, n),
                View::at(&bc.qkv, h * dh, 3 * d, 1),
                T::one(),
                &mut dqkv,
                d + h * dh,
                3 * d,
                1,
            );
        }
        matmul_tn_acc(&bc.n1, &dqkv, grads.at_mut(li.qkv_w), n, d, 3 * d);
        col_sum_acc(&dqkv, grads.at_mut(li.qkv_b));
        matmul_nt(&dqkv, params.at(li.qkv_w), &mut dn, n, 3 * d, d, false);
        dgain.iter_mut().for_each(|v| *v = T::zero());
        dbias.iter_mut().for_each(|v| *v = T::zero());
        layer_norm_backward(
            &dn,
            &bc.xhat1,
            &bc.rstd1,
            params.at(li.norm1_w),
            &mut dgain,
            &mut dbias,
            &mut dx,
        );
        add_into(grads.at_mut(li.norm1_w), &dgain);
        add_into(grads.at_mut(li.norm1_b), &dbias);
    }

    add_into(grads.at_mut(POS), &dx);
    add_into(grads.at_mut(CLS), &dx[..d]);
    matmul_tn_acc(&cache.patches, &dx[d..], grads.at_mut(PATCH_W), np, cfg.patch_dim(), d);
    col_sum_acc(&dx[d..], grads.at_mut(PATCH_B));
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Forward, loss, and backward for one image. `loss_fn` maps the encoder
/// outputs to a scalar and its output gradient. Parameter gradients are
/// added to `grads`; the loss value is returned.
pub fn accumulate_grad<T, F>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    img: &Image,
    loss_fn: F,
    grads: &mut ParamSet<T>,
) -> Result<T>
where
    T: Scalar,
    F: FnOnce(&EncoderOutput<T>) -> Result<(T, OutputGrad<T>)>,
{
    let (out, cache) = forward_with_cache(params, cfg, img)?;
    let (loss, dout) = loss_fn(&out)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "loss is {loss:?}; class-token norm {:?}",
            out.tokens.cls().iter().map(|v| *v * *v).sum::<T>().sqrt()
        )));
    }
    backward(params, cfg, &cache, &out, &dout, grads);
    Ok(loss)
}

/// Loss value and exact gradients for every parameter tensor.
pub fn grad<T, F>(params: &ParamSet<T>, cfg: &ViTConfig, img: &Image, loss_fn: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: FnOnce(&EncoderOutput<T>) -> Result<(T, OutputGrad<T>)>,
{
    let mut grads = params.zeros_like();
    let loss = accumulate_grad(params, cfg, img, loss_fn, &mut grads)?;
    Ok((loss, grads))
}
