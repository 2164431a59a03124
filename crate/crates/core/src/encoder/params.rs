use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::rng;

/// A named dense tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

const PER_LAYER: usize = 12;
const STEM: usize = 4;

/// Positions of the per-layer tensors inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIdx {
    pub norm1_w: usize,
    pub norm1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub norm2_w: usize,
    pub norm2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

pub(crate) const PATCH_W: usize = 0;
pub(crate) const PATCH_B: usize = 1;
pub(crate) const CLS: usize = 2;
pub(crate) const POS: usize = 3;

pub(crate) fn layer_idx(layer: usize) -> LayerIdx {
    let b = STEM + layer * PER_LAYER;
    LayerIdx {
        norm1_w: b,
        norm1_b: b + 1,
        qkv_w: b + 2,
        qkv_b: b + 3,
        proj_w: b + 4,
        proj_b: b + 5,
        norm2_w: b + 6,
        norm2_b: b + 7,
        fc1_w: b + 8,
        fc1_b: b + 9,
        fc2_w: b + 10,
        fc2_b: b + 11,
    }
}

pub(crate) fn final_norm_idx(cfg: &ViTConfig) -> (usize, usize) {
    let b = STEM + cfg.depth * PER_LAYER;
    (b, b + 1)
}

pub(crate) fn head_idx(cfg: &ViTConfig) -> (usize, usize) {
    let b = STEM + cfg.depth * PER_LAYER + 2;
    (b, b + 1)
}

/// Names and shapes of every tensor implied by `cfg`, in storage order.
/// The classifier head is included only when `cfg.num_classes` is set.
pub fn layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.seq_len(), d]),
    ];
    for l in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("norm1.weight"), vec![d]),
            (p("norm1.bias"), vec![d]),
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![3 * d]),
            (p("attn.proj.weight"), vec![d, d]),
            (p("attn.proj.bias"), vec![d]),
            (p("norm2.weight"), vec![d]),
            (p("norm2.bias"), vec![d]),
            (p("mlp.fc1.weight"), vec![d, cfg.hidden()]),
            (p("mlp.fc1.bias"), vec![cfg.hidden()]),
            (p("mlp.fc2.weight"), vec![cfg.hidden(), d]),
            (p("mlp.fc2.bias"), vec![d]),
        ]);
    }
    out.push(("norm.weight".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    if let Some(c) = cfg.num_classes {
        out.push(("head.weight".to_string(), vec![d, c]));
        out.push(("head.bias".to_string(), vec![c]));
    }
    out
}

/// All trainable tensors of one encoder (and optionally its classifier
/// head). Also used for gradients and optimizer moments, which share the
/// exact same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(cfg: &ViTConfig) -> Self {
        Self {
            tensors: layout(cfg)
                .into_iter()
                .map(|(n, s)| Tensor::zeros(n, s))
                .collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn at(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub(crate) fn at_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn has_head(&self) -> bool {
        self.get("head.weight").is_some()
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ViTConfig) -> Result<()> {
        let want = layout(cfg);
        if want.len() != self.tensors.len() {
            return Err(Error::Input(format!(
                "parameter set has {} tensors, config implies {}",
                self.tensors.len(),
                want.len()
            )));
        }
        for ((name, shape), t) in want.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Input(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamSet<impl Scalar>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Drops the classifier head, if any.
    pub fn backbone(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|t| !t.name.starts_with("head."))
                .cloned()
                .collect(),
        }
    }
}

impl ParamSet<f32> {
    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Standard deviation of the truncated-normal initializer for weight
/// matrices, position embeddings and the class token.
pub const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: weight matrices, `pos_embed`, `cls_token`
/// and the head weight are drawn from a normal with std 0.02 truncated at
/// two standard deviations; biases are zero; normalization gains are one.
/// Each tensor draws from its own stream derived from `(seed, tensor index)`.
pub fn init_params(cfg: &ViTConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut ps = ParamSet::<f32>::zeros(cfg);
    for (i, t) in ps.tensors.iter_mut().enumerate() {
        let name = t.name.as_str();
        if name.ends_with(".bias") {
            continue;
        }
        if name.contains("norm") {
            t.data.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        let mut r = rng::stream(seed, &[0x1417, i as u64]);
        t.data
            .iter_mut()
            .for_each(|v| *v = trunc_normal(&mut r, INIT_STD) as f32);
    }
    Ok(ps)
}

/// Adds (or replaces) a freshly initialized classifier head of width
/// `num_classes`. Returns the matching config.
pub fn attach_head(
    params: &ParamSet<f32>,
    cfg: &ViTConfig,
    num_classes: usize,
    seed: u64,
) -> Result<(ParamSet<f32>, ViTConfig)> {
    let cfg = cfg.with_classes(num_classes);
    cfg.validate()?;
    let mut ps = params.backbone();
    let mut w = Tensor::<f32>::zeros("head.weight", vec![cfg.dim, num_classes]);
    let mut r = rng::stream(seed, &[0x4ead]);
    w.data
        .iter_mut()
        .for_each(|v| *v = trunc_normal(&mut r, INIT_STD) as f32);
    ps.tensors.push(w);
    ps.tensors
        .push(Tensor::zeros("head.bias", vec![num_classes]));
    ps.check_layout(&cfg)?;
    Ok((ps, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = ViTConfig::tiny();
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        assert_eq!(a.digest(), init_params(&cfg, 3).unwrap().digest());
    }

    #[test]
    fn per_head_width_follows_dim_and_heads() {
        let cfg = ViTConfig {
            dim: 64,
            heads: 4,
            ..ViTConfig::default()
        };
        assert_eq!(cfg.head_dim(), 16);
        let ps = init_params(&cfg, 0).unwrap();
        assert_eq!(ps.get("blocks.0.attn.qkv.weight").unwrap().shape, vec![64, 192]);
        ps.check_layout(&cfg).unwrap();
    }

    #[test]
    fn init_scales() {
        let ps = init_params(&ViTConfig::default(), 1).unwrap();
        assert!(ps.get("norm.weight").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(ps.get("blocks.1.mlp.fc1.bias").unwrap().data.iter().all(|&v| v == 0.0));
        let w = &ps.get("blocks.2.mlp.fc1.weight").unwrap().data;
        assert!(w.iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let var = w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        // truncation at 2 std shrinks variance to ~0.774 of 0.02^2
        assert!((var.sqrt() - 0.02 * 0.774f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn head_attach_and_strip() {
        let cfg = ViTConfig::tiny();
        let ps = init_params(&cfg, 0).unwrap();
        let (with_head, hcfg) = attach_head(&ps, &cfg, 5, 1).unwrap();
        assert!(with_head.has_head());
        assert_eq!(hcfg.num_classes, Some(5));
        assert_eq!(with_head.backbone(), ps);
        assert!(ps.check_layout(&hcfg).is_err());
    }
}
