use std::collections::HashMap;
use std::convert::Infallible;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

/// Per-block weights, generic over the slot type so the same layout serves
/// for concrete tensors, graph handles and shape templates.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub norm_gamma: P,
    pub norm_beta: P,
    pub head_w: P,
    pub head_b: P,
}

/// All learnable tensors of a model.
pub type ModelParams<T> = ViTWeights<Tensor<T>>;

impl<P> BlockWeights<P> {
    fn try_map<Q, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<BlockWeights<Q>, E> {
        let mut g = |name: &str, p: &P| f(&format!("{prefix}.{name}"), p);
        Ok(BlockWeights {
            norm1_gamma: g("norm1.gamma", &self.norm1_gamma)?,
            norm1_beta: g("norm1.beta", &self.norm1_beta)?,
            wq: g("attn.wq", &self.wq)?,
            bq: g("attn.bq", &self.bq)?,
            wk: g("attn.wk", &self.wk)?,
            bk: g("attn.bk", &self.bk)?,
            wv: g("attn.wv", &self.wv)?,
            bv: g("attn.bv", &self.bv)?,
            wo: g("attn.wo", &self.wo)?,
            bo: g("attn.bo", &self.bo)?,
            norm2_gamma: g("norm2.gamma", &self.norm2_gamma)?,
            norm2_beta: g("norm2.beta", &self.norm2_beta)?,
            mlp_w1: g("mlp.w1", &self.mlp_w1)?,
            mlp_b1: g("mlp.b1", &self.mlp_b1)?,
            mlp_w2: g("mlp.w2", &self.mlp_w2)?,
            mlp_b2: g("mlp.b2", &self.mlp_b2)?,
        })
    }

    fn slots_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }
}

impl<P> ViTWeights<P> {
    /// Maps every slot in canonical order, passing its dotted name.
    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<ViTWeights<Q>, E> {
        let patch_w = f("patch_embed.weight", &self.patch_w)?;
        let patch_b = f("patch_embed.bias", &self.patch_b)?;
        let cls_token = f("cls_token", &self.cls_token)?;
        let pos_embed = f("pos_embed", &self.pos_embed)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
            .collect::<std::result::Result<Vec<_>, E>>()?;
        Ok(ViTWeights {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: f("norm.gamma", &self.norm_gamma)?,
            norm_beta: f("norm.beta", &self.norm_beta)?,
            head_w: f("head.weight", &self.head_w)?,
            head_b: f("head.bias", &self.head_b)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ViTWeights<Q> {
        let mapped: std::result::Result<_, Infallible> = self.try_map(|n, p| Ok(f(n, p)));
        match mapped {
            Ok(w) => w,
            Err(never) => match never {},
        }
    }

    /// Slots in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        names.into_iter().zip(self.slots()).collect()
    }

    /// Slots in canonical order.
    pub fn slots(&self) -> Vec<&P> {
        let mut out: Vec<&P> = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.norm1_gamma,
                &b.norm1_beta,
                &b.wq,
                &b.bq,
                &b.wk,
                &b.bk,
                &b.wv,
                &b.bv,
                &b.wo,
                &b.bo,
                &b.norm2_gamma,
                &b.norm2_beta,
                &b.mlp_w1,
                &b.mlp_b1,
                &b.mlp_w2,
                &b.mlp_b2,
            ]);
        }
        out.extend([&self.norm_gamma, &self.norm_beta, &self.head_w, &self.head_b]);
        out
    }

    /// Mutable slots in canonical order.
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for block in &mut self.blocks {
            out.extend(block.slots_mut());
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Pairs up two structurally identical weight sets.
    pub fn zip<'a, Q>(&'a self, other: &'a ViTWeights<Q>) -> Vec<(&'a P, &'a Q)> {
        self.slots().into_iter().zip(other.slots()).collect()
    }
}

impl ViTConfig {
    /// Shape template of every parameter tensor.
    pub fn param_shapes(&self) -> ViTWeights<Vec<usize>> {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let block = BlockWeights {
            norm1_gamma: vec![d],
            norm1_beta: vec![d],
            wq: vec![d, d],
            bq: vec![d],
            wk: vec![d, d],
            bk: vec![d],
            wv: vec![d, d],
            bv: vec![d],
            wo: vec![d, d],
            bo: vec![d],
            norm2_gamma: vec![d],
            norm2_beta: vec![d],
            mlp_w1: vec![d, hidden],
            mlp_b1: vec![hidden],
            mlp_w2: vec![hidden, d],
            mlp_b2: vec![d],
        };
        ViTWeights {
            patch_w: vec![self.patch_dim(), d],
            patch_b: vec![d],
            cls_token: vec![1, d],
            pos_embed: vec![self.tokens(), d],
            blocks: vec![block; self.depth],
            norm_gamma: vec![d],
            norm_beta: vec![d],
            head_w: vec![d, self.num_classes],
            head_b: vec![self.num_classes],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .named()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy)]
enum Role {
    Gain,
    Zero,
    Weight,
}

fn role(name: &str) -> Role {
    match name.rsplit('.').next().unwrap_or(name) {
        "gamma" => Role::Gain,
        "beta" | "bias" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "cls_token" => Role::Zero,
        _ => Role::Weight,
    }
}

fn truncated_normal(rng: &mut RngState, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Standard initialization: truncated normal (std 0.02, cut at 2 std)
    /// for projections and positional embeddings, zeros for biases and the
    /// class token, unit layer-norm gains.
    pub fn init(config: &ViTConfig, rng: &mut RngState) -> Self {
        config.param_shapes().map(|name, shape| {
            let n: usize = shape.iter().product();
            let data = match role(name) {
                Role::Gain => vec![T::one(); n],
                Role::Zero => vec![T::zero(); n],
                Role::Weight => (0..n).map(|_| T::from_f64_lossy(truncated_normal(rng, 0.02))).collect(),
            };
            Tensor::from_parts(shape.clone(), data)
        })
    }

    /// Every entry drawn from N(0, std²), gains from N(1, std²). Used for
    /// verification at parameter scales where no gradient is negligible.
    pub fn randomized(config: &ViTConfig, std: f64, rng: &mut RngState) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        config.param_shapes().map(|name, shape| {
            let n: usize = shape.iter().product();
            let offset = if matches!(role(name), Role::Gain) { 1.0 } else { 0.0 };
            let data = (0..n).map(|_| T::from_f64_lossy(offset + normal.sample(rng))).collect();
            Tensor::from_parts(shape.clone(), data)
        })
    }

    pub fn zeros_like(config: &ViTConfig) -> Self {
        config.param_shapes().map(|_, shape| Tensor::zeros(shape))
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// `config`.
    pub fn from_named(config: &ViTConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let params = config.param_shapes().try_map(|name, shape| {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::validation(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        })?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::validation(format!("unexpected tensor `{extra}`")));
        }
        Ok(params)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.zip(other).into_iter().all(|(a, b)| a.bit_eq(b))
    }
}
