use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::{BlockWeights, GateVector, ModelParams, ViTConfig, ViTWeights};
use crate::warmup::PatchGrid;

const LN_EPS: f64 = 1e-5;

/// Flat image indices gathered into the `[J, C·P·P]` patch matrix. Patches
/// are in row-major grid order; within a patch the layout is channel-major,
/// then row, then column.
pub fn patch_pixel_indices(config: &ViTConfig) -> Vec<usize> {
    let (c, s, p, grid) = (config.channels, config.image_size, config.patch_size, config.grid());
    let mut idx = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gr in 0..grid {
        for gc in 0..grid {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        idx.push(ch * s * s + (gr * p + py) * s + gc * p + px);
                    }
                }
            }
        }
    }
    idx
}

/// Records every parameter on `graph`, as trainable leaves or constants.
pub fn bind_params<T: Real>(graph: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> ViTWeights<Var> {
    params.map(|_, t| {
        if trainable {
            graph.param(t.clone())
        } else {
            graph.constant(t.clone())
        }
    })
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Image `[C, H, W]` to the token sequence `[J+1, d]`: patch projection,
/// class token prepended at row 0, positional embedding added.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, config: &ViTConfig, image: Var, w: &ViTWeights<Var>) -> Result<Var> {
    let expected = config.image_shape();
    if g.shape(image) != expected {
        return Err(Error::Dimension {
            op: "patch_embed",
            lhs: g.shape(image).to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let patches = g.gather(
        image,
        patch_pixel_indices(config),
        &[config.num_patches(), config.patch_dim()],
    )?;
    let tokens = linear(g, patches, w.patch_w, w.patch_b)?;
    let seq = g.concat_rows(&[w.cls_token, tokens])?;
    g.add(seq, w.pos_embed)
}

/// Multi-head self-attention. Returns the projected output and the
/// per-head attention matrices.
pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    config: &ViTConfig,
    z: Var,
    b: &BlockWeights<Var>,
) -> Result<(Var, Vec<Var>)> {
    let dh = config.head_dim();
    let q = linear(g, z, b.wq, b.bq)?;
    let k = linear(g, z, b.wk, b.bk)?;
    let v = linear(g, z, b.wv, b.bv)?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    let mut weights = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((linear(g, merged, b.wo, b.bo)?, weights))
}

/// linear → GELU → linear
pub fn mlp_forward<T: Real>(g: &mut Graph<T>, z: Var, b: &BlockWeights<Var>) -> Result<Var> {
    let h = linear(g, z, b.mlp_w1, b.mlp_b1)?;
    let h = g.gelu(h)?;
    linear(g, h, b.mlp_w2, b.mlp_b2)
}

/// One pre-norm encoder block:
/// `z' = gate(A(LN₁(z))) + z`, `out = MLP(LN₂(z')) + z'`.
///
/// `gate = None` records no gate node at all; `Some(false)` blocks the
/// attention-branch adjoint while leaving the residual path intact.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    config: &ViTConfig,
    z: Var,
    b: &BlockWeights<Var>,
    gate: Option<bool>,
) -> Result<Var> {
    let eps = T::from_f64_lossy(LN_EPS);
    let h = g.layer_norm(z, b.norm1_gamma, b.norm1_beta, eps)?;
    let (mut attn, _) = attention_forward(g, config, h, b)?;
    if let Some(open) = gate {
        attn = g.grad_gate(attn, open)?;
    }
    let mid = g.add(attn, z)?;
    let h = g.layer_norm(mid, b.norm2_gamma, b.norm2_beta, eps)?;
    let m = mlp_forward(g, h, b)?;
    g.add(m, mid)
}

/// Logits `[C]` for one image `[C, H, W]`.
pub fn model_forward<T: Real>(
    g: &mut Graph<T>,
    config: &ViTConfig,
    image: Var,
    w: &ViTWeights<Var>,
    gates: Option<&GateVector>,
) -> Result<Var> {
    if let Some(gates) = gates {
        if gates.len() != config.depth {
            return Err(Error::contract(format!(
                "gate vector has {} entries but the model has {} blocks",
                gates.len(),
                config.depth
            )));
        }
    }
    let mut z = patch_embed(g, config, image, w)?;
    for (i, block) in w.blocks.iter().enumerate() {
        z = block_forward(g, config, z, block, gates.map(|u| u.is_open(i)))?;
    }
    let z = g.layer_norm(z, w.norm_gamma, w.norm_beta, T::from_f64_lossy(LN_EPS))?;
    let cls = g.gather(z, (0..config.embed_dim).collect(), &[1, config.embed_dim])?;
    let logits = linear(g, cls, w.head_w, w.head_b)?;
    g.reshape(logits, &[config.num_classes])
}

/// Differentiable image classifier as seen by the attack code.
pub trait Classifier<T: Real>: Sync {
    /// `[channels, height, width]`
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Number of gateable blocks.
    fn depth(&self) -> usize;

    fn patch_grid(&self) -> PatchGrid;

    /// Records the logits `[C]` of `input` on `graph`. Model weights are
    /// recorded as constants.
    fn forward(&self, graph: &mut Graph<T>, input: Var, gates: Option<&GateVector>) -> Result<Var>;
}

/// A configured model together with its weights.
#[derive(Debug, Clone)]
pub struct ViT<T> {
    pub config: ViTConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> ViT<T> {
    pub fn new(config: ViTConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.blocks.len() != params.blocks.len() {
            return Err(Error::validation(format!(
                "config depth {} but {} parameter blocks",
                config.depth,
                params.blocks.len()
            )));
        }
        for ((name, shape), t) in shapes.named().into_iter().zip(params.slots()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(ViT { config, params })
    }

    /// Forward pass only.
    pub fn logits(&self, image: &Tensor<T>, gates: Option<&GateVector>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, gates)?;
        Ok(g.value(out).clone())
    }

    /// Cross-entropy against a soft label `[C]`, the logits, and the loss
    /// gradient with respect to every parameter. The forward uses no gates.
    pub fn loss_and_grads(&self, image: &Tensor<T>, label: &Tensor<T>) -> Result<(T, Tensor<T>, ModelParams<T>)> {
        let mut g = Graph::new();
        let w = bind_params(&mut g, &self.params, true);
        let x = g.constant(image.clone());
        let logits = model_forward(&mut g, &self.config, x, &w, None)?;
        let logits = g.reshape(logits, &[1, self.config.num_classes])?;
        let labels = label.clone().reshaped(&[1, self.config.num_classes])?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        let grads = w
            .zip(&self.params)
            .into_iter()
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>();
        let mut out = ModelParams::zeros_like(&self.config);
        for (slot, grad) in out.slots_mut().into_iter().zip(grads) {
            *slot = grad;
        }
        let logits = g.value(logits).clone().reshaped(&[self.config.num_classes])?;
        Ok((g.value(loss).item(), logits, out))
    }
}

impl<T: Real> Classifier<T> for ViT<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.config.image_shape()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn depth(&self) -> usize {
        self.config.depth
    }

    fn patch_grid(&self) -> PatchGrid {
        PatchGrid::from(&self.config)
    }

    fn forward(&self, graph: &mut Graph<T>, input: Var, gates: Option<&GateVector>) -> Result<Var> {
        let w = bind_params(graph, &self.params, false);
        model_forward(graph, &self.config, input, &w, gates)
    }
}
