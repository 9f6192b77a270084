//! Whole-model gradient verification in 64-bit precision.
//!
//! Three checks:
//! - every parameter tensor and the input image against central
//!   differences of the cross-entropy loss;
//! - the input gradient with one closed gate against an oracle network in
//!   which that block's attention output is recorded as a constant;
//! - the input gradient with all gates open against the ungated model,
//!   bit for bit.

use serde::Serialize;

use crate::autograd::{compare_gradient, BackwardFault, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, RngState};
use crate::tensor::Tensor;
use crate::vit::{
    attention_forward, bind_params, block_forward, mlp_forward, model_forward, patch_embed, GateVector, ModelParams,
    ViTConfig, ViTWeights,
};

const LN_EPS: f64 = 1e-5;

/// Largest model the verifier accepts.
pub const MAX_VERIFY_PARAMS: usize = 50_000;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Finite-difference coordinates sampled per tensor.
    pub coords_per_tensor: usize,
    pub step: f64,
    pub seed: u64,
    /// Standard deviation of the random parameters.
    pub param_std: f64,
    /// Block whose gate is closed in the detached-branch comparison.
    pub detached_block: Option<usize>,
    /// Gradient scale below which a coordinate is judged by absolute
    /// rather than relative error (see [`GradCheckOptions::zero_scale`]).
    pub zero_scale: f64,
    /// Corrupts one backward rule in the analytic passes (test hook).
    pub fault: Option<BackwardFault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            coords_per_tensor: 24,
            step: 1e-5,
            seed: 0,
            param_std: 0.3,
            detached_block: None,
            zero_scale: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose gradient is too small for a relative error, e.g.
    /// the key bias, whose gradient is identically zero because softmax
    /// ignores a shift shared by a whole row.
    pub unresolved: usize,
    pub max_abs_unresolved: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative error on resolvable coordinates.
    pub relative: f64,
    /// Absolute error on near-zero coordinates; central differences with a
    /// 1e-5 step carry roundoff of order 1e-10.
    pub near_zero: f64,
    /// Closed gate vs detached-branch oracle, absolute.
    pub detached: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { relative: 1e-4, near_zero: 1e-8, detached: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetachedCheck {
    pub block: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub param_count: usize,
    /// Parameter tensors followed by `input`.
    pub tensors: Vec<TensorCheck>,
    pub detached: DetachedCheck,
    pub open_gates_bit_identical: bool,
}

impl VerifyReport {
    pub fn worst(&self) -> &TensorCheck {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least the input is checked")
    }

    pub fn max_abs_unresolved(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_unresolved).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: &Tolerances) -> bool {
        self.worst().max_rel_error < tol.relative
            && self.max_abs_unresolved() < tol.near_zero
            && self.detached.max_abs_diff < tol.detached
            && self.open_gates_bit_identical
    }
}

/// A random verification point: parameters, image and label.
pub struct Probe {
    pub params: ModelParams<f64>,
    pub image: Tensor<f64>,
    pub label: usize,
}

impl Probe {
    pub fn random(config: &ViTConfig, param_std: f64, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        let params = ModelParams::randomized(config, param_std, &mut rng);
        let shape = config.image_shape();
        let image = Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.unit()).collect())
            .expect("image shape");
        let label = rng.below(config.num_classes);
        Probe { params, image, label }
    }
}

fn ce_loss(g: &mut Graph<f64>, logits: Var, label: usize, classes: usize) -> Result<Var> {
    let row = g.reshape(logits, &[1, classes])?;
    g.cross_entropy(row, &one_hot(label, classes).reshaped(&[1, classes])?)
}

fn loss_value(config: &ViTConfig, params: &ModelParams<f64>, image: &Tensor<f64>, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let w = bind_params(&mut g, params, false);
    let x = g.constant(image.clone());
    let logits = model_forward(&mut g, config, x, &w, None)?;
    let loss = ce_loss(&mut g, logits, label, config.num_classes)?;
    Ok(g.value(loss).item())
}

/// Input gradient of the cross-entropy loss with the given gates.
pub fn gated_input_gradient(
    config: &ViTConfig,
    probe: &Probe,
    gates: Option<&GateVector>,
    fault: Option<BackwardFault>,
) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    g.set_backward_fault(fault);
    let w = bind_params(&mut g, &probe.params, false);
    let x = g.param(probe.image.clone());
    let logits = model_forward(&mut g, config, x, &w, gates)?;
    let loss = ce_loss(&mut g, logits, probe.label, config.num_classes)?;
    g.backward(loss)?;
    Ok(g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(probe.image.shape())))
}

/// Input gradient of a network identical to the model except that the
/// attention output of block `detached` enters the graph as a constant.
pub fn detached_branch_gradient(
    config: &ViTConfig,
    probe: &Probe,
    detached: usize,
    fault: Option<BackwardFault>,
) -> Result<Tensor<f64>> {
    if detached >= config.depth {
        return Err(Error::contract(format!("block {detached} out of range for depth {}", config.depth)));
    }
    let mut g = Graph::new();
    g.set_backward_fault(fault);
    let w = bind_params(&mut g, &probe.params, false);
    let x = g.param(probe.image.clone());
    let mut z = patch_embed(&mut g, config, x, &w)?;
    for (i, b) in w.blocks.iter().enumerate() {
        if i != detached {
            z = block_forward(&mut g, config, z, b, None)?;
            continue;
        }
        let h = g.layer_norm(z, b.norm1_gamma, b.norm1_beta, LN_EPS)?;
        let (attn, _) = attention_forward(&mut g, config, h, b)?;
        let frozen = g.constant(g.value(attn).clone());
        let mid = g.add(frozen, z)?;
        let h = g.layer_norm(mid, b.norm2_gamma, b.norm2_beta, LN_EPS)?;
        let m = mlp_forward(&mut g, h, b)?;
        z = g.add(m, mid)?;
    }
    let z = g.layer_norm(z, w.norm_gamma, w.norm_beta, LN_EPS)?;
    let cls = g.gather(z, (0..config.embed_dim).collect(), &[1, config.embed_dim])?;
    let y = g.matmul(cls, w.head_w)?;
    let logits = g.add_row(y, w.head_b)?;
    let loss = g.cross_entropy(logits, &one_hot(probe.label, config.num_classes).reshaped(&[1, config.num_classes])?)?;
    g.backward(loss)?;
    Ok(g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(probe.image.shape())))
}

/// Gates all open except `block`.
pub fn single_closed_gate(depth: usize, block: usize) -> GateVector {
    GateVector::new((0..depth).map(|i| i != block).collect())
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs all three checks on a random probe of `config`.
pub fn verify_model(config: &ViTConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    config.validate()?;
    let param_count = config.param_count();
    if param_count > MAX_VERIFY_PARAMS {
        return Err(Error::validation(format!(
            "model has {param_count} parameters; gradient verification is limited to {MAX_VERIFY_PARAMS}"
        )));
    }
    let probe = Probe::random(config, opts.param_std, opts.seed);

    // analytic gradients for every parameter and the input in one pass
    let mut g = Graph::new();
    g.set_backward_fault(opts.fault);
    let w: ViTWeights<Var> = bind_params(&mut g, &probe.params, true);
    let x = g.param(probe.image.clone());
    let logits = model_forward(&mut g, config, x, &w, None)?;
    let loss = ce_loss(&mut g, logits, probe.label, config.num_classes)?;
    g.backward(loss)?;
    let grad_of = |v: Var| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));

    let check_opts = |k: usize| GradCheckOptions {
        step: opts.step,
        max_coords: Some(opts.coords_per_tensor),
        seed: mix_seed(opts.seed, &[k as u64]),
        zero_scale: opts.zero_scale,
    };
    let check = |name: String, r: GradCheckReport| TensorCheck {
        name,
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        unresolved: r.unresolved,
        max_abs_unresolved: r.max_abs_unresolved,
    };
    let mut tensors = Vec::new();
    for (k, ((name, var), original)) in w.named().into_iter().zip(probe.params.slots()).enumerate() {
        let analytic = grad_of(*var);
        let value = |point: &Tensor<f64>| {
            let mut params = probe.params.clone();
            *params.slots_mut()[k] = point.clone();
            loss_value(config, &params, &probe.image, probe.label)
        };
        let report = compare_gradient(value, original, &analytic, &check_opts(k))?;
        tensors.push(check(name, report));
    }
    let analytic = grad_of(x);
    let value = |point: &Tensor<f64>| loss_value(config, &probe.params, point, probe.label);
    let report = compare_gradient(value, &probe.image, &analytic, &check_opts(usize::MAX >> 1))?;
    tensors.push(check("input".into(), report));

    let block = opts.detached_block.unwrap_or(config.depth / 2);
    let gated = gated_input_gradient(config, &probe, Some(&single_closed_gate(config.depth, block)), opts.fault)?;
    let oracle = detached_branch_gradient(config, &probe, block, None)?;
    let detached = DetachedCheck { block, max_abs_diff: max_abs_diff(&gated, &oracle) };

    let open = gated_input_gradient(config, &probe, Some(&GateVector::open(config.depth)), opts.fault)?;
    let plain = gated_input_gradient(config, &probe, None, opts.fault)?;
    Ok(VerifyReport { param_count, tensors, detached, open_gates_bit_identical: open.bit_eq(&plain) })
}
