//! Loss-based balancing: per-task weights applied to the scalarized loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward_per_task, Batch, NetworkSpec, Params};
use crate::numerics::{all_finite, dot, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    SumToOne,
    SumToN,
    Free,
}

/// Per-task coefficients and the normalization convention they follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: Vec<f64>,
    convention: Convention,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>, convention: Convention) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty weight vector".into()));
        }
        if !all_finite(&weights) {
            return Err(Error::NonFinite("weight vector".into()));
        }
        Ok(WeightVector {
            weights,
            convention,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn is_positive(&self) -> bool {
        self.weights.iter().all(|w| *w > 0.0)
    }

    /// Weights rescaled to sum to one. A zero sum yields uniform weights.
    pub fn normalized(&self) -> Vec<f64> {
        let s: f64 = self.weights.iter().sum();
        if s.abs() > f64::MIN_POSITIVE {
            self.weights.iter().map(|w| w / s).collect()
        } else {
            vec![1.0 / self.len() as f64; self.len()]
        }
    }
}

fn check_positive(losses: &[f64]) -> Result<()> {
    for (task, &loss) in losses.iter().enumerate() {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { task });
        }
        if loss <= 0.0 {
            return Err(Error::NonPositiveLoss { task, loss });
        }
    }
    Ok(())
}

pub fn unit_scal(n_tasks: usize) -> Result<WeightVector> {
    WeightVector::new(vec![1.0; n_tasks], Convention::SumToN)
}

/// Weights `1/ℓ_i`, the gradient of `Σ log ℓ_i`.
pub fn si(losses: &[f64]) -> Result<WeightVector> {
    check_positive(losses)?;
    WeightVector::new(losses.iter().map(|l| 1.0 / l).collect(), Convention::Free)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlwDistribution {
    Normal,
    Dirichlet,
}

/// Random loss weights: softmax of standard normals, or a flat Dirichlet draw.
pub fn rlw(rng: &mut Rng, dist: RlwDistribution, n_tasks: usize) -> Result<WeightVector> {
    let raw: Vec<f64> = match dist {
        RlwDistribution::Normal => {
            let z: Vec<f64> = (0..n_tasks).map(|_| rng.normal()).collect();
            softmax(&z)
        }
        RlwDistribution::Dirichlet => (0..n_tasks).map(|_| rng.gamma(1.0)).collect(),
    };
    let s: f64 = raw.iter().sum();
    WeightVector::new(raw.iter().map(|v| v / s).collect(), Convention::SumToOne)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Homoscedastic uncertainty weighting with log-variance parameters `s_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UwState {
    pub log_vars: Vec<f64>,
}

impl UwState {
    pub fn new(n_tasks: usize) -> Self {
        UwState {
            log_vars: vec![0.0; n_tasks],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UwOutput {
    pub total: f64,
    pub weights: WeightVector,
    /// `∂total/∂s_i`
    pub grad_log_vars: Vec<f64>,
}

/// `total = Σ e^{−s_i} ℓ_i / 2 + s_i / 2`
pub fn uw_loss(losses: &[f64], state: &UwState) -> Result<UwOutput> {
    if losses.len() != state.log_vars.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} uncertainty parameters",
            losses.len(),
            state.log_vars.len()
        )));
    }
    if !all_finite(&state.log_vars) {
        return Err(Error::NonFinite("uncertainty parameters".into()));
    }
    let w: Vec<f64> = state.log_vars.iter().map(|s| (-s).exp() / 2.0).collect();
    let total = losses
        .iter()
        .zip(&w)
        .zip(&state.log_vars)
        .map(|((l, wi), s)| wi * l + s / 2.0)
        .sum();
    let grad = losses.iter().zip(&w).map(|(l, wi)| 0.5 - wi * l).collect();
    Ok(UwOutput {
        total,
        weights: WeightVector::new(w, Convention::Free)?,
        grad_log_vars: grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamoState {
    pub logits: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub prev_losses: Option<Vec<f64>>,
}

impl FamoState {
    pub const DEFAULT_BETA: f64 = 0.025;

    pub fn new(n_tasks: usize, gamma: f64) -> Self {
        FamoState {
            logits: vec![0.0; n_tasks],
            gamma,
            beta: Self::DEFAULT_BETA,
            prev_losses: None,
        }
    }
}

/// `w_i ∝ z_i / ℓ_i` with `z = softmax(ξ)`, normalized to sum one.
pub fn famo_weights(state: &FamoState, losses: &[f64]) -> Result<WeightVector> {
    if losses.len() != state.logits.len() {
        return Err(Error::Shape("famo: loss count differs from logit count".into()));
    }
    check_positive(losses)?;
    let z = softmax(&state.logits);
    let raw: Vec<f64> = z.iter().zip(losses).map(|(zi, l)| zi / l).collect();
    let s: f64 = raw.iter().sum();
    WeightVector::new(raw.iter().map(|v| v / s).collect(), Convention::SumToOne)
}

/// Softmax Jacobian `z_i(δ_ij − z_j)`.
pub fn softmax_jacobian(z: &[f64]) -> Vec<Vec<f64>> {
    let n = z.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| z[i] * (if i == j { 1.0 } else { 0.0 } - z[j]))
                .collect()
        })
        .collect()
}

/// `ξ ← ξ − β(Jᵀ(log ℓ_t − log ℓ_{t+1}) + γξ)`
pub fn famo_update(state: &mut FamoState, losses_t: &[f64], losses_t1: &[f64]) -> Result<()> {
    let n = state.logits.len();
    if losses_t.len() != n || losses_t1.len() != n {
        return Err(Error::Shape("famo: loss count differs from logit count".into()));
    }
    check_positive(losses_t)?;
    check_positive(losses_t1)?;
    let diff: Vec<f64> = losses_t
        .iter()
        .zip(losses_t1)
        .map(|(a, b)| a.ln() - b.ln())
        .collect();
    let jac = softmax_jacobian(&softmax(&state.logits));
    let next: Vec<f64> = (0..n)
        .map(|j| {
            let delta: f64 = (0..n).map(|i| jac[i][j] * diff[i]).sum();
            state.logits[j] - state.beta * (delta + state.gamma * state.logits[j])
        })
        .collect();
    if !all_finite(&next) {
        return Err(Error::NonFinite("famo logits".into()));
    }
    state.logits = next;
    state.prev_losses = Some(losses_t1.to_vec());
    Ok(())
}

pub const AUTO_LAMBDA_INIT: f64 = 0.1;
pub const AUTO_LAMBDA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoLambdaStep {
    pub lambda: WeightVector,
    pub meta_grad: Vec<f64>,
    /// Set when the meta-gradient was non-finite and λ was left unchanged.
    pub skipped: bool,
}

/// Full-parameter gradient of every task loss, evaluated without dropout.
fn full_task_grads(spec: &NetworkSpec, params: &Params, batch: &Batch) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let tg = backward_per_task(spec, params, batch, None, None)?;
    let grads = (0..spec.n_tasks())
        .map(|t| {
            let mut g = vec![0.0; params.len()];
            g[..params.shared_len].copy_from_slice(tg.shared.row(t));
            g[params.head_ranges[t].clone()].copy_from_slice(&tg.heads[t]);
            g
        })
        .collect();
    Ok((grads, tg.losses))
}

fn look_ahead(params: &Params, grads: &[Vec<f64>], lambda: &[f64], inner_lr: f64) -> Params {
    let mut ahead = params.clone();
    for (l, g) in lambda.iter().zip(grads) {
        for (p, gi) in ahead.values.iter_mut().zip(g) {
            *p -= inner_lr * l * gi;
        }
    }
    ahead
}

/// Validation loss `Σ_i ℓ_i^val(θ')` after one look-ahead step
/// `θ' = θ − inner_lr ∇Σ λ_i ℓ_i^train(θ)`.
pub fn auto_lambda_lookahead_loss(
    lambda: &[f64],
    spec: &NetworkSpec,
    params: &Params,
    train: &Batch,
    val: &Batch,
    inner_lr: f64,
) -> Result<f64> {
    let (grads, _) = full_task_grads(spec, params, train)?;
    let ahead = look_ahead(params, &grads, lambda, inner_lr);
    let (_, val_losses) = full_task_grads(spec, &ahead, val)?;
    Ok(val_losses.iter().sum())
}

/// One meta-update of the task weights λ.
///
/// Since `θ'` is linear in λ, `∂L_val(θ')/∂λ_i = −inner_lr ∇L_val(θ')·∇ℓ_i(θ)`;
/// curvature of the training loss is not propagated further.
pub fn auto_lambda_update(
    lambda: &WeightVector,
    spec: &NetworkSpec,
    params: &Params,
    train: &Batch,
    val: &Batch,
    inner_lr: f64,
    aux_lr: f64,
) -> Result<AutoLambdaStep> {
    let n = spec.n_tasks();
    if lambda.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} tasks", lambda.len())));
    }
    let (grads, _) = full_task_grads(spec, params, train)?;
    let ahead = look_ahead(params, &grads, lambda.as_slice(), inner_lr);
    let (val_grads, _) = full_task_grads(spec, &ahead, val)?;
    let mut val_total = vec![0.0; params.len()];
    for g in &val_grads {
        val_total.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let meta: Vec<f64> = grads.iter().map(|g| -inner_lr * dot(&val_total, g)).collect();
    if !all_finite(&meta) {
        return Ok(AutoLambdaStep {
            lambda: lambda.clone(),
            meta_grad: meta,
            skipped: true,
        });
    }
    let next = lambda
        .as_slice()
        .iter()
        .zip(&meta)
        .map(|(l, m)| (l - aux_lr * m).max(AUTO_LAMBDA_FLOOR))
        .collect();
    Ok(AutoLambdaStep {
        lambda: WeightVector::new(next, Convention::Free)?,
        meta_grad: meta,
        skipped: false,
    })
}

/// Returns the provided weights unchanged.
pub fn fixed(weights: &WeightVector) -> WeightVector {
    weights.clone()
}
