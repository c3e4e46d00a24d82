//! Flow-matching direct preference optimization with a frozen reference.
//!
//! The loss contrasts how much better the trained model fits the winner's
//! velocity target than the reference does, against the same quantity for the
//! loser: `softplus(beta * omega_tau * (delta_w - delta_l))`, which equals
//! `-log sigmoid(-beta * omega_tau * (delta_w - delta_l))`. At zero margin the
//! loss is exactly `ln 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::fm_interpolate;
use crate::model::{self, CondInput, DenoiserParams, ModelError, TapedModel};
use crate::motion::ReshapedCondition;
use crate::optim::Optimizer;
use crate::preference::PreferencePair;
use crate::rng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Weighting function `omega_t` of the loss argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Omega {
    Constant,
}

impl Omega {
    pub fn value(&self, _tau: f64) -> f64 {
        match self {
            Omega::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoConfig {
    /// KL-strength of the implicit reward.
    pub beta: f64,
    pub omega: Omega,
    /// Share one noise draw and flow time across winner and loser branches.
    pub shared_noise: bool,
}

impl DpoConfig {
    pub fn new(beta: f64) -> Self {
        assert!(beta > 0.0, "beta must be positive");
        DpoConfig { beta, omega: Omega::Constant, shared_noise: true }
    }
}

/// One curated item prepared for the loss: cached clean latents for winner
/// and loser, the shared conditions, and the noise draws.
#[derive(Debug, Clone)]
pub struct DpoBatchItem {
    pub pair: Option<PreferencePair>,
    pub conditions: Vec<ReshapedCondition>,
    pub x0_w: Tensor,
    pub x0_l: Tensor,
    pub tau: f64,
    pub eps_w: Tensor,
    pub eps_l: Tensor,
}

impl DpoBatchItem {
    /// Draw flow time and noise for one pair, honoring `shared_noise`.
    pub fn draw(
        pair: Option<PreferencePair>,
        conditions: Vec<ReshapedCondition>,
        x0_w: Tensor,
        x0_l: Tensor,
        cfg: &DpoConfig,
        rng: &mut Prng,
    ) -> Self {
        let tau = rng.uniform();
        let eps_w = rng.normal_tensor(x0_w.shape());
        let eps_l = if cfg.shared_noise { eps_w.clone() } else { rng.normal_tensor(x0_l.shape()) };
        DpoBatchItem { pair, conditions, x0_w, x0_l, tau, eps_w, eps_l }
    }
}

/// Conditioned velocity model; `DenoiserParams` is the trained implementation,
/// test oracles provide others.
pub trait CondVelocityModel {
    fn velocity(
        &self,
        x: &Tensor,
        tau: f64,
        conds: &[ReshapedCondition],
    ) -> Result<Tensor, ModelError>;
}

impl CondVelocityModel for DenoiserParams {
    fn velocity(
        &self,
        x: &Tensor,
        tau: f64,
        conds: &[ReshapedCondition],
    ) -> Result<Tensor, ModelError> {
        model::forward_raw(self, x, tau, conds)
    }
}

fn branch_mses(
    model: &dyn CondVelocityModel,
    item: &DpoBatchItem,
) -> Result<(f64, f64), DpoError> {
    let w = fm_interpolate(&item.x0_w, &item.eps_w, item.tau)
        .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    let l = fm_interpolate(&item.x0_l, &item.eps_l, item.tau)
        .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    let pred_w = model.velocity(&w.x_tau, item.tau, &item.conditions)?;
    let pred_l = model.velocity(&l.x_tau, item.tau, &item.conditions)?;
    let mse_w =
        w.v_target.mse(&pred_w).map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    let mse_l =
        l.v_target.mse(&pred_l).map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    Ok((mse_w, mse_l))
}

/// Preference loss value for one item.
pub fn dpo_fm_loss(
    theta: &dyn CondVelocityModel,
    reference: &dyn CondVelocityModel,
    item: &DpoBatchItem,
    cfg: &DpoConfig,
) -> Result<f64, DpoError> {
    let (theta_w, theta_l) = branch_mses(theta, item)?;
    let (ref_w, ref_l) = branch_mses(reference, item)?;
    let delta_w = theta_w - ref_w;
    let delta_l = theta_l - ref_l;
    let arg = cfg.beta * cfg.omega.value(item.tau) * (delta_w - delta_l);
    if !arg.is_finite() {
        return Err(DpoError::NonFiniteLoss);
    }
    Ok(softplus(arg))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Taped preference loss for one item; gradients flow through `theta` only
/// (the reference contributes scalar constants).
pub fn dpo_fm_loss_taped(
    tape: &mut Tape,
    theta: &TapedModel<'_>,
    reference: &dyn CondVelocityModel,
    item: &DpoBatchItem,
    cfg: &DpoConfig,
) -> Result<Var, DpoError> {
    let w = fm_interpolate(&item.x0_w, &item.eps_w, item.tau)
        .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    let l = fm_interpolate(&item.x0_l, &item.eps_l, item.tau)
        .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
    let (ref_w, ref_l) = branch_mses(reference, item)?;

    let conds: Vec<CondInput> = item.conditions.iter().map(CondInput::Raw).collect();
    let out_w = theta.forward(tape, &w.x_tau, item.tau, &conds)?;
    let (rows, cols) = tape.shape(out_w);
    debug_assert_eq!(rows * cols, item.x0_w.numel());
    let target_w = tape.leaf(rows, cols, w.v_target.data().to_vec());
    let mse_w = tape.mse(out_w, target_w);
    let out_l = theta.forward(tape, &l.x_tau, item.tau, &conds)?;
    let target_l = tape.leaf(rows, cols, l.v_target.data().to_vec());
    let mse_l = tape.mse(out_l, target_l);

    let ref_w_leaf = tape.leaf_scalar(ref_w);
    let ref_l_leaf = tape.leaf_scalar(ref_l);
    let delta_w = tape.sub(mse_w, ref_w_leaf);
    let delta_l = tape.sub(mse_l, ref_l_leaf);
    let margin = tape.sub(delta_w, delta_l);
    let arg = tape.scale(margin, cfg.beta * cfg.omega.value(item.tau));
    Ok(tape.softplus(arg))
}

/// One optimizer step on the mean item loss. The reference is read-only; a
/// non-finite loss or gradient aborts before any parameter changes.
pub fn dpo_step(
    theta: &mut DenoiserParams,
    reference: &dyn CondVelocityModel,
    batch: &[DpoBatchItem],
    cfg: &DpoConfig,
    optimizer: &mut Optimizer,
) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let (loss, grads) = model::grad(theta, |tape, model| {
        let mut items = Vec::with_capacity(batch.len());
        for item in batch {
            let v = dpo_fm_loss_taped(tape, model, reference, item, cfg)
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
            items.push(v);
        }
        let mut total = items[0];
        for &v in &items[1..] {
            total = tape.add(total, v);
        }
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    })?;
    if !loss.is_finite() {
        return Err(DpoError::NonFiniteLoss);
    }
    optimizer.apply(&mut theta.params, &grads);
    Ok(loss)
}

/// Monte-Carlo surrogate for the implicit reward `beta log(pi/pi_ref)`.
///
/// Averages `-(beta) * [|v - v_theta|^2 - |v - v_ref|^2]` over seeded draws of
/// `(tau, eps)` with `v = eps - y`. A diagnostic proxy, not the exact
/// likelihood ratio.
pub fn implicit_reward_proxy(
    theta: &dyn CondVelocityModel,
    reference: &dyn CondVelocityModel,
    y: &Tensor,
    conditions: &[ReshapedCondition],
    cfg: &DpoConfig,
    n_draws: usize,
    seed: u64,
) -> Result<f64, DpoError> {
    assert!(n_draws >= 1);
    let mut rng = Prng::derive(seed, "reward-proxy");
    let mut total = 0.0;
    for _ in 0..n_draws {
        let tau = rng.uniform();
        let eps = rng.normal_tensor(y.shape());
        let sample = fm_interpolate(y, &eps, tau)
            .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
        let pred_t = theta.velocity(&sample.x_tau, tau, conditions)?;
        let pred_r = reference.velocity(&sample.x_tau, tau, conditions)?;
        let mse_t = sample
            .v_target
            .mse(&pred_t)
            .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
        let mse_r = sample
            .v_target
            .mse(&pred_r)
            .map_err(|e| DpoError::ShapeMismatch(e.to_string()))?;
        total += mse_t - mse_r;
    }
    Ok(-cfg.beta * total / n_draws as f64)
}
