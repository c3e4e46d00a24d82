//! Desk-scale denoisers: a small transformer with self-attention, per-step
//! motion cross-attention and time embedding, and a plain feed-forward
//! denoiser for low-dimensional distribution tests.
//!
//! Parameters live in a named, ordered [`ParamSet`]; every forward pass runs
//! on a [`Tape`], so exact reverse-mode gradients of any scalar loss are
//! available through [`grad`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{Modality, MotionEmbedding, ReshapedCondition};
use crate::rng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no condition slot for modality {0}")]
    UnknownModality(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFinite { param: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Transformer,
    Mlp,
}

/// Token geometry of one motion modality: tokens per latent step and the
/// feature width entering the learnable projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CondSpec {
    pub modality: Modality,
    pub tokens_per_step: usize,
    pub feat_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_blocks: usize,
    /// Model width; equals the latent channel count.
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub use_pos_embedding: bool,
    /// Latent geometry `(T', H', W', d)` the model operates on.
    pub latent_shape: [usize; 4],
    pub conditions: Vec<CondSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_blocks == 0 || self.d == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::BadConfig("all sizes must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d={} not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.architecture == Architecture::Transformer && self.latent_shape[3] != self.d {
            return Err(ModelError::BadConfig(format!(
                "latent channels {} must equal model width {}",
                self.latent_shape[3], self.d
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.conditions {
            if !seen.insert(c.modality) {
                return Err(ModelError::BadConfig(format!(
                    "duplicate condition modality {}",
                    c.modality.as_str()
                )));
            }
            if c.tokens_per_step == 0 || c.feat_dim == 0 {
                return Err(ModelError::BadConfig("condition dims must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.latent_shape[0] * self.latent_shape[1] * self.latent_shape[2]
    }

    pub fn numel(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn cond_spec(&self, modality: Modality) -> Option<&CondSpec> {
        self.conditions.iter().find(|c| c.modality == modality)
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate param {name}");
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at
                        .data()
                        .iter()
                        .zip(bt.data())
                        .all(|(&x, &y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// All learnables of one denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
}

const TIME_FEATURES: usize = 8;

fn time_features(tau: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(TIME_FEATURES);
    for i in 0..TIME_FEATURES / 2 {
        let w = 2.0 * std::f64::consts::PI * (1 << i) as f64;
        f.push((w * tau).sin());
        f.push((w * tau).cos());
    }
    f
}

/// Fan-in-scaled random init; unembedding (and output head) start at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<DenoiserParams, ModelError> {
    config.validate()?;
    let mut rng = Prng::derive(seed, "model-init");
    let mut params = ParamSet::new();
    let d = config.d;
    let mat = |rng: &mut Prng, rows: usize, cols: usize| -> Tensor {
        let std = 1.0 / (rows as f64).sqrt();
        rng.normal_tensor(&[rows, cols]).scale(std)
    };
    match config.architecture {
        Architecture::Transformer => {
            params.push("embed.w", mat(&mut rng, d, d));
            params.push("embed.b", Tensor::zeros(&[1, d]));
            params.push("time.w", mat(&mut rng, TIME_FEATURES, d));
            params.push("time.b", Tensor::zeros(&[1, d]));
            if config.use_pos_embedding {
                params.push("pos", rng.normal_tensor(&[config.tokens(), d]).scale(0.1));
            }
            for spec in &config.conditions {
                let m = spec.modality.as_str();
                params.push(format!("proj.{m}.w"), mat(&mut rng, spec.feat_dim, d));
                params.push(format!("proj.{m}.b"), Tensor::zeros(&[1, d]));
                params.push(
                    format!("cond_pos.{m}"),
                    rng.normal_tensor(&[spec.tokens_per_step, d]).scale(0.3),
                );
            }
            for b in 0..config.n_blocks {
                params.push(format!("block{b}.ln1.g"), Tensor::full(&[1, d], 1.0));
                for w in ["wq", "wk", "wv", "wo"] {
                    params.push(format!("block{b}.self.{w}"), mat(&mut rng, d, d));
                }
                for spec in &config.conditions {
                    let m = spec.modality.as_str();
                    for w in ["wq", "wk", "wv"] {
                        params.push(format!("block{b}.cross.{m}.{w}"), mat(&mut rng, d, d));
                    }
                }
                params.push(format!("block{b}.ln2.g"), Tensor::full(&[1, d], 1.0));
                params.push(format!("block{b}.ffn.w1"), mat(&mut rng, d, config.d_ff));
                params.push(format!("block{b}.ffn.b1"), Tensor::zeros(&[1, config.d_ff]));
                params.push(format!("block{b}.ffn.w2"), mat(&mut rng, config.d_ff, d));
                params.push(format!("block{b}.ffn.b2"), Tensor::zeros(&[1, d]));
            }
            params.push("unembed.w", Tensor::zeros(&[d, d]));
            params.push("unembed.b", Tensor::zeros(&[1, d]));
        }
        Architecture::Mlp => {
            let numel = config.numel();
            let mut width_in = numel + TIME_FEATURES;
            for b in 0..config.n_blocks {
                params.push(format!("mlp.l{b}.w"), mat(&mut rng, width_in, config.d_ff));
                params.push(format!("mlp.l{b}.b"), Tensor::zeros(&[1, config.d_ff]));
                width_in = config.d_ff;
            }
            params.push("mlp.out.w", Tensor::zeros(&[width_in, numel]));
            params.push("mlp.out.b", Tensor::zeros(&[1, numel]));
        }
    }
    Ok(DenoiserParams { config: config.clone(), seed, params })
}

/// A condition entering a forward pass.
pub enum CondInput<'a> {
    /// Already projected to model width; treated as a constant.
    Embedded(&'a MotionEmbedding),
    /// Raw reshaped condition; projected inside the pass through the model's
    /// own `proj.<modality>` parameters (so the projection trains).
    Raw(&'a ReshapedCondition),
}

impl CondInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            CondInput::Embedded(e) => e.modality,
            CondInput::Raw(r) => r.modality,
        }
    }

    fn steps(&self) -> usize {
        match self {
            CondInput::Embedded(e) => e.steps(),
            CondInput::Raw(r) => r.steps(),
        }
    }

    fn tokens_per_step(&self) -> usize {
        match self {
            CondInput::Embedded(e) => e.tokens_per_step(),
            CondInput::Raw(r) => r.tokens_per_step(),
        }
    }
}

/// Model parameters materialized as tape leaves.
pub struct TapedModel<'a> {
    pub config: &'a ModelConfig,
    vars: Vec<(String, Var)>,
}

impl<'a> TapedModel<'a> {
    /// Insert every parameter as a leaf on `tape`.
    pub fn insert(tape: &mut Tape, params: &'a DenoiserParams) -> Self {
        let vars = params
            .params
            .iter()
            .map(|(name, t)| {
                let (rows, cols) = match t.shape() {
                    [r, c] => (*r, *c),
                    [n] => (1, *n),
                    other => panic!("parameter {name} has unexpected shape {other:?}"),
                };
                (name.to_string(), tape.leaf(rows, cols, t.data().to_vec()))
            })
            .collect();
        TapedModel { config: &params.config, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Velocity prediction. Returns a `(tokens, d)` var for the transformer or
    /// `(1, numel)` for the MLP; both reshape back to the input tensor shape
    /// via [`Tape::value`] plus [`Tensor::from_vec`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        tau: f64,
        conds: &[CondInput<'_>],
    ) -> Result<Var, ModelError> {
        match self.config.architecture {
            Architecture::Transformer => self.forward_transformer(tape, x, tau, conds),
            Architecture::Mlp => self.forward_mlp(tape, x, tau),
        }
    }

    fn forward_mlp(&self, tape: &mut Tape, x: &Tensor, tau: f64) -> Result<Var, ModelError> {
        let numel = self.config.numel();
        if x.numel() != numel {
            return Err(ModelError::ShapeMismatch(format!(
                "input has {} elements, model expects {numel}",
                x.numel()
            )));
        }
        let xin = tape.leaf(1, numel, x.data().to_vec());
        let tfeat = tape.leaf(1, TIME_FEATURES, time_features(tau));
        let mut h = tape.concat_cols(&[xin, tfeat]);
        for b in 0..self.config.n_blocks {
            let w = self.var(&format!("mlp.l{b}.w"));
            let bias = self.var(&format!("mlp.l{b}.b"));
            let lin = tape.matmul(h, w);
            let lin = tape.add_row(lin, bias);
            h = tape.silu(lin);
        }
        let w = self.var("mlp.out.w");
        let bias = self.var("mlp.out.b");
        let out = tape.matmul(h, w);
        Ok(tape.add_row(out, bias))
    }

    fn forward_transformer(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        tau: f64,
        conds: &[CondInput<'_>],
    ) -> Result<Var, ModelError> {
        let d = self.config.d;
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != d {
            return Err(ModelError::ShapeMismatch(format!(
                "latent must be (T', H', W', {d}), got {shape:?}"
            )));
        }
        let steps = shape[0];
        let spatial = shape[1] * shape[2];
        let tokens = steps * spatial;
        if self.config.use_pos_embedding && tokens != self.config.tokens() {
            return Err(ModelError::ShapeMismatch(format!(
                "positional table covers {} tokens, input has {tokens}",
                self.config.tokens()
            )));
        }
        for c in conds {
            if self.config.cond_spec(c.modality()).is_none() {
                return Err(ModelError::UnknownModality(c.modality().as_str().into()));
            }
            if c.steps() != steps {
                return Err(ModelError::ShapeMismatch(format!(
                    "condition has {} steps, latent has {steps}",
                    c.steps()
                )));
            }
        }

        // Project conditions to model width (constant leaf or trainable path),
        // then add the per-token positional identity.
        let mut cond_tokens: Vec<(Modality, usize, Var)> = Vec::new();
        for c in conds {
            let m = c.modality().as_str();
            let rows_per_step = c.tokens_per_step();
            let projected = match c {
                CondInput::Embedded(e) => {
                    let total = e.steps() * rows_per_step;
                    tape.leaf(total, d, e.data.data().to_vec())
                }
                CondInput::Raw(r) => {
                    let spec = self.config.cond_spec(r.modality).expect("checked above");
                    if spec.feat_dim != r.feature_dim() {
                        return Err(ModelError::ShapeMismatch(format!(
                            "condition feature dim {} vs config {}",
                            r.feature_dim(),
                            spec.feat_dim
                        )));
                    }
                    let total = r.steps() * rows_per_step;
                    let raw = tape.leaf(total, r.feature_dim(), r.data.data().to_vec());
                    let w = self.var(&format!("proj.{m}.w"));
                    let b = self.var(&format!("proj.{m}.b"));
                    let h = tape.matmul(raw, w);
                    tape.add_row(h, b)
                }
            };
            let spec = self.config.cond_spec(c.modality()).expect("checked above");
            let with_pos = if spec.tokens_per_step == rows_per_step {
                let pos = self.var(&format!("cond_pos.{m}"));
                // One positional table per step; tile by slicing per step below.
                let mut parts = Vec::with_capacity(steps);
                for s in 0..steps {
                    let step_rows = tape.slice_rows(projected, s * rows_per_step, rows_per_step);
                    parts.push(tape.add(step_rows, pos));
                }
                tape.concat_rows(&parts)
            } else {
                return Err(ModelError::ShapeMismatch(format!(
                    "condition {m} has {rows_per_step} tokens/step, config says {}",
                    spec.tokens_per_step
                )));
            };
            cond_tokens.push((c.modality(), rows_per_step, with_pos));
        }

        let xin = tape.leaf(tokens, d, x.data().to_vec());
        let we = self.var("embed.w");
        let be = self.var("embed.b");
        let emb = tape.matmul(xin, we);
        let mut h = tape.add_row(emb, be);
        if self.config.use_pos_embedding {
            let pos = self.var("pos");
            h = tape.add(h, pos);
        }
        let tw = self.var("time.w");
        let tb = self.var("time.b");
        let tfeat = tape.leaf(1, TIME_FEATURES, time_features(tau));
        let tproj = tape.matmul(tfeat, tw);
        let tproj = tape.add_row(tproj, tb);
        h = tape.add_row(h, tproj);

        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let scale_self = 1.0 / (dh as f64).sqrt();
        let scale_cross = 1.0 / (d as f64).sqrt();
        for b in 0..self.config.n_blocks {
            // Pre-norm self-attention over all tokens.
            let g1 = self.var(&format!("block{b}.ln1.g"));
            let normed = tape.layer_norm_rows(h, g1);
            let wq = self.var(&format!("block{b}.self.wq"));
            let wk = self.var(&format!("block{b}.self.wk"));
            let wv = self.var(&format!("block{b}.self.wv"));
            let wo = self.var(&format!("block{b}.self.wo"));
            let q = tape.matmul(normed, wq);
            let k = tape.matmul(normed, wk);
            let v = tape.matmul(normed, wv);
            let mut heads = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, scale_self);
                let attn = tape.softmax_rows(scaled);
                heads.push(tape.matmul(attn, vh));
            }
            let merged = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let proj = tape.matmul(merged, wo);
            h = tape.add(h, proj);

            // Per-step cross-attention per modality, fuse semantics: queries
            // straight from the residual stream, softmax(QK^T/sqrt(d))V added
            // residually.
            for &(modality, rows_per_step, cond) in &cond_tokens {
                let m = modality.as_str();
                let wq = self.var(&format!("block{b}.cross.{m}.wq"));
                let wk = self.var(&format!("block{b}.cross.{m}.wk"));
                let wv = self.var(&format!("block{b}.cross.{m}.wv"));
                let k_all = tape.matmul(cond, wk);
                let v_all = tape.matmul(cond, wv);
                let mut parts = Vec::with_capacity(steps);
                for s in 0..steps {
                    let h_step = tape.slice_rows(h, s * spatial, spatial);
                    let q = tape.matmul(h_step, wq);
                    let k_step = tape.slice_rows(k_all, s * rows_per_step, rows_per_step);
                    let v_step = tape.slice_rows(v_all, s * rows_per_step, rows_per_step);
                    let scores = tape.matmul_nt(q, k_step);
                    let scaled = tape.scale(scores, scale_cross);
                    let attn = tape.softmax_rows(scaled);
                    let mixed = tape.matmul(attn, v_step);
                    parts.push(tape.add(h_step, mixed));
                }
                h = tape.concat_rows(&parts);
            }

            // Pre-norm feed-forward.
            let g2 = self.var(&format!("block{b}.ln2.g"));
            let normed = tape.layer_norm_rows(h, g2);
            let w1 = self.var(&format!("block{b}.ffn.w1"));
            let b1 = self.var(&format!("block{b}.ffn.b1"));
            let w2 = self.var(&format!("block{b}.ffn.w2"));
            let b2 = self.var(&format!("block{b}.ffn.b2"));
            let lin = tape.matmul(normed, w1);
            let lin = tape.add_row(lin, b1);
            let act = tape.silu(lin);
            let lin2 = tape.matmul(act, w2);
            let lin2 = tape.add_row(lin2, b2);
            h = tape.add(h, lin2);
        }

        let wu = self.var("unembed.w");
        let bu = self.var("unembed.b");
        let out = tape.matmul(h, wu);
        Ok(tape.add_row(out, bu))
    }
}

/// Single forward pass on a throwaway tape.
pub fn eval(
    params: &DenoiserParams,
    x: &Tensor,
    tau: f64,
    conds: &[CondInput<'_>],
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let model = TapedModel::insert(&mut tape, params);
    let out = model.forward(&mut tape, x, tau, conds)?;
    Ok(Tensor::from_vec(x.shape(), tape.value(out).to_vec()).expect("output matches input shape"))
}

/// Velocity prediction from pre-projected motion embeddings.
pub fn forward(
    params: &DenoiserParams,
    x: &Tensor,
    tau: f64,
    motion: &[MotionEmbedding],
) -> Result<Tensor, ModelError> {
    let conds: Vec<CondInput> = motion.iter().map(CondInput::Embedded).collect();
    eval(params, x, tau, &conds)
}

/// Velocity prediction from raw reshaped conditions (projection included in
/// the pass, so its parameters receive gradient during training).
pub fn forward_raw(
    params: &DenoiserParams,
    x: &Tensor,
    tau: f64,
    conds: &[ReshapedCondition],
) -> Result<Tensor, ModelError> {
    let inputs: Vec<CondInput> = conds.iter().map(CondInput::Raw).collect();
    eval(params, x, tau, &inputs)
}

/// Exact reverse-mode gradients of a scalar loss built on top of the model.
///
/// Returns the loss value and a gradient [`ParamSet`] aligned with
/// `params.params` (zero tensors for parameters the loss does not reach).
pub fn grad(
    params: &DenoiserParams,
    build_loss: impl FnOnce(&mut Tape, &TapedModel) -> Result<Var, ModelError>,
) -> Result<(f64, ParamSet), ModelError> {
    let mut tape = Tape::new();
    let model = TapedModel::insert(&mut tape, params);
    let loss = build_loss(&mut tape, &model)?;
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss);
    let mut out = ParamSet::new();
    for ((name, var), (_, tensor)) in model.vars().iter().zip(params.params.iter()) {
        let g = match grads.get(*var) {
            Some(g) => {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFinite { param: name.clone() });
                }
                Tensor::from_vec(tensor.shape(), g.to_vec()).expect("gradient matches param")
            }
            None => Tensor::zeros(tensor.shape()),
        };
        out.push(name.clone(), g);
    }
    Ok((loss_value, out))
}
