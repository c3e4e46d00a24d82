//! Motion conditions and unified temporal motion modulation.
//!
//! Per-frame condition sequences (audio descriptors, rasterized skeletons) are
//! redistributed to latent temporal resolution by an exact reshape that trades
//! frames for channel rows, projected into the latent width, and fused into
//! video latents with per-timestep cross-attention. The two ablation paths
//! (plain temporal averaging, and partial expansion) live here too.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::LatentVideo;
use crate::tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("waveform too short: {samples} samples cover no full frame")]
    WaveTooShort { samples: usize },
    #[error("audio descriptor count d_a={d_a} must be at least 2")]
    TooFewDescriptors { d_a: usize },
    #[error("frame count {t} not divisible by {rho}")]
    IndivisibleFrames { t: usize, rho: usize },
    #[error("token rows {rows} not divisible by {rho}")]
    IndivisibleChannels { rows: usize, rho: usize },
    #[error("expansion factor {k} must divide rho {rho}")]
    IndivisibleExpansion { rho: usize, k: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temporal mismatch: embedding has {emb} steps, latent has {latent}")]
    TemporalMismatch { emb: usize, latent: usize },
    #[error("invalid field: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Skeleton,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Skeleton => "skeleton",
        }
    }
}

/// Raw speech signal.
#[derive(Debug, Clone)]
pub struct AudioWaveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub frame_rate: f64,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64, frame_rate: f64) -> Result<Self, MotionError> {
        if samples.is_empty() {
            return Err(MotionError::Invalid("empty waveform".into()));
        }
        if !(sample_rate > 0.0) || !(frame_rate > 0.0) {
            return Err(MotionError::Invalid("rates must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(MotionError::Invalid("non-finite sample".into()));
        }
        Ok(AudioWaveform { samples, sample_rate, frame_rate })
    }

    pub fn frames_covered(&self) -> usize {
        (self.samples.len() as f64 * self.frame_rate / self.sample_rate).floor() as usize
    }
}

/// 2D keypoints `(T, J, 3)` as (x, y, confidence), x/y normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct SkeletonSequence {
    pub keypoints: Tensor,
}

impl SkeletonSequence {
    pub fn new(keypoints: Tensor) -> Result<Self, MotionError> {
        let shape = keypoints.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[1] < 1 {
            return Err(MotionError::Invalid(format!(
                "keypoints must be (T, J, 3), got {shape:?}"
            )));
        }
        for chunk in keypoints.data().chunks_exact(3) {
            let (x, y, conf) = (chunk[0], chunk[1], chunk[2]);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) || !(0.0..=1.0).contains(&conf)
            {
                return Err(MotionError::Invalid(format!(
                    "keypoint ({x}, {y}, {conf}) out of [0, 1]"
                )));
            }
        }
        Ok(SkeletonSequence { keypoints })
    }

    pub fn frames(&self) -> usize {
        self.keypoints.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.keypoints.shape()[1]
    }
}

/// Frame-aligned condition sequence `(T, D_m, d_m)`.
#[derive(Debug, Clone)]
pub struct MotionCondition {
    pub modality: Modality,
    pub data: Tensor,
    pub frame_rate: f64,
}

impl MotionCondition {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Condition after temporal redistribution: `(T', rho * D_m, d_m)`.
#[derive(Debug, Clone)]
pub struct ReshapedCondition {
    pub modality: Modality,
    pub data: Tensor,
    pub rho: usize,
}

impl ReshapedCondition {
    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens_per_step(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Condition projected into latent width: `(T', rho * D_m, d)`.
#[derive(Debug, Clone)]
pub struct MotionEmbedding {
    pub modality: Modality,
    pub data: Tensor,
}

impl MotionEmbedding {
    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens_per_step(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-modality projection of Eq-7 form: `H = C W + b`.
#[derive(Debug, Clone)]
pub struct ProjectionMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Cross-attention fusion parameters: shared query/key/value maps plus the
/// per-modality projections.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub projections: BTreeMap<Modality, ProjectionMap>,
}

impl FusionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Self {
        FusionParams { w_q, w_k, w_v, projections: BTreeMap::new() }
    }

    pub fn with_projection(mut self, modality: Modality, weight: Tensor, bias: Tensor) -> Self {
        self.projections.insert(modality, ProjectionMap { weight, bias });
        self
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Frequencies (Hz) of the fixed band-energy filter bank.
pub fn band_frequencies(n_bands: usize) -> Vec<f64> {
    (0..n_bands).map(|k| 200.0 * 2f64.powi(k as i32)).collect()
}

/// Deterministic audio descriptor stub.
///
/// Per frame, `n_a` sub-frame windows each yield `d_a` channels: windowed RMS,
/// first difference of the RMS sequence, and `d_a - 2` band amplitudes from
/// the fixed filter bank of [`band_frequencies`].
pub fn encode_audio(
    wave: &AudioWaveform,
    n_a: usize,
    d_a: usize,
) -> Result<MotionCondition, MotionError> {
    if d_a < 2 {
        return Err(MotionError::TooFewDescriptors { d_a });
    }
    assert!(n_a >= 1);
    let frames = wave.frames_covered();
    if frames == 0 {
        return Err(MotionError::WaveTooShort { samples: wave.samples.len() });
    }
    let spf = wave.sample_rate / wave.frame_rate;
    let wlen = ((spf / n_a as f64).floor() as usize).max(1);
    let freqs = band_frequencies(d_a - 2);
    let mut out = Tensor::zeros(&[frames, n_a, d_a]);
    let mut prev_rms = 0.0;
    let mut first = true;
    for t in 0..frames {
        for j in 0..n_a {
            let mut start = ((t as f64 + j as f64 / n_a as f64) * spf).round() as usize;
            if start + wlen > wave.samples.len() {
                start = wave.samples.len() - wlen;
            }
            let window = &wave.samples[start..start + wlen];
            let rms =
                (window.iter().map(|v| v * v).sum::<f64>() / wlen as f64).sqrt();
            let delta = if first { 0.0 } else { rms - prev_rms };
            first = false;
            prev_rms = rms;
            out.set(&[t, j, 0], rms);
            out.set(&[t, j, 1], delta);
            for (k, &f) in freqs.iter().enumerate() {
                let omega = 2.0 * std::f64::consts::PI * f / wave.sample_rate;
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &s) in window.iter().enumerate() {
                    let phase = omega * n as f64;
                    re += s * phase.cos();
                    im -= s * phase.sin();
                }
                let amp = 2.0 * (re * re + im * im).sqrt() / wlen as f64;
                out.set(&[t, j, 2 + k], amp);
            }
        }
    }
    Ok(MotionCondition { modality: Modality::Audio, data: out, frame_rate: wave.frame_rate })
}

/// Gaussian splat width in grid cells.
const SPLAT_SIGMA: f64 = 1.0;

/// Deterministic skeleton rasterizer stub.
///
/// Each joint splats an isotropic Gaussian (sigma = 1 cell, scaled by its
/// confidence) onto an `h_lat x w_lat` grid; per-joint maps are combined into
/// `d_k` channels by the provided `(J, d_k)` projection.
pub fn encode_skeleton(
    skel: &SkeletonSequence,
    h_lat: usize,
    w_lat: usize,
    d_k: usize,
    proj: &Tensor,
) -> Result<MotionCondition, MotionError> {
    let (t, joints) = (skel.frames(), skel.joints());
    if proj.shape() != [joints, d_k] {
        return Err(MotionError::ShapeMismatch(format!(
            "skeleton projection must be ({joints}, {d_k}), got {:?}",
            proj.shape()
        )));
    }
    let cells = h_lat * w_lat;
    let mut out = Tensor::zeros(&[t, cells, d_k]);
    for ti in 0..t {
        for j in 0..joints {
            let x = skel.keypoints.at(&[ti, j, 0]);
            let y = skel.keypoints.at(&[ti, j, 1]);
            let conf = skel.keypoints.at(&[ti, j, 2]);
            if conf == 0.0 {
                continue;
            }
            let cc = x * (w_lat - 1) as f64;
            let cr = y * (h_lat - 1) as f64;
            for r in 0..h_lat {
                for c in 0..w_lat {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    let splat = conf * (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                    if splat < 1e-12 {
                        continue;
                    }
                    let cell = r * w_lat + c;
                    for k in 0..d_k {
                        let cur = out.at(&[ti, cell, k]);
                        out.set(&[ti, cell, k], cur + splat * proj.at(&[j, k]));
                    }
                }
            }
        }
    }
    Ok(MotionCondition { modality: Modality::Skeleton, data: out, frame_rate: 0.0 })
}

/// Exact temporal-to-channel redistribution.
///
/// Source element `(t, u, v)` moves to `(t / rho, (t % rho) * D_m + u, v)`.
/// No value is created, dropped, or averaged.
pub fn reshape_temporal(
    cond: &MotionCondition,
    rho: usize,
) -> Result<ReshapedCondition, MotionError> {
    assert!(rho >= 1);
    let (t, d_m, feat) = (cond.frames(), cond.tokens_per_frame(), cond.feature_dim());
    if t % rho != 0 {
        return Err(MotionError::IndivisibleFrames { t, rho });
    }
    let steps = t / rho;
    let mut out = Tensor::zeros(&[steps, rho * d_m, feat]);
    for ti in 0..t {
        for u in 0..d_m {
            for v in 0..feat {
                out.set(&[ti / rho, (ti % rho) * d_m + u, v], cond.data.at(&[ti, u, v]));
            }
        }
    }
    Ok(ReshapedCondition { modality: cond.modality, data: out, rho })
}

/// Exact inverse of [`reshape_temporal`].
pub fn inverse_reshape(
    cond: &ReshapedCondition,
    rho: usize,
) -> Result<MotionCondition, MotionError> {
    assert!(rho >= 1);
    let (steps, rows, feat) = (cond.steps(), cond.tokens_per_step(), cond.feature_dim());
    if rows % rho != 0 {
        return Err(MotionError::IndivisibleChannels { rows, rho });
    }
    let d_m = rows / rho;
    let mut out = Tensor::zeros(&[steps * rho, d_m, feat]);
    for s in 0..steps {
        for p in 0..rows {
            let (offset, u) = (p / d_m, p % d_m);
            for v in 0..feat {
                out.set(&[s * rho + offset, u, v], cond.data.at(&[s, p, v]));
            }
        }
    }
    Ok(MotionCondition { modality: cond.modality, data: out, frame_rate: 0.0 })
}

/// Learnable latent-space projection: `H[t', j, :] = C[t', j, :] W + b`.
pub fn project(
    cond: &ReshapedCondition,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<MotionEmbedding, MotionError> {
    let feat = cond.feature_dim();
    if weight.shape().len() != 2 || weight.shape()[0] != feat {
        return Err(MotionError::ShapeMismatch(format!(
            "weight must be ({feat}, d), got {:?}",
            weight.shape()
        )));
    }
    let d = weight.shape()[1];
    if bias.numel() != d {
        return Err(MotionError::ShapeMismatch(format!(
            "bias must have length {d}, got {}",
            bias.numel()
        )));
    }
    let (steps, rows) = (cond.steps(), cond.tokens_per_step());
    let flat = tape::matmul(cond.data.data(), steps * rows, feat, weight.data(), d);
    let mut out = Tensor::from_vec(&[steps, rows, d], flat).expect("projection shape");
    let b = bias.data();
    for chunk in out.data_mut().chunks_exact_mut(d) {
        for (o, &bv) in chunk.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(MotionEmbedding { modality: cond.modality, data: out })
}

/// Cross-attention fusion of motion embeddings into video latents, scoped per
/// latent timestep: queries come from the step's spatial tokens, keys/values
/// from the concatenated modality embeddings at that step, and the result is
/// added residually.
pub fn fuse(
    z: &LatentVideo,
    embeddings: &[MotionEmbedding],
    params: &FusionParams,
) -> Result<LatentVideo, MotionError> {
    Ok(fuse_with_attention(z, embeddings, params)?.0)
}

/// [`fuse`] that also returns each step's attention matrix (rows = spatial
/// tokens, cols = condition tokens).
pub fn fuse_with_attention(
    z: &LatentVideo,
    embeddings: &[MotionEmbedding],
    params: &FusionParams,
) -> Result<(LatentVideo, Vec<Tensor>), MotionError> {
    let shape = z.data().shape().to_vec();
    let (steps, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    if params.w_q.shape() != [d, d] || params.w_k.shape() != [d, d] || params.w_v.shape() != [d, d]
    {
        return Err(MotionError::ShapeMismatch(format!(
            "fusion maps must be ({d}, {d})"
        )));
    }
    for emb in embeddings {
        if emb.steps() != steps {
            return Err(MotionError::TemporalMismatch { emb: emb.steps(), latent: steps });
        }
        if emb.width() != d {
            return Err(MotionError::ShapeMismatch(format!(
                "embedding width {} does not match latent channels {d}",
                emb.width()
            )));
        }
    }
    if embeddings.is_empty() {
        return Ok((z.clone(), Vec::new()));
    }
    let spatial = h * w;
    let total_tokens: usize = embeddings.iter().map(|e| e.tokens_per_step()).sum();
    let mut out = z.data().clone();
    let mut attentions = Vec::with_capacity(steps);
    let scale = 1.0 / (d as f64).sqrt();
    for s in 0..steps {
        let z_step = &z.data().data()[s * spatial * d..(s + 1) * spatial * d];
        let mut cond = Vec::with_capacity(total_tokens * d);
        for emb in embeddings {
            let rows = emb.tokens_per_step();
            cond.extend_from_slice(&emb.data.data()[s * rows * d..(s + 1) * rows * d]);
        }
        let q = tape::matmul(z_step, spatial, d, params.w_q.data(), d);
        let k = tape::matmul(&cond, total_tokens, d, params.w_k.data(), d);
        let v = tape::matmul(&cond, total_tokens, d, params.w_v.data(), d);
        let mut scores = tape::matmul_nt(&q, spatial, d, &k, total_tokens);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let attn = softmax_rows(&scores, spatial, total_tokens);
        let mixed = tape::matmul(&attn, spatial, total_tokens, &v, d);
        let out_data = out.data_mut();
        for i in 0..spatial * d {
            out_data[s * spatial * d + i] += mixed[i];
        }
        attentions.push(
            Tensor::from_vec(&[spatial, total_tokens], attn).expect("attention shape"),
        );
    }
    Ok((LatentVideo::new(out), attentions))
}

/// Project per-modality reshaped conditions with the params' own projection
/// maps, then fuse.
pub fn fuse_raw(
    z: &LatentVideo,
    conds: &[ReshapedCondition],
    params: &FusionParams,
) -> Result<LatentVideo, MotionError> {
    let mut embeddings = Vec::with_capacity(conds.len());
    for cond in conds {
        let map = params.projections.get(&cond.modality).ok_or_else(|| {
            MotionError::Invalid(format!("no projection for modality {}", cond.modality.as_str()))
        })?;
        embeddings.push(project(cond, &map.weight, &map.bias)?);
    }
    fuse(z, &embeddings, params)
}

fn softmax_rows(scores: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &scores[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    out
}

/// Ablation path: average blocks of `rho` frames, no channel expansion.
pub fn subsample_baseline(
    cond: &MotionCondition,
    rho: usize,
) -> Result<MotionCondition, MotionError> {
    assert!(rho >= 1);
    let (t, d_m, feat) = (cond.frames(), cond.tokens_per_frame(), cond.feature_dim());
    if t % rho != 0 {
        return Err(MotionError::IndivisibleFrames { t, rho });
    }
    let steps = t / rho;
    let mut out = Tensor::zeros(&[steps, d_m, feat]);
    for s in 0..steps {
        for u in 0..d_m {
            for v in 0..feat {
                let mut acc = 0.0;
                for o in 0..rho {
                    acc += cond.data.at(&[s * rho + o, u, v]);
                }
                out.set(&[s, u, v], acc / rho as f64);
            }
        }
    }
    Ok(MotionCondition { modality: cond.modality, data: out, frame_rate: cond.frame_rate / rho as f64 })
}

/// Ablation path: average frames in groups of `rho / k`, then redistribute the
/// remaining factor `k` into channels. `k = rho` recovers [`reshape_temporal`];
/// `k = 1` recovers [`subsample_baseline`].
pub fn partial_expand(
    cond: &MotionCondition,
    rho: usize,
    k: usize,
) -> Result<ReshapedCondition, MotionError> {
    assert!(rho >= 1 && k >= 1);
    if rho % k != 0 {
        return Err(MotionError::IndivisibleExpansion { rho, k });
    }
    let t = cond.frames();
    if t % rho != 0 {
        return Err(MotionError::IndivisibleFrames { t, rho });
    }
    let averaged = subsample_baseline(cond, rho / k)?;
    reshape_temporal(&averaged, k)
}

#[derive(Serialize, Deserialize)]
struct CondManifest {
    modality: String,
    frame_rate: f64,
    shape: Vec<usize>,
}

/// Write a condition as `<path>` (.ten) plus a JSON sidecar manifest.
pub fn write_condition(cond: &MotionCondition, path: &Path) -> std::io::Result<()> {
    cond.data
        .write_ten(path)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let manifest = CondManifest {
        modality: cond.modality.as_str().to_string(),
        frame_rate: cond.frame_rate,
        shape: cond.data.shape().to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(sidecar_path(path), json + "\n")
}

pub fn read_condition(path: &Path) -> std::io::Result<MotionCondition> {
    let data =
        Tensor::read_ten(path).map_err(|e| std::io::Error::other(e.to_string()))?;
    let manifest: CondManifest =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    let modality = match manifest.modality.as_str() {
        "audio" => Modality::Audio,
        "skeleton" => Modality::Skeleton,
        other => return Err(std::io::Error::other(format!("unknown modality {other}"))),
    };
    Ok(MotionCondition { modality, data, frame_rate: manifest.frame_rate })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}
