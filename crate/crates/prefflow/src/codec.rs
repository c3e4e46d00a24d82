//! Fixed linear patch codec standing in for a causal 3D video autoencoder.
//!
//! Videos are split into non-overlapping `(4, 8, 8, C)` blocks; each block is
//! flattened (frame, then row, then column, then channel) and projected onto a
//! seeded orthonormal basis of `d` rows. The compression contract is exact:
//! `(T, H, W, C) -> (T/4, H/8, W/8, d)`.

use thiserror::Error;

use crate::rng::Prng;
use crate::tensor::Tensor;

/// Temporal block extent (latent step covers this many frames).
pub const TEMPORAL_FACTOR: usize = 4;
/// Spatial block extent along each of H and W.
pub const SPATIAL_FACTOR: usize = 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("latent dim {d} exceeds patch size {max}")]
    DimensionTooLarge { d: usize, max: usize },
    #[error("video shape ({t}, {h}, {w}) violates the codec contract: {reason}")]
    ShapeMismatch { t: usize, h: usize, w: usize, reason: String },
    #[error("channel count {video} does not match codec channels {codec}")]
    ChannelMismatch { video: usize, codec: usize },
    #[error("latent channel count {latent} does not match codec rank {codec}")]
    RankMismatch { latent: usize, codec: usize },
    #[error("video values must be finite and within [-1, 1] (bad value {value} at index {index})")]
    OutOfRange { value: f64, index: usize },
}

/// Raw video: `(T, H, W, C)` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct VideoTensor {
    data: Tensor,
    /// Shape before [`pad_to_contract`], if padding was applied.
    orig_shape: Option<[usize; 3]>,
}

impl VideoTensor {
    pub fn new(data: Tensor) -> Result<Self, CodecError> {
        assert_eq!(data.shape().len(), 4, "video must be (T, H, W, C)");
        for (index, &v) in data.data().iter().enumerate() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(CodecError::OutOfRange { value: v, index });
            }
        }
        Ok(VideoTensor { data, orig_shape: None })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn orig_shape(&self) -> Option<[usize; 3]> {
        self.orig_shape
    }

    /// True when T is divisible by 4 (and >= 4) and H, W by 8.
    pub fn conforms(&self) -> bool {
        self.frames() >= TEMPORAL_FACTOR
            && self.frames() % TEMPORAL_FACTOR == 0
            && self.height() % SPATIAL_FACTOR == 0
            && self.width() % SPATIAL_FACTOR == 0
    }
}

/// Compressed video `(T', H', W', d)`.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Self {
        assert_eq!(data.shape().len(), 4, "latent must be (T', H', W', d)");
        LatentVideo { data }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Seeded orthonormal projection: `d` rows of length `4*8*8*C`.
#[derive(Debug, Clone)]
pub struct CodecBasis {
    /// Row-major `(d, patch)` matrix with orthonormal rows.
    projection: Tensor,
    channels: usize,
    pub seed: u64,
}

impl CodecBasis {
    pub fn rank(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }
}

/// Build the seeded orthonormal patch basis.
pub fn make_codec(d: usize, channels: usize, seed: u64) -> Result<CodecBasis, CodecError> {
    assert!(d > 0 && channels > 0);
    let patch = TEMPORAL_FACTOR * SPATIAL_FACTOR * SPATIAL_FACTOR * channels;
    if d > patch {
        return Err(CodecError::DimensionTooLarge { d, max: patch });
    }
    let mut rng = Prng::derive(seed, "codec-basis");
    let mut rows: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..patch).map(|_| rng.normal()).collect())
        .collect();
    // Modified Gram-Schmidt. Seeded Gaussian rows are almost surely full rank;
    // a degenerate row is re-drawn.
    let mut i = 0;
    while i < d {
        for j in 0..i {
            let (head, tail) = rows.split_at_mut(i);
            let prev = &head[j];
            let cur = &mut tail[0];
            let dot: f64 = prev.iter().zip(cur.iter()).map(|(&a, &b)| a * b).sum();
            for (c, p) in cur.iter_mut().zip(prev.iter()) {
                *c -= dot * p;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            rows[i] = (0..patch).map(|_| rng.normal()).collect();
            continue;
        }
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
        i += 1;
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let projection = Tensor::from_vec(&[d, patch], flat).expect("basis shape");
    Ok(CodecBasis { projection, channels, seed })
}

/// Flatten one `(4, 8, 8, C)` block in frame, row, column, channel order.
fn gather_block(
    video: &Tensor,
    tb: usize,
    hb: usize,
    wb: usize,
    channels: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    for dt in 0..TEMPORAL_FACTOR {
        for dh in 0..SPATIAL_FACTOR {
            for dw in 0..SPATIAL_FACTOR {
                for c in 0..channels {
                    out.push(video.at(&[
                        tb * TEMPORAL_FACTOR + dt,
                        hb * SPATIAL_FACTOR + dh,
                        wb * SPATIAL_FACTOR + dw,
                        c,
                    ]));
                }
            }
        }
    }
}

/// Compress a conforming video to its latent representation.
pub fn encode(video: &VideoTensor, basis: &CodecBasis) -> Result<LatentVideo, CodecError> {
    if video.channels() != basis.channels() {
        return Err(CodecError::ChannelMismatch {
            video: video.channels(),
            codec: basis.channels(),
        });
    }
    if !video.conforms() {
        return Err(CodecError::ShapeMismatch {
            t: video.frames(),
            h: video.height(),
            w: video.width(),
            reason: format!(
                "T must be a positive multiple of {TEMPORAL_FACTOR}, H and W multiples of {SPATIAL_FACTOR} (run pad_to_contract first)"
            ),
        });
    }
    let (t, h, w, c) =
        (video.frames(), video.height(), video.width(), video.channels());
    let (ts, hs, ws) = (t / TEMPORAL_FACTOR, h / SPATIAL_FACTOR, w / SPATIAL_FACTOR);
    let d = basis.rank();
    let p = basis.projection.data();
    let patch = basis.patch_len();
    let mut out = Tensor::zeros(&[ts, hs, ws, d]);
    let mut block = Vec::with_capacity(patch);
    for tb in 0..ts {
        for hb in 0..hs {
            for wb in 0..ws {
                gather_block(video.data(), tb, hb, wb, c, &mut block);
                let base = ((tb * hs + hb) * ws + wb) * d;
                let out_data = out.data_mut();
                for r in 0..d {
                    let row = &p[r * patch..(r + 1) * patch];
                    out_data[base + r] =
                        row.iter().zip(&block).map(|(&a, &b)| a * b).sum();
                }
            }
        }
    }
    Ok(LatentVideo::new(out))
}

/// Reconstruct video from latent via the transpose projection, clamped to [-1, 1].
pub fn decode(latent: &LatentVideo, basis: &CodecBasis) -> Result<VideoTensor, CodecError> {
    let raw = decode_unclamped(latent, basis)?;
    let clamped = raw.map(|v| v.clamp(-1.0, 1.0));
    Ok(VideoTensor { data: clamped, orig_shape: None })
}

/// Transpose projection without the [-1, 1] clamp (round-trip identities hold
/// exactly only on this path).
pub fn decode_unclamped(latent: &LatentVideo, basis: &CodecBasis) -> Result<Tensor, CodecError> {
    let shape = latent.data.shape();
    let (ts, hs, ws, d) = (shape[0], shape[1], shape[2], shape[3]);
    if d != basis.rank() {
        return Err(CodecError::RankMismatch { latent: d, codec: basis.rank() });
    }
    let c = basis.channels();
    let patch = basis.patch_len();
    let p = basis.projection.data();
    let mut out = Tensor::zeros(&[ts * TEMPORAL_FACTOR, hs * SPATIAL_FACTOR, ws * SPATIAL_FACTOR, c]);
    for tb in 0..ts {
        for hb in 0..hs {
            for wb in 0..ws {
                let base = ((tb * hs + hb) * ws + wb) * d;
                let mut block = vec![0.0; patch];
                for r in 0..d {
                    let coef = latent.data.data()[base + r];
                    if coef == 0.0 {
                        continue;
                    }
                    let row = &p[r * patch..(r + 1) * patch];
                    for (b, &pv) in block.iter_mut().zip(row) {
                        *b += coef * pv;
                    }
                }
                let mut k = 0;
                for dt in 0..TEMPORAL_FACTOR {
                    for dh in 0..SPATIAL_FACTOR {
                        for dw in 0..SPATIAL_FACTOR {
                            for ch in 0..c {
                                out.set(
                                    &[
                                        tb * TEMPORAL_FACTOR + dt,
                                        hb * SPATIAL_FACTOR + dh,
                                        wb * SPATIAL_FACTOR + dw,
                                        ch,
                                    ],
                                    block[k],
                                );
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pad so T divides 4 and H, W divide 8: the last frame repeats in time,
/// space reflects symmetrically. The original shape is kept as metadata.
pub fn pad_to_contract(video: &VideoTensor) -> VideoTensor {
    let (t, h, w, c) =
        (video.frames(), video.height(), video.width(), video.channels());
    let t_new = pad_up(t.max(TEMPORAL_FACTOR), TEMPORAL_FACTOR);
    let h_new = pad_up(h, SPATIAL_FACTOR);
    let w_new = pad_up(w, SPATIAL_FACTOR);
    if (t_new, h_new, w_new) == (t, h, w) {
        return video.clone();
    }
    let mut out = Tensor::zeros(&[t_new, h_new, w_new, c]);
    for ti in 0..t_new {
        let ts = ti.min(t - 1);
        for hi in 0..h_new {
            let hs = reflect_index(hi, h);
            for wi in 0..w_new {
                let ws = reflect_index(wi, w);
                for ci in 0..c {
                    out.set(&[ti, hi, wi, ci], video.data.at(&[ts, hs, ws, ci]));
                }
            }
        }
    }
    VideoTensor { data: out, orig_shape: Some([t, h, w]) }
}

fn pad_up(n: usize, to: usize) -> usize {
    n.div_ceil(to) * to
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        // symmetric reflection about the trailing edge
        len - 1 - (i - len).min(len - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_video(rng: &mut Prng, t: usize, h: usize, w: usize, c: usize) -> VideoTensor {
        VideoTensor::new(rng.uniform_tensor(&[t, h, w, c], -1.0, 1.0)).unwrap()
    }

    #[test]
    fn basis_rows_are_orthonormal() {
        let basis = make_codec(16, 3, 7).unwrap();
        let p = basis.projection().data();
        let patch = basis.patch_len();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = (0..patch).map(|k| p[i * patch + k] * p[j * patch + k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "({i},{j}) -> {dot}");
            }
        }
    }

    #[test]
    fn identical_seed_gives_bit_identical_basis() {
        let a = make_codec(16, 3, 7).unwrap();
        let b = make_codec(16, 3, 7).unwrap();
        assert_eq!(a.projection().data(), b.projection().data());
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let err = make_codec(769, 3, 0).unwrap_err();
        assert!(matches!(err, CodecError::DimensionTooLarge { d: 769, max: 768 }));
    }

    #[test]
    fn encode_shape_contract() {
        let mut rng = Prng::new(1);
        let video = random_video(&mut rng, 8, 16, 16, 3);
        let basis = make_codec(12, 3, 0).unwrap();
        let latent = encode(&video, &basis).unwrap();
        assert_eq!(latent.data().shape(), &[2, 2, 2, 12]);
    }

    #[test]
    fn zero_video_encodes_to_zero_latent() {
        let video = VideoTensor::new(Tensor::zeros(&[4, 8, 8, 3])).unwrap();
        let basis = make_codec(8, 3, 2).unwrap();
        let latent = encode(&video, &basis).unwrap();
        assert!(latent.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_latent_decodes_to_zero_video() {
        let basis = make_codec(8, 3, 2).unwrap();
        let latent = LatentVideo::new(Tensor::zeros(&[2, 1, 1, 8]));
        let video = decode(&latent, &basis).unwrap();
        assert!(video.data().data().iter().all(|&v| v == 0.0));
        assert_eq!(video.data().shape(), &[8, 8, 8, 3]);
    }

    #[test]
    fn full_rank_codec_is_lossless() {
        let mut rng = Prng::new(3);
        let video = random_video(&mut rng, 4, 8, 8, 3);
        let basis = make_codec(768, 3, 0).unwrap();
        let latent = encode(&video, &basis).unwrap();
        let back = decode_unclamped(&latent, &basis).unwrap();
        assert!(back.max_abs_diff(video.data()) < 1e-5);
    }

    #[test]
    fn latent_side_round_trip_is_identity() {
        let mut rng = Prng::new(4);
        let basis = make_codec(16, 3, 7).unwrap();
        let latent = LatentVideo::new(rng.normal_tensor(&[2, 2, 2, 16]));
        let video = decode_unclamped(&latent, &basis).unwrap();
        let wrapped = VideoTensor { data: video, orig_shape: None };
        let back = encode(&wrapped, &basis).unwrap();
        assert!(back.data().max_abs_diff(latent.data()) < 1e-5);
    }

    #[test]
    fn encode_never_increases_energy() {
        let mut rng = Prng::new(5);
        for seed in 0..5u64 {
            let basis = make_codec(24, 3, seed).unwrap();
            let video = random_video(&mut rng, 4, 8, 16, 3);
            let latent = encode(&video, &basis).unwrap();
            assert!(latent.data().norm2() <= video.data().norm2() + 1e-9);
        }
    }

    #[test]
    fn encode_rejects_nonconforming_shapes() {
        let mut rng = Prng::new(6);
        let video = VideoTensor::new(rng.uniform_tensor(&[6, 8, 8, 3], -1.0, 1.0)).unwrap();
        let basis = make_codec(8, 3, 0).unwrap();
        assert!(matches!(encode(&video, &basis), Err(CodecError::ShapeMismatch { .. })));
    }

    #[test]
    fn pad_repeats_last_frame_and_reflects_space() {
        let mut rng = Prng::new(7);
        let video = random_video(&mut rng, 7, 16, 16, 1);
        let padded = pad_to_contract(&video);
        assert_eq!(padded.data().shape(), &[8, 16, 16, 1]);
        assert_eq!(padded.orig_shape(), Some([7, 16, 16]));
        for hi in 0..16 {
            for wi in 0..16 {
                assert_eq!(
                    padded.data().at(&[7, hi, wi, 0]),
                    video.data().at(&[6, hi, wi, 0])
                );
            }
        }

        let odd = random_video(&mut rng, 5, 15, 16, 1);
        let padded = pad_to_contract(&odd);
        assert_eq!(padded.data().shape(), &[8, 16, 16, 1]);
        // symmetric reflection: the new row mirrors the last row
        assert_eq!(padded.data().at(&[0, 15, 3, 0]), odd.data().at(&[0, 14, 3, 0]));
    }

    #[test]
    fn pad_is_identity_on_conforming_video() {
        let mut rng = Prng::new(8);
        let video = random_video(&mut rng, 8, 8, 8, 2);
        let padded = pad_to_contract(&video);
        assert_eq!(padded.data().data(), video.data().data());
        assert_eq!(padded.orig_shape(), None);
    }
}
