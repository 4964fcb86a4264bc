//! Per-channel waveform <-> latent codec.
//!
//! Every channel is cut into non-overlapping frames of `hop` samples, and
//! each frame is represented by its first `D` orthonormal DCT-II
//! coefficients. Decoding zero-fills the discarded coefficients and applies
//! the inverse transform, so `decode(encode(x))` is the orthogonal
//! projection onto the retained subspace.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::audio::{ChannelLayout, MultichannelAudio};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub frame_rate: u32,
    pub latent_dim: usize,
    pub sample_rate: u32,
}

impl CodecConfig {
    pub fn desk() -> Self {
        CodecConfig {
            frame_rate: 25,
            latent_dim: 8,
            sample_rate: 48_000,
        }
    }

    pub fn full() -> Self {
        CodecConfig {
            latent_dim: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_rate == 0 || self.sample_rate % self.frame_rate != 0 {
            return Err(Error::Config(format!(
                "sample rate {} is not divisible by frame rate {}",
                self.sample_rate, self.frame_rate
            )));
        }
        if self.latent_dim == 0 || self.latent_dim > self.hop() {
            return Err(Error::Config(format!(
                "latent dimension {} must lie in 1..={}",
                self.latent_dim,
                self.hop()
            )));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        (self.sample_rate / self.frame_rate.max(1)) as usize
    }

    pub fn frames_for(&self, num_samples: usize) -> usize {
        num_samples / self.hop()
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Latent array of shape `[C, D, T']`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub channels: usize,
    pub latent_dim: usize,
    pub frames: usize,
    pub frame_rate: u32,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(
        channels: usize,
        latent_dim: usize,
        frames: usize,
        frame_rate: u32,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels * latent_dim * frames != data.len() || data.is_empty() {
            return Err(Error::Dimension {
                op: "latent",
                detail: format!(
                    "[{channels}, {latent_dim}, {frames}] does not hold {} values",
                    data.len()
                ),
            });
        }
        Ok(LatentTensor {
            channels,
            latent_dim,
            frames,
            frame_rate,
            data,
        })
    }

    pub fn zeros(channels: usize, latent_dim: usize, frames: usize, frame_rate: u32) -> Self {
        LatentTensor {
            channels,
            latent_dim,
            frames,
            frame_rate,
            data: vec![0.0; channels * latent_dim * frames],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.latent_dim, self.frames]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, d: usize, t: usize) -> f64 {
        self.data[(c * self.latent_dim + d) * self.frames + t]
    }

    pub fn set(&mut self, c: usize, d: usize, t: usize, v: f64) {
        self.data[(c * self.latent_dim + d) * self.frames + t] = v;
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.channels, self.latent_dim, self.frames, self.frame_rate, data)
    }

    /// Token-major view: `[T', C*D]` with feature index `c*D + d`.
    pub fn to_tokens(&self) -> Vec<f64> {
        let f = self.channels * self.latent_dim;
        let mut out = vec![0.0; self.frames * f];
        for row in 0..f {
            for t in 0..self.frames {
                out[t * f + row] = self.data[row * self.frames + t];
            }
        }
        out
    }

    pub fn from_tokens(
        channels: usize,
        latent_dim: usize,
        frames: usize,
        frame_rate: u32,
        tokens: &[f64],
    ) -> Result<Self> {
        let f = channels * latent_dim;
        if tokens.len() != f * frames {
            return Err(Error::Dimension {
                op: "from_tokens",
                detail: format!("{} values for [{frames}, {f}] tokens", tokens.len()),
            });
        }
        let mut data = vec![0.0; tokens.len()];
        for row in 0..f {
            for t in 0..frames {
                data[row * frames + t] = tokens[t * f + row];
            }
        }
        Self::new(channels, latent_dim, frames, frame_rate, data)
    }

    /// Frames `[start, start + len)`.
    pub fn frame_window(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(self.channels * self.latent_dim * len);
        for row in self.data.chunks(self.frames) {
            data.extend_from_slice(&row[start..start + len]);
        }
        LatentTensor {
            frames: len,
            data,
            ..*self
        }
    }

    /// Channel `c` of the result is channel `order[c]` of `self`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.channels || order.iter().any(|&c| c >= self.channels) {
            return Err(Error::InvalidArgument(format!(
                "channel order {order:?} does not fit {} channels",
                self.channels
            )));
        }
        let block = self.latent_dim * self.frames;
        let mut data = Vec::with_capacity(self.data.len());
        for &c in order {
            data.extend_from_slice(&self.data[c * block..(c + 1) * block]);
        }
        Ok(LatentTensor { data, ..*self })
    }

    /// Concatenates along the frame axis.
    pub fn concat_frames(parts: &[LatentTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Dimension {
            op: "concat_frames",
            detail: "no parts".into(),
        })?;
        if parts
            .iter()
            .any(|p| p.channels != first.channels || p.latent_dim != first.latent_dim)
        {
            return Err(Error::Dimension {
                op: "concat_frames",
                detail: "parts differ in channel or latent dimension".into(),
            });
        }
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let rows = first.channels * first.latent_dim;
        let mut data = Vec::with_capacity(rows * frames);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.frames..(r + 1) * p.frames]);
            }
        }
        Self::new(first.channels, first.latent_dim, frames, first.frame_rate, data)
    }
}

/// Swappable waveform <-> latent mapping.
pub trait LatentCodec {
    fn config(&self) -> &CodecConfig;
    fn encode(&self, audio: &MultichannelAudio) -> Result<LatentTensor>;
    fn decode(&self, z: &LatentTensor) -> Result<MultichannelAudio>;
}

/// Truncated orthonormal DCT-II frame codec.
#[derive(Clone, Debug)]
pub struct DctCodec {
    cfg: CodecConfig,
    /// `[D, hop]`, row j is the j-th orthonormal DCT-II basis vector.
    basis: Vec<f64>,
}

/// Orthonormal DCT-II basis vector `j` of length `n`, sample `k`.
pub fn dct_basis(j: usize, k: usize, n: usize) -> f64 {
    let s = if j == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    };
    s * (PI * (k as f64 + 0.5) * j as f64 / n as f64).cos()
}

impl DctCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let hop = cfg.hop();
        let mut basis = Vec::with_capacity(cfg.latent_dim * hop);
        for j in 0..cfg.latent_dim {
            for k in 0..hop {
                basis.push(dct_basis(j, k, hop));
            }
        }
        Ok(DctCodec { cfg, basis })
    }
}

impl LatentCodec for DctCodec {
    fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    fn encode(&self, audio: &MultichannelAudio) -> Result<LatentTensor> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                found: audio.sample_rate,
            });
        }
        let hop = self.cfg.hop();
        let d = self.cfg.latent_dim;
        let frames = self.cfg.frames_for(audio.num_samples());
        if frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "audio of {} samples is shorter than one {hop}-sample frame",
                audio.num_samples()
            )));
        }
        let c = audio.num_channels();
        let mut out = LatentTensor::zeros(c, d, frames, self.cfg.frame_rate);
        for ch in 0..c {
            let x = audio.channel(ch);
            for t in 0..frames {
                let frame = &x[t * hop..(t + 1) * hop];
                for j in 0..d {
                    let b = &self.basis[j * hop..(j + 1) * hop];
                    let v: f64 = frame.iter().zip(b).map(|(a, b)| a * b).sum();
                    out.set(ch, j, t, v);
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, z: &LatentTensor) -> Result<MultichannelAudio> {
        if z.latent_dim != self.cfg.latent_dim || z.frame_rate != self.cfg.frame_rate {
            return Err(Error::Shape {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![z.channels, self.cfg.latent_dim, z.frames],
            });
        }
        let hop = self.cfg.hop();
        let mut samples = vec![vec![0.0; z.frames * hop]; z.channels];
        for (ch, out) in samples.iter_mut().enumerate() {
            for t in 0..z.frames {
                let frame = &mut out[t * hop..(t + 1) * hop];
                for j in 0..z.latent_dim {
                    let coef = z.get(ch, j, t);
                    if coef == 0.0 {
                        continue;
                    }
                    let b = &self.basis[j * hop..(j + 1) * hop];
                    for (o, bk) in frame.iter_mut().zip(b) {
                        *o += coef * bk;
                    }
                }
            }
        }
        MultichannelAudio::new(
            self.cfg.sample_rate,
            samples,
            ChannelLayout::for_channel_count(z.channels),
        )
    }
}

/// Per-(channel, coefficient) mean and population variance over time.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub channels: usize,
    pub latent_dim: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-10;

impl LatentStats {
    pub fn of(z: &LatentTensor) -> Self {
        Self::over(std::slice::from_ref(z)).expect("one latent is never empty")
    }

    /// Pooled statistics over the time axis of several latents.
    pub fn over(latents: &[LatentTensor]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| Error::Dataset("no latents".into()))?;
        let rows = first.channels * first.latent_dim;
        if latents
            .iter()
            .any(|z| z.channels * z.latent_dim != rows || z.latent_dim != first.latent_dim)
        {
            return Err(Error::Dimension {
                op: "latent_stats",
                detail: "latents differ in shape".into(),
            });
        }
        let count: usize = latents.iter().map(|z| z.frames).sum();
        let mut mean = vec![0.0; rows];
        for z in latents {
            for (r, row) in z.data.chunks(z.frames).enumerate() {
                mean[r] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; rows];
        for z in latents {
            for (r, row) in z.data.chunks(z.frames).enumerate() {
                var[r] += row.iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        Ok(LatentStats {
            channels: first.channels,
            latent_dim: first.latent_dim,
            mean,
            var,
        })
    }

    fn check(&self, z: &LatentTensor) -> Result<()> {
        if z.channels != self.channels || z.latent_dim != self.latent_dim {
            return Err(Error::Shape {
                op: "standardize",
                lhs: z.shape().to_vec(),
                rhs: vec![self.channels, self.latent_dim],
            });
        }
        Ok(())
    }

    fn std(&self, r: usize) -> f64 {
        let s = self.var[r].sqrt();
        if s > STD_FLOOR {
            s
        } else {
            1.0
        }
    }

    pub fn standardize(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check(z)?;
        let mut out = z.clone();
        for (r, row) in out.data.chunks_mut(z.frames).enumerate() {
            let s = self.std(r);
            row.iter_mut().for_each(|v| *v = (*v - self.mean[r]) / s);
        }
        Ok(out)
    }

    pub fn destandardize(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check(z)?;
        let mut out = z.clone();
        for (r, row) in out.data.chunks_mut(z.frames).enumerate() {
            let s = self.std(r);
            row.iter_mut().for_each(|v| *v = *v * s + self.mean[r]);
        }
        Ok(out)
    }
}

const IFLT_MAGIC: &[u8; 4] = b"IFLT";
const IFLT_VERSION: u32 = 1;
const IFLT_HEADER: usize = 24;

pub fn encode_latent(z: &LatentTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(IFLT_HEADER + 4 * z.data.len());
    out.extend_from_slice(IFLT_MAGIC);
    for w in [
        IFLT_VERSION,
        z.channels as u32,
        z.latent_dim as u32,
        z.frames as u32,
        z.frame_rate,
    ] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in &z.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentTensor> {
    if bytes.len() < IFLT_HEADER || &bytes[0..4] != IFLT_MAGIC {
        return Err(Error::MalformedHeader("not an IFLT latent file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != IFLT_VERSION {
        return Err(Error::Version {
            found: word(0),
            expected: IFLT_VERSION,
        });
    }
    let (c, d, t, rate) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    let n = c * d * t;
    if bytes.len() != IFLT_HEADER + 4 * n {
        return Err(Error::Truncated(format!(
            "latent [{c}, {d}, {t}] needs {} payload bytes, found {}",
            4 * n,
            bytes.len() - IFLT_HEADER
        )));
    }
    let data = bytes[IFLT_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    LatentTensor::new(c, d, t, rate, data)
}

pub fn write_latent(z: &LatentTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_latent(z)).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let path = path.as_ref();
    decode_latent(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
