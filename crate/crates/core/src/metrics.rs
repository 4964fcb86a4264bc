//! Fréchet distance between Gaussian fits of embedding sets, a deterministic
//! signal-statistics embedding, and per-channel diagnostics.
//!
//! The learned embedders usually paired with this distance are not bundled.
//! Externally computed embeddings can be imported in the IFEM format
//! instead. Perceptual quality models are likewise not provided.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};

/// Floor for every log-energy feature, in dB.
pub const FLOOR_DB: f64 = -80.0;

fn power_db(p: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(FLOOR_DB)
    } else {
        FLOOR_DB
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time power spectra `|X_k|^2 / sum(w^2)` for `k in 0..=n_fft/2`.
/// Signals shorter than one frame are zero-padded to one frame.
pub struct Spectrogram {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Spectrogram {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Spectrogram {
            n_fft,
            hop,
            window: hann(n_fft),
            fft,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_fft;
        let count = if x.len() <= n {
            1
        } else {
            1 + (x.len() - n) / self.hop
        };
        let wsum: f64 = self.window.iter().map(|w| w * w).sum();
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        (0..count)
            .map(|f| {
                let start = f * self.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    let v = x.get(start + i).copied().unwrap_or(0.0);
                    *b = Complex::new(v * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..self.bins()].iter().map(|c| c.norm_sqr() / wsum).collect()
            })
            .collect()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to Nyquist, `[bands][bins]`.
pub fn mel_filterbank(bands: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f > lo && f < hi {
                        if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Maps one mono signal to a fixed-length feature vector.
pub trait EmbeddingProvider: Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, x: &[f64], sample_rate: u32) -> Result<Vec<f64>>;
}

/// Deterministic signal statistics, 37 features:
///
/// | index  | feature                                         |
/// |--------|-------------------------------------------------|
/// | 0..32  | mean mel-band power in dB, 32 bands              |
/// | 32     | spectral centroid / Nyquist                      |
/// | 33     | 85% rolloff frequency / Nyquist                  |
/// | 34     | spectral flatness of the mean power spectrum     |
/// | 35     | mean of per-frame energy in dB                   |
/// | 36     | variance of per-frame energy in dB               |
///
/// Every dB feature is floored at [`FLOOR_DB`]. Spectral shape features of
/// a silent signal are 0.
pub struct DspStats {
    pub n_fft: usize,
    pub hop: usize,
    pub bands: usize,
}

impl Default for DspStats {
    fn default() -> Self {
        DspStats {
            n_fft: 2048,
            hop: 1024,
            bands: 32,
        }
    }
}

impl EmbeddingProvider for DspStats {
    fn id(&self) -> &str {
        "dsp-stats-v1"
    }

    fn dim(&self) -> usize {
        self.bands + 5
    }

    fn embed(&self, x: &[f64], sample_rate: u32) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty signal".into()));
        }
        let spec = Spectrogram::new(self.n_fft, self.hop);
        let frames = spec.frames(x);
        let bins = spec.bins();
        let mut mean_power = vec![0.0; bins];
        for f in &frames {
            for (m, p) in mean_power.iter_mut().zip(f) {
                *m += p / frames.len() as f64;
            }
        }
        let fb = mel_filterbank(self.bands, self.n_fft, sample_rate);
        let mut out: Vec<f64> = fb
            .iter()
            .map(|w| power_db(w.iter().zip(&mean_power).map(|(a, b)| a * b).sum()))
            .collect();

        let total: f64 = mean_power.iter().sum();
        if total > 0.0 {
            let centroid = mean_power
                .iter()
                .enumerate()
                .map(|(k, p)| k as f64 * p)
                .sum::<f64>()
                / total
                / (bins - 1) as f64;
            let mut acc = 0.0;
            let mut rolloff = 1.0;
            for (k, p) in mean_power.iter().enumerate() {
                acc += p;
                if acc >= 0.85 * total {
                    rolloff = k as f64 / (bins - 1) as f64;
                    break;
                }
            }
            let tiny = 1e-300;
            let log_mean = mean_power.iter().map(|p| (p + tiny).ln()).sum::<f64>() / bins as f64;
            let flatness = log_mean.exp() / (total / bins as f64);
            out.extend([centroid, rolloff, flatness]);
        } else {
            out.extend([0.0, 0.0, 0.0]);
        }

        let energies: Vec<f64> = frames
            .iter()
            .map(|f| power_db(f.iter().sum::<f64>() / bins as f64))
            .collect();
        let n = energies.len() as f64;
        let mean = energies.iter().sum::<f64>() / n;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        out.extend([mean, var]);
        Ok(out)
    }
}

/// Per-frame log-mel vectors, used where a distribution of embeddings per
/// signal is needed.
pub struct LogMelFrames {
    pub n_fft: usize,
    pub hop: usize,
    pub bands: usize,
}

impl Default for LogMelFrames {
    fn default() -> Self {
        LogMelFrames {
            n_fft: 1024,
            hop: 512,
            bands: 8,
        }
    }
}

impl LogMelFrames {
    pub fn frames(&self, x: &[f64], sample_rate: u32) -> Vec<Vec<f64>> {
        let fb = mel_filterbank(self.bands, self.n_fft, sample_rate);
        Spectrogram::new(self.n_fft, self.hop)
            .frames(x)
            .iter()
            .map(|p| {
                fb.iter()
                    .map(|w| power_db(w.iter().zip(p).map(|(a, b)| a * b).sum()))
                    .collect()
            })
            .collect()
    }
}

/// Rows of embedding vectors with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub provider: String,
    pub channel: String,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

pub fn embed_all(
    signals: &[&[f64]],
    sample_rate: u32,
    provider: &dyn EmbeddingProvider,
    channel: &str,
) -> Result<EmbeddingSet> {
    let vectors = signals
        .par_iter()
        .map(|x| provider.embed(x, sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingSet {
        vectors,
        provider: provider.id().to_string(),
        channel: channel.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (`n - 1`) covariance.
pub fn fit_gaussian(vectors: &[Vec<f64>]) -> Result<GaussianStats> {
    let d = vectors.first().map_or(0, |v| v.len());
    let n = vectors.len();
    if d == 0 || n < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} samples of dimension {d}; need at least d + 1"
        )));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension {
            op: "fit_gaussian",
            detail: "embedding vectors differ in length".into(),
        });
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding vector".into()));
    }
    let mut mean = DVector::zeros(d);
    for v in vectors {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in vectors {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    Ok(GaussianStats { mean, cov })
}

const PSD_TOL: f64 = 1e-10;

/// Symmetric positive semi-definite square root by eigendecomposition of
/// the symmetrized input. Small negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::Dimension {
            op: "sqrtm",
            detail: format!("{}x{} is not square", s.nrows(), s.ncols()),
        });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -PSD_TOL * scale) {
        return Err(Error::InvalidArgument(format!(
            "matrix is not positive semi-definite (eigenvalue {bad:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`,
/// clamped to be nonnegative.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() {
        return Err(Error::Dimension {
            op: "frechet_distance",
            detail: format!("dimension {} vs {}", a.mean.len(), b.mean.len()),
        });
    }
    let ra = sqrtm_psd(&a.cov)?;
    sqrtm_psd(&b.cov)?;
    let m = &ra * &b.cov * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_between(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    frechet_distance(&fit_gaussian(&a.vectors)?, &fit_gaussian(&b.vectors)?)
}

/// RMS level in dB with the floor applied.
pub fn rms_db(x: &[f64]) -> f64 {
    if x.is_empty() {
        return FLOOR_DB;
    }
    power_db(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

fn mean_power_spectrum(x: &[f64]) -> Vec<f64> {
    let frames = Spectrogram::new(1024, 512).frames(x);
    let mut out = vec![0.0; 513];
    for f in &frames {
        for (o, p) in out.iter_mut().zip(f) {
            *o += p / frames.len() as f64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRow {
    pub channel: String,
    pub rms_ref_db: f64,
    pub rms_gen_db: f64,
    /// `|rms_gen_db - rms_ref_db|`.
    pub rms_db_error: f64,
    /// Pearson correlation of the mean power spectra.
    pub spectral_corr: f64,
    /// Fréchet distance between Gaussian fits of per-frame log-mel vectors;
    /// `None` when the clip has too few frames for a covariance.
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelReport {
    pub rows: Vec<ChannelRow>,
    /// Samples the generated signal was padded (positive) or trimmed
    /// (negative) by to match the reference.
    pub length_adjustment: i64,
}

pub const REPORT_HEADER: &str =
    "channel\trms_ref_db\trms_gen_db\trms_db_error\tspectral_corr\tfrechet";

impl ChannelReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let fd = r.frechet.map_or("NA".to_string(), |v| format!("{v:.6}"));
            writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.channel, r.rms_ref_db, r.rms_gen_db, r.rms_db_error, r.spectral_corr, fd
            )
            .expect("string write");
        }
        s
    }
}

/// Per-channel comparison in layout order. `generated` is trimmed or
/// zero-padded to the reference length.
pub fn channel_report(reference: &MultichannelAudio, generated: &MultichannelAudio) -> Result<ChannelReport> {
    if reference.layout() != generated.layout() {
        return Err(Error::Layout(format!(
            "reference has {} channels, generated has {}",
            reference.num_channels(),
            generated.num_channels()
        )));
    }
    if reference.sample_rate != generated.sample_rate {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate,
            found: generated.sample_rate,
        });
    }
    let n = reference.num_samples();
    let adjustment = n as i64 - generated.num_samples() as i64;
    let generated = generated.resized(n);
    let sr = reference.sample_rate;
    let mel = LogMelFrames::default();
    let rows = (0..reference.num_channels())
        .into_par_iter()
        .map(|c| {
            let (r, g) = (reference.channel(c), generated.channel(c));
            let (rd, gd) = (rms_db(r), rms_db(g));
            let fa = mel.frames(r, sr);
            let fb = mel.frames(g, sr);
            let frechet = match (fit_gaussian(&fa), fit_gaussian(&fb)) {
                (Ok(a), Ok(b)) => Some(frechet_distance(&a, &b)?),
                _ => None,
            };
            Ok(ChannelRow {
                channel: reference.layout().speakers()[c].name.clone(),
                rms_ref_db: rd,
                rms_gen_db: gd,
                rms_db_error: (gd - rd).abs(),
                spectral_corr: pearson(&mean_power_spectrum(r), &mean_power_spectrum(g)),
                frechet,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelReport {
        rows,
        length_adjustment: adjustment,
    })
}

const IFEM_MAGIC: &[u8; 4] = b"IFEM";

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let d = set.dim();
    let mut out = Vec::with_capacity(12 + 8 * d * set.vectors.len());
    out.extend_from_slice(IFEM_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(set.vectors.len() as u32).to_le_bytes());
    for v in set.vectors.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], provider: &str, channel: &str) -> Result<EmbeddingSet> {
    if bytes.len() < 12 || &bytes[..4] != IFEM_MAGIC {
        return Err(Error::MalformedHeader("not an IFEM embedding file".into()));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if d == 0 {
        return Err(Error::MalformedHeader("embedding dimension is zero".into()));
    }
    let need = 12 + 8 * d * n;
    if bytes.len() != need {
        return Err(Error::Truncated(format!(
            "{n} x {d} embeddings need {need} bytes, found {}",
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("imported embedding".into()));
    }
    Ok(EmbeddingSet {
        vectors: flat.chunks(d).map(|c| c.to_vec()).collect(),
        provider: provider.to_string(),
        channel: channel.to_string(),
    })
}

pub fn read_embeddings(path: impl AsRef<Path>, channel: &str) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, &format!("import:{}", path.display()), channel)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(set)).map_err(|e| Error::io(path, e))
}
