//! Binaural rendering of 7.1.4 audio through a set of measured (or
//! synthesized) head-related impulse responses.
//!
//! Each non-LFE channel gets an effective HRIR pair built by VBAP-weighting
//! the three measurement directions nearest to the speaker position. The LFE
//! channel is added to both ears at -6 dB without filtering.

use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{ChannelLayout, MultichannelAudio};
use crate::error::{Error, Result};
use crate::vbap::{self, unit_vector, vbap_gains, Vec3, VbapGains};

/// Linear gain of the LFE feed into each ear.
pub fn lfe_gain() -> f64 {
    10f64.powf(-6.0 / 20.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrirSet {
    pub sample_rate: u32,
    /// `(azimuth, elevation)` in degrees.
    angles: Vec<(f64, f64)>,
    directions: Vec<Vec3>,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

impl HrirSet {
    pub fn new(
        sample_rate: u32,
        angles: Vec<(f64, f64)>,
        left: Vec<Vec<f64>>,
        right: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if angles.len() != left.len() || angles.len() != right.len() {
            return Err(Error::InvalidArgument(
                "direction and impulse response counts differ".into(),
            ));
        }
        let ir_len = left.first().map_or(0, Vec::len);
        if ir_len == 0 || left.iter().chain(&right).any(|ir| ir.len() != ir_len) {
            return Err(Error::InvalidArgument(
                "impulse responses must be non-empty and of equal length".into(),
            ));
        }
        let directions: Vec<Vec3> = angles.iter().map(|(a, e)| unit_vector(*a, *e)).collect();
        if !spans_space(&directions) {
            return Err(Error::InvalidArgument(
                "need at least four non-coplanar directions".into(),
            ));
        }
        Ok(HrirSet {
            sample_rate,
            angles,
            directions,
            left,
            right,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn ir_len(&self) -> usize {
        self.left[0].len()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn angles(&self) -> &[(f64, f64)] {
        &self.angles
    }

    pub fn left_ir(&self, i: usize) -> &[f64] {
        &self.left[i]
    }

    pub fn right_ir(&self, i: usize) -> &[f64] {
        &self.right[i]
    }

    /// The set reflected about the median plane.
    pub fn mirrored(&self) -> Self {
        let angles = self.angles.iter().map(|(a, e)| (-a, *e)).collect();
        HrirSet::new(self.sample_rate, angles, self.right.clone(), self.left.clone())
            .expect("mirroring preserves validity")
    }

    /// Gain-weighted sum of the HRIRs selected by `gains`.
    pub fn mix(&self, gains: &VbapGains) -> (Vec<f64>, Vec<f64>) {
        let n = self.ir_len();
        let (mut l, mut r) = (vec![0.0; n], vec![0.0; n]);
        let mut seen = Vec::with_capacity(3);
        for (&i, &g) in gains.indices.iter().zip(&gains.gains) {
            if g == 0.0 || seen.contains(&i) {
                continue;
            }
            seen.push(i);
            for k in 0..n {
                l[k] += g * self.left[i][k];
                r[k] += g * self.right[i][k];
            }
        }
        (l, r)
    }

    /// Physically plausible stand-in for a measured set: a coarse
    /// azimuth/elevation grid where each ear gets a delayed impulse following
    /// the spherical-head interaural delay, and the far ear an additional
    /// one-pole head-shadow low-pass.
    pub fn synthetic(sample_rate: u32) -> Self {
        const IR_LEN: usize = 64;
        const HEAD_RADIUS: f64 = 0.0875;
        const SPEED_OF_SOUND: f64 = 343.0;
        const BASE_DELAY: f64 = 2.0;

        let mut angles = Vec::new();
        for el in [-30.0, 0.0, 30.0, 60.0] {
            for k in 0..12 {
                let az = if k <= 6 { 30.0 * k as f64 } else { 30.0 * k as f64 - 360.0 };
                angles.push((az, el));
            }
        }
        angles.push((0.0, 90.0));

        let delayed = |delay: f64| {
            let mut ir = vec![0.0; IR_LEN];
            let whole = delay.floor();
            let frac = delay - whole;
            let i = whole as usize;
            ir[i] = 1.0 - frac;
            if frac > 0.0 {
                ir[i + 1] = frac;
            }
            ir
        };
        let shadow = |ir: Vec<f64>, alpha: f64| {
            let mut y = vec![0.0; ir.len()];
            let mut prev = 0.0;
            for (o, x) in y.iter_mut().zip(ir) {
                prev = (1.0 - alpha) * x + alpha * prev;
                *o = prev;
            }
            y
        };

        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &(az, el) in &angles {
            let v = unit_vector(az, el);
            let lateral = if v[1].abs() < 1e-12 { 0.0 } else { v[1].clamp(-1.0, 1.0) };
            let theta = lateral.abs().asin();
            let itd = HEAD_RADIUS / SPEED_OF_SOUND * (theta + theta.sin());
            let itd_samples = itd * sample_rate as f64;
            let near = delayed(BASE_DELAY);
            let far = shadow(delayed(BASE_DELAY + itd_samples), 0.6 * lateral.abs());
            if lateral >= 0.0 {
                left.push(near);
                right.push(far);
            } else {
                left.push(far);
                right.push(near);
            }
        }
        HrirSet::new(sample_rate, angles, left, right).expect("synthetic grid is valid")
    }
}

fn spans_space(dirs: &[Vec3]) -> bool {
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            for k in j + 1..dirs.len() {
                if vbap::dot(dirs[i], vbap::cross(dirs[j], dirs[k])).abs() > 1e-6 {
                    return dirs.len() >= 4;
                }
            }
        }
    }
    false
}

const IFIR_MAGIC: &[u8; 4] = b"IFIR";
const IFIR_VERSION: u32 = 1;

pub fn encode_hrir_set(set: &HrirSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(IFIR_MAGIC);
    out.extend_from_slice(&IFIR_VERSION.to_le_bytes());
    out.extend_from_slice(&set.sample_rate.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.ir_len() as u32).to_le_bytes());
    for i in 0..set.len() {
        let (az, el) = set.angles[i];
        out.extend_from_slice(&az.to_le_bytes());
        out.extend_from_slice(&el.to_le_bytes());
        for v in set.left[i].iter().chain(&set.right[i]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_hrir_set(bytes: &[u8]) -> Result<HrirSet> {
    if bytes.len() < 20 || &bytes[0..4] != IFIR_MAGIC {
        return Err(Error::MalformedHeader("not an IFIR file".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != IFIR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: IFIR_VERSION,
        });
    }
    let rate = word(8);
    let count = word(12) as usize;
    let ir_len = word(16) as usize;
    let per_dir = 16 + 16 * ir_len;
    if bytes.len() != 20 + count * per_dir {
        return Err(Error::Truncated(format!(
            "expected {} bytes of HRIR data, found {}",
            count * per_dir,
            bytes.len() - 20
        )));
    }
    let f = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (mut angles, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..count {
        let base = 20 + d * per_dir;
        angles.push((f(base), f(base + 8)));
        let taps: Vec<f64> = (0..2 * ir_len).map(|k| f(base + 16 + 8 * k)).collect();
        left.push(taps[..ir_len].to_vec());
        right.push(taps[ir_len..].to_vec());
    }
    HrirSet::new(rate, angles, left, right)
}

pub fn read_hrir_set(path: impl AsRef<Path>) -> Result<HrirSet> {
    let path = path.as_ref();
    decode_hrir_set(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_hrir_set(set: &HrirSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_hrir_set(set)).map_err(|e| Error::io(path, e))
}

pub fn convolve_direct(signal: &[f64], ir: &[f64]) -> Vec<f64> {
    if signal.is_empty() || ir.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; signal.len() + ir.len() - 1];
    for (i, &x) in signal.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, h) in out[i..i + ir.len()].iter_mut().zip(ir) {
            *o += x * h;
        }
    }
    out
}

pub fn convolve_fft(signal: &[f64], ir: &[f64]) -> Vec<f64> {
    if signal.is_empty() || ir.is_empty() {
        return Vec::new();
    }
    let out_len = signal.len() + ir.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(signal);
    let mut b = pad(ir);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    a.truncate(out_len);
    a.into_iter().map(|c| c.re / n as f64).collect()
}

/// Full linear convolution; picks the FFT path for long inputs.
pub fn convolve(signal: &[f64], ir: &[f64]) -> Vec<f64> {
    if signal.len().min(ir.len()) <= 32 || signal.len() * ir.len() <= 1 << 16 {
        convolve_direct(signal, ir)
    } else {
        convolve_fft(signal, ir)
    }
}

/// Renders a 7.1.4 signal to two ears. Output length is input length plus
/// IR length minus one.
pub fn binauralize(
    audio: &MultichannelAudio,
    set: &HrirSet,
    layout: &ChannelLayout,
) -> Result<MultichannelAudio> {
    if audio.sample_rate != set.sample_rate {
        return Err(Error::RateMismatch {
            expected: set.sample_rate,
            found: audio.sample_rate,
        });
    }
    if layout.len() != audio.num_channels() {
        return Err(Error::Layout(format!(
            "layout has {} channels, audio has {}",
            layout.len(),
            audio.num_channels()
        )));
    }
    let out_len = audio.num_samples() + set.ir_len() - 1;
    let mut ears = vec![vec![0.0; out_len]; 2];
    if audio.num_samples() == 0 {
        ears.iter_mut().for_each(|e| e.clear());
        return MultichannelAudio::new(audio.sample_rate, ears, ChannelLayout::stereo());
    }

    let rendered: Vec<Result<Option<(Vec<f64>, Vec<f64>)>>> = {
        use rayon::prelude::*;
        layout
            .speakers()
            .par_iter()
            .zip(audio.channels().par_iter())
            .map(|(spk, x)| {
                if spk.is_lfe {
                    return Ok(None);
                }
                if !spk.azimuth.is_finite() || !spk.elevation.is_finite() {
                    return Err(Error::Layout(format!("channel {} has no direction", spk.name)));
                }
                let gains = vbap_gains(unit_vector(spk.azimuth, spk.elevation), set.directions())?;
                let (hl, hr) = set.mix(&gains);
                Ok(Some((convolve(x, &hl), convolve(x, &hr))))
            })
            .collect()
    };

    let g_lfe = lfe_gain();
    for ((spk, x), r) in layout.speakers().iter().zip(audio.channels()).zip(rendered) {
        match r? {
            Some((l, rr)) => {
                for (e, v) in ears[0].iter_mut().zip(l) {
                    *e += v;
                }
                for (e, v) in ears[1].iter_mut().zip(rr) {
                    *e += v;
                }
            }
            None => {
                debug_assert!(spk.is_lfe);
                for ear in ears.iter_mut() {
                    for (e, v) in ear.iter_mut().zip(x) {
                        *e += g_lfe * v;
                    }
                }
            }
        }
    }
    MultichannelAudio::new(audio.sample_rate, ears, ChannelLayout::stereo())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convolve_hand_cases() {
        assert_eq!(convolve_direct(&[1., 1.], &[1., 1.]), vec![1., 2., 1.]);
        let x = [0.3, -1.0, 2.5];
        assert_eq!(convolve_direct(&x, &[1.0]), x.to_vec());
        let f = convolve_fft(&[1., 1.], &[1., 1.]);
        for (a, b) in f.iter().zip([1., 2., 1.]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lfe_gain_is_minus_six_db() {
        assert!((lfe_gain() - 0.501_187_233_627_272_3).abs() < 1e-15);
    }

    #[test]
    fn synthetic_set_is_mirror_symmetric() {
        let set = HrirSet::synthetic(48_000);
        let m = set.mirrored();
        for (i, (az, el)) in set.angles().iter().enumerate() {
            let j = m
                .angles()
                .iter()
                .position(|(a2, e2)| a2 == az && e2 == el)
                .or_else(|| m.angles().iter().position(|(a2, e2)| (a2 - az).abs() == 360.0 && e2 == el))
                .expect("grid is closed under mirroring");
            assert_eq!(set.left_ir(i), m.left_ir(j));
            assert_eq!(set.right_ir(i), m.right_ir(j));
        }
    }

    #[test]
    fn ifir_round_trip_and_errors() {
        let set = HrirSet::synthetic(48_000);
        let bytes = encode_hrir_set(&set);
        assert_eq!(decode_hrir_set(&bytes).unwrap(), set);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_hrir_set(&bad), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            decode_hrir_set(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn rejects_coplanar_sets() {
        let angles = vec![(0.0, 0.0), (90.0, 0.0), (180.0, 0.0), (-90.0, 0.0)];
        let ir = vec![vec![1.0]; 4];
        assert!(HrirSet::new(48_000, angles, ir.clone(), ir).is_err());
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let set = HrirSet::synthetic(48_000);
        let a = MultichannelAudio::silence(44_100, 10, ChannelLayout::surround_714());
        assert!(matches!(
            binauralize(&a, &set, &ChannelLayout::surround_714()),
            Err(Error::RateMismatch { .. })
        ));
    }
}
