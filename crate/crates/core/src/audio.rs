//! Multichannel PCM buffers, the 7.1.4 layout, RIFF/WAVE I/O, clip
//! segmentation and the fixed 12-to-2 downmix.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub name: String,
    pub azimuth: f64,
    pub elevation: f64,
    pub is_lfe: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelLayout {
    channels: Vec<Speaker>,
}

/// Names of the 7.1.4 channels in storage order.
pub const NAMES_714: [&str; 12] = [
    "L", "R", "C", "LFE", "Lss", "Rss", "Lrs", "Rrs", "Ltf", "Rtf", "Ltb", "Rtb",
];

// [azimuth, elevation] in degrees, positive azimuth to the left.
const ANGLES_714: [(f64, f64); 12] = [
    (30.0, 0.0),
    (-30.0, 0.0),
    (0.0, 0.0),
    (0.0, -30.0),
    (90.0, 0.0),
    (-90.0, 0.0),
    (135.0, 0.0),
    (-135.0, 0.0),
    (45.0, 45.0),
    (-45.0, 45.0),
    (135.0, 45.0),
    (-135.0, 45.0),
];

impl ChannelLayout {
    pub fn surround_714() -> Self {
        let channels = NAMES_714
            .iter()
            .zip(ANGLES_714)
            .map(|(name, (az, el))| Speaker {
                name: (*name).to_string(),
                azimuth: az,
                elevation: el,
                is_lfe: *name == "LFE",
            })
            .collect();
        ChannelLayout { channels }
    }

    pub fn stereo() -> Self {
        let channels = [("L", 30.0), ("R", -30.0)]
            .iter()
            .map(|(name, az)| Speaker {
                name: (*name).to_string(),
                azimuth: *az,
                elevation: 0.0,
                is_lfe: false,
            })
            .collect();
        ChannelLayout { channels }
    }

    /// Layout for files whose channel count is neither 2 nor 12.
    pub fn generic(n: usize) -> Self {
        let channels = (0..n)
            .map(|i| Speaker {
                name: format!("ch{i}"),
                azimuth: 0.0,
                elevation: 0.0,
                is_lfe: false,
            })
            .collect();
        ChannelLayout { channels }
    }

    pub fn for_channel_count(n: usize) -> Self {
        match n {
            2 => Self::stereo(),
            12 => Self::surround_714(),
            _ => Self::generic(n),
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn speakers(&self) -> &[Speaker] {
        &self.channels
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|s| s.name == name)
    }

    pub fn is_714(&self) -> bool {
        *self == Self::surround_714()
    }

    pub fn is_stereo(&self) -> bool {
        *self == Self::stereo()
    }

    /// Index of the left/right counterpart (identity for centre channels).
    pub fn mirror_index(&self, i: usize) -> usize {
        let name = &self.channels[i].name;
        let swapped = if let Some(rest) = name.strip_prefix('L').filter(|r| !r.is_empty() && *r != "FE") {
            format!("R{rest}")
        } else if let Some(rest) = name.strip_prefix('R').filter(|r| !r.is_empty()) {
            format!("L{rest}")
        } else if name == "L" {
            "R".into()
        } else if name == "R" {
            "L".into()
        } else {
            name.clone()
        };
        self.index_of(&swapped).unwrap_or(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio {
    pub sample_rate: u32,
    samples: Vec<Vec<f64>>,
    layout: ChannelLayout,
}

impl MultichannelAudio {
    pub fn new(sample_rate: u32, samples: Vec<Vec<f64>>, layout: ChannelLayout) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} sample rows for a {}-channel layout",
                samples.len(),
                layout.len()
            )));
        }
        let len = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidArgument("channels differ in length".into()));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(MultichannelAudio {
            sample_rate,
            samples,
            layout,
        })
    }

    pub fn silence(sample_rate: u32, num_samples: usize, layout: ChannelLayout) -> Self {
        MultichannelAudio {
            sample_rate,
            samples: vec![vec![0.0; num_samples]; layout.len()],
            layout,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.samples[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.samples[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.samples
    }

    /// Copy of samples `[start, start + len)` on every channel.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        MultichannelAudio {
            sample_rate: self.sample_rate,
            samples: self
                .samples
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Truncates or zero-pads every channel to `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut out = self.clone();
        for c in out.samples.iter_mut() {
            c.resize(len, 0.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Pcm24,
    Float32,
}

impl BitDepth {
    fn bits(self) -> u16 {
        match self {
            BitDepth::Pcm16 => 16,
            BitDepth::Pcm24 => 24,
            BitDepth::Float32 => 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct WriteReport {
    pub clipped: usize,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelAudio> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<MultichannelAudio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedHeader("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(Error::MalformedHeader("short fmt chunk".into()));
                }
                let mut tag = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if tag == 0xFFFE {
                    if size < 40 {
                        return Err(Error::MalformedHeader("short extensible fmt chunk".into()));
                    }
                    tag = u16_at(bytes, body + 24);
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                if fmt.is_none() {
                    return Err(Error::MalformedHeader("data chunk before fmt chunk".into()));
                }
                if body + size > bytes.len() {
                    return Err(Error::Truncated(format!(
                        "data chunk declares {size} bytes, {} present",
                        bytes.len().saturating_sub(body)
                    )));
                }
                data = Some(&bytes[body..body + size]);
                break;
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::MalformedHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Truncated("no data chunk".into()))?;
    if channels == 0 || rate == 0 {
        return Err(Error::MalformedHeader("zero channels or sample rate".into()));
    }
    let depth = match (tag, bits) {
        (1, 16) => BitDepth::Pcm16,
        (1, 24) => BitDepth::Pcm24,
        (3, 32) => BitDepth::Float32,
        _ => {
            return Err(Error::UnsupportedCodec(format!(
                "format tag {tag} with {bits} bits"
            )))
        }
    };
    let nch = channels as usize;
    let width = bits as usize / 8;
    let frame = width * nch;
    if data.len() % frame != 0 {
        return Err(Error::Truncated(format!(
            "data length {} is not a multiple of the {frame}-byte frame",
            data.len()
        )));
    }
    let frames = data.len() / frame;
    let mut samples = vec![Vec::with_capacity(frames); nch];
    for f in data.chunks_exact(frame) {
        for (c, s) in f.chunks_exact(width).enumerate() {
            let v = match depth {
                BitDepth::Pcm16 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                BitDepth::Pcm24 => {
                    let raw = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                    raw as f64 / 8_388_608.0
                }
                BitDepth::Float32 => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            };
            samples[c].push(v);
        }
    }
    MultichannelAudio::new(rate, samples, ChannelLayout::for_channel_count(nch))
}

/// Writes a canonical 44-byte-header WAVE file. Samples outside [-1, 1] are
/// hard-clipped and counted.
pub fn write_wav(
    audio: &MultichannelAudio,
    path: impl AsRef<Path>,
    depth: BitDepth,
) -> Result<WriteReport> {
    let path = path.as_ref();
    let (bytes, report) = encode_wav(audio, depth);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

pub fn encode_wav(audio: &MultichannelAudio, depth: BitDepth) -> (Vec<u8>, WriteReport) {
    let nch = audio.num_channels() as u16;
    let bits = depth.bits();
    let block = nch as u32 * bits as u32 / 8;
    let data_len = block * audio.num_samples() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    let tag: u16 = if depth == BitDepth::Float32 { 3 } else { 1 };
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&nch.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * block).to_le_bytes());
    out.extend_from_slice(&(block as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());

    let mut report = WriteReport::default();
    for i in 0..audio.num_samples() {
        for c in audio.channels() {
            let mut v = c[i];
            if v > 1.0 || v < -1.0 {
                report.clipped += 1;
                v = v.clamp(-1.0, 1.0);
            }
            match depth {
                BitDepth::Pcm16 => {
                    let q = (v * 32767.0).round() as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                BitDepth::Pcm24 => {
                    let q = (v * 8_388_607.0).round() as i32;
                    out.extend_from_slice(&q.to_le_bytes()[..3]);
                }
                BitDepth::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    (out, report)
}

/// Consecutive non-overlapping clips of `clip_seconds`; the remainder is dropped.
pub fn segment(audio: &MultichannelAudio, clip_seconds: f64) -> Result<Vec<MultichannelAudio>> {
    if !(clip_seconds > 0.0) {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    let clip = (clip_seconds * audio.sample_rate as f64).round() as usize;
    if clip == 0 {
        return Err(Error::InvalidArgument("clip shorter than one sample".into()));
    }
    Ok((0..audio.num_samples() / clip)
        .map(|k| audio.slice(k * clip, clip))
        .collect())
}

/// Fixed 12-to-2 fold-down gains, rows L and R over the 7.1.4 channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct DownmixMatrix {
    pub version: u32,
    pub coefficients: [[f64; 12]; 2],
}

/// -3 dB, applied to the centre and to every surround and height channel.
pub const MINUS_3DB: f64 = 0.7071;

impl DownmixMatrix {
    /// Unit gain on the front pair, -3 dB on centre, surrounds and heights,
    /// LFE omitted.
    pub fn unnormalized() -> Self {
        let mut l = [0.0; 12];
        l[0] = 1.0;
        l[2] = MINUS_3DB;
        for idx in [4, 6, 8, 10] {
            l[idx] = MINUS_3DB;
        }
        let layout = ChannelLayout::surround_714();
        let mut r = [0.0; 12];
        for (i, g) in l.iter().enumerate() {
            r[layout.mirror_index(i)] = *g;
        }
        DownmixMatrix {
            version: 1,
            coefficients: [l, r],
        }
    }

    /// Default dataset matrix: [`Self::unnormalized`] scaled by
    /// `1 / (1 + 4 * 0.7071)` to keep folded sums in range.
    pub fn ac3_default() -> Self {
        let mut m = Self::unnormalized();
        let s = 1.0 / (1.0 + 4.0 * MINUS_3DB);
        for row in m.coefficients.iter_mut() {
            for g in row.iter_mut() {
                *g *= s;
            }
        }
        m
    }
}

impl Default for DownmixMatrix {
    fn default() -> Self {
        Self::ac3_default()
    }
}

pub fn downmix(audio: &MultichannelAudio, matrix: &DownmixMatrix) -> Result<MultichannelAudio> {
    if audio.num_channels() != 12 {
        return Err(Error::Layout(format!(
            "downmix needs 12 channels, got {}",
            audio.num_channels()
        )));
    }
    let n = audio.num_samples();
    let mut out = vec![vec![0.0; n]; 2];
    for (row, dst) in matrix.coefficients.iter().zip(out.iter_mut()) {
        for (g, src) in row.iter().zip(audio.channels()) {
            if *g == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    MultichannelAudio::new(audio.sample_rate, out, ChannelLayout::stereo())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_714(seed: u64, n: usize) -> MultichannelAudio {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..12)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        MultichannelAudio::new(48_000, samples, ChannelLayout::surround_714()).unwrap()
    }

    #[test]
    fn layout_714_order_and_geometry() {
        let l = ChannelLayout::surround_714();
        let names: Vec<_> = l.speakers().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, NAMES_714);
        assert_eq!(l.speakers().iter().filter(|s| s.is_lfe).count(), 1);
        for (i, name) in NAMES_714.iter().enumerate() {
            assert_eq!(l.index_of(name), Some(i));
        }
        for s in l.speakers() {
            assert!(s.azimuth > -180.0 && s.azimuth <= 180.0);
            assert!((-90.0..=90.0).contains(&s.elevation));
        }
        for i in 0..12 {
            let j = l.mirror_index(i);
            let (a, b) = (&l.speakers()[i], &l.speakers()[j]);
            assert_eq!(a.azimuth, -b.azimuth);
            assert_eq!(a.elevation, b.elevation);
            assert_eq!(l.mirror_index(j), i);
        }
        assert_eq!(l.index_of("Ltf"), Some(8));
    }

    #[test]
    fn silence_writes_header_plus_data() {
        let a = MultichannelAudio::silence(48_000, 480, ChannelLayout::stereo());
        let (bytes, rep) = encode_wav(&a, BitDepth::Pcm16);
        assert_eq!(bytes.len(), 44 + 480 * 2 * 2);
        assert_eq!(rep.clipped, 0);
    }

    #[test]
    fn pcm16_read_back_shape() {
        let a = MultichannelAudio::silence(48_000, 480, ChannelLayout::stereo());
        let (bytes, _) = encode_wav(&a, BitDepth::Pcm16);
        let b = parse_wav(&bytes).unwrap();
        assert_eq!(b.num_channels(), 2);
        assert_eq!(b.num_samples(), 480);
        assert_eq!(b.sample_rate, 48_000);
    }

    #[test]
    fn pcm24_round_trip_within_quantization() {
        let a = random_714(1, 100);
        let (bytes, _) = encode_wav(&a, BitDepth::Pcm24);
        let b = parse_wav(&bytes).unwrap();
        for (x, y) in a.channels().iter().flatten().zip(b.channels().iter().flatten()) {
            assert!((x - y).abs() < 2.0 / 8_388_608.0);
        }
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..64).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect())
            .collect();
        let a = MultichannelAudio::new(48_000, samples, ChannelLayout::surround_714()).unwrap();
        let (bytes, _) = encode_wav(&a, BitDepth::Float32);
        let b = parse_wav(&bytes).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_is_counted() {
        let a = MultichannelAudio::new(48_000, vec![vec![1.5, 0.2]], ChannelLayout::generic(1))
            .unwrap();
        let (bytes, rep) = encode_wav(&a, BitDepth::Float32);
        assert_eq!(rep.clipped, 1);
        let b = parse_wav(&bytes).unwrap();
        assert_eq!(b.channel(0)[0], 1.0);
    }

    #[test]
    fn wav_error_kinds_are_distinct() {
        let a = MultichannelAudio::silence(48_000, 10, ChannelLayout::stereo());
        let (mut bytes, _) = encode_wav(&a, BitDepth::Pcm16);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_wav(&bad_magic), Err(Error::MalformedHeader(_))));

        let mut bad_codec = bytes.clone();
        bad_codec[20] = 2; // ADPCM
        assert!(matches!(parse_wav(&bad_codec), Err(Error::UnsupportedCodec(_))));

        bytes.truncate(bytes.len() - 7);
        assert!(matches!(parse_wav(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn segment_drops_remainder() {
        let a = MultichannelAudio::silence(48_000, 25 * 48_000, ChannelLayout::stereo());
        let clips = segment(&a, 10.0).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.num_samples() == 480_000));

        let short = MultichannelAudio::silence(48_000, 9 * 48_000, ChannelLayout::stereo());
        assert!(segment(&short, 10.0).unwrap().is_empty());
        assert!(segment(&short, 0.0).is_err());
    }

    #[test]
    fn segment_tiles_prefix() {
        let a = random_714(3, 2 * 4800 + 17);
        let clips = segment(&a, 0.1).unwrap();
        assert_eq!(clips.len(), 2);
        for c in 0..12 {
            let joined: Vec<f64> = clips.iter().flat_map(|k| k.channel(c).to_vec()).collect();
            assert_eq!(joined, a.channel(c)[..9600]);
        }
    }

    #[test]
    fn center_impulse_follows_declared_matrix() {
        let mut a = MultichannelAudio::silence(48_000, 4, ChannelLayout::surround_714());
        a.channel_mut(2)[0] = 1.0;
        let raw = downmix(&a, &DownmixMatrix::unnormalized()).unwrap();
        assert_eq!(raw.channel(0)[0], 0.7071);
        assert_eq!(raw.channel(1)[0], 0.7071);

        let m = DownmixMatrix::ac3_default();
        let expected = 0.7071 / (1.0 + 4.0 * 0.7071);
        let out = downmix(&a, &m).unwrap();
        assert!((out.channel(0)[0] - expected).abs() < 1e-15);
        assert!((out.channel(1)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn downmix_rejects_stereo() {
        let a = MultichannelAudio::silence(48_000, 4, ChannelLayout::stereo());
        assert!(matches!(
            downmix(&a, &DownmixMatrix::default()),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn lfe_does_not_reach_the_fold_down() {
        let m = DownmixMatrix::ac3_default();
        assert_eq!(m.coefficients[0][3], 0.0);
        assert_eq!(m.coefficients[1][3], 0.0);
        // L row carries nothing from right-side channels.
        for name in ["R", "Rss", "Rrs", "Rtf", "Rtb"] {
            let i = ChannelLayout::surround_714().index_of(name).unwrap();
            assert_eq!(m.coefficients[0][i], 0.0);
        }
    }
}
