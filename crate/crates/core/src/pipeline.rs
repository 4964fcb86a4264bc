//! Dataset preparation, training, inference, rendering and evaluation as
//! file-to-file commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{
    downmix, read_wav, segment, write_wav, BitDepth, ChannelLayout, DownmixMatrix,
    MultichannelAudio,
};
use crate::codec::{read_latent, write_latent, CodecConfig, DctCodec, LatentCodec, LatentStats, LatentTensor};
use crate::error::{Error, Result};
use crate::flow::{append_loss_log, read_loss_log, standard_normal_like, train, TrainConfig, TrainPair, TrainState};
use crate::metrics::{channel_report, ChannelReport};
use crate::net::{load_checkpoint, save_checkpoint, Checkpoint, NetConfig, VelocityField};
use crate::ode::{integrate_latent, Method, SolveConfig};
use crate::scene::{random_scene, synth_scene, RandomSceneOptions, SceneSpec};
use crate::spatial::{binauralize, read_hrir_set, HrirSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

/// Fully resolved pipeline settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub codec: CodecConfig,
    pub clip_seconds: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub solver: SolveConfig,
    pub paths: Paths,
    pub downmix: DownmixMatrix,
    /// Adds the left/right mirror image of every training pair.
    pub mirror_augment: bool,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (codec, clip_seconds, net, train) = match profile {
            Profile::Desk => (CodecConfig::desk(), 2.0, NetConfig::desk(), TrainConfig::desk()),
            Profile::Full => (CodecConfig::full(), 10.0, NetConfig::full(), TrainConfig::full()),
        };
        PipelineConfig {
            profile,
            seed: 0,
            codec,
            clip_seconds,
            net,
            train,
            solver: SolveConfig::default(),
            paths: Paths {
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                output: "out".into(),
            },
            downmix: DownmixMatrix::default(),
            mirror_augment: profile == Profile::Desk,
        }
    }

    pub fn desk() -> Self {
        Self::for_profile(Profile::Desk)
    }

    pub fn full() -> Self {
        Self::for_profile(Profile::Full)
    }

    /// Latent frames per training clip.
    pub fn clip_frames(&self) -> usize {
        (self.clip_seconds * self.codec.frame_rate as f64).round() as usize
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        if self.net.latent_dim != self.codec.latent_dim {
            return Err(Error::Config("net and codec latent dimensions differ".into()));
        }
        if self.net.target_channels != 12 || self.net.cond_channels != 2 {
            return Err(Error::Config("the pipeline maps 2 channels to 12".into()));
        }
        let frames = self.clip_frames();
        if frames == 0 || (frames as f64 - self.clip_seconds * self.codec.frame_rate as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "clip_seconds {} is not a whole number of {} Hz frames",
                self.clip_seconds, self.codec.frame_rate
            )));
        }
        if frames > self.net.max_tokens {
            return Err(Error::Config(format!(
                "{frames} frames per clip exceed max_tokens {}",
                self.net.max_tokens
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines grouped under `[section]` headers. The
    /// top-level `profile` key selects the defaults that the remaining
    /// keys override. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            entries.push((key, v.trim().to_string(), n + 1));
        }
        let profile = match entries.iter().find(|(k, _, _)| k == "profile") {
            None => Profile::Desk,
            Some((_, v, _)) => match v.as_str() {
                "desk" => Profile::Desk,
                "full" => Profile::Full,
                other => return Err(Error::Config(format!("unknown profile {other:?}"))),
            },
        };
        let mut cfg = Self::for_profile(profile);
        for (key, value, line) in &entries {
            cfg.set(key, value, base)
                .map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))?;
        }
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoints, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.net.latent_dim = cfg.codec.latent_dim;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid number {v:?}"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("invalid boolean {v:?}")),
            }
        }
        let path = |v: &str| base.join(v);
        match key {
            "profile" => {}
            "seed" => {
                self.seed = num(v)?;
                self.train.seed = self.seed;
            }
            "codec.frame_rate" => self.codec.frame_rate = num(v)?,
            "codec.latent_dim" => self.codec.latent_dim = num(v)?,
            "codec.sample_rate" => self.codec.sample_rate = num(v)?,
            "codec.clip_seconds" => self.clip_seconds = num(v)?,
            "net.num_blocks" => self.net.num_blocks = num(v)?,
            "net.hidden_dim" => self.net.hidden_dim = num(v)?,
            "net.num_heads" => self.net.num_heads = num(v)?,
            "net.time_embed_dim" => self.net.time_embed_dim = num(v)?,
            "net.ff_mult" => self.net.ff_mult = num(v)?,
            "net.max_tokens" => self.net.max_tokens = num(v)?,
            "net.use_film" => self.net.use_film = flag(v)?,
            "net.use_cross_attn" => self.net.use_cross_attn = flag(v)?,
            "train.steps" => self.train.steps = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.lr" => self.train.lr = num(v)?,
            "train.log_every" => self.train.log_every = num(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(v)?,
            "train.mirror_augment" => self.mirror_augment = flag(v)?,
            "train.ema_decay" => {
                self.train.ema_decay = if v == "none" { None } else { Some(num(v)?) }
            }
            "solver.method" => self.solver.method = v.parse().map_err(|e: Error| e.to_string())?,
            "solver.steps" => self.solver.steps = num(v)?,
            "solver.rtol" => self.solver.rtol = num(v)?,
            "solver.atol" => self.solver.atol = num(v)?,
            "solver.max_steps" => self.solver.max_steps = num(v)?,
            "solver.initial_dt" => self.solver.initial_dt = num(v)?,
            "paths.dataset" => self.paths.dataset = path(v),
            "paths.checkpoints" => self.paths.checkpoints = path(v),
            "paths.output" => self.paths.output = path(v),
            "downmix.matrix" => {
                self.downmix = match v {
                    "ac3" => DownmixMatrix::ac3_default(),
                    "unnormalized" => DownmixMatrix::unnormalized(),
                    other => return Err(format!("unknown downmix matrix {other:?}")),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every setting, in a form [`PipelineConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "profile = {}", self.profile.name());
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "\n[codec]");
        let _ = writeln!(w, "frame_rate = {}", self.codec.frame_rate);
        let _ = writeln!(w, "latent_dim = {}", self.codec.latent_dim);
        let _ = writeln!(w, "sample_rate = {}", self.codec.sample_rate);
        let _ = writeln!(w, "clip_seconds = {}", self.clip_seconds);
        let n = &self.net;
        let _ = writeln!(w, "\n[net]");
        let _ = writeln!(w, "num_blocks = {}", n.num_blocks);
        let _ = writeln!(w, "hidden_dim = {}", n.hidden_dim);
        let _ = writeln!(w, "num_heads = {}", n.num_heads);
        let _ = writeln!(w, "time_embed_dim = {}", n.time_embed_dim);
        let _ = writeln!(w, "ff_mult = {}", n.ff_mult);
        let _ = writeln!(w, "max_tokens = {}", n.max_tokens);
        let _ = writeln!(w, "use_film = {}", n.use_film);
        let _ = writeln!(w, "use_cross_attn = {}", n.use_cross_attn);
        let t = &self.train;
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "steps = {}", t.steps);
        let _ = writeln!(w, "batch_size = {}", t.batch_size);
        let _ = writeln!(w, "lr = {:e}", t.lr);
        let _ = writeln!(w, "log_every = {}", t.log_every);
        let _ = writeln!(w, "checkpoint_every = {}", t.checkpoint_every);
        match t.ema_decay {
            Some(d) => writeln!(w, "ema_decay = {d}"),
            None => writeln!(w, "ema_decay = none"),
        }
        .expect("string write");
        let _ = writeln!(w, "mirror_augment = {}", self.mirror_augment);
        let o = &self.solver;
        let _ = writeln!(w, "\n[solver]");
        let _ = writeln!(w, "method = {}", o.method.name());
        let _ = writeln!(w, "steps = {}", o.steps);
        let _ = writeln!(w, "rtol = {:e}", o.rtol);
        let _ = writeln!(w, "atol = {:e}", o.atol);
        let _ = writeln!(w, "max_steps = {}", o.max_steps);
        let _ = writeln!(w, "initial_dt = {:e}", o.initial_dt);
        let _ = writeln!(w, "\n[paths]");
        let _ = writeln!(w, "dataset = {}", self.paths.dataset.display());
        let _ = writeln!(w, "checkpoints = {}", self.paths.checkpoints.display());
        let _ = writeln!(w, "output = {}", self.paths.output.display());
        let _ = writeln!(w, "\n[downmix]");
        let m = if self.downmix == DownmixMatrix::unnormalized() {
            "unnormalized"
        } else {
            "ac3"
        };
        let _ = writeln!(w, "matrix = {m}");
        s
    }

    pub fn codec(&self) -> Result<DctCodec> {
        DctCodec::new(self.codec)
    }
}

pub const RESOLVED_CONFIG: &str = "resolved_config.cfg";

/// Writes the resolved config into `dir`.
pub fn write_resolved_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))
}

fn sidecar_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".cfg");
    file.with_file_name(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Deterministic 90/10 assignment from the SHA-256 of the clip id.
    pub fn of(id: &str) -> Self {
        let h = Sha256::digest(id.as_bytes());
        let v = u64::from_le_bytes(h[..8].try_into().unwrap());
        if v % 10 == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub path_714: PathBuf,
    pub path_stereo: PathBuf,
    pub path_latent_714: PathBuf,
    pub path_latent_stereo: PathBuf,
    pub duration: f64,
    /// SHA-256 over the four referenced files, in column order.
    pub checksum: String,
}

impl ManifestEntry {
    fn files(&self) -> [&PathBuf; 4] {
        [
            &self.path_714,
            &self.path_stereo,
            &self.path_latent_714,
            &self.path_latent_stereo,
        ]
    }
}

fn checksum(root: &Path, files: &[&PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let p = root.join(f);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub const MANIFEST_HEADER: &str =
    "id\tsplit\tpath_714\tpath_stereo\tpath_latent_714\tpath_latent_stereo\tduration\tchecksum";

/// Line-oriented TSV index of prepared clips. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}",
                e.id,
                e.split.name(),
                e.path_714.display(),
                e.path_stereo.display(),
                e.path_latent_714.display(),
                e.path_latent_stereo.display(),
                e.duration,
                e.checksum
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Reads and verifies a manifest: every file must exist, checksums
    /// must match and the stereo and 7.1.4 durations must agree.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Dataset(format!("{}: missing manifest header", path.display())));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Dataset(format!("manifest line {}: expected 8 fields", n + 2)));
            }
            let split = match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Dataset(format!("unknown split {other:?}"))),
            };
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split,
                path_714: f[2].into(),
                path_stereo: f[3].into(),
                path_latent_714: f[4].into(),
                path_latent_stereo: f[5].into(),
                duration: f[6]
                    .parse()
                    .map_err(|_| Error::Dataset(format!("bad duration {:?}", f[6])))?,
                checksum: f[7].to_string(),
            });
        }
        let m = DatasetManifest { root, entries };
        m.verify()?;
        Ok(m)
    }

    pub fn verify(&self) -> Result<()> {
        self.entries.par_iter().try_for_each(|e| {
            let sum = checksum(&self.root, &e.files())?;
            if sum != e.checksum {
                return Err(Error::Dataset(format!("checksum mismatch for clip {}", e.id)));
            }
            let a = read_wav(self.root.join(&e.path_714))?;
            let s = read_wav(self.root.join(&e.path_stereo))?;
            if a.num_samples() != s.num_samples()
                || (a.duration_seconds() - e.duration).abs() > 1e-6
            {
                return Err(Error::Dataset(format!(
                    "clip {}: stereo and 7.1.4 durations disagree",
                    e.id
                )));
            }
            Ok(())
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_latents(&self, split: Split) -> Result<Vec<TrainPair>> {
        self.split(split)
            .map(|e| {
                Ok((
                    read_latent(self.root.join(&e.path_latent_stereo))?,
                    read_latent(self.root.join(&e.path_latent_714))?,
                ))
            })
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

fn quantize_f32(audio: &MultichannelAudio) -> Result<MultichannelAudio> {
    let samples = audio
        .channels()
        .iter()
        .map(|c| c.iter().map(|v| *v as f32 as f64).collect())
        .collect();
    MultichannelAudio::new(audio.sample_rate, samples, audio.layout().clone())
}

fn load_source(path: &Path) -> Result<MultichannelAudio> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("scene") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            synth_scene(&SceneSpec::parse(&text)?)
        }
        _ => read_wav(path),
    }
}

/// Segments every `.wav` (7.1.4) and `.scene` file in `input`, derives the
/// stereo downmix, caches both latents and writes the manifest into `out`.
pub fn cmd_prepare(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<DatasetManifest> {
    let mut sources: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("wav" | "scene")))
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no .wav or .scene inputs",
            input.display()
        )));
    }
    for sub in ["clips", "latents"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let codec = cfg.codec()?;

    let per_source = sources
        .par_iter()
        .map(|src| -> Result<Vec<ManifestEntry>> {
            let audio = load_source(src)?;
            if audio.sample_rate != cfg.codec.sample_rate {
                return Err(Error::RateMismatch {
                    expected: cfg.codec.sample_rate,
                    found: audio.sample_rate,
                });
            }
            if !audio.layout().is_714() {
                return Err(Error::Layout(format!(
                    "{}: expected 12 channels, found {}",
                    src.display(),
                    audio.num_channels()
                )));
            }
            let stem = src.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let mut entries = Vec::new();
            for (k, clip) in segment(&audio, cfg.clip_seconds)?.into_iter().enumerate() {
                let id = format!("{stem}_{k:03}");
                let clip = quantize_f32(&clip)?;
                let stereo = quantize_f32(&downmix(&clip, &cfg.downmix)?)?;
                let e = ManifestEntry {
                    split: Split::of(&id),
                    path_714: format!("clips/{id}_714.wav").into(),
                    path_stereo: format!("clips/{id}_stereo.wav").into(),
                    path_latent_714: format!("latents/{id}_714.iflt").into(),
                    path_latent_stereo: format!("latents/{id}_stereo.iflt").into(),
                    duration: clip.duration_seconds(),
                    checksum: String::new(),
                    id,
                };
                write_wav(&clip, out.join(&e.path_714), BitDepth::Float32)?;
                write_wav(&stereo, out.join(&e.path_stereo), BitDepth::Float32)?;
                write_latent(&codec.encode(&clip)?, out.join(&e.path_latent_714))?;
                write_latent(&codec.encode(&stereo)?, out.join(&e.path_latent_stereo))?;
                let checksum = checksum(out, &e.files())?;
                entries.push(ManifestEntry { checksum, ..e });
            }
            Ok(entries)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries: Vec<ManifestEntry> = per_source.into_iter().flatten().collect();
    if entries.is_empty() {
        return Err(Error::Dataset("inputs are shorter than one clip".into()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    write_resolved_config(cfg, out)?;
    Ok(manifest)
}

/// Writes `count` seeded random scene files named `scene_NNN.scene`.
pub fn write_random_scenes(dir: &Path, count: usize, seed: u64, opts: RandomSceneOptions) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("scene_{i:03}.scene"));
            let spec = random_scene(seed.wrapping_add(i as u64), opts);
            fs::write(&p, spec.to_text()).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

fn mirror_order(layout: &ChannelLayout) -> Vec<usize> {
    (0..layout.len()).map(|i| layout.mirror_index(i)).collect()
}

/// Swaps left and right in both latents. The downmix is mirror symmetric,
/// so the result is again a valid pair.
pub fn mirror_pair(pair: &TrainPair) -> Result<TrainPair> {
    Ok((
        pair.0.permute_channels(&mirror_order(&ChannelLayout::stereo()))?,
        pair.1.permute_channels(&mirror_order(&ChannelLayout::surround_714()))?,
    ))
}

const STAT_NAMES: [&str; 4] = [
    "stats.target.mean",
    "stats.target.var",
    "stats.cond.mean",
    "stats.cond.var",
];

fn stats_extras(target: &LatentStats, cond: &LatentStats) -> Vec<(String, Tensor)> {
    [&target.mean, &target.var, &cond.mean, &cond.var]
        .iter()
        .zip(STAT_NAMES)
        .map(|(v, n)| (n.to_string(), Tensor::vector((*v).clone())))
        .collect()
}

/// Latent normalization statistics stored in a checkpoint.
pub fn checkpoint_stats(ck: &Checkpoint) -> Result<(LatentStats, LatentStats)> {
    let get = |n: &str| {
        ck.extra(n)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {n}")))
    };
    let c = ck.net.config();
    Ok((
        LatentStats {
            channels: c.target_channels,
            latent_dim: c.latent_dim,
            mean: get(STAT_NAMES[0])?,
            var: get(STAT_NAMES[1])?,
        },
        LatentStats {
            channels: c.cond_channels,
            latent_dim: c.latent_dim,
            mean: get(STAT_NAMES[2])?,
            var: get(STAT_NAMES[3])?,
        },
    ))
}

fn ema_extras(net: &VelocityField, state: &TrainState) -> Vec<(String, Tensor)> {
    match &state.ema {
        Some(ema) => net
            .params()
            .iter()
            .zip(ema)
            .map(|((n, _), t)| (format!("ema/{n}"), t.clone()))
            .collect(),
        None => Vec::new(),
    }
}

pub const LATEST: &str = "latest.ifck";
pub const FINAL: &str = "final.ifck";
pub const LOSS_LOG: &str = "loss.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    /// Full loss history including steps from earlier runs.
    pub history: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
}

/// Trains on the manifest's train split, resuming from `latest.ifck` in
/// `ckpt_dir` when present.
pub fn cmd_train(cfg: &PipelineConfig, manifest_path: &Path, ckpt_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut raw = manifest.load_latents(Split::Train)?;
    if raw.is_empty() {
        return Err(Error::Dataset("manifest has no training clips".into()));
    }
    if cfg.mirror_augment {
        let mirrored = raw.iter().map(mirror_pair).collect::<Result<Vec<_>>>()?;
        raw.extend(mirrored);
    }
    fs::create_dir_all(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;
    write_resolved_config(cfg, ckpt_dir)?;

    let conds: Vec<LatentTensor> = raw.iter().map(|p| p.0.clone()).collect();
    let targets: Vec<LatentTensor> = raw.iter().map(|p| p.1.clone()).collect();
    let cond_stats = LatentStats::over(&conds)?;
    let target_stats = LatentStats::over(&targets)?;
    let data: Vec<TrainPair> = raw
        .iter()
        .map(|(c, z)| Ok((cond_stats.standardize(c)?, target_stats.standardize(z)?)))
        .collect::<Result<_>>()?;
    if let Some((c, _)) = data.iter().find(|(c, _)| c.frames > cfg.net.max_tokens) {
        return Err(Error::Config(format!(
            "clip of {} frames exceeds max_tokens {}",
            c.frames, cfg.net.max_tokens
        )));
    }

    let latest = ckpt_dir.join(LATEST);
    let log_path = ckpt_dir.join(LOSS_LOG);
    let (mut net, mut state, mut history) = if latest.exists() {
        let ck = load_checkpoint(&latest)?;
        if ck.net.config() != &cfg.net {
            return Err(Error::Incompatible(format!(
                "checkpoint {} was trained with a different network config",
                latest.display()
            )));
        }
        let mut state = TrainState::new(&ck.net, &cfg.train);
        state.step = ck.step;
        state.adam = ck
            .adam
            .clone()
            .ok_or_else(|| Error::Incompatible("checkpoint lacks optimizer state".into()))?;
        if let Some(ema) = state.ema.as_mut() {
            for ((n, _), e) in ck.net.params().iter().zip(ema.iter_mut()) {
                if let Some(t) = ck.extra(&format!("ema/{n}")) {
                    *e = t.clone();
                }
            }
        }
        let history: Vec<(u64, f64)> = if log_path.exists() {
            read_loss_log(&log_path)?
                .into_iter()
                .filter(|(s, _)| *s <= ck.step)
                .collect()
        } else {
            Vec::new()
        };
        (ck.net, state, history)
    } else {
        let net = VelocityField::init(cfg.net, cfg.seed)?;
        let state = TrainState::new(&net, &cfg.train);
        (net, state, Vec::new())
    };
    // Rewrite the log so it ends exactly at the resumed step.
    let _ = fs::remove_file(&log_path);
    append_loss_log(&log_path, &history)?;

    let start_step = state.step;
    let extras = stats_extras(&target_stats, &cond_stats);
    let save = |net: &VelocityField, state: &TrainState, path: &Path| -> Result<()> {
        let mut ex = extras.clone();
        ex.extend(ema_extras(net, state));
        save_checkpoint(
            &Checkpoint {
                net: net.clone(),
                step: state.step,
                adam: Some(state.adam.clone()),
                extras: ex,
            },
            path,
        )
    };
    let every = cfg.train.checkpoint_every;
    let new = train(&data, &mut net, &cfg.train, &mut state, |p| {
        append_loss_log(&log_path, &[(p.step, p.loss)])?;
        if every > 0 && p.step % every == 0 {
            save(p.net, p.state, &ckpt_dir.join(format!("step_{:08}.ifck", p.step)))?;
            save(p.net, p.state, &latest)?;
        }
        Ok(())
    })?;
    history.extend(new);
    save(&net, &state, &latest)?;
    let final_path = ckpt_dir.join(FINAL);
    save(&net, &state, &final_path)?;
    Ok(TrainSummary {
        start_step,
        final_step: state.step,
        history,
        final_checkpoint: final_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferSummary {
    pub frames: usize,
    pub chunks: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Net used for inference: the EMA weights when the checkpoint has them.
fn inference_net(ck: &Checkpoint) -> Result<VelocityField> {
    let params = ck.net.params();
    if params.iter().all(|(n, _)| ck.extra(&format!("ema/{n}")).is_some()) {
        let named = params
            .iter()
            .map(|(n, _)| (n.clone(), ck.extra(&format!("ema/{n}")).unwrap().clone()))
            .collect();
        VelocityField::from_named(*ck.net.config(), named)
    } else {
        Ok(ck.net.clone())
    }
}

/// Generates 7.1.4 audio for a stereo signal. Frames are processed in
/// chunks of one training clip; chunk `k` draws its initial noise from
/// stream `k` of the seeded generator.
pub fn infer_audio(
    cfg: &PipelineConfig,
    ck: &Checkpoint,
    stereo: &MultichannelAudio,
    seed: u64,
) -> Result<(MultichannelAudio, InferSummary)> {
    if ck.net.config() != &cfg.net {
        return Err(Error::Incompatible(
            "checkpoint network config differs from the pipeline config".into(),
        ));
    }
    if stereo.sample_rate != cfg.codec.sample_rate {
        return Err(Error::RateMismatch {
            expected: cfg.codec.sample_rate,
            found: stereo.sample_rate,
        });
    }
    if stereo.num_channels() != 2 {
        return Err(Error::Layout(format!(
            "inference input must be stereo, found {} channels",
            stereo.num_channels()
        )));
    }
    let codec = cfg.codec()?;
    let net = inference_net(ck)?;
    let (target_stats, cond_stats) = checkpoint_stats(ck)?;
    let cond = cond_stats.standardize(&codec.encode(stereo)?)?;
    let frames = cond.frames;
    let chunk = cfg.clip_frames().min(cfg.net.max_tokens);
    let starts: Vec<usize> = (0..frames).step_by(chunk).collect();
    let outs = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let len = chunk.min(frames - s);
            let c = cond.frame_window(s, len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let tpl = LatentTensor::zeros(12, cfg.codec.latent_dim, len, cfg.codec.frame_rate);
            let z0 = standard_normal_like(&tpl, &mut rng);
            integrate_latent(&z0, &net, &c, &cfg.solver)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary = InferSummary {
        frames,
        chunks: outs.len(),
        accepted: 0,
        rejected: 0,
        evaluations: 0,
    };
    for (_, r) in &outs {
        summary.accepted += r.accepted;
        summary.rejected += r.rejected;
        summary.evaluations += r.evaluations;
    }
    let parts: Vec<LatentTensor> = outs.into_iter().map(|(z, _)| z).collect();
    let z = target_stats.destandardize(&LatentTensor::concat_frames(&parts)?)?;
    let audio = codec.decode(&z)?;
    Ok((audio, summary))
}

pub fn cmd_infer(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    seed: u64,
) -> Result<InferSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let stereo = read_wav(input)?;
    let (audio, summary) = infer_audio(cfg, &ck, &stereo, seed)?;
    write_wav(&audio, output, BitDepth::Float32)?;
    write_sidecar(cfg, output)?;
    Ok(summary)
}

fn write_sidecar(cfg: &PipelineConfig, output: &Path) -> Result<()> {
    let p = sidecar_for(output);
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))
}

/// Renders a 7.1.4 WAV to two ears. Without an HRIR file the synthetic set
/// is used.
pub fn cmd_binauralize(cfg: &PipelineConfig, input: &Path, hrir: Option<&Path>, output: &Path) -> Result<()> {
    let audio = read_wav(input)?;
    let set = match hrir {
        Some(p) => read_hrir_set(p)?,
        None => HrirSet::synthetic(audio.sample_rate),
    };
    let out = binauralize(&audio, &set, &ChannelLayout::surround_714())?;
    write_wav(&out, output, BitDepth::Float32)?;
    write_sidecar(cfg, output)
}

pub fn cmd_eval(cfg: &PipelineConfig, reference: &Path, generated: &Path, output: &Path) -> Result<ChannelReport> {
    let r = read_wav(reference)?;
    let g = read_wav(generated)?;
    let report = channel_report(&r, &g)?;
    fs::write(output, report.to_tsv()).map_err(|e| Error::io(output, e))?;
    write_sidecar(cfg, output)?;
    Ok(report)
}

pub fn cmd_downmix(cfg: &PipelineConfig, input: &Path, output: &Path) -> Result<()> {
    let audio = read_wav(input)?;
    let out = downmix(&audio, &cfg.downmix)?;
    write_wav(&out, output, BitDepth::Float32)?;
    write_sidecar(cfg, output)
}

/// Linear RMS of every channel.
pub fn channel_rms(audio: &MultichannelAudio) -> Vec<f64> {
    audio
        .channels()
        .iter()
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len().max(1) as f64).sqrt())
        .collect()
}

/// Keys accepted in a config file, for documentation and error messages.
pub fn config_keys() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("profile", "desk | full"),
        ("seed", "integer"),
        ("codec.frame_rate", "latent frames per second"),
        ("codec.latent_dim", "coefficients kept per frame"),
        ("codec.sample_rate", "Hz"),
        ("codec.clip_seconds", "training clip length"),
        ("net.num_blocks", "transformer blocks"),
        ("net.hidden_dim", "model width"),
        ("net.num_heads", "attention heads"),
        ("net.time_embed_dim", "sinusoidal features"),
        ("net.ff_mult", "feedforward expansion"),
        ("net.max_tokens", "positional table size"),
        ("net.use_film", "bool"),
        ("net.use_cross_attn", "bool"),
        ("train.steps", "optimizer steps"),
        ("train.batch_size", "items per step"),
        ("train.lr", "Adam learning rate"),
        ("train.log_every", "progress interval"),
        ("train.checkpoint_every", "checkpoint interval"),
        ("train.ema_decay", "none | decay in [0, 1)"),
        ("solver.method", "euler | rk4 | dopri45 | dopri45-fixed"),
        ("solver.steps", "fixed-step grid size"),
        ("solver.rtol", "relative tolerance"),
        ("solver.atol", "absolute tolerance"),
        ("solver.max_steps", "adaptive step budget"),
        ("solver.initial_dt", "first adaptive step"),
        ("paths.dataset", "prepared dataset directory"),
        ("paths.checkpoints", "checkpoint directory"),
        ("paths.output", "output directory"),
        ("downmix.matrix", "ac3 | unnormalized"),
    ])
}

impl Method {
    pub fn is_adaptive(self) -> bool {
        self == Method::Dopri45
    }
}
