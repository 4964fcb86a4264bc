//! Transformer velocity field `v(z_t, t, z_cond)`.
//!
//! Tokens are latent time frames; the feature of token `t` is the flattened
//! `[C, D]` slice with index `c * D + d`. Each block applies FiLM at its
//! input, then pre-norm self-attention, pre-norm cross-attention to the
//! projected condition tokens, and a pre-norm feedforward, each with a
//! residual connection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::LatentTensor;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub latent_dim: usize,
    pub target_channels: usize,
    pub cond_channels: usize,
    pub time_embed_dim: usize,
    pub ff_mult: usize,
    pub max_tokens: usize,
    pub use_film: bool,
    pub use_cross_attn: bool,
}

impl NetConfig {
    pub fn desk() -> Self {
        NetConfig {
            num_blocks: 2,
            hidden_dim: 64,
            num_heads: 4,
            latent_dim: 8,
            target_channels: 12,
            cond_channels: 2,
            time_embed_dim: 64,
            ff_mult: 4,
            max_tokens: 256,
            use_film: true,
            use_cross_attn: true,
        }
    }

    pub fn full() -> Self {
        NetConfig {
            num_blocks: 12,
            hidden_dim: 1024,
            num_heads: 16,
            latent_dim: 64,
            time_embed_dim: 256,
            max_tokens: 250,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("latent_dim", self.latent_dim),
            ("target_channels", self.target_channels),
            ("cond_channels", self.cond_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("ff_mult", self.ff_mult),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    pub fn target_features(&self) -> usize {
        self.target_channels * self.latent_dim
    }

    pub fn cond_features(&self) -> usize {
        self.cond_channels * self.latent_dim
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let fi = self.target_features();
        let fc = self.cond_features();
        let e = self.time_embed_dim;
        let m = self.ff_mult * h;
        let linear = |i: usize, o: usize| i * o + o;
        let attn = 4 * linear(h, h);
        let mut block = 2 * h + attn + 2 * h + linear(h, m) + linear(m, h);
        if self.use_film {
            block += linear(h, 2 * h);
        }
        if self.use_cross_attn {
            block += 2 * h + attn;
        }
        linear(fi, h)
            + linear(fc, h)
            + self.max_tokens * h
            + linear(e, h)
            + linear(h, h)
            + self.num_blocks * block
            + 2 * h
            + linear(h, fi)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

fn parameter_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden_dim;
    let m = cfg.ff_mult * h;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, i: usize, o: usize, init: Init| {
        out.push((format!("{name}.w"), vec![i, o], init));
        out.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        out.push((format!("{name}.g"), vec![h], Init::Ones));
        out.push((format!("{name}.b"), vec![h], Init::Zeros));
    };
    linear(&mut out, "in_proj", cfg.target_features(), h, Init::Normal);
    linear(&mut out, "cond_proj", cfg.cond_features(), h, Init::Normal);
    out.push(("pos_emb".into(), vec![cfg.max_tokens, h], Init::Normal));
    linear(&mut out, "time.fc1", cfg.time_embed_dim, h, Init::Normal);
    linear(&mut out, "time.fc2", h, h, Init::Normal);
    for b in 0..cfg.num_blocks {
        let p = format!("blocks.{b}");
        if cfg.use_film {
            linear(&mut out, &format!("{p}.film"), h, 2 * h, Init::Normal);
        }
        norm(&mut out, &format!("{p}.ln1"));
        for w in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.attn.{w}"), h, h, Init::Normal);
        }
        if cfg.use_cross_attn {
            norm(&mut out, &format!("{p}.ln2"));
            for w in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.xattn.{w}"), h, h, Init::Normal);
            }
        }
        norm(&mut out, &format!("{p}.ln3"));
        linear(&mut out, &format!("{p}.ff.fc1"), h, m, Init::Normal);
        linear(&mut out, &format!("{p}.ff.fc2"), m, h, Init::Normal);
    }
    norm(&mut out, "final_ln");
    linear(&mut out, "out_proj", h, cfg.target_features(), Init::Zeros);
    out
}

/// Sinusoidal features of `t` (scaled by 1000) at `dim / 2` geometrically
/// spaced frequencies with base 10000: `[sin..., cos...]`.
pub fn time_embed(t: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(Tensor::vector(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    config: NetConfig,
    params: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_trailing(y, b)
}

impl VelocityField {
    /// Deterministic initialization: normal weights with std 0.02, zero
    /// biases, unit norm gains, zero output projection.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                let t = Tensor::new(shape, data).expect("layout shapes are consistent");
                (name, t.with_grad())
            })
            .collect();
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: NetConfig, params: Vec<(String, Tensor)>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        VelocityField {
            config,
            params,
            index,
        }
    }

    /// Rebuilds a net from named tensors, checking them against the layout
    /// implied by `config`.
    pub fn from_named(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, shape, _), (n, t)) in layout.into_iter().zip(named) {
            if name != n || shape != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            params.push((n, t.with_grad()));
        }
        Ok(Self::from_parts(config, params))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].1)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `tape` in parameter order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.param(t)).collect()
    }

    fn check_inputs(&self, z_t: &LatentTensor, t: f64, z_cond: &LatentTensor) -> Result<()> {
        let c = &self.config;
        if z_t.channels != c.target_channels || z_t.latent_dim != c.latent_dim {
            return Err(Error::Shape {
                op: "velocity target",
                lhs: z_t.shape().to_vec(),
                rhs: vec![c.target_channels, c.latent_dim, z_t.frames],
            });
        }
        if z_cond.channels != c.cond_channels || z_cond.latent_dim != c.latent_dim {
            return Err(Error::Shape {
                op: "velocity condition",
                lhs: z_cond.shape().to_vec(),
                rhs: vec![c.cond_channels, c.latent_dim, z_cond.frames],
            });
        }
        if z_t.frames != z_cond.frames {
            return Err(Error::Shape {
                op: "velocity frames",
                lhs: z_t.shape().to_vec(),
                rhs: z_cond.shape().to_vec(),
            });
        }
        if z_t.frames > c.max_tokens {
            return Err(Error::Dimension {
                op: "velocity",
                detail: format!("{} frames exceed max_tokens {}", z_t.frames, c.max_tokens),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        if z_t.data().iter().chain(z_cond.data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity input".into()));
        }
        Ok(())
    }

    /// Token matrices `[T', 12*D]` and `[T', 2*D]` as tape constants.
    pub fn token_inputs<'a>(
        &self,
        tape: &mut Tape<'a>,
        z_t: &LatentTensor,
        t: f64,
        z_cond: &LatentTensor,
    ) -> Result<(Var, Var)> {
        self.check_inputs(z_t, t, z_cond)?;
        let frames = z_t.frames;
        let x = Tensor::matrix(frames, self.config.target_features(), z_t.to_tokens())?;
        let c = Tensor::matrix(frames, self.config.cond_features(), z_cond.to_tokens())?;
        Ok((tape.constant(x), tape.constant(c)))
    }

    /// Post-MLP time embedding `[1, hidden]`.
    fn time_features<'a>(&self, tape: &mut Tape<'a>, p: &dyn Fn(&str) -> Var, t: f64) -> Result<Var> {
        let e = time_embed(t, self.config.time_embed_dim)?;
        let e = tape.constant(e.reshape(&[1, self.config.time_embed_dim])?);
        let h = linear(tape, e, p("time.fc1.w"), p("time.fc1.b"))?;
        let h = tape.gelu(h)?;
        linear(tape, h, p("time.fc2.w"), p("time.fc2.b"))
    }

    fn attention<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &dyn Fn(&str) -> Var,
        prefix: &str,
        query: Var,
        context: Var,
    ) -> Result<Var> {
        let w = |s: &str| p(&format!("{prefix}.{s}"));
        let q = linear(tape, query, w("q.w"), w("q.b"))?;
        let k = linear(tape, context, w("k.w"), w("k.b"))?;
        let v = linear(tape, context, w("v.w"), w("v.b"))?;
        let heads = self.config.num_heads;
        let dh = self.config.hidden_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        linear(tape, o, w("o.w"), w("o.b"))
    }

    fn norm<'a>(&self, tape: &mut Tape<'a>, p: &dyn Fn(&str) -> Var, name: &str, x: Var) -> Result<Var> {
        tape.layer_norm(x, p(&format!("{name}.g")), p(&format!("{name}.b")), LN_EPS)
    }

    /// Forward pass over token matrices already on `tape`. `params` must
    /// come from [`VelocityField::bind`] on the same tape. Returns the
    /// velocity tokens `[T', 12*D]`.
    pub fn forward_tokens<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &[Var],
        x_tokens: Var,
        t: f64,
        cond_tokens: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let h = cfg.hidden_dim;
        let frames = tape.shape(x_tokens)[0];
        let p = |name: &str| params[self.index[name]];

        let pos = tape.slice_rows(p("pos_emb"), 0, frames)?;
        let x = linear(tape, x_tokens, p("in_proj.w"), p("in_proj.b"))?;
        let mut x = tape.add(x, pos)?;
        let c = linear(tape, cond_tokens, p("cond_proj.w"), p("cond_proj.b"))?;
        let pooled = tape.mean_rows(c)?;
        let pooled = tape.reshape(pooled, &[1, h])?;
        let ctx = tape.add(c, pos)?;

        let temb = self.time_features(tape, &p, t)?;
        let cvec = tape.add(temb, pooled)?;
        let cvec_flat = tape.reshape(cvec, &[h])?;
        let cact = tape.gelu(cvec)?;
        if !cfg.use_film {
            // Without FiLM the conditioning vector is added to every token.
            x = tape.add_trailing(x, cvec_flat)?;
        }

        for b in 0..cfg.num_blocks {
            let pre = format!("blocks.{b}");
            if cfg.use_film {
                let f = linear(tape, cact, p(&format!("{pre}.film.w")), p(&format!("{pre}.film.b")))?;
                let scale = tape.slice_cols(f, 0, h)?;
                let scale = tape.reshape(scale, &[h])?;
                let shift = tape.slice_cols(f, h, h)?;
                let shift = tape.reshape(shift, &[h])?;
                x = tape.film(x, scale, shift)?;
            }
            let n = self.norm(tape, &p, &format!("{pre}.ln1"), x)?;
            let a = self.attention(tape, &p, &format!("{pre}.attn"), n, n)?;
            x = tape.add(x, a)?;
            if cfg.use_cross_attn {
                let n = self.norm(tape, &p, &format!("{pre}.ln2"), x)?;
                let a = self.attention(tape, &p, &format!("{pre}.xattn"), n, ctx)?;
                x = tape.add(x, a)?;
            }
            let n = self.norm(tape, &p, &format!("{pre}.ln3"), x)?;
            let f = linear(tape, n, p(&format!("{pre}.ff.fc1.w")), p(&format!("{pre}.ff.fc1.b")))?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, p(&format!("{pre}.ff.fc2.w")), p(&format!("{pre}.ff.fc2.b")))?;
            x = tape.add(x, f)?;
        }
        let n = self.norm(tape, &p, "final_ln", x)?;
        linear(tape, n, p("out_proj.w"), p("out_proj.b"))
    }

    /// Velocity with the same shape as `z_t`.
    pub fn forward(&self, z_t: &LatentTensor, t: f64, z_cond: &LatentTensor) -> Result<LatentTensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let (x, c) = self.token_inputs(&mut tape, z_t, t, z_cond)?;
        let v = self.forward_tokens(&mut tape, &params, x, t, c)?;
        LatentTensor::from_tokens(
            z_t.channels,
            z_t.latent_dim,
            z_t.frames,
            z_t.frame_rate,
            tape.value(v).data(),
        )
    }

    /// Post-MLP time embedding for `t`.
    pub fn time_embedding(&self, t: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let p = |name: &str| params[self.index[name]];
        let v = self.time_features(&mut tape, &p, t)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: VelocityField,
    pub step: u64,
    pub adam: Option<AdamState>,
    /// Auxiliary named tensors such as latent normalization statistics.
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

const IFCK_MAGIC: &[u8; 4] = b"IFCK";
const IFCK_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const EXTRA: &str = "extra/";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for d in shape {
        put_u32(out, *d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let c = ck.net.config();
    let mut out = Vec::new();
    out.extend_from_slice(IFCK_MAGIC);
    put_u32(&mut out, IFCK_VERSION as usize);
    let flags = c.use_film as usize | (c.use_cross_attn as usize) << 1;
    for v in [
        c.num_blocks,
        c.hidden_dim,
        c.num_heads,
        c.latent_dim,
        c.target_channels,
        c.cond_channels,
        c.time_embed_dim,
        c.ff_mult,
        c.max_tokens,
        flags,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    let adam_step = ck.adam.as_ref().map_or(0, |a| a.step);
    out.extend_from_slice(&adam_step.to_le_bytes());
    out.push(ck.adam.is_some() as u8);

    let params = ck.net.params();
    let count = params.len() * if ck.adam.is_some() { 3 } else { 1 } + ck.extras.len();
    put_u32(&mut out, count);
    for (name, t) in params {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    if let Some(adam) = &ck.adam {
        for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for ((name, t), m) in params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), m);
            }
        }
    }
    for (name, t) in &ck.extras {
        put_tensor(&mut out, &format!("{EXTRA}{name}"), t.shape(), t.data());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint block ends early at byte {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != IFCK_MAGIC {
        return Err(Error::MalformedHeader("not an IFCK checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != IFCK_VERSION {
        return Err(Error::Version {
            found: version,
            expected: IFCK_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let mut f = [0usize; 10];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let config = NetConfig {
        num_blocks: f[0],
        hidden_dim: f[1],
        num_heads: f[2],
        latent_dim: f[3],
        target_channels: f[4],
        cond_channels: f[5],
        time_embed_dim: f[6],
        ff_mult: f[7],
        max_tokens: f[8],
        use_film: f[9] & 1 != 0,
        use_cross_attn: f[9] & 2 != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Incompatible(format!("checkpoint config: {e}")))?;
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let has_adam = r.take(1)?[0] != 0;
    let count = r.u32()?;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut extras = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(rest) = name.strip_prefix(EXTRA) {
            extras.push((rest.to_string(), t));
        } else if name.starts_with(ADAM_M) {
            m.push(t.into_data());
        } else if name.starts_with(ADAM_V) {
            v.push(t.into_data());
        } else {
            params.push((name, t));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after tensor block".into()));
    }
    let net = VelocityField::from_named(config, params)?;
    let adam = if has_adam {
        let n = net.params().len();
        if m.len() != n || v.len() != n {
            return Err(Error::Corrupt("optimizer moments do not match parameters".into()));
        }
        Some(AdamState { step: adam_step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        net,
        step,
        adam,
        extras,
    })
}

/// Writes via a temporary file and rename so an interrupted save never
/// leaves a partial checkpoint behind.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
