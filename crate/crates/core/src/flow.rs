//! Conditional flow matching on the linear path `z_t = (1 - t) z0 + t z1`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::codec::LatentTensor;
use crate::error::{Error, Result};
use crate::net::VelocityField;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor};

/// One training example on the probability path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub t: f64,
    pub z0: LatentTensor,
    pub z1: LatentTensor,
    pub z_cond: LatentTensor,
    pub z_t: LatentTensor,
    pub u: LatentTensor,
}

/// Builds the path point and target velocity for given noise and time.
pub fn path_at(z0: LatentTensor, z1: &LatentTensor, z_cond: &LatentTensor, t: f64) -> Result<FlowBatch> {
    if z0.shape() != z1.shape() {
        return Err(Error::Shape {
            op: "path_at",
            lhs: z0.shape().to_vec(),
            rhs: z1.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let zt: Vec<f64> = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let u: Vec<f64> = z0.data().iter().zip(z1.data()).map(|(a, b)| b - a).collect();
    Ok(FlowBatch {
        t,
        z_t: z1.with_data(zt)?,
        u: z1.with_data(u)?,
        z0,
        z1: z1.clone(),
        z_cond: z_cond.clone(),
    })
}

pub fn standard_normal_like(like: &LatentTensor, rng: &mut impl Rng) -> LatentTensor {
    let data = (0..like.data().len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    like.with_data(data).expect("same size")
}

/// Draws `t ~ U[0, 1)` and `z0 ~ N(0, I)`.
pub fn sample_path(z1: &LatentTensor, z_cond: &LatentTensor, rng: &mut impl Rng) -> Result<FlowBatch> {
    let t: f64 = rng.gen();
    let z0 = standard_normal_like(z1, rng);
    path_at(z0, z1, z_cond, t)
}

/// Squared error of the net's velocity against `u`, with parameter
/// gradients in parameter order.
pub fn item_loss_and_grads(net: &VelocityField, item: &FlowBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let (x, c) = net.token_inputs(&mut tape, &item.z_t, item.t, &item.z_cond)?;
    let v = net.forward_tokens(&mut tape, &params, x, item.t, c)?;
    let u = Tensor::matrix(item.u.frames, net.config().target_features(), item.u.to_tokens())?;
    let u = tape.constant(u);
    let loss = tape.mse_loss(v, u)?;
    let mut grads = tape.backward(loss)?;
    let g = params
        .iter()
        .map(|p| grads.take(*p).expect("every parameter is trainable"))
        .collect();
    Ok((tape.value(loss).item(), g))
}

/// Mean squared velocity error over all elements and items.
pub fn flow_loss(net: &VelocityField, batch: &[FlowBatch]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for item in batch {
        let v = net.forward(&item.z_t, item.t, &item.z_cond)?;
        let se: f64 = v
            .data()
            .iter()
            .zip(item.u.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / v.data().len() as f64;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Exponential moving average of the weights; off by default.
    pub ema_decay: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            log_every: 50,
            checkpoint_every: 500,
            ema_decay: None,
        }
    }

    pub fn full() -> Self {
        TrainConfig {
            steps: 200_000,
            batch_size: 16,
            lr: 1e-4,
            log_every: 100,
            checkpoint_every: 5_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Mutable training state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub adam: AdamState,
    pub ema: Option<Vec<Tensor>>,
}

impl TrainState {
    pub fn new(net: &VelocityField, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            adam: AdamState::new(net.params().iter().map(|(_, t)| t)),
            ema: cfg
                .ema_decay
                .map(|_| net.params().iter().map(|(_, t)| t.clone()).collect()),
        }
    }
}

/// Snapshot handed to the training callback after each step.
pub struct Progress<'a> {
    pub step: u64,
    pub loss: f64,
    pub net: &'a VelocityField,
    pub state: &'a TrainState,
}

/// Independent stream per `(seed, step, item)` so results do not depend on
/// scheduling.
pub fn item_rng(seed: u64, step: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 20) | item as u64);
    rng
}

/// A training pair: stereo condition latent and 7.1.4 target latent.
pub type TrainPair = (LatentTensor, LatentTensor);

/// Runs optimizer steps `state.step + 1 ..= cfg.steps`, returning the
/// `(step, loss)` history of this call.
pub fn train(
    dataset: &[TrainPair],
    net: &mut VelocityField,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_step: impl FnMut(&Progress) -> Result<()>,
) -> Result<Vec<(u64, f64)>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::new();
    while state.step < cfg.steps {
        let step = state.step + 1;
        let snapshot: &VelocityField = net;
        let results: Vec<Result<(f64, Vec<Tensor>)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| {
                let mut rng = item_rng(cfg.seed, step, i);
                let (cond, z1) = &dataset[rng.gen_range(0..dataset.len())];
                let item = sample_path(z1, cond, &mut rng)?;
                item_loss_and_grads(snapshot, &item)
            })
            .collect();

        let inv = 1.0 / cfg.batch_size as f64;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                Error::NonFinite(detail) => Error::NonFiniteLoss { step, detail },
                other => other,
            })?;
            loss += l * inv;
            match &mut grads {
                None => {
                    let mut g = g;
                    g.iter_mut()
                        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
                    grads = Some(g);
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y * inv;
                        }
                    }
                }
            }
        }
        let grads = grads.expect("batch_size >= 1");
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss {loss}, gradients finite: {}", grads.iter().all(|g| g.is_finite())),
            });
        }
        adam_step(net.params_mut(), &grads, &mut state.adam, &adam_cfg)?;
        if let (Some(decay), Some(ema)) = (cfg.ema_decay, state.ema.as_mut()) {
            for (e, (_, p)) in ema.iter_mut().zip(net.params()) {
                for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = decay * *a + (1.0 - decay) * b;
                }
            }
        }
        state.step = step;
        history.push((step, loss));
        on_step(&Progress {
            step,
            loss,
            net,
            state,
        })?;
    }
    Ok(history)
}

/// Centered moving average with the given half-width.
pub fn smoothed(values: &[f64], half_width: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Appends `step<TAB>loss` lines.
pub fn append_loss_log(path: impl AsRef<Path>, records: &[(u64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for (s, l) in records {
        text.push_str(&format!("{s}\t{l:e}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("bad loss record {l:?}")))?;
            let s = s.parse().map_err(|_| Error::Dataset(format!("bad step in {l:?}")))?;
            let v = v.parse().map_err(|_| Error::Dataset(format!("bad loss in {l:?}")))?;
            Ok((s, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn tiny() -> NetConfig {
        NetConfig {
            num_blocks: 1,
            hidden_dim: 8,
            num_heads: 2,
            latent_dim: 2,
            target_channels: 2,
            cond_channels: 1,
            time_embed_dim: 4,
            ff_mult: 2,
            max_tokens: 4,
            use_film: true,
            use_cross_attn: true,
        }
    }

    fn latent(c: usize, seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standard_normal_like(&LatentTensor::zeros(c, 2, 3, 25), &mut rng)
    }

    #[test]
    fn endpoints_are_exact() {
        let z1 = latent(2, 1);
        let z0 = latent(2, 2);
        let c = latent(1, 3);
        assert_eq!(path_at(z0.clone(), &z1, &c, 0.0).unwrap().z_t, z0);
        assert_eq!(path_at(z0.clone(), &z1, &c, 1.0).unwrap().z_t, z1);
    }

    #[test]
    fn zero_net_loss_is_mean_square_of_u() {
        let net = VelocityField::init(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<FlowBatch> = (0..3)
            .map(|i| sample_path(&latent(2, i), &latent(1, 10 + i), &mut rng).unwrap())
            .collect();
        let direct: f64 = batch
            .iter()
            .map(|b| b.u.data().iter().map(|v| v * v).sum::<f64>() / b.u.data().len() as f64)
            .sum::<f64>()
            / 3.0;
        assert!((flow_loss(&net, &batch).unwrap() - direct).abs() < 1e-12);
        let (l, g) = item_loss_and_grads(&net, &batch[0]).unwrap();
        assert!(l >= 0.0);
        assert_eq!(g.len(), net.params().len());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let net0 = VelocityField::init(tiny(), 1).unwrap();
        let mut net = net0.clone();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 0.0,
            ..TrainConfig::desk()
        };
        let mut st = TrainState::new(&net, &cfg);
        let data = vec![(latent(1, 5), latent(2, 6))];
        let h = train(&data, &mut net, &cfg, &mut st, |_| Ok(())).unwrap();
        assert_eq!(net, net0);
        assert_eq!(h.len(), 3);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 3,
            lr: 1e-2,
            ..TrainConfig::desk()
        };
        let data = vec![(latent(1, 5), latent(2, 6)), (latent(1, 7), latent(2, 8))];
        let mut a = VelocityField::init(tiny(), 2).unwrap();
        let mut sa = TrainState::new(&a, &cfg);
        let ha = train(&data, &mut a, &cfg, &mut sa, |_| Ok(())).unwrap();

        let mut b = VelocityField::init(tiny(), 2).unwrap();
        let mut sb = TrainState::new(&b, &cfg);
        let half = TrainConfig { steps: 3, ..cfg };
        let mut hb = train(&data, &mut b, &half, &mut sb, |_| Ok(())).unwrap();
        hb.extend(train(&data, &mut b, &cfg, &mut sb, |_| Ok(())).unwrap());
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn ema_tracks_parameters() {
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            lr: 1e-2,
            ema_decay: Some(0.5),
            ..TrainConfig::desk()
        };
        let mut net = VelocityField::init(tiny(), 0).unwrap();
        let mut st = TrainState::new(&net, &cfg);
        let data = vec![(latent(1, 1), latent(2, 2))];
        train(&data, &mut net, &cfg, &mut st, |_| Ok(())).unwrap();
        let ema = st.ema.unwrap();
        assert_eq!(ema.len(), net.params().len());
        assert_ne!(ema[0].data(), net.params()[0].1.data());
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.tsv");
        append_loss_log(&p, &[(1, 0.5), (2, 0.25)]).unwrap();
        append_loss_log(&p, &[(3, 0.125)]).unwrap();
        assert_eq!(read_loss_log(&p).unwrap(), vec![(1, 0.5), (2, 0.25), (3, 0.125)]);
    }

    #[test]
    fn smoothing_preserves_constants() {
        assert_eq!(smoothed(&[2.0; 5], 2), vec![2.0; 5]);
    }
}
