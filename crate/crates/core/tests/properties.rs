mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatialflow::audio::{
    downmix, encode_wav, parse_wav, segment, BitDepth, ChannelLayout, DownmixMatrix,
    MultichannelAudio, NAMES_714,
};
use spatialflow::codec::{CodecConfig, DctCodec, LatentCodec, LatentTensor};
use spatialflow::flow::{flow_loss, path_at, standard_normal_like};
use spatialflow::metrics::{frechet_distance, GaussianStats};
use spatialflow::net::{NetConfig, VelocityField};
use spatialflow::ode::{integrate, Method, SolveConfig};
use spatialflow::spatial::{binauralize, HrirSet};
use spatialflow::tensor::{Tape, Tensor};
use spatialflow::vbap::{unit_vector, vbap_gains};
use spatialflow::Result;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn audio(channels: usize, n: usize, seed: u64) -> MultichannelAudio {
    let mut r = rng(seed);
    let s = (0..channels)
        .map(|_| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    MultichannelAudio::new(48_000, s, ChannelLayout::for_channel_count(channels)).unwrap()
}

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.05
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..30.0) {
        let mut r = rng(seed);
        let x = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-spread..spread)).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0 && *p <= 1.0));
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..4, cols in 2usize..12, seed in any::<u64>(), offset in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| offset + r.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_is_zero_on_equal_and_symmetric(n in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::vector((0..n).map(|_| r.gen_range(-5.0..5.0)).collect());
        let b = Tensor::vector((0..n).map(|_| r.gen_range(-5.0..5.0)).collect());
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let same = tape.mse_loss(va, va).unwrap();
        let ab = tape.mse_loss(va, vb).unwrap();
        let ba = tape.mse_loss(vb, va).unwrap();
        prop_assert_eq!(tape.value(same).item(), 0.0);
        prop_assert_eq!(tape.value(ab).item(), tape.value(ba).item());
    }

    #[test]
    fn backward_is_bit_reproducible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = common::random_tensor(&[3, 4], &mut r);
        let w = common::random_tensor(&[4, 2], &mut r);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_grad());
            let wv = tape.leaf(w.clone().with_grad());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h).unwrap();
            let s = tape.softmax(h).unwrap();
            let l = tape.sum(s).unwrap();
            let l = tape.scale(l, 0.3).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn float_wav_round_trip_is_identity(channels in 1usize..13, n in 0usize..200, seed in any::<u64>()) {
        let a = audio(channels, n, seed);
        let a = MultichannelAudio::new(
            48_000,
            a.channels().iter().map(|c| c.iter().map(|v| *v as f32 as f64).collect()).collect(),
            a.layout().clone(),
        ).unwrap();
        let (bytes, report) = encode_wav(&a, BitDepth::Float32);
        prop_assert_eq!(report.clipped, 0);
        let back = parse_wav(&bytes).unwrap();
        prop_assert_eq!(back.channels(), a.channels());
    }

    #[test]
    fn segments_tile_a_prefix(samples in 0usize..5000, clip in 1usize..2000) {
        let a = MultichannelAudio::new(48_000, vec![(0..samples).map(|i| i as f64).collect()], ChannelLayout::generic(1)).unwrap();
        let clips = segment(&a, clip as f64 / 48_000.0).unwrap();
        prop_assert_eq!(clips.len(), samples / clip);
        let joined: Vec<f64> = clips.iter().flat_map(|c| c.channel(0).to_vec()).collect();
        prop_assert_eq!(&joined[..], &a.channel(0)[..clips.len() * clip]);
    }

    #[test]
    fn downmix_swaps_under_mirroring(seed in any::<u64>()) {
        let x = audio(12, 64, seed);
        let layout = ChannelLayout::surround_714();
        let m = DownmixMatrix::default();
        let mirrored = MultichannelAudio::new(
            48_000,
            (0..12).map(|i| x.channel(layout.mirror_index(i)).to_vec()).collect(),
            layout.clone(),
        ).unwrap();
        let a = downmix(&x, &m).unwrap();
        let b = downmix(&mirrored, &m).unwrap();
        prop_assert_eq!(a.channel(0), b.channel(1));
        prop_assert_eq!(a.channel(1), b.channel(0));
    }

    #[test]
    fn codec_projection_properties(frames in 1usize..4, d in 1usize..16, seed in any::<u64>()) {
        let codec = DctCodec::new(CodecConfig { latent_dim: d, ..CodecConfig::desk() }).unwrap();
        let hop = codec.config().hop();
        let x = audio(3, frames * hop + 7, seed);
        let z = codec.encode(&x).unwrap();
        let y = codec.decode(&z).unwrap();
        let z2 = codec.encode(&y).unwrap();
        let scale = z.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in z.data().iter().zip(z2.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
        for c in 0..3 {
            let ex: f64 = x.channel(c)[..frames * hop].iter().map(|v| v * v).sum();
            let ey: f64 = y.channel(c).iter().map(|v| v * v).sum();
            prop_assert!(ey <= ex * (1.0 + 1e-12));
        }
        let mut x2 = x.clone();
        x2.channel_mut(2).iter_mut().for_each(|v| *v = -*v * 3.0);
        let z3 = codec.encode(&x2).unwrap();
        for c in 0..2 {
            for dd in 0..d {
                for t in 0..frames {
                    prop_assert_eq!(z.get(c, dd, t).to_bits(), z3.get(c, dd, t).to_bits());
                }
            }
        }
    }

    #[test]
    fn net_preserves_shape(blocks in 1usize..3, heads in 1usize..4, d in 1usize..5, frames in 1usize..6, film in any::<bool>(), cross in any::<bool>(), seed in any::<u64>()) {
        let cfg = NetConfig {
            num_blocks: blocks,
            hidden_dim: 8 * heads,
            num_heads: heads,
            latent_dim: d,
            target_channels: 3,
            cond_channels: 2,
            time_embed_dim: 8,
            ff_mult: 2,
            max_tokens: 8,
            use_film: film,
            use_cross_attn: cross,
        };
        let mut net = VelocityField::init(cfg, seed).unwrap();
        common::randomize(&mut net, 0.3, seed);
        let mut r = rng(seed);
        let z = standard_normal_like(&LatentTensor::zeros(3, d, frames, 25), &mut r);
        let c = standard_normal_like(&LatentTensor::zeros(2, d, frames, 25), &mut r);
        let t = r.gen_range(0.0..1.0);
        let v = net.forward(&z, t, &c).unwrap();
        prop_assert_eq!(v.shape(), z.shape());
        prop_assert_eq!(v, net.forward(&z, t, &c).unwrap());
    }

    #[test]
    fn flow_path_identities(t in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let tpl = LatentTensor::zeros(2, 3, 4, 25);
        let z0 = standard_normal_like(&tpl, &mut r);
        let z1 = standard_normal_like(&tpl, &mut r);
        let cond = standard_normal_like(&LatentTensor::zeros(1, 3, 4, 25), &mut r);
        let b = path_at(z0.clone(), &z1, &cond, t).unwrap();
        let at0 = path_at(z0.clone(), &z1, &cond, 0.0).unwrap();
        let at1 = path_at(z0.clone(), &z1, &cond, 1.0).unwrap();
        prop_assert_eq!(&at0.z_t, &z0);
        prop_assert_eq!(&at1.z_t, &z1);
        prop_assert_eq!(&b.u, &at0.u);
    }

    #[test]
    fn flow_loss_nonnegative(seed in any::<u64>(), t in 0.0f64..1.0) {
        let cfg = NetConfig { latent_dim: 2, target_channels: 2, cond_channels: 1, hidden_dim: 16, num_heads: 2, time_embed_dim: 8, max_tokens: 4, ..NetConfig::desk() };
        let mut net = VelocityField::init(cfg, seed).unwrap();
        common::randomize(&mut net, 0.3, seed ^ 1);
        let item = common::random_item(&cfg, 3, t, seed);
        prop_assert!(flow_loss(&net, &[item]).unwrap() >= 0.0);
    }

    #[test]
    fn constant_fields_are_exact(c in -5.0f64..5.0, z0 in -5.0f64..5.0) {
        let field = move |_z: &[f64], _t: f64| -> Result<Vec<f64>> { Ok(vec![c]) };
        for m in [Method::Euler, Method::Rk4, Method::Dopri45Fixed] {
            let r = integrate(&[z0], &field, &SolveConfig::fixed(m, 1)).unwrap();
            prop_assert!((r.z[0] - (z0 + c)).abs() <= 1e-14 * (1.0 + z0.abs() + c.abs()));
            prop_assert_eq!(r.t_final, 1.0);
        }
        let r = integrate(&[z0], &field, &SolveConfig::adaptive(1e-6, 1e-6)).unwrap();
        prop_assert_eq!(r.t_final, 1.0);
    }

    #[test]
    fn vbap_energy_is_unit(az in -180.0f64..180.0, el in -90.0f64..90.0) {
        let set = HrirSet::synthetic(48_000);
        let g = vbap_gains(unit_vector(az, el), set.directions()).unwrap();
        prop_assert!((g.gains.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(g.gains.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn binaural_mirror_symmetry(seed in any::<u64>()) {
        let set = HrirSet::synthetic(48_000).mirrored();
        let layout = ChannelLayout::surround_714();
        let x = audio(12, 200, seed);
        let mirrored = MultichannelAudio::new(
            48_000,
            (0..12).map(|i| x.channel(layout.mirror_index(i)).to_vec()).collect(),
            layout.clone(),
        ).unwrap();
        let a = binauralize(&x, &set, &layout).unwrap();
        let b = binauralize(&mirrored, &set, &layout).unwrap();
        for (p, q) in a.channel(0).iter().zip(b.channel(1)).chain(a.channel(1).iter().zip(b.channel(0))) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!(a.channels().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(d in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = GaussianStats { mean: DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0)), cov: spd(d, seed) };
        let b = GaussianStats { mean: DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0)), cov: spd(d, seed ^ 7) };
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

#[test]
fn layout_names_are_total() {
    let l = ChannelLayout::surround_714();
    for (i, name) in NAMES_714.iter().enumerate() {
        assert_eq!(l.index_of(name), Some(i));
    }
}

#[test]
fn adaptive_error_is_monotone_in_rtol() {
    let decay = |z: &[f64], _t: f64| -> Result<Vec<f64>> { Ok(z.iter().map(|v| -v).collect()) };
    let exact = (-1f64).exp();
    let errs: Vec<f64> = (3..=9)
        .map(|k| {
            let tol = 10f64.powi(-k);
            let r = integrate(&[1.0], &decay, &SolveConfig::adaptive(tol, tol)).unwrap();
            (r.z[0] - exact).abs()
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}
