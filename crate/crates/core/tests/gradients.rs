mod common;

use common::*;
use spatialflow::net::{NetConfig, VelocityField};

#[test]
fn every_op_matches_finite_differences() {
    for (name, f, inputs) in op_cases() {
        let err = op_gradient_error(f.as_ref(), &inputs);
        assert!(err < 1e-6, "{name}: relative error {err:e}");
    }
}

#[test]
fn tiny_net_all_parameters() {
    let cfg = NetConfig {
        num_blocks: 1,
        hidden_dim: 8,
        num_heads: 2,
        latent_dim: 2,
        target_channels: 2,
        cond_channels: 1,
        time_embed_dim: 4,
        ff_mult: 2,
        max_tokens: 8,
        use_film: true,
        use_cross_attn: true,
    };
    for (film, cross) in [(true, true), (false, true), (true, false)] {
        let cfg = NetConfig { use_film: film, use_cross_attn: cross, ..cfg };
        let mut net = VelocityField::init(cfg, 3).unwrap();
        randomize(&mut net, 0.5, 4);
        let item = random_item(&cfg, 3, 0.37, 5);
        let (err, n) = net_gradient_error(&net, &item, None);
        assert_eq!(n, net.num_scalars());
        assert!(err < 1e-5, "film {film} cross {cross}: {err:e}");
    }
}
