#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatialflow::codec::LatentTensor;
use spatialflow::flow::{item_loss_and_grads, path_at, standard_normal_like, FlowBatch};
use spatialflow::net::{NetConfig, VelocityField};
use spatialflow::tensor::{Tape, Tensor, Var};
use spatialflow::Result;

/// Central-difference step.
pub const H: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `f`'s output to a scalar through fixed random weights so every
/// output element contributes a distinct coefficient.
fn scalarized(
    f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
    tape: &mut Tape<'_>,
    vars: &[Var],
    seed: u64,
) -> Result<Var> {
    let out = f(tape, vars)?;
    let shape = tape.shape(out).to_vec();
    let w = random_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn eval(f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>, inputs: &[Tensor], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = scalarized(f, &mut tape, &vars, seed).unwrap();
    tape.value(y).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input entry.
pub fn op_gradient_error(f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    let seed = 99;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let y = scalarized(f, &mut tape, &vars, seed).unwrap();
    let grads = tape.backward(y).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("input gradient");
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(f, &plus, seed) - eval(f, &minus, seed)) / (2.0 * H);
            worst = worst.max(rel_error(g.data()[i], numeric));
        }
    }
    worst
}

/// Replaces every parameter with uniform draws so no gradient path is
/// trivially zero.
pub fn randomize(net: &mut VelocityField, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn random_item(cfg: &NetConfig, frames: usize, t: f64, seed: u64) -> FlowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tpl = LatentTensor::zeros(cfg.target_channels, cfg.latent_dim, frames, 25);
    let ctpl = LatentTensor::zeros(cfg.cond_channels, cfg.latent_dim, frames, 25);
    let z1 = standard_normal_like(&tpl, &mut rng);
    let z0 = standard_normal_like(&tpl, &mut rng);
    let cond = standard_normal_like(&ctpl, &mut rng);
    path_at(z0, &z1, &cond, t).unwrap()
}

/// Finite-difference check of the flow loss with respect to network
/// parameters. At most `per_tensor` entries of each parameter tensor are
/// checked, spread evenly; `None` checks all of them.
pub fn net_gradient_error(net: &VelocityField, item: &FlowBatch, per_tensor: Option<usize>) -> (f64, usize) {
    let (_, grads) = item_loss_and_grads(net, item).unwrap();
    let loss_at = |n: &VelocityField| item_loss_and_grads(n, item).unwrap().0;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, (name, p)) in net.params().iter().enumerate() {
        let n = p.numel();
        let idx: Vec<usize> = match per_tensor {
            Some(m) if m < n => (0..m).map(|j| j * n / m + (j * 7919) % (n / m).max(1)).collect(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let mut plus = net.clone();
            plus.param_mut(name).unwrap().data_mut()[i] += H;
            let mut minus = net.clone();
            minus.param_mut(name).unwrap().data_mut()[i] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            worst = worst.max(rel_error(grads[k].data()[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub type OpFn = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>;

/// Every differentiable tape operation with random inputs of a fitting
/// shape.
pub fn op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |s: &[usize]| random_tensor(s, &mut rng);
    vec![
        ("matmul", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.matmul(v[0], v[1])) as OpFn, vec![r(&[3, 4]), r(&[4, 5])]),
        ("add", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.add(v[0], v[1])), vec![r(&[3, 4]), r(&[3, 4])]),
        ("sub", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.sub(v[0], v[1])), vec![r(&[3, 4]), r(&[3, 4])]),
        ("mul", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.mul(v[0], v[1])), vec![r(&[3, 4]), r(&[3, 4])]),
        ("add_trailing", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.add_trailing(v[0], v[1])), vec![r(&[3, 4]), r(&[4])]),
        ("mul_trailing", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.mul_trailing(v[0], v[1])), vec![r(&[3, 4]), r(&[4])]),
        ("add_scalar", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.add_scalar(v[0], 0.7)), vec![r(&[2, 3])]),
        ("scale", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.scale(v[0], -1.3)), vec![r(&[2, 3])]),
        ("transpose", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.transpose(v[0])), vec![r(&[3, 5])]),
        ("reshape", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.reshape(v[0], &[5, 3])), vec![r(&[3, 5])]),
        ("gelu", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.gelu(v[0])), vec![r(&[4, 6])]),
        ("softmax", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.softmax(v[0])), vec![r(&[3, 6])]),
        ("layer_norm", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.layer_norm(v[0], v[1], v[2], 1e-5)), vec![r(&[3, 6]), r(&[6]), r(&[6])]),
        ("film", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.film(v[0], v[1], v[2])), vec![r(&[3, 6]), r(&[6]), r(&[6])]),
        ("sum", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.sum(v[0])), vec![r(&[3, 4])]),
        ("mean", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.mean(v[0])), vec![r(&[3, 4])]),
        ("mse_loss", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.mse_loss(v[0], v[1])), vec![r(&[3, 4]), r(&[3, 4])]),
        ("mean_rows", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.mean_rows(v[0])), vec![r(&[5, 4])]),
        ("slice_cols", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.slice_cols(v[0], 1, 3)), vec![r(&[4, 6])]),
        ("slice_rows", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.slice_rows(v[0], 2, 2)), vec![r(&[5, 3])]),
        ("concat_cols", Box::new(|t: &mut Tape<'_>, v: &[Var]| t.concat_cols(&[v[0], v[1], v[2]])), vec![r(&[3, 2]), r(&[3, 4]), r(&[3, 1])]),
    ]
}
