//! Integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{write_latent, LatentTensor};
use crate::error::{Error, Result};
use crate::net::VelocityField;

/// Right-hand side of the ODE over a flat state vector.
pub trait VectorField {
    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self(z, t)
    }
}

/// The learned velocity with a fixed stereo condition.
pub struct NetField<'a> {
    pub net: &'a VelocityField,
    pub cond: &'a LatentTensor,
    /// Shape donor for the state.
    pub template: &'a LatentTensor,
}

impl VectorField for NetField<'_> {
    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let zt = self.template.with_data(z.to_vec())?;
        Ok(self.net.forward(&zt, t.clamp(0.0, 1.0), self.cond)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    /// Adaptive Dormand–Prince 4(5).
    Dopri45,
    /// Dormand–Prince fifth-order solution on a fixed grid.
    Dopri45Fixed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri45 => "dopri45",
            Method::Dopri45Fixed => "dopri45-fixed",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri45" | "dopri5" => Ok(Method::Dopri45),
            "dopri45-fixed" => Ok(Method::Dopri45Fixed),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveConfig {
    pub method: Method,
    /// Grid size for the fixed-step methods.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_dt: f64,
    pub record_trajectory: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            method: Method::Dopri45,
            steps: 50,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            initial_dt: 0.05,
            record_trajectory: false,
        }
    }
}

impl SolveConfig {
    pub fn fixed(method: Method, steps: usize) -> Self {
        SolveConfig {
            method,
            steps,
            ..Self::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        SolveConfig {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.max_steps == 0 {
            return Err(Error::Config("solver step counts must be positive".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if !(self.initial_dt > 0.0) {
            return Err(Error::Config("initial_dt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub z: Vec<f64>,
    pub t_final: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// `(t, z)` at the start and after every accepted step, when recorded.
    pub trajectory: Vec<(f64, Vec<f64>)>,
}

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn eval(field: &dyn VectorField, z: &[f64], t: f64, evals: &mut usize) -> Result<Vec<f64>> {
    *evals += 1;
    let v = field.eval(z, t)?;
    if v.len() != z.len() {
        return Err(Error::Dimension {
            op: "vector field",
            detail: format!("state of {} values, field returned {}", z.len(), v.len()),
        });
    }
    check_finite(&v, "vector field")?;
    Ok(v)
}

/// `z + dt * sum(w_i * k_i)`
fn combine(z: &[f64], dt: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = z.to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, k) in terms {
            if *w != 0.0 {
                acc += w * k[i];
            }
        }
        *o += dt * acc;
    }
    out
}

/// One explicit Euler step `z + dt * v(z, t)`.
pub fn euler_step(z: &[f64], t: f64, dt: f64, field: &dyn VectorField) -> Result<Vec<f64>> {
    if !(dt > 0.0) || t + dt > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "euler step from t={t} with dt={dt} leaves [0, 1]"
        )));
    }
    let v = field.eval(z, t)?;
    check_finite(&v, "vector field")?;
    let out: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + b * dt).collect();
    check_finite(&out, "euler state")?;
    Ok(out)
}

fn rk4_step(
    field: &dyn VectorField,
    z: &[f64],
    t: f64,
    dt: f64,
    evals: &mut usize,
) -> Result<Vec<f64>> {
    let k1 = eval(field, z, t, evals)?;
    let k2 = eval(field, &combine(z, dt, &[(0.5, &k1)]), t + 0.5 * dt, evals)?;
    let k3 = eval(field, &combine(z, dt, &[(0.5, &k2)]), t + 0.5 * dt, evals)?;
    let k4 = eval(field, &combine(z, dt, &[(1.0, &k3)]), t + dt, evals)?;
    Ok(combine(
        z,
        dt,
        &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)],
    ))
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order solution minus the embedded fourth-order one.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct DpAttempt {
    z_new: Vec<f64>,
    k7: Vec<f64>,
    err: Vec<f64>,
}

/// Stages 2..7 given `k1 = v(z, t)`; six evaluations.
fn dopri_attempt(
    field: &dyn VectorField,
    z: &[f64],
    t: f64,
    dt: f64,
    k1: &[f64],
    evals: &mut usize,
) -> Result<DpAttempt> {
    let mut ks: Vec<Vec<f64>> = vec![k1.to_vec()];
    for s in 1..7 {
        let terms: Vec<(f64, &[f64])> = (0..s).map(|j| (DP_A[s][j], ks[j].as_slice())).collect();
        let zs = combine(z, dt, &terms);
        let ts = if s >= 5 { t + dt } else { t + DP_C[s] * dt };
        let k = eval(field, &zs, ts, evals)?;
        if s == 6 {
            let err_terms: Vec<(f64, &[f64])> = ks
                .iter()
                .map(|k| k.as_slice())
                .chain([k.as_slice()])
                .zip(DP_E)
                .map(|(k, e)| (e, k))
                .collect();
            let err = combine(&vec![0.0; z.len()], dt, &err_terms);
            return Ok(DpAttempt {
                z_new: zs,
                k7: k,
                err,
            });
        }
        ks.push(k);
    }
    unreachable!("loop returns at the seventh stage")
}

/// RMS over elements of `err_i / (atol + rtol * max(|z_i|, |z'_i|))`.
pub fn error_norm(err: &[f64], z: &[f64], z_new: &[f64], rtol: f64, atol: f64) -> f64 {
    let s: f64 = err
        .iter()
        .zip(z.iter().zip(z_new))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / err.len().max(1) as f64).sqrt()
}

/// Step-size factor `min(5, max(0.2, 0.9 * err^(-1/5)))`.
pub fn step_factor(err: f64) -> f64 {
    if err == 0.0 {
        return 5.0;
    }
    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
}

/// Integrates from `t = 0` to exactly `t = 1`.
pub fn integrate(z0: &[f64], field: &dyn VectorField, cfg: &SolveConfig) -> Result<SolveReport> {
    cfg.validate()?;
    check_finite(z0, "initial state")?;
    let mut evals = 0;
    let mut traj = Vec::new();
    let record = cfg.record_trajectory;
    if record {
        traj.push((0.0, z0.to_vec()));
    }
    let mut z = z0.to_vec();

    if cfg.method != Method::Dopri45 {
        let n = cfg.steps;
        let mut k1 = None;
        for i in 0..n {
            let t = i as f64 / n as f64;
            let t_next = if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 };
            let dt = t_next - t;
            z = match cfg.method {
                Method::Euler => {
                    let v = eval(field, &z, t, &mut evals)?;
                    combine(&z, dt, &[(1.0, &v)])
                }
                Method::Rk4 => rk4_step(field, &z, t, dt, &mut evals)?,
                Method::Dopri45Fixed => {
                    let k = match k1.take() {
                        Some(k) => k,
                        None => eval(field, &z, t, &mut evals)?,
                    };
                    let a = dopri_attempt(field, &z, t, dt, &k, &mut evals)?;
                    k1 = Some(a.k7);
                    a.z_new
                }
                Method::Dopri45 => unreachable!(),
            };
            check_finite(&z, "solver state")?;
            if record {
                traj.push((t_next, z.clone()));
            }
        }
        return Ok(SolveReport {
            z,
            t_final: 1.0,
            accepted: n,
            rejected: 0,
            evaluations: evals,
            trajectory: traj,
        });
    }

    let mut t = 0.0;
    let mut dt = cfg.initial_dt.min(1.0);
    let mut k1 = eval(field, &z, t, &mut evals)?;
    let (mut accepted, mut rejected) = (0, 0);
    while t < 1.0 {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxSteps(cfg.max_steps));
        }
        let last = t + dt >= 1.0;
        if last {
            dt = 1.0 - t;
        }
        let a = dopri_attempt(field, &z, t, dt, &k1, &mut evals)?;
        let err = error_norm(&a.err, &z, &a.z_new, cfg.rtol, cfg.atol);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("error estimate at t={t}")));
        }
        if err <= 1.0 {
            t = if last { 1.0 } else { t + dt };
            z = a.z_new;
            k1 = a.k7;
            accepted += 1;
            if record {
                traj.push((t, z.clone()));
            }
        } else {
            rejected += 1;
        }
        dt *= step_factor(err);
    }
    Ok(SolveReport {
        z,
        t_final: t,
        accepted,
        rejected,
        evaluations: evals,
        trajectory: traj,
    })
}

/// Integrates a latent with the learned field.
pub fn integrate_latent(
    z0: &LatentTensor,
    net: &VelocityField,
    cond: &LatentTensor,
    cfg: &SolveConfig,
) -> Result<(LatentTensor, SolveReport)> {
    let field = NetField {
        net,
        cond,
        template: z0,
    };
    let report = integrate(z0.data(), &field, cfg)?;
    Ok((z0.with_data(report.z.clone())?, report))
}

/// Least-squares slope of `log(error)` against `log(dt)` over fixed grids of
/// `ladder[i]` steps. `exact` is the solution at `t = 1`. Grids whose error
/// is below `floor` are dominated by rounding and excluded.
pub fn convergence_order(
    field: &dyn VectorField,
    z0: &[f64],
    exact: &[f64],
    method: Method,
    ladder: &[usize],
    floor: f64,
) -> Result<f64> {
    let mut pts = Vec::new();
    for &n in ladder {
        let r = integrate(z0, field, &SolveConfig::fixed(method, n))?;
        let err = r
            .z
            .iter()
            .zip(exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err > floor {
            pts.push(((1.0 / n as f64).ln(), err.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(
            "fewer than two grids above the rounding floor".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Writes one latent cache file per recorded time plus `index.txt`.
pub fn write_trajectory(
    dir: impl AsRef<Path>,
    report: &SolveReport,
    template: &LatentTensor,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, (t, z)) in report.trajectory.iter().enumerate() {
        let name = format!("step_{i:05}.iflt");
        write_latent(&template.with_data(z.clone())?, dir.join(&name))?;
        writeln!(index, "{t:.17e}\t{name}").expect("string write");
    }
    let p = dir.join("index.txt");
    fs::write(&p, index).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(z: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(z.iter().map(|v| -v).collect())
    }

    fn constant(z: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(vec![3.0; z.len()])
    }

    #[test]
    fn euler_step_matches_definition() {
        let z = euler_step(&[0.0, 0.0], 0.0, 0.1, &constant).unwrap();
        assert_eq!(z, vec![3.0 * 0.1; 2]);
        let zero = |z: &[f64], _t: f64| -> Result<Vec<f64>> { Ok(vec![0.0; z.len()]) };
        assert_eq!(euler_step(&[1.5], 0.3, 0.2, &zero).unwrap(), vec![1.5]);
        assert!(euler_step(&[0.0], 0.95, 0.1, &constant).is_err());
    }

    #[test]
    fn euler_on_growth_reaches_e() {
        let grow = |z: &[f64], _t: f64| -> Result<Vec<f64>> { Ok(z.to_vec()) };
        let r = integrate(&[1.0], &grow, &SolveConfig::fixed(Method::Euler, 1000)).unwrap();
        let e = std::f64::consts::E;
        assert!((r.z[0] - e).abs() / e < 2e-3);
    }

    #[test]
    fn constant_field_is_exact_in_one_step() {
        for m in [Method::Euler, Method::Rk4, Method::Dopri45Fixed] {
            let r = integrate(&[1.0], &constant, &SolveConfig::fixed(m, 1)).unwrap();
            assert!((r.z[0] - 4.0).abs() < 1e-15, "{m:?}");
        }
        let cfg = SolveConfig {
            initial_dt: 1.0,
            ..SolveConfig::default()
        };
        let r = integrate(&[1.0], &constant, &cfg).unwrap();
        assert_eq!(r.accepted, 1);
        assert!((r.z[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_reaches_closed_form() {
        let r = integrate(&[1.0], &decay, &SolveConfig::adaptive(1e-8, 1e-8)).unwrap();
        assert!((r.z[0] - (-1f64).exp()).abs() < 1e-7);
        assert_eq!(r.t_final, 1.0);
        assert_eq!(r.evaluations, 1 + 6 * (r.accepted + r.rejected));
    }

    #[test]
    fn max_steps_is_enforced() {
        let cfg = SolveConfig {
            max_steps: 2,
            initial_dt: 0.01,
            ..SolveConfig::default()
        };
        assert!(matches!(integrate(&[1.0], &decay, &cfg), Err(Error::MaxSteps(2))));
    }

    #[test]
    fn non_finite_field_is_reported() {
        let bad = |_: &[f64], _t: f64| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
        let e = integrate(&[1.0], &bad, &SolveConfig::default()).unwrap_err();
        assert!(e.is_numerical());
    }

    #[test]
    fn trajectory_is_recorded_to_the_end() {
        let cfg = SolveConfig {
            record_trajectory: true,
            ..SolveConfig::default()
        };
        let r = integrate(&[1.0, 2.0], &decay, &cfg).unwrap();
        assert_eq!(r.trajectory.len(), r.accepted + 1);
        assert_eq!(r.trajectory.last().unwrap().0, 1.0);

        let dir = tempfile::tempdir().unwrap();
        let tpl = LatentTensor::zeros(1, 2, 1, 25);
        write_trajectory(dir.path(), &r, &tpl).unwrap();
        let index = fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(index.lines().count(), r.trajectory.len());
    }

    #[test]
    fn step_factor_is_clamped() {
        assert_eq!(step_factor(0.0), 5.0);
        assert_eq!(step_factor(1e12), 0.2);
        assert!((step_factor(1.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Euler, Method::Rk4, Method::Dopri45, Method::Dopri45Fixed] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("midpoint".parse::<Method>().is_err());
    }
}
