//! Vector base amplitude panning over an arbitrary set of unit directions.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Unit vector for `[azimuth, elevation]` in degrees. x points forward,
/// y to the left, z up.
pub fn unit_vector(azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// `(azimuth, elevation)` in degrees of a (not necessarily unit) vector.
pub fn angles_of(v: Vec3) -> (f64, f64) {
    let n = norm(v);
    let az = v[1].atan2(v[0]).to_degrees();
    let el = (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    (az, el)
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Angle between two directions in degrees.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PanMode {
    Triplet,
    /// The three nearest directions were coplanar with the origin.
    Pair,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VbapGains {
    pub indices: [usize; 3],
    pub gains: [f64; 3],
    pub mode: PanMode,
}

impl VbapGains {
    /// Gain-weighted direction sum, normalized.
    pub fn reconstructed(&self, directions: &[Vec3]) -> Vec3 {
        let mut v = [0.0; 3];
        for (i, g) in self.indices.iter().zip(self.gains) {
            for k in 0..3 {
                v[k] += g * directions[*i][k];
            }
        }
        normalize(v)
    }
}

const DEGENERATE_DET: f64 = 1e-9;

/// Indices of `directions` ordered nearest-first to `target`. Ties are broken
/// by quantities that are invariant under left/right mirroring so mirrored
/// targets select mirrored neighbours.
fn nearest_order(target: Vec3, directions: &[Vec3]) -> Vec<usize> {
    let q = |v: f64| (v * 1e12).round() as i64;
    let mut idx: Vec<usize> = (0..directions.len()).collect();
    idx.sort_by_key(|&i| {
        let d = directions[i];
        (-q(dot(target, d)), q(d[2]), q(d[1].abs()), -q(d[1]), i)
    });
    idx
}

fn finish(indices: [usize; 3], mut gains: [f64; 3], mode: PanMode) -> VbapGains {
    for g in gains.iter_mut() {
        if *g < 0.0 {
            *g = 0.0;
        }
    }
    let energy = gains.iter().map(|g| g * g).sum::<f64>().sqrt();
    for g in gains.iter_mut() {
        *g /= energy;
    }
    VbapGains {
        indices,
        gains,
        mode,
    }
}

/// Energy-normalized panning gains over the three directions nearest to
/// `target`. Negative solutions are clamped to zero before normalization.
pub fn vbap_gains(target: Vec3, directions: &[Vec3]) -> Result<VbapGains> {
    if directions.is_empty() {
        return Err(Error::InvalidArgument("no panning directions".into()));
    }
    let n = norm(target);
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "panning target must be a unit vector (norm {n})"
        )));
    }
    let order = nearest_order(target, directions);
    let single = || VbapGains {
        indices: [order[0], order[0], order[0]],
        gains: [1.0, 0.0, 0.0],
        mode: PanMode::Single,
    };
    if directions.len() < 2 {
        return Ok(single());
    }

    if directions.len() >= 3 {
        let (i, j, k) = (order[0], order[1], order[2]);
        let (a, b, c) = (directions[i], directions[j], directions[k]);
        let det = dot(a, cross(b, c));
        if det.abs() > DEGENERATE_DET {
            let g = [
                dot(target, cross(b, c)) / det,
                dot(target, cross(c, a)) / det,
                dot(target, cross(a, b)) / det,
            ];
            if g.iter().any(|v| *v > 0.0) {
                return Ok(finish([i, j, k], g, PanMode::Triplet));
            }
        }
    }

    // Two-direction fallback: least squares in the plane of the pair.
    let (i, j) = (order[0], order[1]);
    let (a, b) = (directions[i], directions[j]);
    let c = dot(a, b);
    let det = 1.0 - c * c;
    if det < 1e-12 {
        return Ok(single());
    }
    let (pa, pb) = (dot(target, a), dot(target, b));
    let g = [(pa - c * pb) / det, (pb - c * pa) / det, 0.0];
    if g[0] <= 0.0 && g[1] <= 0.0 {
        return Ok(single());
    }
    Ok(finish([i, j, j], g, PanMode::Pair))
}
