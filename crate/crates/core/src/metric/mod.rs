//! Carnot–Carathéodory distances, boundary distance fields and the gauge
//! machinery built on fundamental solutions.

mod eikonal;
mod gauge;
mod shooting;

pub use eikonal::{boundary_distance, solve_eikonal, EikonalOptions, EikonalReport, SourceField};
pub use gauge::{
    fundamental_solution, gauge_profile, gauge_profile_group, hypothesis_check, omega_sigma,
    omega_sigma_cached, rho_gauge, GaugeProfile, HypothesisReport, OmegaSigma, RhoValue,
};
pub use shooting::{cc_distance, DistanceBracket, ShootingDistance, ShootingOptions, SubUnitPath};

use crate::error::Result;
use crate::frames::{HTypeGroup, VectorFieldSystem};
use crate::poly::Poly;

/// Source of two-sided CC distance estimates.
pub trait DistanceOracle: Sync {
    fn ambient_dim(&self) -> usize;

    /// `(lower, upper)` bounds for `d(x, y)`.
    fn bracket(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)>;

    /// Half-widths of a Euclidean box around `x` containing `B(x, r)`.
    fn reach_box(&self, x: &[f64], r: f64) -> Vec<f64>;

    /// Midpoint of the bracket (the lower bound when the upper one is
    /// infinite); infinite when no bracket is available.
    fn midpoint(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.bracket(x, y) {
            Ok((lo, hi)) if hi.is_finite() => 0.5 * (lo + hi),
            Ok((lo, _)) => lo,
            Err(_) => f64::INFINITY,
        }
    }
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Exact distance of the standard frame.
#[derive(Clone, Debug)]
pub struct EuclideanDistance {
    pub n: usize,
}

impl DistanceOracle for EuclideanDistance {
    fn ambient_dim(&self) -> usize {
        self.n
    }

    fn bracket(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        let d = euclid(x, y);
        Ok((d, d))
    }

    fn reach_box(&self, _x: &[f64], r: f64) -> Vec<f64> {
        vec![r; self.n]
    }
}

/// Solves `(θ - sin θ) / (8 sin²(θ/2)) = s` for `θ ∈ (0, 2π)`.
fn dido_angle(s: f64) -> f64 {
    let phi = |t: f64| {
        let num = if t < 1e-2 {
            let t2 = t * t;
            t * t2 / 6.0 * (1.0 - t2 / 20.0 + t2 * t2 / 840.0)
        } else {
            t - t.sin()
        };
        let sh = (0.5 * t).sin();
        num / (8.0 * sh * sh)
    };
    let (mut lo, mut hi) = (0.0f64, 2.0 * std::f64::consts::PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact CC distance from the identity to `(x, y)` in an H-type group with
/// `c = |x|`, `a = |y|`.
pub fn htype_distance_from_norms(c: f64, a: f64) -> f64 {
    if a == 0.0 {
        return c;
    }
    if c == 0.0 {
        return 2.0 * (std::f64::consts::PI * a).sqrt();
    }
    let s = a / (c * c);
    if s > 1e12 {
        // nearly a closed loop; the c = 0 formula is the limit
        return 2.0 * (std::f64::consts::PI * a).sqrt();
    }
    let t = dido_angle(s);
    if t < 1e-8 {
        return c * (1.0 + t * t / 24.0);
    }
    c * t / (2.0 * (0.5 * t).sin())
}

/// Exact distance of an H-type group (isoperimetric solution).
#[derive(Clone, Debug)]
pub struct HTypeDistance {
    pub group: HTypeGroup,
}

impl HTypeDistance {
    pub fn new(group: HTypeGroup) -> Self {
        HTypeDistance { group }
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let g = &self.group;
        let rel = g.product(&g.inverse(x), y);
        let m = g.horiz_dim();
        let c = rel[..m].iter().map(|v| v * v).sum::<f64>().sqrt();
        let a = rel[m..].iter().map(|v| v * v).sum::<f64>().sqrt();
        htype_distance_from_norms(c, a)
    }
}

impl DistanceOracle for HTypeDistance {
    fn ambient_dim(&self) -> usize {
        self.group.dim()
    }

    fn bracket(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        let d = self.distance(x, y);
        Ok((d, d))
    }

    fn reach_box(&self, x: &[f64], r: f64) -> Vec<f64> {
        let m = self.group.horiz_dim();
        let xc = x[..m].iter().map(|v| v * v).sum::<f64>().sqrt();
        let wy = 0.5 * xc * r + 0.25 * r * r;
        (0..self.group.dim())
            .map(|i| if i < m { r } else { wy })
            .collect()
    }
}

/// The natural oracle for a system: exact for Euclidean and H-type frames,
/// normal-geodesic shooting otherwise.
pub fn default_oracle(sys: &VectorFieldSystem) -> Box<dyn DistanceOracle> {
    if sys.is_euclidean() {
        Box::new(EuclideanDistance {
            n: sys.ambient_dim(),
        })
    } else if let Some(g) = sys.group() {
        Box::new(HTypeDistance::new(g.clone()))
    } else {
        Box::new(ShootingDistance::new(sys.clone(), ShootingOptions::default()))
    }
}

/// Rigorous enclosure of the points reachable from a base point by sub-unit
/// paths: the half-widths solve `w_k' = sup_{box(w)} |row_k B|`.
#[derive(Clone, Debug)]
pub struct ReachEnclosure {
    n: usize,
    /// `rows[k][c]`: coefficient of `∂_k` in field `c`, re-expanded at the base.
    rows: Vec<Vec<Poly>>,
}

impl ReachEnclosure {
    pub fn new(sys: &VectorFieldSystem, x: &[f64]) -> Self {
        let n = sys.ambient_dim();
        let rows = (0..n)
            .map(|k| sys.fields().iter().map(|f| f[k].shifted(x)).collect())
            .collect();
        ReachEnclosure { n, rows }
    }

    /// Upper bounds on the row norms of the frame over the box `w`.
    pub fn row_bounds(&self, w: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| {
                        let b = p.abs_bound_on_box(w);
                        b * b
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Half-widths along `t ∈ [0, r]` at `steps + 1` equispaced times, with a
    /// 1% safety margin.
    pub fn trajectory(&self, r: f64, steps: usize) -> Vec<Vec<f64>> {
        self.trajectory_with(r, steps, 1.01)
    }

    /// Predictor–corrector enclosure scaled by `margin`.
    pub fn trajectory_with(&self, r: f64, steps: usize, margin: f64) -> Vec<Vec<f64>> {
        let dt = r / steps as f64;
        let mut w = vec![0.0; self.n];
        let mut out = Vec::with_capacity(steps + 1);
        out.push(w.clone());
        for _ in 0..steps {
            let f0 = self.row_bounds(&w);
            let pred: Vec<f64> = w.iter().zip(&f0).map(|(a, b)| a + dt * b).collect();
            let grown: Vec<f64> = pred.iter().map(|v| v * 1.001 + 1e-300).collect();
            let f1 = self.row_bounds(&grown);
            let corr: Vec<f64> = w.iter().zip(&f1).map(|(a, b)| a + dt * b).collect();
            w = pred.iter().zip(&corr).map(|(a, b)| a.max(*b)).collect();
            out.push(w.clone());
        }
        for v in out.iter_mut() {
            for a in v.iter_mut() {
                *a *= margin;
            }
        }
        out
    }

    pub fn half_widths(&self, r: f64) -> Vec<f64> {
        self.trajectory(r, 256).pop().unwrap()
    }
}

/// Reach box of a general system.
pub fn reach_box(sys: &VectorFieldSystem, x: &[f64], r: f64) -> Vec<f64> {
    ReachEnclosure::new(sys, x).half_widths(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn htype_distance_special_cases() {
        let g = HTypeGroup::new(1, 1).unwrap();
        let d = HTypeDistance::new(g.clone());
        assert!((d.distance(&[0.0; 3], &[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        // pure center: full circle of area |y|
        let v = d.distance(&[0.0; 3], &[0.0, 0.0, 1.0]);
        assert!((v - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-12);
        // left invariance
        let a = [0.3, -0.2, 0.5];
        let b = [1.0, 0.4, -0.3];
        let t = [2.0, 1.0, -1.0];
        let l = d.distance(&g.product(&t, &a), &g.product(&t, &b));
        assert!((l - d.distance(&a, &b)).abs() < 1e-12);
        // homogeneity
        let s = d.distance(&[0.0; 3], &g.dilate(3.0, &b));
        assert!((s - 3.0 * d.distance(&[0.0; 3], &b)).abs() < 1e-11);
    }

    #[test]
    fn htype_distance_is_continuous_near_degenerate_cases() {
        let small = htype_distance_from_norms(1.0, 1e-9);
        assert!((small - 1.0).abs() < 1e-8);
        let near_loop = htype_distance_from_norms(1e-7, 1.0);
        assert!((near_loop - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-5);
        // monotone in the center component
        let mut prev = 0.0;
        for i in 0..50 {
            let v = htype_distance_from_norms(1.0, i as f64 * 0.1);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn arc_length_matches_area() {
        // circle arc with chord c and angle θ encloses (θ - sin θ) ρ² / 2
        for &t in &[0.1f64, 1.0, 3.0, 5.5] {
            let c = 1.7;
            let rho = c / (2.0 * (t / 2.0).sin());
            let area = rho * rho * (t - t.sin()) / 2.0;
            let l = htype_distance_from_norms(c, area);
            assert!((l - rho * t).abs() < 1e-9 * l, "theta {t}");
        }
    }

    #[test]
    fn reach_box_grushin() {
        let sys = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let w = reach_box(&sys, &[0.0; 3], 0.5);
        assert!((w[0] - 0.5 * 1.01).abs() < 1e-9);
        assert!((w[1] - 0.5 * 1.01).abs() < 1e-9);
        assert!(w[2] >= 0.125 && w[2] < 0.125 * 1.05);
        let g = HTypeGroup::new(1, 1).unwrap();
        let generic = reach_box(&g.system(), &[0.5, 0.0, 0.0], 0.3);
        let exact = HTypeDistance::new(g).reach_box(&[0.5, 0.0, 0.0], 0.3);
        for k in 0..3 {
            assert!(generic[k] >= exact[k] * 0.5);
        }
    }
}
