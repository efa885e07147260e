//! Upper bounds for the CC distance by shooting normal geodesics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{euclid, DistanceOracle, ReachEnclosure};
use crate::error::{Error, Result};
use crate::frames::VectorFieldSystem;
use crate::poly::CompiledPoly;

#[derive(Clone, Debug)]
pub struct ShootingOptions {
    /// RK4 steps over the unit time interval.
    pub steps: usize,
    /// Random initial covectors tried besides the structured ones.
    pub starts: usize,
    pub max_newton: usize,
    /// Endpoint tolerance relative to `1 + |y - x|`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions {
            steps: 128,
            starts: 4,
            max_newton: 40,
            tol: 1e-11,
            seed: 0x5eed,
        }
    }
}

/// Piecewise-constant sub-unit control: `|u| <= 1` on each step.
#[derive(Clone, Debug, Serialize)]
pub struct SubUnitPath {
    pub start: Vec<f64>,
    pub timestep: f64,
    pub controls: Vec<Vec<f64>>,
}

impl SubUnitPath {
    pub fn length(&self) -> f64 {
        self.timestep * self.controls.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct DistanceBracket {
    pub lower: f64,
    pub upper: f64,
    pub path: Option<SubUnitPath>,
}

struct Dynamics {
    n: usize,
    m: usize,
    /// `b[k * m + c]`: coefficient of `∂_k` in field `c`.
    b: Vec<CompiledPoly>,
    /// `db[(k * m + c) * n + j] = ∂_j b_kc`.
    db: Vec<CompiledPoly>,
}

impl Dynamics {
    fn new(sys: &VectorFieldSystem) -> Self {
        let n = sys.ambient_dim();
        let m = sys.num_fields();
        let mut b = Vec::with_capacity(n * m);
        let mut db = Vec::with_capacity(n * m * n);
        for k in 0..n {
            for c in 0..m {
                let p = &sys.fields()[c][k];
                b.push(CompiledPoly::new(p));
                for j in 0..n {
                    db.push(CompiledPoly::new(&p.deriv(j)));
                }
            }
        }
        Dynamics { n, m, b, db }
    }

    /// Hamiltonian vector field of `½ Σ_c <λ, X_c>²`; `state = (x, λ)`.
    fn rhs(&self, state: &[f64], out: &mut [f64], u: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let (x, lam) = state.split_at(n);
        let mut bx = [0.0f64; 256];
        for i in 0..n * m {
            bx[i] = self.b[i].eval(x);
        }
        for c in 0..m {
            u[c] = (0..n).map(|k| lam[k] * bx[k * m + c]).sum();
        }
        for k in 0..n {
            out[k] = (0..m).map(|c| u[c] * bx[k * m + c]).sum();
        }
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                if lam[k] == 0.0 {
                    continue;
                }
                for c in 0..m {
                    let d = &self.db[(k * m + c) * n + j];
                    if !d.is_zero() {
                        s += u[c] * lam[k] * d.eval(x);
                    }
                }
            }
            out[n + j] = -s;
        }
    }

    /// Integrates over `[0, 1]`; returns the endpoint, the control at each
    /// step start and the path length.
    fn integrate(&self, x0: &[f64], lam0: &[f64], steps: usize, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>, f64) {
        let n = self.n;
        let dt = 1.0 / steps as f64;
        let mut s: Vec<f64> = x0.iter().chain(lam0).cloned().collect();
        let mut k1 = vec![0.0; 2 * n];
        let mut k2 = vec![0.0; 2 * n];
        let mut k3 = vec![0.0; 2 * n];
        let mut k4 = vec![0.0; 2 * n];
        let mut tmp = vec![0.0; 2 * n];
        let mut u = vec![0.0; self.m];
        let mut controls = Vec::new();
        let mut length = 0.0;
        let mut prev_speed = None;
        for _ in 0..steps {
            self.rhs(&s, &mut k1, &mut u);
            let speed = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if keep {
                controls.push(u.clone());
            }
            if let Some(p) = prev_speed {
                length += 0.5 * (p + speed) * dt;
            }
            prev_speed = Some(speed);
            for i in 0..2 * n {
                tmp[i] = s[i] + 0.5 * dt * k1[i];
            }
            self.rhs(&tmp, &mut k2, &mut u);
            for i in 0..2 * n {
                tmp[i] = s[i] + 0.5 * dt * k2[i];
            }
            self.rhs(&tmp, &mut k3, &mut u);
            for i in 0..2 * n {
                tmp[i] = s[i] + dt * k3[i];
            }
            self.rhs(&tmp, &mut k4, &mut u);
            for i in 0..2 * n {
                s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        self.rhs(&s, &mut k1, &mut u);
        let speed = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        length += 0.5 * (prev_speed.unwrap_or(speed) + speed) * dt;
        s.truncate(n);
        (s, controls, length)
    }
}

fn pinv_solve(j: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.solve(r, 1e-12 * smax.max(1e-300))
        .unwrap_or_else(|_| DVector::zeros(r.len()))
}

/// Computes `(upper, lower, witness)` for `d(x, y)`.
pub fn cc_distance(
    sys: &VectorFieldSystem,
    x: &[f64],
    y: &[f64],
    opts: &ShootingOptions,
) -> Result<DistanceBracket> {
    let dynamics = Dynamics::new(sys);
    shoot(sys, &dynamics, x, y, opts)
}

fn shoot(
    sys: &VectorFieldSystem,
    dynamics: &Dynamics,
    x: &[f64],
    y: &[f64],
    opts: &ShootingOptions,
) -> Result<DistanceBracket> {
    let n = sys.ambient_dim();
    if x == y {
        return Ok(DistanceBracket {
            lower: 0.0,
            upper: 0.0,
            path: None,
        });
    }
    let dist = euclid(x, y);
    let tol = opts.tol * (1.0 + dist);
    let b = sys.eval_frame(x);
    let diff = DVector::from_iterator(n, x.iter().zip(y).map(|(a, c)| c - a));
    let bbt = &b * b.transpose();
    let base = pinv_solve(&bbt, &diff);
    let scale = base.norm().max(dist).max(1e-12);
    // covector directions annihilated by the frame steer the rotation of
    // normal geodesics; their useful size is an angle, independent of scale
    let eig = bbt.clone().symmetric_eigen();
    let emax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let kernel: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] <= 1e-9 * emax)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let m = sys.num_fields();
    let btb = b.transpose() * &b;
    let to_covector = |u: &DVector<f64>| &b * pinv_solve(&btb, u);
    let u_base = b.transpose() * &base;
    let (u_dir, u_len) = if u_base.norm() > 1e-9 * scale {
        (u_base.normalize(), u_base.norm())
    } else {
        (DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 }), 2.0 * dist.sqrt())
    };
    // a control direction orthogonal to the chord's
    let mut u_perp = DVector::from_fn(m, |i, _| if i == 1 % m { 1.0 } else { 0.0 });
    u_perp -= &u_dir * u_dir.dot(&u_perp);
    if u_perp.norm() > 1e-12 {
        u_perp = u_perp.normalize();
    }
    let mut starts = vec![base.clone()];
    if !kernel.is_empty() {
        // circular-arc guesses: initial control rotated by half the turn,
        // speed stretched by the arc/chord ratio
        for &turn in &[0.5f64, 1.5, 2.5, 3.5, 4.5, 5.5, 6.1] {
            for &sign in &[1.0, -1.0] {
                for &rot in &[1.0, -1.0] {
                    let half = 0.5 * turn;
                    let u = (&u_dir * half.cos() + &u_perp * (rot * half.sin())) * (u_len * half / half.sin());
                    let mut l = to_covector(&u);
                    for k in &kernel {
                        l += k * (sign * turn);
                    }
                    starts.push(l);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for i in 0..opts.starts {
        let mag = scale * [0.5, 1.0, 2.0][i % 3];
        starts.push(base.clone() + DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0) * mag));
    }
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for mut lam in starts {
        let mut res = {
            let (e, _, _) = dynamics.integrate(x, lam.as_slice(), opts.steps, false);
            DVector::from_iterator(n, e.iter().zip(y).map(|(a, c)| a - c))
        };
        let mut converged = res.norm() <= tol;
        for _ in 0..opts.max_newton {
            if converged {
                break;
            }
            let mut jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let eps = 1e-7 * (1.0 + lam.norm());
                let mut lp = lam.clone();
                lp[j] += eps;
                let (e, _, _) = dynamics.integrate(x, lp.as_slice(), opts.steps, false);
                for i in 0..n {
                    jac[(i, j)] = (e[i] - y[i] - res[i]) / eps;
                }
            }
            let step = pinv_solve(&jac, &res);
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let trial = &lam - &step * alpha;
                let (e, _, _) = dynamics.integrate(x, trial.as_slice(), opts.steps, false);
                let r2 = DVector::from_iterator(n, e.iter().zip(y).map(|(a, c)| a - c));
                if r2.norm() < res.norm() && r2.iter().all(|v| v.is_finite()) {
                    lam = trial;
                    res = r2;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
            converged = res.norm() <= tol;
        }
        if converged {
            // reject geodesics the step count does not resolve
            let (e, _, len) = dynamics.integrate(x, lam.as_slice(), 4 * opts.steps, false);
            let mismatch = euclid(&e, y);
            if mismatch > 1e-5 * (1.0 + dist) {
                continue;
            }
            if best.as_ref().map_or(true, |(l, _, _)| len < *l) {
                best = Some((len, lam.as_slice().to_vec(), res.norm().max(mismatch)));
            }
        }
    }
    let (len, lam, resid) = best.ok_or_else(|| {
        Error::NoPathFound(format!(
            "{} starts x {} Newton steps from {:?} to {:?}",
            opts.starts, opts.max_newton, x, y
        ))
    })?;
    let (_, controls, _) = dynamics.integrate(x, &lam, opts.steps, true);
    let step_count = opts.steps as f64;
    let speed_max = controls
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    // allowance for bridging the endpoint residual
    let upper = len.max(speed_max) + resid.sqrt();
    let controls: Vec<Vec<f64>> = controls
        .into_iter()
        .map(|u| u.iter().map(|v| v / speed_max.max(1e-300)).collect())
        .collect();
    let path = SubUnitPath {
        start: x.to_vec(),
        timestep: speed_max / step_count,
        controls,
    };
    let lower = lower_bound(sys, x, y, upper);
    Ok(DistanceBracket {
        lower: lower.min(upper),
        upper,
        path: Some(path),
    })
}

/// Lower bound from the reach enclosure: `y` must lie in `box(x, d)`, and
/// `|y - x| <= d · sup ‖B‖` over that box.
pub(crate) fn lower_bound(sys: &VectorFieldSystem, x: &[f64], y: &[f64], upper: f64) -> f64 {
    let steps = 4096;
    let enc = ReachEnclosure::new(sys, x);
    let traj = enc.trajectory_with(upper, steps, 1.0);
    let dt = upper / steps as f64;
    let mut reach = upper;
    for (i, w) in traj.iter().enumerate() {
        if x.iter().zip(y).zip(w).all(|((a, b), wk)| (a - b).abs() <= *wk) {
            reach = (i as f64 - 1.0).max(0.0) * dt;
            break;
        }
    }
    let rows = enc.row_bounds(traj.last().unwrap());
    let op = rows.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lin = if op > 0.0 { euclid(x, y) / op } else { 0.0 };
    reach.max(lin)
}

/// Shooting-based oracle for general systems.
pub struct ShootingDistance {
    sys: VectorFieldSystem,
    dynamics: Dynamics,
    opts: ShootingOptions,
}

impl ShootingDistance {
    pub fn new(sys: VectorFieldSystem, opts: ShootingOptions) -> Self {
        let dynamics = Dynamics::new(&sys);
        ShootingDistance {
            sys,
            dynamics,
            opts,
        }
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<DistanceBracket> {
        shoot(&self.sys, &self.dynamics, x, y, &self.opts)
    }
}

impl DistanceOracle for ShootingDistance {
    fn ambient_dim(&self) -> usize {
        self.sys.ambient_dim()
    }

    fn bracket(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        let d = self.distance(x, y)?;
        Ok((d.lower, d.upper))
    }

    fn reach_box(&self, x: &[f64], r: f64) -> Vec<f64> {
        super::reach_box(&self.sys, x, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::HTypeGroup;
    use crate::metric::HTypeDistance;

    #[test]
    fn euclidean_distance_is_recovered() {
        let sys = VectorFieldSystem::builtin("euclidean3").unwrap();
        let d = cc_distance(&sys, &[0.0; 3], &[1.0, 0.0, 0.0], &ShootingOptions::default()).unwrap();
        assert!((d.upper - 1.0).abs() < 1e-3);
        assert!((d.lower - 1.0).abs() < 1e-3);
        let path = d.path.unwrap();
        assert!(path.controls.iter().all(|u| u.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12));
    }

    #[test]
    fn grushin_horizontal_segment() {
        let sys = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let d = cc_distance(&sys, &[0.0; 3], &[1.0, 0.0, 0.0], &ShootingOptions::default()).unwrap();
        assert!((d.upper - 1.0).abs() < 1e-3, "{:?}", (d.lower, d.upper));
        assert!((d.lower - 1.0).abs() < 1e-3);
    }

    #[test]
    fn heisenberg_shooting_matches_exact_distance() {
        let g = HTypeGroup::new(1, 1).unwrap();
        let exact = HTypeDistance::new(g.clone());
        let shoot = ShootingDistance::new(g.system(), ShootingOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..15 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let e = exact.distance(&a, &b);
            let s = shoot.distance(&a, &b).unwrap();
            assert!(s.lower <= e + 1e-9, "lower {} > exact {}", s.lower, e);
            assert!(s.upper >= e - 1e-6, "upper {} < exact {}", s.upper, e);
            assert!(s.upper <= e * 1.02 + 1e-6, "upper {} vs exact {}", s.upper, e);
        }
    }
}
