//! Explicit fundamental solutions of H-type groups, the profile `E(x, r)`
//! and the pseudo-distance `ρ_x = F(x, 1/Γ)`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::HTypeDistance;
use crate::error::{Error, Result};
use crate::frames::{CommutatorBasis, HTypeGroup};
use crate::nsw::{nsw_profile, NswProfile};

const OMEGA_SAMPLES: usize = 1_000_000;
const OMEGA_SEED: u64 = 0x6f6d_6567_61;
const BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OmegaSigma {
    /// `ω_p = ∫_{N<1} |XN|^p`.
    pub omega: f64,
    /// `σ_p = Q ω_p`.
    pub sigma: f64,
    /// 95% half-width of `omega`.
    pub half_width: f64,
    /// Volume of `{N < 1}` from the same samples.
    pub unit_volume: f64,
}

/// Monte-Carlo `ω_p` over the box `[-1,1]^{2k} × [-1/4,1/4]^q ⊇ {N < 1}`.
pub fn omega_sigma(group: &HTypeGroup, p: f64, n_samples: usize, seed: u64) -> Result<OmegaSigma> {
    if !(p > 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p} must exceed 1")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let m = group.horiz_dim();
    let dim = group.dim();
    let box_vol = 2f64.powi(m as i32) * 0.5f64.powi(group.center_dim() as i32);
    let blocks = n_samples.div_ceil(BLOCK);
    let sums: Vec<(f64, f64, u64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let take = BLOCK.min(n_samples - b * BLOCK);
            let mut g = vec![0.0; dim];
            let (mut s, mut s2, mut inside) = (0.0, 0.0, 0u64);
            for _ in 0..take {
                for (i, v) in g.iter_mut().enumerate() {
                    let w = if i < m { 1.0 } else { 0.25 };
                    *v = w * (2.0 * rng.gen::<f64>() - 1.0);
                }
                let nn = group.kaplan_gauge(&g);
                if nn < 1.0 && nn > 0.0 {
                    let x2: f64 = g[..m].iter().map(|v| v * v).sum();
                    let f = (x2.sqrt() / nn).powf(p);
                    s += f;
                    s2 += f * f;
                    inside += 1;
                }
            }
            (s, s2, inside)
        })
        .collect();
    let (mut s, mut s2, mut inside) = (0.0, 0.0, 0u64);
    for (a, b, c) in sums {
        s += a;
        s2 += b;
        inside += c;
    }
    let nf = n_samples as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    let omega = box_vol * mean;
    Ok(OmegaSigma {
        omega,
        sigma: group.homogeneous_dim() * omega,
        half_width: 1.96 * box_vol * (var / nf).sqrt(),
        unit_volume: box_vol * inside as f64 / nf,
    })
}

/// `ω_p` at 10⁶ samples, computed once per `(k, q, p)`.
pub fn omega_sigma_cached(group: &HTypeGroup, p: f64) -> Result<OmegaSigma> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), OmegaSigma>>> = OnceLock::new();
    let key = (group.k(), group.center_dim(), p.to_bits());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&key) {
        return Ok(*v);
    }
    let v = omega_sigma(group, p, OMEGA_SAMPLES, OMEGA_SEED)?;
    cache.lock().unwrap().insert(key, v);
    Ok(v)
}

/// `Γ_p(g)` with pole at the identity.
pub fn fundamental_solution(group: &HTypeGroup, p: f64, g: &[f64]) -> Result<f64> {
    let nn = group.kaplan_gauge(g);
    if nn == 0.0 {
        return Err(Error::Singularity);
    }
    let q = group.homogeneous_dim();
    let sigma = omega_sigma_cached(group, p)?.sigma;
    if (p - q).abs() < 1e-12 {
        Ok(sigma.powf(-1.0 / (q - 1.0)) * nn.ln())
    } else {
        Ok((p - 1.0) / (q - p) * sigma.powf(-1.0 / (p - 1.0)) * nn.powf(-(q - p) / (p - 1.0)))
    }
}

/// `|XΓ_p(g)|` from the closed form.
fn fundamental_solution_hgrad(group: &HTypeGroup, p: f64, g: &[f64]) -> Result<f64> {
    let nn = group.kaplan_gauge(g);
    let xn = group.gauge_hgrad_sq(g)?.sqrt();
    let q = group.homogeneous_dim();
    let sigma = omega_sigma_cached(group, p)?.sigma;
    let dn = if (p - q).abs() < 1e-12 {
        sigma.powf(-1.0 / (q - 1.0)) / nn
    } else {
        sigma.powf(-1.0 / (p - 1.0)) * nn.powf(-(q - p) / (p - 1.0) - 1.0)
    };
    Ok(dn * xn)
}

/// `E(x, r) = (Λ(x,r)/r^p)^{1/(p-1)}` with its inverse `F(x, ·)`.
#[derive(Clone, Debug, Serialize)]
pub struct GaugeProfile {
    pub base_point: Vec<f64>,
    pub p: f64,
    pub lambda: NswProfile,
    pub r0: f64,
}

impl GaugeProfile {
    fn monomial(&self) -> Option<(f64, f64)> {
        match self.lambda.terms.as_slice() {
            [(c, d)] => Some((c.powf(1.0 / (self.p - 1.0)), (*d as f64 - self.p) / (self.p - 1.0))),
            _ => None,
        }
    }

    pub fn e(&self, r: f64) -> f64 {
        (self.lambda.lambda(r) / r.powf(self.p)).powf(1.0 / (self.p - 1.0))
    }

    /// `E'(x,r) / E(x,r)`.
    pub fn log_derivative(&self, r: f64) -> f64 {
        let l = &self.lambda;
        (l.lambda_deriv(r) / l.lambda(r) - self.p / r) / (self.p - 1.0)
    }

    /// `(ω, α)` with `E = ω r^α` when `Λ` is a monomial.
    pub fn monomial_form(&self) -> Option<(f64, f64)> {
        self.monomial()
    }

    /// Inverse of `E(x, ·)`.
    pub fn f(&self, s: f64) -> f64 {
        if !(s > 0.0) {
            return 0.0;
        }
        if let Some((w, a)) = self.monomial() {
            return (s / w).powf(1.0 / a);
        }
        let mut lo = 1e-8;
        let mut hi = 10.0 * self.r0;
        while self.e(lo) > s && lo > 1e-300 {
            lo *= 0.5;
        }
        while self.e(hi) < s && hi < 1e300 {
            hi *= 2.0;
        }
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            if self.e(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Profile from the NSW polynomial at `x`.
pub fn gauge_profile(basis: &CommutatorBasis, x: &[f64], p: f64, r0: f64) -> Result<GaugeProfile> {
    let lambda = nsw_profile(basis, x)?;
    if !(p > 1.0) || p >= lambda.q_at_x as f64 {
        return Err(Error::ExponentViolation {
            p,
            q: lambda.q_at_x as f64,
        });
    }
    Ok(GaugeProfile {
        base_point: x.to_vec(),
        p,
        lambda,
        r0,
    })
}

/// Carnot-group profile: `Λ = C r^Q`, so `E = ω r^{(Q-p)/(p-1)}` at every
/// point.
pub fn gauge_profile_group(group: &HTypeGroup, p: f64) -> Result<GaugeProfile> {
    let sys = group.system();
    let id = group.identity();
    let basis = sys.build_commutator_basis(&[id.clone()], 2)?;
    let prof = gauge_profile(&basis, &id, p, sys.r0())?;
    debug_assert_eq!(prof.lambda.terms.len(), 1);
    Ok(prof)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RhoValue {
    pub rho: f64,
    /// `ρ_x(y) / N(x⁻¹y)`, constant in a Carnot group.
    pub gauge_ratio: f64,
}

/// `ρ_x(y) = F(x, 1/Γ_p(x⁻¹y))`.
pub fn rho_gauge(group: &HTypeGroup, profile: &GaugeProfile, x: &[f64], y: &[f64]) -> Result<RhoValue> {
    let rel = group.product(&group.inverse(x), y);
    let nn = group.kaplan_gauge(&rel);
    let gamma = fundamental_solution(group, profile.p, &rel)?;
    if !(gamma > 0.0) {
        return Err(Error::ExponentViolation {
            p: profile.p,
            q: group.homogeneous_dim(),
        });
    }
    let rho = profile.f(1.0 / gamma);
    Ok(RhoValue {
        rho,
        gauge_ratio: rho / nn,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    /// `(shell radius, max |XΓ_p| / (d/Λ(d))^{1/(p-1)})`.
    pub shells: Vec<(f64, f64)>,
    /// Ratio of the largest to the smallest shell constant.
    pub spread: f64,
}

/// Largest `|XΓ_p| (Λ(d)/d)^{1/(p-1)}` over random points at exact
/// distance `r` from the identity, per shell.
pub fn hypothesis_check(group: &HTypeGroup, p: f64, shells: &[f64], per_shell: usize, seed: u64) -> Result<HypothesisReport> {
    let profile = gauge_profile_group(group, p)?;
    let dist = HTypeDistance::new(group.clone());
    let id = group.identity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &r in shells {
        let mut c = 0.0f64;
        for _ in 0..per_shell {
            let g: Vec<f64> = (0..group.dim()).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
            let d0 = dist.distance(&id, &g);
            if d0 == 0.0 {
                continue;
            }
            let g = group.dilate(r / d0, &g);
            let d = dist.distance(&id, &g);
            let scale = (d / profile.lambda.lambda(d)).powf(1.0 / (p - 1.0));
            c = c.max(fundamental_solution_hgrad(group, p, &g)? / scale);
        }
        out.push((r, c));
    }
    let hi = out.iter().map(|s| s.1).fold(0.0, f64::max);
    let lo = out.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    Ok(HypothesisReport {
        shells: out,
        spread: hi / lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heis() -> HTypeGroup {
        HTypeGroup::new(1, 1).unwrap()
    }

    #[test]
    fn fundamental_solution_scaling() {
        let g = heis();
        let a = fundamental_solution(&g, 2.0, &[1.0, 0.0, 0.0]).unwrap();
        let b = fundamental_solution(&g, 2.0, &[2.0, 0.0, 0.0]).unwrap();
        assert!((b - a / 4.0).abs() < 1e-14 * a);
        assert_eq!(fundamental_solution(&g, 4.0, &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let pt = [0.3, -0.7, 0.2];
        let p = 3.0;
        let s = fundamental_solution(&g, p, &g.dilate(1.7, &pt)).unwrap();
        let t = fundamental_solution(&g, p, &pt).unwrap();
        assert!((s - 1.7f64.powf(-(4.0 - p) / (p - 1.0)) * t).abs() < 1e-12 * t);
        assert!(matches!(fundamental_solution(&g, 2.0, &[0.0; 3]), Err(Error::Singularity)));
    }

    #[test]
    fn omega_bounds() {
        let g = heis();
        let a = omega_sigma(&g, 1.5, 100_000, 3).unwrap();
        let b = omega_sigma(&g, 3.0, 100_000, 3).unwrap();
        assert!(a.omega <= a.unit_volume);
        assert!(b.omega <= a.omega);
        let again = omega_sigma(&g, 1.5, 100_000, 3).unwrap();
        assert_eq!(a.omega.to_bits(), again.omega.to_bits());
    }

    #[test]
    fn profile_inverse_and_bracket() {
        let g = heis();
        let prof = gauge_profile_group(&g, 2.0).unwrap();
        let (w, a) = prof.monomial_form().unwrap();
        assert!((a - 2.0).abs() < 1e-15);
        for &r in &[1e-3, 0.1, 0.7, 3.0] {
            assert!((prof.e(r) - w * r * r).abs() < 1e-12 * prof.e(r));
            assert!((prof.f(prof.e(r)) - r).abs() < 1e-10 * r);
            assert!((prof.log_derivative(r) - 2.0 / r).abs() < 1e-12 / r);
        }
        assert!(matches!(gauge_profile_group(&g, 4.0), Err(Error::ExponentViolation { .. })));
    }

    #[test]
    fn general_profile_bisection() {
        let sys = crate::frames::VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let b = sys.build_commutator_basis(&[vec![0.0; 3]], 2).unwrap();
        let prof = gauge_profile(&b, &[0.4, 0.0, 0.0], 2.0, 1.0).unwrap();
        for &r in &[1e-4, 0.01, 0.5, 2.0] {
            assert!((prof.f(prof.e(r)) - r).abs() < 1e-10 * r);
            let ld = prof.log_derivative(r) * r;
            assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&ld));
        }
    }

    #[test]
    fn rho_is_a_multiple_of_the_gauge() {
        let g = heis();
        let prof = gauge_profile_group(&g, 2.0).unwrap();
        let x = [0.2, 0.1, -0.3];
        let first = rho_gauge(&g, &prof, &x, &[1.0, 0.5, 0.5]).unwrap().gauge_ratio;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let y: Vec<f64> = (0..3).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
            let v = rho_gauge(&g, &prof, &x, &y).unwrap();
            assert!((v.gauge_ratio - first).abs() < 1e-9 * first);
        }
    }

    #[test]
    fn hypothesis_constant_is_stable() {
        let g = heis();
        let rep = hypothesis_check(&g, 2.0, &[0.25, 0.5], 200, 4).unwrap();
        assert!(rep.shells.iter().all(|s| s.1.is_finite() && s.1 > 0.0));
        assert!(rep.spread < 1.5);
    }
}
