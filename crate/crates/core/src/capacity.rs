//! Variational p-capacity, uniform fatness certificates and Wolff potentials.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frames::VectorFieldSystem;
use crate::grid::{component_of, energy_and_grad, p_energy, GridDomain, GridFunction, Lattice};
use crate::metric::{DistanceOracle, EuclideanDistance, HTypeDistance, SourceField};

#[derive(Clone, Debug)]
pub struct CapacityOptions {
    /// Iteration budget per ε stage.
    pub max_iter: usize,
    /// ε values relative to the characteristic gradient scale.
    pub eps_schedule: Vec<f64>,
    /// Stop when the energy dropped by less than `rel_tol` (relative) over
    /// the last `window` iterations.
    pub window: usize,
    pub rel_tol: f64,
    /// Lattice cells per radius for local condensers.
    pub cells_per_radius: usize,
    /// Solve on the every-other-node sublattice first when the domain has
    /// more inside cells than this.
    pub multilevel_above: usize,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        CapacityOptions {
            max_iter: 20_000,
            eps_schedule: vec![1e-1, 1e-2, 1e-3, 1e-4],
            window: 50,
            rel_tol: 1e-6,
            cells_per_radius: 8,
            multilevel_above: 20_000,
        }
    }
}

/// Plate `K` of a condenser `(K, Ω)`, as a mask on the domain lattice.
#[derive(Clone, Debug)]
pub struct Condenser {
    pub k: Vec<bool>,
}

impl Condenser {
    pub fn new(domain: &GridDomain, k: Vec<bool>) -> Result<Self> {
        if k.len() != domain.lattice().len() {
            return Err(Error::InvalidArgument("plate mask does not match the lattice".into()));
        }
        if k.iter().zip(domain.inside()).any(|(&a, &b)| a && !b) {
            return Err(Error::InvalidArgument("plate must lie inside the domain".into()));
        }
        Ok(Condenser { k })
    }

    /// Plate of the inside cells where `f` holds.
    pub fn from_fn(domain: &GridDomain, f: impl Fn(&[f64]) -> bool) -> Self {
        let mut k = vec![false; domain.lattice().len()];
        for &i in domain.inside_cells() {
            k[i] = f(&domain.coords(i));
        }
        Condenser { k }
    }

    pub fn is_empty(&self) -> bool {
        !self.k.iter().any(|&v| v)
    }
}

#[derive(Clone, Debug)]
pub struct CapacityResult {
    pub value: f64,
    pub minimizer: GridFunction,
    pub iterations: usize,
    pub final_decrement: f64,
    pub eps: f64,
}

struct Stage {
    iterations: usize,
    decrement: f64,
    converged: bool,
}

fn dot(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| a[i] * b[i]).sum()
}

/// Projected Polak–Ribière conjugate gradient on the free cells, values
/// clamped to `[0, 1]`.
fn minimize(
    domain: &GridDomain,
    u: &mut [f64],
    free: &[usize],
    p: f64,
    eps: f64,
    opts: &CapacityOptions,
) -> Stage {
    let len = u.len();
    let quadratic = p == 2.0 && eps == 0.0;
    let mut g = vec![0.0; len];
    let mut e = energy_and_grad(domain, u, p, eps, Some(&mut g));
    let mut d = vec![0.0; len];
    for &i in free {
        d[i] = -g[i];
    }
    let mut history = vec![e];
    let mut trial = u.to_vec();
    let mut g_trial = vec![0.0; len];
    let mut step = 0.0f64;
    let mut decrement = f64::INFINITY;
    for it in 0..opts.max_iter {
        let gg = dot(&g, &g, free);
        if gg == 0.0 || e == 0.0 {
            return Stage { iterations: it, decrement: 0.0, converged: true };
        }
        let mut gd = dot(&g, &d, free);
        if gd >= 0.0 {
            for &i in free {
                d[i] = -g[i];
            }
            gd = -gg;
        }
        let (alpha, e_new) = if quadratic {
            let curv = energy_and_grad(domain, &d, 2.0, 0.0, None);
            if curv <= 0.0 {
                return Stage { iterations: it, decrement: 0.0, converged: true };
            }
            let a = -gd / (2.0 * curv);
            for &i in free {
                trial[i] = u[i] + a * d[i];
            }
            (a, energy_and_grad(domain, &trial, p, eps, Some(&mut g_trial)))
        } else {
            let dnorm = dot(&d, &d, free).sqrt();
            let mut a = if step > 0.0 { step } else { 0.1 * domain.h() / dnorm.max(1e-300) };
            let (mut a_lo, mut s_lo) = (0.0, gd);
            let mut hi: Option<(f64, f64)> = None;
            let mut e_a = e;
            let eval = |a: f64, trial: &mut [f64], g_trial: &mut [f64]| {
                for &i in free {
                    trial[i] = u[i] + a * d[i];
                }
                let ea = energy_and_grad(domain, trial, p, eps, Some(g_trial));
                (ea, dot(g_trial, &d, free))
            };
            for _ in 0..60 {
                let (ea, s) = eval(a, &mut trial, &mut g_trial);
                e_a = ea;
                if s < 0.0 && ea <= e {
                    a_lo = a;
                    s_lo = s;
                    a *= 2.0;
                } else {
                    hi = Some((a, s));
                    break;
                }
            }
            if let Some((mut a_hi, mut s_hi)) = hi {
                for _ in 0..8 {
                    let denom = s_hi - s_lo;
                    a = if denom > 0.0 && s_hi.is_finite() {
                        (a_lo - s_lo * (a_hi - a_lo) / denom).clamp(
                            a_lo + 0.05 * (a_hi - a_lo),
                            a_hi - 0.05 * (a_hi - a_lo),
                        )
                    } else {
                        0.5 * (a_lo + a_hi)
                    };
                    let (ea, s) = eval(a, &mut trial, &mut g_trial);
                    e_a = ea;
                    if s.abs() <= 0.1 * gd.abs() && ea <= e {
                        break;
                    }
                    if s < 0.0 && ea <= e {
                        a_lo = a;
                        s_lo = s;
                    } else {
                        a_hi = a;
                        s_hi = s;
                    }
                }
                if e_a > e {
                    a = a_lo;
                    let (ea, _) = eval(a, &mut trial, &mut g_trial);
                    e_a = ea;
                }
            }
            step = a;
            (a, e_a)
        };
        let mut clamped = false;
        for &i in free {
            let v = trial[i];
            if !(0.0..=1.0).contains(&v) {
                trial[i] = v.clamp(0.0, 1.0);
                clamped = true;
            }
        }
        let e_new = if clamped {
            energy_and_grad(domain, &trial, p, eps, Some(&mut g_trial))
        } else {
            e_new
        };
        if alpha == 0.0 || e_new > e {
            // no progress along d: fall back to steepest descent once
            if dot(&g, &d, free) == -gg {
                return Stage { iterations: it, decrement: 0.0, converged: true };
            }
            for &i in free {
                d[i] = -g[i];
            }
            continue;
        }
        for &i in free {
            u[i] = trial[i];
        }
        let beta = if clamped {
            0.0
        } else {
            let num: f64 = free.iter().map(|&i| g_trial[i] * (g_trial[i] - g[i])).sum();
            (num / gg).max(0.0)
        };
        for &i in free {
            d[i] = -g_trial[i] + beta * d[i];
        }
        std::mem::swap(&mut g, &mut g_trial);
        e = e_new;
        history.push(e);
        let k = history.len() - 1;
        if k >= opts.window {
            let prev = history[k - opts.window];
            decrement = (prev - e) / e.abs().max(1e-300);
            if decrement < opts.rel_tol {
                return Stage { iterations: it + 1, decrement, converged: true };
            }
        }
    }
    Stage {
        iterations: opts.max_iter,
        decrement,
        converged: false,
    }
}

/// Every-other-node sublattice of an odd-sized lattice.
fn coarse_problem(domain: &GridDomain, k: &[bool]) -> Option<(GridDomain, Vec<bool>, Vec<usize>)> {
    let lat = domain.lattice();
    if lat.dims().iter().any(|&d| d % 2 == 0 || d < 9) {
        return None;
    }
    let dims: Vec<usize> = lat.dims().iter().map(|d| (d + 1) / 2).collect();
    let spacing: Vec<f64> = lat.spacing().iter().map(|h| 2.0 * h).collect();
    let coarse = Lattice::new(dims, spacing, lat.origin().to_vec()).ok()?;
    let map: Vec<usize> = (0..coarse.len())
        .map(|j| {
            let mi: Vec<usize> = coarse.multi_index(j).iter().map(|v| 2 * v).collect();
            lat.linear(&mi)
        })
        .collect();
    let inside: Vec<bool> = map.iter().map(|&i| domain.inside()[i]).collect();
    let kc: Vec<bool> = map.iter().map(|&i| k[i] && domain.inside()[i]).collect();
    if !kc.iter().any(|&v| v) {
        return None;
    }
    let cd = GridDomain::from_mask(coarse, inside, domain.system(), None).ok()?;
    Some((cd, kc, map))
}

fn solve(domain: &GridDomain, k: &[bool], p: f64, opts: &CapacityOptions) -> Result<CapacityResult> {
    let len = domain.lattice().len();
    let mut u = vec![0.0; len];
    let mut free = Vec::new();
    for &i in domain.inside_cells() {
        if k[i] {
            u[i] = 1.0;
        } else {
            free.push(i);
        }
    }
    let mut iterations = 0;
    if domain.inside_cells().len() > opts.multilevel_above {
        if let Some((cd, kc, _)) = coarse_problem(domain, k) {
            let coarse = solve(&cd, &kc, p, opts)?;
            iterations += coarse.iterations;
            let mut x = vec![0.0; domain.lattice().ndim()];
            for &i in &free {
                domain.lattice().coords_into(i, &mut x);
                if let Some(v) = cd.lattice().interpolate(&coarse.minimizer.values, &x) {
                    u[i] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    // characteristic gradient scale: unit drop across the domain
    let scale = 1.0 / domain.diameter().max(domain.h());
    let schedule: Vec<f64> = if p == 2.0 {
        vec![0.0]
    } else {
        opts.eps_schedule.iter().map(|e| e * scale).collect()
    };
    let mut last = Stage {
        iterations: 0,
        decrement: 0.0,
        converged: true,
    };
    let mut eps = 0.0;
    for &e in &schedule {
        eps = e;
        last = minimize(domain, &mut u, &free, p, e, opts);
        iterations += last.iterations;
    }
    if !last.converged {
        return Err(Error::NonConvergence {
            what: "p-capacity",
            detail: format!(
                "relative decrement {:e} after {} iterations",
                last.decrement, opts.max_iter
            ),
        });
    }
    Ok(CapacityResult {
        value: p_energy(domain, &u, p).max(0.0),
        minimizer: GridFunction { values: u },
        iterations,
        final_decrement: last.decrement,
        eps,
    })
}

/// Upper estimate of `cap_p(K, Ω)` with `Ω` the domain's inside cells.
pub fn p_capacity(
    domain: &GridDomain,
    condenser: &Condenser,
    p: f64,
    opts: &CapacityOptions,
) -> Result<CapacityResult> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("capacity needs p > 1, got {p}")));
    }
    if condenser.k.len() != domain.lattice().len() {
        return Err(Error::InvalidArgument("plate mask does not match the lattice".into()));
    }
    if condenser.is_empty() {
        return Ok(CapacityResult {
            value: 0.0,
            minimizer: GridFunction::zeros(domain),
            iterations: 0,
            final_decrement: 0.0,
            eps: 0.0,
        });
    }
    solve(domain, &condenser.k, p, opts)
}

/// Exact oracle for Euclidean and H-type frames, a two-resolution source
/// field otherwise.
pub fn local_oracle(sys: &VectorFieldSystem, x: &[f64], r: f64) -> Result<Box<dyn DistanceOracle>> {
    if sys.is_euclidean() {
        Ok(Box::new(EuclideanDistance {
            n: sys.ambient_dim(),
        }))
    } else if let Some(g) = sys.group() {
        Ok(Box::new(HTypeDistance::new(g.clone())))
    } else {
        Ok(Box::new(SourceField::new(sys, x, r, 16, 24)?))
    }
}

/// Condenser `(plate, B(x, outer))` on a lattice fitted to the reach box of
/// `B(x, outer)` with `cells` nodes per `inner` along every axis. The plate
/// is `B̄(x, inner) ∩ {extra}`.
pub struct LocalCondenser {
    pub domain: GridDomain,
    pub plate: Condenser,
    /// `h^n` times the number of cells of `B(x, inner)`.
    pub ball_volume: f64,
}

pub fn local_condenser(
    sys: &VectorFieldSystem,
    oracle: &dyn DistanceOracle,
    x: &[f64],
    inner: f64,
    outer: f64,
    cells: usize,
    extra: Option<&(dyn Fn(&[f64]) -> bool + Sync)>,
) -> Result<LocalCondenser> {
    if !(inner > 0.0 && outer > inner) {
        return Err(Error::InvalidArgument("need 0 < inner < outer".into()));
    }
    let n = sys.ambient_dim();
    let w = oracle.reach_box(x, outer);
    let inner_w = oracle.reach_box(x, inner);
    let spacing: Vec<f64> = inner_w.iter().map(|v| v / cells as f64).collect();
    let half: Vec<usize> = (0..n)
        .map(|k| (w[k] / spacing[k] - 1e-9).ceil() as usize + 2)
        .collect();
    let lattice = Lattice::centered(x, &half, &spacing)?;
    let dist: Vec<f64> = (0..lattice.len())
        .into_par_iter()
        .map(|i| oracle.midpoint(x, &lattice.coords(i)))
        .collect();
    let inside: Vec<bool> = dist.iter().map(|&d| d < outer).collect();
    // coarse cells can cut thin tips of the ball off; keep the part around x
    let center = lattice.linear(&half);
    let inside = component_of(&lattice, &inside, center);
    let domain = GridDomain::from_mask(lattice, inside, sys, None)?;
    let mut plate = vec![false; dist.len()];
    let mut count = 0usize;
    for &i in domain.inside_cells() {
        if dist[i] <= inner {
            count += 1;
            plate[i] = extra.map_or(true, |f| f(&domain.coords(i)));
        }
    }
    let ball_volume = count as f64 * domain.lattice().cell_volume();
    Ok(LocalCondenser {
        domain,
        plate: Condenser { k: plate },
        ball_volume,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnulusRow {
    pub r: f64,
    pub capacity: f64,
    pub volume: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnulusReport {
    pub rows: Vec<AnnulusRow>,
    /// max ratio / min ratio across the radii.
    pub spread: f64,
    /// `spread <= 4`.
    pub stable: bool,
}

/// `cap_p(B̄(x,r), B(x,2r)) / (|B(x,r)| r^{-p})` at `r, r/2, r/4`.
pub fn annulus_check(
    sys: &VectorFieldSystem,
    x: &[f64],
    r: f64,
    p: f64,
    opts: &CapacityOptions,
) -> Result<AnnulusReport> {
    if r > 0.5 * sys.r0() * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("r = {r} exceeds r0/2")));
    }
    let mut rows = Vec::new();
    for rr in [r, r / 2.0, r / 4.0] {
        let oracle = local_oracle(sys, x, 2.0 * rr)?;
        let lc = local_condenser(sys, oracle.as_ref(), x, rr, 2.0 * rr, opts.cells_per_radius, None)?;
        let cap = p_capacity(&lc.domain, &lc.plate, p, opts)?.value;
        let ratio = cap / (lc.ball_volume * rr.powf(-p));
        rows.push(AnnulusRow {
            r: rr,
            capacity: cap,
            volume: lc.ball_volume,
            ratio,
        });
    }
    let lo = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let spread = hi / lo;
    Ok(AnnulusReport {
        rows,
        spread,
        stable: spread <= 4.0,
    })
}

/// Farthest-point sample of the boundary band, started from the band cell
/// with the largest first coordinate.
pub fn boundary_samples(domain: &GridDomain, count: usize) -> Vec<Vec<f64>> {
    let band = domain.band_cells();
    if band.is_empty() || count == 0 {
        return Vec::new();
    }
    let pts: Vec<Vec<f64>> = band.iter().map(|&i| domain.coords(i)).collect();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut first = 0;
    for (j, p) in pts.iter().enumerate() {
        if p[0] > pts[first][0] {
            first = j;
        }
    }
    let mut chosen = vec![first];
    let mut near: Vec<f64> = pts.iter().map(|p| d2(p, &pts[first])).collect();
    while chosen.len() < count.min(pts.len()) {
        let (j, _) = near
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) });
        chosen.push(j);
        for (k, p) in pts.iter().enumerate() {
            near[k] = near[k].min(d2(p, &pts[j]));
        }
    }
    chosen.into_iter().map(|j| pts[j].clone()).collect()
}

/// Whether `y` lies in the complement of the domain.
pub fn in_complement(domain: &GridDomain, y: &[f64]) -> bool {
    match domain.shape() {
        Some(s) => !s.contains(y, domain.system().group()),
        None => match domain.lattice().nearest_index(y) {
            Some(i) => !domain.inside()[i],
            None => true,
        },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FatnessRow {
    pub point: Vec<f64>,
    pub r: f64,
    pub complement_capacity: f64,
    pub ball_capacity: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FatnessCertificate {
    pub p: f64,
    pub c0: f64,
    pub r0: f64,
    pub table: Vec<FatnessRow>,
}

/// `cap_p((Rⁿ∖Ω) ∩ B̄(w,r), B(w,2r)) / cap_p(B̄(w,r), B(w,2r))` over the
/// samples and radii; `c0` is the minimum.
pub fn fatness_scan(
    domain: &GridDomain,
    p: f64,
    samples: &[Vec<f64>],
    radii: &[f64],
    opts: &CapacityOptions,
) -> Result<FatnessCertificate> {
    let sys = domain.system();
    let r0 = domain.params().r0;
    if let Some(&r) = radii.iter().find(|&&r| !(r > 0.0) || r > r0 * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!("fatness radius {r} outside (0, r0]")));
    }
    let jobs: Vec<(usize, f64)> = (0..samples.len())
        .flat_map(|s| radii.iter().map(move |&r| (s, r)))
        .collect();
    let complement = |y: &[f64]| in_complement(domain, y);
    let table = jobs
        .par_iter()
        .map(|&(s, r)| {
            let w = &samples[s];
            let oracle = local_oracle(sys, w, 2.0 * r)?;
            let full = local_condenser(sys, oracle.as_ref(), w, r, 2.0 * r, opts.cells_per_radius, None)?;
            let ball_capacity = p_capacity(&full.domain, &full.plate, p, opts)?.value;
            let part = Condenser {
                k: full
                    .plate
                    .k
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v && complement(&full.domain.coords(i)))
                    .collect(),
            };
            let complement_capacity = p_capacity(&full.domain, &part, p, opts)?.value;
            Ok(FatnessRow {
                point: w.clone(),
                r,
                complement_capacity,
                ball_capacity,
                ratio: if ball_capacity > 0.0 {
                    complement_capacity / ball_capacity
                } else {
                    0.0
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c0 = table.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    Ok(FatnessCertificate {
        p,
        c0: if table.is_empty() { 0.0 } else { c0 },
        r0,
        table,
    })
}

/// Default fatness radii: three dyadic radii below `min(r0, diam/4)`.
pub fn default_fatness_radii(domain: &GridDomain) -> Vec<f64> {
    let top = domain.params().r0.min(domain.diameter() / 4.0);
    vec![top, top / 2.0, top / 4.0]
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfImprovement {
    pub p: f64,
    /// `(q, c(q))`.
    pub table: Vec<(f64, f64)>,
    /// Smallest listed `q` with `c(q) > 0` at all samples.
    pub smallest_q: Option<f64>,
}

pub fn self_improvement(
    domain: &GridDomain,
    p: f64,
    qs: &[f64],
    samples: &[Vec<f64>],
    radii: &[f64],
    opts: &CapacityOptions,
) -> Result<SelfImprovement> {
    if let Some(&q) = qs.iter().find(|&&q| !(q > 1.0 && q <= p)) {
        return Err(Error::InvalidArgument(format!("self-improvement exponent {q} outside (1, p]")));
    }
    let mut table = Vec::new();
    for &q in qs {
        let cert = fatness_scan(domain, q, samples, radii, opts)?;
        table.push((q, cert.c0));
    }
    let smallest_q = table
        .iter()
        .filter(|(_, c)| *c > 0.0)
        .map(|(q, _)| *q)
        .fold(None, |acc: Option<f64>, q| Some(acc.map_or(q, |a| a.min(q))));
    Ok(SelfImprovement { p, table, smallest_q })
}

/// Finite nonnegative point masses.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DiscreteMeasure {
    pub atoms: Vec<(Vec<f64>, f64)>,
}

impl DiscreteMeasure {
    pub fn dirac(x: &[f64]) -> Self {
        DiscreteMeasure {
            atoms: vec![(x.to_vec(), 1.0)],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        DiscreteMeasure {
            atoms: self.atoms.iter().map(|(x, w)| (x.clone(), w * s)).collect(),
        }
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// `W_p^R μ(x) = ∫_{t_min}^R [μ(B(x,t)) t^p / |B(x,t)|]^{1/(p-1)} dt/t` by
/// Gauss–Legendre quadrature in `log t` on dyadic intervals, split at the
/// atom distances so the integrand is smooth on every piece.
pub fn wolff(
    measure: &DiscreteMeasure,
    x: &[f64],
    big_r: f64,
    p: f64,
    t_min: f64,
    oracle: &dyn DistanceOracle,
    volume: &dyn Fn(&[f64], f64) -> f64,
) -> Result<f64> {
    if !(big_r > 0.0) || !(p > 1.0) || !(t_min > 0.0) {
        return Err(Error::InvalidArgument("wolff needs R > 0, p > 1, t_min > 0".into()));
    }
    if measure.atoms.iter().any(|a| !(a.1 >= 0.0) || !a.1.is_finite()) {
        return Err(Error::InvalidArgument("measure weights must be finite and nonnegative".into()));
    }
    let atoms: Vec<(f64, f64)> = measure
        .atoms
        .iter()
        .filter(|a| a.1 > 0.0)
        .map(|(y, w)| (oracle.midpoint(x, y), *w))
        .collect();
    if atoms.is_empty() || t_min >= big_r {
        return Ok(0.0);
    }
    let mass = |t: f64| atoms.iter().filter(|a| a.0 < t).map(|a| a.1).sum::<f64>();
    let mut breaks = vec![big_r];
    let mut t = big_r / 2.0;
    while t > t_min {
        breaks.push(t);
        t /= 2.0;
    }
    breaks.push(t_min);
    breaks.extend(atoms.iter().map(|a| a.0).filter(|&d| d > t_min && d < big_r));
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let expo = 1.0 / (p - 1.0);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0].ln(), w[1].ln());
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (xi, wi) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let t = (mid + half * xi).exp();
            let m = mass(t);
            if m > 0.0 {
                total += wi * half * (m * t.powf(p) / volume(x, t)).powf(expo);
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct WolffShell {
    pub radius: f64,
    /// `min u / W` over the shell.
    pub c1: f64,
    /// `max u / (W + inf u)` over the shell.
    pub c2: f64,
}

/// Fits `C₁ W ≤ u ≤ C₂ (W + inf u)` on shells `{d(x0, ·) = radius}` for a
/// potential `u` of the measure.
pub fn wolff_two_sided(
    measure: &DiscreteMeasure,
    points_by_shell: &[(f64, Vec<Vec<f64>>)],
    big_r: f64,
    p: f64,
    t_min: f64,
    oracle: &dyn DistanceOracle,
    volume: &dyn Fn(&[f64], f64) -> f64,
    u: &dyn Fn(&[f64]) -> f64,
) -> Result<Vec<WolffShell>> {
    let all: Vec<f64> = points_by_shell
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|y| u(y)))
        .collect();
    let inf_u = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = Vec::new();
    for (radius, pts) in points_by_shell {
        let mut c1 = f64::INFINITY;
        let mut c2 = 0.0f64;
        for y in pts {
            let w = wolff(measure, y, big_r, p, t_min, oracle, volume)?;
            let uy = u(y);
            if w > 0.0 {
                c1 = c1.min(uy / w);
            }
            c2 = c2.max(uy / (w + inf_u));
        }
        out.push(WolffShell {
            radius: *radius,
            c1,
            c2,
        });
    }
    Ok(out)
}

/// Cut-off for `B(x,s) ⊂ B(x,t)`: the ramp `(t - d(x,·))/(t - s)` clamped
/// to `[0, 1]`.
pub fn metric_cutoff(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    x: &[f64],
    s: f64,
    t: f64,
) -> GridFunction {
    GridFunction::from_fn(domain, |y| ((t - oracle.midpoint(x, y)) / (t - s)).clamp(0.0, 1.0))
}

/// Poincaré quotient `∫_B |u − u_B|^p / (r^p ∫_B |Xu|^p)` over the cells of
/// `B(x, r)`.
pub fn poincare_quotient(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    u: &GridFunction,
    x: &[f64],
    r: f64,
    p: f64,
) -> Result<f64> {
    let cells: Vec<usize> = domain
        .inside_cells()
        .iter()
        .copied()
        .filter(|&i| oracle.midpoint(x, &domain.coords(i)) < r)
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let mean = cells.iter().map(|&i| u.values[i]).sum::<f64>() / cells.len() as f64;
    let grad = crate::grid::x_gradient(domain, u);
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in &cells {
        num += (u.values[i] - mean).abs().powf(p);
        den += grad.iter().map(|g| g[i] * g[i]).sum::<f64>().powf(0.5 * p);
    }
    if den == 0.0 {
        return Err(Error::ZeroGradient);
    }
    Ok(num / (r.powf(p) * den))
}
