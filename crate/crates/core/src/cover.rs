//! Whitney ball decompositions, Hausdorff contents with negative exponent
//! and the boundary-thickness scores built from them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::capacity::in_complement;
use crate::error::{Error, Result};
use crate::frames::{CommutatorBasis, VectorFieldSystem};
use crate::grid::{ball_cells, GridDomain, Lattice};
use crate::metric::DistanceOracle;
use crate::nsw::{nsw_profile, system_ball_volume, NswProfile};

#[derive(Clone, Debug, Serialize)]
pub struct WhitneyBall {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Distance from the center to the boundary band.
    pub boundary_distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WhitneyDecomposition {
    pub balls: Vec<WhitneyBall>,
    pub lambda: f64,
    /// Largest number of dilated balls `4B_j` meeting one cell.
    pub overlap: usize,
}

#[derive(Clone, Debug)]
pub struct WhitneyOptions {
    /// `λ_W = coefficient · min(r0 / diam, 1)`.
    pub coefficient: f64,
    /// Clause (d) bound. Centers are separated at the scale of the radii,
    /// so the overlap is a packing number independent of `h`; `8^3` covers
    /// `λ_W = 1/4` in three dimensions.
    pub max_overlap: usize,
}

impl Default for WhitneyOptions {
    fn default() -> Self {
        WhitneyOptions {
            coefficient: 0.25,
            max_overlap: 512,
        }
    }
}

/// Calls `f` for every lattice index inside the box `x ± w`.
fn for_each_in_box(lat: &Lattice, x: &[f64], w: &[f64], mut f: impl FnMut(usize)) {
    let n = lat.ndim();
    let mut lo = vec![0usize; n];
    let mut hi = vec![0usize; n];
    for k in 0..n {
        let a = ((x[k] - w[k] - lat.origin()[k]) / lat.spacing()[k]).floor();
        let b = ((x[k] + w[k] - lat.origin()[k]) / lat.spacing()[k]).ceil();
        let top = (lat.dims()[k] - 1) as f64;
        if b < 0.0 || a > top {
            return;
        }
        lo[k] = a.max(0.0) as usize;
        hi[k] = b.min(top) as usize;
    }
    let mut cur = lo.clone();
    loop {
        f(lat.linear(&cur));
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] <= hi[k] {
                break;
            }
            cur[k] = lo[k];
        }
    }
}

/// Distance from `x` to the nearest band cell, searching growing reach
/// boxes.
pub fn band_distance(domain: &GridDomain, oracle: &dyn DistanceOracle, x: &[f64], guess: f64) -> f64 {
    let lat = domain.lattice();
    let band = domain.band();
    let mut rho = guess.max(2.0 * domain.h());
    loop {
        let w = oracle.reach_box(x, rho);
        let mut best = f64::INFINITY;
        for_each_in_box(lat, x, &w, |j| {
            if band[j] {
                best = best.min(oracle.midpoint(x, &lat.coords(j)));
            }
        });
        if best < rho {
            return best;
        }
        let covers_lattice = (0..lat.ndim()).all(|k| {
            x[k] - w[k] <= lat.origin()[k]
                && x[k] + w[k] >= lat.origin()[k] + (lat.dims()[k] - 1) as f64 * lat.spacing()[k]
        });
        if covers_lattice {
            return best;
        }
        rho *= 2.0;
    }
}

fn brute_band_distance(domain: &GridDomain, oracle: &dyn DistanceOracle, x: &[f64]) -> f64 {
    domain
        .band_cells()
        .iter()
        .map(|&j| oracle.midpoint(x, &domain.coords(j)))
        .fold(f64::INFINITY, f64::min)
}

/// Greedy Whitney decomposition: inside cells in decreasing order of `δ`
/// each get a ball of radius `λ dist(B, ∂Ω)` unless already covered.
pub fn whitney(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    opts: &WhitneyOptions,
) -> Result<WhitneyDecomposition> {
    let lat = domain.lattice();
    let diam = domain.diameter().max(domain.h());
    let lambda = opts.coefficient * (domain.params().r0 / diam).min(1.0);
    let delta = domain.delta();
    let mut order: Vec<usize> = domain.inside_cells().to_vec();
    let have_delta = order.iter().any(|&i| delta[i] > 0.0);
    let key: Vec<f64> = if have_delta {
        order.iter().map(|&i| delta[i]).collect()
    } else {
        order
            .par_iter()
            .map(|&i| band_distance(domain, oracle, &lat.coords(i), domain.h()))
            .collect()
    };
    let mut idx: Vec<usize> = (0..order.len()).collect();
    idx.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).unwrap().then(order[a].cmp(&order[b])));
    order = idx.iter().map(|&j| order[j]).collect();

    let mut covered = vec![false; lat.len()];
    let mut balls = Vec::new();
    for &c in &order {
        if covered[c] {
            continue;
        }
        let x = lat.coords(c);
        let guess = if have_delta { delta[c] + 2.0 * domain.h() } else { domain.h() };
        let bd = band_distance(domain, oracle, &x, guess);
        let radius = lambda * bd / (1.0 + lambda);
        covered[c] = true;
        let (members, _) = ball_cells(lat, oracle, &x, radius);
        for j in members {
            covered[j] = true;
        }
        balls.push(WhitneyBall {
            center: x,
            radius,
            boundary_distance: bd,
        });
    }
    let mut dec = WhitneyDecomposition {
        balls,
        lambda,
        overlap: 0,
    };
    dec.overlap = verify_whitney(domain, oracle, &dec, opts)?;
    Ok(dec)
}

/// Checks clauses (a)–(d) and returns the observed overlap bound.
pub fn verify_whitney(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    dec: &WhitneyDecomposition,
    opts: &WhitneyOptions,
) -> Result<usize> {
    let lat = domain.lattice();
    let violation = |clause: char, detail: String| Error::PropertyViolation { clause, detail };

    // (a) the balls cover every inside cell
    let mut covered = vec![false; lat.len()];
    for b in &dec.balls {
        if let Some(i) = lat.nearest_index(&b.center) {
            covered[i] = true;
        }
        for j in ball_cells(lat, oracle, &b.center, b.radius).0 {
            covered[j] = true;
        }
    }
    if let Some(&i) = domain.inside_cells().iter().find(|&&i| !covered[i]) {
        return Err(violation('a', format!("cell at {:?} is not covered", lat.coords(i))));
    }

    // (b) quarter balls are pairwise disjoint
    let rmax = dec.balls.iter().map(|b| b.radius).fold(0.0, f64::max);
    let mut by_x: Vec<usize> = (0..dec.balls.len()).collect();
    by_x.sort_by(|&a, &b| dec.balls[a].center[0].partial_cmp(&dec.balls[b].center[0]).unwrap());
    for (pos, &a) in by_x.iter().enumerate() {
        let ba = &dec.balls[a];
        let reach = oracle.reach_box(&ba.center, 0.25 * (ba.radius + rmax))[0];
        for &b in &by_x[pos + 1..] {
            let bb = &dec.balls[b];
            if bb.center[0] - ba.center[0] > reach {
                break;
            }
            let d = oracle.midpoint(&ba.center, &bb.center);
            if d < 0.25 * (ba.radius + bb.radius) {
                return Err(violation(
                    'b',
                    format!("quarter balls at {:?} and {:?} intersect", ba.center, bb.center),
                ));
            }
        }
    }

    // (c) r_j = λ dist(B_j, ∂Ω), checked against an exhaustive band search on
    // a deterministic subsample
    let tol = dec.lambda * lat.spacing().iter().cloned().fold(0.0, f64::max);
    let stride = (dec.balls.len() / 500).max(1);
    let bad = dec
        .balls
        .par_iter()
        .step_by(stride)
        .find_any(|b| {
            let bd = brute_band_distance(domain, oracle, &b.center);
            (b.radius - dec.lambda * (bd - b.radius)).abs() > tol
        })
        .map(|b| b.center.clone());
    if let Some(c) = bad {
        return Err(violation('c', format!("radius at {c:?} is off the Whitney scale")));
    }

    // (d) bounded overlap of the dilated balls
    let mut count = vec![0usize; lat.len()];
    for b in &dec.balls {
        for j in ball_cells(lat, oracle, &b.center, 4.0 * b.radius).0 {
            count[j] += 1;
        }
    }
    let m = domain.inside_cells().iter().map(|&i| count[i]).max().unwrap_or(0);
    if m > opts.max_overlap {
        return Err(violation('d', format!("overlap {m} exceeds {}", opts.max_overlap)));
    }
    Ok(m)
}

/// `|B(x, r)| ≈ c Λ(x, r)` with the Nagel–Stein–Wainger polynomial.
#[derive(Clone, Debug)]
pub struct VolumeSurrogate {
    basis: CommutatorBasis,
    pub constant: f64,
}

impl VolumeSurrogate {
    pub fn new(basis: CommutatorBasis, constant: f64) -> Self {
        VolumeSurrogate { basis, constant }
    }

    /// Fits the constant against a Monte-Carlo volume at `(x0, r)`.
    pub fn fit(sys: &VectorFieldSystem, basis: CommutatorBasis, x0: &[f64], r: f64, samples: usize, seed: u64) -> Result<Self> {
        let v = system_ball_volume(sys, x0, r, samples, seed)?.estimate;
        let lam = nsw_profile(&basis, x0)?.lambda(r);
        Ok(VolumeSurrogate {
            basis,
            constant: v / lam,
        })
    }

    pub fn profile(&self, x: &[f64]) -> Result<NswProfile> {
        nsw_profile(&self.basis, x)
    }

    pub fn volume(&self, x: &[f64], r: f64) -> Result<f64> {
        Ok(self.constant * self.profile(x)?.lambda(r))
    }
}

#[derive(Clone, Debug)]
pub struct ContentOptions {
    /// Dyadic radii `r, r/2, …, r/2^{levels-1}`.
    pub levels: usize,
    /// Brute force when `|E|` is at most this.
    pub exact_limit: usize,
}

impl Default for ContentOptions {
    fn default() -> Self {
        ContentOptions {
            levels: 6,
            exact_limit: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContentEstimate {
    pub value: f64,
    pub witness: Vec<CoverBall>,
    pub exact: bool,
    /// Greedy value (equal to `value` unless `exact`).
    pub greedy_value: f64,
}

struct ContentProblem<'a> {
    points: &'a [Vec<f64>],
    dist: Vec<f64>,
    profiles: Vec<NswProfile>,
    constant: f64,
    q: f64,
}

impl ContentProblem<'_> {
    fn n(&self) -> usize {
        self.points.len()
    }

    fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n() + j]
    }

    fn cost(&self, i: usize, rho: f64) -> f64 {
        rho.powf(-self.q) * self.constant * self.profiles[i].lambda(rho)
    }

    /// Weighted greedy set cover of `subset` with balls of radius `rho`
    /// centered in `subset`; returns `(cost, [(center, owned points)])`.
    fn greedy(&self, subset: &[usize], rho: f64) -> (f64, Vec<(usize, Vec<usize>)>) {
        let nb: Vec<Vec<usize>> = subset
            .iter()
            .map(|&i| (0..subset.len()).filter(|&b| self.d(i, subset[b]) < rho).collect())
            .collect();
        let costs: Vec<f64> = subset.iter().map(|&i| self.cost(i, rho)).collect();
        let mut fresh: Vec<usize> = nb.iter().map(|v| v.len()).collect();
        let mut done = vec![false; subset.len()];
        let mut left = subset.len();
        let mut total = 0.0;
        let mut picks = Vec::new();
        while left > 0 {
            let mut best = usize::MAX;
            let mut best_v = f64::INFINITY;
            for a in 0..subset.len() {
                if fresh[a] > 0 {
                    let v = costs[a] / fresh[a] as f64;
                    if v < best_v {
                        best_v = v;
                        best = a;
                    }
                }
            }
            let mut owned = Vec::new();
            for &b in &nb[best] {
                if !done[b] {
                    done[b] = true;
                    left -= 1;
                    owned.push(subset[b]);
                    for (a, list) in nb.iter().enumerate() {
                        if list.binary_search(&b).is_ok() {
                            fresh[a] -= 1;
                        }
                    }
                }
            }
            total += costs[best];
            picks.push((subset[best], owned));
        }
        (total, picks)
    }
}

/// Upper estimate of `H̃^{-q}_r(E) = inf Σ r_j^{-q} |B(x_j, r_j)|` over
/// covers of `E` by balls centered in `E` with radii at most `r`.
pub fn hausdorff_content(
    points: &[Vec<f64>],
    q: f64,
    r: f64,
    oracle: &dyn DistanceOracle,
    volume: &VolumeSurrogate,
    opts: &ContentOptions,
) -> Result<ContentEstimate> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("content of an empty set".into()));
    }
    if !(r > 0.0) || opts.levels == 0 {
        return Err(Error::InvalidArgument("content needs r > 0 and at least one level".into()));
    }
    let n = points.len();
    let dist: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                0.0
            } else {
                oracle.midpoint(&points[i], &points[j])
            }
        })
        .collect();
    let profiles = points.iter().map(|x| volume.profile(x)).collect::<Result<Vec<_>>>()?;
    let prob = ContentProblem {
        points,
        dist,
        profiles,
        constant: volume.constant,
        q,
    };
    let radii: Vec<f64> = (0..opts.levels).map(|k| r / 2f64.powi(k as i32)).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<CoverBall>)> = None;
    for &rho in &radii {
        let (_, picks) = prob.greedy(&all, rho);
        let mut total = 0.0;
        let mut cover = Vec::new();
        for (c, owned) in picks {
            let whole = prob.cost(c, rho);
            let (half, sub) = prob.greedy(&owned, rho / 2.0);
            if half < whole {
                total += half;
                cover.extend(sub.into_iter().map(|(cc, _)| CoverBall {
                    center: points[cc].clone(),
                    radius: rho / 2.0,
                }));
            } else {
                total += whole;
                cover.push(CoverBall {
                    center: points[c].clone(),
                    radius: rho,
                });
            }
        }
        if best.as_ref().map_or(true, |b| total < b.0) {
            best = Some((total, cover));
        }
    }
    let (greedy_value, greedy_cover) = best.expect("at least one level");
    if n <= opts.exact_limit {
        let mut exact_radii = radii.clone();
        exact_radii.push(r / 2f64.powi(opts.levels as i32));
        let (value, witness) = exact_content(&prob, &exact_radii);
        return Ok(ContentEstimate {
            value,
            witness,
            exact: true,
            greedy_value,
        });
    }
    Ok(ContentEstimate {
        value: greedy_value,
        witness: greedy_cover,
        exact: false,
        greedy_value,
    })
}

/// Minimum-cost cover over all `(center, radius)` candidates by dynamic
/// programming on subsets.
fn exact_content(prob: &ContentProblem<'_>, radii: &[f64]) -> (f64, Vec<CoverBall>) {
    let n = prob.n();
    let full = (1usize << n) - 1;
    let mut cands = Vec::new();
    for i in 0..n {
        for &rho in radii {
            let mask = (0..n).filter(|&j| prob.d(i, j) < rho).fold(0usize, |m, j| m | 1 << j);
            cands.push((mask | 1 << i, prob.cost(i, rho), i, rho));
        }
    }
    let mut dp = vec![f64::INFINITY; full + 1];
    let mut from = vec![(0usize, usize::MAX); full + 1];
    dp[0] = 0.0;
    for mask in 0..=full {
        if !dp[mask].is_finite() {
            continue;
        }
        // extend by a candidate covering the lowest uncovered point
        let low = (!mask).trailing_zeros() as usize;
        if low >= n {
            continue;
        }
        for (c, &(cm, cost, _, _)) in cands.iter().enumerate() {
            if cm >> low & 1 == 0 {
                continue;
            }
            let next = mask | cm;
            let v = dp[mask] + cost;
            if v < dp[next] {
                dp[next] = v;
                from[next] = (mask, c);
            }
        }
    }
    let mut witness = Vec::new();
    let mut m = full;
    while m != 0 {
        let (prev, c) = from[m];
        let (_, _, i, rho) = cands[c];
        witness.push(CoverBall {
            center: prob.points[i].clone(),
            radius: rho,
        });
        m = prev;
    }
    (dp[full], witness)
}

#[derive(Clone, Debug, Serialize)]
pub struct ThicknessRow {
    pub point: Vec<f64>,
    pub radius: f64,
    pub content: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ThicknessReport {
    pub q: f64,
    /// Interior condition: min over samples.
    pub score_iii: f64,
    /// Boundary condition: min over samples and radii.
    pub score_iv: f64,
    pub rows_iii: Vec<ThicknessRow>,
    pub rows_iv: Vec<ThicknessRow>,
}

/// Points of the complement in `B(w, r)` on a local lattice with about
/// `per_axis` nodes per half-width.
fn complement_points(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    w: &[f64],
    r: f64,
    per_axis: usize,
) -> Result<Vec<Vec<f64>>> {
    let half = oracle.reach_box(w, r);
    let spacing: Vec<f64> = half.iter().map(|v| v / per_axis as f64).collect();
    let lat = Lattice::centered(w, &vec![per_axis; w.len()], &spacing)?;
    Ok((0..lat.len())
        .map(|i| lat.coords(i))
        .filter(|y| oracle.midpoint(w, y) < r && in_complement(domain, y))
        .collect())
}

/// Thickness scores for the interior condition (iii) at `interior` points
/// and the boundary condition (iv) at `boundary` points and `radii`.
#[allow(clippy::too_many_arguments)]
pub fn thickness_report(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    volume: &VolumeSurrogate,
    q: f64,
    interior: &[Vec<f64>],
    boundary: &[Vec<f64>],
    radii: &[f64],
    opts: &ContentOptions,
) -> Result<ThicknessReport> {
    let band: Vec<Vec<f64>> = domain.band_cells().iter().map(|&j| domain.coords(j)).collect();
    let mut rows_iii = Vec::new();
    for x in interior {
        let delta = band_distance(domain, oracle, x, domain.h());
        let e: Vec<Vec<f64>> = band
            .iter()
            .filter(|y| oracle.midpoint(x, y) <= 2.0 * delta)
            .cloned()
            .collect();
        let content = if e.is_empty() {
            0.0
        } else {
            hausdorff_content(&e, q, delta, oracle, volume, opts)?.value
        };
        let score = content * delta.powf(q) / volume.volume(x, delta)?;
        rows_iii.push(ThicknessRow {
            point: x.clone(),
            radius: delta,
            content,
            score,
        });
    }
    let mut rows_iv = Vec::new();
    for w in boundary {
        for &r in radii {
            let e = complement_points(domain, oracle, w, r, 6)?;
            let content = if e.is_empty() {
                0.0
            } else {
                hausdorff_content(&e, q, r, oracle, volume, opts)?.value
            };
            let score = content * r.powf(q) / volume.volume(w, r)?;
            rows_iv.push(ThicknessRow {
                point: w.clone(),
                radius: r,
                content,
                score,
            });
        }
    }
    let min = |rows: &[ThicknessRow]| rows.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    Ok(ThicknessReport {
        q,
        score_iii: min(&rows_iii),
        score_iv: min(&rows_iv),
        rows_iii,
        rows_iv,
    })
}

/// Random inside cells with `δ < max_delta` (boundary distance by the band
/// search), drawn with a seeded shuffle.
pub fn interior_samples(
    domain: &GridDomain,
    oracle: &dyn DistanceOracle,
    count: usize,
    max_delta: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut cells = domain.inside_cells().to_vec();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for i in cells {
        if out.len() >= count {
            break;
        }
        let x = domain.coords(i);
        if band_distance(domain, oracle, &x, domain.h()) < max_delta {
            out.push(x);
        }
    }
    out
}
