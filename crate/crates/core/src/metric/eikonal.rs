//! Lax–Friedrichs sweeping for the subelliptic eikonal equation
//! `|B(x)ᵀ ∇u| = 1`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{DistanceOracle, ReachEnclosure};
use crate::error::{Error, Result};
use crate::frames::VectorFieldSystem;
use crate::grid::{GridDomain, Lattice};

/// Sign patterns grow like `3^n`; above this dimension only the
/// Lax–Friedrichs stage runs.
const MAX_POLISH_DIM: usize = 5;

#[derive(Clone, Debug)]
pub struct EikonalOptions {
    pub max_iter: usize,
    /// Stop when the largest update of a full round of sweeps falls below
    /// `tol` times the smallest spacing.
    pub tol: f64,
}

impl Default for EikonalOptions {
    fn default() -> Self {
        EikonalOptions {
            max_iter: 2000,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EikonalReport {
    /// Lax–Friedrichs rounds.
    pub iterations: usize,
    /// Upwind rounds after the Lax–Friedrichs stage.
    pub polish_iterations: usize,
    pub final_change: f64,
    /// `max | |Xδ| - 1 |` over unknown cells away from the lattice edge.
    pub residual_max: f64,
    pub residual_mean: f64,
}

/// Runs Lax–Friedrichs sweeps in all `2^n` orderings until the update falls
/// below the tolerance. `frame` holds the row-major `n×m` frame per node;
/// nodes with `fixed[i]` keep their value.
pub fn solve_eikonal(
    lattice: &Lattice,
    frame: &[f64],
    m: usize,
    fixed: &[bool],
    u: &mut [f64],
    opts: &EikonalOptions,
) -> Result<EikonalReport> {
    let n = lattice.ndim();
    let len = lattice.len();
    let dims = lattice.dims();
    let strides = lattice.strides();
    let h = lattice.spacing();
    // local viscosities σ_k = |row_k B|
    let sigma: Vec<f64> = (0..len)
        .flat_map(|i| {
            let b = &frame[i * n * m..(i + 1) * n * m];
            (0..n).map(move |k| (0..m).map(|c| b[k * m + c] * b[k * m + c]).sum::<f64>().sqrt())
        })
        .collect();
    let big = u.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
    for (v, &f) in u.iter_mut().zip(fixed) {
        if !f && !v.is_finite() {
            *v = big;
        }
    }
    let hmin = lattice.min_spacing();
    let mut digits = vec![0usize; n];
    let mut a = [0.0f64; 16];
    let mut bnb = [0.0f64; 16];
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        change = 0.0f64;
        for mask in 0..(1usize << n) {
            digits.iter_mut().for_each(|d| *d = 0);
            'cells: loop {
                let mut idx = 0;
                for k in 0..n {
                    let i = if mask >> k & 1 == 1 { dims[k] - 1 - digits[k] } else { digits[k] };
                    idx += i * strides[k];
                }
                if !fixed[idx] {
                    let s = &sigma[idx * n..(idx + 1) * n];
                    let b = &frame[idx * n * m..(idx + 1) * n * m];
                    let mut denom = 0.0;
                    let mut visc = 0.0;
                    for k in 0..n {
                        let ik = (idx / strides[k]) % dims[k];
                        let lo = if ik > 0 { Some(u[idx - strides[k]]) } else { None };
                        let hi = if ik + 1 < dims[k] { Some(u[idx + strides[k]]) } else { None };
                        let (l, r) = match (lo, hi) {
                            (Some(l), Some(r)) => (l, r),
                            (Some(l), None) => (l, l),
                            (None, Some(r)) => (r, r),
                            (None, None) => (u[idx], u[idx]),
                        };
                        a[k] = l;
                        bnb[k] = r;
                        denom += s[k] / h[k];
                        visc += s[k] * (l + r) / (2.0 * h[k]);
                    }
                    if denom > 0.0 {
                        let mut hh = 0.0;
                        for c in 0..m {
                            let mut v = 0.0;
                            for k in 0..n {
                                v += b[k * m + c] * (bnb[k] - a[k]) / (2.0 * h[k]);
                            }
                            hh += v * v;
                        }
                        let cand = (1.0 - hh.sqrt() + visc) / denom;
                        if cand < u[idx] {
                            change = change.max(u[idx] - cand);
                            u[idx] = cand;
                        }
                    }
                }
                let mut k = n;
                loop {
                    if k == 0 {
                        break 'cells;
                    }
                    k -= 1;
                    digits[k] += 1;
                    if digits[k] < dims[k] {
                        break;
                    }
                    digits[k] = 0;
                }
            }
        }
        if change < opts.tol * hmin {
            break;
        }
    }
    if change >= opts.tol * hmin {
        return Err(Error::NonConvergence {
            what: "eikonal sweeping",
            detail: format!("last update {change:e} after {iterations} rounds"),
        });
    }
    let mut polish_iterations = 0;
    if n <= MAX_POLISH_DIM && m <= 16 {
        let (it, ch) = upwind_sweeps(lattice, frame, m, fixed, u, opts)?;
        polish_iterations = it;
        change = ch;
    }
    let (residual_max, residual_mean) = eikonal_residual(lattice, frame, m, fixed, u);
    Ok(EikonalReport {
        iterations,
        polish_iterations,
        final_change: change,
        residual_max,
        residual_mean,
    })
}

/// Odometer over all lattice nodes in the ordering selected by `mask`.
fn for_each_ordered(dims: &[usize], strides: &[usize], mask: usize, mut f: impl FnMut(usize)) {
    let n = dims.len();
    let mut digits = vec![0usize; n];
    loop {
        let mut idx = 0;
        for k in 0..n {
            let i = if mask >> k & 1 == 1 { dims[k] - 1 - digits[k] } else { digits[k] };
            idx += i * strides[k];
        }
        f(idx);
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] < dims[k] {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Markov-chain upwind value at one node:
/// `min_{|a|=1} (1 + Σ_k |v_k| u(x + sgn(v_k) h_k e_k) / h_k) / Σ_k |v_k| / h_k`
/// with `v = B a`. Each sign pattern of `v` gives a linear-fractional
/// problem on the sphere, solved in closed form; zero entries of the pattern
/// confine `a` to the orthogonal complement of the matching rows.
fn upwind_value(b: &[f64], n: usize, m: usize, h: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut pattern = [0i8; MAX_POLISH_DIM];
    let total = 3usize.pow(n as u32);
    let mut basis = [[0.0f64; 16]; MAX_POLISH_DIM];
    // digit 0 points at the smaller neighbour, so good candidates come
    // first and the floor test below prunes the rest
    let mut pref = [1i8; MAX_POLISH_DIM];
    let mut rate = [0.0f64; MAX_POLISH_DIM];
    for k in 0..n {
        if lo[k] < hi[k] {
            pref[k] = -1;
        }
        rate[k] = (0..m).map(|i| b[k * m + i] * b[k * m + i]).sum::<f64>().sqrt() / h[k];
    }
    for code in 0..total {
        let mut c = code;
        let mut usable = true;
        for k in 0..n {
            pattern[k] = match c % 3 {
                0 => pref[k],
                1 => 0,
                _ => -pref[k],
            };
            c /= 3;
            let nb = match pattern[k] {
                1 => hi[k],
                -1 => lo[k],
                _ => 0.0,
            };
            if !nb.is_finite() {
                usable = false;
            }
        }
        if !usable || pattern[..n].iter().all(|&s| s == 0) {
            continue;
        }
        // the value is a weighted mean of the used neighbours plus a
        // positive term, so it cannot beat their minimum
        let mut floor = f64::INFINITY;
        let mut total_rate = 0.0;
        for k in 0..n {
            match pattern[k] {
                1 => floor = floor.min(hi[k]),
                -1 => floor = floor.min(lo[k]),
                _ => continue,
            }
            total_rate += rate[k];
        }
        if total_rate == 0.0 || floor + 1.0 / total_rate >= best {
            continue;
        }
        // orthonormal basis of the rows whose motion is forbidden
        let mut nb_count = 0;
        for k in 0..n {
            if pattern[k] != 0 {
                continue;
            }
            let mut r = [0.0f64; 16];
            r[..m].copy_from_slice(&b[k * m..(k + 1) * m]);
            for q in basis.iter().take(nb_count) {
                let dot: f64 = (0..m).map(|i| r[i] * q[i]).sum();
                for i in 0..m {
                    r[i] -= dot * q[i];
                }
            }
            let norm = (0..m).map(|i| r[i] * r[i]).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in r.iter_mut().take(m) {
                    *v /= norm;
                }
                basis[nb_count] = r;
                nb_count += 1;
            }
        }
        let mut cv = [0.0f64; 16];
        let mut dv = [0.0f64; 16];
        for k in 0..n {
            let s = pattern[k] as f64;
            if s == 0.0 {
                continue;
            }
            let nbv = if s > 0.0 { hi[k] } else { lo[k] };
            for i in 0..m {
                cv[i] += s * nbv / h[k] * b[k * m + i];
                dv[i] += s / h[k] * b[k * m + i];
            }
        }
        for q in basis.iter().take(nb_count) {
            let dc: f64 = (0..m).map(|i| cv[i] * q[i]).sum();
            let dd: f64 = (0..m).map(|i| dv[i] * q[i]).sum();
            for i in 0..m {
                cv[i] -= dc * q[i];
                dv[i] -= dd * q[i];
            }
        }
        let d2: f64 = (0..m).map(|i| dv[i] * dv[i]).sum();
        if d2 < 1e-24 {
            continue;
        }
        let cd: f64 = (0..m).map(|i| cv[i] * dv[i]).sum();
        let c2: f64 = (0..m).map(|i| cv[i] * cv[i]).sum();
        let disc = cd * cd - d2 * (c2 - 1.0);
        if disc < 0.0 {
            continue;
        }
        let t = (cd + disc.sqrt()) / d2;
        if t >= best {
            continue;
        }
        // a = t d - c must move along the pattern's signs
        let mut da = 0.0;
        for i in 0..m {
            da += dv[i] * (t * dv[i] - cv[i]);
        }
        if da <= 0.0 {
            continue;
        }
        let consistent = (0..n).all(|k| {
            let s = pattern[k] as f64;
            if s == 0.0 {
                return true;
            }
            let v: f64 = (0..m).map(|i| b[k * m + i] * (t * dv[i] - cv[i])).sum();
            s * v >= -1e-12
        });
        if consistent {
            best = t;
        }
    }
    best
}

/// Gauss–Seidel sweeps of the upwind scheme; values may move both ways, so
/// the sharp value at ridges is recovered from a smeared start.
fn upwind_sweeps(
    lattice: &Lattice,
    frame: &[f64],
    m: usize,
    fixed: &[bool],
    u: &mut [f64],
    opts: &EikonalOptions,
) -> Result<(usize, f64)> {
    let n = lattice.ndim();
    let dims = lattice.dims().to_vec();
    let strides = lattice.strides().to_vec();
    let h = lattice.spacing().to_vec();
    let hmin = lattice.min_spacing();
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        change = 0.0f64;
        for mask in 0..(1usize << n) {
            for_each_ordered(&dims, &strides, mask, |idx| {
                if fixed[idx] {
                    return;
                }
                for k in 0..n {
                    let ik = (idx / strides[k]) % dims[k];
                    lo[k] = if ik > 0 { u[idx - strides[k]] } else { f64::INFINITY };
                    hi[k] = if ik + 1 < dims[k] { u[idx + strides[k]] } else { f64::INFINITY };
                }
                let v = upwind_value(&frame[idx * n * m..(idx + 1) * n * m], n, m, &h, &lo, &hi);
                if v.is_finite() {
                    change = change.max((v - u[idx]).abs());
                    u[idx] = v;
                }
            });
        }
        if change < opts.tol * hmin {
            return Ok((it, change));
        }
    }
    Err(Error::NonConvergence {
        what: "upwind eikonal sweeping",
        detail: format!("last update {change:e} after {it} rounds"),
    })
}

fn eikonal_residual(lattice: &Lattice, frame: &[f64], m: usize, fixed: &[bool], u: &[f64]) -> (f64, f64) {
    let n = lattice.ndim();
    let mut worst = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut d = vec![0.0; n];
    'outer: for idx in 0..lattice.len() {
        if fixed[idx] {
            continue;
        }
        for k in 0..n {
            match (lattice.neighbor(idx, k, false), lattice.neighbor(idx, k, true)) {
                (Some(a), Some(b)) => d[k] = (u[b] - u[a]) / (2.0 * lattice.spacing()[k]),
                _ => continue 'outer,
            }
        }
        let b = &frame[idx * n * m..(idx + 1) * n * m];
        let g2: f64 = (0..m)
            .map(|c| {
                let v: f64 = (0..n).map(|k| b[k * m + c] * d[k]).sum();
                v * v
            })
            .sum();
        let r = (g2.sqrt() - 1.0).abs();
        worst = worst.max(r);
        sum += r;
        count += 1;
    }
    (worst, if count > 0 { sum / count as f64 } else { 0.0 })
}

/// Boundary distance `δ` of a domain: zero off the inside cells, eikonal
/// solution inside.
pub fn boundary_distance(domain: &GridDomain) -> Result<(Vec<f64>, EikonalReport)> {
    let lat = domain.lattice();
    let n = lat.ndim();
    let m = domain.num_fields();
    if domain.band().iter().all(|&b| !b) {
        return Err(Error::EmptyDomain);
    }
    let mut frame = vec![0.0; lat.len() * n * m];
    for &i in domain.inside_cells() {
        frame[i * n * m..(i + 1) * n * m].copy_from_slice(domain.frame_at(i));
    }
    let fixed: Vec<bool> = domain.inside().iter().map(|&b| !b).collect();
    let extent: f64 = lat
        .dims()
        .iter()
        .zip(lat.spacing())
        .map(|(&d, h)| (d as f64 * h).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut u: Vec<f64> = fixed.iter().map(|&f| if f { 0.0 } else { 1e6 * (1.0 + extent) }).collect();
    let report = solve_eikonal(lat, &frame, m, &fixed, &mut u, &EikonalOptions::default())?;
    Ok((u, report))
}

/// Distance field from a single source point on a lattice fitted to the
/// reach box, solved at two resolutions; brackets are the min/max of the two
/// interpolants.
///
/// The lattice lives in affine coordinates `z = A (y - source)` in which the
/// frame at the source is axis-aligned. Without this, sheared frames force
/// horizontal moves to be assembled from off-axis stencil steps and the
/// distance is badly overestimated.
pub struct SourceField {
    source: Vec<f64>,
    radius: f64,
    enclosure: ReachEnclosure,
    /// `A`, row-major.
    to_local: Vec<f64>,
    coarse: (Lattice, Vec<f64>),
    fine: (Lattice, Vec<f64>),
}

/// Columns: a maximal independent subset of the frame at `x`, completed by
/// an orthonormal basis of its orthogonal complement.
fn adapted_basis(sys: &VectorFieldSystem, x: &[f64]) -> DMatrix<f64> {
    let n = sys.ambient_dim();
    let m = sys.num_fields();
    let mut b = vec![0.0; n * m];
    sys.eval_frame_into(x, &mut b);
    let scale = b.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    let mut push = |v: DVector<f64>, keep_raw: bool, cols: &mut Vec<DVector<f64>>| {
        let mut w = v.clone();
        for o in ortho.iter() {
            w -= o * o.dot(&w);
        }
        let norm = w.norm();
        if norm > 1e-8 * scale.max(v.norm()) {
            ortho.push(w / norm);
            cols.push(if keep_raw { v } else { ortho.last().unwrap().clone() });
        }
    };
    for i in 0..m {
        let v = DVector::from_fn(n, |k, _| b[k * m + i]);
        push(v, true, &mut cols);
    }
    for k in 0..n {
        if cols.len() == n {
            break;
        }
        push(DVector::from_fn(n, |j, _| if j == k { 1.0 } else { 0.0 }), false, &mut cols);
    }
    DMatrix::from_columns(&cols)
}

impl SourceField {
    pub fn new(sys: &VectorFieldSystem, x: &[f64], radius: f64, coarse_cells: usize, fine_cells: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("source field radius must be positive".into()));
        }
        let n = sys.ambient_dim();
        let m = sys.num_fields();
        let enclosure = ReachEnclosure::new(sys, x);
        let c = adapted_basis(sys, x);
        let a = c
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateBasis(x.to_vec()))?;
        let w = enclosure.half_widths(radius);
        let wz: Vec<f64> = (0..n)
            .map(|j| 1.15 * (0..n).map(|k| a[(j, k)].abs() * w[k]).sum::<f64>())
            .collect();
        let solve = |cells: usize| -> Result<(Lattice, Vec<f64>)> {
            let spacing: Vec<f64> = wz.iter().map(|v| v / cells as f64).collect();
            let lat = Lattice::centered(&vec![0.0; n], &vec![cells; n], &spacing)?;
            let mut frame = vec![0.0; lat.len() * n * m];
            let mut z = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut by = vec![0.0; n * m];
            for i in 0..lat.len() {
                lat.coords_into(i, &mut z);
                for (r, yr) in y.iter_mut().enumerate() {
                    *yr = x[r] + (0..n).map(|k| c[(r, k)] * z[k]).sum::<f64>();
                }
                sys.eval_frame_into(&y, &mut by);
                let out = &mut frame[i * n * m..(i + 1) * n * m];
                for j in 0..n {
                    for f in 0..m {
                        out[j * m + f] = (0..n).map(|k| a[(j, k)] * by[k * m + f]).sum();
                    }
                }
            }
            let center = lat.nearest_index(&vec![0.0; n]).expect("source on lattice");
            let mut fixed = vec![false; lat.len()];
            fixed[center] = true;
            let mut u = vec![1e3 * (1.0 + radius); lat.len()];
            u[center] = 0.0;
            solve_eikonal(&lat, &frame, m, &fixed, &mut u, &EikonalOptions::default())?;
            Ok((lat, u))
        };
        Ok(SourceField {
            source: x.to_vec(),
            radius,
            enclosure,
            to_local: a.transpose().as_slice().to_vec(),
            coarse: solve(coarse_cells)?,
            fine: solve(fine_cells)?,
        })
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    fn local(&self, y: &[f64]) -> Vec<f64> {
        let n = self.source.len();
        (0..n)
            .map(|j| (0..n).map(|k| self.to_local[j * n + k] * (y[k] - self.source[k])).sum())
            .collect()
    }
}

impl DistanceOracle for SourceField {
    fn ambient_dim(&self) -> usize {
        self.source.len()
    }

    fn bracket(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        if x.iter().zip(&self.source).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs())) {
            return Err(Error::InvalidArgument("source field queried away from its source".into()));
        }
        let z = self.local(y);
        match (
            self.coarse.0.interpolate(&self.coarse.1, &z),
            self.fine.0.interpolate(&self.fine.1, &z),
        ) {
            (Some(a), Some(b)) => Ok((a.min(b), a.max(b))),
            _ => Ok((self.radius, f64::INFINITY)),
        }
    }

    fn reach_box(&self, _x: &[f64], r: f64) -> Vec<f64> {
        self.enclosure.half_widths(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::HTypeGroup;
    use crate::grid::Shape;
    use crate::metric::HTypeDistance;

    #[test]
    fn euclidean_ball_center_distance() {
        let sys = VectorFieldSystem::builtin("euclidean3").unwrap();
        let h = 1.0 / 16.0;
        let d = GridDomain::discretize(&Shape::Ball { center: vec![0.0; 3], radius: 1.0 }, h, &sys).unwrap();
        let c = d.lattice().nearest_index(&[0.0; 3]).unwrap();
        let v = d.delta()[c];
        assert!((v - 1.0).abs() <= 2.0 * h, "δ(0) = {v}");
        // positive inside
        assert!(d.inside_cells().iter().all(|&i| d.delta()[i] > 0.0));
    }

    #[test]
    fn euclidean_cube_center_distance() {
        let sys = VectorFieldSystem::builtin("euclidean3").unwrap();
        let h = 1.0 / 16.0;
        let d = GridDomain::discretize(&Shape::Box { lo: vec![-1.0; 3], hi: vec![1.0; 3] }, h, &sys).unwrap();
        let c = d.lattice().nearest_index(&[0.0; 3]).unwrap();
        assert!((d.delta()[c] - 1.0).abs() <= 2.0 * h, "δ(0) = {}", d.delta()[c]);
    }

    #[test]
    fn heisenberg_source_field_tracks_exact_distance() {
        let g = HTypeGroup::new(1, 1).unwrap();
        let sys = g.system();
        let exact = HTypeDistance::new(g.clone());
        let x = [0.2, -0.1, 0.05];
        let f = SourceField::new(&sys, &x, 0.5, 16, 24).unwrap();
        let mut worst = 0.0f64;
        for step in [
            [0.3, 0.0, 0.0],
            [0.0, 0.3, 0.0],
            [-0.2, -0.2, 0.0],
            [0.1, -0.25, 0.0],
            [0.0, 0.0, 0.03],
            [0.1, 0.1, 0.04],
            [0.2, 0.0, -0.03],
        ] {
            let y = g.product(&x, &step);
            let (lo, hi) = f.bracket(&x, &y).unwrap();
            let e = exact.distance(&x, &y);
            worst = worst.max(((lo + hi) / 2.0 - e).abs() / e);
        }
        assert!(worst < 0.15, "relative error {worst}");
    }
}
