//! Nagel–Stein–Wainger polynomial, homogeneous dimensions and Monte-Carlo
//! ball volumes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frames::{CommutatorBasis, VectorFieldSystem};
use crate::metric::{reach_box, DistanceOracle, EuclideanDistance, HTypeDistance, SourceField};

/// Relative cut below which a determinant counts as vanishing.
pub const DET_THRESHOLD: f64 = 1e-9;
/// Largest tuple count enumerated exhaustively.
const EXHAUSTIVE_LIMIT: f64 = 1e6;
const BLOCK: usize = 4096;

#[derive(Clone, Debug, Serialize)]
pub struct NswProfile {
    pub base_point: Vec<f64>,
    /// `(coefficient, exponent)` sorted by exponent; coefficients positive.
    pub terms: Vec<(f64, u32)>,
    pub q_at_x: u32,
    pub q_local: u32,
}

impl NswProfile {
    /// `Λ(x, r)`.
    pub fn lambda(&self, r: f64) -> f64 {
        self.terms.iter().map(|&(c, d)| c * r.powi(d as i32)).sum()
    }

    /// `∂_r Λ(x, r)`.
    pub fn lambda_deriv(&self, r: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(c, d)| c * d as f64 * r.powi(d as i32 - 1))
            .sum()
    }

    /// `r Λ'(x,r) / Λ(x,r)`, which lies in `[Q(x), Q]`.
    pub fn log_slope(&self, r: f64) -> f64 {
        r * self.lambda_deriv(r) / self.lambda(r)
    }

    /// Largest exponent present at the base point.
    pub fn max_exponent(&self) -> u32 {
        self.terms.last().map(|t| t.1).unwrap_or(0)
    }

    pub fn with_q_local(mut self, q: u32) -> Self {
        self.q_local = q.max(self.q_at_x);
        self
    }

    /// Relative defect of `t^Q Λ(r) ≤ Λ(tr) ≤ t^{Q(x)} Λ(r)`; zero when both
    /// hold.
    pub fn rescale_defect(&self, r: f64, t: f64) -> f64 {
        let l = self.lambda(r);
        let lt = self.lambda(t * r);
        let lo = t.powi(self.q_local as i32) * l;
        let hi = t.powi(self.q_at_x as i32) * l;
        ((lo - lt).max(lt - hi)).max(0.0) / l
    }
}

fn det(cols: &DMatrix<f64>, idx: &[usize]) -> f64 {
    let n = idx.len();
    if n == 3 {
        let c = |i: usize, j: usize| cols[(i, idx[j])];
        return c(0, 0) * (c(1, 1) * c(2, 2) - c(1, 2) * c(2, 1))
            - c(0, 1) * (c(1, 0) * c(2, 2) - c(1, 2) * c(2, 0))
            + c(0, 2) * (c(1, 0) * c(2, 1) - c(1, 1) * c(2, 0));
    }
    DMatrix::from_fn(n, n, |i, j| cols[(i, idx[j])]).determinant()
}

/// Raw `(|a_I|, d(I), multiplicity)` over the chosen enumeration; the
/// combination route counts each tuple `n!` times (permutations share
/// `|det|`, repeated entries vanish).
fn raw_terms(cols: &DMatrix<f64>, degrees: &[u32], exhaustive: bool) -> Vec<(f64, u32, f64)> {
    let n = cols.nrows();
    let l = cols.ncols();
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    if exhaustive {
        loop {
            let d = det(cols, &idx).abs();
            out.push((d, idx.iter().map(|&i| degrees[i]).sum(), 1.0));
            let mut k = n;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < l {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    if l < n {
        return out;
    }
    let fact: f64 = (1..=n).map(|v| v as f64).product();
    for (i, v) in idx.iter_mut().enumerate() {
        *v = i;
    }
    loop {
        let d = det(cols, &idx).abs();
        out.push((d, idx.iter().map(|&i| degrees[i]).sum(), fact));
        // next combination
        let mut k = n;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] < l - n + k {
                idx[k] += 1;
                for j in k + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn aggregate(raw: Vec<(f64, u32, f64)>, x: &[f64]) -> Result<NswProfile> {
    let max = raw.iter().map(|t| t.0).fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateBasis(x.to_vec()));
    }
    let mut by_exp = std::collections::BTreeMap::<u32, f64>::new();
    for (c, d, mult) in raw {
        if c > DET_THRESHOLD * max {
            *by_exp.entry(d).or_insert(0.0) += c * mult;
        }
    }
    let terms: Vec<(f64, u32)> = by_exp.into_iter().map(|(d, c)| (c, d)).collect();
    let q_at_x = terms[0].1;
    let q_local = terms.last().unwrap().1;
    Ok(NswProfile {
        base_point: x.to_vec(),
        terms,
        q_at_x,
        q_local,
    })
}

fn profile_with(basis: &CommutatorBasis, x: &[f64], exhaustive: bool) -> Result<NswProfile> {
    let cols = basis.eval(x);
    let raw = raw_terms(&cols, basis.degrees(), exhaustive);
    aggregate(raw, x)
}

/// `Λ(x, ·)` at `x`; `q_local` is the largest exponent at `x` until
/// [`homogeneous_dimensions`] widens it.
pub fn nsw_profile(basis: &CommutatorBasis, x: &[f64]) -> Result<NswProfile> {
    let l = basis.len() as f64;
    let exhaustive = l.powi(basis.ambient_dim() as i32) <= EXHAUSTIVE_LIMIT;
    profile_with(basis, x, exhaustive)
}

/// Profile forced through one enumeration route.
pub fn nsw_profile_route(basis: &CommutatorBasis, x: &[f64], exhaustive: bool) -> Result<NswProfile> {
    profile_with(basis, x, exhaustive)
}

/// `(Q(x), Q)` with `Q` the largest exponent over `samples ∪ {x}`.
pub fn homogeneous_dimensions(basis: &CommutatorBasis, x: &[f64], samples: &[Vec<f64>]) -> Result<(u32, u32)> {
    let p = nsw_profile(basis, x)?;
    let mut q = p.max_exponent();
    for s in samples {
        q = q.max(nsw_profile(basis, s)?.max_exponent());
    }
    Ok((p.q_at_x, q))
}

#[derive(Clone, Debug, Serialize)]
pub struct VolumeEstimate {
    /// Volume of points certainly inside (upper distance bound < r).
    pub lower: f64,
    /// Volume of points possibly inside (lower distance bound < r).
    pub upper: f64,
    pub estimate: f64,
    /// 95% binomial half-width of `estimate`.
    pub half_width: f64,
    pub samples: usize,
}

/// Monte-Carlo `|B(x, r)|` over the oracle's reach box. Blocks of 4096
/// samples draw from independent ChaCha streams, so the result does not
/// depend on the thread count.
pub fn ball_volume(oracle: &dyn DistanceOracle, x: &[f64], r: f64, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if !(r > 0.0) || n_samples == 0 {
        return Err(Error::InvalidArgument("ball_volume needs r > 0 and samples".into()));
    }
    let w = oracle.reach_box(x, r);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("no bounding box for radius {r}")));
    }
    let box_vol: f64 = w.iter().map(|v| 2.0 * v).product();
    let n = x.len();
    let blocks = n_samples.div_ceil(BLOCK);
    let counts: Vec<Result<(u64, u64, u64)>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let take = BLOCK.min(n_samples - b * BLOCK);
            let mut y = vec![0.0; n];
            let (mut lo, mut hi, mut mid) = (0u64, 0u64, 0u64);
            for _ in 0..take {
                for k in 0..n {
                    y[k] = x[k] + w[k] * (2.0 * rng.gen::<f64>() - 1.0);
                }
                let (a, c) = oracle.bracket(x, &y)?;
                if c < r {
                    lo += 1;
                }
                if a < r {
                    hi += 1;
                }
                let m = if c.is_finite() { 0.5 * (a + c) } else { a };
                if m < r {
                    mid += 1;
                }
            }
            Ok((lo, hi, mid))
        })
        .collect();
    let (mut lo, mut hi, mut mid) = (0u64, 0u64, 0u64);
    for c in counts {
        let (a, b, m) = c?;
        lo += a;
        hi += b;
        mid += m;
    }
    let nf = n_samples as f64;
    let frac = mid as f64 / nf;
    let est = VolumeEstimate {
        lower: box_vol * lo as f64 / nf,
        upper: box_vol * hi as f64 / nf,
        estimate: box_vol * frac,
        half_width: 1.96 * box_vol * (frac * (1.0 - frac) / nf).sqrt(),
        samples: n_samples,
    };
    if est.upper - est.lower > 0.5 * est.estimate {
        return Err(Error::InconclusiveVolume {
            lower: est.lower,
            upper: est.upper,
        });
    }
    Ok(est)
}

/// Ball volume with the system's natural oracle: exact distances for
/// Euclidean and H-type frames, a two-resolution eikonal field otherwise.
pub fn system_ball_volume(sys: &VectorFieldSystem, x: &[f64], r: f64, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if sys.is_euclidean() {
        let o = EuclideanDistance { n: sys.ambient_dim() };
        ball_volume(&o, x, r, n_samples, seed)
    } else if let Some(g) = sys.group() {
        ball_volume(&HTypeDistance::new(g.clone()), x, r, n_samples, seed)
    } else {
        let field = SourceField::new(sys, x, r, 16, 24)?;
        ball_volume(&field, x, r, n_samples, seed)
    }
}

/// Least-squares slope of `log V` against `log r`.
pub fn fitted_exponent(radii: &[f64], volumes: &[f64]) -> f64 {
    let n = radii.len() as f64;
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = volumes.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparabilityRow {
    pub x: Vec<f64>,
    pub r: f64,
    pub lambda: f64,
    pub volume_lo: f64,
    pub volume_hi: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparabilityReport {
    pub rows: Vec<ComparabilityRow>,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// `(r, C0)` with `C0 = min_x 2^Q |B(x,r)| / |B(x,2r)|` for each radius
    /// whose double is also sampled.
    pub doubling: Vec<(f64, f64)>,
    /// Same constant computed from `Λ` alone.
    pub doubling_lambda: Vec<(f64, f64)>,
    pub q_local: u32,
    pub rescale_checks: usize,
    pub rescale_max_defect: f64,
}

impl ComparabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,r,lambda,volume_lo,volume_hi,ratio\n");
        for row in &self.rows {
            let x: Vec<String> = row.x.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&format!(
                "\"{}\",{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                x.join(" "),
                row.r,
                row.lambda,
                row.volume_lo,
                row.volume_hi,
                row.ratio
            ));
        }
        s
    }
}

/// Fits the constants of the volume comparison, doubling and rescaling
/// inequalities over `samples × radii`, with `t` sampled on `ts`.
pub fn comparability_report(
    basis: &CommutatorBasis,
    samples: &[Vec<f64>],
    radii: &[f64],
    ts: &[f64],
    volume: &(dyn Fn(&[f64], f64) -> Result<VolumeEstimate> + Sync),
) -> Result<ComparabilityReport> {
    let (_, q) = homogeneous_dimensions(basis, &samples[0], samples)?;
    let profiles: Vec<NswProfile> = samples
        .iter()
        .map(|x| nsw_profile(basis, x).map(|p| p.with_q_local(q)))
        .collect::<Result<_>>()?;
    let mut defect = 0.0f64;
    let mut checks = 0;
    for p in &profiles {
        for &r in radii {
            for &t in ts {
                let d = p.rescale_defect(r, t);
                checks += 1;
                if d > 1e-9 {
                    return Err(Error::ComparabilityViolation {
                        x: p.base_point.clone(),
                        r,
                        t,
                        defect: d,
                    });
                }
                defect = defect.max(d);
            }
        }
    }
    let mut rows = Vec::new();
    for (x, p) in samples.iter().zip(&profiles) {
        for &r in radii {
            let v = volume(x, r)?;
            let lambda = p.lambda(r);
            rows.push(ComparabilityRow {
                x: x.clone(),
                r,
                lambda,
                volume_lo: v.lower,
                volume_hi: v.upper,
                ratio: v.estimate / lambda,
            });
        }
    }
    let ratio_min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let ratio_max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let two_q = 2f64.powi(q as i32);
    let mut doubling = Vec::new();
    let mut doubling_lambda = Vec::new();
    for &r in radii {
        let Some(j) = radii.iter().position(|&s| (s - 2.0 * r).abs() <= 1e-12 * s) else {
            continue;
        };
        let i = radii.iter().position(|&s| s == r).unwrap();
        let mut c = f64::INFINITY;
        let mut cl = f64::INFINITY;
        for (si, p) in profiles.iter().enumerate() {
            let a = &rows[si * radii.len() + i];
            let b = &rows[si * radii.len() + j];
            c = c.min(two_q * a.ratio * a.lambda / (b.ratio * b.lambda));
            cl = cl.min(two_q * p.lambda(r) / p.lambda(2.0 * r));
        }
        doubling.push((r, c));
        doubling_lambda.push((r, cl));
    }
    Ok(ComparabilityReport {
        rows,
        ratio_min,
        ratio_max,
        doubling,
        doubling_lambda,
        q_local: q,
        rescale_checks: checks,
        rescale_max_defect: defect,
    })
}

/// Smallest `C0` with `C0 (r/s)^Q ≤ Λ(x,r)/Λ(x,s)` over the given points
/// and radii `r < s ≤ r0`.
pub fn doubling_constant_lambda(profiles: &[NswProfile], radii: &[f64], q: u32) -> f64 {
    let mut c = f64::INFINITY;
    for p in profiles {
        for (i, &r) in radii.iter().enumerate() {
            for &s in &radii[i + 1..] {
                let (r, s) = if r < s { (r, s) } else { (s, r) };
                c = c.min(p.lambda(r) / p.lambda(s) * (s / r).powi(q as i32));
            }
        }
    }
    c
}

/// Half-widths of the box used to sample `B(x, r)` for a system.
pub fn volume_box(sys: &VectorFieldSystem, x: &[f64], r: f64) -> Vec<f64> {
    reach_box(sys, x, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::HTypeGroup;

    fn grushin_basis() -> CommutatorBasis {
        let sys = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        sys.build_commutator_basis(&[vec![0.0; 3], vec![1.0, 0.0, 0.0]], 2).unwrap()
    }

    #[test]
    fn euclidean_profile_counts_permutations() {
        let sys = VectorFieldSystem::builtin("euclidean3").unwrap();
        let b = sys.build_commutator_basis(&[vec![0.0; 3]], 1).unwrap();
        let p = nsw_profile(&b, &[0.3, 0.1, -2.0]).unwrap();
        assert_eq!(p.terms, vec![(6.0, 3)]);
        assert_eq!((p.q_at_x, p.q_local), (3, 3));
    }

    #[test]
    fn grushin_dimensions() {
        let b = grushin_basis();
        assert_eq!(nsw_profile(&b, &[0.0; 3]).unwrap().q_at_x, 4);
        assert_eq!(nsw_profile(&b, &[1.0, 0.0, 0.0]).unwrap().q_at_x, 3);
        // the determinant a_(1,2,3) = x1 vanishes on the whole plane x1 = 0
        assert_eq!(nsw_profile(&b, &[0.0, 5.0, 7.0]).unwrap().q_at_x, 4);
        let (qx, q) = homogeneous_dimensions(&b, &[0.0; 3], &[vec![0.5, 0.5, 0.5], vec![-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!((qx, q), (4, 4));
    }

    #[test]
    fn routes_agree() {
        let b = grushin_basis();
        for x in [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-0.7, 0.1, 0.0]] {
            let a = nsw_profile_route(&b, &x, true).unwrap();
            let c = nsw_profile_route(&b, &x, false).unwrap();
            assert_eq!(a.terms.len(), c.terms.len());
            for (s, t) in a.terms.iter().zip(&c.terms) {
                assert_eq!(s.1, t.1);
                assert!((s.0 - t.0).abs() < 1e-12 * s.0);
            }
        }
    }

    #[test]
    fn rescale_is_exact() {
        let b = grushin_basis();
        let p = nsw_profile(&b, &[0.3, 0.0, 0.0]).unwrap().with_q_local(4);
        for &r in &[0.01, 0.1, 1.0, 10.0] {
            for &t in &[0.0, 0.1, 0.5, 1.0] {
                assert!(p.rescale_defect(r, t) <= 1e-12);
            }
            let s = p.log_slope(r);
            assert!((3.0..=4.0).contains(&s));
        }
        assert_eq!(p.rescale_defect(1.0, 1.0), 0.0);
    }

    #[test]
    fn euclidean_ball_volume() {
        let o = EuclideanDistance { n: 3 };
        let v = ball_volume(&o, &[0.0; 3], 1.0, 200_000, 7).unwrap();
        let exact = 4.0 * std::f64::consts::PI / 3.0;
        assert!((v.estimate - exact).abs() < 0.02 * exact);
        assert_eq!(v.lower, v.upper);
        let again = ball_volume(&o, &[0.0; 3], 1.0, 200_000, 7).unwrap();
        assert_eq!(v.estimate.to_bits(), again.estimate.to_bits());
    }

    #[test]
    fn htype_volume_scales_with_q() {
        let g = HTypeGroup::new(1, 1).unwrap();
        let o = HTypeDistance::new(g);
        let a = ball_volume(&o, &[0.0; 3], 0.5, 100_000, 1).unwrap();
        let b = ball_volume(&o, &[0.0; 3], 1.0, 100_000, 1).unwrap();
        assert!((b.estimate / a.estimate - 16.0).abs() < 0.05 * 16.0);
    }

    #[test]
    fn fitted_exponent_of_monomial() {
        let r = [0.1, 0.2, 0.4];
        let v: Vec<f64> = r.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        assert!((fitted_exponent(&r, &v) - 4.0).abs() < 1e-12);
    }
}
