//! Hörmander vector-field systems, commutator bases and H-type groups.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::poly::Poly;

/// Coefficients of one vector field: component `k` is the polynomial in front
/// of `∂_k`.
pub type Field = Vec<Poly>;

/// Lie bracket `[a, b]` of two polynomial vector fields.
pub fn bracket(a: &[Poly], b: &[Poly]) -> Field {
    let n = a.len();
    (0..n)
        .map(|k| {
            let mut acc = Poly::zero(n);
            for j in 0..n {
                if !a[j].is_zero() {
                    acc = acc.add(&a[j].mul(&b[k].deriv(j)));
                }
                if !b[j].is_zero() {
                    acc = acc.sub(&b[j].mul(&a[k].deriv(j)));
                }
            }
            acc
        })
        .collect()
}

pub fn field_is_zero(f: &[Poly]) -> bool {
    f.iter().all(Poly::is_zero)
}

pub fn eval_field(f: &[Poly], x: &[f64]) -> Vec<f64> {
    f.iter().map(|p| p.eval(x)).collect()
}

/// Numerical rank with the cut `1e-9 * sigma_max`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-9 * smax).count()
}

fn columns_matrix(fields: &[Field], x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, fields.len(), |r, c| fields[c][r].eval(x))
}

/// A family of polynomial vector fields `X_1..X_m` on `R^n`.
#[derive(Clone, Debug)]
pub struct VectorFieldSystem {
    name: String,
    n: usize,
    fields: Vec<Field>,
    group: Option<HTypeGroup>,
    r0: f64,
}

impl VectorFieldSystem {
    pub fn new(name: impl Into<String>, n: usize, fields: Vec<Field>) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "ambient dimension must be at least 3, got {n}"
            )));
        }
        if fields.is_empty() {
            return Err(Error::InvalidArgument("a system needs at least one field".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.len() != n || f.iter().any(|p| p.nvars() != n) {
                return Err(Error::InvalidArgument(format!(
                    "field {} does not have {n} components in {n} variables",
                    i + 1
                )));
            }
        }
        Ok(VectorFieldSystem {
            name: name.into(),
            n,
            fields,
            group: None,
            r0: 1.0,
        })
    }

    /// Parses one field per line, each line holding `n` comma-separated
    /// polynomial expressions in `x1..xn`. `#` starts a comment.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            rows.push((lineno + 1, line.split(',').map(|s| s.to_string()).collect()));
        }
        let n = match rows.first() {
            Some((_, r)) => r.len(),
            None => {
                return Err(Error::Parse {
                    line: 1,
                    column: 1,
                    message: "no vector fields given".into(),
                })
            }
        };
        let mut fields = Vec::new();
        for (lineno, parts) in rows {
            if parts.len() != n {
                return Err(Error::Parse {
                    line: lineno,
                    column: 1,
                    message: format!("expected {n} components, found {}", parts.len()),
                });
            }
            let mut field = Vec::with_capacity(n);
            let mut offset = 0;
            for part in &parts {
                let p = Poly::parse(part, n).map_err(|e| match e {
                    Error::Parse { column, message, .. } => Error::Parse {
                        line: lineno,
                        column: column + offset,
                        message,
                    },
                    other => other,
                })?;
                offset += part.chars().count() + 1;
                field.push(p);
            }
            fields.push(field);
        }
        VectorFieldSystem::new(name, n, fields)
    }

    /// Built-in systems: `euclidean3`, `euclidean(n)`, `grushin-paper-example`,
    /// `heisenberg1` and `htype(k,q)`.
    pub fn builtin(name: &str) -> Result<Self> {
        let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        match compact.as_str() {
            "euclidean3" => Self::euclidean(3),
            "grushin-paper-example" => {
                let n = 3;
                let mut f1 = vec![Poly::zero(n); n];
                f1[0] = Poly::constant(n, 1.0);
                let mut f2 = vec![Poly::zero(n); n];
                f2[1] = Poly::constant(n, 1.0);
                let mut f3 = vec![Poly::zero(n); n];
                f3[2] = Poly::var(n, 0);
                VectorFieldSystem::new("grushin-paper-example", n, vec![f1, f2, f3])
            }
            "heisenberg1" => {
                let mut s = HTypeGroup::new(1, 1)?.system();
                s.name = "heisenberg1".into();
                Ok(s)
            }
            other => {
                if let Some(args) = other.strip_prefix("htype(").and_then(|s| s.strip_suffix(')')) {
                    let parts: Vec<&str> = args.split(',').collect();
                    if parts.len() == 2 {
                        if let (Ok(k), Ok(q)) = (parts[0].parse(), parts[1].parse()) {
                            return Ok(HTypeGroup::new(k, q)?.system());
                        }
                    }
                } else if let Some(arg) =
                    other.strip_prefix("euclidean(").and_then(|s| s.strip_suffix(')'))
                {
                    if let Ok(n) = arg.parse() {
                        return Self::euclidean(n);
                    }
                }
                Err(Error::UnknownSystem(name.to_string()))
            }
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &[
            "euclidean3",
            "euclidean(n)",
            "grushin-paper-example",
            "heisenberg1",
            "htype(k,q)",
        ]
    }

    pub fn euclidean(n: usize) -> Result<Self> {
        let fields = (0..n)
            .map(|i| {
                let mut f = vec![Poly::zero(n); n];
                f[i] = Poly::constant(n, 1.0);
                f
            })
            .collect();
        let name = if n == 3 { "euclidean3".to_string() } else { format!("euclidean({n})") };
        VectorFieldSystem::new(name, n, fields)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn group(&self) -> Option<&HTypeGroup> {
        self.group.as_ref()
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn with_r0(mut self, r0: f64) -> Self {
        self.r0 = r0;
        self
    }

    /// True when every coefficient is constant and the fields are the
    /// standard basis.
    pub fn is_euclidean(&self) -> bool {
        self.fields.len() == self.n
            && self.fields.iter().enumerate().all(|(i, f)| {
                f.iter().enumerate().all(|(k, p)| {
                    if k == i {
                        *p == Poly::constant(self.n, 1.0)
                    } else {
                        p.is_zero()
                    }
                })
            })
    }

    /// The `n×m` matrix whose column `i` is `X_i(x)`.
    pub fn eval_frame(&self, x: &[f64]) -> DMatrix<f64> {
        columns_matrix(&self.fields, x)
    }

    /// Writes the frame into a row-major `n×m` buffer.
    pub fn eval_frame_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.fields.len();
        for (i, f) in self.fields.iter().enumerate() {
            for (k, p) in f.iter().enumerate() {
                out[k * m + i] = p.eval(x);
            }
        }
    }

    pub fn bracket_field(&self, i: usize, j: usize) -> Field {
        bracket(&self.fields[i], &self.fields[j])
    }

    pub fn lie_bracket(&self, i: usize, j: usize, x: &[f64]) -> Vec<f64> {
        eval_field(&self.bracket_field(i, j), x)
    }

    pub fn build_commutator_basis(
        &self,
        samples: &[Vec<f64>],
        max_step: u32,
    ) -> Result<CommutatorBasis> {
        CommutatorBasis::build(self, samples, max_step)
    }
}

/// The fields `Y_1..Y_l` generated from the frame by iterated brackets.
#[derive(Clone, Debug)]
pub struct CommutatorBasis {
    n: usize,
    fields: Vec<Field>,
    degrees: Vec<u32>,
    parents: Vec<Option<(usize, usize)>>,
    max_step: u32,
    verified_on: Vec<Vec<f64>>,
}

impl CommutatorBasis {
    fn build(sys: &VectorFieldSystem, samples: &[Vec<f64>], max_step: u32) -> Result<Self> {
        if max_step == 0 {
            return Err(Error::InvalidArgument("max_step must be at least 1".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("at least one sample point is required".into()));
        }
        let n = sys.n;
        if let Some(bad) = samples.iter().find(|s| s.len() != n || s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("bad sample point {bad:?}")));
        }
        let mut fields = sys.fields.clone();
        let mut degrees = vec![1u32; fields.len()];
        let mut parents = vec![None; fields.len()];
        let mut ranks: Vec<usize> = samples.iter().map(|x| rank(&columns_matrix(&fields, x))).collect();
        let mut step = 1;
        while ranks.iter().any(|&r| r < n) {
            if step >= max_step {
                let idx = ranks.iter().position(|&r| r < n).unwrap();
                return Err(Error::HoermanderFailure {
                    sample: samples[idx].clone(),
                    max_step,
                });
            }
            step += 1;
            let existing = fields.len();
            for a in 0..existing {
                for b in (a + 1)..existing {
                    if degrees[a] + degrees[b] != step {
                        continue;
                    }
                    let y = bracket(&fields[a], &fields[b]);
                    if field_is_zero(&y) {
                        continue;
                    }
                    let mut trial = fields.clone();
                    trial.push(y.clone());
                    let new_ranks: Vec<usize> =
                        samples.iter().map(|x| rank(&columns_matrix(&trial, x))).collect();
                    if new_ranks.iter().zip(&ranks).any(|(new, old)| new > old) {
                        fields.push(y);
                        degrees.push(step);
                        parents.push(Some((a, b)));
                        ranks = new_ranks;
                    }
                }
            }
        }
        Ok(CommutatorBasis {
            n,
            fields,
            degrees,
            parents,
            max_step: step,
            verified_on: samples.to_vec(),
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    /// Parent indices of each generated field (`None` for the original frame).
    pub fn parents(&self) -> &[Option<(usize, usize)>] {
        &self.parents
    }

    pub fn max_step(&self) -> u32 {
        self.max_step
    }

    pub fn verified_on(&self) -> &[Vec<f64>] {
        &self.verified_on
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        columns_matrix(&self.fields, x)
    }

    pub fn lie_bracket(&self, i: usize, j: usize, x: &[f64]) -> Vec<f64> {
        eval_field(&bracket(&self.fields[i], &self.fields[j]), x)
    }
}

/// Octonion (or quaternion) product of imaginary basis units; returns the sign
/// and index of `e_a e_b` in the basis `e_0 = 1, e_1..e_7`.
fn cayley_product(a: usize, b: usize, triples: &[(usize, usize, usize)]) -> (f64, usize) {
    if a == 0 {
        return (1.0, b);
    }
    if b == 0 {
        return (1.0, a);
    }
    if a == b {
        return (-1.0, 0);
    }
    for &(i, j, k) in triples {
        let cyc = [(i, j, k), (j, k, i), (k, i, j)];
        for &(u, v, w) in &cyc {
            if (a, b) == (u, v) {
                return (1.0, w);
            }
            if (a, b) == (v, u) {
                return (-1.0, w);
            }
        }
    }
    unreachable!("incomplete multiplication table for units {a}, {b}")
}

const QUATERNION_TRIPLES: [(usize, usize, usize); 1] = [(1, 2, 3)];
const OCTONION_TRIPLES: [(usize, usize, usize); 7] = [
    (1, 2, 3),
    (1, 4, 5),
    (1, 7, 6),
    (2, 4, 6),
    (2, 5, 7),
    (3, 4, 7),
    (3, 6, 5),
];

/// Left multiplication by the unit `e_unit` on `R^dim`.
fn left_mult(unit: usize, dim: usize, triples: &[(usize, usize, usize)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let (s, k) = cayley_product(unit, j, triples);
        m[(k, j)] = s;
    }
    m
}

/// Heisenberg-type group on `R^{2k} x R^q` with the law
/// `(x,y)(x',y') = (x+x', y+y'+½<J_l x, x'>)`.
#[derive(Clone, Debug)]
pub struct HTypeGroup {
    k: usize,
    q: usize,
    j: Vec<DMatrix<f64>>,
    gauge_factor: f64,
}

impl HTypeGroup {
    pub fn new(k: usize, q: usize) -> Result<Self> {
        if k == 0 || q == 0 {
            return Err(Error::InvalidArgument("htype(k,q) needs k, q >= 1".into()));
        }
        let m = 2 * k;
        let (block, triples): (usize, &[(usize, usize, usize)]) = match q {
            1 => (2, &[]),
            2 | 3 if m % 4 == 0 => (4, &QUATERNION_TRIPLES),
            4..=7 if m % 8 == 0 => (8, &OCTONION_TRIPLES),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no Clifford structure implemented for k={k}, q={q} \
                     (need q=1, or q<=3 with 2k divisible by 4, or q<=7 with 2k divisible by 8)"
                )))
            }
        };
        let mut js = Vec::with_capacity(q);
        for l in 0..q {
            let unit_block = if block == 2 {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
            } else {
                left_mult(l + 1, block, triples)
            };
            let mut full = DMatrix::zeros(m, m);
            for b in 0..(m / block) {
                full.view_mut((b * block, b * block), (block, block))
                    .copy_from(&unit_block);
            }
            js.push(full);
        }
        Ok(HTypeGroup {
            k,
            q,
            j: js,
            gauge_factor: 16.0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horiz_dim(&self) -> usize {
        2 * self.k
    }

    pub fn center_dim(&self) -> usize {
        self.q
    }

    pub fn dim(&self) -> usize {
        2 * self.k + self.q
    }

    pub fn homogeneous_dim(&self) -> f64 {
        (2 * self.k + 2 * self.q) as f64
    }

    pub fn j_matrices(&self) -> &[DMatrix<f64>] {
        &self.j
    }

    /// Constant in front of `|y|^2` in the gauge.
    pub fn gauge_factor(&self) -> f64 {
        self.gauge_factor
    }

    /// Left-invariant first-layer frame as a polynomial system.
    pub fn system(&self) -> VectorFieldSystem {
        let m = self.horiz_dim();
        let n = self.dim();
        let fields = (0..m)
            .map(|jj| {
                let mut f = vec![Poly::zero(n); n];
                f[jj] = Poly::constant(n, 1.0);
                for (l, jl) in self.j.iter().enumerate() {
                    let mut c = Poly::zero(n);
                    for i in 0..m {
                        let a = jl[(jj, i)];
                        if a != 0.0 {
                            c = c.add(&Poly::var(n, i).scale(0.5 * a));
                        }
                    }
                    f[m + l] = c;
                }
                f
            })
            .collect();
        let mut s = VectorFieldSystem::new(format!("htype({},{})", self.k, self.q), n, fields)
            .expect("valid H-type frame");
        s.group = Some(self.clone());
        s
    }

    fn split<'a>(&self, a: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        a.split_at(self.horiz_dim())
    }

    pub fn product(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let m = self.horiz_dim();
        let (x, y) = self.split(a);
        let (xp, yp) = self.split(b);
        let mut out = Vec::with_capacity(self.dim());
        out.extend(x.iter().zip(xp).map(|(u, v)| u + v));
        for l in 0..self.q {
            let jl = &self.j[l];
            let mut s = 0.0;
            for r in 0..m {
                let mut jx = 0.0;
                for c in 0..m {
                    jx += jl[(r, c)] * x[c];
                }
                s += jx * xp[r];
            }
            out.push(y[l] + yp[l] + 0.5 * s);
        }
        out
    }

    pub fn inverse(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|v| -v).collect()
    }

    pub fn dilate(&self, lambda: f64, a: &[f64]) -> Vec<f64> {
        let m = self.horiz_dim();
        a.iter()
            .enumerate()
            .map(|(i, v)| if i < m { lambda * v } else { lambda * lambda * v })
            .collect()
    }

    pub fn identity(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Kaplan gauge `(|x|^4 + 16|y|^2)^{1/4}`.
    pub fn kaplan_gauge(&self, a: &[f64]) -> f64 {
        let (x, y) = self.split(a);
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let y2: f64 = y.iter().map(|v| v * v).sum();
        (x2 * x2 + self.gauge_factor * y2).sqrt().sqrt()
    }

    /// Euclidean gradient of the gauge.
    pub fn gauge_euclidean_grad(&self, a: &[f64]) -> Result<Vec<f64>> {
        let nn = self.kaplan_gauge(a);
        if nn == 0.0 {
            return Err(Error::Singularity);
        }
        let (x, y) = self.split(a);
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let n3 = nn * nn * nn;
        let mut g: Vec<f64> = x.iter().map(|v| x2 * v / n3).collect();
        g.extend(y.iter().map(|v| 0.5 * self.gauge_factor * v / n3));
        Ok(g)
    }

    /// Horizontal gradient `XN(a)` evaluated through the frame.
    pub fn gauge_hgrad(&self, a: &[f64]) -> Result<Vec<f64>> {
        let g = self.gauge_euclidean_grad(a)?;
        let m = self.horiz_dim();
        let (x, _) = self.split(a);
        Ok((0..m)
            .map(|jj| {
                let mut v = g[jj];
                for (l, jl) in self.j.iter().enumerate() {
                    let mut c = 0.0;
                    for i in 0..m {
                        c += jl[(jj, i)] * x[i];
                    }
                    v += 0.5 * c * g[m + l];
                }
                v
            })
            .collect())
    }

    pub fn gauge_hgrad_sq(&self, a: &[f64]) -> Result<f64> {
        Ok(self.gauge_hgrad(a)?.iter().map(|v| v * v).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn euclidean_frame_is_identity() {
        let s = VectorFieldSystem::builtin("euclidean3").unwrap();
        let f = s.eval_frame(&[0.3, -1.0, 2.0]);
        assert_eq!(f, DMatrix::identity(3, 3));
        assert!(s.is_euclidean());
        assert_eq!(s.lie_bracket(0, 2, &[1.0, 2.0, 3.0]), vec![0.0; 3]);
    }

    #[test]
    fn grushin_frame_and_bracket() {
        let s = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let f = s.eval_frame(&[1.0, 0.0, 0.0]);
        assert_eq!(f.column(2).iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        let f = s.eval_frame(&[0.0, 5.0, 7.0]);
        assert_eq!(f.column(2).iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0]);
        for x in [[0.0, 0.0, 0.0], [3.0, -1.0, 2.0]] {
            assert_eq!(s.lie_bracket(0, 2, &x), vec![0.0, 0.0, 1.0]);
            assert_eq!(s.lie_bracket(2, 0, &x), vec![0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn heisenberg_bracket_matches_group_law() {
        let s = VectorFieldSystem::builtin("heisenberg1").unwrap();
        // X1 = ∂1 + ½x2 ∂3, X2 = ∂2 − ½x1 ∂3, so [X1,X2] = −∂3
        let fields = s.fields();
        assert_eq!(fields[0][2], Poly::var(3, 1).scale(0.5));
        assert_eq!(fields[1][2], Poly::var(3, 0).scale(-0.5));
        assert_eq!(s.lie_bracket(0, 1, &[0.7, -0.2, 4.0]), vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn left_invariance_of_frame() {
        // X_j(g) = d/ds g·(s e_j) at s = 0
        let g = HTypeGroup::new(2, 3).unwrap();
        let sys = g.system();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = rand_point(&mut rng, g.dim());
            let frame = sys.eval_frame(&a);
            for jj in 0..g.horiz_dim() {
                let mut e = vec![0.0; g.dim()];
                e[jj] = 1.0;
                let h = 1e-6;
                let plus = g.product(&a, &e.iter().map(|v| v * h).collect::<Vec<_>>());
                let minus = g.product(&a, &e.iter().map(|v| -v * h).collect::<Vec<_>>());
                for k in 0..g.dim() {
                    let fd = (plus[k] - minus[k]) / (2.0 * h);
                    assert!((fd - frame[(k, jj)]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn commutator_basis_examples() {
        let e = VectorFieldSystem::builtin("euclidean3").unwrap();
        let b = e.build_commutator_basis(&[vec![0.0; 3]], 1).unwrap();
        assert_eq!(b.degrees(), &[1, 1, 1]);

        let g = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let samples = vec![vec![0.0; 3], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, -1.0]];
        let b = g.build_commutator_basis(&samples, 2).unwrap();
        assert_eq!(b.degrees(), &[1, 1, 1, 2]);
        assert_eq!(b.parents()[3], Some((0, 2)));
        assert_eq!(b.max_step(), 2);
        for x in &samples {
            assert_eq!(rank(&b.eval(x)), 3);
        }

        match g.build_commutator_basis(&[vec![0.0; 3]], 1) {
            Err(Error::HoermanderFailure { sample, .. }) => assert_eq!(sample, vec![0.0; 3]),
            other => panic!("expected HoermanderFailure, got {other:?}"),
        }
    }

    #[test]
    fn htype_basis_has_step_two() {
        for (k, q) in [(1, 1), (2, 1), (2, 2), (2, 3), (4, 5), (4, 7)] {
            let g = HTypeGroup::new(k, q).unwrap();
            let sys = g.system();
            let b = sys.build_commutator_basis(&[g.identity()], 2).unwrap();
            assert_eq!(b.len(), g.dim());
            assert_eq!(b.degrees().iter().filter(|&&d| d == 2).count(), q);
        }
        assert!(HTypeGroup::new(1, 2).is_err());
        assert!(HTypeGroup::new(2, 4).is_err());
        assert!(HTypeGroup::new(4, 8).is_err());
    }

    #[test]
    fn clifford_relations() {
        for (k, q) in [(1, 1), (3, 1), (2, 3), (4, 7)] {
            let g = HTypeGroup::new(k, q).unwrap();
            let m = g.horiz_dim();
            let id = DMatrix::<f64>::identity(m, m);
            for a in 0..q {
                let ja = &g.j_matrices()[a];
                assert_eq!(ja.transpose(), -ja);
                for b in 0..q {
                    let jb = &g.j_matrices()[b];
                    let anti = ja * jb + jb * ja;
                    let expect = if a == b { &id * -2.0 } else { DMatrix::zeros(m, m) };
                    assert_eq!(anti, expect, "k={k} q={q} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn antisymmetry_and_jacobi_are_exact() {
        let g = HTypeGroup::new(2, 3).unwrap();
        let sys = g.system();
        let gr = VectorFieldSystem::builtin("grushin-paper-example").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s in [&sys, &gr] {
            let b = s.build_commutator_basis(&[vec![0.0; s.ambient_dim()]], 3).unwrap();
            let f = b.fields();
            let l = f.len();
            for _ in 0..100 {
                let (i, j, k) = (rng.gen_range(0..l), rng.gen_range(0..l), rng.gen_range(0..l));
                let ij = bracket(&f[i], &f[j]);
                let ji = bracket(&f[j], &f[i]);
                for c in 0..s.ambient_dim() {
                    assert!(ij[c].add(&ji[c]).is_zero());
                }
                let t1 = bracket(&f[i], &bracket(&f[j], &f[k]));
                let t2 = bracket(&f[j], &bracket(&f[k], &f[i]));
                let t3 = bracket(&f[k], &bracket(&f[i], &f[j]));
                for c in 0..s.ambient_dim() {
                    assert!(t1[c].add(&t2[c]).add(&t3[c]).is_zero());
                }
                let x = rand_point(&mut rng, s.ambient_dim());
                let v = b.lie_bracket(i, j, &x);
                let w = b.lie_bracket(j, i, &x);
                assert!(v.iter().zip(&w).all(|(a, b)| a == &-b));
            }
        }
    }

    #[test]
    fn gauge_values() {
        let g = HTypeGroup::new(1, 1).unwrap();
        assert_eq!(g.kaplan_gauge(&g.identity()), 0.0);
        assert_eq!(g.inverse(&g.identity()), g.identity());
        assert_eq!(g.kaplan_gauge(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(g.kaplan_gauge(&[0.0, 0.0, 1.0]), 2.0);
        assert!(matches!(g.gauge_hgrad_sq(&g.identity()), Err(Error::Singularity)));
    }

    #[test]
    fn gauge_hgrad_matches_closed_form() {
        // |XN|^2 = |x|^2 / N^2 for the ½ convention
        let g = HTypeGroup::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = rand_point(&mut rng, g.dim());
            let x2: f64 = a[..4].iter().map(|v| v * v).sum();
            let nn = g.kaplan_gauge(&a);
            let got = g.gauge_hgrad_sq(&a).unwrap();
            assert!((got - x2 / (nn * nn)).abs() < 1e-12 * (1.0 + got));
            assert!(got <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gauge_power_is_harmonic_for_p2() {
        // Σ X_j^2 N^{2-Q} vanishes away from the identity
        let g = HTypeGroup::new(1, 1).unwrap();
        let qd = g.homogeneous_dim();
        let f = |a: &[f64]| g.kaplan_gauge(a).powf(2.0 - qd);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = rand_point(&mut rng, 3);
            let h = 1e-3;
            let mut lap = 0.0;
            for jj in 0..2 {
                // second derivative along the integral curve s ↦ a·exp(s X_j)
                let mut e = vec![0.0; 3];
                e[jj] = h;
                let plus = g.product(&a, &e);
                e[jj] = -h;
                let minus = g.product(&a, &e);
                lap += (f(&plus) - 2.0 * f(&a) + f(&minus)) / (h * h);
            }
            let scale = f(&a) / g.kaplan_gauge(&a).powi(2);
            assert!(lap.abs() < 1e-4 * scale, "lap = {lap}, scale = {scale}");
        }
    }

    #[test]
    fn group_axioms_and_homogeneity() {
        let g = HTypeGroup::new(4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = rand_point(&mut rng, g.dim());
            let b = rand_point(&mut rng, g.dim());
            let c = rand_point(&mut rng, g.dim());
            let l = g.product(&g.product(&a, &b), &c);
            let r = g.product(&a, &g.product(&b, &c));
            assert!(l.iter().zip(&r).all(|(u, v)| (u - v).abs() < 1e-12));
            let e = g.product(&a, &g.inverse(&a));
            assert!(e.iter().all(|v| v.abs() < 1e-12));
        }
        for _ in 0..50 {
            let a = rand_point(&mut rng, g.dim());
            let lam = rng.gen_range(0.01..10.0);
            let d = g.kaplan_gauge(&g.dilate(lam, &a)) - lam * g.kaplan_gauge(&a);
            assert!(d.abs() < 1e-12 * (1.0 + lam));
        }
    }

    #[test]
    fn parse_text_system() {
        let s = VectorFieldSystem::parse("t", "# grushin\n1, 0, 0\n0, 1, 0\n0, 0, x1\n").unwrap();
        assert_eq!(s.num_fields(), 3);
        assert_eq!(s.lie_bracket(0, 2, &[0.0; 3]), vec![0.0, 0.0, 1.0]);
        match VectorFieldSystem::parse("t", "1,0,0\n0,1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match VectorFieldSystem::parse("t", "1,0,0\n0,1,x9\n") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            VectorFieldSystem::builtin("nope"),
            Err(Error::UnknownSystem(_))
        ));
    }
}
