//! Sparse multivariate polynomials with real coefficients.
//!
//! Vector-field coefficients are kept in this form so that Lie brackets are
//! computed symbolically. Coefficients that cancel to exactly zero are
//! dropped, which makes identities such as antisymmetry and Jacobi exact for
//! the dyadic coefficients used by the built-in systems.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Exponent vector of a monomial.
pub type Exponents = Vec<u32>;

#[derive(Clone, PartialEq, Debug)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Exponents, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate function `x_{i+1}` (zero-based index `i`).
    pub fn var(nvars: usize, i: usize) -> Self {
        assert!(i < nvars, "variable index {i} out of range for {nvars} variables");
        let mut e = vec![0; nvars];
        e[i] = 1;
        let mut p = Poly::zero(nvars);
        p.add_term(e, 1.0);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    fn add_term(&mut self, e: Exponents, c: f64) {
        if c == 0.0 {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(e) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.add_term(e.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, &c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = Poly::zero(self.nvars);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                let e: Exponents = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut out = Poly::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Partial derivative with respect to variable `i` (zero-based).
    pub fn deriv(&self, i: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, &c) in &self.terms {
            if e[i] > 0 {
                let mut e2 = e.clone();
                e2[i] -= 1;
                out.add_term(e2, c * e[i] as f64);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert!(x.len() >= self.nvars);
        let mut acc = 0.0;
        for (e, &c) in &self.terms {
            let mut m = c;
            for (xi, &k) in x.iter().zip(e) {
                if k > 0 {
                    m *= xi.powi(k as i32);
                }
            }
            acc += m;
        }
        acc
    }

    /// Re-expands `p(base + d)` as a polynomial in `d`.
    pub fn shifted(&self, base: &[f64]) -> Poly {
        let n = self.nvars;
        let subs: Vec<Poly> = (0..n)
            .map(|i| Poly::constant(n, base[i]).add(&Poly::var(n, i)))
            .collect();
        let mut out = Poly::zero(n);
        for (e, &c) in &self.terms {
            let mut m = Poly::constant(n, c);
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    m = m.mul(&subs[i].pow(k));
                }
            }
            out = out.add(&m);
        }
        out
    }

    /// Upper bound of `|p(base + d)|` over the box `|d_i| <= w_i`, given the
    /// polynomial already shifted to `base`.
    pub fn abs_bound_on_box(&self, half_widths: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, &c)| {
                let mut m = c.abs();
                for (w, &k) in half_widths.iter().zip(e) {
                    if k > 0 {
                        m *= w.powi(k as i32);
                    }
                }
                m
            })
            .sum()
    }

    /// Parses an expression in the variables `x1..x{nvars}` using `+ - * ^`,
    /// parentheses, and integer or decimal constants.
    pub fn parse(src: &str, nvars: usize) -> Result<Poly> {
        let mut p = Parser {
            chars: src.char_indices().collect(),
            pos: 0,
            nvars,
        };
        let out = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(out)
    }
}

/// Flat evaluation form of a [`Poly`] for hot loops.
#[derive(Clone, Debug)]
pub struct CompiledPoly {
    constant: f64,
    terms: Vec<(f64, Vec<(usize, i32)>)>,
}

impl CompiledPoly {
    pub fn new(p: &Poly) -> Self {
        let mut constant = 0.0;
        let mut terms = Vec::new();
        for (e, c) in p.terms() {
            let factors: Vec<(usize, i32)> = e
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(i, &k)| (i, k as i32))
                .collect();
            if factors.is_empty() {
                constant += c;
            } else {
                terms.push((c, factors));
            }
        }
        CompiledPoly { constant, terms }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = self.constant;
        for (c, factors) in &self.terms {
            let mut m = *c;
            for &(i, k) in factors {
                m *= if k == 1 { x[i] } else { x[i].powi(k) };
            }
            acc += m;
        }
        acc
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, &c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, &k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, k)?,
                }
            }
        }
        Ok(())
    }
}

struct Parser {
    chars: Vec<(usize, char)>,
    pos: usize,
    nvars: usize,
}

impl Parser {
    fn error(&self, message: &str) -> Error {
        let column = self
            .chars
            .get(self.pos)
            .map(|&(i, _)| i + 1)
            .unwrap_or_else(|| self.chars.last().map(|&(i, _)| i + 2).unwrap_or(1));
        Error::Parse {
            line: 0,
            column,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].1.is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn expr(&mut self) -> Result<Poly> {
        let mut acc = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                '+' => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                '-' => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.unary()?;
        while let Some('*') = self.peek() {
            self.pos += 1;
            acc = acc.mul(&self.unary()?);
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Poly> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(self.unary()?.scale(-1.0))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Poly> {
        let base = self.atom()?;
        if let Some('^') = self.peek() {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].1.is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.error("expected a non-negative integer exponent"));
            }
            let k: u32 = self.slice(start).parse().map_err(|_| self.error("bad exponent"))?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn slice(&self, start: usize) -> String {
        self.chars[start..self.pos].iter().map(|&(_, c)| c).collect()
    }

    fn atom(&mut self) -> Result<Poly> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some('x') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.chars.len() && self.chars[self.pos].1.is_ascii_digit() {
                    self.pos += 1;
                }
                let idx: usize = self
                    .slice(start)
                    .parse()
                    .map_err(|_| self.error("expected a variable index after `x`"))?;
                if idx == 0 || idx > self.nvars {
                    return Err(self.error(&format!(
                        "variable x{idx} outside x1..x{}",
                        self.nvars
                    )));
                }
                Ok(Poly::var(self.nvars, idx - 1))
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].1.is_ascii_digit() || self.chars[self.pos].1 == '.')
                {
                    self.pos += 1;
                }
                let v: f64 = self
                    .slice(start)
                    .parse()
                    .map_err(|_| self.error("malformed number"))?;
                Ok(Poly::constant(self.nvars, v))
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_eval() {
        let p = Poly::parse("2*x1^2 - 0.5*x2*x3 + 3", 3).unwrap();
        assert_eq!(p.eval(&[1.0, 2.0, 4.0]), 2.0 - 4.0 + 3.0);
        let q = Poly::parse("(x1 + x2)^2", 2).unwrap();
        assert_eq!(q.eval(&[1.0, 2.0]), 9.0);
        assert_eq!(Poly::parse("-x1", 1).unwrap().eval(&[3.0]), -3.0);
    }

    #[test]
    fn parse_errors() {
        assert!(Poly::parse("x4", 3).is_err());
        assert!(Poly::parse("x1 +", 3).is_err());
        assert!(Poly::parse("x1 / 2", 3).is_err());
        assert!(Poly::parse("(x1", 3).is_err());
    }

    #[test]
    fn cancellation_is_exact() {
        let a = Poly::parse("0.5*x1*x2 + x3", 3).unwrap();
        let z = a.sub(&a);
        assert!(z.is_zero());
    }

    #[test]
    fn derivative() {
        let p = Poly::parse("x1^3*x2 + x2", 2).unwrap();
        let d = p.deriv(0);
        assert_eq!(d.eval(&[2.0, 1.0]), 12.0);
        assert!(p.deriv(0).deriv(1).deriv(1).is_zero());
    }

    #[test]
    fn shift_matches_eval() {
        let p = Poly::parse("x1^2*x3 - 3*x2 + 1.25", 3).unwrap();
        let base = [0.3, -1.2, 2.0];
        let s = p.shifted(&base);
        let d = [0.1, 0.2, -0.05];
        let c = CompiledPoly::new(&p);
        assert!((c.eval(&base) - p.eval(&base)).abs() < 1e-14);
        let x: Vec<f64> = base.iter().zip(&d).map(|(a, b)| a + b).collect();
        assert!((s.eval(&d) - p.eval(&x)).abs() < 1e-12);
        // box bound dominates values inside the box
        let w = [0.1, 0.2, 0.05];
        assert!(s.abs_bound_on_box(&w) >= s.eval(&d).abs());
    }
}
