use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row and column factor lists (plus optional bond caps) describing how an
/// `I × J` matrix is split into `m` local tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationPlan {
    row_factors: Vec<usize>,
    col_factors: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bond_caps: Option<Vec<usize>>,
}

impl FactorizationPlan {
    pub fn new(row_factors: Vec<usize>, col_factors: Vec<usize>) -> Result<Self> {
        let plan = Self {
            row_factors,
            col_factors,
            bond_caps: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_caps(mut self, caps: Vec<usize>) -> Result<Self> {
        self.bond_caps = Some(caps);
        self.validate()?;
        Ok(self)
    }

    pub fn without_caps(mut self) -> Self {
        self.bond_caps = None;
        self
    }

    /// Checks the structural invariants; deserialized plans should be
    /// validated before use.
    pub fn validate(&self) -> Result<()> {
        let m = self.row_factors.len();
        if m == 0 {
            return Err(Error::Config("plan needs at least one local tensor".into()));
        }
        if self.col_factors.len() != m {
            return Err(Error::Config(format!(
                "{} row factors but {} column factors",
                m,
                self.col_factors.len()
            )));
        }
        if self.row_factors.iter().chain(&self.col_factors).any(|&f| f == 0) {
            return Err(Error::Config("factors must be positive".into()));
        }
        if let Some(caps) = &self.bond_caps {
            if caps.len() != m - 1 {
                return Err(Error::Config(format!(
                    "expected {} bond caps, got {}",
                    m - 1,
                    caps.len()
                )));
            }
            if caps.contains(&0) {
                return Err(Error::Config("bond caps must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of local tensors.
    pub fn m(&self) -> usize {
        self.row_factors.len()
    }

    pub fn row_factors(&self) -> &[usize] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[usize] {
        &self.col_factors
    }

    pub fn bond_caps(&self) -> Option<&[usize]> {
        self.bond_caps.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.row_factors.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.col_factors.iter().product()
    }

    /// The same factorization for the transposed matrix.
    pub fn transposed(&self) -> Self {
        Self {
            row_factors: self.col_factors.clone(),
            col_factors: self.row_factors.clone(),
            bond_caps: self.bond_caps.clone(),
        }
    }

    pub fn bond_dimensions(&self) -> Vec<usize> {
        bond_dimensions(self)
    }

    /// Bond extents actually used by `decompose`: the maximal bonds clipped by
    /// the caps.
    pub fn effective_bonds(&self) -> Vec<usize> {
        let full = self.bond_dimensions();
        match &self.bond_caps {
            None => full,
            Some(caps) => full.iter().zip(caps).map(|(&d, &c)| d.min(c)).collect(),
        }
    }
}

/// Maximal (untruncated) bond dimensions `d_1 .. d_{m-1}`: at each cut, the
/// smaller of the left and right products of `i_k * j_k`.
pub fn bond_dimensions(plan: &FactorizationPlan) -> Vec<usize> {
    let pairs: Vec<usize> = plan
        .row_factors
        .iter()
        .zip(&plan.col_factors)
        .map(|(&i, &j)| i * j)
        .collect();
    let total: u128 = pairs.iter().map(|&p| p as u128).product();
    let mut left: u128 = 1;
    let mut out = Vec::with_capacity(pairs.len().saturating_sub(1));
    for &p in &pairs[..pairs.len().saturating_sub(1)] {
        left *= p as u128;
        let right = total / left;
        out.push(left.min(right) as usize);
    }
    out
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Positions visited from the central slot outward: c, c-1, c+1, c-2, ...
fn middle_out(m: usize) -> Vec<usize> {
    let c = m / 2;
    let mut order = vec![c];
    for off in 1..=m {
        if off <= c {
            order.push(c - off);
        }
        if c + off < m {
            order.push(c + off);
        }
    }
    order
}

fn spread(n: usize, m: usize) -> Vec<usize> {
    let mut factors = vec![1usize; m];
    let mut primes = prime_factors(n);
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let order = middle_out(m);
    for (k, p) in primes.into_iter().enumerate() {
        factors[order[k % m]] *= p;
    }
    factors
}

/// Deterministic automatic plan: the prime factors of `rows` and `cols`
/// (largest first) are dealt round-robin starting at the central slot and
/// moving outward, so the middle factors end up largest. Slots that receive
/// no prime keep the factor 1.
pub fn plan_factorization(rows: usize, cols: usize, m: usize) -> Result<FactorizationPlan> {
    if m == 0 || rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "cannot plan {rows}x{cols} into {m} local tensors"
        )));
    }
    FactorizationPlan::new(spread(rows, m), spread(cols, m))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl fmt::Display for FactorizationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i={};j={}", join(&self.row_factors), join(&self.col_factors))?;
        if let Some(caps) = &self.bond_caps {
            write!(f, ";caps={}", join(caps))?;
        }
        Ok(())
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad factor {t:?}: {e}")))
        })
        .collect()
}

/// Parses `i=3,4,4;j=4,8,6` with an optional `;caps=..` part.
impl FromStr for FactorizationPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut rows = None;
        let mut cols = None;
        let mut caps = None;
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in {part:?}")))?;
            match key.trim() {
                "i" => rows = Some(parse_list(val)?),
                "j" => cols = Some(parse_list(val)?),
                "caps" => caps = Some(parse_list(val)?),
                other => return Err(Error::Config(format!("unknown plan key {other:?}"))),
            }
        }
        let plan = Self::new(
            rows.ok_or_else(|| Error::Config("plan is missing i=".into()))?,
            cols.ok_or_else(|| Error::Config("plan is missing j=".into()))?,
        )?;
        match caps {
            Some(c) => plan.with_caps(c),
            None => Ok(plan),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bond_dims_large_plan() {
        let p = FactorizationPlan::new(vec![3, 4, 4, 4, 4], vec![4, 4, 8, 6, 4]).unwrap();
        assert_eq!(p.rows(), 768);
        assert_eq!(p.cols(), 3072);
        assert_eq!(bond_dimensions(&p), vec![12, 192, 384, 16]);
        assert_eq!(bond_dimensions(&p.transposed()), vec![12, 192, 384, 16]);
    }

    #[test]
    fn bond_dims_small_plans() {
        let p = FactorizationPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        assert_eq!(bond_dimensions(&p), vec![4]);
        // pair products 8, 6, 12: min(8, 72) and min(48, 12)
        let q = FactorizationPlan::new(vec![4, 2, 3], vec![2, 3, 4]).unwrap();
        assert_eq!(bond_dimensions(&q), vec![8, 12]);
        let single = FactorizationPlan::new(vec![5], vec![7]).unwrap();
        assert!(bond_dimensions(&single).is_empty());
    }

    #[test]
    fn planner_examples() {
        let p = plan_factorization(768, 3072, 5).unwrap();
        assert_eq!(p.rows(), 768);
        assert_eq!(p.cols(), 3072);
        assert_eq!(p.m(), 5);

        let prime = plan_factorization(7, 7, 3).unwrap();
        assert_eq!(prime.row_factors(), &[1, 7, 1]);

        let sq = plan_factorization(24, 24, 3).unwrap();
        assert_eq!(sq.row_factors(), &[2, 6, 2]);
        assert_eq!(sq.col_factors(), &[2, 6, 2]);

        assert_eq!(plan_factorization(1, 1, 4).unwrap().row_factors(), &[1, 1, 1, 1]);
        assert!(plan_factorization(4, 4, 0).is_err());
    }

    #[test]
    fn validation() {
        assert!(FactorizationPlan::new(vec![2, 2], vec![2]).is_err());
        assert!(FactorizationPlan::new(vec![2, 0], vec![2, 2]).is_err());
        let p = FactorizationPlan::new(vec![2, 2, 2], vec![2, 2, 2]).unwrap();
        assert!(p.clone().with_caps(vec![1]).is_err());
        assert!(p.clone().with_caps(vec![1, 0]).is_err());
        assert_eq!(p.with_caps(vec![3, 100]).unwrap().effective_bonds(), vec![3, 4]);
    }

    #[test]
    fn parse_and_display() {
        let p: FactorizationPlan = "i=3,4,4,4,4;j=4,4,8,6,4".parse().unwrap();
        assert_eq!(p.to_string(), "i=3,4,4,4,4;j=4,4,8,6,4");
        let q: FactorizationPlan = "i=2,2; j=2,2; caps=1".parse().unwrap();
        assert_eq!(q.bond_caps(), Some(&[1][..]));
        assert!("i=2,2".parse::<FactorizationPlan>().is_err());
        assert!("i=2;j=x".parse::<FactorizationPlan>().is_err());
    }
}
