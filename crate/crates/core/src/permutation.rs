//! Factorization orders and the two attention masks derived from them.
//!
//! A plan draws one uniform noise value per token; the prediction order is
//! the ascending argsort of the noise. Token `i` may read content from token
//! `j` in the encoder iff `key_i >= key_j` (content mask) and in the decoder
//! iff `key_i > key_j` (query mask), where `key_i = (noise_i, i)` so that
//! ties resolve by index and both masks stay consistent with the order.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::numerics::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("a plan needs at least one token")]
    Empty,
    #[error("noise value {value} at token {index} is not finite")]
    NonFiniteNoise { index: usize, value: f64 },
    #[error("token {token} out of range for plan of {n}")]
    TokenOutOfRange { token: usize, n: usize },
    #[error("order is not a permutation of 0..{0}")]
    NotAPermutation(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationPlan {
    pub noise: Vec<f64>,
    /// `order[t]` is the token predicted at step `t`.
    pub order: Vec<usize>,
    /// `rank[token]` is the step at which `token` is predicted.
    pub rank: Vec<usize>,
    pub content_mask: Mask,
    pub query_mask: Mask,
}

impl PermutationPlan {
    pub fn from_noise(noise: Vec<f64>) -> Result<Self, PlanError> {
        let n = noise.len();
        if n == 0 {
            return Err(PlanError::Empty);
        }
        if let Some((index, &value)) = noise.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(PlanError::NonFiniteNoise { index, value });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
        let mut rank = vec![0; n];
        for (t, &tok) in order.iter().enumerate() {
            rank[tok] = t;
        }
        let content_mask = Mask::from_fn(n, n, |i, j| rank[i] >= rank[j]);
        let query_mask = Mask::from_fn(n, n, |i, j| rank[i] > rank[j]);
        Ok(Self {
            noise,
            order,
            rank,
            content_mask,
            query_mask,
        })
    }

    /// Plan whose prediction order is exactly `order`.
    pub fn from_order(order: &[usize]) -> Result<Self, PlanError> {
        let n = order.len();
        let mut noise = vec![f64::NAN; n];
        for (t, &tok) in order.iter().enumerate() {
            if tok >= n || !noise[tok].is_nan() {
                return Err(PlanError::NotAPermutation(n));
            }
            noise[tok] = t as f64 / n as f64;
        }
        Self::from_noise(noise)
    }

    pub fn n(&self) -> usize {
        self.noise.len()
    }

    /// Lexicographic `(noise_i, i) >= (noise_j, j)`.
    pub fn key_ge(&self, i: usize, j: usize) -> bool {
        self.noise[i]
            .total_cmp(&self.noise[j])
            .then(i.cmp(&j))
            .is_ge()
    }

    pub fn first_token(&self) -> usize {
        self.order[0]
    }

    pub fn last_token(&self) -> usize {
        self.order[self.n() - 1]
    }
}

/// Plan from i.i.d. uniform noise in `[0, 1)`.
pub fn sample_plan(n: usize, rng: &mut impl Rng) -> Result<PermutationPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::Empty);
    }
    PermutationPlan::from_noise((0..n).map(|_| rng.random::<f64>()).collect())
}

/// Fixed raster order `0, 1, …, n-1`.
pub fn raster_plan(n: usize) -> Result<PermutationPlan, PlanError> {
    PermutationPlan::from_noise((0..n).map(|i| i as f64 / n.max(1) as f64).collect())
}

/// Number of tokens strictly preceding `token` in the order.
pub fn visible_count(plan: &PermutationPlan, token: usize) -> Result<usize, PlanError> {
    plan.rank
        .get(token)
        .copied()
        .ok_or(PlanError::TokenOutOfRange { token, n: plan.n() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Shape,
    OrderNotArgsort,
    RankInconsistent,
    ContentComparator { row: usize, col: usize },
    QueryComparator { row: usize, col: usize },
    ContentDiagonal { row: usize },
    QueryDiagonal { row: usize },
    ContentPopcount { found: usize, expected: usize },
    QueryPopcount { found: usize, expected: usize },
    ContentNotTriangular,
    QueryNotTriangular,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape => write!(f, "mask shape"),
            Violation::OrderNotArgsort => write!(f, "order is not the argsort of the noise"),
            Violation::RankInconsistent => write!(f, "rank is not the inverse of order"),
            Violation::ContentComparator { row, col } => {
                write!(f, "content comparator at ({row},{col})")
            }
            Violation::QueryComparator { row, col } => {
                write!(f, "query comparator at ({row},{col})")
            }
            Violation::ContentDiagonal { row } => write!(f, "content diagonal at {row}"),
            Violation::QueryDiagonal { row } => write!(f, "query diagonal at {row}"),
            Violation::ContentPopcount { found, expected } => {
                write!(f, "content popcount {found} != {expected}")
            }
            Violation::QueryPopcount { found, expected } => {
                write!(f, "query popcount {found} != {expected}")
            }
            Violation::ContentNotTriangular => {
                write!(f, "content mask not lower-triangular under the order")
            }
            Violation::QueryNotTriangular => write!(
                f,
                "query mask not strictly lower-triangular under the order"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanReport {
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural invariant of a plan.
pub fn verify_plan(p: &PermutationPlan) -> PlanReport {
    let n = p.n();
    let mut v = Vec::new();
    let shape_ok = |m: &Mask| m.rows() == n && m.cols() == n;
    if !shape_ok(&p.content_mask)
        || !shape_ok(&p.query_mask)
        || p.order.len() != n
        || p.rank.len() != n
    {
        return PlanReport {
            violations: vec![Violation::Shape],
        };
    }
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| p.noise[a].total_cmp(&p.noise[b]).then(a.cmp(&b)));
    if sorted != p.order {
        v.push(Violation::OrderNotArgsort);
    }
    if p.order
        .iter()
        .enumerate()
        .any(|(t, &tok)| tok >= n || p.rank[tok] != t)
    {
        v.push(Violation::RankInconsistent);
    }
    for i in 0..n {
        if !p.content_mask.get(i, i) {
            v.push(Violation::ContentDiagonal { row: i });
        }
        if p.query_mask.get(i, i) {
            v.push(Violation::QueryDiagonal { row: i });
        }
        for j in 0..n {
            let ge = p.key_ge(i, j);
            let gt = ge && i != j;
            if p.content_mask.get(i, j) != ge {
                v.push(Violation::ContentComparator { row: i, col: j });
            }
            if p.query_mask.get(i, j) != gt {
                v.push(Violation::QueryComparator { row: i, col: j });
            }
        }
    }
    let (cc, qc) = (p.content_mask.count_visible(), p.query_mask.count_visible());
    if cc != n * (n + 1) / 2 {
        v.push(Violation::ContentPopcount {
            found: cc,
            expected: n * (n + 1) / 2,
        });
    }
    if qc != n * (n - 1) / 2 {
        v.push(Violation::QueryPopcount {
            found: qc,
            expected: n * (n - 1) / 2,
        });
    }
    // reorder rows/columns by the order: (t, u) -> mask[order[t]][order[u]]
    let permuted = |m: &Mask, strict: bool| {
        (0..n).all(|t| {
            (0..n).all(|u| m.get(p.order[t], p.order[u]) == if strict { u < t } else { u <= t })
        })
    };
    if p.order.iter().all(|&t| t < n) {
        if !permuted(&p.content_mask, false) {
            v.push(Violation::ContentNotTriangular);
        }
        if !permuted(&p.query_mask, true) {
            v.push(Violation::QueryNotTriangular);
        }
    }
    PlanReport { violations: v }
}
