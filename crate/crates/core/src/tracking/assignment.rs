//! Rectangular minimum-cost assignment with forbidden entries.
//!
//! The solver maximizes the number of matched allowed entries first and
//! minimizes their total cost second. Both criteria are folded into one
//! lexicographically ordered cost so a single shortest-augmenting-path
//! Hungarian pass handles them. Among optimal matchings the one that is
//! lexicographically smallest in row order (columns ascending, "unmatched"
//! last) is returned.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Sub, SubAssign};

/// `None` marks a forbidden entry.
pub type CostMatrix = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// (negated cardinality, cost), ordered lexicographically.
#[derive(Debug, Clone, Copy)]
struct Lex {
    card: i64,
    cost: f64,
}

impl Lex {
    const ZERO: Lex = Lex { card: 0, cost: 0.0 };
    const INF: Lex = Lex {
        card: i64::MAX / 4,
        cost: 0.0,
    };

    fn edge(entry: Option<f64>) -> Lex {
        match entry {
            Some(c) => Lex { card: -1, cost: c },
            None => Lex::ZERO,
        }
    }
}

impl PartialEq for Lex {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Lex {}
impl PartialOrd for Lex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Lex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.card
            .cmp(&other.card)
            .then(self.cost.total_cmp(&other.cost))
    }
}
impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex {
            card: self.card + o.card,
            cost: self.cost + o.cost,
        }
    }
}
impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex {
            card: self.card - o.card,
            cost: self.cost - o.cost,
        }
    }
}
impl AddAssign for Lex {
    fn add_assign(&mut self, o: Lex) {
        *self = *self + o;
    }
}
impl SubAssign for Lex {
    fn sub_assign(&mut self, o: Lex) {
        *self = *self - o;
    }
}

/// Hungarian algorithm with potentials for `rows <= cols`; returns the
/// column assigned to every row.
fn hungarian(a: &[Vec<Lex>], cols: usize) -> Vec<usize> {
    let n = a.len();
    debug_assert!(n <= cols);
    let mut u = vec![Lex::ZERO; n + 1];
    let mut v = vec![Lex::ZERO; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![Lex::INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Lex::INF;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0usize; n];
    for j in 1..=cols {
        if p[j] != 0 {
            assigned[p[j] - 1] = j - 1;
        }
    }
    assigned
}

/// Optimal value of the sub-problem restricted to `rows` × `cols`.
fn optimal_value(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Lex {
    if rows.is_empty() || cols.is_empty() {
        return Lex::ZERO;
    }
    let transpose = rows.len() > cols.len();
    let (outer, inner) = if transpose { (cols, rows) } else { (rows, cols) };
    let a: Vec<Vec<Lex>> = outer
        .iter()
        .map(|&o| {
            inner
                .iter()
                .map(|&i| {
                    let (r, c) = if transpose { (i, o) } else { (o, i) };
                    Lex::edge(cost[r][c])
                })
                .collect()
        })
        .collect();
    let assigned = hungarian(&a, inner.len());
    let mut total = Lex::ZERO;
    for (k, &col) in assigned.iter().enumerate() {
        total += a[k][col];
    }
    total
}

fn close(a: Lex, b: Lex) -> bool {
    a.card == b.card && (a.cost - b.cost).abs() <= 1e-9 * b.cost.abs().max(1.0)
}

/// Minimum-cost maximum-cardinality matching over the allowed entries.
///
/// Panics if the matrix is ragged or an allowed entry is not finite.
pub fn assign(cost: &CostMatrix) -> Matching {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    assert!(
        cost.iter().flatten().flatten().all(|c| c.is_finite()),
        "allowed costs must be finite"
    );

    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut pairs = Vec::new();
    let mut unmatched_rows = Vec::new();
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut options: Vec<(Option<usize>, Lex)> = free_cols
            .iter()
            .filter(|&&j| cost[i][j].is_some())
            .map(|&j| {
                let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
                (Some(j), Lex::edge(cost[i][j]) + optimal_value(cost, &rest, &cols))
            })
            .collect();
        options.push((None, optimal_value(cost, &rest, &free_cols)));
        let best = options.iter().map(|o| o.1).min().expect("at least one option");
        let choice = options
            .iter()
            .find(|o| close(o.1, best))
            .expect("best option is close to itself")
            .0;
        match choice {
            Some(j) => {
                pairs.push((i, j));
                free_cols.retain(|&c| c != j);
            }
            None => unmatched_rows.push(i),
        }
    }
    let total_cost = pairs
        .iter()
        .map(|&(i, j)| cost[i][j].expect("allowed"))
        .sum();
    Matching {
        pairs,
        unmatched_rows,
        unmatched_cols: free_cols,
        total_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> CostMatrix {
        rows.iter()
            .map(|r| r.iter().map(|&c| Some(c)).collect())
            .collect()
    }

    #[test]
    fn anti_diagonal_is_cheaper() {
        let m = assign(&dense(&[&[1.0, 2.0], &[2.0, 4.0]]));
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total_cost, 4.0);
    }

    #[test]
    fn zero_diagonal() {
        let m = assign(&dense(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]));
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn all_forbidden_gives_empty_matching() {
        let m = assign(&vec![vec![None; 3]; 2]);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_rows, vec![0, 1]);
        assert_eq!(m.unmatched_cols, vec![0, 1, 2]);
    }

    #[test]
    fn empty_sides() {
        assert!(assign(&vec![]).pairs.is_empty());
        let m = assign(&vec![vec![]; 2]);
        assert_eq!(m.unmatched_rows, vec![0, 1]);
    }

    #[test]
    fn cardinality_beats_cost() {
        // Matching row 0 to col 0 is cheapest alone but blocks row 1.
        let c = vec![vec![Some(0.0), Some(5.0)], vec![Some(0.1), None]];
        let m = assign(&c);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let m = assign(&dense(&[&[1.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let m = assign(&dense(&[&[0.5, 0.5, 0.5]]));
        assert_eq!(m.pairs, vec![(0, 0)]);
        let m = assign(&dense(&[&[0.5], &[0.5], &[0.5]]));
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_rows, vec![1, 2]);
    }

    #[test]
    fn tall_matrix() {
        let m = assign(&dense(&[&[3.0], &[1.0], &[2.0]]));
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_rows, vec![0, 2]);
    }
}
