//! Minimum-weight bipartite assignment and the chunk-level matching
//! cost used for rescoring.

use thiserror::Error;

use crate::chunker::Chunk;
use crate::embedding::{cosine_distance, EmbedError, EmbeddingProvider};

/// Penalty per unmatched chunk when the two sides differ in count.
pub const UNMATCHED_PENALTY: f64 = 1.0;

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("empty cost matrix")]
    Empty,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> CostMatrix {
        assert_eq!(data.len(), rows * cols);
        CostMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> CostMatrix {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged cost matrix");
            data.extend_from_slice(row);
        }
        CostMatrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// (row, col) pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Matching {
    pub fn empty() -> Matching {
        Matching {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }
}

/// Minimum-cost assignment of size min(rows, cols), with deterministic
/// tie-breaking: among optimal matchings the lexicographically smallest
/// pair list is returned.
pub fn hungarian(c: &CostMatrix) -> Result<Matching, MatchError> {
    if c.rows() == 0 || c.cols() == 0 {
        return Err(MatchError::Empty);
    }
    for r in 0..c.rows() {
        for col in 0..c.cols() {
            if !c.at(r, col).is_finite() {
                return Err(MatchError::NonFinite { row: r, col });
            }
        }
    }

    let all_rows: Vec<usize> = (0..c.rows()).collect();
    let all_cols: Vec<usize> = (0..c.cols()).collect();
    let target = min_cost(c, &all_rows, &all_cols);
    let k = c.rows().min(c.cols());
    let tol = EPS * (1.0 + target.abs());

    // fix pairs row by row, keeping each prefix extendable to an
    // optimal completion; this pins down the lexicographically
    // smallest optimal pair list
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut fixed = 0.0;
    let mut avail: Vec<usize> = all_cols.clone();
    for r in 0..c.rows() {
        if pairs.len() == k {
            break;
        }
        let rest_rows: Vec<usize> = (r + 1..c.rows()).collect();
        let needed = k - pairs.len() - 1;
        let mut chosen = None;
        for (ci, &col) in avail.iter().enumerate() {
            if rest_rows.len().min(avail.len() - 1) < needed {
                break;
            }
            let mut rest_cols = avail.clone();
            rest_cols.remove(ci);
            let rest = if needed == 0 {
                0.0
            } else {
                min_cost(c, &rest_rows, &rest_cols)
            };
            if fixed + c.at(r, col) + rest <= target + tol {
                chosen = Some((ci, col));
                break;
            }
        }
        if let Some((ci, col)) = chosen {
            fixed += c.at(r, col);
            pairs.push((r, col));
            avail.remove(ci);
        }
        // otherwise this row stays unmatched (possible only when
        // rows > cols)
    }

    debug_assert_eq!(pairs.len(), k);
    let total_cost: f64 = pairs.iter().map(|&(r, col)| c.at(r, col)).sum();
    Ok(Matching { pairs, total_cost })
}

/// Minimum total cost of a full matching on the given row/col subsets
/// (size = smaller side). Jonker-Volgenant style potentials, O(n^2 m).
fn min_cost(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        jv(&|i, j| c.at(rows[i], cols[j]), rows.len(), cols.len())
    } else {
        jv(&|i, j| c.at(rows[j], cols[i]), cols.len(), rows.len())
    }
}

fn jv(cost: &dyn Fn(usize, usize) -> f64, n: usize, m: usize) -> f64 {
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // row matched to each column, 1-based
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            total += cost(p[j] - 1, j - 1);
        }
    }
    total
}

/// Hungarian matching cost between two chunk lists in embedding space,
/// plus a fixed penalty per unmatched chunk. Either side may be empty.
pub fn chunk_match_cost(
    x_chunks: &[Chunk],
    synth_chunks: &[Chunk],
    provider: &dyn EmbeddingProvider,
) -> Result<(f64, Matching), MatchError> {
    let n = x_chunks.len();
    let m = synth_chunks.len();
    let penalty = UNMATCHED_PENALTY * n.abs_diff(m) as f64;
    if n == 0 || m == 0 {
        return Ok((penalty, Matching::empty()));
    }
    let x_vecs = x_chunks
        .iter()
        .map(|ch| provider.embed(&ch.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let s_vecs = synth_chunks
        .iter()
        .map(|ch| provider.embed(&ch.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = Vec::with_capacity(n * m);
    for xv in &x_vecs {
        for sv in &s_vecs {
            data.push(cosine_distance(xv, sv)?);
        }
    }
    let matching = hungarian(&CostMatrix::new(n, m, data))?;
    Ok((matching.total_cost + penalty, matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceProvider;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Factorial brute force over all size-min(n,m) matchings.
    fn brute_force_min(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, left: usize) -> f64 {
            if left == 0 {
                return 0.0;
            }
            if row == c.rows() {
                return f64::INFINITY;
            }
            let mut best = if c.rows() - row > left {
                rec(c, row + 1, used, left)
            } else {
                f64::INFINITY
            };
            for col in 0..c.cols() {
                if !used[col] {
                    used[col] = true;
                    let cand = c.at(row, col) + rec(c, row + 1, used, left - 1);
                    used[col] = false;
                    if cand < best {
                        best = cand;
                    }
                }
            }
            best
        }
        let mut used = vec![false; c.cols()];
        rec(c, 0, &mut used, c.rows().min(c.cols()))
    }

    fn chunk(words: &str) -> Chunk {
        let tokens: Vec<String> = words.split_whitespace().map(str::to_string).collect();
        let len = tokens.len();
        Chunk {
            tokens,
            span: (0, len),
        }
    }

    #[test]
    fn zero_diagonal() {
        let m = hungarian(&CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn two_by_two_brute_forced() {
        // permutations cost 2 vs 5
        let m = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn random_matrices_match_factorial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..2.0)).collect();
            let c = CostMatrix::new(n, m, data);
            let got = hungarian(&c).unwrap();
            let want = brute_force_min(&c);
            assert!(
                (got.total_cost - want).abs() < 1e-9,
                "{n}x{m}: got {} want {want}",
                got.total_cost
            );
            assert_eq!(got.pairs.len(), n.min(m));
            let rows: std::collections::HashSet<_> = got.pairs.iter().map(|p| p.0).collect();
            let cols: std::collections::HashSet<_> = got.pairs.iter().map(|p| p.1).collect();
            assert_eq!(rows.len(), got.pairs.len());
            assert_eq!(cols.len(), got.pairs.len());
        }
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // all-equal matrix: every permutation is optimal
        let c = CostMatrix::new(3, 3, vec![1.0; 9]);
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular_wide() {
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0, 3.0]]);
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.total_cost, 1.0);
    }

    #[test]
    fn rectangular_tall() {
        let c = CostMatrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]);
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.total_cost, 1.0);
    }

    #[test]
    fn constant_shift_preserves_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|x| x + 0.75).collect();
            let a = hungarian(&CostMatrix::new(n, m, data)).unwrap();
            let b = hungarian(&CostMatrix::new(n, m, shifted)).unwrap();
            assert_eq!(a.pairs, b.pairs);
            let expect = a.total_cost + 0.75 * n.min(m) as f64;
            assert!((b.total_cost - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let c = CostMatrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(matches!(
            hungarian(&c),
            Err(MatchError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn identical_chunk_lists_cost_zero() {
        let p = ReferenceProvider::new(16, 0);
        let a = [chunk("red ball"), chunk("yellow door")];
        let (cost, m) = chunk_match_cost(&a, &a, &p).unwrap();
        assert!(cost.abs() < 1e-12);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn permuted_chunks_cross_match() {
        let p = ReferenceProvider::new(16, 0);
        let a = [chunk("red ball"), chunk("yellow door")];
        let b = [chunk("yellow door"), chunk("red ball")];
        let (cost, m) = chunk_match_cost(&a, &b, &p).unwrap();
        assert!(cost.abs() < 1e-12);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn unmatched_chunk_penalty() {
        let p = ReferenceProvider::new(16, 0);
        let a = [chunk("red ball")];
        let (cost, m) = chunk_match_cost(&a, &[], &p).unwrap();
        assert_eq!(cost, UNMATCHED_PENALTY);
        assert!(m.pairs.is_empty());
        let (zero, _) = chunk_match_cost(&[], &[], &p).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn chunk_cost_is_symmetric() {
        let p = ReferenceProvider::new(16, 9);
        let a = [chunk("red ball"), chunk("blue key")];
        let b = [chunk("yellow door")];
        let (ab, _) = chunk_match_cost(&a, &b, &p).unwrap();
        let (ba, _) = chunk_match_cost(&b, &a, &p).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }
}
