//! Fill-reducing orderings and symbolic fill counts.

use std::collections::BTreeSet;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::amd;
use faer::sparse::SymbolicSparseColMatRef;

use crate::sparse::CsrMatrix;

/// Approximate minimum degree ordering of a structurally symmetric pattern.
/// Returns `p` with `p[k]` the original index eliminated `k`-th.
pub fn amd_ordering(pattern: &CsrMatrix) -> Vec<usize> {
    let n = pattern.nrows();
    assert_eq!(n, pattern.ncols());
    if n == 0 {
        return Vec::new();
    }
    // Upper triangle in CSC equals the lower triangle of the symmetric CSR.
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::new();
    col_ptr.push(0usize);
    for j in 0..n {
        row_idx.extend(pattern.row(j).map(|(c, _)| c).filter(|&c| c <= j));
        col_ptr.push(row_idx.len());
    }
    let symbolic = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
    let mut perm = vec![0usize; n];
    let mut perm_inv = vec![0usize; n];
    let mut mem = MemBuffer::new(amd::order_scratch::<usize>(n, row_idx.len()));
    amd::order(&mut perm, &mut perm_inv, symbolic, amd::Control::default(), MemStack::new(&mut mem))
        .expect("amd workspace sized by order_scratch");
    perm
}

pub fn natural_ordering(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Nonzeros of the exact Cholesky factor (diagonal included) of the pattern
/// permuted by `perm`, assuming no numerical cancellation.
pub fn cholesky_fill(pattern: &CsrMatrix, perm: &[usize]) -> usize {
    let n = pattern.nrows();
    let inv = inverse_permutation(perm);
    let mut cols: Vec<BTreeSet<usize>> = (0..n)
        .map(|j| pattern.row(perm[j]).map(|(c, _)| inv[c]).filter(|&i| i > j).collect())
        .collect();
    let mut total = n;
    for j in 0..n {
        let col = std::mem::take(&mut cols[j]);
        total += col.len();
        if let Some(&parent) = col.iter().next() {
            cols[parent].extend(col.iter().copied().filter(|&i| i > parent));
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(n: usize, edges: &[(usize, usize)]) -> CsrMatrix {
        let mut t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        for &(a, b) in edges {
            t.push((a, b, 1.0));
            t.push((b, a, 1.0));
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for k in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(k);
            for mut tail in permutations(rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }

    #[test]
    fn diagonal_pattern_gives_identity() {
        let p = pattern(7, &[]);
        assert_eq!(amd_ordering(&p), natural_ordering(7));
    }

    #[test]
    fn star_hub_is_eliminated_last() {
        let p = pattern(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let order = amd_ordering(&p);
        assert_eq!(*order.last().unwrap(), 0);
        let best = permutations((0..5).collect()).iter().map(|q| cholesky_fill(&p, q)).min().unwrap();
        assert_eq!(cholesky_fill(&p, &order), best);
        // Eliminating the hub first fills the whole matrix.
        assert_eq!(cholesky_fill(&p, &natural_ordering(5)), 15);
    }

    #[test]
    fn banded_fill_not_worse_than_natural() {
        let n = 60;
        let mut edges = Vec::new();
        for i in 0..n {
            for k in 1..=3 {
                if i + k < n {
                    edges.push((i, i + k));
                }
            }
        }
        let p = pattern(n, &edges);
        let order = amd_ordering(&p);
        assert!(cholesky_fill(&p, &order) <= cholesky_fill(&p, &natural_ordering(n)));
    }

    #[test]
    fn ordering_is_a_permutation() {
        let p = pattern(30, &[(0, 29), (3, 4), (5, 17), (17, 28), (1, 2)]);
        let mut o = amd_ordering(&p);
        o.sort_unstable();
        assert_eq!(o, natural_ordering(30));
    }
}
