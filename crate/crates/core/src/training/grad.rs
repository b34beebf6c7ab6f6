//! Reverse-mode gradients through matrix chains, prefix/suffix scans and
//! CBOW sums, scattered back into embedding-table storage.

use crate::embeddings::EmbeddingTable;
use crate::encoder::{gather, CmowDirection, ScanCache};
use crate::error::{Error, Result};
use crate::linalg::{mul_nt, mul_tn, mul_unchecked, Real, SquareMatrix};

fn check_dims<T: Real>(ms: &[SquareMatrix<T>], upstream: &[&SquareMatrix<T>]) -> Result<usize> {
    let d = match (ms.first(), upstream.first()) {
        (Some(m), _) => m.dim(),
        (None, Some(g)) => g.dim(),
        (None, None) => return Ok(0),
    };
    if let Some(bad) = ms.iter().chain(upstream.iter().copied()).find(|m| m.dim() != d) {
        return Err(Error::structural(format!(
            "gradient over mixed matrix dims {d} and {}",
            bad.dim()
        )));
    }
    Ok(d)
}

/// Gradients of `<G, X_1 ... X_n>` with respect to each factor:
/// `dX_i = (X_1..X_{i-1})^T G (X_{i+1}..X_n)^T`.
pub fn chain_grad<T: Real>(ms: &[SquareMatrix<T>], upstream: &SquareMatrix<T>) -> Result<Vec<SquareMatrix<T>>> {
    let d = check_dims(ms, &[upstream])?;
    let n = ms.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut right = vec![SquareMatrix::identity(d); n];
    for i in (0..n - 1).rev() {
        right[i] = mul_unchecked(&ms[i + 1], &right[i + 1]);
    }
    let mut left = upstream.clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            left = mul_tn(&ms[i - 1], &left);
        }
        out.push(mul_nt(&left, &right[i]));
    }
    Ok(out)
}

/// Gradients through a prefix scan `P_i = X_0..X_i` given one upstream per
/// output. With `R_{n-1} = G_{n-1}` and `R_k = G_k + R_{k+1} X_{k+1}^T`,
/// `dX_k = P_{k-1}^T R_k` (`P_{-1} = I`).
pub fn prefix_scan_grad<T: Real>(
    ms: &[SquareMatrix<T>],
    prefix: &[SquareMatrix<T>],
    upstream: &[SquareMatrix<T>],
) -> Result<Vec<SquareMatrix<T>>> {
    let n = ms.len();
    if prefix.len() != n || upstream.len() != n {
        return Err(Error::structural(format!(
            "scan gradient over {n} factors, {} prefixes, {} upstreams",
            prefix.len(),
            upstream.len()
        )));
    }
    let refs: Vec<&SquareMatrix<T>> = upstream.iter().chain(prefix).collect();
    check_dims(ms, &refs)?;
    let mut out = vec![SquareMatrix::zeros(0); n];
    let mut r: Option<SquareMatrix<T>> = None;
    for k in (0..n).rev() {
        let mut rk = upstream[k].clone();
        if let Some(next) = &r {
            rk.add_assign(&mul_nt(next, &ms[k + 1]));
        }
        out[k] = if k == 0 { rk.clone() } else { mul_tn(&prefix[k - 1], &rk) };
        r = Some(rk);
    }
    Ok(out)
}

fn scatter<T: Real>(block: &mut [T], width: usize, id: u32, g: &[T]) {
    let row = &mut block[id as usize * width..(id as usize + 1) * width];
    for (a, &b) in row.iter_mut().zip(g) {
        *a += b;
    }
}

fn matrix_upstream<T: Real>(grad: &[T], d: usize) -> SquareMatrix<T> {
    SquareMatrix::from_slice(d, grad).expect("d*d gradient slice")
}

/// Backpropagates a gradient on the pooled encoding of `ids` into `grads`.
pub(crate) fn pooled_backward<T: Real>(
    ids: &[u32],
    table: &EmbeddingTable<T>,
    grad: &[T],
    grads: &mut EmbeddingTable<T>,
) -> Result<()> {
    let kind = table.kind();
    let d = table.d();
    let dd = d * d;
    let mut offset = 0;
    if kind.has_matrices() {
        let g = matrix_upstream(&grad[..dd], d);
        let fw = gather(ids, table, CmowDirection::Forward)?;
        for (&id, dx) in ids.iter().zip(chain_grad(&fw, &g)?) {
            scatter(&mut grads.forward, dd, id, dx.as_slice());
        }
        offset += dd;
    }
    if kind.is_bidirectional() {
        let g = matrix_upstream(&grad[offset..offset + dd], d);
        let mut bw = gather(ids, table, CmowDirection::Backward)?;
        bw.reverse();
        for (&id, dy) in ids.iter().rev().zip(chain_grad(&bw, &g)?) {
            scatter(&mut grads.backward, dd, id, dy.as_slice());
        }
        offset += dd;
    }
    if kind.has_vectors() {
        let dv = table.d_vec();
        let g = &grad[offset..offset + dv];
        for &id in ids {
            scatter(&mut grads.vectors, dv, id, g);
        }
    }
    Ok(())
}

/// Backpropagates per-position row gradients (layout as in
/// [`ScanCache::row`]) into `grads`. `rows[i]` may be empty for positions
/// without a gradient.
pub(crate) fn per_token_backward<T: Real>(
    ids: &[u32],
    table: &EmbeddingTable<T>,
    cache: &ScanCache<T>,
    rows: &[Vec<T>],
    grads: &mut EmbeddingTable<T>,
) -> Result<()> {
    let kind = table.kind();
    let n = ids.len();
    let d = table.d();
    let dd = d * d;
    let dv = table.d_vec();
    let block = |row: &Vec<T>, at: usize, len: usize| -> Option<Vec<T>> {
        (!row.is_empty()).then(|| row[at..at + len].to_vec())
    };
    let mut offset = 0;
    if kind.has_matrices() {
        let g: Vec<SquareMatrix<T>> = rows
            .iter()
            .map(|r| match block(r, offset, dd) {
                Some(v) => matrix_upstream(&v, d),
                None => SquareMatrix::zeros(d),
            })
            .collect();
        for (&id, dx) in ids.iter().zip(prefix_scan_grad(&cache.fw, &cache.prefix, &g)?) {
            scatter(&mut grads.forward, dd, id, dx.as_slice());
        }
        offset += dd;
    }
    if kind.is_bidirectional() {
        // suffix_i = Y_{n-1}..Y_i is the prefix scan of the reversed factors.
        let g: Vec<SquareMatrix<T>> = rows
            .iter()
            .rev()
            .map(|r| match block(r, offset, dd) {
                Some(v) => matrix_upstream(&v, d),
                None => SquareMatrix::zeros(d),
            })
            .collect();
        let factors: Vec<SquareMatrix<T>> = cache.bw.iter().rev().cloned().collect();
        let prefix: Vec<SquareMatrix<T>> = cache.suffix.iter().rev().cloned().collect();
        for (&id, dy) in ids.iter().rev().zip(prefix_scan_grad(&factors, &prefix, &g)?) {
            scatter(&mut grads.backward, dd, id, dy.as_slice());
        }
        offset += dd;
    }
    if kind.has_vectors() {
        // Forward partial sums see x_j from every position i >= j.
        let mut acc = vec![T::zero(); dv];
        for i in (0..n).rev() {
            if let Some(g) = block(&rows[i], offset, dv) {
                acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
            scatter(&mut grads.vectors, dv, ids[i], &acc);
        }
        if kind.is_bidirectional() {
            offset += dv;
            let mut acc = vec![T::zero(); dv];
            for i in 0..n {
                if let Some(g) = block(&rows[i], offset, dv) {
                    acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                scatter(&mut grads.vectors, dv, ids[i], &acc);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingKind;
    use crate::encoder::{encode_pooled, scan_cache};
    use crate::linalg::{chain_product, Direction};
    use crate::params::Parameters;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> SquareMatrix<f64> {
        let data = (0..d * d)
            .map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
            .collect();
        SquareMatrix::from_vec(d, data).unwrap()
    }

    fn inner(a: &SquareMatrix<f64>, b: &SquareMatrix<f64>) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn single_factor_gets_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 3);
        let g = random_matrix(&mut rng, 3);
        assert_eq!(chain_grad(&[x], &g).unwrap(), vec![g]);
    }

    #[test]
    fn two_factor_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, g) = (random_matrix(&mut rng, 3), random_matrix(&mut rng, 3), random_matrix(&mut rng, 3));
        let grads = chain_grad(&[a.clone(), b.clone()], &g).unwrap();
        let want_a = crate::linalg::matmul(&g, &b.transpose()).unwrap();
        let want_b = crate::linalg::matmul(&a.transpose(), &g).unwrap();
        assert!(grads[0].rel_frobenius_error(&want_a) < 1e-14);
        assert!(grads[1].rel_frobenius_error(&want_b) < 1e-14);
    }

    #[test]
    fn chain_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ms: Vec<_> = (0..5).map(|_| random_matrix(&mut rng, 3)).collect();
        let g = random_matrix(&mut rng, 3);
        let grads = chain_grad(&ms, &g).unwrap();
        let f = |ms: &[SquareMatrix<f64>]| inner(&g, &chain_product(ms, 3, Direction::LeftToRight).unwrap());
        let h = 1e-6;
        for i in 0..ms.len() {
            for k in 0..9 {
                let mut p = ms.clone();
                let mut m = ms.clone();
                p[i].as_mut_slice()[k] += h;
                m[i].as_mut_slice()[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - grads[i].as_slice()[k]).abs() < 1e-7, "factor {i} entry {k}");
            }
        }
    }

    #[test]
    fn prefix_scan_grad_matches_sum_of_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ms: Vec<_> = (0..6).map(|_| random_matrix(&mut rng, 2)).collect();
        let gs: Vec<_> = (0..6).map(|_| random_matrix(&mut rng, 2)).collect();
        let prefix = crate::linalg::prefix_scan(&ms).unwrap();
        let got = prefix_scan_grad(&ms, &prefix, &gs).unwrap();
        let mut want = vec![SquareMatrix::zeros(2); 6];
        for i in 0..6 {
            for (k, g) in chain_grad(&ms[..=i], &gs[i]).unwrap().into_iter().enumerate() {
                want[k].add_assign(&g);
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!(a.rel_frobenius_error(b) < 1e-12);
        }
    }

    #[test]
    fn rejects_mixed_dims() {
        let ms = vec![SquareMatrix::<f64>::identity(2), SquareMatrix::identity(3)];
        assert!(chain_grad(&ms, &SquareMatrix::identity(2)).is_err());
    }

    /// Linear functional of an encoding, so its gradient is the weight vector.
    fn dot(w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn fd_table_check(
        table: &EmbeddingTable<f64>,
        analytic: &EmbeddingTable<f64>,
        f: impl Fn(&EmbeddingTable<f64>) -> f64,
    ) {
        let h = 1e-6;
        let mut probe = table.clone();
        let n_blocks = probe.blocks().len();
        for b in 0..n_blocks {
            let len = probe.blocks()[b].len();
            for k in 0..len {
                let orig = probe.blocks()[b][k];
                probe.blocks_mut()[b][k] = orig + h;
                let up = f(&probe);
                probe.blocks_mut()[b][k] = orig - h;
                let down = f(&probe);
                probe.blocks_mut()[b][k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.blocks()[b][k];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "block {b} entry {k}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn pooled_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in EmbeddingKind::ALL {
            let d = if kind.has_matrices() { 3 } else { 0 };
            let dv = if kind.has_vectors() { 2 } else { 0 };
            let table = EmbeddingTable::<f64>::init(kind, d, dv, 7, 0.3, 8).unwrap();
            let ids = [1u32, 4, 4, 0, 6];
            let dim = encode_pooled(&ids, &table).unwrap().dim();
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut grads = table.zeros_like();
            pooled_backward(&ids, &table, &w, &mut grads).unwrap();
            fd_table_check(&table, &grads, |t| dot(&w, &encode_pooled(&ids, t).unwrap().rows[0].0));
        }
    }

    #[test]
    fn per_token_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in EmbeddingKind::ALL {
            let d = if kind.has_matrices() { 2 } else { 0 };
            let dv = if kind.has_vectors() { 2 } else { 0 };
            let table = EmbeddingTable::<f64>::init(kind, d, dv, 6, 0.3, 9).unwrap();
            let ids = [2u32, 5, 0, 2];
            let cache = scan_cache(&ids, &table).unwrap();
            let dim = cache.row(0).len();
            // Position 1 gets no gradient, exercising the empty-row path.
            let rows: Vec<Vec<f64>> = (0..ids.len())
                .map(|i| if i == 1 { Vec::new() } else { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() })
                .collect();
            let mut grads = table.zeros_like();
            per_token_backward(&ids, &table, &cache, &rows, &mut grads).unwrap();
            fd_table_check(&table, &grads, |t| {
                let c = scan_cache(&ids, t).unwrap();
                rows.iter()
                    .enumerate()
                    .filter(|(_, r)| !r.is_empty())
                    .map(|(i, r)| dot(r, &c.row(i).0))
                    .sum()
            });
        }
    }
}
