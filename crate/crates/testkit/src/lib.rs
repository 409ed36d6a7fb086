//! Slow, obviously-correct reference implementations used as test oracles.
//!
//! Nothing here depends on `mugcat-core`; every oracle takes a different
//! route to the answer than the production code does.

// index loops read closer to the textbook formulas here
#![allow(clippy::needless_range_loop)]

use std::cmp::Ordering;

use rand::Rng;

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Exact comparison of `cos(a, q)` against `cos(b, q)` for integer vectors,
/// without any floating point: compares `dot/‖v‖` through signs and squares.
pub fn cmp_cosine_exact(a: &[i64], b: &[i64], q: &[i64]) -> Ordering {
    let dot = |v: &[i64]| v.iter().zip(q).map(|(&x, &y)| i128::from(x) * i128::from(y)).sum::<i128>();
    let norm2 = |v: &[i64]| v.iter().map(|&x| i128::from(x) * i128::from(x)).sum::<i128>();
    let (da, db) = (dot(a), dot(b));
    let (na, nb) = (norm2(a), norm2(b));
    match (da.signum(), db.signum()) {
        (sa, sb) if sa != sb => sa.cmp(&sb),
        (0, 0) => Ordering::Equal,
        (1, 1) => (da * da * nb).cmp(&(db * db * na)),
        _ => (db * db * na).cmp(&(da * da * nb)),
    }
}

/// Index of the first maximum by exhaustive pairwise comparison: the answer
/// is the lowest `i` that no other candidate strictly beats.
pub fn argmax_exact(candidates: &[Vec<i64>], q: &[i64]) -> usize {
    (0..candidates.len())
        .find(|&i| {
            candidates
                .iter()
                .all(|c| cmp_cosine_exact(c, &candidates[i], q) != Ordering::Greater)
        })
        .expect("a maximum exists")
}

/// True when two candidates with different vectors tie exactly. Such ties
/// can round apart in floating point, so generators avoid them; ties between
/// identical vectors are kept because they round identically.
pub fn has_unequal_exact_tie(candidates: &[Vec<i64>], q: &[i64]) -> bool {
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            if candidates[i] != candidates[j] && cmp_cosine_exact(&candidates[i], &candidates[j], q) == Ordering::Equal {
                return true;
            }
        }
    }
    false
}

/// A selection instance with small integer entries. Roughly half the
/// instances copy an earlier candidate to a later slot to force a tie.
pub fn random_selection_instance(rng: &mut impl Rng, max_k: usize, max_dim: usize) -> (Vec<Vec<i64>>, Vec<i64>) {
    loop {
        let k = rng.random_range(1..=max_k);
        let dim = rng.random_range(1..=max_dim);
        let nonzero = |rng: &mut dyn rand::RngCore| loop {
            let v: Vec<i64> = (0..dim).map(|_| rng.random_range(-4..=4)).collect();
            if v.iter().any(|&x| x != 0) {
                break v;
            }
        };
        let q = nonzero(rng);
        let mut cands: Vec<Vec<i64>> = (0..k).map(|_| nonzero(rng)).collect();
        if k > 1 && rng.random_bool(0.5) {
            let from = rng.random_range(0..k - 1);
            let to = rng.random_range(from + 1..k);
            cands[to] = cands[from].clone();
        }
        if !has_unequal_exact_tie(&cands, &q) {
            return (cands, q);
        }
    }
}

// ---------------------------------------------------------------------------
// Image resampling
// ---------------------------------------------------------------------------

/// Bilinear resize written as a tent-filter sum over every source pixel,
/// left unrounded. Source and target must share an aspect ratio (no crop).
/// Sample positions use half-pixel centers and are clamped to the image.
pub fn bilinear_tent(src: &[u8], sw: u32, sh: u32, tw: u32, th: u32) -> Vec<f64> {
    assert_eq!(u64::from(sw) * u64::from(th), u64::from(sh) * u64::from(tw), "aspect must match");
    let pos = |o: u32, s: u32, t: u32| {
        let p = (f64::from(o) + 0.5) * f64::from(s) / f64::from(t) - 0.5;
        p.clamp(0.0, f64::from(s - 1))
    };
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = Vec::with_capacity((tw * th * 3) as usize);
    for y in 0..th {
        let py = pos(y, sh, th);
        for x in 0..tw {
            let px = pos(x, sw, tw);
            for c in 0..3 {
                let mut acc = 0.0;
                for sy in 0..sh {
                    for sx in 0..sw {
                        let w = tent(f64::from(sx) - px) * tent(f64::from(sy) - py);
                        if w > 0.0 {
                            acc += w * f64::from(src[((sy * sw + sx) * 3) as usize + c]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dense linear algebra on Vec<Vec<f64>>
// ---------------------------------------------------------------------------

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..m).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Lower-triangular `L` with `L·Lᵀ = a`; `a` must be positive definite.
pub fn cholesky(a: &Mat) -> Mat {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                assert!(d > 0.0, "matrix is not positive definite");
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Fréchet distance between two Gaussians through a different route than
/// the production code: `tr(√(Σa·Σb))` is the sum of square roots of the
/// eigenvalues of `Lᵀ·Σb·L` where `Σa = L·Lᵀ` (similar to `Σa·Σb`).
pub fn fid_oracle(mu_a: &[f64], cov_a: &Mat, mu_b: &[f64], cov_b: &Mat) -> f64 {
    let l = cholesky(cov_a);
    let m = matmul(&matmul(&transpose(&l), cov_b), &l);
    let sym: Mat = (0..m.len()).map(|i| (0..m.len()).map(|j| 0.5 * (m[i][j] + m[j][i])).collect()).collect();
    let tr_sqrt: f64 = jacobi_eigenvalues(&sym).into_iter().map(|e| e.max(0.0).sqrt()).sum();
    let dmu: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    dmu + trace(cov_a) + trace(cov_b) - 2.0 * tr_sqrt
}

/// `A·Aᵀ + ridge·I` for a random `A`; symmetric positive definite.
pub fn random_spd(rng: &mut impl Rng, d: usize, ridge: f64) -> Mat {
    let a: Mat = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut s = matmul(&a, &transpose(&a));
    for (i, row) in s.iter_mut().enumerate() {
        row[i] += ridge;
    }
    s
}

/// Random orthogonal matrix by Gram-Schmidt on random rows.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Mat {
    let mut q: Mat = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Mean and unbiased covariance, computed in two passes.
pub fn two_pass_covariance(samples: &[Vec<f64>]) -> (Vec<f64>, Mat) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

/// Fraction of samples whose label appears among the first `k` predictions.
pub fn topk_count(predictions: &[Vec<String>], labels: &[String], k: usize) -> f64 {
    let mut hits = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        let mut found = false;
        for (rank, guess) in p.iter().enumerate() {
            if rank < k && guess == l {
                found = true;
            }
        }
        hits += usize::from(found);
    }
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cosine_order() {
        let q = [1, 0];
        assert_eq!(cmp_cosine_exact(&[1, 0], &[1, 1], &q), Ordering::Greater);
        assert_eq!(cmp_cosine_exact(&[2, 0], &[1, 0], &q), Ordering::Equal);
        assert_eq!(cmp_cosine_exact(&[-1, 0], &[0, 1], &q), Ordering::Less);
        assert_eq!(cmp_cosine_exact(&[-1, 1], &[-1, 0], &q), Ordering::Greater);
        assert_eq!(argmax_exact(&[vec![0, 1], vec![1, 1], vec![1, 1]], &q), 1);
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        let mut e = jacobi_eigenvalues(&vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fid_oracle_one_dimensional() {
        // (0-1)² + 1 + 1 - 2·1
        assert!((fid_oracle(&[0.0], &vec![vec![1.0]], &[1.0], &vec![vec![1.0]]) - 1.0).abs() < 1e-12);
        // 1 + 4 - 2·2
        assert!((fid_oracle(&[0.0], &vec![vec![1.0]], &[0.0], &vec![vec![4.0]]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tent_checkerboard_is_block_mean() {
        let mut src = Vec::new();
        for y in 0..4u32 {
            for x in 0..4u32 {
                let v = if (x + y) % 2 == 0 { 200 } else { 100 };
                src.extend([v, v, v]);
            }
        }
        assert!(bilinear_tent(&src, 4, 4, 2, 2).iter().all(|&v| (v - 150.0).abs() < 1e-12));
    }
}
