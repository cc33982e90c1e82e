//! Small dense solvers on row-major `f64` matrices.

use crate::error::{Error, Result};

/// Solves `A·X = B` for symmetric positive-definite `A [n, n]` and `B [n, m]`.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * m);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "matrix is not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for col in 0..m {
        for i in 0..n {
            let mut s = x[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
    }
    Ok(x)
}

/// Assignment maximizing `Σ_j score[row_of[j], j]` over permutations of an
/// `n×n` score matrix (Hungarian algorithm with potentials). Returns
/// `row_of`, the row assigned to each column.
pub fn max_assignment(score: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(score.len(), n * n);
    let cost = |i: usize, j: usize| -score[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
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
            for j in 0..=n {
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
    (1..=n).map(|j| p[j] - 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let x_true = [1.0, -2.0, 0.5, 3.0, 0.25, -1.0];
        let mut b = vec![0.0; 6];
        for i in 0..3 {
            for c in 0..2 {
                b[i * 2 + c] = (0..3).map(|k| a[i * 3 + k] * x_true[k * 2 + c]).sum();
            }
        }
        let x = cholesky_solve(&a, &b, 3, 2).unwrap();
        for (got, want) in x.iter().zip(x_true) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0], 2, 1).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let n = 4;
        let score: Vec<f64> = (0..16).map(|i| ((i * 37 + 11) % 17) as f64).collect();
        let best = max_assignment(&score, n);
        let total = |rows: &[usize]| {
            rows.iter()
                .enumerate()
                .map(|(j, &i)| score[i * n + j])
                .sum::<f64>()
        };
        let mut brute = f64::MIN;
        let mut perm = [0, 1, 2, 3];
        permute(&mut perm, 0, &mut |p| brute = brute.max(total(p)));
        assert_eq!(total(&best), brute);
    }

    fn permute(a: &mut [usize; 4], k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == a.len() {
            f(a);
            return;
        }
        for i in k..a.len() {
            a.swap(k, i);
            permute(a, k + 1, f);
            a.swap(k, i);
        }
    }
}
