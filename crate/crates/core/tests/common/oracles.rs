//! Independent reference implementations used as test oracles. Plain
//! `Vec<Vec<f64>>` arithmetic, no shared code with the library.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..m {
                out[i][j] += aip * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix:
/// returns (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v = identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Symmetric PSD square root through the Jacobi decomposition.
pub fn jacobi_sqrt(a: &Mat) -> Mat {
    let (vals, v) = jacobi_eigen(a);
    let n = a.len();
    let mut scaled = v.clone();
    for row in scaled.iter_mut() {
        for j in 0..n {
            row[j] *= vals[j].max(0.0).sqrt();
        }
    }
    matmul(&scaled, &transpose(&v))
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|x, y| m[*x][col].abs().partial_cmp(&m[*y][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root of a matrix with positive real spectrum by the
/// Denman–Beavers iteration.
pub fn denman_beavers_sqrt(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z = identity(n);
    for _ in 0..100 {
        let yi = inverse(&y);
        let zi = inverse(&z);
        let y_next: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let z_next: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (y_next[i][j] - y[i][j]).abs())
            .fold(0.0, f64::max);
        y = y_next;
        z = z_next;
        if delta < 1e-15 * y.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs())) {
            break;
        }
    }
    y
}

/// Two-pass mean and unbiased covariance of row-major data.
pub fn dense_moments(data: &[f64], rows: usize, d: usize) -> (Vec<f64>, Mat) {
    let mut mean = vec![0.0; d];
    for r in 0..rows {
        for c in 0..d {
            mean[c] += data[r * d + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..rows {
        for i in 0..d {
            let xi = data[r * d + i] - mean[i];
            for j in 0..d {
                cov[i][j] += xi * (data[r * d + j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (rows - 1) as f64;
        }
    }
    (mean, cov)
}

/// Fréchet distance via Jacobi: tr sqrt(√A B √A).
pub fn frechet_oracle(mu_a: &[f64], a: &Mat, mu_b: &[f64], b: &Mat) -> f64 {
    let ra = jacobi_sqrt(a);
    let m = matmul(&matmul(&ra, b), &ra);
    let m: Mat = (0..m.len())
        .map(|i| (0..m.len()).map(|j| 0.5 * (m[i][j] + m[j][i])).collect())
        .collect();
    let (vals, _) = jacobi_eigen(&m);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    diff + trace(a) + trace(b) - 2.0 * tr_sqrt
}

/// A random SPD matrix `G Gᵀ / d + shift·I`, entries of G drawn from `rng`.
pub fn random_spd(rng: &mut impl FnMut() -> f64, d: usize, shift: f64) -> Mat {
    let g: Mat = (0..d).map(|_| (0..d).map(|_| rng()).collect()).collect();
    let mut s = matmul(&g, &transpose(&g));
    for (i, row) in s.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= d as f64;
        }
        row[i] += shift;
    }
    s
}
