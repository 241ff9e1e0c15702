//! Small dense complex linear algebra: cyclic Jacobi for Hermitian matrices
//! and Hermitian positive-definite solves.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::{Complex3, ComplexMat3};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition `A = V diag(λ) V^H` with eigenvalues sorted in
/// descending order and eigenvectors stored as columns of `vectors`.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

fn off_diagonal_norm(a: &DMatrix<Complex64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)].norm_sqr();
            }
        }
    }
    acc.sqrt()
}

/// Cyclic complex Jacobi rotations until the off-diagonal mass drops below
/// `1e-15` of the Frobenius norm. Only the Hermitian part of `m` is used.
pub fn hermitian_eigen(m: &DMatrix<Complex64>) -> HermitianEigen {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "hermitian_eigen needs a square matrix");
    let mut a = (m + m.adjoint()) * Complex64::from(0.5);
    let mut v = DMatrix::<Complex64>::identity(n, n);
    let scale = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let mag = apq.norm();
                if mag <= f64::MIN_POSITIVE {
                    continue;
                }
                let phase = apq / mag;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // J = diag(1, conj(phase)) · [[c, s], [-s, c]] on the (p, q) plane
                let j_pp = Complex64::from(c);
                let j_pq = Complex64::from(s);
                let j_qp = -phase.conj() * s;
                let j_qq = phase.conj() * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * j_pp + akq * j_qp;
                    a[(k, q)] = akp * j_pq + akq * j_qq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = j_pp.conj() * apk + j_qp.conj() * aqk;
                    a[(q, k)] = j_pq.conj() * apk + j_qq.conj() * aqk;
                }
                a[(p, q)] = Complex64::new(0.0, 0.0);
                a[(q, p)] = Complex64::new(0.0, 0.0);
                a[(p, p)] = Complex64::from(a[(p, p)].re);
                a[(q, q)] = Complex64::from(a[(q, q)].re);

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * j_pp + vkq * j_qp;
                    v[(k, q)] = vkp * j_pq + vkq * j_qq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut vec: Vec<Complex64> = v.column(i).iter().copied().collect();
        normalize_phase(&mut vec);
        for (r, z) in vec.into_iter().enumerate() {
            vectors[(r, col)] = z;
        }
    }
    HermitianEigen { values, vectors }
}

/// Rotates the global phase so the first non-negligible entry is real and positive.
pub fn normalize_phase(v: &mut [Complex64]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let Some(lead) = v.iter().find(|z| z.norm() > 1e-12 * norm).copied() else {
        return;
    };
    let rot = lead.conj() / lead.norm();
    for z in v.iter_mut() {
        *z *= rot;
    }
}

/// Largest eigenvalue of a 3x3 Hermitian matrix and a unit eigenvector.
///
/// When the top eigenvalue is repeated (within `1e-10` of its magnitude) the
/// candidate whose component magnitudes are lexicographically largest is
/// returned, phase-normalized so its first nonzero entry is real-positive.
pub fn top_eigenpair(m: &ComplexMat3) -> (f64, Complex3) {
    let dm = DMatrix::from_fn(3, 3, |i, j| m[(i, j)]);
    let eig = hermitian_eigen(&dm);
    let top = eig.values[0];
    let slack = 1e-10 * top.abs().max(f64::MIN_POSITIVE);
    let mut best = 0;
    for c in 1..3 {
        if top - eig.values[c] > slack {
            break;
        }
        let lex_greater = (0..3)
            .map(|r| (eig.vectors[(r, c)].norm(), eig.vectors[(r, best)].norm()))
            .find(|(a, b)| (a - b).abs() > 1e-12)
            .is_some_and(|(a, b)| a > b);
        if lex_greater {
            best = c;
        }
    }
    let v = Complex3::from_fn(|r, _| eig.vectors[(r, best)]);
    (top, v)
}

/// Solves `m x = b` for Hermitian positive-definite `m`.
pub fn solve_hpd3(m: &ComplexMat3, b: &Complex3) -> Option<Complex3> {
    let herm = (m + m.adjoint()) * Complex64::from(0.5);
    herm.cholesky().map(|c| c.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
        let b = DMatrix::from_fn(n, n, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        &b + b.adjoint()
    }

    #[test]
    fn jacobi_reconstructs_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 3, 5, 8, 12] {
            let a = random_hermitian(n, &mut rng);
            let eig = hermitian_eigen(&a);
            let lam = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    Complex64::from(eig.values[i])
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            let rebuilt = &eig.vectors * lam * eig.vectors.adjoint();
            let err = (&rebuilt - &a).norm();
            assert!(err <= 1e-12 * a.norm().max(1.0), "n={n} err={err}");
            let gram = eig.vectors.adjoint() * &eig.vectors;
            assert!((gram - DMatrix::identity(n, n)).norm() < 1e-12);
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn top_pair_satisfies_eigen_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_hermitian(3, &mut rng);
            let m = ComplexMat3::from_fn(|i, j| a[(i, j)]);
            let (lam, v) = top_eigenpair(&m);
            assert!((m * v - v * Complex64::from(lam)).norm() <= 1e-10 * lam.abs().max(1.0));
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_top_eigenspace_is_deterministic() {
        let m = ComplexMat3::identity() * Complex64::from(2.5);
        let (lam, v) = top_eigenpair(&m);
        assert!((lam - 2.5).abs() < 1e-15);
        assert_eq!(v, Complex3::new(1.0.into(), 0.0.into(), 0.0.into()));
    }

    #[test]
    fn phase_normalization_makes_lead_real_positive() {
        let mut v = vec![
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, -2.0),
            Complex64::new(1.0, 1.0),
        ];
        normalize_phase(&mut v);
        assert!(v[1].im.abs() < 1e-15 && v[1].re > 0.0);
        assert!((v[2].norm() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hpd_solve_inverts() {
        let b = ComplexMat3::from_fn(|i, j| Complex64::new((i + 2 * j) as f64, i as f64 - j as f64));
        let m = b * b.adjoint() + ComplexMat3::identity();
        let x = Complex3::new(Complex64::new(1.0, 2.0), 0.5.into(), Complex64::new(0.0, -1.0));
        let got = solve_hpd3(&m, &(m * x)).unwrap();
        assert!((got - x).norm() < 1e-12);
    }
}
