//! Small dense symmetric eigen solver for low-dimensional problems.

use crate::scalar::Scalar;

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and the matching eigenvectors
/// as columns of a row-major matrix.
pub fn symmetric_eigen<F: Scalar>(a: &[F], n: usize) -> (Vec<F>, Vec<F>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![F::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = F::one();
    }
    for _sweep in 0..100 {
        let off: F = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: F = m.iter().map(|x| *x * *x).sum();
        if off <= F::epsilon() * F::epsilon() * scale || off == F::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == F::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (F::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![F::zero(); n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_symmetric_matrix() {
        let a = [4.0f64, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let trace: f64 = vals.iter().sum();
        assert!((trace - 8.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_input_is_sorted() {
        let (vals, _) = symmetric_eigen(&[1.0f32, 0.0, 0.0, 5.0], 2);
        assert_eq!(vals, vec![5.0, 1.0]);
    }
}
