//! Shared numerical utilities: a symmetric eigensolver, the stable log-det
//! used by the coding-rate regularizer, and the central-difference gradient
//! oracle the loss tests are built on.

use crate::error::{AliError, Result};
use ndarray::{Array2, ArrayD};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns. Intended for the small Gram matrices this crate works with
/// (d up to a few hundred).
pub fn jacobi_eigh(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "jacobi_eigh needs a square matrix");
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(d);
    if d <= 1 {
        let vals = if d == 1 { vec![a[[0, 0]]] } else { vec![] };
        return (vals, v);
    }

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = 1e-15 * frob.max(1.0);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= threshold {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq.abs() <= threshold * 1e-2 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..d {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[i, i]].partial_cmp(&a[[j, j]]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((d, d));
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vecs[[r, new_col]] = v[[r, old_col]];
        }
    }
    (vals, vecs)
}

/// log det of a symmetric positive semi-definite matrix, via the symmetric
/// eigendecomposition with eigenvalues clamped at zero.
///
/// Accepts up to `1e-10`-scale asymmetry and rejects matrices that are
/// indefinite beyond that tolerance.
pub fn stable_logdet_psd(m: &Array2<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(AliError::Contract(format!(
            "stable_logdet_psd: non-square matrix {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    let tol = 1e-10 * scale;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[[i, j]] - m[[j, i]]).abs() > tol {
                return Err(AliError::Contract(format!(
                    "stable_logdet_psd: asymmetry {} at ({i},{j}) exceeds tolerance {tol}",
                    (m[[i, j]] - m[[j, i]]).abs()
                )));
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(AliError::Contract(
            "stable_logdet_psd: non-finite input".into(),
        ));
    }
    // Symmetrize before factorizing so tolerated asymmetry cannot bias the result.
    let sym = 0.5 * (m + &m.t());
    let (vals, _) = jacobi_eigh(&sym);
    let mut logdet = 0.0f64;
    for w in vals {
        if w < -tol {
            return Err(AliError::Contract(format!(
                "stable_logdet_psd: eigenvalue {w} indefinite beyond tolerance {tol}"
            )));
        }
        let w = w.max(0.0);
        logdet += w.ln(); // ln(0) = -inf is the honest log det of a singular matrix
    }
    Ok(logdet)
}

/// Central-difference gradient estimate of a scalar function. Test oracle.
pub fn finite_diff_grad<Func>(f: Func, x: &ArrayD<f64>, h: f64) -> Result<ArrayD<f64>>
where
    Func: Fn(&ArrayD<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(AliError::Config(format!(
            "finite_diff_grad: step h must be positive, got {h}"
        )));
    }
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let flat = probe.as_slice_mut().expect("contiguous probe");
        let orig = flat[idx];
        flat[idx] = orig + h;
        let fp = f(&probe)?;
        let flat = probe.as_slice_mut().unwrap();
        flat[idx] = orig - h;
        let fm = f(&probe)?;
        let flat = probe.as_slice_mut().unwrap();
        flat[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AliError::Numeric(format!(
                "finite_diff_grad: non-finite probe values at flat index {idx}: f+={fp}, f-={fm}"
            )));
        }
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max relative error between two gradients, with an absolute floor so
/// near-zero entries do not blow the ratio up.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;

    #[test]
    fn logdet_identity_is_zero() {
        let m = Array2::<f64>::eye(5);
        assert!(stable_logdet_psd(&m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn logdet_diag_two_two() {
        let m = arr2(&[[2.0, 0.0], [0.0, 2.0]]);
        let got = stable_logdet_psd(&m).unwrap();
        assert!((got - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_eigen_oracle_on_random_gram() {
        let mut rng = crate::rng::stream(3, "numerics/gram");
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let d = rng.gen_range(2..8);
            let a = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            let gram = a.t().dot(&a) + Array2::<f64>::eye(d) * 0.5;
            let got = stable_logdet_psd(&gram).unwrap();
            let (vals, _) = jacobi_eigh(&gram);
            let want: f64 = vals.iter().map(|w| w.ln()).sum();
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0));
        }
    }

    #[test]
    fn indefinite_rejected() {
        let m = arr2(&[[1.0, 0.0], [0.0, -0.5]]);
        assert!(stable_logdet_psd(&m).is_err());
    }

    #[test]
    fn jacobi_reconstructs() {
        let m = arr2(&[[4.0, 1.0, 0.5], [1.0, 3.0, -0.2], [0.5, -0.2, 2.0]]);
        let (vals, vecs) = jacobi_eigh(&m);
        // M v_i = w_i v_i
        for (i, w) in vals.iter().enumerate() {
            let v = vecs.column(i).to_owned();
            let mv = m.dot(&v);
            for k in 0..3 {
                assert!((mv[k] - w * v[k]).abs() < 1e-10, "eigpair {i} mismatch");
            }
        }
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let f = |v: &ArrayD<f64>| Ok(0.5 * v.iter().map(|a| a * a).sum::<f64>());
        let g = finite_diff_grad(f, &x, 1e-6).unwrap();
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - xi).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_rejects_zero_step() {
        let x = arr1(&[1.0]).into_dyn();
        let f = |_: &ArrayD<f64>| Ok(0.0);
        assert!(finite_diff_grad(f, &x, 0.0).is_err());
    }
}
