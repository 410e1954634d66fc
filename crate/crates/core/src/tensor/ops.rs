use super::{Result, Tensor, TensorError};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.ensure_matrix("matmul")?;
    let (k2, n) = b.ensure_matrix("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Input gradient of `y = x · b`: `dx = dy · bᵀ`.
pub fn matmul_backward_input(d_y: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = d_y.ensure_matrix("matmul_backward_input")?;
    let (k, n2) = b.ensure_matrix("matmul_backward_input")?;
    if n != n2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_backward_input",
            left: d_y.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (dd, bd) = (d_y.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dd[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = drow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![m, k], out)
}

/// Weight gradient of `y = x · b`: `db = xᵀ · dy`.
pub fn matmul_backward_weight(x: &Tensor, d_y: &Tensor) -> Result<Tensor> {
    let (m, k) = x.ensure_matrix("matmul_backward_weight")?;
    let (m2, n) = d_y.ensure_matrix("matmul_backward_weight")?;
    if m != m2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_backward_weight",
            left: x.shape().to_vec(),
            right: d_y.shape().to_vec(),
        });
    }
    let (xd, dd) = (x.data(), d_y.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dd[i * n..(i + 1) * n];
        for p in 0..k {
            let xv = xd[i * k + p];
            if xv == 0.0 {
                continue;
            }
            for (o, &dv) in out[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *o += xv * dv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

fn check_parts(dim: usize, parts: usize) -> Result<usize> {
    if parts == 0 || parts > dim || dim % parts != 0 {
        return Err(TensorError::BadSplit { dim, parts });
    }
    Ok(dim / parts)
}

/// Split the leading dimension into `p` equal contiguous pieces.
pub fn split_rows(t: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    let each = check_parts(t.rows(), p)?;
    (0..p).map(|i| t.rows_slice(i * each, each)).collect()
}

/// Split the last dimension of a 2-D tensor into `p` equal pieces.
pub fn split_lastdim(t: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    t.ensure_matrix("split_lastdim")?;
    let each = check_parts(t.cols(), p)?;
    (0..p).map(|i| t.cols_slice(i * each, each)).collect()
}

/// Vertical concatenation along the leading dimension.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
    let inner = &first.shape()[1..];
    if parts.iter().any(|p| &p.shape()[1..] != inner) {
        return Err(TensorError::RaggedParts("concat_rows"));
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Horizontal concatenation of 2-D tensors sharing a row count.
pub fn concat_lastdim(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty("concat_lastdim"))?;
    let rows = first.ensure_matrix("concat_lastdim")?.0;
    let mut cols = 0;
    for p in parts {
        let (r, c) = p.ensure_matrix("concat_lastdim")?;
        if r != rows {
            return Err(TensorError::RaggedParts("concat_lastdim"));
        }
        cols += c;
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut offset = 0;
    for p in parts {
        concat_lastdim_into(&mut out, p, offset)?;
        offset += p.cols();
    }
    Ok(out)
}

/// Write `part` into the pre-sized `out` buffer at column offset `col_offset`.
pub fn concat_lastdim_into(out: &mut Tensor, part: &Tensor, col_offset: usize) -> Result<()> {
    let (rows, cols) = out.ensure_matrix("concat_lastdim_into")?;
    let (pr, pc) = part.ensure_matrix("concat_lastdim_into")?;
    if pr != rows || col_offset + pc > cols {
        return Err(TensorError::ShapeMismatch {
            op: "concat_lastdim_into",
            left: out.shape().to_vec(),
            right: part.shape().to_vec(),
        });
    }
    let od = out.data_mut();
    for i in 0..rows {
        od[i * cols + col_offset..i * cols + col_offset + pc]
            .copy_from_slice(&part.data()[i * pc..(i + 1) * pc]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_small_matches_scalar_loop() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expect = naive(&a, &b);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor::from_rows(&[vec![0.5, -2.0], vec![3.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let any = Tensor::random(&[4, 2], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::zeros(&[3, 4]), &any).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert!(matmul_backward_input(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).is_err());
        assert!(matmul_backward_weight(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn backward_identity_and_zero_cases() {
        let i2 = Tensor::eye(2);
        assert_eq!(matmul_backward_input(&i2, &i2).unwrap(), i2);
        let dy = Tensor::full(&[3, 2], 1.5);
        assert_eq!(
            matmul_backward_weight(&Tensor::zeros(&[3, 4]), &dy).unwrap(),
            Tensor::zeros(&[4, 2])
        );
    }

    /// Central differences of `L(X, B) = <W, X·B>` for a fixed random `W`.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::random(&[3, 2], 1.0, &mut rng);
        let b = Tensor::random(&[2, 2], 1.0, &mut rng);
        let w = Tensor::random(&[3, 2], 1.0, &mut rng);
        let loss = |x: &Tensor, b: &Tensor| w.dot(&Tensor::new(vec![3, 2], naive(x, b)).unwrap()).unwrap();
        let dx = matmul_backward_input(&w, &b).unwrap();
        let db = matmul_backward_weight(&x, &w).unwrap();
        let eps = 1e-5;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += eps;
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &b) - loss(&xm, &b)) / (2.0 * eps);
            assert!(rel(fd, dx.data()[idx]) < 1e-6);
        }
        for idx in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp.data_mut()[idx] += eps;
            bm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &bp) - loss(&x, &bm)) / (2.0 * eps);
            assert!(rel(fd, db.data()[idx]) < 1e-6);
        }
    }

    #[test]
    fn split_shapes_and_errors() {
        let t = Tensor::zeros(&[4, 6]);
        let parts = split_lastdim(&t, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.shape() == [4, 3]));
        assert_eq!(split_lastdim(&t, 4).unwrap_err(), TensorError::BadSplit { dim: 6, parts: 4 });
        assert!(split_rows(&t, 5).is_err());
        assert!(split_rows(&t, 0).is_err());
        assert!(concat_lastdim(&[Tensor::zeros(&[2, 1]), Tensor::zeros(&[3, 1])]).is_err());
        assert!(concat_rows(&[Tensor::zeros(&[2, 1]), Tensor::zeros(&[2, 2])]).is_err());
        assert!(concat_rows(&[]).is_err());
    }

    /// Column split of `B` with concat of the partial products reproduces the
    /// unsplit product (toy sizes a=2, d=4, p2=2).
    #[test]
    fn concat_of_column_partials_matches_unsplit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xa = Tensor::random(&[2, 3], 1.0, &mut rng);
        let b = Tensor::random(&[3, 4], 1.0, &mut rng);
        let halves = split_lastdim(&b, 2).unwrap();
        let y3 = matmul(&xa, &halves[0]).unwrap();
        let y4 = matmul(&xa, &halves[1]).unwrap();
        let y = concat_lastdim(&[y3, y4]).unwrap();
        assert_eq!(y.shape(), [2, 4]);
        let direct = Tensor::new(vec![2, 4], naive(&xa, &b)).unwrap();
        assert!(y.max_abs_diff(&direct) < 1e-12);
    }

    proptest! {
        #[test]
        fn split_concat_round_trip(rows in 1usize..5, cols in 1usize..5, pr in 1usize..4, pc in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::random(&[rows * pr, cols * pc], 10.0, &mut rng);
            prop_assert_eq!(&concat_rows(&split_rows(&t, pr).unwrap()).unwrap(), &t);
            prop_assert_eq!(&concat_lastdim(&split_lastdim(&t, pc).unwrap()).unwrap(), &t);
        }
    }
}
