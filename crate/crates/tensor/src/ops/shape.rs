use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], || {
            Box::new(|g| vec![Some(g.to_vec())])
        }))
    }

    /// Rows of a 2-d tensor picked by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_2d("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(invalid("gather_rows", format!("row {bad} out of range for {m} rows")));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(vec![idx.len(), n], out, &[self], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *a += b;
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.expect_2d("narrow_cols")?;
        if start + len > n {
            return Err(invalid("narrow_cols", format!("{start}+{len} exceeds {n} columns")));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(Tensor::from_op(vec![m, len], out, &[self], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            })
        }))
    }
}

/// Stacks 2-d tensors with equal column counts.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
    let (_, n) = first.expect_2d("concat_rows")?;
    let mut rows = Vec::with_capacity(parts.len());
    for p in parts {
        let (m, n2) = p.expect_2d("concat_rows")?;
        if n2 != n {
            return Err(shape_err("concat_rows", first.shape(), p.shape()));
        }
        rows.push(m);
    }
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let total: usize = rows.iter().sum();
    let inputs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::from_op(vec![total, n], data, &inputs, move || {
        Box::new(move |g| {
            let mut off = 0;
            rows.iter()
                .map(|&m| {
                    let s = g[off * n..(off + m) * n].to_vec();
                    off += m;
                    Some(s)
                })
                .collect()
        })
    }))
}

/// Joins 2-d tensors side by side; all must share the row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
    let (m, _) = first.expect_2d("concat_cols")?;
    let mut cols = Vec::with_capacity(parts.len());
    for p in parts {
        let (m2, n) = p.expect_2d("concat_cols")?;
        if m2 != m {
            return Err(shape_err("concat_cols", first.shape(), p.shape()));
        }
        cols.push(n);
    }
    let total: usize = cols.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &n) in parts.iter().zip(&cols) {
            data.extend_from_slice(&p.data()[i * n..(i + 1) * n]);
        }
    }
    let inputs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::from_op(vec![m, total], data, &inputs, move || {
        Box::new(move |g| {
            let mut out: Vec<Vec<f64>> = cols.iter().map(|&n| Vec::with_capacity(m * n)).collect();
            for i in 0..m {
                let mut off = i * total;
                for (o, &n) in out.iter_mut().zip(&cols) {
                    o.extend_from_slice(&g[off..off + n]);
                    off += n;
                }
            }
            out.into_iter().map(Some).collect()
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn gather_scatter_gradient() {
        let x = Tensor::param(&[4, 2], (0..8).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
        let r = check_gradients(
            |t| {
                let g = t[0].gather_rows(&[3, 0, 3]).unwrap();
                g.mul(&g).unwrap().sum()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn concat_and_narrow_gradients() {
        let a = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param(&[1, 3], vec![-1.0, 0.5, 0.25]).unwrap();
        let c = Tensor::param(&[2, 1], vec![0.7, -0.7]).unwrap();
        let r = check_gradients(
            |t| {
                let rows = concat_rows(&[t[0].clone(), t[1].clone()]).unwrap();
                let cols = concat_cols(&[t[0].clone(), t[2].clone()]).unwrap();
                let x = rows.narrow_cols(1, 2).unwrap();
                let y = cols.narrow_cols(2, 2).unwrap();
                x.mul(&x).unwrap().sum().add(&y.mul(&y).unwrap().sum()).unwrap()
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn concat_cols_layout() {
        let a = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_cols(&[a, b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_out_of_range() {
        assert!(Tensor::zeros(&[2, 2]).gather_rows(&[2]).is_err());
    }
}
