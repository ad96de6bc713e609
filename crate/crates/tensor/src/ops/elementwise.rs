use crate::error::{invalid, shape_err, Result};
use crate::kernels;
use crate::tensor::Tensor;

impl Tensor {
    fn map_unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let y: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y_saved = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, &[self], move || {
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y_saved)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            })
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())])
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())])
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move || {
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    /// Adds `row` (length = last dim) to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let n = *self.shape().last().unwrap_or(&1);
        if row.numel() != n || self.ndim() == 0 {
            return Err(shape_err("add_row", self.shape(), row.shape()));
        }
        let r = row.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, row], move || {
            Box::new(move |g| {
                let mut gr = vec![0.0; n];
                for c in g.chunks(n) {
                    for (a, b) in gr.iter_mut().zip(c) {
                        *a += b;
                    }
                }
                vec![Some(g.to_vec()), Some(gr)]
            })
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())])
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], || {
            Box::new(|g| vec![Some(g.to_vec())])
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map_unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        self.map_unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `ln(x / (1 - x))` with both arguments clamped below at `eps`.
    pub fn inverse_sigmoid(&self, eps: f64) -> Tensor {
        self.map_unary(
            move |x| {
                let x = x.clamp(0.0, 1.0);
                (x.max(eps) / (1.0 - x).max(eps)).ln()
            },
            move |x, _| {
                let mut d = 0.0;
                if x > eps && x <= 1.0 {
                    d += 1.0 / x;
                }
                if 1.0 - x > eps && x >= 0.0 {
                    d += 1.0 / (1.0 - x);
                }
                d
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![s], &[self], move || {
            Box::new(move |g| vec![Some(vec![g[0]; n])])
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        Ok(self.sum().scale(1.0 / self.numel() as f64))
    }
}

/// Sums a list of same-shape tensors; an empty list yields a scalar zero.
pub fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
    let mut iter = terms.iter();
    let Some(first) = iter.next() else {
        return Ok(Tensor::scalar(0.0));
    };
    iter.try_fold(first.clone(), |acc, t| acc.add(t))
}
