use std::sync::{Arc, RwLock};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

struct ParamInner {
    name: String,
    value: RwLock<Tensor>,
}

/// A named, trainable leaf. Clones share the same storage, so a parameter
/// used by two modules is one object: updates through either are visible to
/// both.
#[derive(Clone)]
pub struct Parameter(Arc<ParamInner>);

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.0.name)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Parameter(Arc::new(ParamInner {
            name: name.into(),
            value: RwLock::new(Tensor::param(shape, data)?),
        })))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// Current leaf tensor; ops built on it route gradients back here.
    pub fn tensor(&self) -> Tensor {
        self.0.value.read().unwrap().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.read().unwrap().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.read().unwrap().numel()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.value.read().unwrap().grad()
    }

    pub fn zero_grad(&self) {
        self.0.value.read().unwrap().zero_grad();
    }

    /// Replaces the values (shape is fixed) and clears the gradient.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut slot = self.0.value.write().unwrap();
        if data.len() != slot.numel() {
            return Err(shape_err("set_data", slot.shape(), &[data.len()]));
        }
        *slot = Tensor::param(slot.shape(), data)?;
        Ok(())
    }

    pub fn ptr_eq(&self, other: &Parameter) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_share_updates() {
        let p = Parameter::new("w", &[2], vec![1.0, 2.0]).unwrap();
        let q = p.clone();
        p.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(q.data(), vec![3.0, 4.0]);
        assert!(p.ptr_eq(&q));
    }

    #[test]
    fn shape_is_fixed() {
        let p = Parameter::new("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(p.set_data(vec![1.0]).is_err());
    }

    #[test]
    fn gradient_reaches_parameter() {
        let p = Parameter::new("w", &[2], vec![1.0, 2.0]).unwrap();
        p.tensor().mul(&p.tensor()).unwrap().sum().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 4.0]);
        p.set_data(vec![0.0, 0.0]).unwrap();
        assert!(p.grad().is_none());
    }
}
