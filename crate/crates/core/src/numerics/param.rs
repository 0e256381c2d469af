use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{shape_err, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a learnable parameter inside a [`Graph`](super::Graph).
/// Clones of a parameter share its id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Real = f32> {
    id: ParamId,
    name: &'static str,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: &'static str, value: Tensor<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            name,
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(shape_err!(
                "param {}: new value {} does not match {}",
                self.name,
                value.shape(),
                self.value.shape()
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(shape_err!(
                "param {}: gradient {} does not match value {}",
                self.name,
                g.shape(),
                self.value.shape()
            ));
        }
        match self.grad.as_mut() {
            Some(acc) => acc.add_assign(g)?,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            id: self.id,
            name: self.name,
            value: self.value.cast(),
            grad: self.grad.as_ref().map(|g| g.cast()),
        }
    }
}
