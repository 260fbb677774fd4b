//! Named views over the trainable tensors of a model.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

pub trait ParamTable: Clone {
    /// Trainable tensors in a fixed order.
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut it = values.iter();
        for (_, mut t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v * v).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, &v| *d += scale * v);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Zero every tensor whose name fails the predicate.
    fn retain_grads(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, mut t) in self.tensors_mut() {
            if !keep(&name) {
                t.fill(0.0);
            }
        }
    }
}
