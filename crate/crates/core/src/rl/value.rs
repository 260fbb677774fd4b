//! Per-prompt value baseline: one tanh layer over the caption's token bag.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::checkpoint::{ModelKind, TensorTable};
use crate::denoiser::Conditioning;
use crate::error::{ensure, Result};
use crate::params::ParamTable;
use crate::prompt::VOCAB_SIZE;
use crate::rng::{normal_vec, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct ValueParams {
    /// `hidden x vocab`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    /// Output bias, a single entry.
    pub b2: Array1<f64>,
}

/// Mean one-hot encoding of the caption; zero for the null condition.
pub fn token_bag(cond: &Conditioning, vocab: usize) -> Result<Array1<f64>> {
    let mut x = Array1::zeros(vocab);
    if cond.null || cond.tokens.is_empty() {
        return Ok(x);
    }
    let w = 1.0 / cond.tokens.len() as f64;
    for &t in &cond.tokens {
        ensure!(
            (t as usize) < vocab,
            InvalidArgument,
            "token {t} outside vocabulary of {vocab}"
        );
        x[t as usize] += w;
    }
    Ok(x)
}

impl ValueParams {
    pub fn init(hidden: usize, stream: &RngStream) -> Result<Self> {
        ensure!(
            hidden > 0,
            InvalidArgument,
            "value network needs a hidden layer"
        );
        let w1 = normal_vec(&mut stream.fork("w1").rng(), hidden * VOCAB_SIZE);
        let w2 = normal_vec(&mut stream.fork("w2").rng(), hidden);
        let s2 = 0.1 / (hidden as f64).sqrt();
        Ok(Self {
            w1: Array2::from_shape_vec((hidden, VOCAB_SIZE), w1).unwrap(),
            b1: Array1::zeros(hidden),
            w2: Array1::from(w2) * s2,
            b2: Array1::zeros(1),
        })
    }

    pub fn vocab(&self) -> usize {
        self.w1.ncols()
    }

    pub fn predict(&self, cond: &Conditioning) -> Result<f64> {
        let x = token_bag(cond, self.vocab())?;
        let h = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        Ok(self.w2.dot(&h) + self.b2[0])
    }

    /// Mean squared error against `targets` and its gradient.
    pub fn mse_and_grad(
        &self,
        conds: &[&Conditioning],
        targets: &[f64],
    ) -> Result<(f64, ValueParams)> {
        ensure!(!conds.is_empty(), InvalidArgument, "empty value batch");
        ensure!(
            conds.len() == targets.len(),
            Shape,
            "{} conditions for {} targets",
            conds.len(),
            targets.len()
        );
        let n = conds.len() as f64;
        let mut grad = self.zeros_like();
        let mut mse = 0.0;
        for (c, &y) in conds.iter().zip(targets) {
            let x = token_bag(c, self.vocab())?;
            let h = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
            let err = self.w2.dot(&h) + self.b2[0] - y;
            mse += err * err / n;
            let g = 2.0 * err / n;
            grad.b2[0] += g;
            grad.w2.scaled_add(g, &h);
            let ga = (&self.w2 * g) * h.mapv(|v| 1.0 - v * v);
            grad.b1 += &ga;
            for (i, &gi) in ga.iter().enumerate() {
                grad.w1.row_mut(i).scaled_add(gi, &x);
            }
        }
        Ok((mse, grad))
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new(ModelKind::Value);
        for (name, view) in self.tensors() {
            t.push(name, view.to_owned());
        }
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        ensure!(
            t.kind == ModelKind::Value,
            Format,
            "not a value network table"
        );
        let w1 = t
            .get("w1")?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        let vec = |name: &str| -> Result<Array1<f64>> {
            t.get(name)?
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| crate::Error::Format(format!("{name}: {e}")))
        };
        let p = Self {
            b1: vec("b1")?,
            w2: vec("w2")?,
            b2: vec("b2")?,
            w1,
        };
        let h = p.w1.nrows();
        ensure!(
            p.b1.len() == h && p.w2.len() == h && p.b2.len() == 1,
            Format,
            "value network tensors disagree on the hidden width"
        );
        ensure!(p.all_finite(), NonFinite, "value network weights");
        Ok(p)
    }
}

impl ParamTable for ValueParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("w1".into(), self.w1.view().into_dyn()),
            ("b1".into(), self.b1.view().into_dyn()),
            ("w2".into(), self.w2.view().into_dyn()),
            ("b2".into(), self.b2.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("w1".into(), self.w1.view_mut().into_dyn()),
            ("b1".into(), self.b1.view_mut().into_dyn()),
            ("w2".into(), self.w2.view_mut().into_dyn()),
            ("b2".into(), self.b2.view_mut().into_dyn()),
        ]
    }
}

/// One plain gradient step on the value MSE; returns the pre-step error.
pub fn value_update(
    vp: &ValueParams,
    conds: &[&Conditioning],
    targets: &[f64],
    lr: f64,
) -> Result<(ValueParams, f64)> {
    ensure!(
        lr >= 0.0 && lr.is_finite(),
        InvalidArgument,
        "value_lr {lr} must be finite and non-negative"
    );
    let (mse, grad) = vp.mse_and_grad(conds, targets)?;
    let mut out = vp.clone();
    for ((_, mut p), (_, g)) in out.tensors_mut().into_iter().zip(grad.tensors()) {
        p.zip_mut_with(&g, |p, &g| *p -= lr * g);
    }
    ensure!(out.all_finite(), NonFinite, "value network update");
    Ok((out, mse))
}
