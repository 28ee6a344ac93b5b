//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then sweeps the record in reverse and accumulates vector-Jacobian products.
//! Model parameters live outside the tape in a [`ParamSet`] and are bound as
//! leaves at the start of each step, so one tape corresponds to one forward
//! and backward pass.

mod tape;
mod tensor;

pub use tape::{SparseMatrix, Tape, Var, MASK_BLOCKED};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Parameters of a [`ParamSet`] as recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; all zeros where no gradient flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

/// Default central-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar function `f` at `x` with
/// central finite differences and returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(&f, x, step, &coords)
}

/// Like [`grad_check`], restricted to the flat coordinates in `coords`.
pub fn grad_check_at<F>(f: &F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of the scalar `f` with respect to every tensor in
/// `params`, probing up to `per_tensor` evenly spaced coordinates of each.
/// Returns the largest relative error.
pub fn grad_check_params<F>(f: F, params: &ParamSet, step: f64, per_tensor: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape);

    let eval = |probe: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = probe.bind(&mut t, false);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (i, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = probe.entries[i].1.data()[k];
            probe.entries[i].1.data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.entries[i].1.data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.entries[i].1.data_mut()[k] = orig;
            worst = worst.max(relative_error(grad[k], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}
