//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod kernels;
mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(v);
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    /// Copies the gradient recorded for `var` on `tape`, if any.
    pub fn pull_grad(&mut self, tape: &Tape, var: Var) {
        self.grad = tape.grad(var).map(<[f64]>::to_vec);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences, coordinate by coordinate.
///
/// The error per coordinate is `|analytic − numeric| / max(1, |analytic|)`.
/// Coordinates whose perturbation flips any relu input sign are excluded.
/// `max_per_block` limits how many coordinates of each block are visited
/// (evenly strided); `None` checks them all.
pub fn gradcheck<F>(
    f: F,
    blocks: &[(String, Tensor)],
    h: f64,
    tol: f64,
    max_per_block: Option<usize>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = blocks.iter().map(|(_, t)| tape.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("gradcheck: non-finite forward value"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(blocks)
        .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |point: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = point.iter().map(|p| t.leaf(p)).collect();
        let o = f(&mut t, &vs)?;
        let v = t.value(o)[0];
        if !v.is_finite() {
            return Err(Error::numerical("gradcheck: non-finite forward value"));
        }
        Ok((v, t.relu_pattern()))
    };

    let mut point: Vec<Tensor> = blocks.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, (name, t)) in blocks.iter().enumerate() {
        let stride = match max_per_block {
            Some(m) if m > 0 && t.len() > m => t.len().div_ceil(m),
            _ => 1,
        };
        let mut rep = BlockReport {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for i in (0..t.len()).step_by(stride) {
            let orig = point[b].values[i];
            point[b].values[i] = orig + h;
            let (fp, pp) = eval(&point)?;
            point[b].values[i] = orig - h;
            let (fm, pm) = eval(&point)?;
            point[b].values[i] = orig;
            if pp != pm {
                rep.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[b][i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            rep.max_rel_error = rep.max_rel_error.max(err);
            rep.checked += 1;
        }
        reports.push(rep);
    }
    Ok(GradcheckReport {
        blocks: reports,
        tolerance: tol,
    })
}

/// Single-tensor form of [`gradcheck`].
pub fn gradcheck_point<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck(|t, v| f(t, v[0]), &[("x".to_string(), point.clone())], h, tol, None)
}

#[cfg(test)]
mod tests;
