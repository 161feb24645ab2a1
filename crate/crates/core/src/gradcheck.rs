//! Central finite differences against [`Graph::backward`].
//!
//! The closure forms evaluate the difference stencil in `f32`, like the model
//! itself. At the default step that stencil carries roughly `1e-4` of absolute
//! rounding noise, so elements whose true gradient is below about `1e-2` can
//! miss a 1% relative tolerance even when the backward pass is exact.
//! [`finite_diff_check_wide`] runs the same graph code in `f64` for the
//! stencil while the gradients under test still come from the `f32` tape.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f32 = 1e-3;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f32 = 1e-6;

/// A scalar-valued function of graph inputs that can be built at any precision.
pub trait GraphFn {
    fn build<T: Element>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    /// Number of elements at or above `tol`.
    pub fn count_above(&self, tol: f32) -> usize {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.data().iter().zip(n.data()))
            .filter(|(&a, &n)| {
                let e = relative_error(a, n);
                e.is_nan() || e >= tol
            })
            .count()
    }

    pub fn total(&self) -> usize {
        self.analytic.iter().map(Tensor::numel).sum()
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn scalar_of<T: Element>(g: &Graph<T>, loss: NodeId) -> Result<T> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "finite_diff_check: function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

fn check_step(h: f32) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite difference step {h} must be positive")));
    }
    Ok(())
}

/// Reverse-mode gradients of `build` at `inputs` on an `f32` tape.
fn analytic<F>(build: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::<f32>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    scalar_of(&g, loss)?;
    let grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of every input.
fn central_differences<T, F>(eval: F, inputs: &[Tensor<T>], h: T) -> Result<Vec<Tensor>>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Result<T>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[which].shape().to_vec());
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            num.data_mut()[i] = ((plus - minus) / (h + h)).widen() as f32;
        }
        out.push(num);
    }
    Ok(out)
}

fn report(analytic: Vec<Tensor>, numeric: Vec<Tensor>) -> GradCheckReport {
    let mut max_rel_error = 0.0f32;
    let mut worst = (0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av, nv);
            // the first NaN sticks, since nothing compares greater than it
            if e > max_rel_error || (e.is_nan() && !max_rel_error.is_nan()) {
                max_rel_error = e;
                worst = (k, i);
            }
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}

/// Compare reverse-mode gradients of a scalar graph function with central
/// differences, over every element of every input. Everything runs in `f32`.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check_step(h)?;
    let analytic = analytic(&f, inputs)?;
    let numeric = central_differences(
        |xs: &[Tensor]| {
            let mut g = Graph::<f32>::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &ids)?;
            scalar_of(&g, loss)
        },
        inputs,
        h,
    )?;
    Ok(report(analytic, numeric))
}

/// Single-input form of [`finite_diff_check_many`]; returns the maximum
/// relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    finite_diff_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}

/// Like [`finite_diff_check_many`], but the difference stencil is evaluated in
/// `f64` around the same `f32` inputs. The gradients under test are still the
/// `f32` reverse-mode ones.
pub fn finite_diff_check_wide<F: GraphFn>(f: &F, inputs: &[Tensor], h: f32) -> Result<GradCheckReport> {
    check_step(h)?;
    let analytic = analytic(|g, ids| f.build(g, ids), inputs)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let numeric = central_differences(
        |xs: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f.build(&mut g, &ids)?;
            scalar_of(&g, loss)
        },
        &wide,
        h as f64,
    )?;
    Ok(report(analytic, numeric))
}
