use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error over every coordinate:
///
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`
///
/// `f` builds the scalar from the given parameter tensors on the given graph.
/// The numeric side only ever evaluates `f` on inference graphs.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let graph = Graph::recording();
    let leaves: Vec<_> = params.iter().map(|p| graph.leaf(p)).collect();
    let loss = f(&graph, &leaves)?;
    let grads = graph.backward(&loss)?;

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        f(&g, ps)?.item()
    };

    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(&leaves[pi])?;
        for j in 0..param.numel() {
            let mut shifted = params.to_vec();
            let base = param.data()[j];
            shifted[pi].data_mut()[j] = base + eps;
            let up = eval(&shifted)?;
            shifted[pi].data_mut()[j] = base - eps;
            let down = eval(&shifted)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
