//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compare analytic gradients against central differences for a scalar
/// function of `params`, returning the maximum relative error.
///
/// `build` constructs the loss from parameter nodes; it is re-invoked on a
/// fresh graph for every perturbed evaluation, so it must be a pure
/// function of the parameter values. The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; when both
/// magnitudes are at or below 1e-8 the coordinate counts as an exact zero
/// (a central difference of a shift-invariant direction is pure rounding
/// noise, not gradient signal).
///
/// Run in `f64` with `eps` around `1e-4` for meaningful comparisons;
/// `f32` rounding drowns the truncation error of central differences.
/// Functions with ReLU kinks inside the perturbation window report O(1)
/// errors by construction; keep inputs away from activation boundaries.
pub fn grad_check<S, F>(build: F, params: &[Tensor<S>], eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<(Graph<S>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(TensorError::Usage(
                "grad_check requires a scalar-valued function".into(),
            ));
        }
        Ok((g, ids, loss))
    };

    let (mut g, ids, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<S>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            g.grad_data(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![S::ZERO; p.numel()])
        })
        .collect();

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let floor = S::from_f64(1e-8);
    let two = S::from_f64(2.0);
    let mut max_rel = S::ZERO;
    for pi in 0..params.len() {
        for c in 0..params[pi].numel() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let (g_plus, _, l_plus) = eval(&work)?;
            let f_plus = g_plus.value(l_plus).item();
            work[pi].data_mut()[c] = orig - eps;
            let (g_minus, _, l_minus) = eval(&work)?;
            let f_minus = g_minus.value(l_minus).item();
            work[pi].data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (two * eps);
            let a = analytic[pi][c];
            if a.abs() <= floor && numeric.abs() <= floor {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::new(vec![3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |g, ids| {
                let s = g.scale(ids[0], 4.0)?;
                g.sum_all(s)
            },
            &[p],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear grad check error {err}");
    }

    #[test]
    fn constant_function_is_zero_error() {
        let p = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let err = grad_check(
            |g, _ids| {
                let c = g.input(Tensor::scalar(5.0f64));
                g.sum_all(c)
            },
            &[p],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_accurate() {
        let p = Tensor::new(vec![4], vec![0.5f64, -0.25, 1.5, -2.0]).unwrap();
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum_all(sq)
            },
            &[p],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic grad check error {err}");
    }
}
