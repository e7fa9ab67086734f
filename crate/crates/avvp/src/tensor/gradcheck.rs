//! Finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AvvpError, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph plus one leaf per entry of `params` and
/// must return a scalar loss node. Up to `samples` parameter coordinates are
/// drawn from the seeded generator; for each, the relative error
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)` is computed with
/// `g_fd = (f(θ+εe) − f(θ−εe)) / 2ε`. Returns the maximum over the sample.
pub fn gradcheck<F>(
    build: F,
    params: &[Tensor],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(AvvpError::Config(format!("gradcheck eps must be > 0, got {eps}")));
    }

    let eval = |theta: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = theta.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(AvvpError::Contract(
                "gradcheck builder must return a scalar loss".into(),
            ));
        }
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let grad_tensors = ids
            .iter()
            .map(|&id| grads.wrt(id).expect("parameter gradient").clone())
            .collect();
        Ok((value, grad_tensors))
    };

    let (_, analytic) = eval(params)?;

    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples.min(total.max(1) * 4) {
        let flat = rng.random_range(0..total);
        let (pi, ei) = locate(params, flat);

        let mut plus = params.to_vec();
        plus[pi].data_mut()[ei] += eps;
        let mut minus = params.to_vec();
        minus[pi].data_mut()[ei] -= eps;

        let (fp, _) = forward_only(&build, &plus)?;
        let (fm, _) = forward_only(&build, &minus)?;
        let g_fd = (fp - fm) / (2.0 * eps);
        let g_ad = analytic[pi].data()[ei];
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.numel() {
            return (i, flat);
        }
        flat -= p.numel();
    }
    unreachable!("flat index within total parameter count")
}

fn forward_only<F>(build: &F, theta: &[Tensor]) -> Result<(f64, ())>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = theta.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok((g.value(loss).data()[0], ()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact_to_fd_order() {
        // loss = sum(p ⊙ p) + 3·sum(p); central differences are exact on
        // quadratics up to rounding.
        let params = [Tensor::vector(vec![0.7, -1.3, 2.1, 0.4])];
        let err = gradcheck(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let lin = g.affine(ids[0], 3.0, 0.0);
                let s = g.add(sq, lin)?;
                Ok(g.sum_all(s))
            },
            &params,
            1e-5,
            20,
            42,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn mixed_graph_passes() {
        let params = [
            Tensor::new(vec![3, 2], vec![0.3, -0.4, 0.9, 0.1, -0.7, 0.5]).unwrap(),
            Tensor::vector(vec![0.2, -0.1]),
        ];
        let err = gradcheck(
            |g, ids| {
                let a = g.attend(ids[0], ids[0])?;
                let b = g.add_row(a, ids[1])?;
                let s = g.sigmoid(b);
                let sm = g.softmax(s, 0)?;
                let c = g.clamp(sm, 1e-7, 1.0 - 1e-7);
                let l = g.log(c);
                let neg = g.scale(l, -1.0);
                Ok(g.sum_all(neg))
            },
            &params,
            1e-5,
            40,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        // grad_scale(·, 1.5) is the identity forward but inflates the
        // backward signal, so the checker must flag it.
        let params = [Tensor::vector(vec![0.5, -0.8, 1.2])];
        let err = gradcheck(
            |g, ids| {
                let bad = g.grad_scale(ids[0], 1.5);
                let sq = g.mul(bad, bad)?;
                Ok(g.sum_all(sq))
            },
            &params,
            1e-5,
            10,
            9,
        )
        .unwrap();
        assert!(err > 1e-2, "corrupted adjoint slipped through: {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let params = [Tensor::vector(vec![1.0])];
        assert!(gradcheck(|g, ids| Ok(g.sum_all(ids[0])), &params, 0.0, 5, 1).is_err());
    }
}
