//! Central-difference gradient checking.
//!
//! The checker is deliberately independent of the tape's reverse pass: it
//! only calls the forward construction twice per perturbed element and
//! compares against whatever `backward` produced.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Perturbation size for central differences at 64-bit.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Max relative error accepted for analytic vs numeric gradients, assuming
/// loss values of order one.
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error per checked input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Checks d(loss)/d(input) for every element of every input against central
/// differences: (f(x+eps) − f(x−eps)) / (2·eps).
///
/// `build` must construct the loss (a scalar) from leaves registered in the
/// order of `inputs`. Relative error uses max(|analytic|, |numeric|, 1) as
/// the denominator, matching loss scales of order one.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                tape.leaf(&t)
            })
            .collect();
        let loss = build(&mut tape, &ids)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::Contract("gradcheck loss must be scalar".into()));
        }
        Ok(tape.data(loss)[0])
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    for (ti, id) in ids.iter().enumerate() {
        let n = inputs[ti].numel();
        let zero = vec![0.0; n];
        let analytic: &[f64] = grads.get(*id).unwrap_or(&zero);
        let mut worst = 0.0f64;
        for e in 0..n {
            let orig = work[ti].data[e];
            work[ti].data[e] = orig + eps;
            let up = eval(&work)?;
            work[ti].data[e] = orig - eps;
            let down = eval(&work)?;
            work[ti].data[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = analytic[e].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[e] - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
        per_input.push(worst);
        if worst > max_rel {
            max_rel = worst;
        }
    }

    Ok(GradcheckReport { per_input, max_rel_err: max_rel, pass: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    #[test]
    fn sum_gradient_is_exact_on_dyadic_inputs() {
        // With dyadic values and a power-of-two eps, x±eps is exact, so the
        // central difference of a plain sum is exactly 1.0: zero error.
        let x = Tensor::new(vec![2, 2], vec![0.5, 0.25, -1.5, 2.0]).unwrap();
        let eps = 2f64.powi(-16);
        let report = gradcheck(|t, ids| t.sum(ids[0]), &[x], eps, 0.0).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn matmul_chain_passes() {
        let mut r = rng(11);
        let a = Tensor::randn(&[3, 4], 0.7, &mut r);
        let b = Tensor::randn(&[4, 2], 0.7, &mut r);
        let report = gradcheck(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                let g = t.gelu(c)?;
                t.sum(g)
            },
            &[a, b],
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        // A value copied out of the tape and re-inserted as a constant must
        // not receive gradient: the probe leaf's gradient through the
        // detached path is structurally absent.
        let mut r = rng(5);
        let probe = Tensor::randn(&[2, 3], 1.0, &mut r).requires_grad(true);
        let other = Tensor::randn(&[2, 3], 1.0, &mut r).requires_grad(true);

        let mut tape = Tape::new();
        let p = tape.leaf(&probe);
        let o = tape.leaf(&other);
        let through = tape.scale(p, 3.0).unwrap(); // on-tape use of probe
        let detached = tape.value(through); // detach
        let c = tape.constant(&detached);
        let loss = tape.mse(o, c).unwrap();
        let grads = tape.backward(loss).unwrap();

        assert!(grads.get(p).is_none(), "probe must not receive gradient through a detached value");
        assert!(grads.get(o).is_some());
    }
}
