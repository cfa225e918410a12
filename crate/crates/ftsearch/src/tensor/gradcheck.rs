//! Central-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{FtError, Result};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences at `x`.
///
/// Returns the max over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(FtError::Domain {
            op: "grad_check",
            msg: format!("eps {eps} outside (0, 1e-2]"),
        });
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.data.clone(), x.shape.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.numel(y) != 1 {
        return Err(FtError::Autodiff(format!(
            "grad_check requires a scalar-valued function, got {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(data.to_vec(), x.shape.clone(), false);
        let out = f(&mut t, v)?;
        let val = t.value(out)[0];
        if !val.is_finite() {
            return Err(FtError::Domain {
                op: "grad_check",
                msg: format!("function non-finite ({val}) at perturbed point"),
            });
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(&probe)?;
        probe[i] = orig - eps;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new(vec![4], vec![0.5, -0.8, 1.2, -2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        // Random MLP; gradient checked w.r.t. every weight via a flattened
        // parameter vector that the closure slices apart.
        let mut rng = rng_from_seed(3);
        let dims = [3usize, 5, 4, 1];
        let mut sizes = Vec::new();
        for w in dims.windows(2) {
            sizes.push(w[0] * w[1]);
            sizes.push(w[1]);
        }
        let total: usize = sizes.iter().sum();
        let theta = Tensor::uniform_init(vec![total], 3, &mut rng);
        let input = Tensor::uniform_init(vec![2, 3], 3, &mut rng).data;

        let f = move |t: &mut Tape, v: Var| {
            let mut h = t.leaf(input.clone(), vec![2, 3], false);
            let mut off = 0;
            for (li, w) in dims.windows(2).enumerate() {
                let (m, n) = (w[0], w[1]);
                let flat = t.reshape(v, vec![1, total])?;
                let wmat = t.slice_cols(flat, off, off + m * n)?;
                let wmat = t.reshape(wmat, vec![m, n])?;
                off += m * n;
                let flat = t.reshape(v, vec![1, total])?;
                let bias = t.slice_cols(flat, off, off + n)?;
                let bias = t.reshape(bias, vec![n])?;
                off += n;
                h = t.matmul(h, wmat)?;
                h = t.add_bias(h, bias)?;
                if li + 1 < dims.len() - 1 {
                    h = t.tanh(h);
                }
            }
            Ok(t.sum(h))
        };
        let err = grad_check(f, &theta, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.5).is_err());
    }
}
