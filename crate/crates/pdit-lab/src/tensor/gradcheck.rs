//! Central finite-difference verification of the tape's backward rules.

use super::{Tape, Tensor, TensorError, ValueId};

/// Compare analytic gradients of a deterministic tensor program against
/// central finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and must return a scalar loss. Returns the max over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f32) -> Result<f32, TensorError>
where
    F: Fn(&mut Tape, &[ValueId]) -> ValueId,
{
    let eval = |values: &[Vec<f32>]| -> Result<(f32, Option<Vec<Vec<f32>>>), TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.leaf(p.shape.clone(), v.clone(), true))
            .collect();
        let loss = f(&mut tape, &ids);
        tape.ensure_finite()?;
        let loss_val = tape.value(loss);
        if !loss_val.is_finite() {
            return Err(TensorError::NonFinite("grad_check loss".into()));
        }
        let grads = tape.backward(loss)?;
        let gs = ids
            .iter()
            .zip(params)
            .map(|(&id, p)| grads.for_leaf(id, p.numel()))
            .collect();
        Ok((loss_val, Some(gs)))
    };

    let base: Vec<Vec<f32>> = params.iter().map(|p| p.data.clone()).collect();
    let (_, analytic) = eval(&base)?;
    let analytic = analytic.unwrap();

    let mut max_err = 0.0f32;
    let mut probe = base.clone();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.numel() {
            let orig = probe[pi][k];
            probe[pi][k] = orig + h;
            let (lp, _) = eval(&probe)?;
            probe[pi][k] = orig - h;
            let (lm, _) = eval(&probe)?;
            probe[pi][k] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pi][k];
            let err = (a - numeric).abs() / 1.0f32.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        // dyadic values and a power-of-two step keep every f32 operation
        // exact, so the quotient carries no rounding noise at all
        let x = Tensor::new(vec![4], vec![0.25, -0.5, 2.0, 0.75]);
        let err = grad_check(|tape, ids| tape.sum(ids[0]), &[x], 0.0009765625).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        // Emulate a backward rule that is wrong by a factor of two: the
        // program reports the slope of sum(x) at the base point but the
        // perturbed evaluations follow sum(2x).
        let x = Tensor::new(vec![3], vec![0.3, 1.0, -0.2]);
        let base = x.data.clone();
        let err = grad_check(
            |tape, ids| {
                if tape.data(ids[0]) == base.as_slice() {
                    tape.sum(ids[0])
                } else {
                    let doubled = tape.mul_scalar(ids[0], 2.0);
                    tape.sum(doubled)
                }
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1, "corruption not detected: {err}");
    }

    #[test]
    fn nan_program_is_an_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let res = grad_check(
            |tape, ids| {
                let nan = tape.scalar_constant(f32::NAN);
                let s = tape.sum(ids[0]);
                tape.mul(s, nan)
            },
            &[x],
            1e-3,
        );
        assert!(res.is_err());
    }
}
